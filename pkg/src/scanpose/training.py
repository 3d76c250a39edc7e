"""Ground-truth assignment, losses, and the desk-scale training loop.

Tokens are matched to ground truth by their initial anchor geometry: each
ground-truth human, in index order, claims its W nearest unclaimed tokens by
mean-joint distance; everything else is negative. The pose loss is an L1 on
positive tokens' 3D joints plus per-view L1 on their refined 2D estimates
against reprojected ground truth, applied at every layer. The classifier is
trained with binary cross-entropy on the per-token positive probability.

Optimization is plain Adam over the summed loss; everything is deterministic
for a fixed seed. Metrics log as CSV with columns
epoch,pose_loss,cls_loss,val_mpjpe_mm,ap25.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import evalsim, pipeline
from .geometry import project_batch

METRIC_COLUMNS = ("epoch", "pose_loss", "cls_loss", "val_mpjpe_mm", "ap25")

_PROB_FLOOR = 1e-12


class InsufficientTokens(Exception):
    pass


class DivergenceDetected(Exception):
    pass


@dataclass(frozen=True)
class GroundTruthSet:
    humans: np.ndarray        # (Z, J, 3) mm
    positions_2d: np.ndarray  # (Z, T, J, 2) reprojected, never stored stale
    valid_2d: np.ndarray      # (Z, T, J)

    @staticmethod
    def from_scene(scene: evalsim.Scene) -> "GroundTruthSet":
        projections = np.stack([v.projection for v in scene.rig.views])
        Z, J, _ = scene.gt_poses.shape
        uv, _, valid = project_batch(projections, scene.gt_poses.reshape(-1, 3))
        T = len(scene.rig.views)
        return GroundTruthSet(
            humans=scene.gt_poses,
            positions_2d=uv.reshape(T, Z, J, 2).transpose(1, 0, 2, 3),
            valid_2d=valid.reshape(T, Z, J).transpose(1, 0, 2))


@dataclass(frozen=True)
class Assignment:
    token_to_gt: np.ndarray   # (N,) gt index or -1
    gt_to_tokens: tuple       # per gt: tuple of claimed token indices

    @property
    def positive_indices(self) -> np.ndarray:
        return np.nonzero(self.token_to_gt >= 0)[0]


def match_gt(initial_geometry: np.ndarray, gts: GroundTruthSet,
             w: int = 1) -> Assignment:
    """Greedy anchor matching: ground truths claim, in index order, their w
    nearest unclaimed tokens by mean-joint distance (ties to lower index)."""
    if w < 1:
        raise ValueError("w must be at least 1")
    N = initial_geometry.shape[0]
    Z = gts.humans.shape[0]
    if N < w * Z:
        raise InsufficientTokens(f"{N} tokens cannot host {Z} humans * w={w}")
    token_to_gt = np.full(N, -1, dtype=int)
    gt_to_tokens = []
    for z in range(Z):
        # mean-joint L2 between anchors and this human
        d = np.mean(np.linalg.norm(initial_geometry - gts.humans[z][None], axis=-1),
                    axis=-1)
        d = np.where(token_to_gt >= 0, np.inf, d)
        claimed = np.argsort(d, kind="stable")[:w]
        token_to_gt[claimed] = z
        gt_to_tokens.append(tuple(int(i) for i in claimed))
    return Assignment(token_to_gt=token_to_gt, gt_to_tokens=tuple(gt_to_tokens))


def pose_loss(assignment: Assignment, layer_outputs, gts: GroundTruthSet):
    """Summed L1 on positive tokens: 3D joints against ground truth plus
    per-view 2D estimates against reprojected ground truth, at every layer.
    Returns a scalar Tensor (zero Tensor when nothing is positive)."""
    pos = assignment.positive_indices
    if pos.size == 0:
        return ad.Tensor(np.zeros(()))
    z_idx = assignment.token_to_gt[pos]
    target_3d = gts.humans[z_idx]  # (P, J, 3)
    target_2d = gts.positions_2d[z_idx].transpose(1, 0, 2, 3)  # (T, P, J, 2)
    gt_valid = gts.valid_2d[z_idx].transpose(1, 0, 2)  # (T, P, J)
    total = None
    for out in layer_outputs:
        g = out.geometry[pos]
        term = ad.abs_(g - target_3d).sum()
        est = out.positions_2d[:, pos]
        mask = (out.valid[:, pos] & gt_valid)[..., None].astype(float)
        term = term + ad.mul(ad.abs_(est - target_2d), mask).sum()
        total = term if total is None else total + term
    return total


def classification_loss(assignment: Assignment, token_scores: ad.Tensor):
    """Binary cross-entropy of the per-token positive probability against the
    positive/negative label, averaged over tokens."""
    labels = (assignment.token_to_gt >= 0).astype(float)
    s = ad.where(token_scores.data < _PROB_FLOOR,
                 ad.Tensor(np.full(token_scores.shape, _PROB_FLOOR)), token_scores)
    s = ad.where(s.data > 1.0 - _PROB_FLOOR,
                 ad.Tensor(np.full(token_scores.shape, 1.0 - _PROB_FLOOR)), s)
    loss = -(ad.mul(ad.log(s), labels) + ad.mul(ad.log(1.0 - s), 1.0 - labels))
    return loss.mean()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_init(params: dict) -> dict:
    return {"m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()},
            "t": 0}


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict:
    state["t"] += 1
    t = state["t"]
    out = {}
    for k, value in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = value
            continue
        state["m"][k] = beta1 * state["m"][k] + (1 - beta1) * g
        state["v"][k] = beta2 * state["v"][k] + (1 - beta2) * (g * g)
        mhat = state["m"][k] / (1 - beta1 ** t)
        vhat = state["v"][k] / (1 - beta2 ** t)
        out[k] = value - lr * mhat / (np.sqrt(vhat) + eps)
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    learning_rate: float = 4e-4
    lambda_cls: float = 1.0
    w_nearest: int = 1
    val_fraction: float = 0.25

    def __post_init__(self):
        if self.steps < 0 or self.learning_rate < 0:
            raise ValueError("steps and learning_rate must be non-negative")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in [0, 1)")


def split_scenes(scenes, val_fraction: float):
    n_val = int(round(len(scenes) * val_fraction))
    n_val = min(n_val, len(scenes) - 1) if len(scenes) > 1 else 0
    if n_val == 0:
        return list(scenes), list(scenes[-1:])
    return list(scenes[:-n_val]), list(scenes[-n_val:])


def scene_init_seed(config: pipeline.PipelineConfig, scene: evalsim.Scene) -> int:
    """Per-scene token-grid seed: deterministic mix of the model's init seed
    and the scene seed, so token identities carry no placement information."""
    return int((config.init_seed * 1000003 + scene.seed) % (2 ** 31 - 1))


def scene_loss(param_tensors: dict, scene: evalsim.Scene,
               config: pipeline.PipelineConfig, train_cfg: TrainConfig):
    """Forward in train mode and total loss for one scene."""
    outputs, geom0 = pipeline.run_pipeline(scene.pyramids, scene.rig,
                                           param_tensors, config, mode="train",
                                           init_seed=scene_init_seed(config, scene))
    gts = GroundTruthSet.from_scene(scene)
    assignment = match_gt(geom0, gts, w=train_cfg.w_nearest)
    p_loss = pose_loss(assignment, outputs, gts)
    c_losses = [classification_loss(assignment, out.scores) for out in outputs]
    c_loss = c_losses[0]
    for extra in c_losses[1:]:
        c_loss = c_loss + extra
    total = p_loss + train_cfg.lambda_cls * c_loss
    return total, float(p_loss.data), float(c_loss.data)


def evaluate_model(params: dict, config: pipeline.PipelineConfig, scenes):
    """Eval-mode pipeline + metric report per scene; returns per-scene reports
    and the (nan-aware) mean MPJPE and mean AP25."""
    tensors = pipeline.params_to_tensors(params)
    reports = []
    for scene in scenes:
        outputs, _ = pipeline.run_pipeline(scene.pyramids, scene.rig, tensors,
                                           config, mode="eval",
                                           init_seed=scene_init_seed(config, scene))
        last = outputs[-1]
        report = evalsim.evaluate(last.geometry.data, last.scores.data,
                                  scene.gt_poses)
        reports.append(report)
    mpjpes = [r.mpjpe_mm for r in reports if r.mpjpe_defined]
    mean_mpjpe = float(np.mean(mpjpes)) if mpjpes else float("nan")
    mean_ap25 = float(np.mean([r.ap[25.0] for r in reports]))
    return reports, mean_mpjpe, mean_ap25


def train(config: pipeline.PipelineConfig, scenes, rng_seed: int,
          train_cfg: TrainConfig | None = None,
          initial_params: dict | None = None, epoch_offset: int = 0):
    """Adam over pose + classification loss. Returns (params, metric rows).

    Deterministic for fixed seed and inputs: scenes round-robin in order,
    epoch metrics after each pass over the training split (and once at the
    end if training stops mid-epoch).
    """
    if len(scenes) < 1:
        raise ValueError("need at least one scene")
    train_cfg = train_cfg or TrainConfig()
    train_scenes, val_scenes = split_scenes(scenes, train_cfg.val_fraction)
    params = initial_params if initial_params is not None \
        else pipeline.init_params(config, rng_seed)
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    state = adam_init(params)
    metrics = []
    epoch_pose, epoch_cls = [], []

    def flush_epoch():
        epoch = epoch_offset + len(metrics)
        _, val_mpjpe, val_ap25 = evaluate_model(params, config, val_scenes)
        metrics.append({
            "epoch": epoch,
            "pose_loss": float(np.mean(epoch_pose)) if epoch_pose else float("nan"),
            "cls_loss": float(np.mean(epoch_cls)) if epoch_cls else float("nan"),
            "val_mpjpe_mm": val_mpjpe,
            "ap25": val_ap25,
        })
        epoch_pose.clear()
        epoch_cls.clear()

    for step in range(train_cfg.steps):
        scene = train_scenes[step % len(train_scenes)]
        if any(not np.all(np.isfinite(v)) for v in params.values()):
            raise DivergenceDetected(f"non-finite parameters at step {step}")
        tensors = pipeline.params_to_tensors(params)
        total, p_val, c_val = scene_loss(tensors, scene, config, train_cfg)
        if not (np.isfinite(p_val) and np.isfinite(c_val)):
            raise DivergenceDetected(f"non-finite loss at step {step}")
        epoch_pose.append(p_val)
        epoch_cls.append(c_val)
        total.backward()
        grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
        params = adam_step(params, grads, state, train_cfg.learning_rate)
        if (step + 1) % len(train_scenes) == 0:
            flush_epoch()
    if epoch_pose or not metrics:
        flush_epoch()
    return params, metrics


def write_metrics_csv(path: str, rows) -> None:
    """Columns: epoch,pose_loss,cls_loss,val_mpjpe_mm,ap25 (atomic write)."""
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            str(row["epoch"]) if col == "epoch" else repr(float(row[col]))
            for col in METRIC_COLUMNS))
    text = "\n".join(lines) + "\n"
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-metrics-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_metrics_csv(path: str):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = []
        for line in fh:
            vals = line.strip().split(",")
            row = dict(zip(header, vals))
            rows.append({
                "epoch": int(row["epoch"]),
                "pose_loss": float(row["pose_loss"]),
                "cls_loss": float(row["cls_loss"]),
                "val_mpjpe_mm": float(row["val_mpjpe_mm"]),
                "ap25": float(row["ap25"]),
            })
    return rows
