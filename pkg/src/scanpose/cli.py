"""Batch front-end: scene generation, training, evaluation, ablation sweeps.

One JSON config file drives every command, with dotted --set overrides
(--set train.steps=100). Unknown keys are rejected before any output is
written. Exit codes: 0 ok, 2 config error, 3 runtime error. All outputs are
reproducible from (config, seed): containers and CSVs carry no timestamps,
and files are written atomically.

Config schema (defaults apply for missing fields)::

    {
      "seed": 7,
      "num_scenes": 10,
      "scene":    { ... SceneConfig fields ... },
      "pipeline": { ... PipelineConfig fields ... },
      "train":    { ... TrainConfig fields ... }
    }
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import evalsim, pipeline, training

VARIANT_ORDER = ("pss", "proj_attention_only", "cross_attention", "mean")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _build_dataclass(cls, doc: dict, where: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - fields
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    fixed = dict(doc)
    for f in dataclasses.fields(cls):
        if f.name in fixed and isinstance(fixed[f.name], list):
            fixed[f.name] = tuple(fixed[f.name])
    try:
        return cls(**fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int
    num_scenes: int
    scene: evalsim.SceneConfig
    pipeline: pipeline.PipelineConfig
    train: training.TrainConfig

    @staticmethod
    def from_doc(doc: dict) -> "RunConfig":
        known = {"seed", "num_scenes", "scene", "pipeline", "train"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"config: unknown top-level keys {sorted(unknown)}")
        seed = int(doc.get("seed", 0))
        num_scenes = int(doc.get("num_scenes", 10))
        if num_scenes < 0:
            raise ConfigError("num_scenes must be >= 0")
        scene_doc = dict(doc.get("scene", {}))
        scene_doc.setdefault("rng_seed", seed)
        scene = _build_dataclass(evalsim.SceneConfig, scene_doc, "scene")
        pipe_doc = dict(doc.get("pipeline", {}))
        pipe_doc.setdefault("ground_bounds", scene.ground_bounds)
        pipe_doc.setdefault("init_seed", seed)
        pipe_doc.setdefault("num_joints", scene.num_joints)
        pipe_doc.setdefault("feature_dim", scene.feature_dim)
        pipe_doc.setdefault("num_scales", scene.num_scales)
        pipe = _build_dataclass(pipeline.PipelineConfig, pipe_doc, "pipeline")
        if pipe.feature_dim != scene.feature_dim:
            raise ConfigError("pipeline.feature_dim must match scene.feature_dim")
        if pipe.num_joints != scene.num_joints:
            raise ConfigError("pipeline.num_joints must match scene.num_joints")
        train = _build_dataclass(training.TrainConfig, dict(doc.get("train", {})),
                                 "train")
        return RunConfig(seed=seed, num_scenes=num_scenes, scene=scene,
                         pipeline=pipe, train=train)


def _apply_overrides(doc: dict, overrides) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not a section")
        node[parts[-1]] = value
    return doc


def load_config(path: str, overrides=None, seed_override=None) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    doc = _apply_overrides(doc, overrides)
    if seed_override is not None:
        doc["seed"] = seed_override
        doc.setdefault("scene", {})["rng_seed"] = seed_override
    return RunConfig.from_doc(doc)


def _atomic_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-out-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# SVG line plots (no plotting dependency; deterministic output)
# ---------------------------------------------------------------------------

_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def write_line_svg(path: str, series: dict, title: str, xlabel: str,
                   ylabel: str, width: int = 640, height: int = 400) -> None:
    """series: name -> (xs, ys). Lines share axes; NaNs are skipped."""
    margin = 56
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)
           if np.isfinite(y)]
    if not pts:
        pts = [(0.0, 0.0), (1.0, 1.0)]
    xs_all = [p[0] for p in pts]
    ys_all = [p[1] for p in pts]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(x):
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    rows = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-size="14">{title}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" text-anchor="middle" '
        f'font-size="12">{xlabel}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})">{ylabel}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin}" y="{height - margin + 16}" font-size="10" '
        f'text-anchor="middle">{x_lo:.4g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16}" font-size="10" '
        f'text-anchor="middle">{x_hi:.4g}</text>',
        f'<text x="{margin - 4}" y="{height - margin}" font-size="10" '
        f'text-anchor="end">{y_lo:.4g}</text>',
        f'<text x="{margin - 4}" y="{margin + 4}" font-size="10" '
        f'text-anchor="end">{y_hi:.4g}</text>',
    ]
    for i, (name, (xs, ys)) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}"
                          for x, y in zip(xs, ys) if np.isfinite(y))
        if coords:
            rows.append(f'<polyline points="{coords}" fill="none" '
                        f'stroke="{color}" stroke-width="1.5"/>')
        rows.append(f'<text x="{width - margin + 4}" y="{margin + 14 * i + 10}" '
                    f'font-size="10" fill="{color}">{name}</text>')
    rows.append("</svg>")
    _atomic_text(path, "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _scene_for_index(args):
    cfg, seed, index, num_cameras = args
    return evalsim.generate_scene(cfg, seed=seed + index, num_cameras=num_cameras)


def build_scenes(cfg: RunConfig, num_cameras: int | None = None,
                 workers: int = 1):
    jobs = [(cfg.scene, cfg.seed, i, num_cameras) for i in range(cfg.num_scenes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_scene_for_index, jobs))
    return [_scene_for_index(job) for job in jobs]


def cmd_generate(cfg: RunConfig, out_dir: str, workers: int = 1) -> int:
    os.makedirs(out_dir, exist_ok=True)
    scenes = build_scenes(cfg, workers=workers)
    entries = []
    for i, scene in enumerate(scenes):
        prefix = os.path.join(out_dir, f"scene_{i:03d}")
        manifest, grids = evalsim.save_scene(scene, prefix)
        entries.append({"index": i, "manifest": os.path.basename(manifest),
                        "seed": scene.seed})
    doc = {"kind": "scanpose-scene-set", "seed": cfg.seed,
           "count": len(entries), "scenes": entries,
           "config": {"scene": dataclasses.asdict(cfg.scene)}}
    _atomic_text(os.path.join(out_dir, "scenes_manifest.json"),
                 json.dumps(doc, sort_keys=True))
    print(f"wrote {len(entries)} scenes to {out_dir}")
    return 0


def load_scene_dir(path: str):
    manifest = os.path.join(path, "scenes_manifest.json")
    with open(manifest) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "scanpose-scene-set":
        raise ValueError(f"{manifest} is not a scene-set manifest")
    return [evalsim.load_scene(os.path.join(path, e["manifest"]))
            for e in doc["scenes"]]


def cmd_train(cfg: RunConfig, out_dir: str, scenes_dir: str | None = None,
              resume: str | None = None) -> int:
    os.makedirs(out_dir, exist_ok=True)
    scenes = (load_scene_dir(scenes_dir) if scenes_dir
              else build_scenes(cfg))
    initial_params = None
    epoch_offset = 0
    prior_metrics = []
    if resume:
        initial_params, loaded_cfg, meta = pipeline.load_model(resume)
        if loaded_cfg != cfg.pipeline:
            raise ValueError("resume checkpoint was trained with a different "
                             "pipeline configuration")
        epoch_offset = int(meta.get("epochs_done", 0))
        prior = os.path.join(os.path.dirname(os.path.abspath(resume)),
                             "metrics.csv")
        if os.path.exists(prior):
            prior_metrics = training.read_metrics_csv(prior)
    params, metrics = training.train(cfg.pipeline, scenes, rng_seed=cfg.seed,
                                     train_cfg=cfg.train,
                                     initial_params=initial_params,
                                     epoch_offset=epoch_offset)
    all_metrics = prior_metrics + metrics
    n_train = len(training.split_scenes(scenes, cfg.train.val_fraction)[0])
    pipeline.save_model(
        os.path.join(out_dir, "model.bin"), params, cfg.pipeline,
        extra_meta={"seed": cfg.seed, "epochs_done": epoch_offset + len(metrics),
                    "num_train_scenes": n_train,
                    "num_scenes": len(scenes)})
    training.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), all_metrics)
    epochs = [m["epoch"] for m in all_metrics]
    write_line_svg(
        os.path.join(out_dir, "loss_curve.svg"),
        {"pose_loss": (epochs, [m["pose_loss"] for m in all_metrics]),
         "cls_loss": (epochs, [m["cls_loss"] for m in all_metrics]),
         "val_mpjpe_mm": (epochs, [m["val_mpjpe_mm"] for m in all_metrics])},
        title="training curves", xlabel="epoch", ylabel="value")
    final = all_metrics[-1] if all_metrics else {}
    print(f"trained {cfg.train.steps} steps; final val_mpjpe_mm="
          f"{final.get('val_mpjpe_mm')} ap25={final.get('ap25')}")
    return 0


def _aggregate_csv(reports) -> str:
    names = [name for name, _ in reports[0].csv_rows()]
    lines = ["scene," + ",".join(names)]
    for i, rep in enumerate(reports):
        lines.append(",".join([str(i)] + [repr(float(v))
                                          for _, v in rep.csv_rows()]))
    means = []
    for k in range(len(names)):
        vals = [rep.csv_rows()[k][1] for rep in reports]
        vals = [v for v in vals if np.isfinite(v)]
        means.append(float(np.mean(vals)) if vals else float("nan"))
    lines.append(",".join(["mean"] + [repr(v) for v in means]))
    return "\n".join(lines) + "\n"


def cmd_eval(model_path: str, scenes_dir: str, out_dir: str,
             cameras=None) -> int:
    os.makedirs(out_dir, exist_ok=True)
    params, pipe_cfg, _ = pipeline.load_model(model_path)
    scenes = load_scene_dir(scenes_dir)
    camera_counts = cameras or [None]
    sweep = []
    for K in camera_counts:
        if K is None:
            eval_scenes = scenes
            tag = "default"
        else:
            eval_scenes = [evalsim.generate_scene(s.config, seed=s.seed,
                                                  num_cameras=K)
                           for s in scenes]
            tag = f"cam{K}"
        reports, mean_mpjpe, mean_ap25 = training.evaluate_model(
            params, pipe_cfg, eval_scenes)
        for i, rep in enumerate(reports):
            _atomic_text(os.path.join(out_dir, f"report_{tag}_scene{i:03d}.json"),
                         rep.to_json() + "\n")
        _atomic_text(os.path.join(out_dir, f"report_{tag}.csv"),
                     _aggregate_csv(reports))
        sweep.append((K, mean_mpjpe, mean_ap25,
                      float(np.mean([r.map for r in reports]))))
        print(f"eval[{tag}]: mpjpe_mm={mean_mpjpe} ap25={mean_ap25}")
    if len([k for k, *_ in sweep if k is not None]) >= 2:
        ks = [float(k) for k, *_ in sweep if k is not None]
        aps = [a for k, _, a, _ in sweep if k is not None]
        maps = [m for k, _, _, m in sweep if k is not None]
        write_line_svg(os.path.join(out_dir, "ap_vs_cameras.svg"),
                       {"ap25": (ks, aps), "map": (ks, maps)},
                       title="score vs camera count", xlabel="cameras",
                       ylabel="score")
        lines = ["cameras,mpjpe_mm,ap25,map"]
        for k, mp, ap, mv in sweep:
            if k is not None:
                lines.append(f"{k},{mp!r},{ap!r},{mv!r}")
        _atomic_text(os.path.join(out_dir, "sweep.csv"), "\n".join(lines) + "\n")
    return 0


def cmd_ablate(cfg: RunConfig, out_dir: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    scenes = build_scenes(cfg)
    rows = []
    for variant in VARIANT_ORDER:
        pipe_cfg = dataclasses.replace(cfg.pipeline, block_variant=variant)
        params, metrics = training.train(pipe_cfg, scenes, rng_seed=cfg.seed,
                                         train_cfg=cfg.train)
        last = metrics[-1]
        rows.append({"variant": variant,
                     "val_mpjpe_mm": last["val_mpjpe_mm"],
                     "ap25": last["ap25"],
                     "pose_loss": last["pose_loss"],
                     "cls_loss": last["cls_loss"]})
        print(f"ablate[{variant}]: val_mpjpe_mm={last['val_mpjpe_mm']}")
    header = ["variant", "val_mpjpe_mm", "ap25", "pose_loss", "cls_loss"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join([row["variant"]]
                              + [repr(float(row[k])) for k in header[1:]]))
    _atomic_text(os.path.join(out_dir, "ablation.csv"), "\n".join(lines) + "\n")
    _atomic_text(os.path.join(out_dir, "ablation.json"),
                 json.dumps(rows, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scanpose",
        description="multi-view pose estimation on synthetic camera rigs")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--set", action="append", dest="overrides",
                        metavar="KEY=VALUE", help="config override (dotted keys)")
    common.add_argument("--workers", type=int, default=1,
                        help="parallel scene generation workers")

    gen = sub.add_parser("generate", parents=[common],
                         help="write synthetic scene files")
    gen.add_argument("--config", required=True)

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--config", required=True)
    tr.add_argument("--scenes", default=None,
                    help="use pre-generated scenes from this directory")
    tr.add_argument("--resume", default=None,
                    help="continue from a model container")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a model")
    ev.add_argument("--model", required=True)
    ev.add_argument("--scenes", required=True)
    ev.add_argument("--cameras", default=None,
                    help="camera-count override(s), e.g. 3 or 3,5,7")

    ab = sub.add_parser("ablate", parents=[common],
                        help="train and compare all block variants")
    ab.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "generate":
            cfg = load_config(args.config, args.overrides, args.seed)
            return cmd_generate(cfg, args.out, workers=max(1, args.workers))
        if args.command == "train":
            cfg = load_config(args.config, args.overrides, args.seed)
            return cmd_train(cfg, args.out, scenes_dir=args.scenes,
                             resume=args.resume)
        if args.command == "eval":
            cameras = None
            if args.cameras:
                try:
                    cameras = [int(k) for k in str(args.cameras).split(",")]
                except ValueError as exc:
                    raise ConfigError(f"--cameras: {exc}") from exc
                if any(k < 2 for k in cameras):
                    raise ConfigError("--cameras values must be >= 2")
            return cmd_eval(args.model, args.scenes, args.out, cameras=cameras)
        if args.command == "ablate":
            cfg = load_config(args.config, args.overrides, args.seed)
            return cmd_ablate(cfg, args.out)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
