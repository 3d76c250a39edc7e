"""Projective state-space refinement over joint tokens.

Each layer projects every token's 3D joints into all views as anchors,
aggregates deformable bilinear samples around them (projective attention),
updates features with a bidirectional selective scan over the sampled
(view, joint) token sequence followed by LayerNorm + FFN on a residual path,
then predicts per-view 2D residual offsets and confidences and re-triangulates
each joint. Per-layer 2D estimates are kept for the losses.

The whole forward runs on autodiff Tensors; projection, bilinear sampling,
the selective scan, and triangulation are primitives with analytic backwards.
Model parameters serialize through the versioned container with a JSON
manifest (shapes, seeds, config echo).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import container, geometry, scanning, ssm, tokens

BLOCK_VARIANTS = ("pss", "proj_attention_only", "cross_attention", "mean")

# anchors are considered usable up to this multiple of the image bounds
MASK_MARGIN = 1.5


class AllViewsMasked(Exception):
    """No view produced a valid anchor for some joint."""


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-view multi-scale feature grids: levels[s] is (H_s, W_s, L) and
    scale_factors[s] converts pixels to that level's grid units."""
    levels: tuple
    scale_factors: tuple

    def __post_init__(self):
        levels = tuple(np.asarray(g) for g in self.levels)
        if len(levels) < 1 or len(levels) != len(self.scale_factors):
            raise ValueError("need one scale factor per level")
        dims = {g.shape[-1] for g in levels}
        if len(dims) != 1:
            raise ValueError(f"inconsistent channel counts {dims}")
        if not all(np.all(np.isfinite(g)) for g in levels):
            raise ValueError("feature grids must be finite")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "scale_factors", tuple(float(f) for f in self.scale_factors))

    @property
    def feature_dim(self) -> int:
        return self.levels[0].shape[-1]


@dataclass(frozen=True)
class PipelineConfig:
    num_layers: int = 4
    num_tokens: int = 1024
    num_joints: int = 15
    feature_dim: int = 256
    epsilon: float = 0.1
    block_variant: str = "pss"
    num_points: int = 4
    num_scales: int = 2
    d_state: int = 4
    head_hidden: int = 32
    ffn_hidden: int = 0  # 0 means 2 * feature_dim
    scan_grouping: str = "joint-major"
    attn_order: str = "attn_first"  # projective attention before the scan block
    nms_radius_mm: float = 500.0
    max_offset_px: float = 64.0
    ground_bounds: tuple = (-4000.0, -4000.0, 4000.0, 4000.0)
    init_seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1 or self.num_tokens < 1 or self.num_joints < 1:
            raise ValueError("layer/token/joint counts must be positive")
        if self.feature_dim < 1 or self.num_points < 1 or self.num_scales < 1:
            raise ValueError("feature_dim, num_points, num_scales must be positive")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ValueError(f"block_variant must be one of {BLOCK_VARIANTS}")
        if self.attn_order not in ("attn_first", "scan_first"):
            raise ValueError("attn_order must be 'attn_first' or 'scan_first'")
        if self.scan_grouping not in scanning.GROUPINGS:
            raise ValueError(f"scan_grouping must be one of {scanning.GROUPINGS}")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError("epsilon must be in [0, 1]")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden if self.ffn_hidden > 0 else 2 * self.feature_dim


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def init_params(config: PipelineConfig, rng_seed: int) -> dict:
    """Model parameters keyed by name. Output-side weights start at zero so an
    untrained pipeline is the identity refinement (offsets 0, confidence 0.5,
    score 0.5); input-side projections break symmetry."""
    rng = np.random.default_rng(rng_seed)
    L, J, N = config.feature_dim, config.num_joints, config.num_tokens
    S, P, ds, F, H = (config.num_scales, config.num_points, config.d_state,
                      config.ffn_dim, config.head_hidden)
    params = {
        "person_embeds": rng.standard_normal((N, L)) * 0.5,
        "joint_embeds": rng.standard_normal((J, L)) * 0.5,
        "cls_w": np.zeros((L, 2)),
        "cls_b": np.zeros(2),
    }
    # deformable points start on a small ring so the stencil sees a
    # neighborhood even before the offset head trains
    ring = np.stack([np.cos(2 * np.pi * np.arange(P) / P),
                     np.sin(2 * np.pi * np.arange(P) / P)], axis=1)
    off_bias = np.tile(2.0 * ring, (S, 1)).reshape(-1)
    for i in range(config.num_layers):
        pre = f"layer{i}."
        params[pre + "off_w"] = rng.normal(scale=0.02, size=(L, S * P * 2))
        params[pre + "off_b"] = off_bias.copy()
        params[pre + "alog_w"] = rng.normal(scale=0.02, size=(L, S * P))
        params[pre + "alog_b"] = np.zeros(S * P)
        params[pre + "aout_w"] = np.zeros((L, L))
        params[pre + "aout_b"] = np.zeros(L)
        if config.block_variant in ("pss", "proj_attention_only"):
            params[pre + "A"] = -np.tile(np.arange(1, ds + 1, dtype=float), (L, 1))
            params[pre + "Dss"] = np.ones(L)
            for d in ("f", "b"):
                params[pre + d + "_wdelta"] = rng.normal(scale=1.0 / np.sqrt(L), size=(L, L))
                params[pre + d + "_bdelta"] = np.full(L, float(np.log(np.expm1(0.5))))
                params[pre + d + "_wb"] = rng.normal(scale=1.0 / np.sqrt(L), size=(L, ds))
                params[pre + d + "_wc"] = rng.normal(scale=1.0 / np.sqrt(L), size=(L, ds))
        if config.block_variant == "cross_attention":
            for w in ("wq", "wk", "wv"):
                params[pre + w] = rng.normal(scale=1.0 / np.sqrt(L), size=(L, L))
            params[pre + "wo"] = np.zeros((L, L))
        if config.block_variant in ("pss", "cross_attention"):
            params[pre + "ln_g"] = np.ones(L)
            params[pre + "ln_b"] = np.zeros(L)
            params[pre + "ffn_w1"] = rng.normal(scale=1.0 / np.sqrt(L), size=(L, F))
            params[pre + "ffn_b1"] = np.zeros(F)
            params[pre + "ffn_w2"] = np.zeros((F, L))
            params[pre + "ffn_b2"] = np.zeros(L)
        head_in = (S * P + 1) * L
        params[pre + "head_w1"] = rng.normal(scale=1.0 / np.sqrt(head_in),
                                             size=(head_in, H))
        params[pre + "head_b1"] = np.zeros(H)
        params[pre + "head_w2"] = np.zeros((H, 3))
        params[pre + "head_b2"] = np.zeros(3)
    return params


def params_to_tensors(params: dict) -> dict:
    return {k: ad.parameter(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# differentiable primitives
# ---------------------------------------------------------------------------

def sample_bilinear(grid: np.ndarray, position) -> np.ndarray:
    """Bilinear interpolation of grid (H, W, C) at positions (..., 2) given as
    (x, y) in grid units; out-of-range positions clamp to the border."""
    value, _ = _bilinear_forward(np.asarray(grid, dtype=float),
                                 np.asarray(position, dtype=float))
    return value


def _bilinear_forward(grid: np.ndarray, pos: np.ndarray):
    H, W = grid.shape[:2]
    x = np.clip(pos[..., 0], 0.0, W - 1.0)
    y = np.clip(pos[..., 1], 0.0, H - 1.0)
    x0 = np.clip(np.floor(x), 0, max(W - 2, 0)).astype(int)
    y0 = np.clip(np.floor(y), 0, max(H - 2, 0)).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    g00, g01 = grid[y0, x0], grid[y0, x1]
    g10, g11 = grid[y1, x0], grid[y1, x1]
    value = ((1 - fy) * ((1 - fx) * g00 + fx * g01)
             + fy * ((1 - fx) * g10 + fx * g11))
    # d value / d x is zero where the clamp is active
    in_x = ((pos[..., 0] > 0.0) & (pos[..., 0] < W - 1.0))[..., None]
    in_y = ((pos[..., 1] > 0.0) & (pos[..., 1] < H - 1.0))[..., None]
    dvdx = np.where(in_x, (1 - fy) * (g01 - g00) + fy * (g11 - g10), 0.0)
    dvdy = np.where(in_y, (1 - fx) * (g10 - g00) + fx * (g11 - g01), 0.0)
    cache = (x0, y0, x1, y1, fx, fy, dvdx, dvdy, grid.shape)
    return value, cache


def bilinear_op(grid, pos: ad.Tensor) -> ad.Tensor:
    """Autodiff bilinear sampling; differentiates through both the grid (when
    it is a Tensor) and the positions."""
    grid_t = grid if isinstance(grid, ad.Tensor) else ad.Tensor(grid)
    value, cache = _bilinear_forward(grid_t.data, pos.data)
    x0, y0, x1, y1, fx, fy, dvdx, dvdy, gshape = cache

    def backward(g):
        gpos = np.stack([np.sum(g * dvdx, axis=-1), np.sum(g * dvdy, axis=-1)],
                        axis=-1)
        ggrid = np.zeros(gshape)
        np.add.at(ggrid, (y0, x0), g * (1 - fy) * (1 - fx))
        np.add.at(ggrid, (y0, x1), g * (1 - fy) * fx)
        np.add.at(ggrid, (y1, x0), g * fy * (1 - fx))
        np.add.at(ggrid, (y1, x1), g * fy * fx)
        return ggrid, gpos

    return ad.from_op(value, (grid_t, pos), backward)


def project_op(geometry_t: ad.Tensor, rig: geometry.CameraRig,
               margin: float = MASK_MARGIN):
    """Project token geometry (..., 3) through every view.

    Returns (anchors Tensor (T, ..., 2), valid (T, ...) bool). Invalid anchors
    (degenerate depth or outside margin * image bounds) carry zero gradient.
    """
    projections = np.stack([v.projection for v in rig.views])
    uv, depth, valid = geometry.project_batch(projections, geometry_t.data)
    for t, view in enumerate(rig.views):
        w, h = view.image_width, view.image_height
        lo_x, hi_x = -(margin - 1.0) / 2.0 * w, w + (margin - 1.0) / 2.0 * w
        lo_y, hi_y = -(margin - 1.0) / 2.0 * h, h + (margin - 1.0) / 2.0 * h
        inside = ((uv[t, ..., 0] >= lo_x) & (uv[t, ..., 0] <= hi_x)
                  & (uv[t, ..., 1] >= lo_y) & (uv[t, ..., 1] <= hi_y))
        valid[t] &= inside
    safe_depth = np.where(valid, depth, 1.0)

    def backward(g):
        # u = (P[0] X~) / w, v = (P[1] X~) / w with w = P[2] X~
        gx = np.zeros_like(geometry_t.data)
        for t in range(len(rig.views)):
            P = projections[t]
            du = (P[0, :3][None] - uv[t][..., 0:1] * P[2, :3][None]) / safe_depth[t][..., None]
            dv = (P[1, :3][None] - uv[t][..., 1:2] * P[2, :3][None]) / safe_depth[t][..., None]
            mask = valid[t][..., None]
            gx += np.where(mask, g[t][..., 0:1] * du + g[t][..., 1:2] * dv, 0.0)
        return (gx,)

    return ad.from_op(uv, (geometry_t,), backward), valid


def triangulate_op(positions: ad.Tensor, confidences: ad.Tensor,
                   rig: geometry.CameraRig):
    """Batched confidence-weighted triangulation as a graph primitive.

    positions (B, T, 2), confidences (B, T) (zero = masked). Returns
    (points Tensor (B, 3), ok (B,) bool). Non-ok rows give zero points and
    zero gradients; callers keep previous geometry there.
    """
    pts, ok = geometry.triangulate_batch(positions.data, confidences.data, rig)

    def backward(g):
        _, d_pos, d_conf, ok_j = geometry.triangulation_jacobian_batch(
            positions.data, confidences.data, rig)
        keep = (ok & ok_j)[:, None, None]
        gu = np.where(keep, np.einsum("bi,btik->btk", g, d_pos), 0.0)
        gc = np.where(keep[..., 0], np.einsum("bi,bti->bt", g, d_conf), 0.0)
        return gu, gc

    return ad.from_op(pts, (positions, confidences), backward), ok


def selective_scan_op(x: ad.Tensor, p: dict, prefix: str, direction: str) -> ad.Tensor:
    """Batched selective scan (B, steps, L) wired to the hand-derived
    backward pass; direction is 'f' or 'b' selecting the projection set."""
    names = [f"{prefix}{direction}_wdelta", f"{prefix}{direction}_bdelta",
             f"{prefix}{direction}_wb", f"{prefix}{direction}_wc",
             f"{prefix}A", f"{prefix}Dss"]
    tensors = [p[n] for n in names]
    sel = ssm.SelectiveParams(w_delta=tensors[0].data, b_delta=tensors[1].data,
                              w_b=tensors[2].data, w_c=tensors[3].data,
                              A=tensors[4].data, D=tensors[5].data)
    y, cache = ssm.selective_scan_batch(sel, x.data)

    def backward(g):
        grads = ssm._selective_backward(sel, cache, g)
        return (grads["x"], grads["w_delta"], grads["b_delta"], grads["w_b"],
                grads["w_c"], grads["A"], grads["D"])

    return ad.from_op(y, (x, *tensors), backward)


# ---------------------------------------------------------------------------
# layer forward
# ---------------------------------------------------------------------------

def _attention_samples(visual: ad.Tensor, anchors: ad.Tensor, valid: np.ndarray,
                       pyramids, p: dict, prefix: str, config: PipelineConfig):
    """Deformable sampling around projected anchors.

    Returns (per_view (T, n, J, L) Tensor with zeros at masked views,
    fused (n, J, L) Tensor, stencil (T, n, J, S*P*L) raw samples,
    n_valid (n, J) int). Sample weights are a softmax over (scale, point)
    slots predicted from each joint's feature; every valid view shares them,
    so fusion over views is a masked mean and the whole block is agnostic to
    the number of cameras. The unweighted stencil keeps the local spatial
    structure the offset head needs.
    """
    n, J, L = visual.shape
    T = len(pyramids)
    S, P = config.num_scales, config.num_points
    off = (visual @ p[prefix + "off_w"] + p[prefix + "off_b"]).reshape((n, J, S, P, 2))
    alog = (visual @ p[prefix + "alog_w"] + p[prefix + "alog_b"]).reshape((n, J, S * P))
    w_sp = ad.masked_softmax(alog, np.ones((n, J, S * P), bool), axis=-1)
    w_sp = w_sp.reshape((n, J, S, P))

    per_view = []
    raw_view = []
    for t in range(T):
        pyr = pyramids[t]
        anchor_t = anchors[t].reshape((n, J, 1, 2))
        per_scale = []
        raw_scale = []
        for s in range(min(S, len(pyr.levels))):
            f_s = pyr.scale_factors[s]
            pos = anchor_t * f_s + off[:, :, s]  # (n, J, P, 2)
            samples = bilinear_op(pyr.levels[s], pos)  # (n, J, P, L)
            raw_scale.append(samples)
            weighted = (w_sp[:, :, s].reshape((n, J, P, 1)) * samples).sum(axis=2)
            per_scale.append(weighted)
        total = per_scale[0]
        for extra in per_scale[1:]:
            total = total + extra
        per_view.append(total)  # (n, J, L), convex combination of samples
        raw_view.append(ad.stack(raw_scale, axis=2))  # (n, J, S, P, L)
    stacked = ad.stack(per_view, axis=0)  # (T, n, J, L)
    vmask = valid[..., None].astype(float)
    masked = ad.mul(stacked, vmask)
    stencil = ad.mul(ad.stack(raw_view, axis=0).reshape((T, n, J, S * P * L)),
                     vmask)
    n_valid = valid.sum(axis=0)  # (n, J)
    denom = np.maximum(n_valid, 1)[None, ..., None]
    fused = ad.sum_(ad.div(masked, denom), axis=0)  # (n, J, L) masked mean
    return masked, fused, stencil, n_valid


def _scan_branch(x1: ad.Tensor, per_view: ad.Tensor, p: dict, prefix: str,
                 config: PipelineConfig, num_views: int):
    """GTBS selective scan over per-view sampled tokens conditioned on the
    current features; outputs per-joint features merged over views."""
    n, J, L = x1.shape
    T = num_views
    order = scanning.build_gtbs_orders(T, J, config.scan_grouping)
    items = per_view + x1.reshape((1, n, J, L))  # (T, n, J, L)
    seq = items.transpose((1, 0, 2, 3)).reshape((n, T * J, L))
    fwd = selective_scan_op(seq[:, order.forward], p, prefix, "f")
    bwd = selective_scan_op(seq[:, order.backward], p, prefix, "b")
    merged = (fwd[:, scanning.invert_permutation(order.forward)]
              + bwd[:, scanning.invert_permutation(order.backward)])
    per_joint = merged.reshape((n, T, J, L)).mean(axis=1)  # (n, J, L)
    return per_joint


def _cross_attention_branch(x1: ad.Tensor, per_view: ad.Tensor, p: dict,
                            prefix: str):
    n, J, L = x1.shape
    T = per_view.shape[0]
    kv = per_view.transpose((1, 0, 2, 3)).reshape((n, T * J, L))
    q = x1 @ p[prefix + "wq"]  # (n, J, L)
    k = kv @ p[prefix + "wk"]
    v = kv @ p[prefix + "wv"]
    logits = ad.mul(q @ k.transpose((0, 2, 1)), 1.0 / np.sqrt(L))  # (n, J, TJ)
    att = ad.masked_softmax(logits, np.ones(logits.shape, bool), axis=-1)
    ctx = att @ v  # (n, J, L)
    return ctx @ p[prefix + "wo"]


def _ffn_ln(z: ad.Tensor, p: dict, prefix: str) -> ad.Tensor:
    normed = ad.layer_norm(z, p[prefix + "ln_g"], p[prefix + "ln_b"])
    hidden = ad.tanh(normed @ p[prefix + "ffn_w1"] + p[prefix + "ffn_b1"])
    return hidden @ p[prefix + "ffn_w2"] + p[prefix + "ffn_b2"]


def _block_update(visual: ad.Tensor, anchors: ad.Tensor, valid: np.ndarray,
                  pyramids, p: dict, prefix: str, config: PipelineConfig):
    """One feature update: projective attention plus the variant branch.

    attn_order picks the composition: 'attn_first' feeds the attention
    residual into the scan branch; 'scan_first' runs the scan branch on the
    incoming features and adds the attention residual afterwards. Sampling
    offsets and weights always come from the incoming features.
    Returns (x2, per_view_samples, stencil, n_valid)."""
    per_view, fused, stencil, n_valid = _attention_samples(
        visual, anchors, valid, pyramids, p, prefix, config)
    attn_res = fused @ p[prefix + "aout_w"] + p[prefix + "aout_b"]
    variant = config.block_variant
    if variant == "proj_attention_only":
        x2 = visual + attn_res
    elif variant == "mean":
        # token update degenerates to the plain average of per-view samples
        denom = np.maximum(n_valid, 1)[..., None]
        x2 = ad.div(ad.sum_(per_view, axis=0), denom)
    elif variant == "cross_attention":
        x1 = visual + attn_res
        ctx = _cross_attention_branch(x1, per_view, p, prefix)
        x2 = x1 + _ffn_ln(ctx, p, prefix)
    elif config.attn_order == "scan_first":
        z = visual + _ffn_ln(
            _scan_branch(visual, per_view, p, prefix, config, len(pyramids)),
            p, prefix)
        x2 = z + attn_res
    else:  # pss, attention residual first
        x1 = visual + attn_res
        scanned = _scan_branch(x1, per_view, p, prefix, config, len(pyramids))
        x2 = x1 + _ffn_ln(scanned, p, prefix)
    return x2, per_view, stencil, n_valid


@dataclass
class LayerOutput:
    positions_2d: ad.Tensor   # (T, n, J, 2) refined pixel estimates
    confidences: ad.Tensor    # (T, n, J)
    valid: np.ndarray         # (T, n, J) anchor validity
    geometry: ad.Tensor       # (n, J, 3) updated joints
    visual: ad.Tensor         # (n, J, L) updated features
    scores: ad.Tensor         # (n,) token scores
    score_logits: ad.Tensor   # (n, J, 2)
    kept: np.ndarray          # indices into the previous layer's tokens
    flagged: np.ndarray       # (n, J) joints that kept previous geometry


def refine_layer(visual: ad.Tensor, geom: ad.Tensor, pyramids, rig,
                 p: dict, prefix: str, config: PipelineConfig,
                 strict: bool = False):
    """One projective state-space refinement layer."""
    n, J, L = visual.shape
    T = len(rig.views)
    anchors, valid = project_op(geom, rig)  # (T, n, J, 2), (T, n, J)
    if strict and np.any(valid.sum(axis=0) == 0):
        raise AllViewsMasked("a joint has no valid anchor in any view")

    x2, per_view, stencil, n_valid = _block_update(
        visual, anchors, valid, pyramids, p, prefix, config)

    # offset / confidence head: shared across views, fed by the raw sample
    # stencil (direction-bearing) and the updated joint feature
    x2b = ad.stack([x2] * T, axis=0)  # (T, n, J, L)
    head_in = ad.concat([stencil, x2b], axis=-1)  # (T, n, J, (S*P+1)*L)
    hidden = ad.tanh(head_in @ p[prefix + "head_w1"] + p[prefix + "head_b1"])
    head_out = hidden @ p[prefix + "head_w2"] + p[prefix + "head_b2"]
    delta_uv = ad.mul(ad.tanh(head_out[..., 0:2]), config.max_offset_px)
    conf = ad.sigmoid(head_out[..., 2])
    refined = anchors + delta_uv  # (T, n, J, 2)
    conf_masked = ad.mul(conf, valid.astype(float))  # masked views weigh zero

    flat_pos = refined.transpose((1, 2, 0, 3)).reshape((n * J, T, 2))
    flat_conf = conf_masked.transpose((1, 2, 0)).reshape((n * J, T))
    points, ok = triangulate_op(flat_pos, flat_conf, rig)
    ok_mask = ok.reshape(n, J)
    new_geom = ad.where(ok_mask[..., None], points.reshape((n, J, 3)), geom)
    return x2, new_geom, refined, conf_masked, valid, ~ok_mask


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def init_token_state(config: PipelineConfig,
                     init_seed: int | None = None) -> np.ndarray:
    """Initial token geometry: grid-jittered T-pose translations. A per-scene
    init_seed override varies the jitter so token identity carries no
    placement information across scenes."""
    template, _, _ = tokens.load_tpose(config.num_joints)
    seed = config.init_seed if init_seed is None else init_seed
    return tokens.initial_geometry(config.num_tokens, config.ground_bounds,
                                   seed, template)


def score_op(visual: ad.Tensor, p: dict):
    logits = visual @ p["cls_w"] + p["cls_b"]  # (n, J, 2)
    scores = ad.sigmoid(logits[..., 0]).mean(axis=1)  # (n,)
    return scores, logits


def run_pipeline(pyramids, rig, param_tensors: dict, config: PipelineConfig,
                 mode: str = "eval", init_seed: int | None = None):
    """Initialize tokens and run M refinement layers.

    mode 'train' keeps every token through all layers (losses need stable
    indices); mode 'eval' filters by score >= epsilon per layer and applies
    pose NMS after the final layer. init_seed overrides the token-grid jitter
    (callers pass the scene seed). Returns (layer_outputs, initial_geometry).
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    p = param_tensors
    geom0 = init_token_state(config, init_seed)
    n = config.num_tokens
    visual = p["person_embeds"].reshape((n, 1, config.feature_dim)) \
        + p["joint_embeds"].reshape((1, config.num_joints, config.feature_dim))
    geom = ad.Tensor(geom0)
    alive = np.arange(n)
    outputs: list[LayerOutput] = []
    for i in range(config.num_layers):
        prefix = f"layer{i}."
        x2, geom, refined, conf, valid, flagged = refine_layer(
            visual, geom, pyramids, rig, p, prefix, config)
        scores, logits = score_op(x2, p)
        kept = alive
        if mode == "eval":
            keep = scores.data >= config.epsilon
            if i == config.num_layers - 1 and np.any(keep):
                nms_keep = tokens.nms_keep_mask(
                    geom.data[keep], scores.data[keep], config.nms_radius_mm)
                sel = np.nonzero(keep)[0][nms_keep]
            else:
                sel = np.nonzero(keep)[0]
            x2 = x2[sel]
            geom = geom[sel]
            refined = refined[:, sel]
            conf = conf[:, sel]
            valid = valid[:, sel]
            flagged = flagged[sel]
            scores = scores[sel]
            logits = logits[sel]
            kept = alive[sel]
            alive = kept
        outputs.append(LayerOutput(
            positions_2d=refined, confidences=conf, valid=valid, geometry=geom,
            visual=x2, scores=scores, score_logits=logits, kept=kept,
            flagged=flagged))
        visual = x2
    return outputs, geom0


def final_token_set(outputs, config: PipelineConfig) -> tokens.TokenSet:
    """Package the last layer as a TokenSet (detached numpy)."""
    last = outputs[-1]
    joint_embeds = np.zeros((config.num_joints, config.feature_dim))
    toks = tuple(
        tokens.JointToken(visual=last.visual.data[i], geometry=last.geometry.data[i],
                          person_embed=np.zeros(config.feature_dim),
                          score=float(last.scores.data[i]))
        for i in range(last.geometry.data.shape[0]))
    return tokens.TokenSet(tokens=toks, capacity=config.num_tokens,
                           joint_embeds=joint_embeds)


# ---------------------------------------------------------------------------
# single-token convenience surfaces (documented operations)
# ---------------------------------------------------------------------------

def projective_attention(token: tokens.JointToken, pyramids, rig,
                         p: dict, prefix: str = "layer0.",
                         config: PipelineConfig | None = None):
    """Aggregate deformable samples around one token's projected anchors.

    Returns (features (J, L), anchors (T, J, 2), valid (T, J)). Raises
    AllViewsMasked when some joint has no valid anchor in any view.
    """
    if config is None:
        config = PipelineConfig(num_tokens=1, num_joints=token.geometry.shape[0],
                                feature_dim=token.visual.shape[1],
                                num_scales=len(pyramids[0].levels))
    tensors = {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v)
               for k, v in p.items()}
    visual = ad.Tensor(token.visual[None])
    geom = ad.Tensor(token.geometry[None])
    anchors, valid = project_op(geom, rig)
    if np.any(valid.sum(axis=0) == 0):
        raise AllViewsMasked("a joint has no valid anchor in any view")
    _, fused, _, _ = _attention_samples(visual, anchors, valid, pyramids,
                                        tensors, prefix, config)
    return fused.data[0], anchors.data[:, 0], valid[:, 0]


def pss_block_forward(token: tokens.JointToken, pyramids, rig, p: dict,
                      config: PipelineConfig, prefix: str = "layer0.") -> np.ndarray:
    """One feature update for a single token; returns the new (J, L) visual
    features under the configured block variant."""
    tensors = {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v)
               for k, v in p.items()}
    visual = ad.Tensor(token.visual[None])
    geom = ad.Tensor(token.geometry[None])
    anchors, valid = project_op(geom, rig)
    x2, _, _, _ = _block_update(visual, anchors, valid, pyramids, tensors,
                                prefix, config)
    return x2.data[0]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_model(path: str, params: dict, config: PipelineConfig,
               extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "scanpose-model",
        "config": asdict(config),
        "shapes": {k: list(np.shape(v)) for k, v in sorted(params.items())},
    }
    if extra_meta:
        meta.update(extra_meta)
    container.save_container(path, {f"param/{k}": np.asarray(v)
                                    for k, v in params.items()}, meta)


def load_model(path: str):
    arrays, meta = container.load_container(path)
    if meta.get("kind") != "scanpose-model":
        raise ValueError(f"{path} is not a model container")
    cfg_doc = dict(meta["config"])
    cfg_doc["ground_bounds"] = tuple(cfg_doc["ground_bounds"])
    config = PipelineConfig(**cfg_doc)
    params = {k[len("param/"):]: v for k, v in arrays.items()
              if k.startswith("param/")}
    return params, config, meta
