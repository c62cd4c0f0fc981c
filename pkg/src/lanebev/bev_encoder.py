"""BEV lane encoder: temporal self-attention over the ego-motion-aligned
history grid, then spatial cross-attention lifting multi-camera features
into the BEV plane.  Both are built on one deformable-attention kernel.

Parameter tensors live in a flat dict keyed by slash-separated names; every
function here takes that dict plus a name prefix, so layer stacking is just
a prefix loop (``enc0/tsa``, ``enc1/tsa``, ...).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .dataset import Camera, project
from .tensor import Tensor

# instrumentation: forward sub-block invocation counts, reset by tests
OP_COUNTS = {"tsa": 0, "sca": 0, "ffn": 0, "dec_self_attn": 0, "dec_cross_attn": 0, "dec_ffn": 0}


def reset_op_counts():
    for k in OP_COUNTS:
        OP_COUNTS[k] = 0


@dataclass(frozen=True)
class BEVGridSpec:
    """Row-major H x W grid over a metric, ego-centered extent.

    Rows index the longitudinal (x) axis, columns the lateral (y) axis;
    flattened index = row * W + col.
    """

    h: int
    w: int
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def cell_centers(self) -> np.ndarray:
        """[H*W, 2] metric (x, y) centers, row-major."""
        dx = (self.x_max - self.x_min) / self.h
        dy = (self.y_max - self.y_min) / self.w
        xs = self.x_min + (np.arange(self.h) + 0.5) * dx
        ys = self.y_min + (np.arange(self.w) + 0.5) * dy
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)

    def normalize(self, pts: np.ndarray) -> np.ndarray:
        """Metric (x, y) -> normalized (u, v): u along columns, v along rows."""
        u = (pts[..., 1] - self.y_min) / (self.y_max - self.y_min)
        v = (pts[..., 0] - self.x_min) / (self.x_max - self.x_min)
        return np.stack([u, v], axis=-1)

    def to_metric(self, uv: np.ndarray) -> np.ndarray:
        x = self.x_min + uv[..., 1] * (self.x_max - self.x_min)
        y = self.y_min + uv[..., 0] * (self.y_max - self.y_min)
        return np.stack([x, y], axis=-1)


@dataclass
class BEVGrid:
    emb: Tensor          # [H*W, D]
    spec: BEVGridSpec


@dataclass(frozen=True)
class EgoMotion:
    """Planar rigid transform: p_current = R(dyaw) @ p_previous + (dx, dy)."""

    dx: float = 0.0
    dy: float = 0.0
    dyaw: float = 0.0

    @classmethod
    def from_poses(cls, prev_pose, cur_pose) -> "EgoMotion":
        xp, yp, ap = prev_pose
        xc, yc, ac = cur_pose
        dyaw = ap - ac
        c, s = np.cos(-ac), np.sin(-ac)
        tx = c * (xp - xc) - s * (yp - yc)
        ty = s * (xp - xc) + c * (yp - yc)
        return cls(float(tx), float(ty), float(dyaw))

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.dyaw), np.sin(self.dyaw)
        return np.array([[c, -s], [s, c]])

    def inverse(self) -> "EgoMotion":
        r = self.matrix()
        t = -r.T @ np.array([self.dx, self.dy])
        return EgoMotion(float(t[0]), float(t[1]), -self.dyaw)


# ---------------------------------------------------------------------------
# parameter initialization helpers


def _xavier(rng, n_in, n_out):
    return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out))


def init_linear(params, name, n_in, n_out, rng, zero=False):
    params[name + "/w"] = np.zeros((n_in, n_out)) if zero else _xavier(rng, n_in, n_out)
    params[name + "/b"] = np.zeros(n_out)


def init_layer_norm(params, name, dim):
    params[name + "/gain"] = np.ones(dim)
    params[name + "/bias"] = np.zeros(dim)


def init_deform_attn(params, prefix, dim, value_channels, n_heads, n_points, rng):
    """Offsets start near the reference point; attention starts uniform."""
    init_linear(params, prefix + "/value", value_channels, dim, rng)
    init_linear(params, prefix + "/offset", dim, n_heads * n_points * 2, rng, zero=True)
    angles = 2 * np.pi * np.arange(n_heads * n_points) / (n_heads * n_points)
    params[prefix + "/offset/b"] = (0.04 * np.stack([np.cos(angles), np.sin(angles)], axis=1)).reshape(-1)
    init_linear(params, prefix + "/logit", dim, n_heads * n_points, rng, zero=True)
    init_linear(params, prefix + "/out", dim, dim, rng)


def init_ffn(params, prefix, dim, hidden, rng):
    init_linear(params, prefix + "/fc0", dim, hidden, rng)
    init_linear(params, prefix + "/fc1", hidden, dim, rng)


def _p(params, name):
    return T._as_tensor(params[name])


def run_linear(x, params, name):
    return T.linear(x, _p(params, name + "/w"), _p(params, name + "/b"))


def run_layer_norm(x, params, name):
    return T.layer_norm(x, _p(params, name + "/gain"), _p(params, name + "/bias"))


def run_ffn(x, params, prefix):
    return run_linear(T.relu(run_linear(x, params, prefix + "/fc0")), params, prefix + "/fc1")


# ---------------------------------------------------------------------------
# deformable attention


def map_from_rows(rows: Tensor, h: int, w: int) -> Tensor:
    """[H*W, C] row-major embedding table to a [C, H, W] map."""
    return T.transpose(T.reshape(rows, (h, w, -1)), (2, 0, 1))


def deformable_attention(queries: Tensor, ref_points, value_map: Tensor, params, prefix,
                         n_heads: int, n_points: int) -> Tensor:
    """Per query and head: K learned offsets and softmax weights around the
    reference point; bilinear-samples the projected value map there and
    mixes through the output projection.  Differentiable in queries, value
    map and (via the offsets) the sampling locations.
    """
    n, dim = queries.shape
    if dim % n_heads != 0:
        raise ConfigError(f"embed dim {dim} not divisible by {n_heads} heads")
    d_head = dim // n_heads
    c, h, w = value_map.shape

    flat = T.reshape(T.transpose(value_map, (1, 2, 0)), (h * w, c))
    value = run_linear(flat, params, prefix + "/value")          # [H*W, D]
    value_maps = map_from_rows(value, h, w)                      # [D, H, W]

    refs = T._as_tensor(np.asarray(ref_points, dtype=np.float64)) \
        if not isinstance(ref_points, Tensor) else ref_points
    offsets = T.reshape(run_linear(queries, params, prefix + "/offset"),
                        (n, n_heads * n_points, 2))
    sample_pts = T.add(T.reshape(refs, (n, 1, 2)), offsets)      # [N, h*K, 2]
    logits = T.reshape(run_linear(queries, params, prefix + "/logit"), (n, n_heads, n_points))
    attn = T.softmax(logits, axis=-1)                            # [N, h, K]

    head_outs = []
    for hd in range(n_heads):
        head_map = value_maps[hd * d_head:(hd + 1) * d_head]
        pts = T.reshape(sample_pts[:, hd * n_points:(hd + 1) * n_points, :], (n * n_points, 2))
        sampled = T.reshape(T.bilinear_sample(head_map, pts), (n, n_points, d_head))
        weighted = T.tsum(T.mul(sampled, T.reshape(attn[:, hd, :], (n, n_points, 1))), axis=1)
        head_outs.append(weighted)
    mixed = T.concat(head_outs, axis=1)                          # [N, D]
    return run_linear(mixed, params, prefix + "/out")


# ---------------------------------------------------------------------------
# temporal self-attention


def warp_history(history_emb: Tensor, motion: EgoMotion, spec: BEVGridSpec) -> Tensor:
    """Resample the previous grid at the current grid's cell centers."""
    centers = spec.cell_centers()
    rot = motion.matrix()
    prev_pts = (centers - np.array([motion.dx, motion.dy])) @ rot  # R^T (c - t)
    uv = spec.normalize(prev_pts)
    hist_map = map_from_rows(history_emb, spec.h, spec.w)
    return T.bilinear_sample(hist_map, T._as_tensor(uv))           # [H*W, D]


def temporal_self_attention(bev: BEVGrid, history: BEVGrid | None, motion: EgoMotion,
                            params, prefix, n_heads: int, n_points: int,
                            query_pos: Tensor | None = None) -> BEVGrid:
    """Deformable attention of the current grid over (current, warped history).

    With no history (sequence start) the grid attends to itself only.
    Residual connection applied; normalization is the caller's concern.
    """
    OP_COUNTS["tsa"] += 1
    spec = bev.spec
    if history is not None and history.spec != spec:
        raise T.DimensionError(f"history grid {history.spec} != current grid {spec}")
    refs = spec.normalize(spec.cell_centers())
    q = bev.emb if query_pos is None else T.add(bev.emb, query_pos)
    cur_map = map_from_rows(bev.emb, spec.h, spec.w)
    out = deformable_attention(q, refs, cur_map, params, prefix, n_heads, n_points)
    if history is not None:
        warped = warp_history(history.emb, motion, spec)
        hist_map = map_from_rows(warped, spec.h, spec.w)
        out_hist = deformable_attention(q, refs, hist_map, params, prefix, n_heads, n_points)
        out = T.mul(T.add(out, out_hist), T.Tensor(0.5))
    return BEVGrid(T.add(bev.emb, out), spec)


# ---------------------------------------------------------------------------
# spatial cross-attention


def pillar_heights(n: int = 4, z_min: float = -1.0, z_max: float = 2.0) -> np.ndarray:
    return np.linspace(z_min, z_max, n)


def projected_references(spec: BEVGridSpec, cameras: list[Camera], zs: np.ndarray):
    """Hit masks and normalized image points for every (cell, height, camera).

    Returns (refs, hits): refs[cam][H*W*Z, 2] normalized image coords with
    misses at (-1, -1); hits[cam][H*W*Z] booleans.  Pure geometry.
    """
    centers = spec.cell_centers()
    n = len(centers)
    z = len(zs)
    refs, hits = [], []
    for cam in cameras:
        r = np.full((n * z, 2), -1.0)
        m = np.zeros(n * z, dtype=bool)
        for zi, zz in enumerate(zs):
            pts3 = np.concatenate([centers, np.full((n, 1), zz)], axis=1)
            cam_pts = pts3 @ cam.r.T + cam.t
            depth = cam_pts[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = cam.fx * cam_pts[:, 0] / depth + cam.cx
                v = cam.fy * cam_pts[:, 1] / depth + cam.cy
            ok = (depth > 1e-9) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
            idx = np.arange(n) * z + zi
            m[idx] = ok
            r[idx[ok], 0] = u[ok] / cam.width
            r[idx[ok], 1] = v[ok] / cam.height
        refs.append(r)
        hits.append(m)
    return refs, hits


def spatial_cross_attention(bev: BEVGrid, pv_features, cameras, params, prefix,
                            n_heads: int, n_points: int, zs: np.ndarray | None = None,
                            query_pos: Tensor | None = None) -> BEVGrid:
    """Lift camera features into the BEV grid at projected pillar points.

    Each cell raises Z reference heights; every camera that sees a point
    ("hit") contributes a deformable-attention sample around the projected
    pixel.  Contributions are averaged over hit (view, height) pairs; cells
    without any hit pass through unchanged via the residual connection.
    """
    OP_COUNTS["sca"] += 1
    spec = bev.spec
    if len(pv_features) != len(cameras):
        raise T.DimensionError(f"{len(pv_features)} feature maps vs {len(cameras)} cameras")
    zs = pillar_heights() if zs is None else zs
    n = spec.h * spec.w
    z = len(zs)
    refs, hits = projected_references(spec, cameras, zs)
    if not any(m.any() for m in hits):
        raise ConfigError("degenerate rig: no camera sees any BEV cell")

    q = bev.emb if query_pos is None else T.add(bev.emb, query_pos)
    rep = np.repeat(np.arange(n), z)
    q_rep = q[rep]                                               # [N*Z, D]

    total = None
    counts = np.zeros(n * z)
    for cam_idx, feat in enumerate(pv_features):
        mask = hits[cam_idx]
        if not mask.any():
            continue
        out = deformable_attention(q_rep, refs[cam_idx], feat, params, prefix,
                                   n_heads, n_points)
        out = T.mul(out, T._as_tensor(mask[:, None].astype(np.float64)))
        total = out if total is None else T.add(total, out)
        counts += mask
    per_cell = counts.reshape(n, z).sum(axis=1)
    denom = np.maximum(per_cell, 1.0)
    summed = T.tsum(T.reshape(total, (n, z, -1)), axis=1)
    avg = T.mul(summed, T._as_tensor((1.0 / denom)[:, None]))
    return BEVGrid(T.add(bev.emb, avg), spec)


# ---------------------------------------------------------------------------
# encoder stack


def init_encoder_params(params, cfg, value_channels, rng):
    """cfg needs: embed_dim, ffn_dim, n_heads, n_sample_points,
    n_encoder_layers, bev spec dims."""
    n = cfg.bev_h * cfg.bev_w
    params["bev/query"] = rng.standard_normal((n, cfg.embed_dim)) * 0.02
    params["bev/pos"] = rng.standard_normal((n, cfg.embed_dim)) * 0.02
    for i in range(cfg.n_encoder_layers):
        p = f"enc{i}"
        init_deform_attn(params, p + "/tsa", cfg.embed_dim, cfg.embed_dim,
                         cfg.n_heads, cfg.n_sample_points, rng)
        init_deform_attn(params, p + "/sca", cfg.embed_dim, value_channels,
                         cfg.n_heads, cfg.n_sample_points, rng)
        init_ffn(params, p + "/ffn", cfg.embed_dim, cfg.ffn_dim, rng)
        for j in range(3):
            init_layer_norm(params, f"{p}/ln{j}", cfg.embed_dim)


def encode(pv_features, cameras, history: BEVGrid | None, motion: EgoMotion,
           n_layers: int, params, cfg) -> BEVGrid:
    """n_layers x [temporal self-attn -> spatial cross-attn -> FFN], each
    residual + layer-normed.  The returned grid doubles as the next
    timestep's history."""
    if n_layers < 1:
        raise ConfigError(f"encoder needs >= 1 layer, got {n_layers}")
    spec = BEVGridSpec(cfg.bev_h, cfg.bev_w, cfg.bev_x_min, cfg.bev_x_max,
                       cfg.bev_y_min, cfg.bev_y_max)
    pos = _p(params, "bev/pos")
    x = BEVGrid(_p(params, "bev/query"), spec)
    zs = pillar_heights(cfg.n_pillar_heights)
    for i in range(n_layers):
        p = f"enc{i}"
        x = temporal_self_attention(x, history, motion, params, p + "/tsa",
                                    cfg.n_heads, cfg.n_sample_points, query_pos=pos)
        x = BEVGrid(run_layer_norm(x.emb, params, p + "/ln0"), spec)
        x = spatial_cross_attention(x, pv_features, cameras, params, p + "/sca",
                                    cfg.n_heads, cfg.n_sample_points, zs=zs, query_pos=pos)
        x = BEVGrid(run_layer_norm(x.emb, params, p + "/ln1"), spec)
        OP_COUNTS["ffn"] += 1
        x = BEVGrid(run_layer_norm(T.add(x.emb, run_ffn(x.emb, params, p + "/ffn")),
                                   params, p + "/ln2"), spec)
    return x
