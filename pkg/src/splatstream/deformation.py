"""Per-tile dynamic encoding: hash-grid features plus a shallow MLP head
predicting position and rotation deltas for target-frame reconstruction.

One field covers a tile (or a low-dynamic tile group sharing motion), mapping
keyframe positions to deltas that are averaged-fit over the GoF's target
frames. Static tiles get no field and are copied."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .gaussians import (GaussianCloud, GaussianPrimitive, ValidationError,
                        quat_multiply, quat_normalize)

_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)
_SEED_MIX = np.uint64(0x9E3779B97F4A7C15)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, loss_curve):
        super().__init__(message)
        self.loss_curve = loss_curve


@dataclass(frozen=True)
class HashGridSpec:
    levels: int = 8
    base_resolution: int = 8
    finest_resolution: int = 128
    table_size: int = 2 ** 14
    features_per_level: int = 2
    hash_seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValidationError("need at least one hash level")
        if self.table_size & (self.table_size - 1):
            raise ValidationError("table_size must be a power of two")
        if self.base_resolution < 1 or self.finest_resolution < self.base_resolution:
            raise ValidationError("resolutions must grow from base to finest")

    def resolutions(self):
        """Strictly increasing geometric progression of grid resolutions."""
        if self.levels == 1:
            return [self.base_resolution]
        ratio = (self.finest_resolution / self.base_resolution) ** (1.0 / (self.levels - 1))
        out, prev = [], 0
        for l in range(self.levels):
            r = int(round(self.base_resolution * ratio ** l))
            r = max(r, prev + 1)
            out.append(r)
            prev = r
        return out

    @property
    def output_width(self):
        return self.levels * self.features_per_level


def _hash_corners(coords, spec):
    """Spatial hash of integer corner coordinates into the level table."""
    c = coords.astype(np.uint64)
    h = (c[..., 0] * _PRIMES[0]) ^ (c[..., 1] * _PRIMES[1]) ^ (c[..., 2] * _PRIMES[2])
    h ^= np.uint64(spec.hash_seed) * _SEED_MIX
    return (h & np.uint64(spec.table_size - 1)).astype(np.intp)


_CORNER_OFFSETS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


def _interp_plan(positions, bbox, spec):
    """Per level: (corner table indices (N,8), trilinear weights (N,8)).

    Positions are normalized to the unit cube of `bbox` and clamped, so
    queries outside the scope degrade to the boundary value.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    extent = np.maximum(hi - lo, 1e-12)
    x = np.clip((np.atleast_2d(positions) - lo) / extent, 0.0, 1.0)
    plans = []
    for res in spec.resolutions():
        scaled = x * res
        c0 = np.minimum(np.floor(scaled), res - 1).astype(np.int64)
        frac = scaled - c0
        corners = c0[:, None, :] + _CORNER_OFFSETS[None, :, :]
        w = np.ones((len(x), 8))
        for axis in range(3):
            t = frac[:, axis][:, None]
            w = w * np.where(_CORNER_OFFSETS[None, :, axis] == 1, t, 1.0 - t)
        plans.append((_hash_corners(corners, spec), w))
    return plans


def init_tables(spec, seed=None):
    rng = np.random.default_rng(spec.hash_seed if seed is None else seed)
    return [rng.uniform(-1e-4, 1e-4, (spec.table_size, spec.features_per_level))
            for _ in range(spec.levels)]


def hash_encode(positions, spec, tables, bbox):
    """Concatenated trilinear hash-grid features for query positions."""
    single = np.asarray(positions).ndim == 1
    plans = _interp_plan(positions, bbox, spec)
    feats = []
    for (idx, w), table in zip(plans, tables):
        feats.append((table[idx] * w[:, :, None]).sum(axis=1))
    out = np.concatenate(feats, axis=1)
    return out[0] if single else out


def _encode_t(plans, table_leaves):
    feats = []
    for (idx, w), leaf in zip(plans, table_leaves):
        n = idx.shape[0]
        gathered = ad.gather(leaf, idx.reshape(-1))              # (N*8, F)
        gathered = ad.reshape(gathered, (n, 8, leaf.value.shape[1]))
        weighted = ad.mul(gathered, w[:, :, None])
        feats.append(ad.sum_(weighted, axis=1))
    return ad.concat(feats, axis=1)


DELTA_WIDTH = 7  # 3 position + 4 quaternion components


class DeformationField:
    """Hash grid + shallow head predicting (d_position, d_quaternion)."""

    def __init__(self, spec, bbox, scope_id, frame_indices, head_hidden=32, seed=0):
        self.spec = spec
        self.bbox = (np.asarray(bbox[0], float), np.asarray(bbox[1], float))
        self.scope_id = int(scope_id)
        self.frame_indices = tuple(int(f) for f in frame_indices)
        self.tables = init_tables(spec, seed=seed)
        self.head = nn.Mlp(nn.mlp([spec.output_width, head_hidden, DELTA_WIDTH], seed=seed + 1))
        # start at the identity motion: zero shift, unit quaternion
        _, b_sl, _ = list(self.head.spec.layer_slices())[-1]
        self.head.params[b_sl.start + 3] = 1.0
        self.head.refresh()

    def param_count(self):
        return sum(t.size for t in self.tables) + self.head.spec.param_count()

    def param_bytes(self):
        return self.param_count() * 4

    def predict_delta(self, positions):
        """Position/rotation deltas for query points inside the scope bbox."""
        enc = hash_encode(positions, self.spec, self.tables, self.bbox)
        out = self.head(enc)
        if out.ndim == 1:
            return out[:3], out[3:]
        return out[:, :3], out[:, 3:]

    def save(self, path):
        arrays = {f"table_{l}": t for l, t in enumerate(self.tables)}
        arrays["head"] = self.head.params
        arrays["bbox_lo"], arrays["bbox_hi"] = self.bbox
        nn.save_checkpoint(path, arrays, meta={
            "levels": self.spec.levels, "base": self.spec.base_resolution,
            "finest": self.spec.finest_resolution, "table_size": self.spec.table_size,
            "features": self.spec.features_per_level, "hash_seed": self.spec.hash_seed,
            "scope_id": self.scope_id, "frames": np.array(self.frame_indices),
            "head_hidden": self.head.spec.widths[1],
        })

    @staticmethod
    def load(path):
        arrays, meta = nn.load_checkpoint(path)
        spec = HashGridSpec(int(meta["levels"]), int(meta["base"]), int(meta["finest"]),
                            int(meta["table_size"]), int(meta["features"]), int(meta["hash_seed"]))
        field = DeformationField(spec, (arrays["bbox_lo"], arrays["bbox_hi"]),
                                 int(meta["scope_id"]), meta["frames"].tolist(),
                                 head_hidden=int(meta["head_hidden"]))
        field.tables = [arrays[f"table_{l}"] for l in range(spec.levels)]
        field.head = nn.Mlp(field.head.spec, arrays["head"])
        return field


def apply_deform(g, d_mu, d_q):
    """Shift the position and compose the rotation; other attributes stay.

    Near-zero delta quaternions are treated as the identity so the
    normalization in the rotation update never divides by zero.
    """
    g.validate()
    d_mu = np.asarray(d_mu, dtype=np.float64)
    d_q = np.asarray(d_q, dtype=np.float64)
    if np.linalg.norm(d_q) < 1e-9:
        d_q = np.array([1.0, 0.0, 0.0, 0.0])
    new_q = quat_multiply(quat_normalize(g.rotation), quat_normalize(d_q))
    return GaussianPrimitive(g.position + d_mu, new_q, g.scale.copy(),
                             g.opacity, g.sh0.copy())


def apply_deform_cloud(cloud, d_mu, d_q):
    d_mu = np.atleast_2d(d_mu)
    d_q = np.atleast_2d(np.asarray(d_q, dtype=np.float64)).copy()
    norms = np.linalg.norm(d_q, axis=1)
    d_q[norms < 1e-9] = [1.0, 0.0, 0.0, 0.0]
    d_q /= np.linalg.norm(d_q, axis=1, keepdims=True)
    base = cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    out_q = np.stack([quat_multiply(base[i], d_q[i]) for i in range(len(cloud))])
    return GaussianCloud(cloud.positions + d_mu, out_q, cloud.scales.copy(),
                         cloud.opacities.copy(), cloud.sh0.copy())


@dataclass
class FitReport:
    loss_curve: list
    frame_position_residuals: dict   # frame index -> mean |mu' - mu_target|
    frame_rotation_residuals: dict   # frame index -> mean (1 - <q', q>^2)


def fit(field, key_positions, key_rotations, targets, epochs=300, lr=0.05,
        momentum=0.9, quat_weight=1.0):
    """Fit the field to ground-truth per-primitive motion over target frames.

    `targets` maps frame index -> (positions, rotations) aligned with the
    keyframe arrays. Minimizes squared positional error plus a quaternion
    alignment penalty; raises TrainingDiverged past 10x the initial loss.
    """
    key_positions = np.asarray(key_positions, dtype=np.float64)
    key_q = np.asarray(key_rotations, dtype=np.float64)
    key_q = key_q / np.linalg.norm(key_q, axis=1, keepdims=True)
    frames = sorted(targets)
    if not frames:
        raise ValidationError("fit requires at least one target frame")
    plans = _interp_plan(key_positions, field.bbox, field.spec)
    opt = nn.MomentumSgd(lr=lr, momentum=momentum)
    losses = []

    for epoch in range(epochs):
        leaves = [ad.Tensor(t, requires_grad=True) for t in field.tables]
        enc = _encode_t(plans, leaves)
        out = field.head.forward_t(enc)
        d_mu = ad.gather(out, [0, 1, 2], axis=1)
        d_q = ad.gather(out, [3, 4, 5, 6], axis=1)
        q_norm = ad.pow_(ad.sum_(ad.mul(d_q, d_q), axis=1, keepdims=True) + 1e-12, 0.5)
        d_q_unit = ad.mul(d_q, ad.pow_(q_norm, -1.0))
        mu_pred = ad.add(d_mu, key_positions)
        q_pred = _quat_product_t(key_q, d_q_unit)

        total = None
        for f in frames:
            tgt_pos, tgt_q = targets[f]
            tgt_q = np.asarray(tgt_q, float)
            tgt_q = tgt_q / np.linalg.norm(tgt_q, axis=1, keepdims=True)
            diff = ad.add(mu_pred, -np.asarray(tgt_pos, dtype=np.float64))
            pos_term = ad.mean(ad.sum_(ad.mul(diff, diff), axis=1))
            dot = ad.sum_(ad.mul(q_pred, tgt_q), axis=1)
            rot_term = ad.mean(ad.add(1.0, ad.mul(ad.mul(dot, dot), -1.0)))
            term = ad.add(pos_term, ad.mul(rot_term, quat_weight))
            total = term if total is None else ad.add(total, term)
        loss = ad.mul(total, 1.0 / len(frames))
        value = float(loss.value)
        losses.append(value)
        if not np.isfinite(value) or (epoch > 0 and value > 10.0 * max(losses[0], 1e-12)):
            raise TrainingDiverged(f"deformation fit diverged at epoch {epoch}: "
                                   f"loss {value:.3e} vs initial {losses[0]:.3e}", losses)
        loss.backward()
        head_leaf = field.head.leaf()
        field.head.params = opt.step(field.head.params, head_leaf.grad, key="head")
        field.head.refresh()
        for l, leaf in enumerate(leaves):
            if leaf.grad is not None:
                field.tables[l] = opt.step(field.tables[l], leaf.grad, key=f"table_{l}")

    pos_res, rot_res = {}, {}
    d_mu_v, d_q_v = field.predict_delta(key_positions)
    norms = np.linalg.norm(d_q_v, axis=1, keepdims=True)
    d_q_unit_v = d_q_v / np.maximum(norms, 1e-12)
    mu_v = key_positions + d_mu_v
    q_v = np.stack([quat_multiply(key_q[i], d_q_unit_v[i]) for i in range(len(key_q))])
    for f in frames:
        tgt_pos, tgt_q = targets[f]
        tgt_q = np.asarray(tgt_q, float)
        tgt_q = tgt_q / np.linalg.norm(tgt_q, axis=1, keepdims=True)
        pos_res[f] = float(np.linalg.norm(mu_v - tgt_pos, axis=1).mean())
        rot_res[f] = float(np.mean(1.0 - np.sum(q_v * tgt_q, axis=1) ** 2))
    return FitReport(losses, pos_res, rot_res)


def _quat_product_t(fixed_q, dq_t):
    """Quaternion product with a constant left factor, differentiable in dq."""
    aw, ax, ay, az = (fixed_q[:, i:i + 1] for i in range(4))
    bw = ad.gather(dq_t, [0], axis=1)
    bx = ad.gather(dq_t, [1], axis=1)
    by = ad.gather(dq_t, [2], axis=1)
    bz = ad.gather(dq_t, [3], axis=1)
    w = ad.add(ad.add(ad.mul(bw, aw), ad.mul(bx, -ax)), ad.add(ad.mul(by, -ay), ad.mul(bz, -az)))
    x = ad.add(ad.add(ad.mul(bx, aw), ad.mul(bw, ax)), ad.add(ad.mul(bz, ay), ad.mul(by, -az)))
    y = ad.add(ad.add(ad.mul(by, aw), ad.mul(bw, ay)), ad.add(ad.mul(bx, az), ad.mul(bz, -ax)))
    z = ad.add(ad.add(ad.mul(bz, aw), ad.mul(bw, az)), ad.add(ad.mul(by, ax), ad.mul(bx, -ay)))
    return ad.concat([w, x, y, z], axis=1)


def reconstruct_tile(tile, cloud, level, field, is_keyframe):
    """Client-side view of one tile at one quality level for a target frame."""
    retained = tile.ladder.retained(level) if tile.ladder is not None else tile.primitive_ids
    subset = cloud.subset(retained)
    if is_keyframe or field is None:
        if field is None and not is_keyframe and tile.motion_class.value != "static":
            raise ValidationError(f"dynamic tile {tile.id} has no deformation field")
        return retained, subset
    d_mu, d_q = field.predict_delta(subset.positions)
    return retained, apply_deform_cloud(subset, d_mu, d_q)
