"""Gaussian scene representation, rendering weights, and quality ladders.

A scene holds anisotropic Gaussian primitives (position, unit quaternion,
per-axis scale, opacity, zero-order SH color). Tiles reference primitives by
index; each tile carries a 5-level quality ladder built by saliency-weighted
pruning of the lowest-rendering-weight primitives.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

LADDER_LEVELS = 5
# 3 position + 4 rotation + 3 scale + 1 opacity + 48 color parameters,
# 4 bytes each, per primitive in a fully materialized tile.
FLOATS_PER_PRIMITIVE = 59
BYTES_PER_PRIMITIVE = FLOATS_PER_PRIMITIVE * 4
ENCODED_HEADER_BYTES = 64
# Decode-time anchor: a 10,000-primitive tile takes 33 ms on one core.
DECODE_SECONDS_PER_PRIMITIVE = 0.033 / 10_000


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class MotionClass(enum.Enum):
    STATIC = "static"
    LOW_DYNAMIC = "low_dynamic"
    HIGH_DYNAMIC = "high_dynamic"


# quaternion helpers (w, x, y, z convention) --------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValidationError("cannot normalize a zero quaternion")
    return q / n


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class GaussianPrimitive:
    position: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) unit quaternion w,x,y,z
    scale: np.ndarray     # (3,) per-axis standard deviations, > 0
    opacity: float        # [0, 1]
    sh0: np.ndarray       # (3,) zero-order SH coefficients per channel

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.sh0 = np.asarray(self.sh0, dtype=np.float64)
        self.opacity = float(self.opacity)

    def validate(self):
        for name, arr in (("position", self.position), ("rotation", self.rotation),
                          ("scale", self.scale), ("sh0", self.sh0)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite {name}")
        if not np.isfinite(self.opacity):
            raise ValidationError("non-finite opacity")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValidationError("rotation quaternion must be unit length")
        if np.any(self.scale <= 0.0):
            raise ValidationError("scale components must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValidationError("opacity must lie in [0, 1]")
        return self


class GaussianCloud:
    """Column store of primitives: the primitive store every module consumes."""

    def __init__(self, positions, rotations, scales, opacities, sh0):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 4)
        self.scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
        self.opacities = np.asarray(opacities, dtype=np.float64).reshape(-1)
        self.sh0 = np.asarray(sh0, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if not all(len(a) == n for a in (self.rotations, self.scales, self.opacities, self.sh0)):
            raise ValidationError("mismatched column lengths")

    def __len__(self):
        return len(self.positions)

    def primitive(self, i):
        return GaussianPrimitive(self.positions[i], self.rotations[i],
                                 self.scales[i], self.opacities[i], self.sh0[i])

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.intp)
        return GaussianCloud(self.positions[idx], self.rotations[idx],
                             self.scales[idx], self.opacities[idx], self.sh0[idx])

    def validate(self):
        for i in range(len(self)):
            self.primitive(i).validate()
        return self

    def bbox(self):
        if len(self) == 0:
            raise ValidationError("bbox of empty cloud")
        return self.positions.min(axis=0), self.positions.max(axis=0)

    @staticmethod
    def from_primitives(primitives):
        return GaussianCloud(
            np.stack([p.position for p in primitives]),
            np.stack([p.rotation for p in primitives]),
            np.stack([p.scale for p in primitives]),
            np.array([p.opacity for p in primitives]),
            np.stack([p.sh0 for p in primitives]),
        )


def covariance(g):
    """World-space covariance R diag(scale^2) R^T of one primitive."""
    g.validate()
    rot = quat_to_matrix(g.rotation)
    return rot @ np.diag(g.scale ** 2) @ rot.T


def render_weight(g):
    """Opacity times the root determinant of the covariance (effective volume)."""
    return g.opacity * np.sqrt(np.linalg.det(covariance(g)))


def render_weights(cloud, indices=None):
    """Vectorized rendering weights; det(Sigma) reduces to the scale product."""
    if indices is None:
        scales, opac = cloud.scales, cloud.opacities
    else:
        idx = np.asarray(indices, dtype=np.intp)
        scales, opac = cloud.scales[idx], cloud.opacities[idx]
    return opac * scales.prod(axis=1)


def sample_probabilities(tile, cloud):
    """Per-primitive sampling distribution inside a tile, by rendering weight."""
    if len(tile.primitive_ids) == 0:
        raise ValidationError("sample_probabilities on empty tile")
    w = render_weights(cloud, tile.primitive_ids)
    total = w.sum()
    if total <= 0.0:
        # Degenerate all-transparent tiles still stream; fall back to uniform.
        return np.full(len(w), 1.0 / len(w))
    return w / total


@dataclass
class PruneConfig:
    p_base: float = 0.15
    p_min: float = 0.08
    ceiling_hi: float = 0.30
    ceiling_lo: float = 0.50

    def __post_init__(self):
        if not 0.0 < self.p_min <= self.p_base < 1.0:
            raise ValidationError("need 0 < p_min <= p_base < 1")
        if self.ceiling_hi > self.ceiling_lo:
            raise ValidationError("ceiling_hi must not exceed ceiling_lo")

    @property
    def alpha(self):
        """Derived so a fully salient tile prunes at exactly p_min."""
        return 1.0 - self.p_min / self.p_base


def adjusted_prune_rate(saliency_norm, cfg):
    """Per-level prune rate, shrunk on salient tiles: p_base * (1 - S * alpha)."""
    s = float(saliency_norm)
    if not np.isfinite(s) or not 0.0 <= s <= 1.0:
        raise ValidationError("normalized saliency must lie in [0, 1]")
    return cfg.p_base * (1.0 - s * cfg.alpha)


def prune_ceiling(saliency_norm, cfg):
    """Cumulative prune cap at the lowest level, interpolated by saliency."""
    s = float(saliency_norm)
    return cfg.ceiling_hi + (1.0 - s) * (cfg.ceiling_lo - cfg.ceiling_hi)


@dataclass
class LadderLevel:
    level: int
    cumulative_prune_fraction: float
    retained_primitive_ids: np.ndarray
    size_encoded_bytes: int
    size_reconstructed_bytes: int
    decode_time_s: float
    psnr_db: float = float("nan")
    ssim: float = float("nan")


@dataclass
class QualityLadder:
    levels: list

    def __post_init__(self):
        if len(self.levels) != LADDER_LEVELS:
            raise ValidationError(f"ladder must have exactly {LADDER_LEVELS} levels")
        fracs = [lv.cumulative_prune_fraction for lv in self.levels]
        if fracs[0] != 0.0 or any(b < a - 1e-12 for a, b in zip(fracs, fracs[1:])):
            raise ValidationError("prune fractions must start at 0 and be non-decreasing")
        for a, b in zip(self.levels, self.levels[1:]):
            if not set(b.retained_primitive_ids).issubset(set(a.retained_primitive_ids)):
                raise ValidationError("retained sets must be nested")
        for lv in self.levels:
            if lv.size_encoded_bytes > lv.size_reconstructed_bytes:
                raise ValidationError("encoded size must not exceed reconstructed size")

    def level(self, r):
        if not 0 <= r < len(self.levels):
            raise ValidationError(f"no ladder level {r}")
        return self.levels[r]

    def retained(self, r):
        return self.level(r).retained_primitive_ids

    def set_encoded_bytes(self, field_share_bytes):
        """Attach deformation-field cost once fields are fitted.

        The per-tile encoded payload is the field's parameter share plus a
        fixed header, never exceeding the materialized size of the level.
        """
        for lv in self.levels:
            raw = int(round(field_share_bytes)) + ENCODED_HEADER_BYTES
            lv.size_encoded_bytes = min(raw, lv.size_reconstructed_bytes)

    def set_metrics(self, psnrs, ssims):
        for lv, p, s in zip(self.levels, psnrs, ssims):
            lv.psnr_db = float(p)
            lv.ssim = float(s)


@dataclass
class Tile:
    id: int
    gof_index: int
    bbox: tuple  # (lo, hi) 3-vectors
    primitive_ids: np.ndarray
    saliency: float = 0.0
    motion_class: MotionClass = MotionClass.STATIC
    ladder: QualityLadder = None
    group_id: int = -1
    member_cells: tuple = ()

    def __post_init__(self):
        self.primitive_ids = np.asarray(self.primitive_ids, dtype=np.intp)
        if len(self.primitive_ids) == 0:
            raise ValidationError("tile must contain at least one primitive")

    def centroid(self, cloud):
        return cloud.positions[self.primitive_ids].mean(axis=0)


def _removal_order(tile, cloud, seed=None, stochastic=False):
    """Primitive removal order: least-important first, nested by construction.

    Deterministic mode removes in ascending rendering weight (ties by index).
    Stochastic mode draws a weighted priority order from the sampling
    distribution so retained sets are prefixes of one seeded permutation.
    """
    ids = tile.primitive_ids
    w = render_weights(cloud, ids)
    if stochastic:
        rng = np.random.default_rng(seed)
        p = sample_probabilities(tile, cloud)
        # Gumbel-max trick: keys sorted descending give a weighted
        # sample-without-replacement retention priority.
        keys = np.log(p + 1e-300) + rng.gumbel(size=len(p))
        keep_order = np.argsort(-keys, kind="stable")
    else:
        keep_order = np.lexsort((ids, -w))
    return ids[keep_order]  # first = kept longest


def build_ladder(tile, cloud, saliency_norm, cfg=None, seed=None, stochastic=False):
    """Five nested quality levels with saliency-adjusted cumulative pruning."""
    cfg = cfg or PruneConfig()
    p_adj = adjusted_prune_rate(saliency_norm, cfg)
    c_max = prune_ceiling(saliency_norm, cfg)
    priority = _removal_order(tile, cloud, seed=seed, stochastic=stochastic)
    n = len(priority)
    levels = []
    for r in range(LADDER_LEVELS):
        frac = 0.0 if r == 0 else min(r * p_adj, c_max)
        keep = max(1, int(np.floor(n * (1.0 - frac))))
        retained = np.sort(priority[:keep])
        levels.append(LadderLevel(
            level=r,
            cumulative_prune_fraction=frac,
            retained_primitive_ids=retained,
            size_encoded_bytes=ENCODED_HEADER_BYTES,
            size_reconstructed_bytes=keep * BYTES_PER_PRIMITIVE,
            decode_time_s=keep * DECODE_SECONDS_PER_PRIMITIVE,
        ))
    return QualityLadder(levels)


def normalize_scores(scores):
    """Min-max normalize a score vector; degenerate spreads map to 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi - lo < 1e-12:
        return np.full_like(scores, 0.5)
    return (scores - lo) / (hi - lo)


# scene file format ----------------------------------------------------------
# One record per primitive: px,py,pz,qw,qx,qy,qz,sx,sy,sz,opacity,c0r,c0g,c0b
# as little-endian float32, or the equivalent comma-separated text rows.

_RECORD_FIELDS = 14


def write_scene(path, cloud):
    path = str(path)
    records = np.hstack([cloud.positions, cloud.rotations, cloud.scales,
                         cloud.opacities[:, None], cloud.sh0]).astype("<f4")
    if path.endswith((".csv", ".txt")):
        with open(path, "w") as fh:
            for row in records:
                fh.write(",".join(format(float(v), ".9g") for v in row) + "\n")
    else:
        records.tofile(path)


def read_scene(path, validate=True):
    path = str(path)
    if path.endswith((".csv", ".txt")):
        rows = []
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if len(parts) != _RECORD_FIELDS:
                    raise ValidationError(f"{path}:{ln}: expected {_RECORD_FIELDS} fields")
                rows.append([float(p) for p in parts])
        data = np.asarray(rows, dtype=np.float64).reshape(-1, _RECORD_FIELDS)
    else:
        raw = np.fromfile(path, dtype="<f4")
        if raw.size % _RECORD_FIELDS != 0:
            raise ValidationError(f"{path}: size not a multiple of {_RECORD_FIELDS} floats")
        data = raw.reshape(-1, _RECORD_FIELDS).astype(np.float64)
    cloud = GaussianCloud(data[:, 0:3], data[:, 3:7], data[:, 7:10], data[:, 10], data[:, 11:14])
    # Re-normalize quaternions to absorb float32 round-trip error.
    norms = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValidationError(f"{path}: zero quaternion record")
    cloud.rotations = cloud.rotations / norms
    if validate:
        cloud.validate()
    return cloud
