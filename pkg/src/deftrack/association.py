"""Per-surfel target observations.

Two sources: projective association against the new depth frame (classic
projective ICP, with occlusion and normal gates), or densification of an
externally supplied sparse match set into a per-surfel displacement field.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidParameterError, MatchFileError
from .geometry import backproject_pixels

DEFAULT_OCCLUSION_GATE = 0.02       # meters
DEFAULT_NORMAL_GATE_DEG = 60.0
DEFAULT_DENSIFY_K = 4
DISTANCE_CLAMP = 1e-6               # meters; inverse-distance weight floor


@dataclass
class SparseMatchSet:
    """K point pairs (source u_k in the tracked cloud, target v_k observed)."""

    source: np.ndarray  # (K, 3)
    target: np.ndarray  # (K, 3)
    provenance: str | None = None

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1, 3)
        if len(self.source) != len(self.target):
            raise InvalidParameterError("source/target counts differ")
        if not (np.all(np.isfinite(self.source))
                and np.all(np.isfinite(self.target))):
            raise InvalidParameterError("match coordinates must be finite")

    def __len__(self):
        return len(self.source)

    @property
    def displacements(self):
        return self.target - self.source


@dataclass
class CorrespondenceSet:
    """Per-surfel targets; invalid entries contribute nothing to any cost.

    ``kind`` is "icp" (plane targets: position + unit normal) or
    "correspondence" (point targets only, normals None).
    """

    valid: np.ndarray              # (N,) bool
    target_positions: np.ndarray   # (N, 3)
    target_normals: np.ndarray | None
    kind: str

    def __len__(self):
        return len(self.valid)

    @property
    def validity_fraction(self):
        return float(np.mean(self.valid)) if len(self.valid) else 0.0


def project_points(points, intr):
    """Pinhole projection. Returns (uv (N, 2), valid (N,)); z <= 0 is invalid."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = points[:, 2]
    valid = z > 0
    safe_z = np.where(valid, z, 1.0)
    u = intr.fx * points[:, 0] / safe_z + intr.cx
    v = intr.fy * points[:, 1] / safe_z + intr.cy
    return np.stack([u, v], axis=1), valid


def project(p, intr):
    """Project one point; raises for points at or behind the camera plane."""
    uv, valid = project_points(np.asarray(p, dtype=np.float64)[None, :], intr)
    if not valid[0]:
        raise InvalidParameterError("point is behind the camera")
    return float(uv[0, 0]), float(uv[0, 1])


def bilinear_sample(value_map, valid_mask, uv):
    """Bilinearly sample a (H, W) or (H, W, C) map at continuous pixels.

    A sample is valid only if every touched pixel (nonzero weight) is valid
    and uv lies inside [0, W-1] x [0, H-1]. Returns (values, ok).
    """
    value_map = np.asarray(value_map, dtype=np.float64)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    h, w = valid_mask.shape
    u, v = uv[:, 0], uv[:, 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)

    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.floor(vc).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = uc - u0
    fv = vc - v0

    weights = [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv]
    corners = [(v0, u0), (v0, u1), (v1, u0), (v1, u1)]

    channels = value_map if value_map.ndim == 3 else value_map[..., None]
    out = np.zeros((len(uv), channels.shape[2]))
    ok = inside.copy()
    for wgt, (vv, uu) in zip(weights, corners):
        touched = wgt > 0
        ok &= ~touched | valid_mask[vv, uu]
        out += wgt[:, None] * channels[vv, uu]
    out[~ok] = 0.0
    if value_map.ndim == 2:
        return out[:, 0], ok
    return out, ok


def projective_associate(warped_positions, warped_normals, frame, normal_map,
                         normal_valid, intr,
                         occlusion_gate=DEFAULT_OCCLUSION_GATE,
                         normal_gate_deg=DEFAULT_NORMAL_GATE_DEG):
    """Project warped surfels into the frame and sample their observations.

    An entry is valid when the projection lands on well-defined masked data,
    the sampled depth agrees with the surfel depth within ``occlusion_gate``
    meters, and the sampled normal is within ``normal_gate_deg`` of the
    warped surfel normal.
    """
    warped_positions = np.asarray(warped_positions, dtype=np.float64)
    warped_normals = np.asarray(warped_normals, dtype=np.float64)
    n = len(warped_positions)

    uv, in_front = project_points(warped_positions, intr)
    sample_ok = (frame.depth > 0) & frame.tissue_mask & normal_valid

    depth_s, ok_d = bilinear_sample(frame.depth, sample_ok, uv)
    normal_s, ok_n = bilinear_sample(normal_map, sample_ok, uv)
    valid = in_front & ok_d & ok_n

    # occlusion gate: surfel depth vs observed depth along the same ray
    valid &= np.abs(warped_positions[:, 2] - depth_s) <= occlusion_gate

    norm = np.linalg.norm(normal_s, axis=1)
    unit_ok = norm > 1e-12
    normal_s = np.where(unit_ok[:, None], normal_s
                        / np.maximum(norm, 1e-300)[:, None], 0.0)
    cos_gate = np.cos(np.deg2rad(normal_gate_deg))
    valid &= unit_ok & (np.sum(warped_normals * normal_s, axis=1) >= cos_gate)

    target = np.zeros((n, 3))
    target[valid] = backproject_pixels(uv[valid, 0], uv[valid, 1],
                                       depth_s[valid], intr)
    normals = np.zeros((n, 3))
    normals[valid] = normal_s[valid]
    return CorrespondenceSet(valid=valid, target_positions=target,
                             target_normals=normals, kind="icp")


def load_matches(path):
    """Read a whitespace-separated six-column match file (meters).

    Columns are source xyz then target xyz; '#' starts a comment. Raises
    MatchFileError naming the first bad line; an empty file is an error.
    """
    source, target = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise MatchFileError(
                    f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise MatchFileError(
                    f"{path}:{lineno}: non-numeric value") from None
            if not all(np.isfinite(v) for v in vals):
                raise MatchFileError(f"{path}:{lineno}: non-finite value")
            source.append(vals[:3])
            target.append(vals[3:])
    if not source:
        raise MatchFileError(f"{path}: no matches (at least one required)")
    return SparseMatchSet(np.array(source), np.array(target),
                          provenance=str(path))


def densify_matches(matches, positions, k=DEFAULT_DENSIFY_K, max_source_dist=None):
    """Extend sparse matches to per-surfel targets by local averaging.

    Each surfel receives the inverse-distance-weighted mean displacement of
    its k nearest match sources (distances clamped below at 1e-6 m). Surfels
    whose nearest source is farther than ``max_source_dist`` are invalid
    rather than extrapolated.
    """
    if len(matches) < 1:
        raise InvalidParameterError("densification needs at least one match")
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    k = min(k, len(matches))
    tree = cKDTree(matches.source)
    dist, idx = tree.query(positions, k=k)
    dist = dist.reshape(len(positions), k)
    idx = idx.reshape(len(positions), k)

    w = 1.0 / np.maximum(dist, DISTANCE_CLAMP)
    w /= w.sum(axis=1, keepdims=True)
    displacement = np.sum(w[:, :, None] * matches.displacements[idx], axis=1)
    targets = positions + displacement

    valid = np.ones(len(positions), dtype=bool)
    if max_source_dist is not None:
        valid = dist[:, 0] <= max_source_dist
        targets[~valid] = 0.0
    return CorrespondenceSet(valid=valid, target_positions=targets,
                             target_normals=None, kind="correspondence")
