"""Ground-truth pair synthesis between clouds sampled from a deforming mesh.

Points are projected to their nearest location on the source-side mesh,
carried through the deformation by holding (triangle, barycentric) fixed
across the two same-topology mesh states, and paired with the nearest point
of the other cloud. The barycentric transfer realizes exactly the
piecewise-affine map whose per-triangle linear part is the surface
deformation gradient, and it makes the A->B/B->A round trip exact.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import DegenerateGeometryError, InvalidParameterError

logger = logging.getLogger(__name__)

FORWARD = "A->B"
BACKWARD = "B->A"

PROJECTION_CAP_FACTOR = 5.0   # x tau: farther points belong to background


@dataclass
class SurfacePoint:
    """A point expressed on a mesh: triangle id + clamped barycentrics."""

    triangle_id: int
    barycentric: np.ndarray
    world_position: np.ndarray


@dataclass
class DeformationMap:
    """Two states of one mesh topology defining a piecewise-affine map."""

    vertices_a: np.ndarray   # (Vm, 3)
    vertices_b: np.ndarray   # (Vm, 3)
    triangles: np.ndarray    # (T, 3)

    def __post_init__(self):
        self.vertices_a = np.asarray(self.vertices_a,
                                     dtype=np.float64).reshape(-1, 3)
        self.vertices_b = np.asarray(self.vertices_b,
                                     dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles,
                                    dtype=np.int64).reshape(-1, 3)
        if self.vertices_a.shape != self.vertices_b.shape:
            raise InvalidParameterError(
                "deformation map states have different vertex counts")
        for name, verts in (("A", self.vertices_a), ("B", self.vertices_b)):
            a = verts[self.triangles[:, 0]]
            b = verts[self.triangles[:, 1]]
            c = verts[self.triangles[:, 2]]
            areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            if np.any(areas < 1e-14):
                raise DegenerateGeometryError(
                    f"mesh state {name} has degenerate triangles")

    def vertices(self, side):
        return self.vertices_a if side == "A" else self.vertices_b


@dataclass
class PairedIndexSet:
    """Index pairs between two clouds with their pairing residuals."""

    pairs: np.ndarray       # (M, 2) int64: (index into A, index into B)
    residuals: np.ndarray   # (M,) meters
    dropped_beyond_threshold: int = 0
    skipped_off_mesh: int = 0

    def __len__(self):
        return len(self.pairs)


def _project_arrays(points, vertices, triangles):
    if len(triangles) == 0:
        raise DegenerateGeometryError("cannot project onto an empty mesh")
    points = np.ascontiguousarray(points, dtype=np.float64)
    tri_a = np.ascontiguousarray(vertices[triangles[:, 0]])
    tri_b = np.ascontiguousarray(vertices[triangles[:, 1]])
    tri_c = np.ascontiguousarray(vertices[triangles[:, 2]])
    return kernels.closest_point_triangles(points, tri_a, tri_b, tri_c)


def project_to_mesh(points, vertices, triangles):
    """Globally nearest on-mesh point for each query point.

    Returns (surface_points, distances): the closest point on any triangle
    (interior, edge, or vertex) with its triangle id and clamped barycentric
    coordinates.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri_id, bary, closest, dist = _project_arrays(points, vertices, triangles)
    sps = [SurfacePoint(int(tri_id[k]), bary[k].copy(), closest[k].copy())
           for k in range(len(points))]
    return sps, dist


def transport(sp, deformation, direction=FORWARD):
    """Carry a surface point to the other mesh state (same tri, same bary)."""
    dst = deformation.vertices_b if direction == FORWARD else \
        deformation.vertices_a
    tri = deformation.triangles[sp.triangle_id]
    return sp.barycentric @ dst[tri]


def transport_surface_point(sp, deformation, direction=FORWARD):
    """Like transport, but returns a SurfacePoint on the destination mesh."""
    return SurfacePoint(sp.triangle_id, sp.barycentric.copy(),
                        transport(sp, deformation, direction))


def median_nn_spacing(points):
    points = np.atleast_2d(points)
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


def _transported(points, vertices_src, deformation, direction, cap):
    """Project points to the source mesh state and carry them across.

    Returns (kept_indices, transported_positions, n_skipped)."""
    tri_id, bary, _, dist = _project_arrays(points, vertices_src,
                                            deformation.triangles)
    keep = dist <= cap
    dst = (deformation.vertices_b if direction == FORWARD
           else deformation.vertices_a)
    tris = deformation.triangles[tri_id[keep]]
    carried = np.einsum("nk,nkd->nd", bary[keep], dst[tris])
    return np.nonzero(keep)[0], carried, int(np.count_nonzero(~keep))


def synthesize_pairs(cloud_a, cloud_b, deformation, tau_pair=None):
    """Pair points of two clouds related by a simulated mesh deformation.

    Each cloud is projected to its own mesh state, carried to the other
    state, and paired with the nearest point there; the two directions are
    unioned, keeping the smaller residual for duplicate index pairs. Pairs
    with residual beyond tau are dropped (counted), as are points farther
    than 5 tau from their mesh. When ``tau_pair`` is None it defaults, per
    direction, to twice the target cloud's median nearest-neighbor spacing.
    """
    cloud_a = np.atleast_2d(np.asarray(cloud_a, dtype=np.float64))
    cloud_b = np.atleast_2d(np.asarray(cloud_b, dtype=np.float64))
    if len(cloud_a) == 0 or len(cloud_b) == 0:
        raise InvalidParameterError("clouds must be non-empty")

    tau_ab = tau_pair if tau_pair is not None else \
        2.0 * median_nn_spacing(cloud_b)
    tau_ba = tau_pair if tau_pair is not None else \
        2.0 * median_nn_spacing(cloud_a)

    tree_a = cKDTree(cloud_a)
    tree_b = cKDTree(cloud_b)

    best = {}
    dropped = 0
    skipped = 0

    idx_a, carried_ab, sk = _transported(
        cloud_a, deformation.vertices_a, deformation, FORWARD,
        PROJECTION_CAP_FACTOR * tau_ab)
    skipped += sk
    d, j = tree_b.query(carried_ab)
    for i, jj, dd in zip(idx_a, np.atleast_1d(j), np.atleast_1d(d)):
        if dd > tau_ab:
            dropped += 1
            continue
        key = (int(i), int(jj))
        if key not in best or dd < best[key]:
            best[key] = float(dd)

    idx_b, carried_ba, sk = _transported(
        cloud_b, deformation.vertices_b, deformation, BACKWARD,
        PROJECTION_CAP_FACTOR * tau_ba)
    skipped += sk
    d, i = tree_a.query(carried_ba)
    for jj, ii, dd in zip(idx_b, np.atleast_1d(i), np.atleast_1d(d)):
        if dd > tau_ba:
            dropped += 1
            continue
        key = (int(ii), int(jj))
        if key not in best or dd < best[key]:
            best[key] = float(dd)

    if best:
        pairs = np.array(list(best.keys()), dtype=np.int64)
        residuals = np.array(list(best.values()))
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
        residuals = np.zeros(0)
    return PairedIndexSet(pairs=pairs, residuals=residuals,
                          dropped_beyond_threshold=dropped,
                          skipped_off_mesh=skipped)


def export_pairs(paired, cloud_a, cloud_b, path, matches_path=None,
                 cloud_a_ref=None, cloud_b_ref=None):
    """Write pairs as JSON plus the six-column match-text the tracker reads.

    Clouds are stored inline unless ``cloud_*_ref`` path strings are given.
    Returns (json_path, matches_path).
    """
    path = Path(path)
    if len(paired) == 0:
        logger.warning("exporting an empty pair set to %s", path)
    doc = {
        "cloud_a": cloud_a_ref if cloud_a_ref is not None
        else np.asarray(cloud_a).tolist(),
        "cloud_b": cloud_b_ref if cloud_b_ref is not None
        else np.asarray(cloud_b).tolist(),
        "pairs": paired.pairs.tolist(),
        "residuals": paired.residuals.tolist(),
        "dropped_beyond_threshold": paired.dropped_beyond_threshold,
        "skipped_off_mesh": paired.skipped_off_mesh,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)

    if matches_path is None:
        matches_path = path.with_suffix(".matches.txt")
    cloud_a = np.asarray(cloud_a, dtype=np.float64)
    cloud_b = np.asarray(cloud_b, dtype=np.float64)
    with open(matches_path, "w") as fh:
        fh.write("# source xyz -> target xyz, one pair per line\n")
        for i, j in paired.pairs:
            u = cloud_a[i]
            v = cloud_b[j]
            fh.write(f"{u[0]:.9g} {u[1]:.9g} {u[2]:.9g} "
                     f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
    return path, Path(matches_path)


def load_pairs(path):
    with open(path) as fh:
        doc = json.load(fh)
    return PairedIndexSet(
        pairs=np.asarray(doc["pairs"], dtype=np.int64).reshape(-1, 2),
        residuals=np.asarray(doc["residuals"], dtype=np.float64),
        dropped_beyond_threshold=int(doc.get("dropped_beyond_threshold", 0)),
        skipped_off_mesh=int(doc.get("skipped_off_mesh", 0)))
