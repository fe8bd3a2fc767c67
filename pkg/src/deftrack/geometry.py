"""Scene representation and embedded-deformation warping.

A tracked scene is a cloud of surfels (oriented disks) driven by a sparse
deformation graph: each graph node carries a local rigid transform, and every
surfel moves with the normalized-weight blend of its k nearest nodes, followed
by one global rigid transform shared by the whole cloud.

All types are treated as immutable while a frame is being solved (mutation
happens only between frames: fusion appends, rest positions update), so they
are safe to share across threads; warping is per-point independent and its
results do not depend on evaluation order.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import (
    ConfigurationError,
    DegenerateGeometryError,
    InvalidParameterError,
)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

DEFAULT_K_NEIGHBORS = 4
DEFAULT_NODE_SPACING = 0.01  # meters, desk-scale scenes


@dataclass
class Surfel:
    """One oriented surface disk."""

    position: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    radius: float
    confidence: float
    timestamp: int

    def validate(self):
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
            raise InvalidParameterError("surfel normal must be unit length")
        if self.radius <= 0:
            raise InvalidParameterError("surfel radius must be positive")
        if self.confidence < 0:
            raise InvalidParameterError("surfel confidence must be >= 0")
        if self.timestamp < 0:
            raise InvalidParameterError("surfel timestamp must be >= 0")


class SurfelCloud:
    """Struct-of-arrays surfel container with stable indices within a frame.

    Fusion may append surfels between frames; nothing reorders or removes
    entries during an optimization pass, so integer indices are stable keys.
    """

    def __init__(self, positions, normals, colors, radii, confidences,
                 timestamps, frame_id=0):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.normals = np.asarray(normals, dtype=np.float64).reshape(n, 3)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        self.radii = np.asarray(radii, dtype=np.float64).reshape(n)
        self.confidences = np.asarray(confidences, dtype=np.float64).reshape(n)
        self.timestamps = np.asarray(timestamps, dtype=np.int64).reshape(n)
        self.frame_id = int(frame_id)

    @classmethod
    def empty(cls, frame_id=0):
        z = np.zeros((0, 3))
        return cls(z, z, z, np.zeros(0), np.zeros(0), np.zeros(0, np.int64),
                   frame_id)

    @classmethod
    def from_surfels(cls, surfels, frame_id=0):
        if not surfels:
            return cls.empty(frame_id)
        return cls(
            np.array([s.position for s in surfels]),
            np.array([s.normal for s in surfels]),
            np.array([s.color for s in surfels]),
            np.array([s.radius for s in surfels]),
            np.array([s.confidence for s in surfels]),
            np.array([s.timestamp for s in surfels], dtype=np.int64),
            frame_id,
        )

    def __len__(self):
        return len(self.positions)

    def surfel(self, i):
        return Surfel(self.positions[i].copy(), self.normals[i].copy(),
                      self.colors[i].copy(), float(self.radii[i]),
                      float(self.confidences[i]), int(self.timestamps[i]))

    def copy(self):
        return SurfelCloud(self.positions.copy(), self.normals.copy(),
                           self.colors.copy(), self.radii.copy(),
                           self.confidences.copy(), self.timestamps.copy(),
                           self.frame_id)

    def extend(self, other):
        """Append another cloud's surfels; existing indices are unchanged."""
        self.positions = np.vstack([self.positions, other.positions])
        self.normals = np.vstack([self.normals, other.normals])
        self.colors = np.vstack([self.colors, other.colors])
        self.radii = np.concatenate([self.radii, other.radii])
        self.confidences = np.concatenate([self.confidences,
                                           other.confidences])
        self.timestamps = np.concatenate([self.timestamps, other.timestamps])


@dataclass
class EDNode:
    """Deformation-graph node: rest position plus its local rigid motion."""

    g: np.ndarray
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    b: np.ndarray = field(default_factory=lambda: np.zeros(3))


class EDGraph:
    """Sparse deformation graph: node rest positions, edges, skinning k."""

    def __init__(self, positions, edges, k_neighbors=DEFAULT_K_NEIGHBORS):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ConfigurationError("graph edges may not be self-loops")
            if edges.min() < 0 or edges.max() >= len(self.positions):
                raise ConfigurationError("graph edge references unknown node")
            edges = np.unique(np.sort(edges, axis=1), axis=0)
        self.edges = edges
        self.k_neighbors = int(k_neighbors)
        self._tree = None

    @classmethod
    def from_nodes(cls, nodes, edges, k_neighbors=DEFAULT_K_NEIGHBORS):
        return cls(np.array([n.g for n in nodes]), edges, k_neighbors)

    @property
    def n_nodes(self):
        return len(self.positions)

    def node(self, j):
        return EDNode(g=self.positions[j].copy())

    def tree(self):
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def with_positions(self, new_positions):
        """Same topology over updated rest positions (used between frames)."""
        return EDGraph(new_positions, self.edges.copy(), self.k_neighbors)

    def is_connected(self):
        if self.n_nodes <= 1:
            return True
        parent = list(range(self.n_nodes))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in self.edges:
            parent[find(int(a))] = find(int(b))
        return len({find(i) for i in range(self.n_nodes)}) == 1


@dataclass
class WarpParams:
    """Optimization variables: per-node (q, b) plus the global transform."""

    node_q: np.ndarray
    node_b: np.ndarray
    global_q: np.ndarray
    global_b: np.ndarray

    @classmethod
    def identity(cls, n_nodes):
        return cls(
            node_q=np.tile(IDENTITY_QUAT, (n_nodes, 1)),
            node_b=np.zeros((n_nodes, 3)),
            global_q=IDENTITY_QUAT.copy(),
            global_b=np.zeros(3),
        )

    @property
    def n_nodes(self):
        return len(self.node_q)

    def flatten(self):
        """[q0 b0 q1 b1 ... qglobal bglobal], length 7 * (n_nodes + 1)."""
        per_node = np.concatenate([self.node_q, self.node_b], axis=1)
        return np.concatenate([per_node.ravel(), self.global_q,
                               self.global_b])

    @classmethod
    def from_flat(cls, flat, n_nodes):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (7 * (n_nodes + 1),):
            raise InvalidParameterError(
                f"expected {7 * (n_nodes + 1)} parameters, got {flat.shape}")
        per_node = flat[: 7 * n_nodes].reshape(n_nodes, 7)
        return cls(per_node[:, :4].copy(), per_node[:, 4:].copy(),
                   flat[7 * n_nodes: 7 * n_nodes + 4].copy(),
                   flat[7 * n_nodes + 4:].copy())

    def copy(self):
        return WarpParams(self.node_q.copy(), self.node_b.copy(),
                          self.global_q.copy(), self.global_b.copy())


@dataclass
class CameraIntrinsics:
    """Pinhole model plus the scale of raw 16-bit depth files."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point outside the image")

    @property
    def f_mean(self):
        return 0.5 * (self.fx + self.fy)

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "depth_scale": self.depth_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["width"]),
                   height=int(d["height"]),
                   depth_scale=float(d.get("depth_scale", 1.0)))


@dataclass
class DepthFrame:
    """Metric depth map plus the tissue mask for one frame. 0 = invalid."""

    depth: np.ndarray
    tissue_mask: np.ndarray
    frame_id: int

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.tissue_mask = np.asarray(self.tissue_mask, dtype=bool)
        if self.depth.shape != self.tissue_mask.shape:
            raise ConfigurationError("depth and mask shapes differ")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise InvalidParameterError("depth values must be finite and >= 0")


@dataclass
class GraphBinding:
    """Per-point skinning neighborhoods, fixed for the duration of a solve."""

    indices: np.ndarray  # (N, k) int64
    weights: np.ndarray  # (N, k) float64, rows sum to 1


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def knn_weights_batch(points, graph):
    """Skinning neighborhoods for many points at once.

    Weights are exp(-distance) normalized over each point's k nearest nodes.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    k = graph.k_neighbors
    if graph.n_nodes < k:
        raise ConfigurationError(
            f"graph has {graph.n_nodes} nodes but k_neighbors={k}")
    dist, idx = graph.tree().query(points, k=k)
    dist = np.atleast_2d(dist).reshape(len(points), k)
    idx = np.atleast_2d(idx).reshape(len(points), k).astype(np.int64)
    # subtracting the row minimum keeps exp well-conditioned; the normalized
    # weights are unchanged
    shifted = dist - dist.min(axis=1, keepdims=True)
    w = np.exp(-shifted)
    w /= w.sum(axis=1, keepdims=True)
    return GraphBinding(indices=idx, weights=w)


def knn_weights(p, graph):
    """Influence weights of the k nearest graph nodes on point p."""
    binding = knn_weights_batch(np.asarray(p, dtype=np.float64)[None, :],
                                graph)
    return list(zip(binding.indices[0].tolist(), binding.weights[0].tolist()))


def quat_to_rotation(q):
    """3x3 rotation matrix of the normalized quaternion (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise InvalidParameterError("zero quaternion has no rotation")
    w, x, y, z = q / norm
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_transform(q, b):
    """4x4 homogeneous transform with rotation from q and translation b.

    Applied to a homogeneous point [p, 1] it rotates and translates; applied
    to a homogeneous direction [n, 0] it rotates only.
    """
    t = np.eye(4)
    t[:3, :3] = quat_to_rotation(q)
    t[:3, 3] = np.asarray(b, dtype=np.float64)
    return t


def warp_points(positions, binding, graph, params):
    """Blend per-node rigid motions at each point, then apply the global one."""
    return kernels.skin_points(
        np.ascontiguousarray(positions, dtype=np.float64),
        binding.indices, binding.weights, graph.positions,
        np.ascontiguousarray(params.node_q), np.ascontiguousarray(params.node_b),
        params.global_q, params.global_b)


def warp_normals(normals, binding, graph, params):
    """Blend rotated normals and renormalize.

    Returns (unit_normals, degenerate_mask); degenerate rows (blend shorter
    than 1e-8) are left unnormalized and flagged.
    """
    blended = kernels.skin_normals(
        np.ascontiguousarray(normals, dtype=np.float64),
        binding.indices, binding.weights,
        np.ascontiguousarray(params.node_q), params.global_q)
    norms = np.linalg.norm(blended, axis=1)
    degenerate = norms < 1e-8
    safe = np.where(degenerate, 1.0, norms)
    return blended / safe[:, None], degenerate


def skin_point(p, graph, params, binding=None):
    """Warp a single point; neighborhoods are computed here unless supplied."""
    p = np.asarray(p, dtype=np.float64)[None, :]
    if binding is None:
        binding = knn_weights_batch(p, graph)
    return warp_points(p, binding, graph, params)[0]


def skin_normal(n, p, graph, params, binding=None):
    """Warp a unit normal using the neighborhood of its anchor point p."""
    if binding is None:
        binding = knn_weights_batch(np.asarray(p, dtype=np.float64)[None, :],
                                    graph)
    unit, degenerate = warp_normals(np.asarray(n, dtype=np.float64)[None, :],
                                    binding, graph, params)
    if degenerate[0]:
        raise DegenerateGeometryError("blended normal collapsed below 1e-8")
    return unit[0]


def backproject_pixels(us, vs, depths, intr):
    """Pinhole back-projection of pixel coordinates at given metric depths."""
    x = (us - intr.cx) / intr.fx * depths
    y = (vs - intr.cy) / intr.fy * depths
    return np.stack([x, y, depths], axis=-1)


def normals_from_depth(frame, intr):
    """Per-pixel unit normals from central differences of back-projection.

    Returns (normal_map (H, W, 3), valid (H, W)); normals point toward the
    camera (negative z). Pixels lacking a full valid 4-neighborhood are
    invalid.
    """
    depth = frame.depth
    h, w = depth.shape
    vs, us = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = backproject_pixels(us, vs, depth, intr)
    valid = depth > 0

    normal_map = np.zeros((h, w, 3))
    ok = np.zeros((h, w), dtype=bool)
    interior = np.zeros_like(valid)
    interior[1:-1, 1:-1] = (
        valid[1:-1, 1:-1]
        & valid[1:-1, :-2] & valid[1:-1, 2:]
        & valid[:-2, 1:-1] & valid[2:, 1:-1]
    )
    if not interior.any():
        return normal_map, ok

    tu = np.zeros_like(pts)
    tv = np.zeros_like(pts)
    tu[1:-1, 1:-1] = 0.5 * (pts[1:-1, 2:] - pts[1:-1, :-2])
    tv[1:-1, 1:-1] = 0.5 * (pts[2:, 1:-1] - pts[:-2, 1:-1])
    n = np.cross(tu.reshape(-1, 3), tv.reshape(-1, 3)).reshape(h, w, 3)
    # orient toward the camera (+z is the viewing direction)
    flip = n[..., 2] > 0
    n[flip] *= -1.0
    norms = np.linalg.norm(n, axis=2)
    good = interior & (norms > 1e-12)
    normal_map[good] = n[good] / norms[good][:, None]
    ok = good
    return normal_map, ok


def surfels_from_depth(frame, intr, default_color=(0.5, 0.5, 0.5)):
    """One surfel per masked pixel with valid depth and a valid normal.

    Surfels come out in row-major pixel order. Radius models the pixel
    footprint of an oriented disk, clamped to [0.25, 4] footprints;
    confidence starts at 1.
    """
    normal_map, normal_ok = normals_from_depth(frame, intr)
    use = (frame.depth > 0) & frame.tissue_mask & normal_ok
    vs, us = np.nonzero(use)
    if len(vs) == 0:
        return SurfelCloud.empty(frame.frame_id)
    depths = frame.depth[vs, us]
    positions = backproject_pixels(us.astype(np.float64),
                                   vs.astype(np.float64), depths, intr)
    normals = normal_map[vs, us]
    footprint = depths / intr.f_mean
    nz = np.abs(normals[:, 2])
    radii = np.clip(footprint / (np.sqrt(2.0) * np.maximum(nz, 1e-6)),
                    0.25 * footprint, 4.0 * footprint)
    n = len(vs)
    return SurfelCloud(
        positions=positions,
        normals=normals,
        colors=np.tile(np.asarray(default_color, dtype=np.float64), (n, 1)),
        radii=radii,
        confidences=np.ones(n),
        timestamps=np.full(n, frame.frame_id, dtype=np.int64),
        frame_id=frame.frame_id,
    )


def _connect_components(positions, edges):
    """Add nearest cross-component edges until the graph is one component."""
    n = len(positions)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        parent[find(int(a))] = find(int(b))

    extra = []
    while True:
        roots = {}
        for i in range(n):
            roots.setdefault(find(i), []).append(i)
        comps = list(roots.values())
        if len(comps) <= 1:
            break
        # bridge the first component to its globally nearest other component
        base = np.array(comps[0])
        others = np.array([i for c in comps[1:] for i in c])
        d = np.linalg.norm(positions[base][:, None, :]
                           - positions[others][None, :, :], axis=2)
        bi, oi = np.unravel_index(np.argmin(d), d.shape)
        a, b = int(base[bi]), int(others[oi])
        extra.append((a, b))
        parent[find(a)] = find(b)
    return extra


def build_ed_graph(cloud, node_spacing=DEFAULT_NODE_SPACING,
                   k_neighbors=DEFAULT_K_NEIGHBORS, k_edge=4):
    """Voxel-subsample a cloud into graph nodes and wire up a connected graph.

    Nodes are voxel centroids of the surfel positions at ``node_spacing``;
    each node links to its ``k_edge`` nearest nodes (symmetrized), and any
    remaining components are bridged through their closest node pairs.
    """
    if node_spacing <= 0:
        raise ConfigurationError("node_spacing must be positive")
    if len(cloud) == 0:
        raise ConfigurationError("cannot build a graph from an empty cloud")

    pts = cloud.positions
    origin = pts.min(axis=0)
    keys = np.floor((pts - origin) / node_spacing).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    n_vox = inverse.max() + 1
    sums = np.zeros((n_vox, 3))
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=n_vox).astype(np.float64)
    nodes = sums / counts[:, None]

    if n_vox == 1:
        return EDGraph(nodes, np.zeros((0, 2), dtype=np.int64), k_neighbors)

    kq = min(k_edge + 1, n_vox)
    _, idx = cKDTree(nodes).query(nodes, k=kq)
    idx = np.atleast_2d(idx)
    src = np.repeat(np.arange(n_vox), kq - 1)
    dst = idx[:, 1:].ravel()
    edges = np.stack([src, dst], axis=1)
    edges = edges[edges[:, 0] != edges[:, 1]]
    extra = _connect_components(nodes, edges)
    if extra:
        edges = np.vstack([edges, np.array(extra, dtype=np.int64)])
    return EDGraph(nodes, edges, k_neighbors)
