"""Shared builders for synthetic scenes, meshes, and solver instances."""

import json
from pathlib import Path

import numpy as np

from deftrack.association import CorrespondenceSet, project_points
from deftrack.costs import CostWeights, WarpModel
from deftrack.geometry import (
    CameraIntrinsics,
    DepthFrame,
    EDGraph,
    WarpParams,
)


def axis_angle_quat(axis, angle_rad):
    """Scalar-first unit quaternion for a rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle_rad
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_rotation_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rigid_motion_params(graph, q, t):
    """Encode one shared rigid motion (rotation q then translation t) in
    per-node parameters: b_j = (R - I) g_j + t makes the blend exact."""
    rot = quat_rotation_matrix(q)
    params = WarpParams.identity(graph.n_nodes)
    params.node_q = np.tile(np.asarray(q, dtype=np.float64),
                            (graph.n_nodes, 1))
    params.node_b = graph.positions @ (rot - np.eye(3)).T + np.asarray(t)
    return params


def grid_sheet(nx, ny, spacing, z0, center=(0.0, 0.0)):
    """Regular triangulated sheet in the x-y plane at depth z0."""
    xs = (np.arange(nx) - (nx - 1) / 2) * spacing + center[0]
    ys = (np.arange(ny) - (ny - 1) / 2) * spacing + center[1]
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    positions = np.stack([gx.ravel(), gy.ravel(),
                          np.full(nx * ny, float(z0))], axis=1)
    tris = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            b = a + 1
            cc = a + nx
            d = cc + 1
            tris.append([a, b, d])
            tris.append([a, d, cc])
    return positions, np.asarray(tris, dtype=np.int64)


def splat_depth(vertices, triangles, intr, oversample=2.5):
    """Depth map of a mesh by dense barycentric point splatting (z-min)."""
    depth = np.full((intr.height, intr.width), np.inf)
    uv, _ = project_points(vertices, intr)
    for tri in triangles:
        a, b, c = vertices[tri]
        pa, pb, pc = uv[tri]
        extent = max(np.hypot(*(pa - pb)), np.hypot(*(pb - pc)),
                     np.hypot(*(pc - pa)))
        n = int(np.clip(np.ceil(extent * oversample), 1, 64))
        ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1),
                             indexing="ij")
        keep = (ii + jj) <= n
        w1 = ii[keep] / n
        w2 = jj[keep] / n
        w0 = 1.0 - w1 - w2
        pts = (w0[:, None] * a + w1[:, None] * b + w2[:, None] * c)
        puv, valid = project_points(pts, intr)
        cols = np.round(puv[:, 0]).astype(np.int64)
        rows = np.round(puv[:, 1]).astype(np.int64)
        ok = (valid & (cols >= 0) & (cols < intr.width) & (rows >= 0)
              & (rows < intr.height))
        np.minimum.at(depth, (rows[ok], cols[ok]), pts[ok, 2])
    mask = np.isfinite(depth)
    depth[~mask] = 0.0
    return depth, mask


def small_intrinsics(width=64, height=48, f=80.0, depth_scale=1e-4):
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height,
                            depth_scale=depth_scale)


def constant_depth_frame(intr, z, frame_id=0, mask=None):
    depth = np.full((intr.height, intr.width), float(z))
    if mask is None:
        mask = np.ones_like(depth, dtype=bool)
    return DepthFrame(depth=depth, tissue_mask=mask, frame_id=frame_id)


def write_tracking_inputs(root, intr, frames, matches=None, annotations=None,
                          config=None):
    """Write a complete tracking input tree and return the config path.

    frames: list of (depth_m, mask) arrays; matches: per-transition (K, 6)
    row arrays or None; annotations: rows of (landmark_id, frame, u, v).
    """
    from deftrack.io import save_depth_png, save_intrinsics, save_mask_png

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_intrinsics(intr, root / "intrinsics.json")

    depth_files, mask_files = [], []
    for t, (depth, mask) in enumerate(frames):
        d = root / f"depth_{t:04d}.png"
        m = root / f"mask_{t:04d}.png"
        save_depth_png(depth, d, intr.depth_scale)
        save_mask_png(mask, m)
        depth_files.append(d.name)
        mask_files.append(m.name)

    cfg = {
        "intrinsics": "intrinsics.json",
        "depth_files": depth_files,
        "mask_files": mask_files,
        "mode": "icp",
        "output_dir": "out",
    }
    if matches is not None:
        match_files = []
        for t, rows in enumerate(matches):
            f = root / f"matches_{t + 1:04d}.txt"
            np.savetxt(f, np.asarray(rows, dtype=np.float64), fmt="%.9g")
            match_files.append(f.name)
        cfg["match_files"] = match_files
    if annotations is not None:
        ann = root / "annotations.csv"
        with open(ann, "w") as fh:
            fh.write("landmark_id,frame,u,v\n")
            for lm, frame, u, v in annotations:
                fh.write(f"{lm},{frame},{u},{v}\n")
        cfg["annotations"] = ann.name
    if config:
        cfg.update(config)
    config_path = root / "config.json"
    config_path.write_text(json.dumps(cfg, indent=2))
    return config_path


def random_graph(rng, n_nodes, k_neighbors=None, scale=0.1):
    positions = rng.normal(size=(n_nodes, 3)) * scale
    if n_nodes == 1:
        edges = np.zeros((0, 2), dtype=np.int64)
    else:
        edges = np.array([[i, (i + 1) % n_nodes] for i in range(n_nodes)]
                         if n_nodes > 2 else [[0, 1]], dtype=np.int64)
    k = k_neighbors if k_neighbors is not None else min(4, n_nodes)
    return EDGraph(positions, edges, k_neighbors=k)


def random_instance(rng, mode, n_nodes=None, n_points=None):
    """Random small solver instance: (model, params, corr, weights)."""
    n_nodes = n_nodes or int(rng.integers(1, 6))
    n_points = n_points or int(rng.integers(5, 51))
    graph = random_graph(rng, n_nodes)
    points = rng.normal(size=(n_points, 3)) * 0.1
    normals = rng.normal(size=(n_points, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    model = WarpModel(points, normals, graph)

    params = WarpParams.identity(n_nodes)
    params.node_q += rng.normal(size=(n_nodes, 4)) * 0.15
    params.node_b += rng.normal(size=(n_nodes, 3)) * 0.02
    params.global_q += rng.normal(size=4) * 0.05
    params.global_b += rng.normal(size=3) * 0.01

    valid = rng.random(n_points) > 0.15
    targets = points + rng.normal(size=(n_points, 3)) * 0.01
    if mode == "icp":
        tn = rng.normal(size=(n_points, 3))
        tn /= np.linalg.norm(tn, axis=1, keepdims=True)
        corr = CorrespondenceSet(valid=valid, target_positions=targets,
                                 target_normals=tn, kind="icp")
        weights = CostWeights(mode="icp")
    else:
        corr = CorrespondenceSet(valid=valid, target_positions=targets,
                                 target_normals=None, kind="correspondence")
        weights = CostWeights(mode="correspondence")
    return model, params, corr, weights
