"""File formats: PLY surfel clouds, OBJ meshes, PNG depth/mask, JSON intrinsics.

Depth files are 16-bit grayscale PNG where value * depth_scale = meters and
0 marks invalid pixels. Masks are 8-bit PNG, nonzero = tissue. Clouds are
binary little-endian PLY with per-vertex position, normal, color, radius,
and confidence.
"""

import json
from pathlib import Path

import cv2
import numpy as np

from .errors import DeftrackError, InvalidParameterError
from .geometry import CameraIntrinsics, DepthFrame, SurfelCloud

_PLY_PROPS = [
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("radius", "<f4"), ("confidence", "<f4"),
]

_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8",
              "float64": "<f8", "uchar": "u1", "uint8": "u1",
              "int": "<i4", "int32": "<i4", "uint": "<u4"}


def save_cloud_ply(cloud, path):
    """Write a surfel cloud as binary little-endian PLY."""
    n = len(cloud)
    rec = np.empty(n, dtype=_PLY_PROPS)
    rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype(np.float32)
    rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T.astype(np.float32)
    colors = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = colors.T
    rec["radius"] = cloud.radii.astype(np.float32)
    rec["confidence"] = cloud.confidences.astype(np.float32)

    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    type_names = {"<f4": "float", "u1": "uchar"}
    header += [f"property {type_names[t]} {name}" for name, t in _PLY_PROPS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
    return Path(path)


def load_cloud_ply(path, frame_id=0):
    """Read a PLY written by save_cloud_ply (tolerates extra float props)."""
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise DeftrackError(f"{path}: not a PLY file")
        props = []
        n = 0
        fmt_ok = False
        while True:
            line = fh.readline()
            if not line:
                raise DeftrackError(f"{path}: truncated PLY header")
            tokens = line.decode("ascii", "replace").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt_ok = tokens[1] == "binary_little_endian"
            elif tokens[0] == "element":
                if tokens[1] != "vertex":
                    raise DeftrackError(
                        f"{path}: unsupported element {tokens[1]}")
                n = int(tokens[2])
            elif tokens[0] == "property":
                if tokens[1] not in _PLY_TYPES:
                    raise DeftrackError(
                        f"{path}: unsupported property type {tokens[1]}")
                props.append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        if not fmt_ok:
            raise DeftrackError(f"{path}: expected binary_little_endian")
        rec = np.frombuffer(fh.read(), dtype=props, count=n)

    names = {name for name, _ in props}
    required = {"x", "y", "z", "nx", "ny", "nz"}
    if not required <= names:
        raise DeftrackError(f"{path}: missing properties "
                            f"{sorted(required - names)}")
    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(
        np.float64)
    normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(
        np.float64)
    if {"red", "green", "blue"} <= names:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]],
                          axis=1).astype(np.float64) / 255.0
    else:
        colors = np.full((n, 3), 0.5)
    radii = rec["radius"].astype(np.float64) if "radius" in names \
        else np.full(n, 1e-3)
    conf = rec["confidence"].astype(np.float64) if "confidence" in names \
        else np.ones(n)
    return SurfelCloud(positions, normals, colors, radii, conf,
                       np.full(n, frame_id, dtype=np.int64), frame_id)


def save_correspondences_ply(positions, corr, prefix):
    """Debug dump of a correspondence set as a PLY pair.

    Writes <prefix>_source.ply and <prefix>_target.ply holding the valid
    entries' surfel positions and their targets, index-aligned, colored red
    and green. Returns the two paths.
    """
    valid = corr.valid
    n = int(np.count_nonzero(valid))
    normals = (corr.target_normals[valid]
               if corr.target_normals is not None
               else np.tile([0.0, 0.0, -1.0], (n, 1)))

    def _cloud(points, color):
        return SurfelCloud(points, normals, np.tile(color, (n, 1)),
                           np.full(n, 1e-3), np.ones(n),
                           np.zeros(n, np.int64))

    prefix = Path(prefix)
    src = save_cloud_ply(_cloud(np.asarray(positions)[valid],
                                [1.0, 0.0, 0.0]),
                         prefix.with_name(prefix.name + "_source.ply"))
    dst = save_cloud_ply(_cloud(corr.target_positions[valid],
                                [0.0, 1.0, 0.0]),
                         prefix.with_name(prefix.name + "_target.ply"))
    return src, dst


def save_mesh_obj(vertices, triangles, path):
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in np.asarray(triangles, dtype=np.int64):
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    return Path(path)


def load_mesh_obj(path):
    """Read vertices and triangular faces from an OBJ file."""
    vertices, faces = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if tokens[0] == "v":
                if len(tokens) < 4:
                    raise DeftrackError(f"{path}:{lineno}: short vertex line")
                vertices.append([float(x) for x in tokens[1:4]])
            elif tokens[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tokens[1:]]
                if len(idx) != 3:
                    raise DeftrackError(
                        f"{path}:{lineno}: only triangle faces are supported")
                faces.append(idx)
    if not vertices:
        raise DeftrackError(f"{path}: no vertices found")
    return (np.asarray(vertices, dtype=np.float64),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def save_depth_png(depth_m, path, depth_scale):
    """Write metric depth as 16-bit PNG (value * depth_scale = meters)."""
    if depth_scale <= 0:
        raise InvalidParameterError("depth_scale must be positive")
    raw = np.round(np.asarray(depth_m, dtype=np.float64) / depth_scale)
    if np.any(raw > np.iinfo(np.uint16).max):
        raise InvalidParameterError(
            "depth exceeds 16-bit range at this depth_scale")
    cv2.imwrite(str(path), raw.astype(np.uint16))
    return Path(path)


def load_depth_png(path, depth_scale):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DeftrackError(f"cannot read depth image {path}")
    if raw.ndim != 2:
        raise DeftrackError(f"{path}: depth PNG must be single-channel")
    return raw.astype(np.float64) * depth_scale


def save_mask_png(mask, path):
    cv2.imwrite(str(path), np.where(np.asarray(mask, bool), 255,
                                    0).astype(np.uint8))
    return Path(path)


def load_mask_png(path):
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise DeftrackError(f"cannot read mask image {path}")
    return raw > 0


def load_depth_frame(depth_path, mask_path, intr, frame_id):
    depth = load_depth_png(depth_path, intr.depth_scale)
    mask = load_mask_png(mask_path)
    if depth.shape != (intr.height, intr.width):
        raise DeftrackError(
            f"{depth_path}: size {depth.shape[::-1]} does not match "
            f"intrinsics {(intr.width, intr.height)}")
    return DepthFrame(depth=depth, tissue_mask=mask, frame_id=frame_id)


def save_intrinsics(intr, path):
    with open(path, "w") as fh:
        json.dump(intr.to_dict(), fh, indent=2)
    return Path(path)


def load_intrinsics(path):
    with open(path) as fh:
        return CameraIntrinsics.from_dict(json.load(fh))
