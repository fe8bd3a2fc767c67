"""End-to-end tracking: ingest a sequence, warp and fuse surfels per frame,
score reprojection error against annotated landmarks, and emit reports.

Frames are processed strictly sequentially; frame 0 initializes the surfel
cloud and deformation graph, and each later frame runs one warp optimization
(per the configured mode), applies the warp to surfels and node rest
positions, fuses the new observation, and accumulates metrics.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .association import (
    DEFAULT_DENSIFY_K,
    DEFAULT_NORMAL_GATE_DEG,
    DEFAULT_OCCLUSION_GATE,
    densify_matches,
    load_matches,
    project_points,
    projective_associate,
)
from .costs import CostWeights, WarpModel
from .errors import ConfigurationError, DeftrackError, SolverError
from .geometry import (
    DEFAULT_K_NEIGHBORS,
    DEFAULT_NODE_SPACING,
    DepthFrame,
    EDGraph,
    WarpParams,
    build_ed_graph,
    knn_weights_batch,
    normals_from_depth,
    surfels_from_depth,
    warp_normals,
    warp_points,
)
from .io import (
    load_depth_frame,
    load_intrinsics,
    save_cloud_ply,
    save_intrinsics,
)
from .solver import (
    FixedCorrespondenceProvider,
    ProjectiveProvider,
    SolverConfig,
    optimize,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class SequenceConfig:
    intrinsics_path: Path
    depth_files: list
    mask_files: list
    match_files: list
    mode: str
    weights: CostWeights
    solver: SolverConfig
    node_spacing: float
    k_neighbors: int
    k_edge: int
    occlusion_gate: float
    normal_gate_deg: float
    densify_k: int
    max_source_dist: float
    fusion_enabled: bool
    coverage_dilation: int
    annotations_path: Path | None
    output_dir: Path
    save_clouds: bool
    debug_correspondences: bool = False
    verbose: bool = False


def load_sequence_config(path, verbose=False):
    """Parse and validate a tracking config; all file checks happen here."""
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    mode = raw.get("mode", "icp")
    if mode not in ("icp", "correspondence"):
        raise ConfigurationError(f"unknown tracking mode {mode!r}")

    depth_files = [resolve(p) for p in raw["depth_files"]]
    mask_files = [resolve(p) for p in raw["mask_files"]]
    if len(depth_files) != len(mask_files):
        raise ConfigurationError("depth and mask lists differ in length")
    if len(depth_files) == 0:
        raise ConfigurationError("sequence has no frames")

    match_files = [resolve(p) for p in raw.get("match_files", [])]
    if mode == "correspondence":
        if len(match_files) != len(depth_files) - 1:
            raise ConfigurationError(
                f"correspondence mode needs {len(depth_files) - 1} match "
                f"files (one per transition), got {len(match_files)}")

    for group, files in (("depth", depth_files), ("mask", mask_files),
                         ("match", match_files)):
        for f in files:
            if not f.exists():
                raise ConfigurationError(f"missing {group} file: {f}")

    intr_path = resolve(raw["intrinsics"])
    if not intr_path.exists():
        raise ConfigurationError(f"missing intrinsics file: {intr_path}")

    ann = raw.get("annotations")
    ann_path = resolve(ann) if ann else None
    if ann_path is not None and not ann_path.exists():
        raise ConfigurationError(f"missing annotations file: {ann_path}")

    w = raw.get("weights", {})
    weights = CostWeights(
        lambda_icp=float(w.get("lambda_icp", 1.0)),
        lambda_reg=float(w.get("lambda_reg", 10.0)),
        lambda_corr=float(w.get("lambda_corr", 0.001)),
        mode=mode)

    graph = raw.get("graph", {})
    node_spacing = float(graph.get("node_spacing", DEFAULT_NODE_SPACING))
    assoc = raw.get("association", {})
    max_source = assoc.get("max_source_dist")

    return SequenceConfig(
        intrinsics_path=intr_path,
        depth_files=depth_files,
        mask_files=mask_files,
        match_files=match_files,
        mode=mode,
        weights=weights,
        solver=SolverConfig.from_dict(raw.get("solver", {})),
        node_spacing=node_spacing,
        k_neighbors=int(graph.get("k_neighbors", DEFAULT_K_NEIGHBORS)),
        k_edge=int(graph.get("k_edge", 4)),
        occlusion_gate=float(assoc.get("occlusion_gate",
                                       DEFAULT_OCCLUSION_GATE)),
        normal_gate_deg=float(assoc.get("normal_gate_deg",
                                        DEFAULT_NORMAL_GATE_DEG)),
        densify_k=int(assoc.get("densify_k", DEFAULT_DENSIFY_K)),
        max_source_dist=float(max_source) if max_source is not None
        else 5.0 * node_spacing,
        fusion_enabled=bool(raw.get("fusion", {}).get("enabled", True)),
        coverage_dilation=int(raw.get("fusion", {}).get("coverage_dilation",
                                                        1)),
        annotations_path=ann_path,
        output_dir=resolve(raw.get("output_dir", "tracking_out")),
        save_clouds=bool(raw.get("save_clouds", True)),
        debug_correspondences=bool(raw.get("debug_correspondences", False)),
        verbose=verbose,
    )


# ---------------------------------------------------------------------------
# annotations and metrics
# ---------------------------------------------------------------------------

class AnnotationSet:
    """Per-landmark pixel trajectories plus their surfel bindings.

    A landmark is bound exactly once, at its first annotated frame, to the
    surfel whose projection lands nearest its annotation; it never rebinds,
    so tracking drift shows up in the metric instead of being re-associated
    away.
    """

    def __init__(self, landmarks):
        self.landmarks = landmarks          # {id: {frame: (u, v)}}
        self.bindings = {}                  # {id: surfel index}

    @property
    def ids(self):
        return sorted(self.landmarks)

    def first_frame(self, lm):
        return min(self.landmarks[lm])

    def annotation(self, lm, frame_id):
        return self.landmarks[lm].get(frame_id)

    def bind(self, lm, surfel_index):
        if lm in self.bindings:
            raise ConfigurationError(f"landmark {lm} is already bound")
        self.bindings[lm] = int(surfel_index)

    def bind_new(self, frame_id, cloud, intr):
        """Bind landmarks whose first annotation is this frame."""
        for lm in self.ids:
            if lm in self.bindings or self.first_frame(lm) != frame_id:
                continue
            uv_ann = np.asarray(self.landmarks[lm][frame_id])
            uv, valid = project_points(cloud.positions, intr)
            d = np.linalg.norm(uv - uv_ann, axis=1)
            d[~valid] = np.inf
            if np.all(np.isinf(d)):
                logger.warning("landmark %s: no visible surfel to bind", lm)
                continue
            self.bind(lm, int(np.argmin(d)))


def load_annotations(path, intr=None):
    """Read a landmark CSV (landmark_id, frame, u, v; header optional)."""
    landmarks = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            if row[0].strip() == "landmark_id":
                continue
            if len(row) < 4:
                raise DeftrackError(f"{path}: short annotation row {row}")
            lm = row[0].strip()
            frame = int(row[1])
            u, v = float(row[2]), float(row[3])
            if intr is not None and not (0 <= u < intr.width
                                         and 0 <= v < intr.height):
                raise DeftrackError(
                    f"{path}: annotation {lm}@{frame} outside image bounds")
            landmarks.setdefault(lm, {})[frame] = (u, v)
    return AnnotationSet(landmarks)


def reprojection_error(cloud, annotations, intr, frame_id):
    """Pixel error of each bound landmark annotated in this frame.

    Returns (errors {landmark: float}, invalid [landmark]); a bound surfel
    behind the camera makes its landmark invalid for the frame.
    """
    errors = {}
    invalid = []
    for lm, idx in annotations.bindings.items():
        ann = annotations.annotation(lm, frame_id)
        if ann is None:
            continue
        uv, valid = project_points(cloud.positions[idx][None, :], intr)
        if not valid[0]:
            invalid.append(lm)
            continue
        errors[lm] = float(np.hypot(uv[0, 0] - ann[0], uv[0, 1] - ann[1]))
    return errors, invalid


@dataclass
class TrackingMetrics:
    frames: list = field(default_factory=list)   # rows of per-frame stats
    traces: dict = field(default_factory=dict)   # {landmark: [(frame, err)]}

    def add_frame(self, frame_id, errors, validity_fraction, solver_info,
                  failed=False):
        vals = np.array(sorted(errors.values())) if errors else np.array([])
        row = {
            "frame": int(frame_id),
            "mean_px": float(vals.mean()) if len(vals) else float("nan"),
            "std_px": float(vals.std()) if len(vals) else float("nan"),
            "n_landmarks": int(len(vals)),
            "validity_fraction": float(validity_fraction),
            "failed": bool(failed),
        }
        row.update(solver_info)
        self.frames.append(row)
        for lm, err in errors.items():
            self.traces.setdefault(lm, []).append((int(frame_id),
                                                   float(err)))

    def pooled_errors(self):
        return np.array([e for trace in self.traces.values()
                         for _, e in trace])

    def summary(self):
        pooled = self.pooled_errors()
        if len(pooled) == 0:
            return {"mean_px": float("nan"), "std_px": float("nan"),
                    "formatted": "n/a", "n_observations": 0}
        mean = float(pooled.mean())
        std = float(pooled.std())
        return {"mean_px": mean, "std_px": std,
                "formatted": format_error_summary(mean, std),
                "n_observations": int(len(pooled))}

    def to_dict(self):
        return {"frames": self.frames,
                "traces": {lm: [[f, e] for f, e in t]
                           for lm, t in self.traces.items()},
                "summary": self.summary()}

    @classmethod
    def from_dict(cls, d):
        m = cls()
        m.frames = list(d["frames"])
        m.traces = {lm: [(int(f), float(e)) for f, e in t]
                    for lm, t in d["traces"].items()}
        return m

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def format_error_summary(mean, std):
    """Render 'mean (standard deviation)' to one decimal, e.g. '3.0(1.0)'."""
    return f"{mean:.1f}({std:.1f})"


def emit_report(metrics, out_dir):
    """Write per-frame CSV, per-landmark traces, summary JSON, and an SVG
    plot of mean error over time. Errors out on empty metrics."""
    if not metrics.frames:
        raise DeftrackError("cannot report on empty metrics")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    per_frame = out / "per_frame.csv"
    with open(per_frame, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "mean_px", "std_px", "validity_fraction"])
        for row in metrics.frames:
            writer.writerow([row["frame"], f"{row['mean_px']:.6f}",
                             f"{row['std_px']:.6f}",
                             f"{row['validity_fraction']:.6f}"])

    landmarks_csv = out / "landmarks.csv"
    with open(landmarks_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["landmark_id", "frame", "error_px"])
        for lm in sorted(metrics.traces):
            for frame, err in metrics.traces[lm]:
                writer.writerow([lm, frame, f"{err:.6f}"])

    summary = metrics.summary()
    summary["n_frames"] = len(metrics.frames)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)

    _plot_mean_error(metrics, out / "mean_error.svg")
    return {"per_frame": per_frame, "landmarks": landmarks_csv,
            "summary": out / "summary.json", "plot": out / "mean_error.svg"}


def _plot_mean_error(metrics, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frames = [r["frame"] for r in metrics.frames]
    means = [r["mean_px"] for r in metrics.frames]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(frames, means, marker="o", markersize=2.5, linewidth=1.2)
    ax.set_xlabel("frame")
    ax.set_ylabel("mean reprojection error [px]")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def fuse_frame(cloud, warped_cloud, frame, intr,
               occlusion_gate=DEFAULT_OCCLUSION_GATE,
               normal_gate_deg=DEFAULT_NORMAL_GATE_DEG,
               coverage_dilation=1):
    """Merge the warped model with the new observation.

    Warped surfels that pass the projective gates are averaged with their
    observation weighted by (confidence, 1); their confidence increments and
    timestamp updates. Masked pixels not covered by any projected surfel
    spawn new surfels. Existing surfels are never removed or reordered.
    Returns (fused_cloud, n_new_surfels).
    """
    normal_map, normal_valid = normals_from_depth(frame, intr)
    corr = projective_associate(
        warped_cloud.positions, warped_cloud.normals, frame, normal_map,
        normal_valid, intr, occlusion_gate=occlusion_gate,
        normal_gate_deg=normal_gate_deg)

    fused = warped_cloud.copy()
    fused.frame_id = frame.frame_id
    fused.colors = cloud.colors.copy()
    fused.radii = cloud.radii.copy()
    fused.confidences = cloud.confidences.copy()
    fused.timestamps = cloud.timestamps.copy()

    hit = corr.valid
    if np.any(hit):
        c = fused.confidences[hit][:, None]
        fused.positions[hit] = (c * fused.positions[hit]
                                + corr.target_positions[hit]) / (c + 1.0)
        blend_n = c * fused.normals[hit] + corr.target_normals[hit]
        norms = np.linalg.norm(blend_n, axis=1)
        ok = norms > 1e-8
        fused.normals[hit] = np.where(ok[:, None],
                                      blend_n / np.maximum(norms,
                                                           1e-300)[:, None],
                                      fused.normals[hit])
        fused.confidences[hit] += 1.0
        fused.timestamps[hit] = frame.frame_id

    # spawn surfels on observed pixels no projected surfel covers
    uv, in_front = project_points(fused.positions, intr)
    cols = np.round(uv[:, 0]).astype(np.int64)
    rows = np.round(uv[:, 1]).astype(np.int64)
    inside = (in_front & (cols >= 0) & (cols < intr.width)
              & (rows >= 0) & (rows < intr.height))
    covered = np.zeros((intr.height, intr.width), dtype=bool)
    covered[rows[inside], cols[inside]] = True
    if coverage_dilation > 0:
        from scipy.ndimage import binary_dilation
        covered = binary_dilation(covered, iterations=coverage_dilation)

    residual = frame.tissue_mask & (frame.depth > 0) & ~covered
    n_new = 0
    if np.any(residual):
        sub = DepthFrame(depth=frame.depth,
                         tissue_mask=residual, frame_id=frame.frame_id)
        fresh = surfels_from_depth(sub, intr)
        n_new = len(fresh)
        if n_new:
            fused.extend(fresh)
    return fused, n_new


def _extend_graph(graph, new_positions, node_spacing, k_edge):
    """Add nodes for positions beyond node_spacing of every current node."""
    if len(new_positions) == 0:
        return graph, 0
    added = []
    dist, _ = cKDTree(graph.positions).query(new_positions)
    # greedy: admit candidates in order, respecting spacing among themselves
    for p, d in zip(new_positions, np.atleast_1d(dist)):
        if d <= node_spacing:
            continue
        if added and np.min(np.linalg.norm(np.asarray(added) - p,
                                           axis=1)) <= node_spacing:
            continue
        added.append(p)
    if not added:
        return graph, 0
    all_pos = np.vstack([graph.positions, np.asarray(added)])
    n_old = graph.n_nodes
    new_edges = []
    tree = cKDTree(graph.positions)
    k = min(k_edge, n_old)
    for offset, p in enumerate(added):
        _, idx = tree.query(p, k=k)
        for j in np.atleast_1d(idx):
            new_edges.append((n_old + offset, int(j)))
    edges = np.vstack([graph.edges, np.asarray(new_edges, dtype=np.int64)]) \
        if len(graph.edges) else np.asarray(new_edges, dtype=np.int64)
    return EDGraph(all_pos, edges, graph.k_neighbors), len(added)


# ---------------------------------------------------------------------------
# tracking loop
# ---------------------------------------------------------------------------

def run_tracking(config):
    """Track a configured sequence. Returns (TrackingMetrics, output paths)."""
    intr = load_intrinsics(config.intrinsics_path)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    clouds_dir = out / "clouds"
    if config.save_clouds:
        clouds_dir.mkdir(exist_ok=True)
    save_intrinsics(intr, out / "intrinsics.json")

    annotations = (load_annotations(config.annotations_path, intr)
                   if config.annotations_path else AnnotationSet({}))
    metrics = TrackingMetrics()

    frame0 = load_depth_frame(config.depth_files[0], config.mask_files[0],
                              intr, frame_id=0)
    cloud = surfels_from_depth(frame0, intr)
    if len(cloud) == 0:
        raise DeftrackError("frame 0 produced no surfels")
    graph = build_ed_graph(cloud, config.node_spacing, config.k_neighbors,
                           config.k_edge)
    logger.info("frame 0: %d surfels, %d graph nodes", len(cloud),
                graph.n_nodes)

    annotations.bind_new(0, cloud, intr)
    errors, _ = reprojection_error(cloud, annotations, intr, 0)
    metrics.add_frame(0, errors, validity_fraction=1.0,
                      solver_info={"iterations": 0, "converged": True,
                                   "final_cost": 0.0})
    if config.save_clouds:
        save_cloud_ply(cloud, clouds_dir / "frame_0000.ply")

    for t in range(1, len(config.depth_files)):
        frame = load_depth_frame(config.depth_files[t], config.mask_files[t],
                                 intr, frame_id=t)
        normal_map, normal_valid = normals_from_depth(frame, intr)

        binding = knn_weights_batch(cloud.positions, graph)
        model = WarpModel(cloud.positions, cloud.normals, graph, binding)

        if config.mode == "correspondence":
            matches = load_matches(config.match_files[t - 1])
            corr = densify_matches(matches, cloud.positions,
                                   k=config.densify_k,
                                   max_source_dist=config.max_source_dist)
            if config.debug_correspondences:
                from .io import save_correspondences_ply
                save_correspondences_ply(cloud.positions, corr,
                                         out / f"corr_{t:04d}")
            provider = FixedCorrespondenceProvider(corr)
        else:
            provider = ProjectiveProvider(
                frame, normal_map, normal_valid, intr,
                occlusion_gate=config.occlusion_gate,
                normal_gate_deg=config.normal_gate_deg)

        failed = False
        try:
            params, report = optimize(model, provider, config.weights,
                                      config.solver)
        except SolverError as exc:
            logger.error("frame %d solver diverged: %s", t, exc)
            failed = True
            params = WarpParams.identity(graph.n_nodes)
            report = exc.report

        warped_pos = model.warp_positions(params)
        unit_n, degenerate = warp_normals(cloud.normals, binding, graph,
                                          params)
        new_normals = np.where(degenerate[:, None], cloud.normals, unit_n)

        if config.debug_correspondences and config.mode == "icp":
            from .io import save_correspondences_ply
            final_corr = provider.associate(warped_pos, new_normals)
            save_correspondences_ply(warped_pos, final_corr,
                                     out / f"corr_{t:04d}")

        node_binding = knn_weights_batch(graph.positions, graph)
        new_node_pos = warp_points(graph.positions, node_binding, graph,
                                   params)

        warped_cloud = cloud.copy()
        warped_cloud.positions = warped_pos
        warped_cloud.normals = new_normals
        warped_cloud.frame_id = t

        graph = graph.with_positions(new_node_pos)

        if config.fusion_enabled:
            fused, n_new = fuse_frame(
                cloud, warped_cloud, frame, intr,
                occlusion_gate=config.occlusion_gate,
                normal_gate_deg=config.normal_gate_deg,
                coverage_dilation=config.coverage_dilation)
            if n_new:
                graph, n_nodes_added = _extend_graph(
                    graph, fused.positions[len(cloud):], config.node_spacing,
                    config.k_edge)
                if n_nodes_added:
                    logger.info("frame %d: +%d surfels, +%d nodes", t, n_new,
                                n_nodes_added)
            cloud = fused
        else:
            cloud = warped_cloud

        annotations.bind_new(t, cloud, intr)
        errors, invalid = reprojection_error(cloud, annotations, intr, t)
        solver_info = {"iterations": report.iterations_used if report else 0,
                       "converged": bool(report.converged) if report
                       else False,
                       "final_cost": float(report.final_cost) if report
                       else float("nan")}
        metrics.add_frame(t, errors,
                          validity_fraction=report.final_validity_fraction
                          if report else 0.0,
                          solver_info=solver_info, failed=failed)

        if config.save_clouds:
            save_cloud_ply(cloud, clouds_dir / f"frame_{t:04d}.ply")
        if config.verbose and report is not None:
            report.write_jsonl(out / f"costs_{t:04d}.jsonl")

    metrics.save(out / "metrics.json")
    paths = emit_report(metrics, out)
    paths["metrics"] = out / "metrics.json"
    return metrics, paths


def evaluate_tracked(tracked_dir, annotations_path, out_dir=None):
    """Recompute reprojection metrics from saved per-frame clouds."""
    from .io import load_cloud_ply

    tracked = Path(tracked_dir)
    out = Path(out_dir) if out_dir else tracked / "eval"
    intr = load_intrinsics(tracked / "intrinsics.json")
    cloud_files = sorted((tracked / "clouds").glob("frame_*.ply"))
    if not cloud_files:
        raise DeftrackError(f"no saved clouds under {tracked}")
    annotations = load_annotations(annotations_path, intr)
    metrics = TrackingMetrics()
    for f in cloud_files:
        frame_id = int(f.stem.split("_")[1])
        cloud = load_cloud_ply(f, frame_id)
        annotations.bind_new(frame_id, cloud, intr)
        errors, _ = reprojection_error(cloud, annotations, intr, frame_id)
        metrics.add_frame(frame_id, errors, validity_fraction=1.0,
                          solver_info={})
    out.mkdir(parents=True, exist_ok=True)
    metrics.save(out / "metrics.json")
    paths = emit_report(metrics, out)
    paths["metrics"] = out / "metrics.json"
    return metrics, paths
