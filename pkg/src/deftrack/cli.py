"""Command-line interface.

Subcommands: track, simulate, synth-pairs, eval, report. Exit code is 0 on
success; failures print a categorized error and exit nonzero (2 for
configuration problems, 3 for data/file problems, 4 for solver divergence,
1 otherwise).
"""

import argparse
import logging
import sys
from pathlib import Path

from .errors import (
    ConfigurationError,
    DeftrackError,
    InvalidParameterError,
    SolverError,
)

logger = logging.getLogger(__name__)


def _cmd_track(args):
    from .pipeline import load_sequence_config, run_tracking

    config = load_sequence_config(args.config, verbose=args.verbose)
    metrics, paths = run_tracking(config)
    summary = metrics.summary()
    print(f"tracked {len(metrics.frames)} frames; reprojection error "
          f"{summary['formatted']} px over {summary['n_observations']} "
          f"landmark observations")
    print(f"report: {paths['summary']}")
    return 0


def _cmd_simulate(args):
    from .pbd import load_scenario, run_scenario

    scenario = load_scenario(args.scenario)
    manifest = run_scenario(scenario, args.out)
    print(f"simulated {len(manifest['frames'])} frames into {args.out}")
    return 0


def _cmd_synth_pairs(args):
    from .io import load_cloud_ply, load_mesh_obj
    from .pairs import DeformationMap, export_pairs, synthesize_pairs

    verts_a, tris_a = load_mesh_obj(args.mesh_a)
    verts_b, tris_b = load_mesh_obj(args.mesh_b)
    if tris_a.shape != tris_b.shape or (tris_a != tris_b).any():
        raise ConfigurationError("meshes must share an identical triangle "
                                 "list (same topology)")
    cloud_a = load_cloud_ply(args.cloud_a).positions
    cloud_b = load_cloud_ply(args.cloud_b).positions
    deformation = DeformationMap(verts_a, verts_b, tris_a)
    paired = synthesize_pairs(cloud_a, cloud_b, deformation,
                              tau_pair=args.tau)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    json_path, match_path = export_pairs(
        paired, cloud_a, cloud_b, out,
        cloud_a_ref=str(args.cloud_a), cloud_b_ref=str(args.cloud_b))
    print(f"{len(paired)} pairs ({paired.dropped_beyond_threshold} dropped, "
          f"{paired.skipped_off_mesh} off-mesh) -> {json_path}, {match_path}")
    return 0


def _cmd_eval(args):
    from .pipeline import evaluate_tracked

    metrics, paths = evaluate_tracked(args.tracked, args.annotations,
                                      args.out)
    print(f"evaluated {len(metrics.frames)} frames; "
          f"{metrics.summary()['formatted']} px")
    print(f"report: {paths['summary']}")
    return 0


def _cmd_report(args):
    from .pipeline import TrackingMetrics, emit_report

    metrics = TrackingMetrics.load(args.metrics)
    out = args.out or Path(args.metrics).parent
    paths = emit_report(metrics, out)
    print(f"report written to {paths['summary'].parent}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="deftrack",
        description="Non-rigid surfel tracking and deformation-pair "
                    "synthesis")
    parser.add_argument("--verbose", action="store_true",
                        help="debug logging plus per-iteration cost logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", help="track a configured depth sequence")
    p.add_argument("config", help="sequence config JSON")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("simulate", help="run a soft-body scenario")
    p.add_argument("scenario", help="scenario JSON")
    p.add_argument("--out", required=True, help="output directory for OBJ "
                   "frames")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("synth-pairs",
                       help="synthesize ground-truth pairs from two mesh "
                            "states")
    p.add_argument("--mesh-a", required=True)
    p.add_argument("--mesh-b", required=True)
    p.add_argument("--cloud-a", required=True)
    p.add_argument("--cloud-b", required=True)
    p.add_argument("--out", required=True, help="output pairs JSON path")
    p.add_argument("--tau", type=float, default=None,
                   help="pairing threshold in meters (default: from cloud "
                        "spacing)")
    p.set_defaults(func=_cmd_synth_pairs)

    p = sub.add_parser("eval", help="re-score saved clouds against "
                                    "annotations")
    p.add_argument("--tracked", required=True, help="tracking output dir")
    p.add_argument("--annotations", required=True, help="landmark CSV")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="regenerate report files from metrics")
    p.add_argument("metrics", help="metrics JSON from a tracking run")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, InvalidParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 4
    except DeftrackError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
