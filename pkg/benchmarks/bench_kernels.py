"""Benchmark the jitted kernels against their pure-numpy fallbacks.

Usage:
    python benchmarks/bench_kernels.py [--points N] [--nodes V] [--repeats R]

Times each hot kernel on a synthetic workload through both code paths and
prints the speedup. The numpy column is what you get with DEFTRACK_NUMBA=0.
"""

import argparse
import time

import numpy as np

from deftrack import kernels


def timeit(fn, args, repeats):
    fn(*args)  # warmup / compile
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def skinning_workload(rng, n, v, k=4):
    node_g = rng.normal(size=(v, 3)) * 0.1
    node_q = np.tile([1.0, 0, 0, 0], (v, 1)) + rng.normal(size=(v, 4)) * 0.2
    node_b = rng.normal(size=(v, 3)) * 0.02
    gq = np.array([1.0, 0.01, -0.02, 0.005])
    gb = np.array([0.01, -0.005, 0.002])
    pos = rng.normal(size=(n, 3)) * 0.1
    idx = rng.integers(0, v, size=(n, k)).astype(np.int64)
    w = rng.random(size=(n, k))
    w /= w.sum(axis=1, keepdims=True)
    return pos, idx, w, node_g, node_q, node_b, gq, gb


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--points", type=int, default=100_000)
    parser.add_argument("--nodes", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    n, v = args.points, args.nodes
    rows = []

    work = skinning_workload(rng, n, v)
    rows.append(("skin_points", f"{n} pts x 4 nn",
                 timeit(kernels.skin_points_numpy, work, args.repeats),
                 timeit(kernels._skin_points_nb, work, args.repeats)))

    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    normal_args = (nrm, work[1], work[2], work[4], work[6])
    rows.append(("skin_normals", f"{n} normals",
                 timeit(kernels.skin_normals_numpy, normal_args,
                        args.repeats),
                 timeit(kernels._skin_normals_nb, normal_args,
                        args.repeats)))

    vec = rng.normal(size=(n, 3))
    jac_args = (*work, vec)
    rows.append(("warp_jacobian_vec", f"{n} pts -> {7 * (v + 1)} params",
                 timeit(kernels.warp_jacobian_vec_numpy, jac_args,
                        args.repeats),
                 timeit(kernels._warp_jacobian_vec_nb, jac_args,
                        args.repeats)))

    n_particles = 10_000
    n_cons = 30_000
    p = rng.normal(size=(n_particles, 3))
    w_inv = rng.random(n_particles)
    ci = rng.integers(0, n_particles, size=n_cons).astype(np.int64)
    cj = ((ci + 1 + rng.integers(0, n_particles - 1, size=n_cons))
          % n_particles).astype(np.int64)
    rest = rng.uniform(0.5, 1.5, size=n_cons)
    stiff = np.full(n_cons, 1.0)
    rows.append((
        "distance_pass", f"{n_cons} constraints",
        timeit(lambda *a: kernels.distance_pass_numpy(p.copy(), *a),
               (w_inv, ci, cj, rest, stiff), max(1, args.repeats // 2)),
        timeit(lambda *a: kernels._distance_pass_nb(p.copy(), *a),
               (w_inv, ci, cj, rest, stiff), args.repeats)))

    n_tri, n_q = 500, 2_000
    tri = rng.normal(size=(n_tri, 3, 3))
    pts = rng.normal(size=(n_q, 3))
    cpt_args = (pts, np.ascontiguousarray(tri[:, 0]),
                np.ascontiguousarray(tri[:, 1]),
                np.ascontiguousarray(tri[:, 2]))
    rows.append(("closest_point_triangles", f"{n_q} pts x {n_tri} tris",
                 timeit(kernels.closest_point_triangles_numpy, cpt_args,
                        max(1, args.repeats // 2)),
                 timeit(kernels._closest_point_triangles_nb, cpt_args,
                        args.repeats)))

    name_w = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{name_w}}  {'workload':<28} "
          f"{'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, workload, t_np, t_nb in rows:
        print(f"{name:<{name_w}}  {workload:<28} "
              f"{t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
