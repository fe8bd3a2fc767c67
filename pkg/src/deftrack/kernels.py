"""Hot numeric kernels, each with a numba-jitted and a pure-numpy implementation.

The jitted path is used when numba imports successfully and the environment
variable ``DEFTRACK_NUMBA`` is not set to ``0``; otherwise the vectorized
numpy fallback is bound to the public name. Both paths are kept because the
loops dominate runtime on real clouds (hundreds of thousands of surfels) while
the fallback keeps the package importable and debuggable anywhere.
``benchmarks/bench_kernels.py`` times the two side by side.

Quaternions are scalar-first (w, x, y, z) and need not be unit length:
rotations are evaluated from the normalized quaternion via

    R(q) v = v + (2 / ||q||^2) * qv x (qv x v + w v)

which is exact for any nonzero q and smooth in its components, so the solver
can treat q as a free 4-vector.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("DEFTRACK_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# vectorized quaternion helpers (numpy path; also used by cost code directly)
# ---------------------------------------------------------------------------

def rotate_vectors(q, v):
    """Rotate vectors by the normalized version of quaternion(s) q.

    q: (..., 4) scalar-first, v: (..., 3); shapes broadcast together.
    """
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    qv = q[..., 1:]
    s = np.sum(q * q, axis=-1, keepdims=True)
    u = np.cross(qv, np.cross(qv, v) + w * v)
    return v + 2.0 * u / s


def rotation_gradient_dot(q, r, u):
    """Accumulate u^T d(R(q) r)/dq, returning a (..., 4) array.

    q: (..., 4), r: (..., 3) rotated vector, u: (..., 3) cotangent on the
    rotated output. Broadcasts like ``rotate_vectors``.
    """
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    batch = np.broadcast_shapes(q.shape[:-1], r.shape[:-1], u.shape[:-1])
    q = np.broadcast_to(q, batch + (4,))
    w = q[..., 0]
    qv = q[..., 1:]
    s = np.sum(q * q, axis=-1)
    c = np.cross(qv, r)
    m = c + w[..., None] * r
    big_u = np.cross(qv, m)
    d = np.sum(qv * r, axis=-1)
    cu = np.sum(c * u, axis=-1)
    uu = np.sum(big_u * u, axis=-1)
    ru = np.sum(r * u, axis=-1)
    mu = np.cross(m, u)
    two_s = 2.0 / s
    four_s2 = 4.0 / (s * s)
    out = np.empty(q.shape, dtype=np.float64)
    out[..., 0] = two_s * cu - four_s2 * w * uu
    out[..., 1:] = (
        two_s[..., None] * (mu + d[..., None] * u - ru[..., None] * qv)
        - four_s2[..., None] * qv * uu[..., None]
    )
    return out


# ---------------------------------------------------------------------------
# surfel skinning
# ---------------------------------------------------------------------------

def skin_points_numpy(positions, knn_idx, knn_w, node_g, node_q, node_b,
                      global_q, global_b):
    """Warp points through the deformation graph (vectorized numpy path).

    positions: (N, 3); knn_idx/knn_w: (N, K); node_*: per-node arrays;
    global_q/global_b: the shared rigid transform applied last.
    """
    g = node_g[knn_idx]                      # (N, K, 3)
    q = node_q[knn_idx]                      # (N, K, 4)
    b = node_b[knn_idx]                      # (N, K, 3)
    local = rotate_vectors(q, positions[:, None, :] - g) + g + b
    blended = np.sum(knn_w[:, :, None] * local, axis=1)
    return rotate_vectors(global_q, blended) + global_b


def skin_normals_numpy(normals, knn_idx, knn_w, node_q, global_q):
    """Blend rotated normals through the graph; result is NOT renormalized."""
    q = node_q[knn_idx]
    rotated = rotate_vectors(q, normals[:, None, :])
    blended = np.sum(knn_w[:, :, None] * rotated, axis=1)
    return rotate_vectors(global_q, blended)


def warp_jacobian_vec_numpy(positions, knn_idx, knn_w, node_g, node_q, node_b,
                            global_q, global_b, vec):
    """Gradient of sum_i vec_i . warped(p_i) w.r.t. the flat parameter vector.

    vec: (N, 3) cotangent per point (zero rows for invalid entries). Returns a
    flat array of length 7*(V+1) laid out [q0 b0 q1 b1 ... qg bg].
    """
    n_nodes = node_g.shape[0]
    g = node_g[knn_idx]
    q = node_q[knn_idx]
    b = node_b[knn_idx]
    rel = positions[:, None, :] - g
    local = rotate_vectors(q, rel) + g + b
    blended = np.sum(knn_w[:, :, None] * local, axis=1)     # (N, 3)

    conj = np.array([1.0, -1.0, -1.0, -1.0]) * global_q
    u = rotate_vectors(conj, vec)                           # R_g^T vec, (N, 3)

    grad_q = np.zeros((n_nodes, 4))
    grad_b = np.zeros((n_nodes, 3))
    contrib_b = knn_w[:, :, None] * u[:, None, :]           # (N, K, 3)
    contrib_q = knn_w[:, :, None] * rotation_gradient_dot(
        q, rel, u[:, None, :])                              # (N, K, 4)
    np.add.at(grad_b, knn_idx, contrib_b)
    np.add.at(grad_q, knn_idx, contrib_q)

    grad_gq = np.sum(rotation_gradient_dot(global_q, blended, vec), axis=0)
    grad_gb = np.sum(vec, axis=0)

    flat = np.empty(7 * (n_nodes + 1))
    per_node = np.concatenate([grad_q, grad_b], axis=1)     # (V, 7)
    flat[: 7 * n_nodes] = per_node.ravel()
    flat[7 * n_nodes: 7 * n_nodes + 4] = grad_gq
    flat[7 * n_nodes + 4:] = grad_gb
    return flat


# ---------------------------------------------------------------------------
# PBD distance-constraint pass
# ---------------------------------------------------------------------------

def distance_pass_numpy(p, inv_mass, idx_i, idx_j, rest, stiffness):
    """One sequential Gauss-Seidel pass over distance constraints, in place.

    Plain-Python loop: preserves the exact projection order of the jitted
    kernel. Returns the count of degenerate (coincident-endpoint) pairs.
    """
    degenerate = 0
    for c in range(idx_i.shape[0]):
        i = idx_i[c]
        j = idx_j[c]
        wi = inv_mass[i]
        wj = inv_mass[j]
        wsum = wi + wj
        if wsum <= 0.0:
            continue
        dx = p[i, 0] - p[j, 0]
        dy = p[i, 1] - p[j, 1]
        dz = p[i, 2] - p[j, 2]
        dist = (dx * dx + dy * dy + dz * dz) ** 0.5
        if dist < 1e-12:
            degenerate += 1
            continue
        scale = stiffness[c] * (dist - rest[c]) / (dist * wsum)
        p[i, 0] -= wi * scale * dx
        p[i, 1] -= wi * scale * dy
        p[i, 2] -= wi * scale * dz
        p[j, 0] += wj * scale * dx
        p[j, 1] += wj * scale * dy
        p[j, 2] += wj * scale * dz
    return degenerate


# ---------------------------------------------------------------------------
# closest point on a triangle soup
# ---------------------------------------------------------------------------

def closest_point_triangles_numpy(points, tri_a, tri_b, tri_c):
    """Globally nearest point on any triangle, per query point (numpy path).

    Minimizes over the triangle interior critical point and the three clamped
    edge segments. Returns (tri_id (N,), bary (N,3), closest (N,3), dist (N,)).
    """
    e0 = tri_b - tri_a                       # (T, 3)
    e1 = tri_c - tri_a
    a = np.sum(e0 * e0, axis=1)
    bb = np.sum(e0 * e1, axis=1)
    c = np.sum(e1 * e1, axis=1)
    det = a * c - bb * bb

    n = points.shape[0]
    tri_id = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    closest = np.empty((n, 3))
    dist = np.empty(n)

    edges = (
        (tri_a, e0, a),          # edge a->b, parameter s along e0
        (tri_a, e1, c),          # edge a->c
        (tri_b, tri_c - tri_b, None),  # edge b->c
    )
    e2 = tri_c - tri_b
    len2_bc = np.sum(e2 * e2, axis=1)

    for k in range(n):
        p = points[k]
        d = tri_a - p
        dd = np.sum(e0 * d, axis=1)
        e = np.sum(e1 * d, axis=1)
        s = bb * e - c * dd
        t = bb * dd - a * e
        inside = (s >= 0) & (t >= 0) & (s + t <= det) & (det > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            s_in = np.where(inside, s / det, 0.0)
            t_in = np.where(inside, t / det, 0.0)
        cand = tri_a + s_in[:, None] * e0 + t_in[:, None] * e1
        best = np.where(inside, np.sum((cand - p) ** 2, axis=1), np.inf)
        best_s, best_t = s_in, t_in

        for base, evec, len2 in (
            (tri_a, e0, a), (tri_a, e1, c), (tri_b, e2, len2_bc)
        ):
            with np.errstate(divide="ignore", invalid="ignore"):
                tau = np.sum((p - base) * evec, axis=1) / np.where(
                    len2 > 0, len2, 1.0)
            tau = np.clip(np.where(len2 > 0, tau, 0.0), 0.0, 1.0)
            proj = base + tau[:, None] * evec
            d2 = np.sum((proj - p) ** 2, axis=1)
            better = d2 < best
            if evec is e0:
                es, et = tau, np.zeros_like(tau)
            elif evec is e1:
                es, et = np.zeros_like(tau), tau
            else:
                es, et = 1.0 - tau, tau
            best = np.where(better, d2, best)
            best_s = np.where(better, es, best_s)
            best_t = np.where(better, et, best_t)

        tid = int(np.argmin(best))
        tri_id[k] = tid
        s_f, t_f = best_s[tid], best_t[tid]
        bary[k] = (1.0 - s_f - t_f, s_f, t_f)
        closest[k] = tri_a[tid] + s_f * e0[tid] + t_f * e1[tid]
        dist[k] = best[tid] ** 0.5

    return tri_id, bary, closest, dist


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _rot(qw, qx, qy, qz, vx, vy, vz):
        s = qw * qw + qx * qx + qy * qy + qz * qz
        # c = qv x v + w v
        cx = qy * vz - qz * vy + qw * vx
        cy = qz * vx - qx * vz + qw * vy
        cz = qx * vy - qy * vx + qw * vz
        # u = qv x c
        ux = qy * cz - qz * cy
        uy = qz * cx - qx * cz
        uz = qx * cy - qy * cx
        f = 2.0 / s
        return vx + f * ux, vy + f * uy, vz + f * uz

    @njit(cache=True)
    def _skin_points_nb(positions, knn_idx, knn_w, node_g, node_q, node_b,
                        global_q, global_b):
        n = positions.shape[0]
        k = knn_idx.shape[1]
        out = np.empty((n, 3))
        gw, gx, gy, gz = global_q[0], global_q[1], global_q[2], global_q[3]
        for i in range(n):
            px, py, pz = positions[i, 0], positions[i, 1], positions[i, 2]
            ax = ay = az = 0.0
            for kk in range(k):
                j = knn_idx[i, kk]
                w = knn_w[i, kk]
                rx = px - node_g[j, 0]
                ry = py - node_g[j, 1]
                rz = pz - node_g[j, 2]
                tx, ty, tz = _rot(node_q[j, 0], node_q[j, 1], node_q[j, 2],
                                  node_q[j, 3], rx, ry, rz)
                ax += w * (tx + node_g[j, 0] + node_b[j, 0])
                ay += w * (ty + node_g[j, 1] + node_b[j, 1])
                az += w * (tz + node_g[j, 2] + node_b[j, 2])
            wx, wy, wz = _rot(gw, gx, gy, gz, ax, ay, az)
            out[i, 0] = wx + global_b[0]
            out[i, 1] = wy + global_b[1]
            out[i, 2] = wz + global_b[2]
        return out

    @njit(cache=True)
    def _skin_normals_nb(normals, knn_idx, knn_w, node_q, global_q):
        n = normals.shape[0]
        k = knn_idx.shape[1]
        out = np.empty((n, 3))
        gw, gx, gy, gz = global_q[0], global_q[1], global_q[2], global_q[3]
        for i in range(n):
            nx, ny, nz = normals[i, 0], normals[i, 1], normals[i, 2]
            ax = ay = az = 0.0
            for kk in range(k):
                j = knn_idx[i, kk]
                w = knn_w[i, kk]
                tx, ty, tz = _rot(node_q[j, 0], node_q[j, 1], node_q[j, 2],
                                  node_q[j, 3], nx, ny, nz)
                ax += w * tx
                ay += w * ty
                az += w * tz
            out[i, 0], out[i, 1], out[i, 2] = _rot(gw, gx, gy, gz, ax, ay, az)
        return out

    @njit(cache=True, inline="always")
    def _rot_grad_dot(qw, qx, qy, qz, rx, ry, rz, ux, uy, uz):
        # u^T d(R(q) r)/dq, returned as the 4 components (gw, gx, gy, gz)
        s = qw * qw + qx * qx + qy * qy + qz * qz
        cx = qy * rz - qz * ry
        cy = qz * rx - qx * rz
        cz = qx * ry - qy * rx
        mx = cx + qw * rx
        my = cy + qw * ry
        mz = cz + qw * rz
        bx = qy * mz - qz * my
        by = qz * mx - qx * mz
        bz = qx * my - qy * mx
        d = qx * rx + qy * ry + qz * rz
        cu = cx * ux + cy * uy + cz * uz
        uu = bx * ux + by * uy + bz * uz
        ru = rx * ux + ry * uy + rz * uz
        mux = my * uz - mz * uy
        muy = mz * ux - mx * uz
        muz = mx * uy - my * ux
        two_s = 2.0 / s
        four_s2 = 4.0 / (s * s)
        gw = two_s * cu - four_s2 * qw * uu
        gx = two_s * (mux + d * ux - ru * qx) - four_s2 * qx * uu
        gy = two_s * (muy + d * uy - ru * qy) - four_s2 * qy * uu
        gz = two_s * (muz + d * uz - ru * qz) - four_s2 * qz * uu
        return gw, gx, gy, gz

    @njit(cache=True)
    def _warp_jacobian_vec_nb(positions, knn_idx, knn_w, node_g, node_q,
                              node_b, global_q, global_b, vec):
        n = positions.shape[0]
        k = knn_idx.shape[1]
        n_nodes = node_g.shape[0]
        flat = np.zeros(7 * (n_nodes + 1))
        gw, gx, gy, gz = global_q[0], global_q[1], global_q[2], global_q[3]
        base_g = 7 * n_nodes
        for i in range(n):
            vx, vy, vz = vec[i, 0], vec[i, 1], vec[i, 2]
            if vx == 0.0 and vy == 0.0 and vz == 0.0:
                continue
            px, py, pz = positions[i, 0], positions[i, 1], positions[i, 2]
            # forward blend (pre-global), needed for the global-quat gradient
            ax = ay = az = 0.0
            for kk in range(k):
                j = knn_idx[i, kk]
                w = knn_w[i, kk]
                rx = px - node_g[j, 0]
                ry = py - node_g[j, 1]
                rz = pz - node_g[j, 2]
                tx, ty, tz = _rot(node_q[j, 0], node_q[j, 1], node_q[j, 2],
                                  node_q[j, 3], rx, ry, rz)
                ax += w * (tx + node_g[j, 0] + node_b[j, 0])
                ay += w * (ty + node_g[j, 1] + node_b[j, 1])
                az += w * (tz + node_g[j, 2] + node_b[j, 2])
            # u = R_g^T v (conjugate rotation)
            ux, uy, uz = _rot(gw, -gx, -gy, -gz, vx, vy, vz)
            dgw, dgx, dgy, dgz = _rot_grad_dot(gw, gx, gy, gz, ax, ay, az,
                                               vx, vy, vz)
            flat[base_g + 0] += dgw
            flat[base_g + 1] += dgx
            flat[base_g + 2] += dgy
            flat[base_g + 3] += dgz
            flat[base_g + 4] += vx
            flat[base_g + 5] += vy
            flat[base_g + 6] += vz
            for kk in range(k):
                j = knn_idx[i, kk]
                w = knn_w[i, kk]
                rx = px - node_g[j, 0]
                ry = py - node_g[j, 1]
                rz = pz - node_g[j, 2]
                qw_, qx_, qy_, qz_ = _rot_grad_dot(
                    node_q[j, 0], node_q[j, 1], node_q[j, 2], node_q[j, 3],
                    rx, ry, rz, ux, uy, uz)
                off = 7 * j
                flat[off + 0] += w * qw_
                flat[off + 1] += w * qx_
                flat[off + 2] += w * qy_
                flat[off + 3] += w * qz_
                flat[off + 4] += w * ux
                flat[off + 5] += w * uy
                flat[off + 6] += w * uz
        return flat

    @njit(cache=True)
    def _distance_pass_nb(p, inv_mass, idx_i, idx_j, rest, stiffness):
        degenerate = 0
        for c in range(idx_i.shape[0]):
            i = idx_i[c]
            j = idx_j[c]
            wi = inv_mass[i]
            wj = inv_mass[j]
            wsum = wi + wj
            if wsum <= 0.0:
                continue
            dx = p[i, 0] - p[j, 0]
            dy = p[i, 1] - p[j, 1]
            dz = p[i, 2] - p[j, 2]
            dist = (dx * dx + dy * dy + dz * dz) ** 0.5
            if dist < 1e-12:
                degenerate += 1
                continue
            scale = stiffness[c] * (dist - rest[c]) / (dist * wsum)
            p[i, 0] -= wi * scale * dx
            p[i, 1] -= wi * scale * dy
            p[i, 2] -= wi * scale * dz
            p[j, 0] += wj * scale * dx
            p[j, 1] += wj * scale * dy
            p[j, 2] += wj * scale * dz
        return degenerate

    @njit(cache=True)
    def _closest_point_triangles_nb(points, tri_a, tri_b, tri_c):
        # Eberly's region decomposition, brute force over triangles per point.
        n = points.shape[0]
        n_tri = tri_a.shape[0]
        tri_id = np.empty(n, dtype=np.int64)
        bary = np.empty((n, 3))
        closest = np.empty((n, 3))
        dist = np.empty(n)
        for kpt in range(n):
            px, py, pz = points[kpt, 0], points[kpt, 1], points[kpt, 2]
            best = np.inf
            bs = bt = 0.0
            btri = 0
            for t in range(n_tri):
                bax = tri_a[t, 0]
                bay = tri_a[t, 1]
                baz = tri_a[t, 2]
                e0x = tri_b[t, 0] - bax
                e0y = tri_b[t, 1] - bay
                e0z = tri_b[t, 2] - baz
                e1x = tri_c[t, 0] - bax
                e1y = tri_c[t, 1] - bay
                e1z = tri_c[t, 2] - baz
                dx = bax - px
                dy = bay - py
                dz = baz - pz
                a = e0x * e0x + e0y * e0y + e0z * e0z
                b = e0x * e1x + e0y * e1y + e0z * e1z
                c = e1x * e1x + e1y * e1y + e1z * e1z
                d = e0x * dx + e0y * dy + e0z * dz
                e = e1x * dx + e1y * dy + e1z * dz
                det = a * c - b * b
                s = b * e - c * d
                tt = b * d - a * e
                if s + tt <= det:
                    if s < 0.0:
                        if tt < 0.0:  # region 4
                            if d < 0.0:
                                tt = 0.0
                                s = 1.0 if -d >= a else -d / a
                            else:
                                s = 0.0
                                if e >= 0.0:
                                    tt = 0.0
                                elif -e >= c:
                                    tt = 1.0
                                else:
                                    tt = -e / c
                        else:  # region 3
                            s = 0.0
                            if e >= 0.0:
                                tt = 0.0
                            elif -e >= c:
                                tt = 1.0
                            else:
                                tt = -e / c
                    elif tt < 0.0:  # region 5
                        tt = 0.0
                        if d >= 0.0:
                            s = 0.0
                        elif -d >= a:
                            s = 1.0
                        else:
                            s = -d / a
                    else:  # region 0
                        inv = 1.0 / det
                        s *= inv
                        tt *= inv
                else:
                    if s < 0.0:  # region 2
                        t0 = b + d
                        t1 = c + e
                        if t1 > t0:
                            numer = t1 - t0
                            denom = a - 2.0 * b + c
                            s = 1.0 if numer >= denom else numer / denom
                            tt = 1.0 - s
                        else:
                            s = 0.0
                            if t1 <= 0.0:
                                tt = 1.0
                            elif e >= 0.0:
                                tt = 0.0
                            else:
                                tt = -e / c
                    elif tt < 0.0:  # region 6
                        t0 = b + e
                        t1 = a + d
                        if t1 > t0:
                            numer = t1 - t0
                            denom = a - 2.0 * b + c
                            tt = 1.0 if numer >= denom else numer / denom
                            s = 1.0 - tt
                        else:
                            tt = 0.0
                            if t1 <= 0.0:
                                s = 1.0
                            elif d >= 0.0:
                                s = 0.0
                            else:
                                s = -d / a
                    else:  # region 1
                        numer = c + e - b - d
                        if numer <= 0.0:
                            s = 0.0
                        else:
                            denom = a - 2.0 * b + c
                            s = 1.0 if numer >= denom else numer / denom
                        tt = 1.0 - s
                qx = bax + s * e0x + tt * e1x
                qy = bay + s * e0y + tt * e1y
                qz = baz + s * e0z + tt * e1z
                dd = ((qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2)
                if dd < best:
                    best = dd
                    bs = s
                    bt = tt
                    btri = t
            tri_id[kpt] = btri
            bary[kpt, 0] = 1.0 - bs - bt
            bary[kpt, 1] = bs
            bary[kpt, 2] = bt
            ta = tri_a[btri]
            closest[kpt, 0] = ta[0] + bs * (tri_b[btri, 0] - ta[0]) + bt * (
                tri_c[btri, 0] - ta[0])
            closest[kpt, 1] = ta[1] + bs * (tri_b[btri, 1] - ta[1]) + bt * (
                tri_c[btri, 1] - ta[1])
            closest[kpt, 2] = ta[2] + bs * (tri_b[btri, 2] - ta[2]) + bt * (
                tri_c[btri, 2] - ta[2])
            dist[kpt] = best ** 0.5
        return tri_id, bary, closest, dist


if USE_NUMBA:
    skin_points = _skin_points_nb
    skin_normals = _skin_normals_nb
    warp_jacobian_vec = _warp_jacobian_vec_nb
    distance_pass = _distance_pass_nb
    closest_point_triangles = _closest_point_triangles_nb
else:
    skin_points = skin_points_numpy
    skin_normals = skin_normals_numpy
    warp_jacobian_vec = warp_jacobian_vec_numpy
    distance_pass = distance_pass_numpy
    closest_point_triangles = closest_point_triangles_numpy
