"""Compiled inner loops (plant step, sparse LDL^T)."""

from __future__ import annotations

import numpy as np
from numba import njit

# ---------------------------------------------------------------------------
# Plant


@njit(cache=True)
def _cross(a, b):
    return np.array(
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    )


@njit(cache=True)
def exp_so3_nb(v):
    theta = np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    K = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    if theta < 1e-8:
        a = 1.0
        b = 0.5
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


@njit(cache=True)
def _stage(R0, theta, p, w, F, C, ext_tau, I, Iinv, use_theta):
    if use_theta:
        R = R0 @ exp_so3_nb(theta)
    else:
        R = R0
    tau = C - _cross(p, F) + ext_tau
    wdot = Iinv @ (R.T @ tau - _cross(w, I @ w))
    if use_theta:
        c = _cross(theta, w)
        k_theta = w + 0.5 * c + _cross(theta, c) / 12.0
    else:
        k_theta = w.copy()
    return k_theta, wdot


@njit(cache=True)
def rkmk4_step(p, v, R, w, F_feet, C_feet, ext_F, ext_tau, mass, g, I, Iinv, dt):
    """RK4 / Munthe-Kaas step with forces held constant.

    ``F_feet`` is the summed foot force and ``C_feet = sum(foot_i x u_i)`` so
    the foot torque about a CoM at ``p`` is ``C_feet - p x F_feet``.
    """
    a = (F_feet + ext_F) / mass
    a[2] -= g
    h = 0.5 * dt
    z = np.zeros(3)
    k1t, k1w = _stage(R, z, p, w, F_feet, C_feet, ext_tau, I, Iinv, False)
    v2 = v + h * a
    p2 = p + h * v
    k2t, k2w = _stage(R, h * k1t, p2, w + h * k1w, F_feet, C_feet, ext_tau, I, Iinv, True)
    v3 = v + h * a
    p3 = p + h * v2
    k3t, k3w = _stage(R, h * k2t, p3, w + h * k2w, F_feet, C_feet, ext_tau, I, Iinv, True)
    v4 = v + dt * a
    p4 = p + dt * v3
    k4t, k4w = _stage(R, dt * k3t, p4, w + dt * k3w, F_feet, C_feet, ext_tau, I, Iinv, True)
    p_next = p + dt / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4)
    v_next = v + dt * a
    theta = dt / 6.0 * (k1t + 2.0 * k2t + 2.0 * k3t + k4t)
    R_next = R @ exp_so3_nb(theta)
    w_next = w + dt / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    E = R_next.T @ R_next - np.eye(3)
    drift = np.sqrt(np.sum(E * E))
    return p_next, v_next, R_next, w_next, drift


@njit(cache=True)
def foot_moment(u, feet):
    """Summed force and ``sum(feet_i x u_i)`` for (4, 3) arrays."""
    F = np.zeros(3)
    C = np.zeros(3)
    for i in range(u.shape[0]):
        F += u[i]
        C += _cross(feet[i], u[i])
    return F, C


@njit(cache=True, inline="always")
def _t_cross(a0, a1, a2, b0, b1, b2):
    return a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0


@njit(cache=True, inline="always")
def _t_exp(x, y, z):
    th2 = x * x + y * y + z * z
    th = np.sqrt(th2)
    if th < 1e-8:
        a = 1.0
        b = 0.5
    else:
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    return (
        1.0 - b * (y * y + z * z), -a * z + b * x * y, a * y + b * x * z,
        a * z + b * x * y, 1.0 - b * (x * x + z * z), -a * x + b * y * z,
        -a * y + b * x * z, a * x + b * y * z, 1.0 - b * (x * x + y * y),
    )


@njit(cache=True, inline="always")
def _t_mm(A, B):
    return (
        A[0] * B[0] + A[1] * B[3] + A[2] * B[6],
        A[0] * B[1] + A[1] * B[4] + A[2] * B[7],
        A[0] * B[2] + A[1] * B[5] + A[2] * B[8],
        A[3] * B[0] + A[4] * B[3] + A[5] * B[6],
        A[3] * B[1] + A[4] * B[4] + A[5] * B[7],
        A[3] * B[2] + A[4] * B[5] + A[5] * B[8],
        A[6] * B[0] + A[7] * B[3] + A[8] * B[6],
        A[6] * B[1] + A[7] * B[4] + A[8] * B[7],
        A[6] * B[2] + A[7] * B[5] + A[8] * B[8],
    )


@njit(cache=True, inline="always")
def _t_mv(A, x, y, z):
    return (
        A[0] * x + A[1] * y + A[2] * z,
        A[3] * x + A[4] * y + A[5] * z,
        A[6] * x + A[7] * y + A[8] * z,
    )


@njit(cache=True, inline="always")
def _t_wdot(R, w0, w1, w2, t0, t1, t2, I, Iinv):
    # body torque R^T tau minus gyroscopic term
    b0 = R[0] * t0 + R[3] * t1 + R[6] * t2
    b1 = R[1] * t0 + R[4] * t1 + R[7] * t2
    b2 = R[2] * t0 + R[5] * t1 + R[8] * t2
    L0, L1, L2 = _t_mv(I, w0, w1, w2)
    g0, g1, g2 = _t_cross(w0, w1, w2, L0, L1, L2)
    return _t_mv(Iinv, b0 - g0, b1 - g1, b2 - g2)


@njit(cache=True, inline="always")
def _t_dexpinv(th0, th1, th2, w0, w1, w2):
    c0, c1, c2 = _t_cross(th0, th1, th2, w0, w1, w2)
    d0, d1, d2 = _t_cross(th0, th1, th2, c0, c1, c2)
    return w0 + 0.5 * c0 + d0 / 12.0, w1 + 0.5 * c1 + d1 / 12.0, w2 + 0.5 * c2 + d2 / 12.0


@njit(cache=True)
def rollout_batch(p0, v0, R0, w0, U, feet, steps, mass, g, I, Iinv, dt):
    """Roll out ``B`` piecewise-constant force schedules from one initial state.

    ``U`` is (B, P, 4, 3): inertial foot forces per phase; ``steps[j]`` plant
    steps are taken in phase ``j``. Returns trajectories of length
    ``sum(steps) + 1``. Arithmetic matches repeated :func:`rkmk4_step` calls
    but runs on scalars to avoid per-step allocation.
    """
    B = U.shape[0]
    S = 0
    for j in range(steps.size):
        S += steps[j]
    Pt = np.empty((B, S + 1, 3))
    Vt = np.empty((B, S + 1, 3))
    Rt = np.empty((B, S + 1, 3, 3))
    Wt = np.empty((B, S + 1, 3))
    It = (I[0, 0], I[0, 1], I[0, 2], I[1, 0], I[1, 1], I[1, 2], I[2, 0], I[2, 1], I[2, 2])
    Jt = (
        Iinv[0, 0], Iinv[0, 1], Iinv[0, 2], Iinv[1, 0], Iinv[1, 1], Iinv[1, 2],
        Iinv[2, 0], Iinv[2, 1], Iinv[2, 2],
    )
    h = 0.5 * dt
    for b in range(B):
        px, py, pz = p0[0], p0[1], p0[2]
        vx, vy, vz = v0[0], v0[1], v0[2]
        R = (R0[0, 0], R0[0, 1], R0[0, 2], R0[1, 0], R0[1, 1], R0[1, 2], R0[2, 0], R0[2, 1], R0[2, 2])
        wx, wy, wz = w0[0], w0[1], w0[2]
        k = 0
        for q in range(3):
            Pt[b, 0, q] = p0[q]
            Vt[b, 0, q] = v0[q]
            Wt[b, 0, q] = w0[q]
        Rt[b, 0] = R0
        for j in range(steps.size):
            F0 = F1 = F2 = 0.0
            C0 = C1 = C2 = 0.0
            for i in range(U.shape[2]):
                u0, u1, u2 = U[b, j, i, 0], U[b, j, i, 1], U[b, j, i, 2]
                F0 += u0
                F1 += u1
                F2 += u2
                c0, c1, c2 = _t_cross(feet[i, 0], feet[i, 1], feet[i, 2], u0, u1, u2)
                C0 += c0
                C1 += c1
                C2 += c2
            ax, ay, az = F0 / mass, F1 / mass, F2 / mass - g
            for _ in range(steps[j]):
                # stage 1
                x0, x1, x2 = _t_cross(px, py, pz, F0, F1, F2)
                a1 = _t_wdot(R, wx, wy, wz, C0 - x0, C1 - x1, C2 - x2, It, Jt)
                k1 = (wx, wy, wz)
                # stage 2
                v2x, v2y, v2z = vx + h * ax, vy + h * ay, vz + h * az
                p2x, p2y, p2z = px + h * vx, py + h * vy, pz + h * vz
                th = (h * k1[0], h * k1[1], h * k1[2])
                Rs = _t_mm(R, _t_exp(th[0], th[1], th[2]))
                ws = (wx + h * a1[0], wy + h * a1[1], wz + h * a1[2])
                x0, x1, x2 = _t_cross(p2x, p2y, p2z, F0, F1, F2)
                a2 = _t_wdot(Rs, ws[0], ws[1], ws[2], C0 - x0, C1 - x1, C2 - x2, It, Jt)
                k2 = _t_dexpinv(th[0], th[1], th[2], ws[0], ws[1], ws[2])
                # stage 3
                p3x, p3y, p3z = px + h * v2x, py + h * v2y, pz + h * v2z
                th = (h * k2[0], h * k2[1], h * k2[2])
                Rs = _t_mm(R, _t_exp(th[0], th[1], th[2]))
                ws = (wx + h * a2[0], wy + h * a2[1], wz + h * a2[2])
                x0, x1, x2 = _t_cross(p3x, p3y, p3z, F0, F1, F2)
                a3 = _t_wdot(Rs, ws[0], ws[1], ws[2], C0 - x0, C1 - x1, C2 - x2, It, Jt)
                k3 = _t_dexpinv(th[0], th[1], th[2], ws[0], ws[1], ws[2])
                # stage 4
                v3x, v3y, v3z = v2x, v2y, v2z
                p4x, p4y, p4z = px + dt * v3x, py + dt * v3y, pz + dt * v3z
                th = (dt * k3[0], dt * k3[1], dt * k3[2])
                Rs = _t_mm(R, _t_exp(th[0], th[1], th[2]))
                ws = (wx + dt * a3[0], wy + dt * a3[1], wz + dt * a3[2])
                x0, x1, x2 = _t_cross(p4x, p4y, p4z, F0, F1, F2)
                a4 = _t_wdot(Rs, ws[0], ws[1], ws[2], C0 - x0, C1 - x1, C2 - x2, It, Jt)
                k4 = _t_dexpinv(th[0], th[1], th[2], ws[0], ws[1], ws[2])
                v4x, v4y, v4z = vx + dt * ax, vy + dt * ay, vz + dt * az
                s = dt / 6.0
                px, py, pz = (
                    px + s * (vx + 2.0 * v2x + 2.0 * v3x + v4x),
                    py + s * (vy + 2.0 * v2y + 2.0 * v3y + v4y),
                    pz + s * (vz + 2.0 * v2z + 2.0 * v3z + v4z),
                )
                vx, vy, vz = vx + dt * ax, vy + dt * ay, vz + dt * az
                R = _t_mm(
                    R,
                    _t_exp(
                        s * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
                        s * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
                        s * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
                    ),
                )
                wx = wx + s * (a1[0] + 2.0 * a2[0] + 2.0 * a3[0] + a4[0])
                wy = wy + s * (a1[1] + 2.0 * a2[1] + 2.0 * a3[1] + a4[1])
                wz = wz + s * (a1[2] + 2.0 * a2[2] + 2.0 * a3[2] + a4[2])
                k += 1
                Pt[b, k, 0], Pt[b, k, 1], Pt[b, k, 2] = px, py, pz
                Vt[b, k, 0], Vt[b, k, 1], Vt[b, k, 2] = vx, vy, vz
                Wt[b, k, 0], Wt[b, k, 1], Wt[b, k, 2] = wx, wy, wz
                for r in range(3):
                    for c in range(3):
                        Rt[b, k, r, c] = R[3 * r + c]
    return Pt, Vt, Rt, Wt


# ---------------------------------------------------------------------------
# Sparse LDL^T for quasi-definite matrices stored as upper-triangular CSC.


@njit(cache=True)
def ldl_etree(n, Ap, Ai):
    """Elimination tree and column counts of L; returns (etree, Lnz, ok)."""
    work = np.full(n, -1, dtype=np.int64)
    Lnz = np.zeros(n, dtype=np.int64)
    etree = np.full(n, -1, dtype=np.int64)
    for j in range(n):
        work[j] = j
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            if i > j:
                return etree, Lnz, False
            while work[i] != j:
                if etree[i] == -1:
                    etree[i] = j
                Lnz[i] += 1
                work[i] = j
                i = etree[i]
    return etree, Lnz, True


@njit(cache=True)
def ldl_factor(n, Ap, Ai, Ax, Lp, Li, Lx, D, etree, signs, delta):
    """Numeric up-looking LDL^T.

    Pivots whose signed magnitude ``signs[k] * D[k]`` falls below ``delta``
    are replaced by ``signs[k] * delta`` (dynamic regularization). Returns the
    number of such replacements.
    """
    y_mark = np.zeros(n, dtype=np.bool_)
    y_idx = np.empty(n, dtype=np.int64)
    elim = np.empty(n, dtype=np.int64)
    next_space = np.empty(n, dtype=np.int64)
    y_vals = np.zeros(n)
    Dinv = np.empty(n)
    bumped = 0
    for i in range(n):
        next_space[i] = Lp[i]
        D[i] = 0.0
    for k in range(n):
        nnz_y = 0
        for p in range(Ap[k], Ap[k + 1]):
            b = Ai[p]
            if b == k:
                D[k] += Ax[p]
                continue
            y_vals[b] = Ax[p]
            nxt = b
            if not y_mark[nxt]:
                y_mark[nxt] = True
                elim[0] = nxt
                n_e = 1
                nxt = etree[b]
                while nxt != -1 and nxt < k:
                    if y_mark[nxt]:
                        break
                    y_mark[nxt] = True
                    elim[n_e] = nxt
                    n_e += 1
                    nxt = etree[nxt]
                while n_e > 0:
                    n_e -= 1
                    y_idx[nnz_y] = elim[n_e]
                    nnz_y += 1
        for i in range(nnz_y - 1, -1, -1):
            c = y_idx[i]
            t = next_space[c]
            yc = y_vals[c]
            for j in range(Lp[c], t):
                y_vals[Li[j]] -= Lx[j] * yc
            Li[t] = k
            Lx[t] = yc * Dinv[c]
            D[k] -= yc * Lx[t]
            next_space[c] += 1
            y_vals[c] = 0.0
            y_mark[c] = False
        if signs[k] * D[k] < delta:
            D[k] = signs[k] * delta
            bumped += 1
        Dinv[k] = 1.0 / D[k]
    return bumped


@njit(cache=True)
def ldl_solve(n, Lp, Li, Lx, D, x):
    for i in range(n):
        xi = x[i]
        for j in range(Lp[i], Lp[i + 1]):
            x[Li[j]] -= Lx[j] * xi
    for i in range(n):
        x[i] /= D[i]
    for i in range(n - 1, -1, -1):
        s = x[i]
        for j in range(Lp[i], Lp[i + 1]):
            s -= Lx[j] * x[Li[j]]
        x[i] = s


@njit(cache=True)
def sym_upper_matvec(n, Ap, Ai, Ax, x):
    y = np.zeros(n)
    for j in range(n):
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            y[i] += Ax[p] * x[j]
            if i != j:
                y[j] += Ax[p] * x[i]
    return y


@njit(cache=True)
def ldl_solve_refined(n, Ap, Ai, Ax_true, Lp, Li, Lx, D, b, max_refine, tol):
    """Solve with the regularized factor, then refine against the true matrix."""
    x = b.copy()
    ldl_solve(n, Lp, Li, Lx, D, x)
    for _ in range(max_refine):
        r = b - sym_upper_matvec(n, Ap, Ai, Ax_true, x)
        nr = 0.0
        for i in range(n):
            if abs(r[i]) > nr:
                nr = abs(r[i])
        if nr <= tol:
            break
        ldl_solve(n, Lp, Li, Lx, D, r)
        x += r
    return x


# ---------------------------------------------------------------------------
# Interior-point loop (Mehrotra predictor-corrector) on CSR problem data.

STATUS_OPTIMAL = 0
STATUS_MAX_ITERS = 1
STATUS_INFEASIBLE = 2


@njit(cache=True)
def csr_matvec(Ip, Ij, Ix, nrows, x):
    y = np.zeros(nrows)
    for r in range(nrows):
        acc = 0.0
        for q in range(Ip[r], Ip[r + 1]):
            acc += Ix[q] * x[Ij[q]]
        y[r] = acc
    return y


@njit(cache=True)
def csr_rmatvec(Ip, Ij, Ix, nrows, ncols, v):
    y = np.zeros(ncols)
    for r in range(nrows):
        vr = v[r]
        if vr != 0.0:
            for q in range(Ip[r], Ip[r + 1]):
                y[Ij[q]] += Ix[q] * vr
    return y


@njit(cache=True)
def _inf_norm(v):
    m = 0.0
    for i in range(v.size):
        a = abs(v[i])
        if a > m:
            m = a
    return m


@njit(cache=True)
def _max_step(v, dv):
    a = 1.0
    for i in range(v.size):
        if dv[i] < 0.0:
            t = -v[i] / dv[i]
            if t < a:
                a = t
    return a


@njit(cache=True)
def _kkt_solve(rhs, perm, dim, Kp, Ki, Kx_true, Lp, Li, Lx, D, refine, rtol):
    b = np.empty(dim)
    for i in range(dim):
        b[i] = rhs[perm[i]]
    tol = rtol * max(1.0, _inf_norm(b))
    x = ldl_solve_refined(dim, Kp, Ki, Kx_true, Lp, Li, Lx, D, b, refine, tol)
    out = np.empty(dim)
    for i in range(dim):
        out[perm[i]] = x[i]
    return out


@njit(cache=True)
def ipm_solve(
    n, p, m,
    Pp, Pj, Px, Ap, Aj, Ax, Gp, Gj, Gx,
    c, b, h,
    dim, perm, Kp, Ki, Kx_reg, Kx_true, w_slots, Lp, etree, signs, nnz_L,
    max_iters, abs_tol, rel_gap, eps, step_fraction, refine, pivot_floor,
):
    Li = np.zeros(nnz_L, dtype=np.int64)
    Lx = np.zeros(nnz_L)
    D = np.zeros(dim)
    rtol = 1e-13

    # Initial point: KKT solve with unit inequality weights.
    for i in range(m):
        Kx_reg[w_slots[i]] = -(1.0 + eps)
        Kx_true[w_slots[i]] = -1.0
    ldl_factor(dim, Kp, Ki, Kx_reg, Lp, Li, Lx, D, etree, signs, pivot_floor)
    rhs = np.empty(dim)
    rhs[:n] = -c
    rhs[n : n + p] = b
    rhs[n + p :] = h
    sol = _kkt_solve(rhs, perm, dim, Kp, Ki, Kx_true, Lp, Li, Lx, D, refine, rtol)
    z = sol[:n].copy()
    y = sol[n : n + p].copy()
    lam = sol[n + p :].copy()
    s = -lam
    if m == 0:
        return z, y, lam, s, STATUS_OPTIMAL, 0
    a = -np.min(s)
    if a >= 0.0:
        s += 1.0 + a
    a = -np.min(lam)
    if a >= 0.0:
        lam += 1.0 + a

    status = STATUS_MAX_ITERS
    it = 0
    while True:
        Pz = csr_matvec(Pp, Pj, Px, n, z)
        r_d = Pz + c + csr_rmatvec(Ap, Aj, Ax, p, n, y) + csr_rmatvec(Gp, Gj, Gx, m, n, lam)
        r_p = csr_matvec(Ap, Aj, Ax, p, z) - b
        Gz = csr_matvec(Gp, Gj, Gx, m, z)
        r_g = Gz + s - h
        gap = 0.0
        for i in range(m):
            gap += s[i] * lam[i]
        mu = gap / m
        obj = 0.5 * np.dot(z, Pz) + np.dot(c, z)
        if (
            _inf_norm(r_d) <= abs_tol
            and _inf_norm(r_p) <= abs_tol
            and _inf_norm(r_g) <= abs_tol
            and (gap <= abs_tol or gap <= rel_gap * max(1.0, abs(obj)))
        ):
            status = STATUS_OPTIMAL
            break
        # Farkas certificate of primal infeasibility on the normalized multipliers.
        scale = _inf_norm(lam) + _inf_norm(y)
        if scale >= 1e3:
            ray = csr_rmatvec(Ap, Aj, Ax, p, n, y / scale) + csr_rmatvec(Gp, Gj, Gx, m, n, lam / scale)
            if _inf_norm(ray) <= 1e-9 and (np.dot(b, y) + np.dot(h, lam)) / scale < -1e-6:
                status = STATUS_INFEASIBLE
                break
        if it >= max_iters:
            break
        it += 1

        for i in range(m):
            w = s[i] / lam[i]
            Kx_reg[w_slots[i]] = -(w + eps)
            Kx_true[w_slots[i]] = -w
        ldl_factor(dim, Kp, Ki, Kx_reg, Lp, Li, Lx, D, etree, signs, pivot_floor)

        # predictor
        r_c = -s * lam
        rhs[:n] = -r_d
        rhs[n : n + p] = -r_p
        rhs[n + p :] = -r_g - r_c / lam
        sol = _kkt_solve(rhs, perm, dim, Kp, Ki, Kx_true, Lp, Li, Lx, D, refine, rtol)
        dlam = sol[n + p :]
        ds = (r_c - s * dlam) / lam
        alpha = min(_max_step(s, ds), _max_step(lam, dlam))
        mu_aff = np.dot(s + alpha * ds, lam + alpha * dlam) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0.0 else 0.0

        # corrector
        r_c = -s * lam - ds * dlam + sigma * mu
        rhs[n + p :] = -r_g - r_c / lam
        sol = _kkt_solve(rhs, perm, dim, Kp, Ki, Kx_true, Lp, Li, Lx, D, refine, rtol)
        dz = sol[:n]
        dy = sol[n : n + p]
        dlam = sol[n + p :]
        ds = (r_c - s * dlam) / lam
        alpha = min(1.0, step_fraction * min(_max_step(s, ds), _max_step(lam, dlam)))
        z += alpha * dz
        y += alpha * dy
        lam += alpha * dlam
        s += alpha * ds
    return z, y, lam, s, status, it
