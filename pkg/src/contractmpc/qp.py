"""Sparse convex QP solver.

Solves   min 1/2 z'Pz + q'z   s.t.  l <= Az <= u   (equality rows via l == u)

The primary backend is the Clarabel interior-point solver, whose solution is
then snapped to an exact active set by a polish solve (KKT system restricted
to the active rows, with iterative refinement). A self-contained
operator-splitting (ADMM) loop with Ruiz equilibration serves as fallback;
it is reliable on well-conditioned problems but, like any first-order
method, can stall on degenerate LP-like endgames, which is why the
interior-point backend is preferred.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

try:
    import clarabel as _clarabel
except ImportError:          # pragma: no cover - exercised via backend arg
    _clarabel = None

_SIGMA = 1e-6
_ALPHA = 1.6
_RHO_EQ_SCALE = 1e3
_RUIZ_ITERS = 10
_MIN_SCALE = 1e-4
_MAX_SCALE = 1e4


@dataclass
class QpResult:
    z: np.ndarray
    y: np.ndarray            # row multipliers: y>0 upper side active, y<0 lower
    status: str              # solved | max_iter | primal_infeasible | dual_infeasible
    iterations: int
    r_prim: float
    r_dual: float
    polished: bool = False
    obj: float = 0.0


@dataclass
class _Scaling:
    d: np.ndarray            # primal scaling diag
    e: np.ndarray            # row scaling diag
    c: float                 # cost scaling


def _ruiz_equilibrate(P: sp.csc_matrix, q: np.ndarray, A: sp.csc_matrix,
                      l: np.ndarray, u: np.ndarray):
    n, m = P.shape[0], A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    ls, us = l.copy(), u.copy()
    for _ in range(_RUIZ_ITERS):
        # column infinity norms of the stacked [[P, A'], [A, 0]] block matrix
        col_p = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        col_a = np.abs(As).max(axis=0).toarray().ravel() if As.nnz else np.zeros(n)
        norm_x = np.maximum(col_p, col_a)
        norm_y = np.abs(As).max(axis=1).toarray().ravel() if As.nnz else np.zeros(m)
        dx = 1.0 / np.sqrt(np.clip(norm_x, _MIN_SCALE, _MAX_SCALE))
        dy = 1.0 / np.sqrt(np.clip(norm_y, _MIN_SCALE, _MAX_SCALE))
        Dx = sp.diags(dx)
        Dy = sp.diags(dy)
        Ps = (Dx @ Ps @ Dx).tocsc()
        qs = dx * qs
        As = (Dy @ As @ Dx).tocsc()
        ls = dy * ls
        us = dy * us
        d *= dx
        e *= dy
        # cost normalization
        col_p = np.abs(Ps).max(axis=0).toarray().ravel() if Ps.nnz else np.zeros(n)
        mean_p = col_p.mean() if n else 0.0
        gamma = 1.0 / max(mean_p, np.abs(qs).max() if n else 0.0, _MIN_SCALE)
        gamma = min(gamma, _MAX_SCALE)
        Ps = Ps * gamma
        qs = qs * gamma
        c *= gamma
    return Ps.tocsc(), qs, As.tocsc(), ls, us, _Scaling(d, e, c)


def _factor(P, A, rho_vec, sigma):
    n, m = P.shape[0], A.shape[0]
    if m:
        kkt = sp.bmat(
            [[P + sigma * sp.eye(n), A.T],
             [A, sp.diags(-1.0 / rho_vec)]], format="csc")
    else:
        kkt = (P + sigma * sp.eye(n)).tocsc()
    return spla.splu(kkt)


def solve_qp(P, q, A, l, u, *, z0=None, y0=None, eps_abs=1e-7, eps_rel=1e-9,
             max_iter=40000, polish=True, backend=None) -> QpResult:
    """Solve the boxed-row QP. P must be symmetric PSD; rows with l==u are
    treated as equalities. Infinite bounds are allowed."""
    P = sp.csc_matrix(P)
    A = sp.csc_matrix(A)
    q = np.asarray(q, float)
    l = np.asarray(l, float)
    u = np.asarray(u, float)
    n, m = P.shape[0], A.shape[0]
    if m == 0:
        # unconstrained: direct solve with a tiny ridge
        z = spla.spsolve((P + 1e-12 * sp.eye(n)).tocsc(), -q)
        z = np.atleast_1d(z)
        rd = float(np.abs(P @ z + q).max()) if n else 0.0
        return QpResult(z, np.zeros(0), "solved", 0, 0.0, rd, False,
                        float(0.5 * z @ (P @ z) + q @ z))

    if backend is None:
        backend = "clarabel" if _clarabel is not None else "admm"
    if backend == "clarabel":
        res = _solve_clarabel(P, q, A, l, u, polish)
        if res is not None:
            return res
        # unexpected backend failure: fall through to the ADMM loop

    Ps, qs, As, ls, us, sc = _ruiz_equilibrate(P, q, A, l, u)

    eq_row = (l == u) & np.isfinite(l)
    rho_bar = 0.1
    rho_vec = np.full(m, rho_bar)
    rho_vec[eq_row] *= _RHO_EQ_SCALE

    z = np.zeros(n) if z0 is None else np.asarray(z0, float) / sc.d
    y = np.zeros(m) if y0 is None else np.asarray(y0, float) * sc.c / sc.e
    w = As @ z
    w = np.clip(w, ls, us)

    lu = _factor(Ps, As, rho_vec, _SIGMA)
    rhs = np.empty(n + m)
    status = "max_iter"
    it = 0
    r_prim = r_dual = np.inf
    check_every = 25
    next_polish = 100 if polish else max_iter + 1

    for it in range(1, max_iter + 1):
        rhs[:n] = _SIGMA * z - qs
        rhs[n:] = w - y / rho_vec
        sol = lu.solve(rhs)
        zt = sol[:n]
        nu = sol[n:]
        wt = w + (nu - y) / rho_vec
        z_prev = z
        y_prev = y
        z = _ALPHA * zt + (1.0 - _ALPHA) * z
        w_raw = _ALPHA * wt + (1.0 - _ALPHA) * w + y / rho_vec
        w = np.clip(w_raw, ls, us)
        y = rho_vec * (w_raw - w)

        if it % check_every == 0 or it == max_iter:
            # unscaled residuals
            z_u = sc.d * z
            y_u = sc.e * y / sc.c
            Az = A @ z_u
            w_u = w / sc.e
            Px = P @ z_u
            Aty = A.T @ y_u
            r_prim = np.abs(Az - w_u).max() if m else 0.0
            r_dual = np.abs(Px + q + Aty).max()
            eps_p = eps_abs + eps_rel * max(np.abs(Az).max(initial=0.0),
                                            np.abs(w_u).max(initial=0.0))
            eps_d = eps_abs + eps_rel * max(np.abs(Px).max(initial=0.0),
                                            np.abs(q).max(initial=0.0),
                                            np.abs(Aty).max(initial=0.0))
            if r_prim <= eps_p and r_dual <= eps_d:
                status = "solved"
                break
            # early exit: once the active set has settled, the polish solve
            # is exact, so accept a validated polished solution right away
            if it >= next_polish:
                next_polish *= 2
                pol = _polish_any(P, q, A, l, u, z_u, y_u, eq_row)
                if pol is not None:
                    zp, yp = pol
                    return _finish(P, q, A, l, u, zp, yp, "solved", it, True)
            # infeasibility certificates
            dz = sc.d * (z - z_prev)
            dyv = sc.e * (y - y_prev) / sc.c
            if _primal_infeasible(A, l, u, dyv):
                status = "primal_infeasible"
                break
            if _dual_infeasible(P, q, A, l, u, dz):
                status = "dual_infeasible"
                break
            # adaptive step size; rare updates, frequent ones destabilize
            # the degenerate endgame
            if it % 100 == 0 and it <= 1000:
                denom_p = max(np.abs(Az).max(initial=0.0), np.abs(w_u).max(initial=0.0), 1e-12)
                denom_d = max(np.abs(Px).max(initial=0.0), np.abs(q).max(initial=0.0),
                              np.abs(Aty).max(initial=0.0), 1e-12)
                ratio = np.sqrt((r_prim / denom_p) / max(r_dual / denom_d, 1e-16))
                if ratio > 5.0 or ratio < 0.2:
                    rho_bar = float(np.clip(rho_bar * ratio, 1e-6, 1e6))
                    rho_vec = np.full(m, rho_bar)
                    rho_vec[eq_row] *= _RHO_EQ_SCALE
                    lu = _factor(Ps, As, rho_vec, _SIGMA)

    z_u = sc.d * z
    y_u = sc.e * y / sc.c

    if status in ("solved", "max_iter") and polish:
        pol = _polish_any(P, q, A, l, u, z_u, y_u, eq_row)
        if pol is not None:
            zp, yp = pol
            return _finish(P, q, A, l, u, zp, yp, "solved", it, True)

    obj = float(0.5 * z_u @ (P @ z_u) + q @ z_u)
    return QpResult(z_u, y_u, status, it, float(r_prim), float(r_dual), False, obj)


def _polish_any(P, q, A, l, u, z, y, eq_row):
    """Dual-sign polish first; on degenerate problems fall back to active
    sets guessed from primal proximity to the bounds."""
    pol = _polish(P, q, A, l, u, z, y)
    if pol is not None:
        return pol
    Az = A @ z
    gap_l = Az - l
    gap_u = u - Az
    for tol_act in (1e-6, 1e-5, 1e-4):
        act_low = eq_row | (gap_l < tol_act * (1.0 + np.abs(np.where(np.isfinite(l), l, 0.0))))
        act_upp = ~act_low & (gap_u < tol_act * (1.0 + np.abs(np.where(np.isfinite(u), u, 0.0))))
        y_guess = np.where(act_low, -1.0, np.where(act_upp, 1.0, 0.0))
        pol = _polish(P, q, A, l, u, z, y_guess)
        if pol is not None:
            return pol
    return None


def _solve_clarabel(P, q, A, l, u, polish) -> QpResult | None:
    """Interior-point solve; rows are split into zero-cone (equality) and
    nonnegative-cone (one-sided) blocks. Multipliers are mapped back to the
    two-sided row convention (y > 0 upper side, y < 0 lower side)."""
    m = A.shape[0]
    eq = (l == u) & np.isfinite(l)
    up = np.isfinite(u) & ~eq
    lo = np.isfinite(l) & ~eq
    eq_idx = np.flatnonzero(eq)
    up_idx = np.flatnonzero(up)
    lo_idx = np.flatnonzero(lo)
    A_st = sp.vstack([A[eq_idx], A[up_idx], -A[lo_idx]], format="csc")
    b_st = np.concatenate([u[eq_idx], u[up_idx], -l[lo_idx]])
    cones = [_clarabel.ZeroConeT(len(eq_idx)),
             _clarabel.NonnegativeConeT(len(up_idx) + len(lo_idx))]
    settings = _clarabel.DefaultSettings()
    settings.verbose = False
    try:
        solver = _clarabel.DefaultSolver(P, q, A_st, b_st, cones, settings)
        sol = solver.solve()
    except BaseException:
        return None
    status = str(sol.status)
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return QpResult(np.zeros(P.shape[0]), np.zeros(m), "primal_infeasible",
                        sol.iterations, np.inf, np.inf)
    if status in ("DualInfeasible", "AlmostDualInfeasible"):
        return QpResult(np.zeros(P.shape[0]), np.zeros(m), "dual_infeasible",
                        sol.iterations, np.inf, np.inf)
    if status not in ("Solved", "AlmostSolved"):
        return None
    z = np.asarray(sol.x, float)
    yc = np.asarray(sol.z, float)
    y = np.zeros(m)
    y[eq_idx] = yc[:len(eq_idx)]
    y[up_idx] += yc[len(eq_idx):len(eq_idx) + len(up_idx)]
    y[lo_idx] -= yc[len(eq_idx) + len(up_idx):]
    if polish:
        pol = _polish_any(P, q, A, l, u, z, y, eq)
        if pol is not None:
            zp, yp = pol
            return _finish(P, q, A, l, u, zp, yp, "solved", sol.iterations, True)
    return _finish(P, q, A, l, u, z, y,
                   "solved" if status == "Solved" else "max_iter",
                   sol.iterations, False)


def _finish(P, q, A, l, u, z, y, status, it, polished) -> QpResult:
    Az = A @ z
    w = np.clip(Az, l, u)
    r_prim = float(np.abs(Az - w).max()) if A.shape[0] else 0.0
    r_dual = float(np.abs(P @ z + q + A.T @ y).max())
    obj = float(0.5 * z @ (P @ z) + q @ z)
    return QpResult(z, y, status, it, r_prim, r_dual, polished, obj)


def _primal_infeasible(A, l, u, dy, eps=1e-11):
    nrm = np.abs(dy).max(initial=0.0)
    if nrm < 1e-14:
        return False
    dy = dy / nrm
    if np.abs(A.T @ dy).max(initial=0.0) > eps * 1e3:
        return False
    up = np.where(np.isfinite(u), u, 0.0) @ np.maximum(dy, 0.0)
    lo = np.where(np.isfinite(l), l, 0.0) @ np.minimum(dy, 0.0)
    if np.any(~np.isfinite(u) & (dy > eps)) or np.any(~np.isfinite(l) & (dy < -eps)):
        return False
    return up + lo < -eps * 1e3


def _dual_infeasible(P, q, A, l, u, dz, eps=1e-11):
    nrm = np.abs(dz).max(initial=0.0)
    if nrm < 1e-14:
        return False
    dz = dz / nrm
    if np.abs(P @ dz).max(initial=0.0) > eps * 1e3 or q @ dz > -eps:
        return False
    Adz = A @ dz
    ok_up = np.isfinite(u) | (Adz <= eps)
    ok_lo = np.isfinite(l) | (Adz >= -eps)
    # direction must be recession-feasible: rows with finite bounds need Adz ~ 0
    fin = np.isfinite(l) & np.isfinite(u)
    if np.any(fin & (np.abs(Adz) > eps * 1e3)):
        return False
    return bool(np.all(ok_up & ok_lo))


def _polish(P, q, A, l, u, z, y, delta=1e-7, refine_iters=4):
    """Refine (z, y) by solving the KKT system restricted to the active set."""
    m = A.shape[0]
    n = P.shape[0]
    act_low = (y < -1e-10) | ((l == u) & np.isfinite(l))
    act_upp = (y > 1e-10) & ~act_low
    low_idx = np.flatnonzero(act_low)
    upp_idx = np.flatnonzero(act_upp)
    A_low = A[low_idx]
    A_upp = A[upp_idx]
    n_low, n_upp = len(low_idx), len(upp_idx)
    n_act = n_low + n_upp
    if n_act == 0:
        try:
            z_new = spla.spsolve(sp.csc_matrix(P + delta * sp.eye(n)), -q)
        except RuntimeError:
            return None
        z_new = np.atleast_1d(z_new)
        return (z_new, np.zeros(m)) if _polish_ok(P, q, A, l, u, z_new, np.zeros(m)) else None

    K = sp.bmat([
        [P, A_low.T, A_upp.T],
        [A_low, None, None],
        [A_upp, None, None]], format="csc")
    K_reg = (K + delta * sp.diags(
        np.concatenate([np.ones(n), -np.ones(n_act)]))).tocsc()
    rhs = np.concatenate([-q, l[low_idx], u[upp_idx]])
    try:
        lu = spla.splu(K_reg)
    except RuntimeError:
        return None
    t = lu.solve(rhs)
    for _ in range(refine_iters):
        resid = rhs - K @ t
        t = t + lu.solve(resid)
    z_new = t[:n]
    y_new = np.zeros(m)
    y_new[low_idx] = t[n:n + n_low]
    y_new[upp_idx] = t[n + n_low:]
    if not np.all(np.isfinite(z_new)) or not np.all(np.isfinite(y_new)):
        return None
    if _polish_ok(P, q, A, l, u, z_new, y_new):
        return z_new, y_new
    return None


def _polish_ok(P, q, A, l, u, z, y, tol=1e-8):
    Az = A @ z if A.shape[0] else np.zeros(0)
    prim = max(np.maximum(Az - u, 0.0).max(initial=0.0),
               np.maximum(l - Az, 0.0).max(initial=0.0))
    dual = np.abs(P @ z + q + (A.T @ y if A.shape[0] else 0.0)).max(initial=0.0)
    # dual feasibility of row multipliers: y>0 only at finite u, y<0 only at finite l
    eq = (l == u) & np.isfinite(l)
    bad_sign = (((y > tol) & ~np.isfinite(u)) | ((y < -tol) & ~np.isfinite(l))) & ~eq
    # complementarity: y+ pairs with the upper gap, y- with the lower gap
    y_pos = np.maximum(y, 0.0)
    y_neg = np.maximum(-y, 0.0)
    gap_u = np.where(np.isfinite(u), u - Az, 0.0)
    gap_l = np.where(np.isfinite(l), Az - l, 0.0)
    comp = max(np.abs(y_pos * gap_u).max(initial=0.0),
               np.abs(y_neg * gap_l).max(initial=0.0))
    comp_scale = 1.0 + np.abs(y).max(initial=0.0) + np.abs(Az).max(initial=0.0)
    scale = 1.0 + np.abs(q).max(initial=0.0)
    return prim <= tol * (1.0 + np.abs(Az).max(initial=0.0)) and \
        dual <= tol * scale and comp <= tol * comp_scale and not np.any(bad_sign)
