"""Generic smooth NLP container and SQP solver.

Problems are stated as

    min f(z)   s.t.  c_eq(z) = 0,  c_ineq(z) <= 0,  lb <= z <= ub

with analytic gradients and (sparse) Jacobians supplied by the caller. The
solver runs SQP iterations: the objective is modeled by a caller-supplied
positive-semidefinite curvature matrix (Gauss-Newton for least-squares
costs) or a damped BFGS approximation, constraints are linearized, the
convex QP subproblem is solved by the operator-splitting solver in
``contractmpc.qp``, and steps are globalized with an L1 merit line search.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .qp import solve_qp


@dataclass(frozen=True)
class ConstraintBlock:
    """A vector constraint with Jacobian: fun(z) -> (c, J) with J sparse or dense.

    ``fun_val``, when given, evaluates the constraint value only; the merit
    line search uses it to avoid redundant Jacobian work.
    """

    m: int
    fun: Callable[[np.ndarray], tuple]
    fun_val: Callable[[np.ndarray], np.ndarray] | None = None

    def value(self, z: np.ndarray) -> np.ndarray:
        if self.fun_val is not None:
            return np.asarray(self.fun_val(z), float)
        return np.asarray(self.fun(z)[0], float)


@dataclass(frozen=True)
class Nlp:
    """Smooth NLP with box bounds. ``objective(z)`` returns (value, gradient);
    ``obj_hess(z)`` optionally returns a PSD curvature model of the objective
    (exact for quadratic costs, Gauss-Newton for least squares)."""

    n: int
    objective: Callable[[np.ndarray], tuple]
    lb: np.ndarray
    ub: np.ndarray
    eq: ConstraintBlock | None = None
    ineq: ConstraintBlock | None = None
    obj_hess: Callable[[np.ndarray], sp.spmatrix] | None = None
    # optional feasibility restoration: map a trial point onto the equality
    # manifold (e.g. re-rolling shooting states); returns None when it fails
    restore: Callable[[np.ndarray], np.ndarray | None] | None = None
    # optional full Lagrangian curvature model (objective plus constraint
    # curvature contracted with multipliers), must return a PSD matrix
    lag_hess: Callable[[np.ndarray, np.ndarray, np.ndarray], sp.spmatrix] | None = None

    def __post_init__(self):
        object.__setattr__(self, "lb", np.asarray(self.lb, float))
        object.__setattr__(self, "ub", np.asarray(self.ub, float))
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ValueError("box bounds must have shape (n,)")
        if np.any(self.lb > self.ub):
            raise ValueError("empty box: lb > ub")

    @property
    def m_eq(self) -> int:
        return self.eq.m if self.eq else 0

    @property
    def m_ineq(self) -> int:
        return self.ineq.m if self.ineq else 0


@dataclass
class Multipliers:
    eq: np.ndarray
    ineq: np.ndarray   # >= 0
    lb: np.ndarray     # >= 0
    ub: np.ndarray     # >= 0


@dataclass
class NlpSolution:
    x_star: np.ndarray
    f: float
    multipliers: Multipliers
    # scaled residual used for the convergence decision: stationarity and
    # complementarity are measured relative to the magnitude of the dual
    # terms (so badly scaled multipliers do not demand sub-epsilon algebra),
    # feasibility is absolute
    kkt_residual: float
    status: str                    # converged | max_iter | infeasible_subproblem | numeric_failure
    iterations: int
    # (mu, merit_before, merit_after) per accepted step
    merit_trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


@dataclass
class SolverOptions:
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-8
    max_iter: int = 200
    hessian: str = "gauss-newton"      # "gauss-newton" | "bfgs" | "exact"
    merit_growth: float = 2.0
    levenberg: float = 1e-8
    warm_start: np.ndarray | None = None
    warm_duals: np.ndarray | None = None   # QP row duals from a previous solve
    qp_eps: float = 1e-7
    qp_max_iter: int = 40000
    verbose: bool = False

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.feas_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.hessian not in ("gauss-newton", "bfgs", "exact"):
            raise ValueError(f"unknown hessian mode {self.hessian!r}")


def _eval_block(block: ConstraintBlock | None, z: np.ndarray):
    if block is None:
        return np.zeros(0), sp.csr_matrix((0, len(z)))
    c, J = block.fun(z)
    return np.asarray(c, float), sp.csr_matrix(J)


def _violation_l1(ce: np.ndarray, ci: np.ndarray) -> float:
    return float(np.abs(ce).sum() + np.maximum(ci, 0.0).sum())


def solve(nlp: Nlp, opts: SolverOptions | None = None) -> NlpSolution:
    """Run SQP on the problem; always returns the best iterate found."""
    opts = opts or SolverOptions()
    n = nlp.n

    z = np.zeros(n) if opts.warm_start is None else np.asarray(opts.warm_start, float).copy()
    z = np.clip(z, nlp.lb, nlp.ub)

    box_idx = np.flatnonzero(np.isfinite(nlp.lb) | np.isfinite(nlp.ub))
    I_box = sp.eye(n, format="csr")[box_idx]

    bfgs_B = None
    prev_grad_L = None
    prev_z = None
    mu = 1.0
    lev = opts.levenberg
    qp_y = opts.warm_duals
    merit_trace: list = []
    status = "max_iter"
    mult = Multipliers(np.zeros(nlp.m_eq), np.zeros(nlp.m_ineq),
                       np.zeros(n), np.zeros(n))
    kkt = np.inf
    it = 0

    for it in range(1, opts.max_iter + 1):
        try:
            f, g = nlp.objective(z)
            ce, Je = _eval_block(nlp.eq, z)
            ci, Ji = _eval_block(nlp.ineq, z)
        except FloatingPointError:
            status = "numeric_failure"
            break
        if not (np.isfinite(f) and np.all(np.isfinite(g)) and
                np.all(np.isfinite(ce)) and np.all(np.isfinite(ci))):
            status = "numeric_failure"
            break

        # curvature model
        if opts.hessian == "exact" and nlp.lag_hess is not None:
            H = sp.csc_matrix(nlp.lag_hess(z, mult.eq, mult.ineq))
        elif opts.hessian != "bfgs" and nlp.obj_hess is not None:
            H = sp.csc_matrix(nlp.obj_hess(z))
        else:
            if bfgs_B is None:
                bfgs_B = np.eye(n)
            if prev_grad_L is not None:
                grad_L = g + Je.T @ mult.eq + Ji.T @ mult.ineq
                bfgs_B = _damped_bfgs(bfgs_B, z - prev_z, grad_L - prev_grad_L)
            H = sp.csc_matrix(bfgs_B)
        H = H + lev * sp.eye(n)

        # QP subproblem over the step d
        A = sp.vstack([Je, Ji, I_box], format="csc")
        l_rows = np.concatenate([-ce, np.full(nlp.m_ineq, -np.inf), nlp.lb[box_idx] - z[box_idx]])
        u_rows = np.concatenate([-ce, -ci, nlp.ub[box_idx] - z[box_idx]])
        res = solve_qp(H, g, A, l_rows, u_rows, y0=qp_y,
                       eps_abs=opts.qp_eps, max_iter=opts.qp_max_iter)
        if res.status == "primal_infeasible":
            status = "infeasible_subproblem"
            break
        if not np.all(np.isfinite(res.z)):
            status = "numeric_failure"
            break
        d = res.z
        qp_y = res.y

        m_eq, m_in = nlp.m_eq, nlp.m_ineq
        lam_eq = res.y[:m_eq]
        lam_in = np.maximum(res.y[m_eq:m_eq + m_in], 0.0)
        y_box = res.y[m_eq + m_in:]
        lam_lb = np.zeros(n)
        lam_ub = np.zeros(n)
        lam_lb[box_idx] = np.maximum(-y_box, 0.0)
        lam_ub[box_idx] = np.maximum(y_box, 0.0)
        mult = Multipliers(lam_eq, lam_in, lam_lb, lam_ub)

        kkt = _kkt_from_parts(g, ce, Je, ci, Ji, z, nlp.lb, nlp.ub, mult,
                              scaled=True)
        viol = max(np.abs(ce).max(initial=0.0), np.maximum(ci, 0.0).max(initial=0.0))
        if kkt > opts.kkt_tol and kkt <= 1e-2 and viol <= opts.feas_tol:
            # the damped-QP multipliers are noisy; a least-squares refit over
            # the active set often certifies the current point directly
            refit = _dual_polish(g, ce, Je, ci, Ji, z, nlp.lb, nlp.ub)
            if refit is not None:
                kkt_r = _kkt_from_parts(g, ce, Je, ci, Ji, z, nlp.lb, nlp.ub,
                                        refit, scaled=True)
                if kkt_r < kkt:
                    mult, kkt = refit, kkt_r
        if opts.verbose:
            print(f"[sqp] it={it} f={f:.6g} kkt={kkt:.3e} viol={viol:.1e} "
                  f"|d|={np.abs(d).max(initial=0):.2e} lev={lev:.1e} "
                  f"qp={res.status}/{res.iterations}")
        if kkt <= opts.kkt_tol and viol <= opts.feas_tol:
            status = "converged"
            break

        # L1 merit line search along d
        lam_norm = max(np.abs(lam_eq).max(initial=0.0), lam_in.max(initial=0.0))
        if mu < lam_norm:
            mu = opts.merit_growth * lam_norm
        v0 = _violation_l1(ce, ci)
        phi0 = f + mu * v0
        descent = float(g @ d) - mu * v0

        if prev_grad_L is None or opts.hessian == "bfgs":
            prev_grad_L = g + Je.T @ mult.eq + Ji.T @ mult.ineq
            prev_z = z.copy()

        soc_lu = None

        def soc(cand):
            # second-order correction: least-norm Newton step on the
            # equality violation, removing curvature-induced defect noise
            nonlocal soc_lu
            try:
                ce_t = nlp.eq.value(cand)
            except FloatingPointError:
                return None
            if not np.all(np.isfinite(ce_t)):
                return None
            if soc_lu is None:
                M = (Je @ Je.T + 1e-10 * sp.eye(nlp.m_eq)).tocsc()
                try:
                    soc_lu = spla.splu(M)
                except RuntimeError:
                    soc_lu = False
            if soc_lu is False:
                return None
            dc = -Je.T @ soc_lu.solve(ce_t)
            return np.clip(cand + dc, nlp.lb, nlp.ub)

        alpha = 1.0
        accepted = False
        for _ in range(25):
            cand = np.clip(z + alpha * d, nlp.lb, nlp.ub)
            candidates = [cand]
            if nlp.restore is not None:
                candidates.append(nlp.restore(cand))
            if nlp.eq is not None:
                candidates.append(soc(cand))
            z_try, phi_try = None, None
            for c in candidates:
                if c is None:
                    continue
                phi_c = _merit_at(nlp, c, mu)
                if phi_c is not None and (phi_try is None or phi_c < phi_try):
                    z_try, phi_try = c, phi_c
            if phi_try is not None and phi_try <= phi0 + 1e-4 * alpha * descent + 1e-12:
                accepted = True
                break
            alpha *= 0.5
        # proximal damping schedule: grow on poor steps, relax on full ones
        if not accepted or alpha < 0.1:
            lev = min(max(lev, 1e-8) * 10.0, 1e4)
        elif alpha == 1.0:
            lev = max(lev / 5.0, opts.levenberg)
        if not accepted:
            if lev >= 1e4:
                status = "max_iter"
                break
            continue   # re-linearize with stronger damping
        merit_trace.append((mu, phi0, phi_try))
        z = z_try

    f_final, _ = nlp.objective(z)
    return NlpSolution(x_star=z, f=float(f_final), multipliers=mult,
                       kkt_residual=float(kkt), status=status, iterations=it,
                       merit_trace=merit_trace)


def _merit_at(nlp: Nlp, z: np.ndarray, mu: float) -> float | None:
    try:
        f, _ = nlp.objective(z)
        ce = nlp.eq.value(z) if nlp.eq else np.zeros(0)
        ci = nlp.ineq.value(z) if nlp.ineq else np.zeros(0)
    except FloatingPointError:
        return None
    phi = f + mu * _violation_l1(ce, ci)
    return float(phi) if np.isfinite(phi) else None


def _dual_polish(g, ce, Je, ci, Ji, z, lb, ub, act_tol=1e-7) -> Multipliers | None:
    """Least-squares multipliers at a fixed point: minimize the stationarity
    residual over eq multipliers (free) plus ineq/bound multipliers (>= 0,
    restricted to rows and bounds that are numerically active)."""
    n = len(z)
    act_i = np.flatnonzero(ci >= -act_tol)
    act_l = np.flatnonzero(np.isfinite(lb) & (z - lb <= act_tol))
    act_u = np.flatnonzero(np.isfinite(ub) & (ub - z <= act_tol))
    blocks = [Je.T]
    if len(act_i):
        blocks.append(Ji[act_i].T)
    if len(act_l):
        blocks.append(-sp.eye(n, format="csr")[act_l].T)
    if len(act_u):
        blocks.append(sp.eye(n, format="csr")[act_u].T)
    R = sp.hstack(blocks, format="csc") if blocks else None
    if R is None or R.shape[1] == 0:
        return None
    p = R.shape[1]
    m_eq = Je.shape[0]
    P = (R.T @ R + 1e-12 * sp.eye(p)).tocsc()
    q = np.asarray(R.T @ g).ravel()
    lo = np.full(p, -np.inf)
    lo[m_eq:] = 0.0
    res = solve_qp(P, q, sp.eye(p, format="csc"), lo, np.full(p, np.inf))
    if res.status != "solved":
        return None
    mu_fit = res.z
    lam_eq = mu_fit[:m_eq]
    lam_in = np.zeros(Ji.shape[0])
    off = m_eq
    if len(act_i):
        lam_in[act_i] = np.maximum(mu_fit[off:off + len(act_i)], 0.0)
        off += len(act_i)
    lam_lb = np.zeros(n)
    if len(act_l):
        lam_lb[act_l] = np.maximum(mu_fit[off:off + len(act_l)], 0.0)
        off += len(act_l)
    lam_ub = np.zeros(n)
    if len(act_u):
        lam_ub[act_u] = np.maximum(mu_fit[off:off + len(act_u)], 0.0)
    return Multipliers(lam_eq, lam_in, lam_lb, lam_ub)


def _damped_bfgs(B: np.ndarray, s: np.ndarray, y: np.ndarray, c: float = 0.2) -> np.ndarray:
    """Powell-damped BFGS update keeping B positive definite."""
    Bs = B @ s
    sBs = float(s @ Bs)
    sy = float(s @ y)
    if sBs <= 1e-14 or np.linalg.norm(s) <= 1e-14:
        return B
    if sy >= c * sBs:
        theta = 1.0
    else:
        denom = sBs - sy
        theta = (1.0 - c) * sBs / denom if denom > 1e-14 else 0.0
    yt = theta * y + (1.0 - theta) * Bs
    syt = float(s @ yt)
    if syt <= 1e-14:
        return B
    B_new = B - np.outer(Bs, Bs) / sBs + np.outer(yt, yt) / syt
    return 0.5 * (B_new + B_new.T)


def kkt_residual(nlp: Nlp, z: np.ndarray, mult: Multipliers) -> float:
    """Infinity norm over stationarity, primal feasibility violations and
    complementarity products at (z, multipliers)."""
    z = np.asarray(z, float)
    _, g = nlp.objective(z)
    ce, Je = _eval_block(nlp.eq, z)
    ci, Ji = _eval_block(nlp.ineq, z)
    return _kkt_from_parts(g, ce, Je, ci, Ji, z, nlp.lb, nlp.ub, mult)


def _kkt_from_parts(g, ce, Je, ci, Ji, z, lb, ub, mult: Multipliers,
                    scaled: bool = False) -> float:
    eq_term = Je.T @ mult.eq
    in_term = Ji.T @ mult.ineq
    stat = g + eq_term + in_term - mult.lb + mult.ub
    if scaled:
        s_d = max(1.0, np.abs(g).max(initial=0.0),
                  np.abs(eq_term).max(initial=0.0),
                  np.abs(in_term).max(initial=0.0),
                  mult.lb.max(initial=0.0), mult.ub.max(initial=0.0))
        s_c = max(1.0, mult.ineq.max(initial=0.0),
                  mult.lb.max(initial=0.0), mult.ub.max(initial=0.0))
    else:
        s_d = s_c = 1.0
    parts = [np.abs(stat).max(initial=0.0) / s_d,
             np.abs(ce).max(initial=0.0),
             np.maximum(ci, 0.0).max(initial=0.0),
             np.abs(mult.ineq * ci).max(initial=0.0) / s_c,
             np.maximum(-mult.ineq, 0.0).max(initial=0.0)]
    fin_lb = np.isfinite(lb)
    fin_ub = np.isfinite(ub)
    parts.append(np.maximum(lb - z, 0.0).max(initial=0.0))
    parts.append(np.maximum(z - ub, 0.0).max(initial=0.0))
    if fin_lb.any():
        parts.append(np.abs(mult.lb[fin_lb] * (z - lb)[fin_lb]).max(initial=0.0) / s_c)
    if fin_ub.any():
        parts.append(np.abs(mult.ub[fin_ub] * (ub - z)[fin_ub]).max(initial=0.0) / s_c)
    return float(max(parts))


@dataclass
class DerivativeReport:
    grad_err: float
    eq_err: float
    ineq_err: float
    worst: tuple = ()

    @property
    def max_err(self) -> float:
        return max(self.grad_err, self.eq_err, self.ineq_err)


def check_derivatives(nlp: Nlp, z: np.ndarray, fd_step: float = 1e-6) -> DerivativeReport:
    """Compare supplied derivatives against central finite differences at z.

    Reports the maximum relative error for the objective gradient and each
    constraint Jacobian; relative to max(1, |analytic|) per entry.
    """
    z = np.asarray(z, float)
    n = nlp.n
    _, g = nlp.objective(z)
    ce, Je = _eval_block(nlp.eq, z)
    ci, Ji = _eval_block(nlp.ineq, z)
    Je = Je.toarray()
    Ji = Ji.toarray()

    g_fd = np.zeros(n)
    Je_fd = np.zeros_like(Je)
    Ji_fd = np.zeros_like(Ji)
    for i in range(n):
        h = fd_step * max(1.0, abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        fp, _ = nlp.objective(zp)
        fm, _ = nlp.objective(zm)
        g_fd[i] = (fp - fm) / (2 * h)
        cep, _ = _eval_block(nlp.eq, zp)
        cem, _ = _eval_block(nlp.eq, zm)
        cip, _ = _eval_block(nlp.ineq, zp)
        cim, _ = _eval_block(nlp.ineq, zm)
        if len(cep):
            Je_fd[:, i] = (cep - cem) / (2 * h)
        if len(cip):
            Ji_fd[:, i] = (cip - cim) / (2 * h)

    def rel_err(an, fd):
        if an.size == 0:
            return 0.0, ()
        err = np.abs(fd - an) / np.maximum(1.0, np.abs(an))
        idx = np.unravel_index(np.argmax(err), err.shape)
        return float(err.max()), idx

    ge, gi = rel_err(g, g_fd)
    ee, ei = rel_err(Je, Je_fd)
    ie, ii = rel_err(Ji, Ji_fd)
    worst = max([("grad", ge, gi), ("eq", ee, ei), ("ineq", ie, ii)],
                key=lambda t: t[1])
    return DerivativeReport(grad_err=ge, eq_err=ee, ineq_err=ie, worst=worst)
