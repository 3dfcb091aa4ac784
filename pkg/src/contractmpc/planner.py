"""Sampling-based higher-level controller.

Generates reference candidates (a structured fan of headings toward the
target crossed with a speed ladder, topped up with seeded random samples),
propagates them through the kinematic planner model, discards candidates
whose tube-inflated path hits an obstacle, and ranks the rest by the planner
cost plus the weighted contract value. In strict mode candidates whose
contract value exceeds the feasibility threshold (or that leave the
contract's sampled range) are discarded outright.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import nlp as nlpmod
from .contract import Contract, reduce_coordinates
from .dynamics import discrete_step, project_state, reference_positions, _reference_array
from .nlp import ConstraintBlock, Nlp, SolverOptions
from .ocp import integration_model
from .scenario import Scenario

FEAS_TAU = 1e-4   # contract values at or below this count as feasible


class PlannerError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class Candidate:
    index: int
    r_seq: np.ndarray            # (N_H, 2) of (psi, v)
    xh_seq: np.ndarray           # (N_H + 1, 2) planner states
    cost: float                  # J_H
    h_c: float = np.nan          # contract value, NaN until evaluated
    total: float = np.nan        # J_H + w_h * h_C
    in_grid: bool = True
    planner_ok: bool = False


@dataclass
class PlanResult:
    best: Candidate
    candidates: list
    rationale: str


def planner_cost(xh_seq, r_seq, s: Scenario) -> float:
    """Quadratic distance-to-target cost plus speed tracking, summed over all
    planner stages; the speed at the terminal stage reuses the last reference
    (hold-last convention)."""
    xh_seq = np.asarray(xh_seq, float)
    r = _reference_array(r_seq)
    cost = 0.0
    for m in range(s.N_H + 1):
        d = xh_seq[m] - s.x_target
        v_m = r[min(m, s.N_H - 1), 1]
        cost += float(d @ (s.Q_H * d)) + s.w_v * (v_m - s.v_target) ** 2
    return cost


def propagate_reference(s: Scenario, xh0, r_seq):
    """Planner states at the planner rate plus positions at the lower rate."""
    positions = reference_positions(xh0, r_seq, s.T_L, s.N_L)
    xh_seq = positions[:: s.N_L].copy()
    return xh_seq, positions


def planner_feasible(xh_seq, r_seq, s: Scenario) -> bool:
    """True iff the reference respects the planner bounds and the whole
    lower-rate path clears every obstacle inflated by the tube width."""
    r = _reference_array(r_seq)
    if np.any(r[:, 0] < s.r_psi_bounds[0] - 1e-12) or \
       np.any(r[:, 0] > s.r_psi_bounds[1] + 1e-12):
        return False
    if np.any(r[:, 1] < s.r_v_bounds[0] - 1e-12) or \
       np.any(r[:, 1] > s.r_v_bounds[1] + 1e-12):
        return False
    positions = reference_positions(np.asarray(xh_seq, float)[0], r, s.T_L, s.N_L)
    inflate = s.d_max if np.isfinite(s.d_max) else 0.0
    for ob in s.obstacles:
        if np.any(ob.contains(positions, inflate=inflate)):
            return False
    return True


def sample_candidates(s: Scenario, xh0, n: int, seed: int = 0) -> list:
    """Deterministic candidate set: the direct-to-target reference first,
    then a heading fan crossed with a speed ladder, then uniform random
    references. Candidates are cost-annotated but not contract-evaluated."""
    if n < 1:
        raise ValueError("need at least one candidate")
    xh0 = np.asarray(xh0, float)
    psi_lo, psi_hi = s.r_psi_bounds
    v_lo, v_hi = s.r_v_bounds
    bearing = float(np.arctan2(s.x_target[1] - xh0[1], s.x_target[0] - xh0[0]))
    psi_c = float(np.clip(bearing, psi_lo, psi_hi))
    v_c = float(np.clip(s.v_target, v_lo, v_hi))

    refs = [(psi_c, v_c)]
    spread = min(0.45, (psi_hi - psi_lo) / 2.0)
    headings = psi_c + spread * np.array([-1.0, -2 / 3, -1 / 3, 1 / 3, 2 / 3, 1.0])
    headings = np.clip(headings, psi_lo, psi_hi)
    speeds = np.clip(np.array([v_c, 0.75 * v_c + 0.25 * v_lo,
                               0.75 * v_c + 0.25 * v_hi]), v_lo, v_hi)
    for v in speeds:
        for psi in headings:
            if len(refs) < n:
                refs.append((float(psi), float(v)))
    rng = np.random.default_rng(seed)
    while len(refs) < n:
        refs.append((float(rng.uniform(psi_lo, psi_hi)),
                     float(rng.uniform(v_lo, v_hi))))
    refs = refs[:n]

    out = []
    for i, (psi, v) in enumerate(refs):
        if i >= 1 + 18 and s.N_H > 1:
            r_seq = np.column_stack([rng.uniform(psi_lo, psi_hi, s.N_H),
                                     rng.uniform(v_lo, v_hi, s.N_H)])
        else:
            r_seq = np.tile([psi, v], (s.N_H, 1))
        xh_seq, _ = propagate_reference(s, xh0, r_seq)
        cand = Candidate(index=i, r_seq=r_seq, xh_seq=xh_seq,
                         cost=planner_cost(xh_seq, r_seq, s))
        cand.planner_ok = planner_feasible(xh_seq, r_seq, s)
        out.append(cand)
    return out


def plan(s: Scenario, x, c: Contract, n: int = 50, seed: int = 0,
         strict: bool = True, terminal_steady: bool = False) -> PlanResult:
    """Pick the best reference sequence for the current plant state.

    Candidates violating planner constraints are discarded; the rest are
    ranked by J_H + w_h * h_C. Strict mode additionally discards candidates
    whose contract value exceeds the feasibility threshold or whose reduced
    coordinates leave the contract's sampled range. Ties break on the lowest
    candidate index.
    """
    x = np.asarray(x, float)
    xh0 = project_state(x)
    cands = sample_candidates(s, xh0, n, seed)
    s_hash = s.content_hash()
    if c.metadata.get("scenario_hash") != s_hash:
        raise PlannerError("contract/scenario hash mismatch")
    if terminal_steady:
        _require_steady_terminal(s, xh0)

    for cand in cands:
        coords = reduce_coordinates(x, cand.r_seq, xh0, c.plant_tag)
        cand.in_grid = bool(c.grid.in_range(coords)[0])
        cand.h_c = float(c.evaluate(coords)[0])
        cand.total = cand.cost + s.w_h * cand.h_c

    admissible = []
    for cand in cands:
        if not cand.planner_ok:
            continue
        if strict and (not cand.in_grid or cand.h_c > FEAS_TAU):
            continue
        admissible.append(cand)
    if not admissible:
        best_bad = min(cands, key=lambda cc: (not cc.planner_ok, cc.h_c))
        raise PlannerError(
            "no admissible candidate",
            {"n": n, "strict": strict,
             "best_rejected_index": best_bad.index,
             "best_rejected_h_c": best_bad.h_c,
             "best_rejected_planner_ok": best_bad.planner_ok})
    best = min(admissible, key=lambda cc: (cc.total, cc.index))
    rationale = (f"selected candidate {best.index}: J_H={best.cost:.6g}, "
                 f"h_C={best.h_c:.3g}, total={best.total:.6g} "
                 f"among {len(admissible)}/{len(cands)} admissible")
    return PlanResult(best=best, candidates=cands, rationale=rationale)


def plan_exact(s: Scenario, x, n: int = 40, seed: int = 0,
               extended: bool = False, terminal_steady: bool = False,
               tau: float = FEAS_TAU) -> PlanResult:
    """Plan with the slack value function evaluated exactly (one lower-level
    optimization per candidate) instead of a contract surrogate.

    Planner-feasible candidates are scanned in cost order and the first one
    with a zero slack value wins; once every admissible candidate has zero
    slack, that is the argmin of the combined objective.
    """
    from . import ocp as ocp_mod
    x = np.asarray(x, float)
    xh0 = project_state(x)
    if terminal_steady:
        _require_steady_terminal(s, xh0)
    cands = sample_candidates(s, xh0, n, seed)
    order = sorted((cc for cc in cands if cc.planner_ok),
                   key=lambda cc: (cc.cost, cc.index))
    if not order:
        raise PlannerError("no planner-feasible candidate", {"n": n})
    last_h = np.nan
    for cand in order:
        try:
            h = ocp_mod.slack_value(s, x, cand.r_seq, extended=extended, xh0=xh0)
        except ocp_mod.OcpSolveError:
            continue
        cand.h_c = last_h = h
        cand.total = cand.cost + s.w_h * h
        if h <= tau:
            rationale = (f"selected candidate {cand.index} with exact "
                         f"h*={h:.3g}, J_H={cand.cost:.6g}")
            return PlanResult(best=cand, candidates=cands, rationale=rationale)
    raise PlannerError("no candidate with zero slack value",
                       {"n": n, "last_h": last_h})


def _require_steady_terminal(s: Scenario, xh0) -> None:
    """Receding-horizon terminal manifold: the kinematic planner is steady at
    any position with zero speed, which must be an admissible reference and
    must admit a matching plant steady state."""
    if not (s.r_v_bounds[0] <= 0.0 <= s.r_v_bounds[1]):
        raise PlannerError(
            "terminal steady-state manifold is empty: zero speed is outside "
            f"the planner speed bounds {s.r_v_bounds}")
    res = find_steady_state(s, xh0, (0.0, 0.0))
    if not res.found:
        raise PlannerError(f"no plant steady state near the planner manifold: {res.report}")


@dataclass
class SteadyStateResult:
    found: bool
    x_s: np.ndarray | None
    u_s: np.ndarray | None
    residual: float
    report: str


def find_steady_state(s: Scenario, xh_s, r_s, tol: float = 1e-8) -> SteadyStateResult:
    """Search for a plant steady state matching a steady planner pair.

    Solves a smoothed feasibility program: minimize the squared fixed-point
    residual plus squared constraint overshoots over (x_s, u_s) within the
    hard boxes. A minimum at (numerically) zero certifies the steady pair;
    a strictly positive minimum is reported as infeasible with its residual.
    """
    xh_s = np.asarray(xh_s, float)
    r_s = np.asarray(r_s, float)
    model = integration_model(s)
    nx, nu = s.plant.nx, s.plant.nu
    substeps = s.plant_substeps

    # the planner pair itself must be steady: zero reference speed
    drift = float(np.abs(r_s[1]) * s.T_L * s.N_L)
    if drift > 1e-9:
        return SteadyStateResult(False, None, None, drift,
                                 f"reference moves the planner state by {drift:.3g} m "
                                 "per cycle; not a steady pair")

    n = nx + nu

    def fixed_point_residual(z):
        x, u = z[:nx], z[nx:]
        return discrete_step(model, x, u, s.T_L, substeps) - x

    def objective(z):
        r = fixed_point_residual(z)
        # tube overshoot at the steady position
        p_err = np.abs(z[:2] - xh_s) - s.d_max
        over = np.maximum(p_err, 0.0)
        val = float(r @ r + over @ over)
        h = 1e-7
        grad = np.empty(n)
        for i in range(n):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            rp = fixed_point_residual(zp)
            rm = fixed_point_residual(zm)
            op = np.maximum(np.abs(zp[:2] - xh_s) - s.d_max, 0.0)
            om = np.maximum(np.abs(zm[:2] - xh_s) - s.d_max, 0.0)
            grad[i] = ((rp @ rp + op @ op) - (rm @ rm + om @ om)) / (2 * h)
        return val, grad

    lb = np.concatenate([np.where(np.isfinite(s.x_lb), s.x_lb, -np.inf), s.u_lb])
    ub = np.concatenate([np.where(np.isfinite(s.x_ub), s.x_ub, np.inf), s.u_ub])
    x_guess = np.zeros(nx)
    x_guess[:2] = xh_s
    x_guess = np.clip(x_guess, lb[:nx], ub[:nx])
    z0 = np.concatenate([x_guess, np.zeros(nu)])

    prob = Nlp(n=n, objective=objective, lb=lb, ub=ub)
    res = nlpmod.solve(prob, SolverOptions(hessian="bfgs", max_iter=80,
                                           warm_start=z0, kkt_tol=1e-8))
    z = res.x_star
    resid = float(np.linalg.norm(fixed_point_residual(z)))
    over = float(np.maximum(np.abs(z[:2] - xh_s) - s.d_max, 0.0).max(initial=0.0))
    if resid <= tol and over <= tol:
        return SteadyStateResult(True, z[:nx].copy(), z[nx:].copy(), resid,
                                 "steady state found")
    return SteadyStateResult(False, None, None, max(resid, over),
                             f"no steady state: best fixed-point residual {resid:.3g}, "
                             f"tube overshoot {over:.3g} (solver {res.status})")
