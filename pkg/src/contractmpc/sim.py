"""Closed-loop execution and verification.

Missions run the shrinking-horizon soft MPC against the nominal plant (the
plant map equals the controller's internal discrete map, so the guarantees
are exercised exactly as stated). Receding-horizon runs alternate a planner
cycle with N_L cyclic-horizon MPC steps tied together by the consistency
constraint. The verifiers replay the recursive-feasibility constructions
step by step and audit every constraint from the raw logs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ocp, planner as planner_mod
from .contract import Contract
from .dynamics import STATE_FIELDS, INPUT_FIELDS, discrete_step, project_state, \
    reference_positions, _reference_array
from .ocp import MISSION_SHRINKING, CYCLIC, OcpSolveError, TranscribedOcp, \
    integration_model, shift_candidate, solve_mpc, slack_value
from .planner import FEAS_TAU, PlannerError, plan, plan_exact, find_steady_state
from .scenario import Scenario


@dataclass
class PlanRecord:
    k_H: int
    r_seq: np.ndarray
    xh0: np.ndarray              # planner anchor for this cycle
    h_c: float
    cost: float
    n_candidates: int
    chosen_index: int


@dataclass
class SimLog:
    """Time-indexed closed-loop record; self-contained for audits."""

    scenario_hash: str
    plant_tag: str
    states: np.ndarray           # (K+1, nx)
    inputs: np.ndarray           # (K, nu)
    iterations: np.ndarray       # (K,) solver iterations per step
    xi_inf: np.ndarray           # (K,) max slack per solve
    p_ref: np.ndarray            # (K+1, 2) reference positions per step
    plans: list = field(default_factory=list)
    aborted: str = ""

    @property
    def steps(self) -> int:
        return len(self.inputs)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def to_text(self) -> str:
        nx = self.states.shape[1]
        nu = self.inputs.shape[1] if self.steps else 2
        state_names = STATE_FIELDS[self.plant_tag]
        input_names = INPUT_FIELDS[self.plant_tag]
        lines = [f"# contractmpc-simlog v1",
                 f"# scenario_hash: {self.scenario_hash}",
                 f"# plant: {self.plant_tag}"]
        if self.aborted:
            lines.append(f"# aborted: {self.aborted}")
        for p in self.plans:
            refs = " ".join(f"{v!r}" for v in np.asarray(p.r_seq).ravel())
            lines.append(
                f"# plan: k_H={p.k_H} anchor={p.xh0[0]!r},{p.xh0[1]!r} "
                f"h_c={p.h_c!r} cost={p.cost!r} n={p.n_candidates} "
                f"chosen={p.chosen_index} refs={refs}")
        header = ["k"] + list(state_names) + list(input_names) + \
            ["iterations", "xi_inf", "pref_x", "pref_y"]
        lines.append("\t".join(header))
        for k in range(self.steps + 1):
            row = [str(k)] + [repr(float(v)) for v in self.states[k]]
            if k < self.steps:
                row += [repr(float(v)) for v in self.inputs[k]]
                row += [str(int(self.iterations[k])), repr(float(self.xi_inf[k]))]
            else:
                row += [""] * (nu + 2)
            row += [repr(float(self.p_ref[k][0])), repr(float(self.p_ref[k][1]))]
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SimLog":
        meta = {}
        plans = []
        rows = []
        header = None
        for line in text.splitlines():
            if line.startswith("# plan: "):
                fields = dict(kv.split("=", 1) for kv in line[len("# plan: "):].split(" "))
                refs = np.array([float(v) for v in fields["refs"].split()]).reshape(-1, 2)
                anchor = np.array([float(v) for v in fields["anchor"].split(",")])
                plans.append(PlanRecord(
                    k_H=int(fields["k_H"]), r_seq=refs, xh0=anchor,
                    h_c=float(fields["h_c"]), cost=float(fields["cost"]),
                    n_candidates=int(fields["n"]), chosen_index=int(fields["chosen"])))
            elif line.startswith("# ") and ": " in line:
                key, _, value = line[2:].partition(": ")
                meta[key] = value
            elif line.startswith("#"):
                continue
            elif header is None:
                header = line.split("\t")
            elif line.strip():
                rows.append(line.split("\t"))
        plant = meta["plant"]
        nx = len(STATE_FIELDS[plant])
        nu = len(INPUT_FIELDS[plant])
        K = len(rows) - 1
        states = np.array([[float(r[1 + i]) for i in range(nx)] for r in rows])
        inputs = np.array([[float(rows[k][1 + nx + i]) for i in range(nu)]
                           for k in range(K)]).reshape(K, nu)
        iters = np.array([int(rows[k][1 + nx + nu]) for k in range(K)], dtype=int)
        xi = np.array([float(rows[k][2 + nx + nu]) for k in range(K)])
        p_ref = np.array([[float(r[-2]), float(r[-1])] for r in rows])
        return cls(scenario_hash=meta["scenario_hash"], plant_tag=plant,
                   states=states, inputs=inputs, iterations=iters, xi_inf=xi,
                   p_ref=p_ref, plans=plans, aborted=meta.get("aborted", ""))

    @classmethod
    def load(cls, path) -> "SimLog":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


@dataclass
class MarginReport:
    state_margin: np.ndarray     # (K+1,) positive = violation [per-step max]
    input_margin: np.ndarray     # (K,)
    tube_margin: np.ndarray      # (K+1,)
    flags: list                  # (k, kind, value) beyond tolerance

    @property
    def ok(self) -> bool:
        return not self.flags

    @property
    def max_violation(self) -> float:
        parts = [self.state_margin.max(initial=-np.inf),
                 self.tube_margin.max(initial=-np.inf)]
        if len(self.input_margin):
            parts.append(self.input_margin.max(initial=-np.inf))
        return float(max(parts))


def audit_constraints(log: SimLog, s: Scenario, tol: float = 1e-6) -> MarginReport:
    """Recompute every margin from the raw log and flag violations."""
    fin_lb = np.isfinite(s.x_lb)
    fin_ub = np.isfinite(s.x_ub)
    K = log.steps
    state_m = np.full(K + 1, -np.inf)
    tube_m = np.full(K + 1, -np.inf)
    input_m = np.full(K, -np.inf)
    for k in range(K + 1):
        x = log.states[k]
        parts = []
        if fin_lb.any():
            parts.append((s.x_lb - x)[fin_lb].max())
        if fin_ub.any():
            parts.append((x - s.x_ub)[fin_ub].max())
        state_m[k] = max(parts) if parts else -np.inf
        if np.isfinite(s.d_max):
            tube_m[k] = np.abs(x[:2] - log.p_ref[k]).max() - s.d_max
    for k in range(K):
        u = log.inputs[k]
        input_m[k] = max((s.u_lb - u).max(), (u - s.u_ub).max())
    flags = []
    for k in range(K + 1):
        if state_m[k] > tol:
            flags.append((k, "state", float(state_m[k])))
        if tube_m[k] > tol:
            flags.append((k, "tube", float(tube_m[k])))
        if k < K and input_m[k] > tol:
            flags.append((k, "input", float(input_m[k])))
    return MarginReport(state_m, input_m, tube_m, flags)


def run_mission(s: Scenario, c: Contract | None, n: int = 50, seed: int = 0,
                strict: bool = True, force_candidate: int | None = None,
                r_seq=None) -> SimLog:
    """Plan once at mission start, then track with the shrinking-horizon soft
    MPC against the nominal plant. ``force_candidate`` executes a specific
    candidate regardless of admissibility (for violation studies);
    ``r_seq`` bypasses the planner entirely."""
    x = np.asarray(s.x0, float).copy()
    xh0 = project_state(x)
    plans = []
    if r_seq is None:
        if force_candidate is not None:
            cands = planner_mod.sample_candidates(s, xh0, n, seed)
            chosen = cands[force_candidate]
            h_c = c.eval_state(s, x, chosen.r_seq, xh0) if c is not None else np.nan
            plans.append(PlanRecord(0, _reference_array(chosen.r_seq), xh0,
                                    float(h_c), chosen.cost, len(cands),
                                    chosen.index))
            r_arr = _reference_array(chosen.r_seq)
        else:
            result = plan(s, x, c, n, seed, strict=strict)
            best = result.best
            plans.append(PlanRecord(0, _reference_array(best.r_seq), xh0,
                                    best.h_c, best.cost, len(result.candidates),
                                    best.index))
            r_arr = _reference_array(best.r_seq)
    else:
        r_arr = _reference_array(r_seq)
        plans.append(PlanRecord(0, r_arr, xh0, np.nan, np.nan, 0, -1))

    model = integration_model(s)
    K = s.mission_steps
    p_ref = reference_positions(xh0, r_arr, s.T_L, s.N_L)
    states = np.zeros((K + 1, s.plant.nx))
    inputs = np.zeros((K, s.plant.nu))
    iters = np.zeros(K, dtype=int)
    xi = np.zeros(K)
    states[0] = x
    aborted = ""
    warm = None
    for k in range(K):
        try:
            if warm is not None:
                tr = TranscribedOcp(s, x, r_arr, k, MISSION_SHRINKING, xh0)
                z0 = tr.initial_guess(shift_candidate(warm, warm.inputs[-1], 0))
                sol = solve_mpc(s, x, r_arr, k, MISSION_SHRINKING, warm=z0, xh0=xh0)
            else:
                sol = solve_mpc(s, x, r_arr, k, MISSION_SHRINKING, xh0=xh0)
        except OcpSolveError as e:
            aborted = f"solver failure at step {k}: {e}"
            states = states[:k + 1]
            inputs = inputs[:k]
            iters = iters[:k]
            xi = xi[:k]
            p_ref = p_ref[:k + 1]
            break
        inputs[k] = sol.inputs[0]
        iters[k] = sol.nlp_solution.iterations
        xi[k] = sol.xi_inf
        x = discrete_step(model, x, inputs[k], s.T_L, s.plant_substeps)
        states[k + 1] = x
        warm = sol
    return SimLog(scenario_hash=s.content_hash(), plant_tag=s.plant.tag,
                  states=states, inputs=inputs, iterations=iters, xi_inf=xi,
                  p_ref=p_ref, plans=plans, aborted=aborted)


def run_receding(s: Scenario, c: Contract | None, cycles: int, seed: int = 0,
                 n: int = 40) -> SimLog:
    """Receding-horizon loop: plan with the terminal steady-state manifold
    every N_L steps, then run cyclic-horizon MPC with the consistency
    constraint toward the planner's one-step prediction."""
    x = np.asarray(s.x0, float).copy()
    model = integration_model(s)
    K = cycles * s.N_L
    states = np.zeros((K + 1, s.plant.nx))
    inputs = np.zeros((K, s.plant.nu))
    iters = np.zeros(K, dtype=int)
    xi = np.zeros(K)
    p_ref_all = np.zeros((K + 1, 2))
    states[0] = x
    plans = []
    aborted = ""
    for k_H in range(cycles):
        xh = project_state(x)
        try:
            if c is not None:
                result = plan(s, x, c, n, seed, strict=True, terminal_steady=True)
            else:
                result = plan_exact(s, x, n=n, seed=seed, extended=True,
                                    terminal_steady=True)
        except PlannerError as e:
            aborted = f"planner infeasible at cycle {k_H}: {e}"
            break
        best = result.best
        r_arr = _reference_array(best.r_seq)
        plans.append(PlanRecord(k_H, r_arr, xh, best.h_c, best.cost,
                                len(result.candidates), best.index))
        cycle_ref = reference_positions(xh, r_arr[:1], s.T_L, s.N_L)
        warm = None
        failed = False
        for j in range(s.N_L):
            k = k_H * s.N_L + j
            p_ref_all[k] = cycle_ref[j]
            try:
                if warm is not None:
                    tr = TranscribedOcp(s, x, r_arr, j, CYCLIC, xh)
                    z0 = tr.initial_guess(shift_candidate(warm, warm.inputs[-1], 0)
                                          if len(warm.inputs) > 1 else None)
                    sol = solve_mpc(s, x, r_arr, j, CYCLIC, warm=z0, xh0=xh)
                else:
                    sol = solve_mpc(s, x, r_arr, j, CYCLIC, xh0=xh)
            except OcpSolveError as e:
                aborted = f"solver failure at step {k}: {e}"
                failed = True
                break
            inputs[k] = sol.inputs[0]
            iters[k] = sol.nlp_solution.iterations
            xi[k] = max(sol.xi_inf, sol.xi_g.max(initial=0.0))
            x = discrete_step(model, x, inputs[k], s.T_L, s.plant_substeps)
            states[k + 1] = x
            warm = sol
        if failed:
            K = k
            states = states[:K + 1]
            inputs = inputs[:K]
            iters = iters[:K]
            xi = xi[:K]
            p_ref_all = p_ref_all[:K + 1]
            break
        p_ref_all[(k_H + 1) * s.N_L] = cycle_ref[s.N_L]
    return SimLog(scenario_hash=s.content_hash(), plant_tag=s.plant.tag,
                  states=states, inputs=inputs, iterations=iters, xi_inf=xi,
                  p_ref=p_ref_all, plans=plans, aborted=aborted)


@dataclass
class VerificationReport:
    theorem: str
    passed: bool
    reason: str = ""
    witness_step: int | None = None
    max_slack: float = 0.0
    max_violation: float = -np.inf

    def __post_init__(self):
        if not self.passed and self.witness_step is None and \
                self.reason not in ("precondition-unmet", "assumption-unmet"):
            self.witness_step = -1


def verify_theorem1(s: Scenario, x0, r_seq, xh0=None, tol: float = 1e-6,
                    tau: float = FEAS_TAU) -> VerificationReport:
    """Recursive feasibility of the mission-based scheme: if the slack value
    at the mission start is zero, both the explicit shifted-input candidate
    and the full closed loop must satisfy every constraint with zero slack."""
    x0 = np.asarray(x0, float)
    xh0 = project_state(x0) if xh0 is None else np.asarray(xh0, float)
    try:
        h_star, h_sol = slack_value(s, x0, r_seq, xh0=xh0, return_solution=True)
    except OcpSolveError as e:
        return VerificationReport("theorem1", False, f"slack value solve failed: {e}")
    if h_star > tau:
        return VerificationReport("theorem1", False, "precondition-unmet",
                                  max_slack=h_star)

    # open-loop part: the proof's shifted candidates all live on the planned
    # trajectory, so constraint satisfaction along it verifies every shift
    model = integration_model(s)
    r_arr = _reference_array(r_seq)
    p_ref = reference_positions(xh0, r_arr, s.T_L, s.N_L)
    x = x0.copy()
    xs = [x.copy()]
    for u in h_sol.inputs:
        x = discrete_step(model, x, u, s.T_L, s.plant_substeps)
        xs.append(x.copy())
    ol_log = SimLog(scenario_hash=s.content_hash(), plant_tag=s.plant.tag,
                    states=np.asarray(xs), inputs=h_sol.inputs,
                    iterations=np.zeros(len(h_sol.inputs), dtype=int),
                    xi_inf=np.zeros(len(h_sol.inputs)), p_ref=p_ref)
    ol_report = audit_constraints(ol_log, s, tol)
    if not ol_report.ok:
        k, kind, val = ol_report.flags[0]
        return VerificationReport("theorem1", False,
                                  f"open-loop candidate violates {kind} at step {k}",
                                  witness_step=k, max_violation=val)

    # closed-loop part
    log = run_mission(s, None, r_seq=r_seq)
    if log.aborted:
        return VerificationReport("theorem1", False, log.aborted)
    cl_report = audit_constraints(log, s, tol)
    max_xi = float(log.xi_inf.max(initial=0.0))
    if max_xi > tol:
        k = int(np.argmax(log.xi_inf))
        return VerificationReport("theorem1", False,
                                  f"closed-loop slack {max_xi:.3e} at step {k}",
                                  witness_step=k, max_slack=max_xi)
    if not cl_report.ok:
        k, kind, val = cl_report.flags[0]
        return VerificationReport("theorem1", False,
                                  f"closed-loop {kind} violation at step {k}",
                                  witness_step=k, max_violation=val)
    return VerificationReport("theorem1", True, "pass", max_slack=max_xi,
                              max_violation=cl_report.max_violation)


def verify_theorem2(s: Scenario, cycles: int = 10, seed: int = 0, n: int = 40,
                    tol: float = 1e-6, tau: float = FEAS_TAU) -> VerificationReport:
    """Receding-horizon recursive feasibility: every cycle must plan
    successfully, run with zero slack, and admit the shifted-reference plus
    appended-steady-input candidate of the proof before replanning."""
    xh_start = project_state(np.asarray(s.x0, float))
    steady = find_steady_state(s, xh_start, (0.0, 0.0))
    if not steady.found:
        return VerificationReport("theorem2", False, "assumption-unmet")

    x = np.asarray(s.x0, float).copy()
    model = integration_model(s)
    max_xi = 0.0
    for k_H in range(cycles):
        xh = project_state(x)
        try:
            result = plan_exact(s, x, n=n, seed=seed, extended=True,
                                terminal_steady=True)
        except PlannerError as e:
            return VerificationReport("theorem2", False,
                                      f"planner infeasible at cycle {k_H}: {e}",
                                      witness_step=k_H * s.N_L)
        r_arr = _reference_array(result.best.r_seq)
        cycle_ref = reference_positions(xh, r_arr[:1], s.T_L, s.N_L)
        warm = None
        for j in range(s.N_L):
            try:
                sol = solve_mpc(s, x, r_arr, j, CYCLIC, warm=warm, xh0=xh)
            except OcpSolveError as e:
                return VerificationReport("theorem2", False,
                                          f"lower-level failure: {e}",
                                          witness_step=k_H * s.N_L + j)
            step_xi = max(sol.xi_inf, sol.xi_g.max(initial=0.0))
            max_xi = max(max_xi, step_xi)
            if step_xi > tol:
                return VerificationReport("theorem2", False,
                                          f"nonzero slack {step_xi:.3e}",
                                          witness_step=k_H * s.N_L + j,
                                          max_slack=max_xi)
            x = discrete_step(model, x, sol.inputs[0], s.T_L, s.plant_substeps)
            warm = sol

        # consistency: the plant projection must land on the planner's
        # one-step prediction
        xh_next = cycle_ref[s.N_L]
        cons_err = float(np.abs(project_state(x) - xh_next).max())
        if cons_err > 10 * tol:
            return VerificationReport("theorem2", False,
                                      f"consistency gap {cons_err:.3e}",
                                      witness_step=(k_H + 1) * s.N_L,
                                      max_violation=cons_err)

        # the proof's candidate: shifted references with a steady tail,
        # checked as a fresh slack value problem at the new state
        psi_tail = float(r_arr[-1, 0])
        r_shift = np.vstack([r_arr[1:], [[psi_tail, 0.0]]])
        try:
            h_shift = slack_value(s, x, r_shift, extended=True, xh0=xh_next)
        except OcpSolveError as e:
            return VerificationReport("theorem2", False,
                                      f"shift-candidate solve failed: {e}",
                                      witness_step=(k_H + 1) * s.N_L)
        if h_shift > tau:
            return VerificationReport("theorem2", False,
                                      f"shift candidate infeasible: h*={h_shift:.3e}",
                                      witness_step=(k_H + 1) * s.N_L,
                                      max_slack=h_shift)
    return VerificationReport("theorem2", True, "pass", max_slack=max_xi)
