"""Vehicle and planner models: continuous-time right-hand sides with analytic
Jacobians, fixed-step RK4 discretization, and reference forward propagation.

All derivative functions are batched: state arrays of shape (..., nx) and
input arrays of shape (..., nu) produce derivatives of shape (..., nx) and
Jacobians of shape (..., nx, nx) / (..., nx, nu).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SINGLE_TRACK = "single-track"
DOUBLE_INTEGRATOR = "double-integrator"
PLANNER_KINEMATIC = "planner-kinematic"

# state component names per model tag, used for log headers and validation
STATE_FIELDS = {
    SINGLE_TRACK: ("px", "py", "psi", "v", "psidot", "beta"),
    DOUBLE_INTEGRATOR: ("px", "py", "vx", "vy"),
    PLANNER_KINEMATIC: ("px", "py"),
}
INPUT_FIELDS = {
    SINGLE_TRACK: ("delta", "a"),
    DOUBLE_INTEGRATOR: ("ax", "ay"),
    PLANNER_KINEMATIC: ("psi_ref", "v_ref"),
}


class ModelDomainError(ValueError):
    """Raised when a model derivative is evaluated outside its domain."""


@dataclass(frozen=True)
class VehicleParams:
    """Single-track model parameters with linear tire stiffness."""

    m: float = 1500.0      # mass [kg]
    Iz: float = 2500.0     # yaw inertia [kg m^2]
    lf: float = 1.2        # CoG to front axle [m]
    lr: float = 1.4        # CoG to rear axle [m]
    Cf: float = 80000.0    # front cornering stiffness [N/rad]
    Cr: float = 80000.0    # rear cornering stiffness [N/rad]
    v_min: float = 1.0     # evaluation floor for the 1/v terms [m/s]

    def __post_init__(self):
        for name in ("m", "Iz", "lf", "lr", "Cf", "Cr", "v_min"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"VehicleParams.{name} must be > 0")


@dataclass(frozen=True)
class State:
    """Single-track vehicle state."""

    px: float
    py: float
    psi: float
    v: float
    psidot: float
    beta: float

    def to_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.psi, self.v, self.psidot, self.beta])

    @classmethod
    def from_array(cls, x) -> "State":
        px, py, psi, v, psidot, beta = np.asarray(x, dtype=float)
        return cls(px, py, psi, v, psidot, beta)


@dataclass(frozen=True)
class Input:
    """Single-track vehicle input: steering angle and longitudinal acceleration."""

    delta: float
    a: float

    def to_array(self) -> np.ndarray:
        return np.array([self.delta, self.a])


@dataclass(frozen=True)
class HighState:
    """Planner-level state: position only."""

    px: float
    py: float

    def to_array(self) -> np.ndarray:
        return np.array([self.px, self.py])

    @classmethod
    def from_array(cls, xh) -> "HighState":
        px, py = np.asarray(xh, dtype=float)
        return cls(px, py)


@dataclass(frozen=True)
class Reference:
    """Planner reference sample: heading and speed, held over one planner period."""

    psi_ref: float
    v_ref: float

    def to_array(self) -> np.ndarray:
        return np.array([self.psi_ref, self.v_ref])


@dataclass(frozen=True)
class ModelSpec:
    """Plant or planner model selector with parameters and dimensions."""

    tag: str
    params: VehicleParams | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tag not in STATE_FIELDS:
            raise ValueError(f"unknown model tag {self.tag!r}")
        if self.tag == SINGLE_TRACK and self.params is None:
            object.__setattr__(self, "params", VehicleParams())

    @property
    def nx(self) -> int:
        return len(STATE_FIELDS[self.tag])

    @property
    def nu(self) -> int:
        return len(INPUT_FIELDS[self.tag])

    def deriv(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return _DERIV[self.tag](self, x, u)

    def deriv_jac(self, x: np.ndarray, u: np.ndarray):
        """Return (fx, fu): Jacobians of the derivative w.r.t. state and input."""
        return _JAC[self.tag](self, x, u)

    def to_dict(self) -> dict:
        d = {"tag": self.tag}
        if self.tag == SINGLE_TRACK:
            p = self.params
            d["params"] = {k: getattr(p, k) for k in
                           ("m", "Iz", "lf", "lr", "Cf", "Cr", "v_min")}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        params = None
        if "params" in d:
            params = VehicleParams(**d["params"])
        return cls(tag=d["tag"], params=params)


def _tire_forces(p: VehicleParams, v, psidot, beta, delta):
    """Linear-stiffness lateral tire forces and their partials."""
    inv_v = 1.0 / v
    alpha_f = delta - beta - p.lf * psidot * inv_v
    alpha_r = -beta + p.lr * psidot * inv_v
    F_f = p.Cf * alpha_f
    F_r = p.Cr * alpha_r
    dFf = {
        "v": p.Cf * p.lf * psidot * inv_v**2,
        "psidot": -p.Cf * p.lf * inv_v,
        "beta": -p.Cf * np.ones_like(v),
        "delta": p.Cf * np.ones_like(v),
    }
    dFr = {
        "v": -p.Cr * p.lr * psidot * inv_v**2,
        "psidot": p.Cr * p.lr * inv_v,
        "beta": -p.Cr * np.ones_like(v),
        "delta": np.zeros_like(v),
    }
    return F_f, F_r, dFf, dFr


def single_track_deriv(x: State | np.ndarray, u: Input | np.ndarray,
                       p: VehicleParams) -> np.ndarray:
    """Continuous-time single-track derivative with linear tire law.

    Accepts State/Input values or plain arrays (batched in the leading
    dimensions). Raises ModelDomainError if any speed is below p.v_min.
    """
    if isinstance(x, State):
        x = x.to_array()
    if isinstance(u, Input):
        u = u.to_array()
    return ModelSpec(SINGLE_TRACK, p).deriv(np.asarray(x, float), np.asarray(u, float))


def _single_track_deriv(spec: ModelSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    p = spec.params
    psi, v, psidot, beta = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
    delta, a = u[..., 0], u[..., 1]
    if np.any(v < p.v_min - 1e-12):
        raise ModelDomainError(
            f"speed {float(np.min(v)):.6g} below evaluation floor v_min={p.v_min}")
    F_f, F_r, _, _ = _tire_forces(p, v, psidot, beta, delta)
    dx = np.empty_like(x)
    dx[..., 0] = v * np.cos(psi)
    dx[..., 1] = v * np.sin(psi)
    dx[..., 2] = psidot
    dx[..., 3] = a
    dx[..., 4] = (F_f * np.cos(delta) * p.lf - F_r * p.lr) / p.Iz
    dx[..., 5] = (F_f * np.cos(beta - delta) + F_r * np.cos(beta)) / (p.m * v) - psidot
    return dx


def _single_track_jac(spec: ModelSpec, x: np.ndarray, u: np.ndarray):
    p = spec.params
    psi, v, psidot, beta = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
    delta = u[..., 0]
    if np.any(v < p.v_min - 1e-12):
        raise ModelDomainError(
            f"speed {float(np.min(v)):.6g} below evaluation floor v_min={p.v_min}")
    F_f, F_r, dFf, dFr = _tire_forces(p, v, psidot, beta, delta)
    cd, cb, cbd = np.cos(delta), np.cos(beta), np.cos(beta - delta)
    sb, sbd = np.sin(beta), np.sin(beta - delta)
    inv_mv = 1.0 / (p.m * v)

    fx = np.zeros(x.shape[:-1] + (6, 6))
    fu = np.zeros(x.shape[:-1] + (6, 2))

    fx[..., 0, 2] = -v * np.sin(psi)
    fx[..., 0, 3] = np.cos(psi)
    fx[..., 1, 2] = v * np.cos(psi)
    fx[..., 1, 3] = np.sin(psi)
    fx[..., 2, 4] = 1.0
    fu[..., 3, 1] = 1.0

    # yaw acceleration row
    fx[..., 4, 3] = (dFf["v"] * cd * p.lf - dFr["v"] * p.lr) / p.Iz
    fx[..., 4, 4] = (dFf["psidot"] * cd * p.lf - dFr["psidot"] * p.lr) / p.Iz
    fx[..., 4, 5] = (dFf["beta"] * cd * p.lf - dFr["beta"] * p.lr) / p.Iz
    fu[..., 4, 0] = ((dFf["delta"] * cd - F_f * np.sin(delta)) * p.lf) / p.Iz

    # side-slip row
    num = F_f * cbd + F_r * cb
    fx[..., 5, 3] = -num * inv_mv / v + (dFf["v"] * cbd + dFr["v"] * cb) * inv_mv
    fx[..., 5, 4] = (dFf["psidot"] * cbd + dFr["psidot"] * cb) * inv_mv - 1.0
    fx[..., 5, 5] = (dFf["beta"] * cbd - F_f * sbd + dFr["beta"] * cb - F_r * sb) * inv_mv
    fu[..., 5, 0] = (dFf["delta"] * cbd + F_f * sbd) * inv_mv
    return fx, fu


def planner_deriv(xh: HighState | np.ndarray, r: Reference | np.ndarray) -> np.ndarray:
    """Kinematic planner derivative: constant-speed motion along a fixed heading."""
    if isinstance(xh, HighState):
        xh = xh.to_array()
    if isinstance(r, Reference):
        r = r.to_array()
    return ModelSpec(PLANNER_KINEMATIC).deriv(np.asarray(xh, float), np.asarray(r, float))


def _planner_deriv(spec: ModelSpec, xh: np.ndarray, r: np.ndarray) -> np.ndarray:
    psi, v = r[..., 0], r[..., 1]
    dx = np.empty_like(xh)
    dx[..., 0] = v * np.cos(psi)
    dx[..., 1] = v * np.sin(psi)
    return dx


def _planner_jac(spec: ModelSpec, xh: np.ndarray, r: np.ndarray):
    psi, v = r[..., 0], r[..., 1]
    fx = np.zeros(xh.shape[:-1] + (2, 2))
    fu = np.zeros(xh.shape[:-1] + (2, 2))
    fu[..., 0, 0] = -v * np.sin(psi)
    fu[..., 0, 1] = np.cos(psi)
    fu[..., 1, 0] = v * np.cos(psi)
    fu[..., 1, 1] = np.sin(psi)
    return fx, fu


def _double_integrator_deriv(spec: ModelSpec, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    dx = np.empty_like(x)
    dx[..., 0] = x[..., 2]
    dx[..., 1] = x[..., 3]
    dx[..., 2] = u[..., 0]
    dx[..., 3] = u[..., 1]
    return dx


def _double_integrator_jac(spec: ModelSpec, x: np.ndarray, u: np.ndarray):
    fx = np.zeros(x.shape[:-1] + (4, 4))
    fu = np.zeros(x.shape[:-1] + (4, 2))
    fx[..., 0, 2] = 1.0
    fx[..., 1, 3] = 1.0
    fu[..., 2, 0] = 1.0
    fu[..., 3, 1] = 1.0
    return fx, fu


_DERIV = {
    SINGLE_TRACK: _single_track_deriv,
    DOUBLE_INTEGRATOR: _double_integrator_deriv,
    PLANNER_KINEMATIC: _planner_deriv,
}
_JAC = {
    SINGLE_TRACK: _single_track_jac,
    DOUBLE_INTEGRATOR: _double_integrator_jac,
    PLANNER_KINEMATIC: _planner_jac,
}


def rk4_step(model: ModelSpec, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One classical RK4 step under zero-order-hold input. Batched."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    k1 = model.deriv(x, u)
    k2 = model.deriv(x + 0.5 * dt * k1, u)
    k3 = model.deriv(x + 0.5 * dt * k2, u)
    k4 = model.deriv(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step_jac(model: ModelSpec, x: np.ndarray, u: np.ndarray, dt: float):
    """RK4 step together with Jacobians of the discrete map w.r.t. x and u.

    Returns (x_next, Phi_x, Phi_u) with shapes (..., nx), (..., nx, nx),
    (..., nx, nu). Batched over leading dimensions.
    """
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    nx = model.nx
    eye = np.broadcast_to(np.eye(nx), x.shape[:-1] + (nx, nx))

    k1 = model.deriv(x, u)
    A1, B1 = model.deriv_jac(x, u)
    x2 = x + 0.5 * dt * k1
    k2 = model.deriv(x2, u)
    A2s, B2s = model.deriv_jac(x2, u)
    A2 = A2s @ (eye + 0.5 * dt * A1)
    B2 = A2s @ (0.5 * dt * B1) + B2s
    x3 = x + 0.5 * dt * k2
    k3 = model.deriv(x3, u)
    A3s, B3s = model.deriv_jac(x3, u)
    A3 = A3s @ (eye + 0.5 * dt * A2)
    B3 = A3s @ (0.5 * dt * B2) + B3s
    x4 = x + dt * k3
    k4 = model.deriv(x4, u)
    A4s, B4s = model.deriv_jac(x4, u)
    A4 = A4s @ (eye + dt * A3)
    B4 = A4s @ (dt * B3) + B4s

    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    Phi_x = eye + (dt / 6.0) * (A1 + 2.0 * A2 + 2.0 * A3 + A4)
    Phi_u = (dt / 6.0) * (B1 + 2.0 * B2 + 2.0 * B3 + B4)
    return x_next, Phi_x, Phi_u


def discrete_step(model: ModelSpec, x: np.ndarray, u: np.ndarray, dt: float,
                  substeps: int = 1) -> np.ndarray:
    """Discrete-time map over one sampling period: ``substeps`` composed RK4
    stages under a zero-order-hold input. Substepping keeps the explicit
    integrator stable for stiff lateral dynamics at low speed."""
    h = dt / substeps
    for _ in range(substeps):
        x = rk4_step(model, x, u, h)
    return x


def discrete_step_jac(model: ModelSpec, x: np.ndarray, u: np.ndarray, dt: float,
                      substeps: int = 1):
    """discrete_step together with Jacobians of the composed map. Batched."""
    h = dt / substeps
    x, Phi_x, Phi_u = rk4_step_jac(model, x, u, h)
    for _ in range(substeps - 1):
        x, Ax, Bu = rk4_step_jac(model, x, u, h)
        Phi_u = Ax @ Phi_u + Bu
        Phi_x = Ax @ Phi_x
    return x, Phi_x, Phi_u


def rollout(model: ModelSpec, x0: np.ndarray, u_seq: np.ndarray, dt: float) -> np.ndarray:
    """Sequential RK4 rollout; returns states of shape (len(u_seq)+1, nx)."""
    x0 = np.asarray(x0, float)
    u_seq = np.asarray(u_seq, float).reshape(-1, model.nu) if np.size(u_seq) else \
        np.zeros((0, model.nu))
    xs = np.empty((len(u_seq) + 1, model.nx))
    xs[0] = x0
    for i, u in enumerate(u_seq):
        try:
            xs[i + 1] = rk4_step(model, xs[i], u, dt)
        except ModelDomainError as e:
            raise ModelDomainError(f"rollout failed at step {i}: {e}") from e
    return xs


def project_state(x: State | np.ndarray) -> np.ndarray:
    """Map a plant state to the planner state: position selection."""
    if isinstance(x, State):
        x = x.to_array()
    return np.asarray(x, float)[..., :2].copy()


def reference_positions(xh0: HighState | np.ndarray, r_seq, T_L: float,
                        N_L: int) -> np.ndarray:
    """Forward-propagate the planner model at the lower-level rate.

    Each of the N_H references is held for N_L steps of length T_L; the
    result has N_H * N_L + 1 position rows, starting at xh0.
    """
    if isinstance(xh0, HighState):
        xh0 = xh0.to_array()
    r_arr = _reference_array(r_seq)
    n_h = len(r_arr)
    if n_h < 1:
        raise ValueError("need at least one reference")
    model = ModelSpec(PLANNER_KINEMATIC)
    out = np.empty((n_h * N_L + 1, 2))
    out[0] = np.asarray(xh0, float)
    for m in range(n_h):
        for l in range(N_L):
            k = m * N_L + l
            out[k + 1] = rk4_step(model, out[k], r_arr[m], T_L)
    return out


def _reference_array(r_seq) -> np.ndarray:
    """Normalize a reference sequence to an (N_H, 2) array of (psi, v)."""
    if isinstance(r_seq, Reference):
        r_seq = [r_seq]
    rows = [r.to_array() if isinstance(r, Reference) else np.asarray(r, float)
            for r in r_seq]
    arr = np.asarray(rows, float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.shape[-1] != 2:
        raise ValueError("references must have exactly (psi, v) entries")
    return arr
