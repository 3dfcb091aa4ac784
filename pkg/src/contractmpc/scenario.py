"""Scenario description and file format.

A scenario bundles everything the controllers need: plant model, horizons,
tube width, state/input boxes, cost weights, planner bounds, obstacles and
the mission endpoints. Files are YAML with a fixed schema (see README);
the canonical serialization also defines the content hash that ties
contracts to the scenario they were sampled from.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .dynamics import (DOUBLE_INTEGRATOR, PLANNER_KINEMATIC, SINGLE_TRACK,
                       STATE_FIELDS, ModelSpec)


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned rectangle."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def contains(self, p, inflate: float = 0.0):
        """Vectorized point-in-rectangle test with optional inflation."""
        p = np.asarray(p, float)
        return ((p[..., 0] >= self.x_min - inflate) &
                (p[..., 0] <= self.x_max + inflate) &
                (p[..., 1] >= self.y_min - inflate) &
                (p[..., 1] <= self.y_max + inflate))

    def as_list(self) -> list:
        return [self.x_min, self.x_max, self.y_min, self.y_max]


@dataclass(frozen=True)
class Scenario:
    """Full problem description shared by every module."""

    name: str
    plant: ModelSpec
    T_L: float
    N_L: int
    N_H: int
    d_max: float
    x_lb: np.ndarray          # softened state box, entries may be +-inf
    x_ub: np.ndarray
    u_lb: np.ndarray          # hard input box
    u_ub: np.ndarray
    Q: np.ndarray             # stage state weight diagonal
    R: np.ndarray             # stage input weight diagonal
    w_xi: float               # slack penalty weight
    Q_H: np.ndarray           # planner position weight diagonal (2,)
    w_v: float                # planner speed-tracking weight
    w_h: float                # contract weight in the planner cost
    obstacles: tuple          # of Obstacle
    x_target: np.ndarray      # planner target position (2,)
    v_target: float
    x0: np.ndarray            # mission initial plant state
    r_psi_bounds: tuple       # planner reference heading bounds
    r_v_bounds: tuple         # planner reference speed bounds
    substeps: int = 0         # integrator substeps per T_L; 0 selects per-model default
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("x_lb", "x_ub", "u_lb", "u_ub", "Q", "R", "Q_H",
                     "x_target", "x0"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    @property
    def planner(self) -> ModelSpec:
        return ModelSpec(PLANNER_KINEMATIC)

    @property
    def mission_steps(self) -> int:
        return self.N_H * self.N_L

    @property
    def plant_substeps(self) -> int:
        """Substeps of the plant's discrete-time map. The single-track tire
        modes are stiff at low speed, so its 50 ms map is integrated in
        five 10 ms stages; linear models need a single stage."""
        if self.substeps:
            return int(self.substeps)
        return 5 if self.plant.tag == SINGLE_TRACK else 1

    def validate(self):
        """Return (errors, warnings) lists; empty errors means valid."""
        errs, warns = [], []
        nx, nu = self.plant.nx, self.plant.nu
        if self.T_L <= 0:
            errs.append("T_L must be > 0")
        if self.N_L < 1:
            errs.append("N_L must be >= 1")
        if self.N_H < 1:
            errs.append("N_H must be >= 1")
        if not self.d_max > 0:
            errs.append("d_max must be > 0")
        if not self.w_xi > 0:
            errs.append("w_xi must be > 0")
        if self.w_h < 0:
            errs.append("w_h must be >= 0")
        if self.w_v < 0:
            errs.append("w_v must be >= 0")
        for mat, name, dim in ((self.Q, "Q", nx), (self.R, "R", nu), (self.Q_H, "Q_H", 2)):
            if mat.shape != (dim,):
                errs.append(f"{name} must have {dim} diagonal entries")
            elif np.any(mat < 0):
                errs.append(f"{name} must be positive semidefinite (nonnegative diagonal)")
        for lo, hi, name, dim in ((self.x_lb, self.x_ub, "state box", nx),
                                  (self.u_lb, self.u_ub, "input box", nu)):
            if lo.shape != (dim,) or hi.shape != (dim,):
                errs.append(f"{name} must have {dim} entries per side")
            elif np.any(lo > hi):
                errs.append(f"{name} is empty (lb > hi)")
        if self.x0.shape != (nx,):
            errs.append(f"x0 must have {nx} entries for plant {self.plant.tag!r}")
        if self.x_target.shape != (2,):
            errs.append("x_target must have 2 entries")
        if not self.r_psi_bounds[0] <= self.r_psi_bounds[1]:
            errs.append("planner psi bounds empty")
        if not self.r_v_bounds[0] <= self.r_v_bounds[1]:
            errs.append("planner v bounds empty")
        if self.substeps < 0:
            errs.append("substeps must be >= 0")
        for i, ob in enumerate(self.obstacles):
            if ob.x_min > ob.x_max or ob.y_min > ob.y_max:
                errs.append(f"obstacle {i} is empty")
        if self.plant.tag == SINGLE_TRACK:
            if self.x0[3] < self.plant.params.v_min:
                errs.append("x0 speed below model evaluation floor v_min")
        for key in self.extras:
            warns.append(f"unknown key {key!r} ignored")
        return errs, warns

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "plant": self.plant.to_dict(),
            "horizon": {"T_L": float(self.T_L), "N_L": int(self.N_L),
                        "N_H": int(self.N_H), "substeps": int(self.substeps)},
            "tube": {"d_max": float(self.d_max)},
            "state_bounds": {"lb": _floats(self.x_lb), "ub": _floats(self.x_ub)},
            "input_bounds": {"lb": _floats(self.u_lb), "ub": _floats(self.u_ub)},
            "weights": {"Q": _floats(self.Q), "R": _floats(self.R),
                        "w_xi": float(self.w_xi), "Q_H": _floats(self.Q_H),
                        "w_v": float(self.w_v), "w_h": float(self.w_h)},
            "planner": {"psi_bounds": [float(b) for b in self.r_psi_bounds],
                        "v_bounds": [float(b) for b in self.r_v_bounds]},
            "mission": {"x0": _floats(self.x0), "x_target": _floats(self.x_target),
                        "v_target": float(self.v_target)},
            "obstacles": [[float(v) for v in ob.as_list()] for ob in self.obstacles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {"name", "plant", "horizon", "tube", "state_bounds",
                 "input_bounds", "weights", "planner", "mission", "obstacles"}
        extras = {k: v for k, v in d.items() if k not in known}
        w = d["weights"]
        return cls(
            name=d.get("name", "unnamed"),
            plant=ModelSpec.from_dict(d["plant"]),
            T_L=float(d["horizon"]["T_L"]),
            N_L=int(d["horizon"]["N_L"]),
            N_H=int(d["horizon"]["N_H"]),
            substeps=int(d["horizon"].get("substeps", 0)),
            d_max=float(d["tube"]["d_max"]),
            x_lb=d["state_bounds"]["lb"],
            x_ub=d["state_bounds"]["ub"],
            u_lb=d["input_bounds"]["lb"],
            u_ub=d["input_bounds"]["ub"],
            Q=w["Q"], R=w["R"], w_xi=float(w["w_xi"]), Q_H=w["Q_H"],
            w_v=float(w.get("w_v", 1.0)), w_h=float(w["w_h"]),
            obstacles=tuple(Obstacle(*row) for row in d.get("obstacles", [])),
            x_target=d["mission"]["x_target"],
            v_target=float(d["mission"]["v_target"]),
            x0=d["mission"]["x0"],
            r_psi_bounds=tuple(d["planner"]["psi_bounds"]),
            r_v_bounds=tuple(d["planner"]["v_bounds"]),
            extras=extras,
        )

    def canonical_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True,
                              default_flow_style=None, width=100)

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_yaml().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.canonical_yaml())

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ValueError(f"scenario file {path} does not contain a mapping")
        return cls.from_dict(data)

    def with_overrides(self, overrides: dict) -> "Scenario":
        """Apply dotted-key overrides (e.g. {'tube.d_max': 2.0}) and rebuild."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = value
        return Scenario.from_dict(d)


def _floats(arr) -> list:
    return [float(v) for v in np.asarray(arr, float)]


def double_integrator_scenario(**kw) -> Scenario:
    """Regulation testbed on a plant that admits steady states."""
    base = dict(
        name="double_integrator_receding",
        plant=ModelSpec(DOUBLE_INTEGRATOR),
        T_L=0.05, N_L=10, N_H=1,
        d_max=1.0,
        x_lb=[-np.inf, -np.inf, -5.0, -5.0],
        x_ub=[np.inf, np.inf, 5.0, 5.0],
        u_lb=[-3.0, -3.0],
        u_ub=[3.0, 3.0],
        Q=[1.0, 1.0, 0.1, 0.1],
        R=[0.1, 0.1],
        w_xi=1000.0,
        Q_H=[1.0, 1.0],
        w_v=1.0,
        w_h=10.0,
        obstacles=(),
        x_target=[0.0, 0.0],
        v_target=0.0,
        x0=[3.0, 2.0, 0.0, 0.0],
        r_psi_bounds=(-np.pi, np.pi),
        r_v_bounds=(0.0, 3.0),
    )
    base.update(kw)
    return Scenario(**base)


def driving_scenario(**kw) -> Scenario:
    """Single-track obstacle avoidance mission."""
    base = dict(
        name="obstacle_avoidance",
        plant=ModelSpec(SINGLE_TRACK),
        T_L=0.05, N_L=50, N_H=1,
        d_max=1.5,
        x_lb=[-np.inf, -np.inf, -np.inf, 1.0, -np.inf, -np.inf],
        x_ub=[np.inf, np.inf, np.inf, 35.0, np.inf, np.inf],
        u_lb=[-0.5, -8.0],
        u_ub=[0.5, 4.0],
        Q=[1.0, 1.0, 0.1, 0.1, 0.01, 0.01],
        R=[0.1, 0.1],
        w_xi=1000.0,
        Q_H=[1.0, 1.0],
        w_v=1.0,
        w_h=10.0,
        obstacles=(Obstacle(12.0, 22.0, -3.0, 2.0),),
        x_target=[30.0, 10.0],
        v_target=12.0,
        x0=[0.0, 0.0, 0.0, 12.0, 0.0, 0.0],
        r_psi_bounds=(-0.6, 0.6),
        r_v_bounds=(5.0, 25.0),
    )
    base.update(kw)
    return Scenario(**base)
