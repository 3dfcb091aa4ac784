"""Explicit feasibility contracts.

The minimal-slack value of the lower-level controller is sampled offline on
a grid over translation-reduced coordinates and approximated by an explicit
surrogate: a multilinear-interpolation lookup table or a small feed-forward
network. The serialized surrogate is what the planner consumes; it carries
the content hash of the scenario it was sampled from.
"""

from __future__ import annotations

import base64
import hashlib
import multiprocessing
from dataclasses import dataclass, field

import numpy as np

from . import ocp
from .dynamics import DOUBLE_INTEGRATOR, SINGLE_TRACK, project_state, _reference_array
from .scenario import Scenario

OOB_CLAMP = "clamp"
_FORMAT_VERSION = "contractmpc-contract v1"


class ContractError(RuntimeError):
    pass


def axis_names(plant_tag: str, n_h: int) -> list:
    """Reduced coordinates: translation-invariant state features plus the
    flattened reference sequence."""
    if plant_tag == SINGLE_TRACK:
        names = ["dpx", "dpy", "psi", "v", "psidot", "beta"]
    elif plant_tag == DOUBLE_INTEGRATOR:
        names = ["dpx", "dpy", "vx", "vy"]
    else:
        raise ContractError(f"no reduced coordinates for plant {plant_tag!r}")
    if n_h == 1:
        names += ["psi_ref", "v_ref"]
    else:
        for m in range(n_h):
            names += [f"psi_ref_{m}", f"v_ref_{m}"]
    return names


def reduce_coordinates(x, r_seq, xh0, plant_tag: str = SINGLE_TRACK) -> np.ndarray:
    """Map (state, reference sequence, anchor) to the reduced coordinate
    vector used by contracts: positions relative to the anchor, remaining
    state components verbatim, then the reference entries."""
    x = np.asarray(x, float)
    xh0 = np.asarray(xh0, float)
    r = _reference_array(r_seq)
    rel = x.copy()
    rel[:2] -= xh0
    return np.concatenate([rel, r.ravel()])


def unreduce_coordinates(coords, xh0, plant_tag: str):
    """Inverse of reduce_coordinates for a full reduced vector."""
    coords = np.asarray(coords, float)
    nx = 6 if plant_tag == SINGLE_TRACK else 4
    x = coords[:nx].copy()
    x[:2] += np.asarray(xh0, float)
    r = coords[nx:].reshape(-1, 2)
    return x, r


@dataclass(frozen=True)
class GridAxis:
    name: str
    lo: float
    hi: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ContractError(f"axis {self.name}: count must be >= 1")
        if self.count == 1:
            if self.lo != self.hi:
                raise ContractError(f"axis {self.name}: frozen axis needs lo == hi")
        elif not self.lo < self.hi:
            raise ContractError(f"axis {self.name}: need lo < hi")

    @property
    def points(self) -> np.ndarray:
        if self.count == 1:
            return np.array([self.lo])
        return np.linspace(self.lo, self.hi, self.count)


@dataclass(frozen=True)
class GridSpec:
    axes: tuple

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))

    @property
    def names(self) -> list:
        return [a.name for a in self.axes]

    @property
    def shape(self) -> tuple:
        return tuple(a.count for a in self.axes)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def nodes(self) -> np.ndarray:
        """All grid nodes, row-major (last axis fastest), shape (n_nodes, n_axes)."""
        grids = np.meshgrid(*[a.points for a in self.axes], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def in_range(self, coords) -> np.ndarray:
        """True where every coordinate lies inside the grid box."""
        coords = np.atleast_2d(np.asarray(coords, float))
        lo = np.array([a.lo for a in self.axes])
        hi = np.array([a.hi for a in self.axes])
        return np.all((coords >= lo - 1e-12) & (coords <= hi + 1e-12), axis=-1)

    def for_scenario(self, s: Scenario):
        names = axis_names(s.plant.tag, s.N_H)
        if self.names != names:
            raise ContractError(
                f"grid axes {self.names} do not match scenario axes {names}")

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(GridAxis(a["name"], float(a["lo"]), float(a["hi"]),
                                  int(a["count"])) for a in d["axes"]))

    def to_dict(self) -> dict:
        return {"axes": [{"name": a.name, "lo": a.lo, "hi": a.hi,
                          "count": a.count} for a in self.axes]}


def default_grid(s: Scenario) -> GridSpec:
    """Bundled grid: positions/heading/speed free, yaw rate and side slip
    frozen at zero, references spanning the planner bounds."""
    psi_lo, psi_hi = s.r_psi_bounds
    v_lo, v_hi = s.r_v_bounds
    if s.plant.tag == SINGLE_TRACK:
        axes = [GridAxis("dpx", -3.0, 3.0, 7),
                GridAxis("dpy", -3.0, 3.0, 7),
                GridAxis("psi", psi_lo, psi_hi, 5),
                GridAxis("v", v_lo, v_hi, 5),
                GridAxis("psidot", 0.0, 0.0, 1),
                GridAxis("beta", 0.0, 0.0, 1)]
    else:
        axes = [GridAxis("dpx", -2.0, 2.0, 5),
                GridAxis("dpy", -2.0, 2.0, 5),
                GridAxis("vx", -3.0, 3.0, 3),
                GridAxis("vy", -3.0, 3.0, 3)]
    for name in axis_names(s.plant.tag, s.N_H)[len(axes):]:
        if name.startswith("psi"):
            axes.append(GridAxis(name, psi_lo, psi_hi, 5))
        else:
            axes.append(GridAxis(name, v_lo, v_hi, 5))
    return GridSpec(tuple(axes))


@dataclass
class SampleSet:
    coords: np.ndarray          # (n, n_axes) in grid node order
    values: np.ndarray          # (n,), NaN where the solve failed
    status: list                # per-sample solver status strings

    @property
    def n_failed(self) -> int:
        return int(np.isnan(self.values).sum())


_WORKER_STATE: dict = {}


def _init_worker(scenario_dict, plant_tag, anchor):
    _WORKER_STATE["scenario"] = Scenario.from_dict(scenario_dict)
    _WORKER_STATE["tag"] = plant_tag
    _WORKER_STATE["anchor"] = np.asarray(anchor)


def _sample_one(coords):
    s = _WORKER_STATE["scenario"]
    x, r = unreduce_coordinates(coords, _WORKER_STATE["anchor"], _WORKER_STATE["tag"])
    try:
        h = ocp.slack_value(s, x, r, xh0=_WORKER_STATE["anchor"])
        return float(h), "converged"
    except ocp.OcpSolveError as e:
        status = e.solution.status if e.solution is not None else "error"
        return float("nan"), status
    except Exception:
        return float("nan"), "error"


def sample_slack_values(s: Scenario, grid: GridSpec, parallelism: int = 1,
                        max_failure_fraction: float = 0.05) -> SampleSet:
    """Evaluate the slack value at every grid node.

    Output ordering follows the grid node order regardless of the worker
    count, so the result is deterministic. Failed solves are recorded as NaN
    and counted; more than ``max_failure_fraction`` failures is an error.
    """
    grid.for_scenario(s)
    anchor = project_state(np.asarray(s.x0, float))
    nodes = grid.nodes()
    if parallelism <= 1:
        _init_worker(s.to_dict(), s.plant.tag, anchor)
        results = [_sample_one(c) for c in nodes]
    else:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(parallelism, initializer=_init_worker,
                      initargs=(s.to_dict(), s.plant.tag, anchor)) as pool:
            results = pool.map(_sample_one, nodes, chunksize=8)
    values = np.array([r[0] for r in results])
    status = [r[1] for r in results]
    out = SampleSet(coords=nodes, values=values, status=status)
    if out.n_failed > max_failure_fraction * grid.n_nodes:
        raise ContractError(
            f"{out.n_failed}/{grid.n_nodes} slack value solves failed "
            f"(limit {max_failure_fraction:.0%})")
    return out


@dataclass
class Contract:
    """Serialized surrogate of the slack value function."""

    kind: str                   # "lut" | "mlp"
    plant_tag: str
    grid: GridSpec
    table: np.ndarray | None    # (n_nodes,) row-major for "lut"
    layers: tuple = ()          # hidden layer sizes for "mlp"
    params: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    # ----- evaluation -----------------------------------------------------

    def evaluate(self, coords) -> np.ndarray:
        """Surrogate value at reduced coordinates (batched), clamped to >= 0.
        Out-of-grid queries clamp to the boundary."""
        coords = np.atleast_2d(np.asarray(coords, float))
        if self.kind == "lut":
            vals = _multilinear(self.grid, self.table, coords)
        else:
            vals = _mlp_forward(self.params, self.layers, self.grid, coords)
        return np.maximum(vals, 0.0)

    def eval_state(self, s: Scenario, x, r_seq, xh0=None) -> float:
        if self.metadata.get("scenario_hash") != s.content_hash():
            raise ContractError(
                "contract/scenario hash mismatch: the contract was built for "
                f"{self.metadata.get('scenario_hash')}, scenario is {s.content_hash()}")
        xh0 = project_state(np.asarray(x, float)) if xh0 is None else np.asarray(xh0, float)
        coords = reduce_coordinates(x, r_seq, xh0, self.plant_tag)
        return float(self.evaluate(coords)[0])

    # ----- serialization --------------------------------------------------

    def to_text(self) -> str:
        lines = [_FORMAT_VERSION,
                 f"kind: {self.kind}",
                 f"plant: {self.plant_tag}"]
        for key in sorted(self.metadata):
            lines.append(f"meta.{key}: {self.metadata[key]}")
        lines.append(f"axes: {len(self.grid.axes)}")
        for a in self.grid.axes:
            lines.append(f"axis: {a.name} {a.lo!r} {a.hi!r} {a.count}")
        if self.kind == "mlp":
            lines.append("layers: " + " ".join(str(h) for h in self.layers))
            payload = np.asarray(self.params, "<f8").tobytes()
        else:
            payload = np.asarray(self.table, "<f8").tobytes()
        blob = base64.b64encode(payload).decode()
        lines.append(f"values: {blob}")
        body = "\n".join(lines) + "\n"
        digest = hashlib.sha256(body.encode()).hexdigest()
        return body + f"checksum: {digest}\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "Contract":
        lines = text.splitlines()
        if not lines or lines[0] != _FORMAT_VERSION:
            raise ContractError(f"unsupported contract format: {lines[:1]}")
        if not lines[-1].startswith("checksum: "):
            raise ContractError("missing checksum line")
        digest = lines[-1].split(": ", 1)[1]
        body = "\n".join(lines[:-1]) + "\n"
        if hashlib.sha256(body.encode()).hexdigest() != digest:
            raise ContractError("checksum mismatch: contract file corrupted")
        fields = {}
        axes = []
        meta = {}
        layers: tuple = ()
        for line in lines[1:-1]:
            key, _, value = line.partition(": ")
            if key == "axis":
                name, lo, hi, count = value.split()
                axes.append(GridAxis(name, float(lo), float(hi), int(count)))
            elif key.startswith("meta."):
                meta[key[5:]] = value
            elif key == "layers":
                layers = tuple(int(v) for v in value.split())
            else:
                fields[key] = value
        grid = GridSpec(tuple(axes))
        payload = np.frombuffer(base64.b64decode(fields["values"]), "<f8")
        kind = fields["kind"]
        if kind == "lut":
            if payload.size != grid.n_nodes:
                raise ContractError("table length does not match the grid")
            return cls(kind="lut", plant_tag=fields["plant"], grid=grid,
                       table=payload.copy(), metadata=meta)
        return cls(kind="mlp", plant_tag=fields["plant"], grid=grid, table=None,
                   layers=layers, params=payload.copy(), metadata=meta)

    @classmethod
    def load(cls, path) -> "Contract":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def save_contract(c: Contract, path) -> None:
    c.save(path)


def load_contract(path) -> Contract:
    return Contract.load(path)


def _contract_metadata(s: Scenario) -> dict:
    return {"scenario_hash": s.content_hash(), "N_H": s.N_H, "N_L": s.N_L,
            "oob": OOB_CLAMP, "tool": "contractmpc-0.1.0"}


def fit_lut(samples: SampleSet, grid: GridSpec, s: Scenario) -> Contract:
    """Store node values for multilinear interpolation. All nodes must have
    converged samples."""
    if samples.coords.shape[0] != grid.n_nodes:
        raise ContractError("sample set does not cover the grid")
    if samples.n_failed:
        missing = [i for i, v in enumerate(samples.values) if np.isnan(v)]
        raise ContractError(f"missing node values at indices {missing[:10]}"
                            f"{'...' if len(missing) > 10 else ''}")
    table = np.maximum(np.asarray(samples.values, float), 0.0)
    return Contract(kind="lut", plant_tag=s.plant.tag, grid=grid,
                    table=table, metadata=_contract_metadata(s))


def _multilinear(grid: GridSpec, table: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Multilinear interpolation with boundary clamping, batched over rows."""
    shape = grid.shape
    n = coords.shape[0]
    idx0 = []
    frac = []
    for j, a in enumerate(grid.axes):
        if a.count == 1:
            idx0.append(np.zeros(n, dtype=int))
            frac.append(np.zeros(n))
            continue
        pts = a.points
        c = np.clip(coords[:, j], a.lo, a.hi)
        i = np.clip(np.searchsorted(pts, c, side="right") - 1, 0, a.count - 2)
        idx0.append(i)
        frac.append((c - pts[i]) / (pts[i + 1] - pts[i]))
    free = [j for j, a in enumerate(grid.axes) if a.count > 1]
    strides = np.ones(len(shape), dtype=int)
    for j in range(len(shape) - 2, -1, -1):
        strides[j] = strides[j + 1] * shape[j + 1]
    out = np.zeros(n)
    for corner in range(1 << len(free)):
        w = np.ones(n)
        flat = np.zeros(n, dtype=int)
        for b, j in enumerate(free):
            hi_side = (corner >> b) & 1
            w = w * (frac[j] if hi_side else 1.0 - frac[j])
            flat = flat + (idx0[j] + hi_side) * strides[j]
        out += w * table[flat]
    return out


# ----- MLP surrogate ------------------------------------------------------


def _mlp_dims(n_in: int, layers: tuple) -> list:
    dims = [n_in] + list(layers) + [1]
    return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def _mlp_param_count(n_in: int, layers: tuple) -> int:
    return sum(a * b + b for a, b in _mlp_dims(n_in, layers))


def _mlp_unpack(params: np.ndarray, n_in: int, layers: tuple):
    mats = []
    off = 0
    for a, b in _mlp_dims(n_in, layers):
        W = params[off:off + a * b].reshape(a, b)
        off += a * b
        bias = params[off:off + b]
        off += b
        mats.append((W, bias))
    return mats


def _grid_standardize(grid: GridSpec, coords: np.ndarray) -> np.ndarray:
    lo = np.array([a.lo for a in grid.axes])
    hi = np.array([a.hi for a in grid.axes])
    span = np.where(hi > lo, hi - lo, 1.0)
    return (np.clip(coords, lo, hi) - lo) / span * 2.0 - 1.0


def _mlp_forward(params: np.ndarray, layers: tuple, grid: GridSpec,
                 coords: np.ndarray) -> np.ndarray:
    h_scale = params[-1]
    mats = _mlp_unpack(params[:-1], len(grid.axes), layers)
    a = _grid_standardize(grid, coords)
    for W, b in mats[:-1]:
        a = np.tanh(a @ W + b)
    W, b = mats[-1]
    raw = (a @ W + b).ravel()
    return _softplus(raw) * h_scale


def _softplus(x):
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


@dataclass
class MlpFitReport:
    losses: list
    converged: bool
    final_loss: float
    warning: str = ""


def fit_mlp(samples: SampleSet, s: Scenario, layers: tuple = (32, 32),
            epochs: int = 600, lr: float = 0.05, seed: int = 0,
            return_report: bool = False):
    """Train a small feed-forward surrogate (tanh hidden layers, softplus
    output head) by full-batch gradient descent with a monotone step-size
    backtracking schedule. Deterministic for a fixed seed."""
    good = ~np.isnan(samples.values)
    box_grid = _sample_grid(samples.coords[good], s)
    X = _grid_standardize(box_grid, samples.coords[good])
    y = np.maximum(samples.values[good], 0.0)
    n_in = samples.coords.shape[1]
    n_params = _mlp_param_count(n_in, layers)
    warning = ""
    if len(y) < 10 * n_params:
        warning = (f"{len(y)} samples for {n_params} parameters; "
                   "at least 10x more samples are recommended")
    h_scale = max(1.0, float(y.max(initial=0.0)))
    y_s = y / h_scale
    rng = np.random.default_rng(seed)
    dims = _mlp_dims(n_in, layers)
    params = np.concatenate([
        np.concatenate([rng.normal(0.0, 1.0 / np.sqrt(a), a * b), np.zeros(b)])
        for a, b in dims])

    def loss_grad(p):
        mats = _mlp_unpack(p, n_in, layers)
        acts = [X]
        pre = []
        a = X
        for W, b in mats[:-1]:
            zpre = a @ W + b
            pre.append(zpre)
            a = np.tanh(zpre)
            acts.append(a)
        W, b = mats[-1]
        raw = (a @ W + b).ravel()
        pred = _softplus(raw)
        err = pred - y_s
        loss = float(np.mean(err ** 2))
        # backprop
        draw = 2.0 * err / len(y_s) * _sigmoid(raw)
        grads = []
        ga = np.outer(draw, W.ravel())
        grads.append((acts[-1].T @ draw[:, None], np.array([draw.sum()])))
        for i in range(len(mats) - 2, -1, -1):
            ga = ga * (1.0 - acts[i + 1] ** 2)
            Wi, bi = mats[i]
            grads.append((acts[i].T @ ga, ga.sum(axis=0)))
            if i > 0:
                ga = ga @ Wi.T
        grads.reverse()
        gvec = np.concatenate([np.concatenate([gW.ravel(), gb.ravel()])
                               for gW, gb in grads])
        return loss, gvec

    losses = []
    loss, g = loss_grad(params)
    step = lr
    for _ in range(epochs):
        accepted = False
        for _ in range(30):
            trial = params - step * g
            l_try, g_try = loss_grad(trial)
            if l_try <= loss + 1e-15:
                params, loss, g = trial, l_try, g_try
                accepted = True
                step *= 1.1
                break
            step *= 0.5
        losses.append(loss)
        if not accepted:
            break
    report = MlpFitReport(losses=losses, converged=len(losses) == epochs,
                          final_loss=loss, warning=warning)
    meta = _contract_metadata(s)
    c = Contract(kind="mlp", plant_tag=s.plant.tag,
                 grid=box_grid, table=None, layers=tuple(layers),
                 params=np.concatenate([params, [h_scale]]), metadata=meta)
    return (c, report) if return_report else c


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30, 30)))


def _sample_grid(coords: np.ndarray, s: Scenario) -> GridSpec:
    """Bounding-box grid description for MLP contracts (used for input
    standardization and range checks)."""
    names = axis_names(s.plant.tag, s.N_H)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    axes = []
    for j, name in enumerate(names):
        if hi[j] > lo[j]:
            axes.append(GridAxis(name, float(lo[j]), float(hi[j]), 2))
        else:
            axes.append(GridAxis(name, float(lo[j]), float(lo[j]), 1))
    return GridSpec(tuple(axes))


def eval_contract(c: Contract, s: Scenario, x, r_seq, xh0=None) -> float:
    """Contract value for a plant state and reference sequence (>= 0)."""
    return c.eval_state(s, x, r_seq, xh0)
