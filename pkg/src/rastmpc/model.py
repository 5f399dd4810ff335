"""Domain types for resource-aware stochastic self-triggered MPC.

Everything here is immutable after construction: numpy fields are copied and
flagged read-only so scenarios can be shared freely between workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

PSD_TOL = 1e-10


class ScenarioError(ValueError):
    """A configuration violates a domain invariant."""


class ScenarioParseError(ScenarioError):
    """A configuration file could not be parsed."""


def _frozen(a, ndim: int | None = None, name: str = "array") -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ScenarioError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ScenarioError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def is_psd(P: np.ndarray, tol: float = PSD_TOL) -> bool:
    if P.size == 0:
        return True
    return bool(np.linalg.eigvalsh(symmetrize(P)).min() >= -tol)


@dataclass(frozen=True, eq=False)
class LinearSdeModel:
    """dx = (A x + B u) dt + dW with E[dW dW^T] = Q dt, output y = C x."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "Q", "C"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2, name))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ScenarioError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ScenarioError(f"B must have {n} rows, got {self.B.shape}")
        if self.Q.shape != (n, n):
            raise ScenarioError(f"Q must be {n}x{n}, got {self.Q.shape}")
        if self.C.shape[1] != n:
            raise ScenarioError(f"C must have {n} columns, got {self.C.shape}")
        if not is_psd(self.Q):
            raise ScenarioError("Q must be symmetric positive semidefinite")
        object.__setattr__(self, "Q", _frozen(symmetrize(self.Q), 2, "Q"))

    @property
    def nx(self) -> int:
        return self.A.shape[0]

    @property
    def nu(self) -> int:
        return self.B.shape[1]

    @property
    def ny(self) -> int:
        return self.C.shape[0]

    @property
    def noiseless(self) -> bool:
        return not np.any(self.Q)


@dataclass(frozen=True, eq=False)
class TriggerSchedule:
    deltas: np.ndarray
    delta_min: float
    delta_max: float

    def __post_init__(self):
        object.__setattr__(self, "deltas", _frozen(self.deltas, 1, "deltas"))
        if not (0.0 < self.delta_min <= self.delta_max < np.inf):
            raise ScenarioError(
                f"delta bounds must satisfy 0 < delta_min <= delta_max < inf, "
                f"got [{self.delta_min}, {self.delta_max}]"
            )
        tol = 1e-9
        if np.any(self.deltas < self.delta_min - tol) or np.any(self.deltas > self.delta_max + tol):
            raise ScenarioError("every trigger interval must lie in [delta_min, delta_max]")

    @property
    def n(self) -> int:
        return len(self.deltas)

    def times(self, t0: float = 0.0) -> np.ndarray:
        """Trigger instants t_0..t_N (N+1 entries)."""
        return t0 + np.concatenate([[0.0], np.cumsum(self.deltas)])


@dataclass(frozen=True)
class ResourceSpec:
    """Recharge rate, per-trigger cost eta(delta) = eta0 + eta1*delta, and bounds."""

    rho: float
    eta0: float
    r_max: float
    r_min: float
    r0: float
    eta1: float = 0.0

    def __post_init__(self):
        if self.rho < 0:
            raise ScenarioError("resource recharge rate rho must be >= 0")
        if not self.r_min <= self.r_max:
            raise ScenarioError("resource bounds must satisfy r_min <= r_max")
        if not self.r_min <= self.r0 <= self.r_max:
            raise ScenarioError(
                f"initial resource r0={self.r0} outside [r_min, r_max]=[{self.r_min}, {self.r_max}]"
            )

    def eta(self, delta):
        return self.eta0 + self.eta1 * delta

    def check_eta(self, delta_min: float, delta_max: float) -> None:
        if min(self.eta(delta_min), self.eta(delta_max)) < 0:
            raise ScenarioError("trigger cost eta must be nonnegative on [delta_min, delta_max]")


def resource_step(r: float, delta: float, spec: ResourceSpec) -> float:
    """Resource level at the next trigger: min(rho*delta + r - eta(delta), r_max)."""
    return min(spec.rho * delta + r - spec.eta(delta), spec.r_max)


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mu: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen(self.mu, 1, "mu"))
        P = _frozen(self.P, 2, "P")
        if P.shape != (len(self.mu), len(self.mu)):
            raise ScenarioError("belief covariance shape does not match mean")
        if not is_psd(P):
            raise ScenarioError("belief covariance must be positive semidefinite")
        object.__setattr__(self, "P", _frozen(symmetrize(P)))

    @classmethod
    def exact(cls, x) -> "GaussianBelief":
        x = np.asarray(x, dtype=float)
        return cls(x, np.zeros((len(x), len(x))))


@dataclass(frozen=True, eq=False)
class CrossCov:
    """E[(x(t)-mu(t))(x(t_k)-mu(t_k))^T] anchored to trigger ``anchor_index``."""

    Ptk: np.ndarray
    anchor_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "Ptk", _frozen(self.Ptk, 2, "Ptk"))


@dataclass(frozen=True, eq=False)
class AffineFeedbackPlan:
    """u(t) = v_k + K (x(t_k) - mu(t_k)) on (t_k, t_{k+1}]."""

    v: np.ndarray
    K: np.ndarray
    schedule: TriggerSchedule

    def __post_init__(self):
        v = _frozen(self.v, name="v")
        if v.ndim == 1:
            v = _frozen(v.reshape(-1, 1))
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "K", _frozen(self.K, 2, "K"))
        if self.v.shape[0] != self.schedule.n:
            raise ScenarioError(
                f"plan has {self.v.shape[0]} nominal inputs for {self.schedule.n} intervals"
            )
        if self.K.shape[0] != self.v.shape[1]:
            raise ScenarioError("feedback gain rows must match the input dimension")


@dataclass(frozen=True, eq=False)
class PolytopicChanceConstraint:
    """P(H_i^T z <= h_i) >= 1 - epsilon for each row, z the state or the input."""

    H: np.ndarray
    h: np.ndarray
    epsilon: float
    target: str = "state"

    def __post_init__(self):
        object.__setattr__(self, "H", _frozen(self.H, 2, "H"))
        object.__setattr__(self, "h", _frozen(self.h, 1, "h"))
        if self.target not in ("state", "input"):
            raise ScenarioError(f"constraint target must be 'state' or 'input', got {self.target!r}")
        if self.H.shape[0] != self.h.shape[0]:
            raise ScenarioError("constraint H and h row counts differ")
        if not 0.0 < self.epsilon <= 0.5:
            raise ScenarioError(f"epsilon must lie in (0, 0.5], got {self.epsilon}")
        if np.any(np.all(self.H == 0, axis=1)):
            raise ScenarioError("constraint direction vectors must be nonzero")


@dataclass(frozen=True, eq=False)
class Reference:
    """Piecewise-constant signal: value ``values[i]`` holds on [times[i], times[i+1])."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = _frozen(self.times, 1, "reference times")
        values = _frozen(self.values, name="reference values")
        if values.ndim == 1:
            values = _frozen(values.reshape(-1, 1))
        if len(times) == 0 or len(times) != len(values):
            raise ScenarioError("reference needs matching, nonempty time and value lists")
        if np.any(np.diff(times) <= 0):
            raise ScenarioError("reference switch times must strictly increase")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return self.values[np.clip(idx, 0, len(self.times) - 1)]

    def smooth(self, t, width: float):
        """Logistic-blended reference and its time derivative, shape (..., ny)."""
        t = np.asarray(t, dtype=float)
        if width <= 0:
            return self(t), np.zeros(t.shape + (self.values.shape[1],))
        val = np.broadcast_to(self.values[0], t.shape + (self.values.shape[1],)).copy()
        dval = np.zeros_like(val)
        jumps = np.diff(self.values, axis=0)
        for ts, jump in zip(self.times[1:], jumps):
            x = np.clip((t - ts) / width, -60.0, 60.0)
            s = 1.0 / (1.0 + np.exp(-x))
            val += s[..., None] * jump
            dval += (s * (1.0 - s) / width)[..., None] * jump
        return val, dval

    def pairs(self) -> list:
        return [[float(t), self.values[i].tolist() if self.values.shape[1] > 1 else float(self.values[i, 0])]
                for i, t in enumerate(self.times)]


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Stage cost (Cx - ref)^T Wy (Cx - ref) + u^T R u, optional terminal weight."""

    output_weight: np.ndarray
    input_weight: np.ndarray
    reference: Reference
    terminal_weight: np.ndarray | None = None
    expected_covariance_cost: bool = False
    resource_weight: float = 0.05

    def __post_init__(self):
        for name in ("output_weight", "input_weight", "terminal_weight"):
            val = getattr(self, name)
            if val is None:
                continue
            W = _frozen(val, 2, name)
            if W.shape[0] != W.shape[1] or not np.allclose(W, W.T) or not is_psd(W):
                raise ScenarioError(f"{name} must be symmetric positive semidefinite")
            object.__setattr__(self, name, W)
        if self.resource_weight < 0:
            raise ScenarioError("resource_weight must be nonnegative")


@dataclass(frozen=True)
class SimulationOptions:
    em_step: float = 1e-3
    reference_smoothing: float = 0.05
    gain_bound: float = 50.0
    max_iter: int = 200
    loop_max_iter: int = 100  # per trigger in closed loop, after the first solve
    tol: float = 1e-6
    constraint_tol: float = 1e-7

    def __post_init__(self):
        if self.em_step <= 0:
            raise ScenarioError("em_step must be positive")
        if self.max_iter < 1 or self.loop_max_iter < 1 or self.tol <= 0 or self.constraint_tol <= 0:
            raise ScenarioError("solver tolerances must be positive and max_iter >= 1")


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    model: LinearSdeModel
    resource: ResourceSpec
    constraints: tuple
    cost: CostSpec
    x0: np.ndarray
    horizon_n: int = 10
    delta_min: float = 0.1
    delta_max: float = 0.8
    t_end: float = 20.0
    seed: int = 0
    tightening: bool = True
    options: SimulationOptions = field(default_factory=SimulationOptions)

    def __post_init__(self):
        object.__setattr__(self, "x0", _frozen(self.x0, 1, "x0"))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.horizon_n < 1:
            raise ScenarioError("horizon_n must be >= 1")
        if not 0.0 < self.delta_min <= self.delta_max < np.inf:
            raise ScenarioError("delta bounds must satisfy 0 < delta_min <= delta_max < inf")
        if self.t_end <= 0:
            raise ScenarioError("t_end must be positive")
        if len(self.x0) != self.model.nx:
            raise ScenarioError("initial state dimension does not match the model")
        self.resource.check_eta(self.delta_min, self.delta_max)
        for c in self.constraints:
            dim = self.model.nx if c.target == "state" else self.model.nu
            if c.H.shape[1] != dim:
                raise ScenarioError(f"{c.target} constraint rows must have {dim} columns")
        if self.cost.output_weight.shape[0] != self.model.ny:
            raise ScenarioError("output_weight must be ny x ny")
        if self.cost.input_weight.shape[0] != self.model.nu:
            raise ScenarioError("input_weight must be nu x nu")
        if self.cost.reference.values.shape[1] != self.model.ny:
            raise ScenarioError("reference dimension must equal the output dimension")
        if self.cost.terminal_weight is not None and self.cost.terminal_weight.shape[0] != self.model.ny:
            raise ScenarioError("terminal_weight must be ny x ny")

    @property
    def state_constraints(self) -> list:
        return [c for c in self.constraints if c.target == "state"]

    @property
    def input_constraints(self) -> list:
        return [c for c in self.constraints if c.target == "input"]

    def output_bounds(self) -> tuple:
        """(ymin, ymax) implied by state rows parallel to the output map (single output only)."""
        lo, hi = -np.inf, np.inf
        if self.model.ny != 1:
            return lo, hi
        c = self.model.C[0]
        for con in self.state_constraints:
            for H, h in zip(con.H, con.h):
                alpha = float(H @ c) / float(c @ c)
                if np.allclose(H, alpha * c) and alpha != 0:
                    if alpha > 0:
                        hi = min(hi, h / alpha)
                    else:
                        lo = max(lo, h / alpha)
        return lo, hi

    def input_bounds(self) -> tuple:
        lo = np.full(self.model.nu, -np.inf)
        hi = np.full(self.model.nu, np.inf)
        for con in self.input_constraints:
            for H, h in zip(con.H, con.h):
                nz = np.flatnonzero(H)
                if len(nz) == 1:
                    i = nz[0]
                    if H[i] > 0:
                        hi[i] = min(hi[i], h / H[i])
                    else:
                        lo[i] = max(lo[i], h / H[i])
        return lo, hi

    def replace(self, **changes) -> "Scenario":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update(changes)
        return Scenario(**data)


# --------------------------------------------------------------------------- I/O


def _expand_reference(spec: Any, horizon_end: float) -> Reference:
    if isinstance(spec, dict):
        values = spec["values"]
        period = float(spec["period"])
        start = float(spec.get("start", 0.0))
        if period <= 0:
            raise ScenarioError("reference period must be positive")
        count = int(np.ceil((horizon_end - start) / period)) + 1
        times = [start + i * period for i in range(count)]
        vals = [values[i % len(values)] for i in range(count)]
        return Reference(times, vals)
    pairs = list(spec)
    return Reference([p[0] for p in pairs], [p[1] for p in pairs])


def _bound_rows(M: np.ndarray, lower, upper):
    """Rows of H z <= h for lower <= M z <= upper (M has one row per bounded quantity)."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lower = np.broadcast_to(np.asarray(lower if lower is not None else -np.inf, float), (M.shape[0],))
    upper = np.broadcast_to(np.asarray(upper if upper is not None else np.inf, float), (M.shape[0],))
    H, h = [], []
    for i in range(M.shape[0]):
        if np.isfinite(upper[i]):
            H.append(M[i])
            h.append(upper[i])
        if np.isfinite(lower[i]):
            H.append(-M[i])
            h.append(-lower[i])
    return H, h


def _constraint_from_dict(d: dict, model: LinearSdeModel) -> PolytopicChanceConstraint:
    target = d.get("target", "state")
    eps = float(d["epsilon"])
    if target == "output":
        H, h = _bound_rows(model.C, d.get("lower"), d.get("upper"))
        return PolytopicChanceConstraint(H, h, eps, "state")
    if "H" not in d:
        dim = model.nu if target == "input" else model.nx
        H, h = _bound_rows(np.eye(dim), d.get("lower"), d.get("upper"))
        return PolytopicChanceConstraint(H, h, eps, target)
    return PolytopicChanceConstraint(d["H"], d["h"], eps, target)


def scenario_from_dict(d: dict) -> Scenario:
    try:
        m = d["model"]
        model = LinearSdeModel(m["A"], m["B"], m["Q"], m.get("C", np.eye(len(m["A"]))))
        res = d["resource"]
        eta = res.get("eta", 0.0)
        eta0, eta1 = (eta.get("const", 0.0), eta.get("slope", 0.0)) if isinstance(eta, dict) else (eta, 0.0)
        resource = ResourceSpec(
            rho=float(res["rho"]), eta0=float(eta0), eta1=float(eta1),
            r_max=float(res.get("r_max", 1.0)), r_min=float(res.get("r_min", 0.0)),
            r0=float(res.get("r0", res.get("r_max", 1.0))),
        )
        horizon_n = int(d.get("horizon", 10))
        delta_max = float(d.get("delta_max", 0.8))
        t_end = float(d.get("t_end", 20.0))
        c = d["cost"]
        reference = _expand_reference(c["reference"], t_end + horizon_n * delta_max)
        cost = CostSpec(
            output_weight=c["output_weight"],
            input_weight=c["input_weight"],
            reference=reference,
            terminal_weight=c.get("terminal_weight"),
            expected_covariance_cost=bool(c.get("expected_covariance_cost", False)),
            resource_weight=float(c.get("resource_weight", 0.05)),
        )
        constraints = [_constraint_from_dict(cd, model) for cd in d.get("constraints", [])]
        options = SimulationOptions(**d.get("options", {}))
        return Scenario(
            name=str(d.get("name", "scenario")),
            model=model,
            resource=resource,
            constraints=constraints,
            cost=cost,
            x0=d.get("initial_state", np.zeros(model.nx)),
            horizon_n=horizon_n,
            delta_min=float(d.get("delta_min", 0.1)),
            delta_max=delta_max,
            t_end=t_end,
            seed=int(d.get("seed", 0)),
            tightening=bool(d.get("tightening", True)),
            options=options,
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario: {exc!r}") from exc


def scenario_to_dict(s: Scenario) -> dict:
    m = s.model
    return {
        "name": s.name,
        "model": {"A": m.A.tolist(), "B": m.B.tolist(), "Q": m.Q.tolist(), "C": m.C.tolist()},
        "initial_state": s.x0.tolist(),
        "resource": {
            "rho": s.resource.rho,
            "eta": {"const": s.resource.eta0, "slope": s.resource.eta1},
            "r_max": s.resource.r_max,
            "r_min": s.resource.r_min,
            "r0": s.resource.r0,
        },
        "constraints": [
            {"target": c.target, "H": c.H.tolist(), "h": c.h.tolist(), "epsilon": c.epsilon}
            for c in s.constraints
        ],
        "cost": {
            "output_weight": s.cost.output_weight.tolist(),
            "input_weight": s.cost.input_weight.tolist(),
            "terminal_weight": None if s.cost.terminal_weight is None else s.cost.terminal_weight.tolist(),
            "reference": s.cost.reference.pairs(),
            "expected_covariance_cost": s.cost.expected_covariance_cost,
            "resource_weight": s.cost.resource_weight,
        },
        "horizon": s.horizon_n,
        "delta_min": s.delta_min,
        "delta_max": s.delta_max,
        "t_end": s.t_end,
        "seed": s.seed,
        "tightening": s.tightening,
        "options": {f: getattr(s.options, f) for f in s.options.__dataclass_fields__},
    }


def bundled_scenarios() -> list:
    return sorted(p.name for p in resources.files("rastmpc.scenarios").iterdir() if p.name.endswith(".json"))


def resolve_scenario_path(path: str | Path):
    """A filesystem path, or the name of a bundled scenario such as ``danger.json``."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name if p.suffix else p.name + ".json"
    candidate = resources.files("rastmpc.scenarios") / name
    if candidate.is_file():
        return candidate
    raise ScenarioParseError(f"scenario file not found: {path}")


def load_scenario(path: str | Path) -> Scenario:
    p = resolve_scenario_path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: malformed scenario file ({exc})") from exc
    if not isinstance(data, dict):
        raise ScenarioParseError(f"{path}: top level must be an object")
    return scenario_from_dict(data)


def dump_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2) + "\n")


def schedule_times(deltas: Sequence[float], t0: float = 0.0) -> np.ndarray:
    return t0 + np.concatenate([[0.0], np.cumsum(deltas)])
