"""Fixed-step integration of one component against a single-machine infinite bus.

The simulator alternates an algebraic terminal-voltage solve with one explicit
integrator step.  Exogenous inputs (terminal voltage and set-points) are held
constant across the internal stages of a step.  Scenarios that share a
component and a time grid are simulated together as one batch.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .models import Model, equilibrium

CSV_HEADER = ("t", "delta", "omega", "E", "V", "theta", "P_star", "Q_or_V_star")
DIVERGENCE_LIMIT = 1e6


class SimulationDiverged(RuntimeError):
    def __init__(self, t: float, scenario_id=None):
        super().__init__(f"simulation diverged at t={t:.6g} s" + (
            f" (scenario {scenario_id})" if scenario_id is not None else ""))
        self.t = t
        self.scenario_id = scenario_id


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepConfig:
    dt: float
    method: str = "RK4"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.method not in ("Euler", "RK4"):
            raise ValueError("method must be 'Euler' or 'RK4'")


@dataclass(frozen=True)
class Rk4Tableau:
    c: tuple = (1 / 6, 1 / 3, 1 / 3, 1 / 6)
    alpha: tuple = (0.0, 0.5, 0.5, 1.0)
    beta: tuple = (
        (0.0, 0.0, 0.0, 0.0),
        (0.5, 0.0, 0.0, 0.0),
        (0.0, 0.5, 0.0, 0.0),
        (0.0, 0.0, 1.0, 0.0),
    )


CLASSIC_RK4 = Rk4Tableau()


def step_euler(f: Callable, x, y, u, dt: float):
    return x + dt * f(x, y, u)


def step_rk4(f: Callable, x, y, u, dt: float, tableau: Rk4Tableau = CLASSIC_RK4):
    if tableau is CLASSIC_RK4:
        k0 = f(x, y, u)
        k1 = f(x + (0.5 * dt) * k0, y, u)
        k2 = f(x + (0.5 * dt) * k1, y, u)
        k3 = f(x + dt * k2, y, u)
        return x + dt * (k0 / 6 + k1 / 3 + k2 / 3 + k3 / 6)
    ks = []
    for i in range(len(tableau.c)):
        xi = x
        for j in range(i):
            if tableau.beta[i][j] != 0.0:
                xi = xi + dt * tableau.beta[i][j] * ks[j]
        ks.append(f(xi, y, u))
    return x + dt * sum(c * k for c, k in zip(tableau.c, ks))


def _stepper(method: str):
    return step_euler if method == "Euler" else step_rk4


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkModel:
    E_inf: float = 1.0
    theta_inf: float = 0.0
    X_line: float = 0.3
    X_fault: Optional[float] = 0.05

    def __post_init__(self):
        if not self.X_line > 0:
            raise ValueError("X_line must be positive")
        if self.X_fault is not None and not self.X_fault > 0:
            raise ValueError("X_fault must be positive")

    def thevenin(self, faulted, location_frac, X_fault=None):
        """Thevenin source and reactance seen from the component terminal.

        While faulted, a shunt reactance sits ``location_frac`` of the way
        along the line from the terminal.
        """
        xf = self.X_fault if X_fault is None else X_fault
        v_inf = self.E_inf * np.exp(1j * self.theta_inf)
        faulted = np.asarray(faulted, dtype=bool)
        a = np.asarray(location_frac, dtype=float)
        if xf is None:
            if faulted.any():
                raise ValueError("network has no fault reactance configured")
            xf = 1.0
        xf = np.asarray(xf, dtype=float)
        x_far = (1.0 - a) * self.X_line
        v_f = v_inf * (xf / (xf + x_far))
        x_f = a * self.X_line + xf * x_far / (xf + x_far)
        v = np.where(faulted, v_f, v_inf)
        x = np.where(faulted, x_f, self.X_line)
        return v, x


def solve_terminal_voltage(net: NetworkModel, internal, faulted: bool, location_frac: float = 0.5,
                           x_source: float = 0.15):
    """Voltage divider between ``E∠delta`` behind ``x_source`` and the infinite bus."""
    from .models import TerminalVoltage

    E, delta = internal
    v_th, x_th = net.thevenin(faulted, location_frac)
    e = E * np.exp(1j * delta)
    v = v_th + (e - v_th) * (x_th / (x_source + x_th))
    return TerminalVoltage(float(np.abs(v)), float(np.angle(v)))


# ---------------------------------------------------------------------------
# scenarios and trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FaultEvent:
    t_start: float
    cycles: int
    location_frac: float
    X_fault: Optional[float] = None

    def __post_init__(self):
        if self.t_start < 0:
            raise ValueError("t_start must be >= 0")
        # zero cycles is accepted as a degenerate "no fault"
        if not (0 <= self.cycles <= 10) or int(self.cycles) != self.cycles:
            raise ValueError("cycles must be an integer in [0, 10]")
        if not 0.0 <= self.location_frac <= 1.0:
            raise ValueError("location_frac must lie in [0, 1]")


@dataclass(frozen=True)
class Scenario:
    model: Model
    setpoints: tuple
    fault: Optional[FaultEvent] = None
    duration: float = 3.0
    sim_rate: float = 10_000.0
    output_rate: float = 100.0
    step_time: Optional[float] = None
    step_dP: float = 0.0
    id: int = 0
    smoothing_window: int = 11

    def __post_init__(self):
        ratio = self.sim_rate / self.output_rate
        if self.sim_rate < self.output_rate or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("output_rate must divide sim_rate")

    @property
    def kind(self) -> str:
        return self.model.kind

    @property
    def f_nominal(self) -> float:
        return self.model.omega_o / (2 * math.pi)

    @property
    def factor(self) -> int:
        return int(round(self.sim_rate / self.output_rate))

    def describe(self) -> dict:
        d = {
            "id": self.id,
            "kind": self.kind,
            "P_star": self.setpoints[0],
            "second": self.setpoints[1],
            "duration": self.duration,
            "sim_rate": self.sim_rate,
            "output_rate": self.output_rate,
            "smoothing_window": self.smoothing_window,
            "step_time": self.step_time,
            "step_dP": self.step_dP,
            "f_nominal": self.f_nominal,
        }
        if getattr(self.model, "p", None) is not None:
            d["strategy"] = self.model.p.strategy
        if self.fault is not None:
            d["fault"] = {
                "t_start": self.fault.t_start,
                "cycles": self.fault.cycles,
                "location_frac": self.fault.location_frac,
                "X_fault": self.fault.X_fault,
            }
        return d


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray  # (T, 3) reduced states
    y: np.ndarray  # (T, 2) V, theta
    u: np.ndarray  # (T, 2) P_star, second set-point
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.u) == n):
            raise ValueError("trajectory arrays must have equal length")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def channels(self) -> np.ndarray:
        return np.concatenate([self.x, self.y, self.u], axis=1)

    @classmethod
    def from_channels(cls, t, ch, meta=None) -> "Trajectory":
        return cls(np.asarray(t, float), ch[:, 0:3].copy(), ch[:, 3:5].copy(), ch[:, 5:7].copy(),
                   dict(meta or {}))

    def to_csv(self, path) -> None:
        data = np.column_stack([self.t, self.channels])
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            for row in data:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, meta=None) -> "Trajectory":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            data = np.array([[float(v) for v in row] for row in reader])
        return cls.from_channels(data[:, 0], data[:, 1:], meta)


def scenario_filename(scenario_id) -> str:
    return f"scenario_{scenario_id}.csv"


# ---------------------------------------------------------------------------
# smoothing and down-sampling
# ---------------------------------------------------------------------------


def smooth_decimate(a: np.ndarray, factor: int, window: int) -> np.ndarray:
    """Centered moving average of width ``window`` along axis 0, then keep every ``factor``-th row.

    Windows shrink at the edges. An even width reaches one sample further
    back than forward.
    """
    if factor < 1 or window < 1:
        raise ValueError("factor and window must be >= 1")
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    idx = np.arange(0, n, factor)
    if window == 1:
        return a[idx].copy()
    left = window // 2
    right = window - 1 - left
    ref = a[0]
    csum = np.zeros((n + 1,) + a.shape[1:])
    np.cumsum(a - ref, axis=0, out=csum[1:])
    lo = np.maximum(idx - left, 0)
    hi = np.minimum(idx + right + 1, n)
    count = (hi - lo).reshape((-1,) + (1,) * (a.ndim - 1))
    return (csum[hi] - csum[lo]) / count + ref


def downsample(traj: Trajectory, factor: int, window: int) -> Trajectory:
    ch = smooth_decimate(traj.channels, factor, window)
    return Trajectory.from_channels(traj.t[::factor], ch, traj.meta)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def _equilibrium_cached(model, net: NetworkModel, u, cache={}):
    key = (id(model), net, tuple(float(v) for v in u))
    hit = cache.get(key)
    if hit is None or hit[0] is not model:
        v_th, x_th = net.thevenin(False, 0.0)
        x0 = equilibrium(model, u, thevenin=(complex(v_th), float(x_th)))
        cache[key] = hit = (model, x0)
    return hit[1].copy()


def _schedule(scenarios: Sequence[Scenario], rate: float):
    """Per-scenario integer sample indices for fault start/end and set-point step."""
    B = len(scenarios)
    k0 = np.full(B, -1)
    k1 = np.full(B, -1)
    loc = np.zeros(B)
    xf = np.full(B, np.nan)
    ks = np.full(B, np.iinfo(np.int64).max)
    dP = np.zeros(B)
    for b, sc in enumerate(scenarios):
        if sc.fault is not None and sc.fault.cycles > 0:
            k0[b] = int(round(sc.fault.t_start * rate))
            k1[b] = k0[b] + int(round(sc.fault.cycles * rate / sc.f_nominal))
            loc[b] = sc.fault.location_frac
            if sc.fault.X_fault is not None:
                xf[b] = sc.fault.X_fault
        if sc.step_time is not None and sc.step_dP != 0.0:
            ks[b] = int(round(sc.step_time * rate))
            dP[b] = sc.step_dP
    return k0, k1, loc, xf, ks, dP


def integrate(model, net: NetworkModel, scenarios: Sequence[Scenario], dt: float, n_steps: int,
              method: str = "RK4", record: bool = True):
    """Integrate a batch of scenarios for ``n_steps`` steps of ``dt``.

    Returns ``(channels, diverged_at)``: channels has shape
    ``(n_steps + 1, B, 7)`` (or None when ``record`` is False) and
    diverged_at holds the blow-up time per scenario (NaN when bounded).
    """
    B = len(scenarios)
    rate = 1.0 / dt
    base = np.array([sc.setpoints for sc in scenarios], dtype=float)
    x = np.stack([_equilibrium_cached(model, net, u) for u in base])
    k0, k1, loc, xf, ks, dP = _schedule(scenarios, rate)
    xf_eff = np.where(np.isnan(xf), net.X_fault if net.X_fault is not None else 1.0, xf)
    v_ok, x_ok = net.thevenin(np.zeros(B, bool), loc, xf_eff)
    v_ft, x_ft = net.thevenin(np.ones(B, bool), loc, xf_eff) if (k0 >= 0).any() else (v_ok, x_ok)
    step = _stepper(method)
    f = model.derivatives
    diverged_at = np.full(B, np.nan)
    alive = np.ones(B, bool)
    out = np.empty((n_steps + 1, B, 7)) if record else None
    with np.errstate(all="ignore"):
        for n in range(n_steps + 1):
            faulted = (n >= k0) & (n < k1)
            if faulted.any():
                v_th = np.where(faulted, v_ft, v_ok)
                x_th = np.where(faulted, x_ft, x_ok)
            else:
                v_th, x_th = v_ok, x_ok
            u = base.copy()
            stepped = n >= ks
            if stepped.any():
                u[:, 0] += np.where(stepped, dP, 0.0)
            y = model.terminal_voltage(x, v_th, x_th)
            x = model.resolve(x, y, u)
            if record:
                out[n, :, 0:3] = model.reduce(x)
                out[n, :, 3:5] = y
                out[n, :, 5:7] = u
            if n == n_steps:
                break
            x_new = step(f, x, y, u, dt)
            bad = alive & ~(np.isfinite(x_new).all(axis=-1) & (np.abs(x_new) <= DIVERGENCE_LIMIT).all(axis=-1))
            if bad.any():
                diverged_at[bad] = (n + 1) * dt
                alive &= ~bad
                if not alive.any():
                    if record:
                        out[n + 1:] = np.nan
                    break
                x_new[~alive] = x[~alive]
            x = x_new
    return out, diverged_at


def simulate_batch(scenarios: Sequence[Scenario], net: NetworkModel, step: Optional[StepConfig] = None):
    """Simulate scenarios that share a model and time grid.

    Returns one entry per scenario, in input order: a Trajectory, or a
    SimulationDiverged instance for scenarios that blew up.
    """
    if not scenarios:
        return []
    sc0 = scenarios[0]
    for sc in scenarios:
        if (sc.model is not sc0.model or sc.duration != sc0.duration or sc.sim_rate != sc0.sim_rate
                or sc.output_rate != sc0.output_rate or sc.smoothing_window != sc0.smoothing_window):
            raise ValueError("batched scenarios must share model, duration, rates and smoothing")
    if step is None:
        step = StepConfig(1.0 / sc0.sim_rate, "RK4")
    if abs(step.dt * sc0.sim_rate - 1.0) > 1e-9:
        raise ValueError("StepConfig.dt must equal 1/sim_rate")
    n_steps = int(round(sc0.duration * sc0.sim_rate))
    raw, diverged_at = integrate(sc0.model, net, scenarios, step.dt, n_steps, step.method)
    t_full = np.arange(n_steps + 1) / sc0.sim_rate
    results = []
    for b, sc in enumerate(scenarios):
        if np.isfinite(diverged_at[b]):
            results.append(SimulationDiverged(float(diverged_at[b]), sc.id))
            continue
        ch = smooth_decimate(raw[:, b, :], sc.factor, sc.smoothing_window)
        t = t_full[:: sc.factor]
        results.append(Trajectory.from_channels(t, ch, sc.describe()))
    return results


def simulate_scenario(sc: Scenario, net: NetworkModel, step: Optional[StepConfig] = None) -> Trajectory:
    (res,) = simulate_batch([sc], net, step)
    if isinstance(res, SimulationDiverged):
        raise res
    return res


def simulate_many(scenarios: Sequence[Scenario], net: NetworkModel, step: Optional[StepConfig] = None,
                  chunk: int = 64):
    """Group compatible scenarios into batches; results come back ordered by scenario id."""
    groups: dict = {}
    for sc in scenarios:
        key = (id(sc.model), sc.duration, sc.sim_rate, sc.output_rate, sc.smoothing_window)
        groups.setdefault(key, []).append(sc)
    out = {}
    for group in groups.values():
        for i in range(0, len(group), chunk):
            part = group[i:i + chunk]
            for sc, res in zip(part, simulate_batch(part, net, step)):
                out[sc.id] = res
    return [out[k] for k in sorted(out)]


def is_bounded(model, net: NetworkModel, scenario: Scenario, dt: float, method: str, horizon: float) -> bool:
    """Whether the raw integrator stays below the divergence limit over ``horizon`` seconds."""
    n = int(math.ceil(horizon / dt))
    _, diverged_at = integrate(model, net, [scenario], dt, n, method, record=False)
    return not np.isfinite(diverged_at[0])


def stability_threshold(model, net: NetworkModel, scenario: Scenario, method: str, horizon: float,
                        dt_lo: float, dt_hi: float, iters: int = 12) -> float:
    """Bisect (in log dt) for the largest step at which ``method`` stays bounded.

    Requires a bounded run at ``dt_lo`` and a divergent one at ``dt_hi``.
    """
    if not is_bounded(model, net, scenario, dt_lo, method, horizon):
        raise ValueError(f"{method} already diverges at dt_lo={dt_lo}")
    if is_bounded(model, net, scenario, dt_hi, method, horizon):
        raise ValueError(f"{method} is still bounded at dt_hi={dt_hi}")
    lo, hi = math.log(dt_lo), math.log(dt_hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if is_bounded(model, net, scenario, math.exp(mid), method, horizon):
            lo = mid
        else:
            hi = mid
    return math.exp(lo)


# ---------------------------------------------------------------------------
# scenario sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    n_locations: int = 40
    durations: tuple = tuple(range(1, 11))
    fault_sites: tuple = (None,)  # shunt reactance per site; None = network default
    setpoint_steps: tuple = (0.0,)
    t_start: float = 0.1
    duration: float = 14.0
    sim_rate: float = 1000.0
    output_rate: float = 100.0
    smoothing_window: int = 11

    def __post_init__(self):
        if any(int(d) != d or not 1 <= d <= 10 for d in self.durations):
            raise ValueError("fault durations must be whole cycles in 1..10")

    @property
    def size(self) -> int:
        return self.n_locations * len(self.durations) * len(self.fault_sites) * len(self.setpoint_steps)


def generate_scenarios(spec: SweepSpec, model, setpoints, count: Optional[int] = None) -> list:
    """Deterministic grid sweep: sites x locations x durations x set-point steps.

    Locations form a uniform grid on [0.1, 0.9]. A nonzero set-point step
    is applied at the first output sample at or after fault clearance.
    """
    if spec.size == 0:
        raise ValueError("no scenarios")
    if count is None:
        count = spec.size
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > spec.size:
        raise ValueError(f"sweep has only {spec.size} grid points, {count} requested")
    locations = np.linspace(0.1, 0.9, spec.n_locations) if spec.n_locations > 1 else np.array([0.1])
    f_nom = model.omega_o / (2 * math.pi)
    u = tuple(float(v) for v in np.asarray(setpoints.to_array() if hasattr(setpoints, "to_array") else setpoints))
    grid = itertools.product(spec.fault_sites, locations, spec.durations, spec.setpoint_steps)
    out = []
    for sid, (site, loc, cyc, dP) in enumerate(itertools.islice(grid, count)):
        fault = FaultEvent(spec.t_start, int(cyc), float(loc), site)
        t_clear = spec.t_start + cyc / f_nom
        step_time = math.ceil(round(t_clear * spec.output_rate, 9)) / spec.output_rate
        out.append(Scenario(model, u, fault, spec.duration, spec.sim_rate, spec.output_rate,
                            step_time, float(dP), sid, spec.smoothing_window))
    return out


def with_step(sc: Scenario, extra_dP: float, step_time: Optional[float] = None) -> Scenario:
    """Copy of ``sc`` with ``extra_dP`` added to the post-fault set-point step."""
    return replace(sc, step_dP=sc.step_dP + extra_dP,
                   step_time=sc.step_time if step_time is None else step_time)


def write_trajectories(trajs, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for tr in trajs:
        name = scenario_filename(tr.meta["id"])
        tr.to_csv(out_dir / name)
        names.append(name)
    return names
