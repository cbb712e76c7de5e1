"""Frequency sensitivity to the active-power set-point, J(t) = d omega(t) / d P_star.

Simulator estimates come from one-sided differences of two runs that differ
only in a post-clearance set-point step. Surrogate estimates come from
reverse accumulation through one forward pass, and through the rollout
feedback loop for whole trajectories.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import D_X, WINDOW, SampleSet
from .nn import OMEGA, P_STAR_COL, Surrogate, _batch, _leaves, forward_tape, objective_value, rollout
from .sim import NetworkModel, Scenario, SimulationDiverged, StepConfig, simulate_batch, with_step

SOURCES = ("SimFD", "ModelFD", "ModelAnalytic")
OVERFLOW_LIMIT = 1e6
DEFAULT_EPS = 1e-3


@dataclass
class SensitivitySeries:
    t: np.ndarray
    J: np.ndarray
    source: str

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.J = np.asarray(self.J, dtype=float)
        if self.t.shape != self.J.shape:
            raise ValueError("t and J must have equal length")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("t,J,source\n")
            for t, j in zip(self.t, self.J):
                fh.write(f"{t:.17g},{j:.17g},{self.source}\n")

    @classmethod
    def from_csv(cls, path) -> "SensitivitySeries":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty sensitivity file")
        return cls([float(r["t"]) for r in rows], [float(r["J"]) for r in rows], rows[0]["source"])


# ---------------------------------------------------------------------------
# simulator finite differences
# ---------------------------------------------------------------------------


def step_time_of(sc: Scenario) -> float:
    """Set-point step time: the scheduled one, else the first output sample after clearance."""
    if sc.step_time is not None:
        return sc.step_time
    if sc.fault is None:
        return 0.0
    t_clear = sc.fault.t_start + sc.fault.cycles / sc.f_nominal
    return math.ceil(round(t_clear * sc.output_rate, 9)) / sc.output_rate


def fd_sensitivity_many(scenarios: Sequence[Scenario], net: NetworkModel, step: Optional[StepConfig] = None,
                        eps: float = DEFAULT_EPS) -> list:
    """J(t) for every scenario.

    Base and perturbed runs are simulated as two separate batches of equal
    shape so that, before the step, both see bit-identical arithmetic.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = [sc if sc.step_time is not None else with_step(sc, 0.0, step_time_of(sc)) for sc in scenarios]
    pert = [with_step(sc, eps) for sc in base]
    runs0 = simulate_batch(base, net, step)
    runs1 = simulate_batch(pert, net, step)
    out = []
    for r0, r1 in zip(runs0, runs1):
        for r in (r0, r1):
            if isinstance(r, SimulationDiverged):
                raise r
        out.append(SensitivitySeries(r0.t, (r1.x[:, OMEGA] - r0.x[:, OMEGA]) / eps, "SimFD"))
    return out


def fd_sensitivity_sim(scenario: Scenario, net: NetworkModel, step: Optional[StepConfig] = None,
                       eps: float = DEFAULT_EPS) -> SensitivitySeries:
    return fd_sensitivity_many([scenario], net, step, eps)[0]


# ---------------------------------------------------------------------------
# surrogate sensitivities
# ---------------------------------------------------------------------------


def _input_jacobian_rows(model: Surrogate, windows, rows):
    """d x_hat[r] / d window (physical units) for each output row r. Returns (out, {r: (B, 4, 7)})."""
    X = ad.leaf(model.norm.apply(_batch(windows)))
    out, _ = forward_tape(model.params, _leaves(model.params, False), X)
    grads = {}
    for r in rows:
        seed = np.zeros(out.shape)
        seed[:, r] = model.norm.std[r]
        ad.backward(out, seed)
        grads[r] = X.grad / model.norm.std
    return model.norm.invert_x(out.value), grads


def model_sensitivity_onestep(model: Surrogate, windows) -> np.ndarray:
    """d omega_hat / d P_star summed over the four window entries, physical units."""
    single = np.ndim(windows) == 2
    _, g = _input_jacobian_rows(model, windows, (OMEGA,))
    J = g[OMEGA][:, :, P_STAR_COL].sum(axis=1)
    return J[0] if single else J


@dataclass
class RolloutSensitivity:
    x: np.ndarray  # (B, H, 3) rollout prediction
    J: np.ndarray  # (B, H) d omega_hat / d P_star
    S: np.ndarray  # (B, H, 3) sensitivities of all predicted states
    overflow: np.ndarray  # (B,) bool


def rollout_sensitivity(model: Surrogate, init_window, exo, horizon: int, step_index: int = 0) -> RolloutSensitivity:
    """Closed-loop sensitivity of a rollout to a P_star perturbation active from ``step_index`` on.

    Indices count samples from the first window entry. Every step adds the
    direct set-point term to the Jacobian of the step wrt the fed-back states
    times their accumulated sensitivities.
    """
    single = np.ndim(init_window) == 2
    win = _batch(init_window).copy()
    exo = np.asarray(exo, dtype=float)
    if single:
        exo = exo[None]
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if exo.shape[1] < horizon + WINDOW - 1:
        raise ValueError(f"exogenous sequence covers {exo.shape[1]} samples, need {horizon + WINDOW - 1}")
    B = win.shape[0]
    win[:, :, D_X:] = exo[:, :WINDOW]
    # sensitivities of the x entries currently inside the window; ground-truth entries have none
    S_win = np.zeros((B, WINDOW, D_X))
    xs = np.zeros((B, horizon, D_X))
    Ss = np.zeros((B, horizon, D_X))
    overflow = np.zeros(B, bool)
    for n in range(horizon):
        active = (np.arange(n, n + WINDOW) >= step_index).astype(float)  # (4,)
        x_next, g = _input_jacobian_rows(model, win, range(D_X))
        S_next = np.empty((B, D_X))
        for r in range(D_X):
            direct = g[r][:, :, P_STAR_COL] @ active
            fed = np.einsum("bjc,bjc->b", g[r][:, :, :D_X], S_win)
            S_next[:, r] = direct + fed
        big = ~np.all(np.isfinite(S_next) & (np.abs(S_next) <= OVERFLOW_LIMIT), axis=1)
        overflow |= big
        S_next[overflow] = np.nan_to_num(S_next[overflow], nan=0.0, posinf=OVERFLOW_LIMIT, neginf=-OVERFLOW_LIMIT)
        xs[:, n], Ss[:, n] = x_next, S_next
        if n + 1 == horizon:
            break
        nxt = np.concatenate([x_next, exo[:, WINDOW + n]], axis=1)
        win = np.concatenate([win[:, 1:], nxt[:, None]], axis=1)
        S_win = np.concatenate([S_win[:, 1:], S_next[:, None]], axis=1)
    res = RolloutSensitivity(xs, Ss[:, :, OMEGA], Ss, overflow)
    if single:
        return RolloutSensitivity(xs[0], res.J[0], Ss[0], overflow[0])
    return res


def perturb_setpoint(exo, step_index: int, delta: float):
    """Copy of an exogenous (.., L, 4) sequence with P_star raised from ``step_index`` on."""
    out = np.array(exo, dtype=float)
    out[..., step_index:, P_STAR_COL - D_X] += delta
    return out


def fd_rollout_sensitivity(model: Surrogate, init_window, exo, horizon: int, step_index: int = 0,
                           eps: float = 1e-5) -> np.ndarray:
    """Central difference of the whole rollout wrt P_star (the surrogate-level oracle)."""
    win = np.array(init_window, dtype=float)
    hi = rollout(model, win, perturb_setpoint(exo, step_index, eps), horizon).x
    lo = rollout(model, win, perturb_setpoint(exo, step_index, -eps), horizon).x
    return (hi[..., OMEGA] - lo[..., OMEGA]) / (2 * eps)


def model_series(t, J, source="ModelAnalytic") -> SensitivitySeries:
    return SensitivitySeries(t, J, source)


# ---------------------------------------------------------------------------
# regularized objective
# ---------------------------------------------------------------------------


def sensitivity_targets(samples: SampleSet, series: dict) -> np.ndarray:
    """Simulator J at each sample's target index; NaN where a scenario has no series."""
    out = np.full(len(samples), np.nan)
    for sid, s in series.items():
        mask = samples.scenario == sid
        out[mask] = s.J[samples.index[mask]]
    return out


def loss_with_sensitivity(model: Surrogate, samples: SampleSet, sens_targets, lam: float) -> float:
    """One-step mean squared error (normalized) plus lam * mean (J_hat - J)^2 over targeted samples."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    Xn = model.norm.apply(samples.windows)
    Tn = model.norm.apply_x(samples.targets)
    return objective_value(model.params, Xn, Tn, lam, np.asarray(sens_targets, dtype=float), model.norm)
