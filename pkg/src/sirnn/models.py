"""Component dynamics: two-axis synchronous generator and the generic grid-forming inverter.

Every model works on plain state arrays whose last axis holds the state
variables, so the same code evaluates one operating point or a whole batch of
scenarios at once.  The dataclasses below are the user-facing value types; the
``*Model`` classes hold the array kernels used by the simulator.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np

SG_STATES = ("delta", "omega", "E_qp", "E_dp", "E_fd", "P_M")
GFM_STATES = ("delta", "omega", "E_star", "P_m", "Q_m", "I_d", "I_q")
REDUCED_STATES = ("delta", "omega", "E")

SINGULAR_TOL = 1e-12


class SingularSystemError(ValueError):
    pass


class EquilibriumError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------------------
# parameter and state types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SgParams:
    M: float
    D: float
    X_d: float
    X_dp: float
    X_q: float
    X_qp: float
    T_do_p: float
    T_qo_p: float
    R: float
    omega_o: float

    def __post_init__(self):
        if not self.M > 0:
            raise ValueError("M must be positive")
        if not self.T_do_p > 0 or self.T_qo_p < 0:
            raise ValueError("need T_do_p > 0 and T_qo_p >= 0")
        if not (self.X_d >= self.X_dp > 0 and self.X_q >= self.X_qp > 0):
            raise ValueError("need X_d >= X_dp > 0 and X_q >= X_qp > 0")
        if not self.omega_o > 0:
            raise ValueError("omega_o must be positive")


@dataclass(frozen=True)
class ExciterParams:
    T_A: float
    K_A: float

    def __post_init__(self):
        if not (self.T_A > 0 and self.K_A > 0):
            raise ValueError("exciter needs T_A > 0 and K_A > 0")


@dataclass(frozen=True)
class GovernorParams:
    T_SV: float
    R_D: float

    def __post_init__(self):
        if not (self.T_SV > 0 and self.R_D > 0):
            raise ValueError("governor needs T_SV > 0 and R_D > 0")


class GfmStrategy:
    DROOP = "Droop"
    VSM = "VSM"
    DVOC = "dVOC"
    ALL = (DROOP, VSM, DVOC)

    @classmethod
    def check(cls, tag: str) -> str:
        for s in cls.ALL:
            if tag.lower() == s.lower():
                return s
        raise ValueError(f"unknown GFM strategy {tag!r}; expected one of {cls.ALL}")


@dataclass(frozen=True)
class GfmControlGains:
    omega_c: float = 0.0
    d_f: float = 0.0
    d_v: float = 0.0
    m_f: float = 0.0
    d_d: float = 0.0
    kappa_1: float = 0.0
    kappa_2: float = 0.0
    V_o: float = 1.0
    omega_o: float = 2 * math.pi * 50


@dataclass(frozen=True)
class GfmParams:
    tau_f: float
    tau_v: float
    tau_p: float
    kappa_d: float
    kappa_f: float
    kappa_v: float
    L: float
    omega_o: float
    strategy: str
    gains: GfmControlGains
    R_f: float = 0.0  # filter resistance; 0 gives the lossless current equations

    def __post_init__(self):
        if self.R_f < 0:
            raise ValueError("R_f must be non-negative")
        if min(self.tau_f, self.tau_v, self.tau_p) < 0:
            raise ValueError("time constants must be non-negative")
        if not self.L > 0:
            raise ValueError("L must be positive")


@dataclass(frozen=True)
class SgState:
    delta: float
    omega: float
    E_qp: float
    E_dp: float
    E_fd: float
    P_M: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in SG_STATES], dtype=float)

    @classmethod
    def from_array(cls, a) -> "SgState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class GfmState:
    delta: float
    omega: float
    E_star: float
    P_m: float
    Q_m: float
    I_d: float
    I_q: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in GFM_STATES], dtype=float)

    @classmethod
    def from_array(cls, a) -> "GfmState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class TerminalVoltage:
    V: float
    theta: float

    def __post_init__(self):
        if self.V < 0:
            raise ValueError("terminal voltage magnitude must be non-negative")

    def to_array(self) -> np.ndarray:
        return np.array([self.V, self.theta], dtype=float)


@dataclass(frozen=True)
class Setpoints:
    """Set-point pair u = [P_star, second]; ``second`` is V_star for an SG, Q_star for a GFM."""

    P_star: float
    second: float
    kind: str = "sg"

    def __post_init__(self):
        if self.kind not in ("sg", "gfm"):
            raise ValueError("kind must be 'sg' or 'gfm'")
        if not (math.isfinite(self.P_star) and math.isfinite(self.second)):
            raise ValueError("set-points must be finite")

    @property
    def V_star(self) -> float:
        if self.kind != "sg":
            raise AttributeError("GFM set-points carry Q_star, not V_star")
        return self.second

    @property
    def Q_star(self) -> float:
        if self.kind != "gfm":
            raise AttributeError("SG set-points carry V_star, not Q_star")
        return self.second

    def to_array(self) -> np.ndarray:
        return np.array([self.P_star, self.second], dtype=float)


@dataclass(frozen=True)
class ReducedState:
    delta: float
    omega: float
    E: float


# ---------------------------------------------------------------------------
# synchronous generator
# ---------------------------------------------------------------------------


def _sg_currents(delta, E_qp, E_dp, V, theta, p: SgParams):
    det = p.R * p.R + p.X_d * p.X_q
    if abs(det) < SINGULAR_TOL:
        raise SingularSystemError("stator equations are singular (R^2 + X_d X_q ~ 0)")
    a = E_dp - V * np.sin(delta - theta)
    b = E_qp - V * np.cos(delta - theta)
    I_d = (p.R * a + p.X_q * b) / det
    I_q = (p.R * b - p.X_d * a) / det
    return I_d, I_q


class SgModel:
    kind = "sg"
    state_names = SG_STATES

    def __init__(self, sg: SgParams, exciter: ExciterParams, governor: GovernorParams):
        self.sg = sg
        self.exciter = exciter
        self.governor = governor
        self.omega_o = sg.omega_o
        # T'_qo = 0 turns the d-axis EMF into an algebraic variable
        self.algebraic = np.array([False, False, False, sg.T_qo_p == 0, False, False])

    @property
    def n_states(self) -> int:
        return len(SG_STATES)

    def resolve(self, x, y, u):
        if not self.algebraic[3]:
            return x
        p = self.sg
        x = np.array(x, dtype=float, copy=True)
        V, theta = y[..., 0], y[..., 1]
        s = V * np.sin(x[..., 0] - theta)
        b = x[..., 2] - V * np.cos(x[..., 0] - theta)
        c = p.X_q - p.X_qp
        det = p.R * p.R + p.X_d * p.X_q
        x[..., 3] = c * (p.R * b + p.X_d * s) / (det + c * p.X_d)
        return x

    def currents(self, x, y):
        return _sg_currents(x[..., 0], x[..., 2], x[..., 3], y[..., 0], y[..., 1], self.sg)

    def derivatives(self, x, y, u):
        p, ex, gov = self.sg, self.exciter, self.governor
        x = self.resolve(x, y, u)
        delta, omega, E_qp, E_dp, E_fd, P_M = (x[..., i] for i in range(6))
        V = y[..., 0]
        I_d, I_q = self.currents(x, y)
        dx = np.empty(np.broadcast_shapes(x.shape, y.shape[:-1] + (6,)))
        dx[..., 0] = omega - p.omega_o
        dx[..., 1] = (
            P_M - E_dp * I_d - E_qp * I_q - (p.X_qp - p.X_dp) * I_d * I_q - p.D * (omega - p.omega_o)
        ) / p.M
        dx[..., 2] = (-E_qp - (p.X_d - p.X_dp) * I_d + E_fd) / p.T_do_p
        if self.algebraic[3]:
            dx[..., 3] = 0.0
        else:
            dx[..., 3] = (-E_dp + (p.X_q - p.X_qp) * I_q) / p.T_qo_p
        dx[..., 4] = (-E_fd + ex.K_A * (u[..., 1] - V)) / ex.T_A
        dx[..., 5] = (-P_M + u[..., 0] - (omega / p.omega_o - 1.0) / gov.R_D) / gov.T_SV
        return dx

    def terminal_voltage(self, x, v_th, x_th):
        """Terminal phasor from the stator equations solved jointly with a Thevenin network.

        ``v_th`` is the complex Thevenin source seen from the terminal and
        ``x_th`` its series reactance.
        """
        p = self.sg
        delta, E_qp, E_dp = x[..., 0], x[..., 2], x[..., 3]
        rot = np.exp(-1j * (delta - np.pi / 2))
        vth_dq = v_th * rot
        vd_th, vq_th = vth_dq.real, vth_dq.imag
        a11, a12 = p.R, -(p.X_q + x_th)
        a21, a22 = p.X_d + x_th, p.R
        r1, r2 = E_dp - vd_th, E_qp - vq_th
        det = a11 * a22 - a12 * a21
        I_d = (r1 * a22 - a12 * r2) / det
        I_q = (a11 * r2 - a21 * r1) / det
        V_d = vd_th - x_th * I_q
        V_q = vq_th + x_th * I_d
        V = np.hypot(V_d, V_q)
        theta = delta - np.arctan2(V_d, V_q)
        return np.stack([V, theta], axis=-1)

    def reduce(self, x):
        return np.stack([x[..., 0], x[..., 1], np.hypot(x[..., 3], x[..., 2])], axis=-1)

    def flat_start(self, y, u):
        V, theta = float(y[0]), float(y[1])
        return np.array([theta, self.omega_o, V, 0.0, V, float(u[0])])


# ---------------------------------------------------------------------------
# grid-forming inverter
# ---------------------------------------------------------------------------


def gfm_gains_from_strategy(
    strategy: str, g: GfmControlGains, E_star_live: Optional[float] = None, L: float = 1.0, R_f: float = 0.0
) -> GfmParams:
    """Map a primary-control strategy onto the generic GFM time constants and gains."""
    strategy = GfmStrategy.check(strategy)
    if strategy == GfmStrategy.DROOP:
        vals = dict(tau_f=0.0, tau_v=0.0, tau_p=1.0 / g.omega_c, kappa_d=0.0,
                    kappa_f=1.0 / g.d_f, kappa_v=1.0 / g.d_v)
    elif strategy == GfmStrategy.VSM:
        vals = dict(tau_f=g.m_f / g.d_f, tau_v=0.0, tau_p=1.0 / g.omega_c, kappa_d=g.d_d / g.d_f,
                    kappa_f=1.0 / g.d_f, kappa_v=1.0 / g.d_v)
    else:
        E = g.V_o if E_star_live is None else E_star_live
        if not E > 0:
            raise ValueError("dVOC gains need a positive E_star")
        vals = dict(tau_f=0.0, tau_v=1.0 / (g.omega_o * g.kappa_2), tau_p=0.0, kappa_d=0.0,
                    kappa_f=g.omega_o * g.kappa_1 / E**2, kappa_v=g.kappa_1 / (g.kappa_2 * E))
    return GfmParams(L=L, omega_o=g.omega_o, strategy=strategy, gains=g, R_f=R_f, **vals)


def fv_eval(strategy: str, E_star, V_o):
    strategy = GfmStrategy.check(strategy)
    if strategy == GfmStrategy.DVOC:
        return E_star * (V_o**2 - E_star**2)
    return V_o - E_star


class GfmModel:
    kind = "gfm"
    state_names = GFM_STATES

    def __init__(self, params: GfmParams):
        self.p = params
        self.omega_o = params.omega_o
        self.algebraic = np.array(
            [False, params.tau_f == 0, params.tau_v == 0, params.tau_p == 0, params.tau_p == 0,
             False, False]
        )
        if params.tau_v == 0 and params.strategy == GfmStrategy.DVOC:
            raise ValueError("an algebraic dVOC voltage loop has no closed form")

    @property
    def n_states(self) -> int:
        return len(GFM_STATES)

    def _gains(self, E_star):
        p = self.p
        if p.strategy == GfmStrategy.DVOC:
            g = p.gains
            return g.omega_o * g.kappa_1 / E_star**2, g.kappa_1 / (g.kappa_2 * E_star)
        return p.kappa_f, p.kappa_v

    def resolve(self, x, y, u):
        """Fill the algebraic slots (zero time constants) with their instantaneous values."""
        if not self.algebraic.any():
            return x
        p = self.p
        x = np.array(x, dtype=float, copy=True)
        V = y[..., 0]
        if p.tau_p == 0:
            x[..., 3] = 1.5 * V * x[..., 5]
            x[..., 4] = -1.5 * V * x[..., 6]
        if p.tau_v == 0:
            # f_v linear here: V_o - E + kappa_v (Q* - Q_m) = 0
            x[..., 2] = p.gains.V_o + p.kappa_v * (u[..., 1] - x[..., 4])
        if p.tau_f == 0:
            kappa_f, _ = self._gains(x[..., 2])
            x[..., 1] = p.omega_o + kappa_f * (u[..., 0] - x[..., 3]) / (p.kappa_d + 1.0)
        return x

    def derivatives(self, x, y, u):
        p = self.p
        x = self.resolve(x, y, u)
        delta, omega, E, P_m, Q_m, I_d, I_q = (x[..., i] for i in range(7))
        V, theta = y[..., 0], y[..., 1]
        kappa_f, kappa_v = self._gains(E)
        dx = np.zeros(np.broadcast_shapes(x.shape, y.shape[:-1] + (7,)))
        dx[..., 0] = omega - p.omega_o
        if p.tau_f > 0:
            dx[..., 1] = ((p.kappa_d + 1.0) * (p.omega_o - omega) + kappa_f * (u[..., 0] - P_m)) / p.tau_f
        if p.tau_v > 0:
            dx[..., 2] = (fv_eval(p.strategy, E, p.gains.V_o) + kappa_v * (u[..., 1] - Q_m)) / p.tau_v
        if p.tau_p > 0:
            dx[..., 3] = (1.5 * V * I_d - P_m) / p.tau_p
            dx[..., 4] = (-1.5 * V * I_q - Q_m) / p.tau_p
        dx[..., 5] = (E * np.cos(delta - theta) - V - p.R_f * I_d + p.omega_o * p.L * I_q) / p.L
        dx[..., 6] = (E * np.sin(delta - theta) - p.R_f * I_q - p.omega_o * p.L * I_d) / p.L
        return dx

    @property
    def coupling_reactance(self) -> float:
        return self.p.omega_o * self.p.L

    def terminal_voltage(self, x, v_th, x_th):
        x_c = self.coupling_reactance
        e = x[..., 2] * np.exp(1j * x[..., 0])
        v = v_th + (e - v_th) * (x_th / (x_c + x_th))
        return np.stack([np.abs(v), np.angle(v)], axis=-1)

    def reduce(self, x):
        return np.stack([x[..., 0], x[..., 1], x[..., 2]], axis=-1)

    def flat_start(self, y, u):
        V, theta = float(y[0]), float(y[1])
        P, Q = float(u[0]), float(u[1])
        return np.array([theta, self.omega_o, V, P, Q, P / (1.5 * V), -Q / (1.5 * V)])


Model = Union[SgModel, GfmModel]


# ---------------------------------------------------------------------------
# dataclass-level operations
# ---------------------------------------------------------------------------


def sg_stator_currents(state: SgState, y: TerminalVoltage, p: SgParams) -> tuple[float, float]:
    I_d, I_q = _sg_currents(state.delta, state.E_qp, state.E_dp, y.V, y.theta, p)
    return float(I_d), float(I_q)


def sg_derivatives(
    state: SgState, y: TerminalVoltage, u: Setpoints, p: SgParams, ex: ExciterParams, gov: GovernorParams
) -> SgState:
    dx = SgModel(p, ex, gov).derivatives(state.to_array(), y.to_array(), u.to_array())
    return SgState.from_array(dx)


def gfm_derivatives(
    state: GfmState, y: TerminalVoltage, u: Setpoints, p: GfmParams
) -> tuple[GfmState, dict[str, float]]:
    """Time derivatives of the GFM state plus the values of its algebraic slots.

    Slots whose time constant is zero come back with a zero derivative and
    their closed-form value in the returned dict.
    """
    model = GfmModel(p)
    x = state.to_array()
    xa = model.resolve(x, y.to_array(), u.to_array())
    dx = model.derivatives(x, y.to_array(), u.to_array())
    algebraic = {GFM_STATES[i]: float(xa[i]) for i in np.flatnonzero(model.algebraic)}
    return GfmState.from_array(dx), algebraic


def reduce_state(full: Union[SgState, GfmState]) -> ReducedState:
    if isinstance(full, SgState):
        return ReducedState(full.delta, full.omega, math.hypot(full.E_dp, full.E_qp))
    if isinstance(full, GfmState):
        return ReducedState(full.delta, full.omega, full.E_star)
    raise TypeError(f"cannot reduce {type(full).__name__}")


# ---------------------------------------------------------------------------
# equilibrium
# ---------------------------------------------------------------------------


def _newton(residual, z0, tol=1e-10, max_iter=100):
    z = np.array(z0, dtype=float)
    F = residual(z)
    norm = np.max(np.abs(F))
    for _ in range(max_iter):
        if norm < tol:
            return z, norm
        n = z.size
        J = np.empty((n, n))
        for j in range(n):
            h = 1e-7 * max(1.0, abs(z[j]))
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            J[:, j] = (residual(zp) - residual(zm)) / (2 * h)
        try:
            dz = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            dz = np.linalg.lstsq(J, -F, rcond=None)[0]
        step = 1.0
        while step > 1e-6:
            z_new = z + step * dz
            F_new = residual(z_new)
            n_new = np.max(np.abs(F_new))
            if np.isfinite(n_new) and n_new < norm:
                break
            step *= 0.5
        else:
            break
        z, F, norm = z_new, F_new, n_new
    if norm < tol:
        return z, norm
    raise EquilibriumError("Newton iteration did not converge", float(norm))


def equilibrium(model: Model, u, y=None, thevenin=None, guess=None, tol=1e-10) -> np.ndarray:
    """Steady state of ``model`` under set-points ``u``.

    With ``y`` given the terminal voltage is held fixed; with
    ``thevenin=(v_th, x_th)`` it is solved from the network at every iterate.
    ``guess`` overrides the flat-start initial state.
    """
    u = np.asarray(u, dtype=float)
    if (y is None) == (thevenin is None):
        raise ValueError("pass exactly one of y or thevenin")
    if y is not None:
        y = np.asarray(y, dtype=float)
        y_of = lambda x: y  # noqa: E731
        y_guess = y
    else:
        v_th, x_th = thevenin
        y_of = lambda x: model.terminal_voltage(x, v_th, x_th)  # noqa: E731
        y_guess = np.array([abs(v_th), np.angle(v_th)])
    diff = np.flatnonzero(~model.algebraic)
    x0 = model.flat_start(y_guess, u) if guess is None else np.array(guess, dtype=float)

    def expand(z):
        x = x0.copy()
        x[diff] = z
        return model.resolve(x, y_of(x), u)

    def residual(z):
        x = expand(z)
        return model.derivatives(x, y_of(x), u)[diff]

    z, _ = _newton(residual, x0[diff], tol=tol)
    return expand(z)


def sg_equilibrium(
    y: TerminalVoltage, u: Setpoints, p: SgParams, ex: ExciterParams, gov: GovernorParams, guess=None
) -> SgState:
    model = SgModel(p, ex, gov)
    g = None if guess is None else guess.to_array()
    return SgState.from_array(equilibrium(model, u.to_array(), y=y.to_array(), guess=g))


def gfm_equilibrium(y: TerminalVoltage, u: Setpoints, p: GfmParams, guess=None) -> GfmState:
    model = GfmModel(p)
    g = None if guess is None else guess.to_array()
    return GfmState.from_array(equilibrium(model, u.to_array(), y=y.to_array(), guess=g))


# ---------------------------------------------------------------------------
# parameter files
# ---------------------------------------------------------------------------


def _read_ini(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keep field-name case
    text = Path(path).read_text() if isinstance(path, (str, Path)) else path.read_text()
    cp.read_string(text)
    return cp


def _section(cp, name, cls):
    sec = cp[name]
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(sec) - names
    if unknown:
        raise ValueError(f"[{name}] has unknown keys {sorted(unknown)}")
    return {k: float(v) for k, v in sec.items()}


def default_params_path(name: str):
    return resources.files("sirnn") / "data" / f"{name}.ini"


@dataclass(frozen=True)
class SgComponent:
    model: SgModel
    setpoints: Setpoints
    version: int = 1


@dataclass(frozen=True)
class GfmComponent:
    model: GfmModel
    setpoints: Setpoints
    gains: GfmControlGains = field(default_factory=GfmControlGains)
    version: int = 1


def load_sg(path=None) -> SgComponent:
    cp = _read_ini(path or default_params_path("sg"))
    sg = SgParams(**_section(cp, "SgParams", SgParams))
    ex = ExciterParams(**_section(cp, "ExciterParams", ExciterParams))
    gov = GovernorParams(**_section(cp, "GovernorParams", GovernorParams))
    sp = cp["Setpoints"]
    u = Setpoints(float(sp["P_star"]), float(sp["V_star"]), "sg")
    return SgComponent(SgModel(sg, ex, gov), u, int(cp.get("meta", "version", fallback="1")))


def load_gfm(path=None, strategy: Optional[str] = None) -> GfmComponent:
    cp = _read_ini(path or default_params_path("gfm"))
    gains = GfmControlGains(**_section(cp, "GfmControlGains", GfmControlGains))
    tag = strategy or cp["GfmStrategy"]["tag"]
    L = float(cp["GfmParams"]["L"])
    R_f = float(cp["GfmParams"].get("R_f", "0.0"))
    params = gfm_gains_from_strategy(tag, gains, L=L, R_f=R_f)
    sp = cp["Setpoints"]
    u = Setpoints(float(sp["P_star"]), float(sp["Q_star"]), "gfm")
    return GfmComponent(GfmModel(params), u, gains, int(cp.get("meta", "version", fallback="1")))


def save_sg(path, comp: SgComponent) -> None:
    m = comp.model
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["meta"] = {"version": str(comp.version)}
    for name, obj in (("SgParams", m.sg), ("ExciterParams", m.exciter), ("GovernorParams", m.governor)):
        cp[name] = {k: repr(v) for k, v in dataclasses.asdict(obj).items()}
    cp["Setpoints"] = {"P_star": repr(comp.setpoints.P_star), "V_star": repr(comp.setpoints.V_star)}
    with open(path, "w") as fh:
        cp.write(fh)


def save_gfm(path, comp: GfmComponent) -> None:
    p = comp.model.p
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["meta"] = {"version": str(comp.version)}
    cp["GfmStrategy"] = {"tag": p.strategy}
    cp["GfmControlGains"] = {k: repr(v) for k, v in dataclasses.asdict(p.gains).items()}
    cp["GfmParams"] = {"L": repr(p.L), "R_f": repr(p.R_f)}
    cp["Setpoints"] = {"P_star": repr(comp.setpoints.P_star), "Q_star": repr(comp.setpoints.Q_star)}
    with open(path, "w") as fh:
        cp.write(fh)
