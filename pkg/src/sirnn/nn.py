"""Recurrent surrogates for component dynamics.

Two families share one flat parameter vector layout:

* ``sirnn``: four stacked recurrent stages, stage ``i`` reads window entry
  ``i`` (oldest first) and emits a stage output ``k_i``; an affine combiner
  maps ``[k_0, .., k_3]`` to the next state.
* ``rnn`` / ``rnn4``: an Elman network unrolled over the newest 1 or all 4
  window entries with an affine read-out.

All forward passes are built from :mod:`sirnn.autodiff` ops so the same code
yields predictions, parameter gradients and input gradients.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .dataset import D_X, WINDOW, NormStats, SampleSet, fit_normalizer

D_Y = 2
D_U = 2
D_IN = D_X + D_Y + D_U
P_STAR_COL = D_X + D_Y  # channel index of P_star inside a window entry
OMEGA = 1
KINDS = ("sirnn", "rnn", "rnn4")
ACTIVATIONS = ("tanh", "relu")
DIVERGENCE_RANGES = 10.0


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(kind: str, hidden: int = 50) -> dict:
    H = hidden
    if kind == "sirnn":
        shapes = {}
        for i in range(WINDOW):
            shapes.update({
                f"W_xh_{i}": (H, D_X), f"W_yh_{i}": (H, D_Y), f"W_uh_{i}": (H, D_U),
                f"W_hh_{i}": (H, H), f"b_1_{i}": (H,), f"W_h_{i}": (D_X, H), f"b_{i}": (D_X,),
            })
        shapes["W_l"] = (D_X, WINDOW * D_X)
        shapes["b_l"] = (D_X,)
        return shapes
    if kind in ("rnn", "rnn4"):
        return {"W_xh": (H, D_X), "W_yh": (H, D_Y), "W_uh": (H, D_U), "W_hh": (H, H),
                "b_1": (H,), "W_h": (D_X, H), "b_h": (D_X,)}
    raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")


def depth_of(kind: str) -> int:
    return 1 if kind == "rnn" else WINDOW


# weight matrices whose fan-in also bounds the bias that is added next to them
_FAN_IN_OF_BIAS = {"b_1": ("W_xh", "W_yh", "W_uh", "W_hh"), "b": ("W_h",), "b_h": ("W_h",), "b_l": ("W_l",)}


class Params:
    """Named views into one flat float vector ``theta``."""

    def __init__(self, kind: str, hidden: int, activation: str, theta: Optional[np.ndarray] = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.kind = kind
        self.hidden = hidden
        self.activation = activation
        self.shapes = param_shapes(kind, hidden)
        self.size = sum(int(np.prod(s)) for s in self.shapes.values())
        if theta is None:
            theta = np.zeros(self.size)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"theta has {theta.size} entries, layout needs {self.size}")
        self.theta = theta
        self.views = {}
        off = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            self.views[name] = self.theta[off:off + n].reshape(shape)
            off += n

    def __getitem__(self, name) -> np.ndarray:
        return self.views[name]

    def __setitem__(self, name, value):
        self.views[name][...] = value

    def copy(self) -> "Params":
        return Params(self.kind, self.hidden, self.activation, self.theta.copy())

    def with_theta(self, theta) -> "Params":
        return Params(self.kind, self.hidden, self.activation, np.array(theta, dtype=float))

    def offsets(self) -> dict:
        out, off = {}, 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            out[name] = (off, off + n)
            off += n
        return out


def init_params(kind: str = "sirnn", hidden: int = 50, activation: str = "tanh", seed: int = 0) -> Params:
    """Uniform init in +-1/sqrt(fan_in), each matrix using its own column count."""
    p = Params(kind, hidden, activation)
    rng = np.random.default_rng(seed)
    for name, shape in p.shapes.items():
        if len(shape) == 2:
            fan_in = shape[1]
        else:
            stem, suffix = (name, "")
            if kind == "sirnn" and name != "b_l":
                stem, _, stage = name.rpartition("_")
                suffix = f"_{stage}"
            fan_in = sum(p.shapes[m + suffix][1] for m in _FAN_IN_OF_BIAS[stem])
        bound = 1.0 / np.sqrt(fan_in)
        p[name] = rng.uniform(-bound, bound, size=shape)
    return p


# ---------------------------------------------------------------------------
# forward passes (tape ops)
# ---------------------------------------------------------------------------


def _act(name):
    return ad.tanh if name == "tanh" else ad.relu


def _act_slope(name, out, pre):
    """Derivative of the activation as a tape value, for tangent propagation."""
    if name == "tanh":
        return 1.0 - ad.square(out)
    return ad.const((pre.value > 0).astype(float))


def _leaves(p: Params, requires_grad: bool):
    make = ad.leaf if requires_grad else ad.const
    return {name: make(v) for name, v in p.views.items()}


def _input_weights(w, suffix=""):
    return ad.concat([w["W_xh" + suffix], w["W_yh" + suffix], w["W_uh" + suffix]], axis=1)


def _entry(X, i):
    return X[:, i, :]


def sirnn_forward_tape(p: Params, w: dict, X, dX=None):
    """SI-RNN on a (B, 4, 7) window batch. Returns (x_hat, stages, dx_hat).

    ``dX`` is an optional tangent direction of the input; its image under the
    network Jacobian is carried alongside the forward pass as tape values so it
    can itself be differentiated.
    """
    act = _act(p.activation)
    h = dh = None
    ks, dks, stages = [], [], {"h": [], "k": []}
    for i in range(WINDOW):
        s = f"_{i}"
        W_in = _input_weights(w, s)
        pre = ad.linear(_entry(X, i), W_in, w["b_1" + s])
        if h is not None:
            pre = pre + ad.linear(h, w["W_hh" + s])
        h_new = act(pre)
        if dX is not None:
            dpre = ad.linear(_entry(dX, i), W_in)
            if dh is not None:
                dpre = dpre + ad.linear(dh, w["W_hh" + s])
            dh = _act_slope(p.activation, h_new, pre) * dpre
        h = h_new
        kpre = ad.linear(h, w["W_h" + s], w["b" + s])
        k = act(kpre)
        if dX is not None:
            dks.append(_act_slope(p.activation, k, kpre) * ad.linear(dh, w["W_h" + s]))
        ks.append(k)
        stages["h"].append(h)
        stages["k"].append(k)
    out = ad.linear(ad.concat(ks, axis=1), w["W_l"], w["b_l"])
    dout = ad.linear(ad.concat(dks, axis=1), w["W_l"]) if dX is not None else None
    return out, stages, dout


def elman_forward_tape(p: Params, w: dict, X, dX=None, h_prev=None):
    """Elman network over the newest ``depth`` window entries. Returns (x_hat, h_last, dx_hat)."""
    act = _act(p.activation)
    W_in = _input_weights(w)
    h = None if h_prev is None else ad.const(h_prev)
    dh = None
    for i in range(WINDOW - depth_of(p.kind), WINDOW):
        pre = ad.linear(_entry(X, i), W_in, w["b_1"])
        if h is not None:
            pre = pre + ad.linear(h, w["W_hh"])
        h_new = act(pre)
        if dX is not None:
            dpre = ad.linear(_entry(dX, i), W_in)
            if dh is not None:
                dpre = dpre + ad.linear(dh, w["W_hh"])
            dh = _act_slope(p.activation, h_new, pre) * dpre
        h = h_new
    out = ad.linear(h, w["W_h"], w["b_h"])
    dout = ad.linear(dh, w["W_h"]) if dX is not None else None
    return out, h, dout


def forward_tape(p: Params, w: dict, X, dX=None):
    if p.kind == "sirnn":
        out, _, dout = sirnn_forward_tape(p, w, X, dX)
    else:
        out, _, dout = elman_forward_tape(p, w, X, dX)
    return out, dout


def _batch(window):
    window = np.asarray(window, dtype=float)
    return window[None] if window.ndim == 2 else window


def sirnn_forward(p: Params, window):
    """Plain-array SI-RNN evaluation. Returns (x_hat, {"h": [h_1..h_4], "k": [k_0..k_3]})."""
    X = _batch(window)
    out, stages, _ = sirnn_forward_tape(p, _leaves(p, False), ad.const(X))
    rec = {key: [v.value for v in vals] for key, vals in stages.items()}
    if np.ndim(window) == 2:
        return out.value[0], {key: [v[0] for v in vals] for key, vals in rec.items()}
    return out.value, rec


def elman_forward(p: Params, window, h_prev=None):
    """Plain-array Elman evaluation. Returns (x_hat, h_new)."""
    X = _batch(window)
    hp = None if h_prev is None else np.broadcast_to(h_prev, (X.shape[0], p.hidden))
    out, h, _ = elman_forward_tape(p, _leaves(p, False), ad.const(X), h_prev=hp)
    if np.ndim(window) == 2:
        return out.value[0], h.value[0]
    return out.value, h.value


def predict_normalized(p: Params, Xn) -> np.ndarray:
    out, _ = forward_tape(p, _leaves(p, False), ad.const(_batch(Xn)))
    return out.value


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------


def loss_mse(preds, targets) -> float:
    """Mean over samples of the squared Euclidean error."""
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.shape != targets.shape or len(preds) == 0:
        raise ValueError("predictions and targets must have equal non-zero length")
    err = (preds - targets).reshape(len(preds), -1)
    return float(np.mean(np.sum(err * err, axis=1)))


def sensitivity_direction(norm_std: np.ndarray, n: int) -> np.ndarray:
    """Input tangent that moves P_star by one physical unit in all four window entries."""
    d = np.zeros((n, WINDOW, D_IN))
    d[:, :, P_STAR_COL] = 1.0 / norm_std[P_STAR_COL]
    return d


def _objective(p: Params, w: dict, Xn, Tn, lam=0.0, sens=None, norm=None):
    """Tape value of the mean squared error plus the optional sensitivity mismatch term."""
    B = len(Tn)
    need_tangent = lam > 0 and sens is not None and np.any(np.isfinite(sens))
    dX = ad.const(sensitivity_direction(norm.std, B)) if need_tangent else None
    out, dout = forward_tape(p, w, ad.const(Xn), dX)
    loss = ad.sum_all(ad.square(out - ad.const(Tn))) * (1.0 / B)
    if need_tangent:
        mask = np.isfinite(sens)
        J_hat = dout[:, OMEGA] * norm.std[OMEGA]
        target = np.where(mask, sens, 0.0)
        diff = (J_hat - ad.const(target)) * ad.const(mask.astype(float))
        loss = loss + ad.sum_all(ad.square(diff)) * (lam / mask.sum())
    return loss


def loss_and_grad(p: Params, Xn, Tn, lam: float = 0.0, sens=None, norm: Optional[NormStats] = None):
    """Objective value and its gradient with respect to the flat parameter vector."""
    w = _leaves(p, True)
    loss = _objective(p, w, Xn, Tn, lam, sens, norm)
    ad.backward(loss)
    grad = np.concatenate([
        (np.zeros(p[name].size) if w[name].grad is None else w[name].grad.ravel())
        for name in p.shapes
    ])
    return float(loss.value), grad


def objective_value(p: Params, Xn, Tn, lam: float = 0.0, sens=None, norm: Optional[NormStats] = None) -> float:
    return float(_objective(p, _leaves(p, False), Xn, Tn, lam, sens, norm).value)


def backward(p: Params, Xn, Tn):
    """Gradient of the mean squared error wrt theta and wrt the input windows."""
    w = _leaves(p, True)
    X = ad.leaf(Xn)
    out, _ = forward_tape(p, w, X)
    loss = ad.sum_all(ad.square(out - ad.const(Tn))) * (1.0 / len(Tn))
    ad.backward(loss)
    grad = np.concatenate([
        (np.zeros(p[name].size) if w[name].grad is None else w[name].grad.ravel())
        for name in p.shapes
    ])
    return grad, X.grad


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 500
    tol: float = 1e-7
    patience: int = 5

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size >= 1 and max_epochs >= 0 required")


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(state: AdamWState, theta, grads, cfg: AdamWConfig):
    theta = np.asarray(theta, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if theta.shape != grads.shape or state.m.shape != theta.shape:
        raise ValueError("theta, gradient and moment shapes differ")
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grads * grads
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    new = theta - cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps)) - cfg.lr * cfg.weight_decay * theta
    return AdamWState(m, v, t), new


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class Surrogate:
    params: Params
    norm: NormStats

    @property
    def kind(self):
        return self.params.kind

    def predict(self, windows) -> np.ndarray:
        """One-step prediction in physical units for (B, 4, 7) or (4, 7) windows."""
        single = np.ndim(windows) == 2
        out = self.norm.invert_x(predict_normalized(self.params, self.norm.apply(_batch(windows))))
        return out[0] if single else out


@dataclass
class TrainReport:
    kind: str
    train_loss: list  # entry 0 is the loss before any update
    val_loss: list
    best_epoch: int
    epochs_run: int
    stopped: str
    wall_time: float
    checkpoint_id: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self, with_time: bool = False) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return d


def train(kind: str, data: SampleSet, cfg: AdamWConfig = AdamWConfig(), seed: int = 0, *,
          hidden: int = 50, activation: str = "tanh", val: Optional[SampleSet] = None,
          norm: Optional[NormStats] = None, params: Optional[Params] = None,
          sens=None, lam: float = 0.0, log=None):
    """Mini-batch AdamW on the one-step objective.

    Returns ``(Surrogate, TrainReport)``. The returned parameters are those of
    the epoch with the lowest training loss, the untrained draw included.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    t0 = time.perf_counter()
    seeds = np.random.SeedSequence(seed).spawn(2)
    if params is None:
        params = init_params(kind, hidden, activation, seed=int(seeds[0].generate_state(1)[0]))
    params = params.copy()
    norm = fit_normalizer(data) if norm is None else norm
    Xn, Tn = norm.apply(data.windows), norm.apply_x(data.targets)
    sens = None if sens is None else np.asarray(sens, dtype=float)
    if val is not None and len(val):
        Xv, Tv = norm.apply(val.windows), norm.apply_x(val.targets)
    else:
        Xv = Tv = None

    def full_loss(theta):
        return objective_value(params.with_theta(theta), Xn, Tn, lam, sens, norm)

    def val_loss(theta):
        return objective_value(params.with_theta(theta), Xv, Tv) if Xv is not None else float("nan")

    rng = np.random.default_rng(seeds[1])
    theta = params.theta.copy()
    state = AdamWState.zeros(theta.size)
    train_hist = [full_loss(theta)]
    val_hist = [val_loss(theta)]
    best_theta, best_loss, best_epoch = theta.copy(), train_hist[0], 0
    stall, stopped, epoch = 0, "max_epochs", 0
    N, bs = len(Tn), cfg.batch_size
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(N)
        for b, lo in enumerate(range(0, N, bs)):
            idx = order[lo:lo + bs]
            loss, grad = loss_and_grad(params.with_theta(theta), Xn[idx], Tn[idx], lam,
                                       None if sens is None else sens[idx], norm)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDiverged(epoch, b)
            state, theta = adamw_step(state, theta, grad, cfg)
        cur = full_loss(theta)
        if not np.isfinite(cur):
            raise TrainingDiverged(epoch, -1)
        train_hist.append(cur)
        val_hist.append(val_loss(theta))
        if cur < best_loss:
            best_theta, best_loss, best_epoch = theta.copy(), cur, epoch
        if log is not None:
            log(epoch, cur, val_hist[-1])
        stall = stall + 1 if train_hist[-2] - cur < cfg.tol else 0
        if stall >= cfg.patience:
            stopped = "converged"
            break
    params = params.with_theta(best_theta)
    report = TrainReport(kind, train_hist, val_hist, best_epoch, epoch, stopped, time.perf_counter() - t0)
    report.checkpoint_id = theta_digest(params.theta)
    return Surrogate(params, norm), report


def theta_digest(theta) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


@dataclass
class Rollout:
    x: np.ndarray  # (B, horizon, 3) physical units
    diverged: np.ndarray  # (B,) bool
    diverged_at: np.ndarray  # (B,) first offending step or -1


def divergence_bounds(norm: NormStats):
    span = np.maximum(norm.x_max - norm.x_min, 1e-12)
    return norm.x_min - DIVERGENCE_RANGES * span, norm.x_max + DIVERGENCE_RANGES * span


def rollout(model: Surrogate, init_window, exo, horizon: int, truth_x=None) -> Rollout:
    """Iterate one-step predictions, feeding each back as the newest state.

    ``init_window`` is (B, 4, 7) or (4, 7); ``exo`` holds y and u per sample
    index starting at the window's first entry, shape (B, L, 4) with
    L >= horizon + 3. ``truth_x`` (B, L, 3), when given, overwrites every
    prediction with ground truth before it is fed back.
    """
    single = np.ndim(init_window) == 2
    win = _batch(init_window).copy()
    exo = np.asarray(exo, dtype=float)
    if single:
        exo = exo[None]
        truth_x = None if truth_x is None else np.asarray(truth_x)[None]
    B = win.shape[0]
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if exo.shape[1] < horizon + WINDOW - 1:
        raise ValueError(f"exogenous sequence covers {exo.shape[1]} samples, need {horizon + WINDOW - 1}")
    win[:, :, D_X:] = exo[:, :WINDOW]
    lo, hi = divergence_bounds(model.norm)
    xs = np.zeros((B, horizon, D_X))
    diverged_at = np.full(B, -1)
    for n in range(horizon):
        x_next = model.predict(win)
        bad = ~np.all(np.isfinite(x_next) & (x_next >= lo) & (x_next <= hi), axis=1)
        diverged_at = np.where((diverged_at < 0) & bad, n, diverged_at)
        xs[:, n] = x_next
        if n + 1 == horizon:
            break
        fed = x_next if truth_x is None else truth_x[:, WINDOW + n]
        fed = np.where(diverged_at[:, None] >= 0, np.nan_to_num(fed, posinf=0.0, neginf=0.0), fed)
        nxt = np.concatenate([fed, exo[:, WINDOW + n]], axis=1)
        win = np.concatenate([win[:, 1:], nxt[:, None]], axis=1)
    out = Rollout(xs, diverged_at >= 0, diverged_at)
    if single:
        return Rollout(xs[0], out.diverged[0], out.diverged_at[0])
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Surrogate, config_hash: str = "", dataset_hash: str = "", report=None):
    p = model.params
    doc = {
        "format": "sirnn-checkpoint",
        "version": 1,
        "kind": p.kind,
        "hidden": p.hidden,
        "activation": p.activation,
        "dims": {"x": D_X, "y": D_Y, "u": D_U, "window": WINDOW},
        "shapes": {k: list(v) for k, v in p.shapes.items()},
        "values": {k: p[k].ravel().tolist() for k in p.shapes},
        "normalizer": model.norm.to_dict(),
        "config_hash": config_hash,
        "dataset_hash": dataset_hash,
        "checkpoint_id": theta_digest(p.theta),
    }
    if report is not None:
        doc["report"] = report.to_dict() if isinstance(report, TrainReport) else report
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")
    return doc["checkpoint_id"]


def load_checkpoint(path):
    """Returns ``(Surrogate, document)``; any layout mismatch raises CheckpointError."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "sirnn-checkpoint":
        raise CheckpointError(f"{path} is not a checkpoint")
    if doc["dims"] != {"x": D_X, "y": D_Y, "u": D_U, "window": WINDOW}:
        raise CheckpointError(f"checkpoint dims {doc['dims']} do not match this build")
    try:
        expected = param_shapes(doc["kind"], doc["hidden"])
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    stored = {k: tuple(v) for k, v in doc["shapes"].items()}
    if stored != expected:
        raise CheckpointError("checkpoint shapes do not match the model layout")
    chunks = []
    for name, shape in expected.items():
        vals = np.asarray(doc["values"][name], dtype=float)
        if vals.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {vals.size} values for shape {shape}")
        chunks.append(vals)
    params = Params(doc["kind"], doc["hidden"], doc["activation"], np.concatenate(chunks))
    return Surrogate(params, NormStats.from_dict(doc["normalizer"])), doc
