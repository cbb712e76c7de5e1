"""Error metrics, one-step versus rollout protocols, and side-by-side model tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import D_X, WINDOW, SampleSet, samples_from
from .nn import OMEGA, Surrogate, rollout
from .sensitivity import model_sensitivity_onestep, rollout_sensitivity

STATE_NAMES = ("delta", "omega", "E")
ROW_ORDER = ("omega", "delta", "E", "Sensitivity")


class ZeroReferenceError(ValueError):
    pass


class SplitMismatch(ValueError):
    pass


def nmse(x, x_hat) -> float:
    """||x - x_hat|| / ||x|| over the flattened inputs."""
    x = np.asarray(x, dtype=float).ravel()
    x_hat = np.asarray(x_hat, dtype=float).ravel()
    if x.shape != x_hat.shape:
        raise ValueError("reference and estimate differ in length")
    ref = np.linalg.norm(x)
    if ref == 0:
        raise ZeroReferenceError("reference trajectory has zero norm")
    return float(np.linalg.norm(x - x_hat) / ref)


def per_state(truth, pred) -> dict:
    return {name: nmse(truth[:, c], pred[:, c]) for c, name in enumerate(STATE_NAMES)}


def validation_error(model: Surrogate, samples: SampleSet) -> dict:
    """One-step predictions from ground-truth windows, NMSE per state in physical units."""
    return per_state(samples.targets, model.predict(samples.windows))


def check_angle_span(trajs) -> None:
    for tr in trajs:
        span = np.max(np.abs(tr.x[:, 0] - tr.x[0, 0]))
        if not span < math.pi:
            raise ValueError(f"scenario {tr.meta.get('id')}: rotor angle moves {span:.3f} rad from its start")


@dataclass
class PredictionResult:
    nmse: dict
    diverged: list
    predictions: dict = field(default_factory=dict)  # scenario id -> (H, 3)


def _exo(tr):
    return tr.channels[:, D_X:]


def prediction_error(model: Surrogate, trajs: Sequence, horizon: Optional[int] = None,
                     teacher_forcing: bool = False) -> PredictionResult:
    """Roll every trajectory out from its first window and pool the NMSE per state.

    Scenarios whose rollout leaves the divergence band are listed and left
    out of the pooled metric.
    """
    check_angle_span(trajs)
    truths, preds, diverged, kept = [], [], [], {}
    groups: dict = {}
    for tr in trajs:
        groups.setdefault(len(tr), []).append(tr)
    for T, group in sorted(groups.items()):
        H = T - WINDOW if horizon is None else min(horizon, T - WINDOW)
        ch = np.stack([tr.channels for tr in group])
        res = rollout(model, ch[:, :WINDOW], ch[:, :, D_X:], H,
                      truth_x=ch[:, :, :D_X] if teacher_forcing else None)
        for b, tr in enumerate(group):
            sid = tr.meta.get("id", b)
            if res.diverged[b]:
                diverged.append(sid)
                continue
            truths.append(ch[b, WINDOW:WINDOW + H, :D_X])
            preds.append(res.x[b])
            kept[sid] = res.x[b]
    if not truths:
        return PredictionResult({name: float("nan") for name in STATE_NAMES}, sorted(diverged), kept)
    return PredictionResult(per_state(np.concatenate(truths), np.concatenate(preds)), sorted(diverged), kept)


def step_index_of(tr) -> int:
    """Sample index of the set-point step inside a trajectory (0 when unknown or before the start)."""
    ts = tr.meta.get("step_time")
    if ts is None:
        return 0
    return int(np.searchsorted(tr.t, ts - 1e-9))


def sensitivity_error(model: Surrogate, trajs: Sequence, sim_series: dict) -> dict:
    """Pooled NMSE of surrogate sensitivities against simulator J.

    ``val_nmse`` uses one-step derivatives from ground-truth windows,
    ``pred_nmse`` the closed-loop rollout sensitivity.
    """
    ref_one, est_one, ref_roll, est_roll = [], [], [], []
    for tr in trajs:
        sid = tr.meta.get("id")
        J = sim_series[sid].J
        s = samples_from([tr])
        ref_one.append(J[s.index])
        est_one.append(model_sensitivity_onestep(model, s.windows))
        ch = tr.channels
        H = len(ch) - WINDOW
        rs = rollout_sensitivity(model, ch[:WINDOW], ch[:, D_X:], H, step_index_of(tr))
        ref_roll.append(J[WINDOW:])
        est_roll.append(rs.J)
    return {"val_nmse": nmse(np.concatenate(ref_one), np.concatenate(est_one)),
            "pred_nmse": nmse(np.concatenate(ref_roll), np.concatenate(est_roll))}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _num(v):
    return None if v is None or not np.isfinite(v) else float(v)


@dataclass
class EvalReport:
    model: str
    split_hash: str
    states: dict  # name -> {"val_nmse": .., "pred_nmse": ..}
    diverged: list
    scenario_count: int
    config_hash: str = ""
    sensitivity: Optional[dict] = None

    def to_dict(self) -> dict:
        d = {
            "model": self.model,
            "split_hash": self.split_hash,
            "config_hash": self.config_hash,
            "scenario_count": self.scenario_count,
            "states": {k: {m: _num(v[m]) for m in ("val_nmse", "pred_nmse")} for k, v in self.states.items()},
            "diverged": list(self.diverged),
        }
        if self.sensitivity is not None:
            d["sensitivity"] = {m: _num(self.sensitivity[m]) for m in ("val_nmse", "pred_nmse")}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        nan = float("nan")
        states = {k: {m: nan if v[m] is None else v[m] for m in v} for k, v in d["states"].items()}
        sens = d.get("sensitivity")
        if sens is not None:
            sens = {m: nan if v is None else v for m, v in sens.items()}
        return cls(d["model"], d["split_hash"], states, list(d["diverged"]), d["scenario_count"],
                   d.get("config_hash", ""), sens)


def evaluate(model: Surrogate, name: str, test_trajs: Sequence, split_hash: str, config_hash: str = "",
             sim_series: Optional[dict] = None) -> EvalReport:
    val = validation_error(model, samples_from(test_trajs))
    pred = prediction_error(model, test_trajs)
    states = {k: {"val_nmse": val[k], "pred_nmse": pred.nmse[k]} for k in STATE_NAMES}
    sens = sensitivity_error(model, test_trajs, sim_series) if sim_series else None
    return EvalReport(name, split_hash, states, pred.diverged, len(test_trajs), config_hash, sens)


@dataclass
class ComparisonTable:
    models: list
    rows: list  # (row name, {model: (val, pred)})
    flags: dict  # (row, column) -> winning model or None

    def to_dict(self) -> dict:
        return {
            "models": self.models,
            "rows": [
                {"state": row,
                 "values": {m: {"val_nmse": _num(v[0]), "pred_nmse": _num(v[1])} for m, v in vals.items()},
                 "best": {col: self.flags[(row, col)] for col in ("val_nmse", "pred_nmse")}}
                for row, vals in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state"] + [f"{m}_{col}" for m in self.models for col in ("val", "pred")]
                   + ["best_val", "best_pred"])
        for row, vals in self.rows:
            cells = []
            for m in self.models:
                cells += ["" if _num(v) is None else f"{v:.6g}" for v in vals[m]]
            w.writerow([row] + cells + [self.flags[(row, "val_nmse")] or "", self.flags[(row, "pred_nmse")] or ""])
        return buf.getvalue()


def _winner(values: dict):
    finite = {m: v for m, v in values.items() if v is not None and np.isfinite(v)}
    if not finite:
        return None
    best = min(finite.values())
    leaders = [m for m, v in finite.items() if v == best]
    return leaders[0] if len(leaders) == 1 else None


def compare_models(reports: Sequence[EvalReport]) -> ComparisonTable:
    """Per-state table with the lowest value per row and column flagged; ties flag nobody."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    hashes = {r.split_hash for r in reports}
    if len(hashes) != 1:
        raise SplitMismatch(f"reports come from different splits: {sorted(hashes)}")
    configs = {r.config_hash for r in reports if r.config_hash}
    if len(configs) > 1:
        raise SplitMismatch(f"reports come from different configurations: {sorted(configs)}")
    names = [r.model for r in reports]
    if len(set(names)) != len(names):
        names = [f"{r.model}#{i}" for i, r in enumerate(reports)]
    rows, flags = [], {}
    for row in ROW_ORDER:
        if row == "Sensitivity":
            if any(r.sensitivity is None for r in reports):
                continue
            vals = {n: (r.sensitivity["val_nmse"], r.sensitivity["pred_nmse"]) for n, r in zip(names, reports)}
        else:
            vals = {n: (r.states[row]["val_nmse"], r.states[row]["pred_nmse"]) for n, r in zip(names, reports)}
        rows.append((row, vals))
        for i, col in enumerate(("val_nmse", "pred_nmse")):
            flags[(row, col)] = _winner({n: v[i] for n, v in vals.items()})
    return ComparisonTable(names, rows, flags)
