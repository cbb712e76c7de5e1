"""Pipeline stages: simulate -> dataset -> train -> sensitivity -> eval.

Every stage reads the artifacts of the previous one, checks the hash chain
against the active configuration and writes its own artifacts plus a summary
dict. Artifacts carry no timestamps so reruns are byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from . import dataset as ds
from . import evaluation as ev
from . import nn
from .config import RunConfig
from .gradcheck import gradcheck
from .models import load_gfm, load_sg
from .sensitivity import SensitivitySeries, fd_sensitivity_many, rollout_sensitivity, sensitivity_targets
from .sim import NetworkModel, SimulationDiverged, Trajectory, generate_scenarios, scenario_filename, simulate_many

SIM_MANIFEST = "simulation.json"
DATASET_MANIFEST = "dataset.json"


class HashMismatch(RuntimeError):
    pass


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(path: Path) -> dict:
    if not path.is_file():
        raise FileNotFoundError(f"missing input {path}; run the previous stage first")
    return json.loads(path.read_text())


def _expect(found: str, wanted: str, what: str) -> None:
    if found != wanted:
        raise HashMismatch(f"hash mismatch: {what} is {found!r}, expected {wanted!r}")


def component(cfg: RunConfig):
    if cfg.component == "sg":
        comp = load_sg()
    else:
        comp = load_gfm(strategy=cfg.strategy)
    return comp.model, comp.setpoints


def build_scenarios(cfg: RunConfig) -> list:
    model, u = component(cfg)
    return generate_scenarios(cfg.sweep, model, u, cfg.count)


class Layout:
    def __init__(self, cfg: RunConfig, root):
        self.root = Path(root)
        self.data = self.root / cfg.paths.data_dir
        self.ckpt = self.root / cfg.paths.checkpoint_dir
        self.reports = self.root / cfg.paths.report_dir
        self.sens = self.root / cfg.paths.sensitivity_dir


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, root) -> dict:
    lay = Layout(cfg, root)
    scenarios = build_scenarios(cfg)
    results = simulate_many(scenarios, NetworkModel(), cfg.step)
    lay.data.mkdir(parents=True, exist_ok=True)
    entries, diverged = {}, {}
    h = hashlib.sha256(cfg.digest().encode())
    for sc, res in zip(sorted(scenarios, key=lambda s: s.id), results):
        if isinstance(res, SimulationDiverged):
            diverged[str(sc.id)] = res.t
            continue
        name = scenario_filename(sc.id)
        res.to_csv(lay.data / name)
        h.update((lay.data / name).read_bytes())
        entries[str(sc.id)] = {"file": name, "meta": res.meta}
    manifest = {
        "format": "sirnn-simulation",
        "version": 1,
        "config_hash": cfg.digest(),
        "sim_hash": h.hexdigest()[:16],
        "scenarios": entries,
        "diverged": diverged,
    }
    _dump(lay.data / SIM_MANIFEST, manifest)
    return {"scenarios": len(entries), "diverged": sorted(int(k) for k in diverged),
            "sim_hash": manifest["sim_hash"], "config_hash": manifest["config_hash"]}


def load_simulation(cfg: RunConfig, root) -> tuple:
    lay = Layout(cfg, root)
    sm = _load(lay.data / SIM_MANIFEST)
    _expect(sm["config_hash"], cfg.digest(), "simulation config hash")
    trajs = {int(k): Trajectory.from_csv(lay.data / e["file"], e["meta"]) for k, e in sm["scenarios"].items()}
    return sm, trajs


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def cmd_dataset(cfg: RunConfig, root) -> dict:
    lay = Layout(cfg, root)
    sm, trajs = load_simulation(cfg, root)
    starts = {sid: (ds.post_fault_start(tr) if cfg.post_fault_only else 0) for sid, tr in trajs.items()}
    split = ds.split_scenarios(sorted(trajs), cfg.split_fraction, cfg.seed)
    train = ds.samples_from(ds.crop(trajs[i], starts[i]) for i in split.train)
    norm = ds.fit_normalizer(train)
    files = {sid: {"file": sm["scenarios"][str(sid)]["file"], "start": starts[sid]} for sid in sorted(trajs)}
    manifest = ds.DatasetManifest(files, split, norm, sm["sim_hash"], cfg.digest())
    manifest.write(lay.data / DATASET_MANIFEST)
    test = ds.samples_from(ds.crop(trajs[i], starts[i]) for i in split.test)
    return {"train_scenarios": len(split.train), "test_scenarios": len(split.test),
            "train_samples": len(train), "test_samples": len(test), "dataset_hash": manifest.dataset_hash}


def load_dataset(cfg: RunConfig, root) -> tuple:
    """Verified dataset manifest and the (cropped) trajectories by id."""
    lay = Layout(cfg, root)
    sm, trajs = load_simulation(cfg, root)
    manifest = ds.DatasetManifest.read(lay.data / DATASET_MANIFEST)
    if not manifest.verify():
        raise HashMismatch("hash mismatch: dataset manifest does not reproduce its own dataset hash")
    _expect(manifest.config_hash, cfg.digest(), "dataset config hash")
    _expect(manifest.sim_hash, sm["sim_hash"], "dataset simulation hash")
    cropped = {sid: ds.crop(trajs[sid], e["start"]) for sid, e in manifest.scenario_files.items()}
    return manifest, cropped


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _sim_series(cfg: RunConfig, ids, manifest) -> dict:
    by_id = {sc.id: sc for sc in build_scenarios(cfg)}
    series = fd_sensitivity_many([by_id[i] for i in ids], NetworkModel(), cfg.step, cfg.sens_eps)
    out = {}
    for sid, s in zip(ids, series):
        k = manifest.scenario_files[sid]["start"]
        out[sid] = SensitivitySeries(s.t[k:], s.J[k:], s.source)
    return out


def cmd_train(cfg: RunConfig, root) -> dict:
    lay = Layout(cfg, root)
    manifest, trajs = load_dataset(cfg, root)
    train = ds.samples_from(trajs[i] for i in manifest.split.train)
    test = ds.samples_from(trajs[i] for i in manifest.split.test)
    sens = None
    if cfg.lambda_sens > 0:
        sens = sensitivity_targets(train, _sim_series(cfg, list(manifest.split.train), manifest))
    lay.ckpt.mkdir(parents=True, exist_ok=True)
    summary = {}
    for kind in cfg.models:
        t0 = time.perf_counter()
        model, report = nn.train(kind, train, cfg.adamw, cfg.seed, hidden=cfg.hidden, activation=cfg.activation,
                                 val=test, norm=manifest.norm, sens=sens, lam=cfg.lambda_sens)
        nn.save_checkpoint(lay.ckpt / f"{kind}.json", model, cfg.digest(), manifest.dataset_hash, report)
        _dump(lay.ckpt / f"{kind}_report.json", report.to_dict())
        summary[kind] = {"epochs": report.epochs_run, "best_epoch": report.best_epoch,
                         "train_loss": report.train_loss[report.best_epoch], "stopped": report.stopped,
                         "checkpoint_id": report.checkpoint_id, "seconds": round(time.perf_counter() - t0, 1)}
    return summary


def load_model(cfg: RunConfig, root, kind: str, manifest) -> nn.Surrogate:
    model, doc = nn.load_checkpoint(Layout(cfg, root).ckpt / f"{kind}.json")
    _expect(doc["dataset_hash"], manifest.dataset_hash, f"{kind} checkpoint dataset hash")
    _expect(doc["config_hash"], cfg.digest(), f"{kind} checkpoint config hash")
    return model


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------


def cmd_sensitivity(cfg: RunConfig, root) -> dict:
    lay = Layout(cfg, root)
    manifest, trajs = load_dataset(cfg, root)
    ids = list(manifest.split.test)
    series = _sim_series(cfg, ids, manifest)
    lay.sens.mkdir(parents=True, exist_ok=True)
    for sid, s in series.items():
        s.to_csv(lay.sens / f"sim_{sid}.csv")
    summary = {"scenarios": ids, "final_abs_J": {str(k): abs(float(s.J[-1])) for k, s in series.items()}}
    for kind in cfg.models:
        model = load_model(cfg, root, kind, manifest)
        overflow = []
        for sid in ids:
            tr = trajs[sid]
            ch = tr.channels
            rs = rollout_sensitivity(model, ch[:ds.WINDOW], ch[:, ds.D_X:], len(ch) - ds.WINDOW,
                                     ev.step_index_of(tr))
            SensitivitySeries(tr.t[ds.WINDOW:], rs.J, "ModelAnalytic").to_csv(lay.sens / f"{kind}_{sid}.csv")
            if rs.overflow:
                overflow.append(sid)
        summary[kind] = {"overflow": overflow}
    return summary


def load_sim_series(cfg: RunConfig, root, ids):
    d = Layout(cfg, root).sens
    paths = {sid: d / f"sim_{sid}.csv" for sid in ids}
    if not all(p.is_file() for p in paths.values()):
        return None
    return {sid: SensitivitySeries.from_csv(p) for sid, p in paths.items()}


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(cfg: RunConfig, root) -> dict:
    lay = Layout(cfg, root)
    manifest, trajs = load_dataset(cfg, root)
    test = [trajs[i] for i in manifest.split.test]
    series = load_sim_series(cfg, root, manifest.split.test)
    reports = []
    for kind in cfg.models:
        model = load_model(cfg, root, kind, manifest)
        rep = ev.evaluate(model, kind, test, manifest.split.digest(), cfg.digest(), series)
        (lay.reports).mkdir(parents=True, exist_ok=True)
        (lay.reports / f"{kind}.json").write_text(rep.to_json())
        reports.append(rep)
    summary = {r.model: r.to_dict()["states"] for r in reports}
    if len(reports) >= 2:
        table = ev.compare_models(reports)
        (lay.reports / "comparison.json").write_text(table.to_json())
        (lay.reports / "comparison.csv").write_text(table.to_csv())
        summary["best_pred"] = {row: table.flags[(row, "pred_nmse")] for row, _ in table.rows}
    return summary


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(cfg: RunConfig, root) -> dict:
    lay = Layout(cfg, root)
    out = {}
    for kind in cfg.models:
        res = gradcheck(kind, cfg.activation, cfg.hidden, seed=cfg.seed)
        out[kind] = {"max_rel_err": res.max_rel_err, "checked": res.n_checked,
                     "status": "pass" if res.passed else "fail"}
    _dump(lay.reports / "gradcheck.json", out)
    out["passed"] = all(v["status"] == "pass" for v in out.values())
    return out


STAGES = {
    "simulate": cmd_simulate,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "sensitivity": cmd_sensitivity,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}
PIPELINE = ("simulate", "dataset", "train", "sensitivity", "eval")


def run_all(cfg: RunConfig, root) -> dict:
    return {name: STAGES[name](cfg, root) for name in PIPELINE}

