"""Run configuration: one INI file per experiment, with named presets shipped in the package."""
from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from .nn import AdamWConfig
from .sim import StepConfig, SweepSpec

OUT_ENV = "SIRNN_OUT"  # the only setting read from the environment


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"
    sensitivity_dir: str = "sensitivity"


@dataclass(frozen=True)
class RunConfig:
    name: str
    component: str  # "sg" or "gfm"
    strategy: Optional[str]  # GFM primary control, ignored for "sg"
    sweep: SweepSpec
    method: str = "RK4"
    models: tuple = ("sirnn", "rnn4")
    hidden: int = 50
    activation: str = "tanh"
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    lambda_sens: float = 0.0
    post_fault_only: bool = False
    split_fraction: float = 0.9
    sens_eps: float = 1e-3
    seed: int = 0
    count: Optional[int] = None
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        if self.component not in ("sg", "gfm"):
            raise ValueError("component must be 'sg' or 'gfm'")
        if not self.models:
            raise ValueError("at least one model kind is required")

    @property
    def step(self) -> StepConfig:
        return StepConfig(1.0 / self.sweep.sim_rate, self.method)

    def canonical(self) -> dict:
        """Everything that influences results; output locations are left out."""
        d = asdict(self)
        d.pop("paths")
        d.pop("name")
        return d

    def digest(self) -> str:
        payload = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _sites(text):
    out = []
    for v in text.replace(",", " ").split():
        out.append(None if v.lower() == "none" else float(v))
    return tuple(out)


def _bool(text):
    return text.strip().lower() in ("1", "true", "yes", "on")


def parse_config(text: str, name: str = "custom") -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    run = cp["run"] if cp.has_section("run") else {}
    sw = cp["sweep"] if cp.has_section("sweep") else {}
    tr = cp["train"] if cp.has_section("train") else {}
    pth = cp["paths"] if cp.has_section("paths") else {}
    base = SweepSpec()
    sweep = SweepSpec(
        n_locations=int(sw.get("n_locations", base.n_locations)),
        durations=tuple(int(v) for v in _floats(sw["durations"])) if "durations" in sw else base.durations,
        fault_sites=_sites(sw["fault_sites"]) if "fault_sites" in sw else base.fault_sites,
        setpoint_steps=_floats(sw["setpoint_steps"]) if "setpoint_steps" in sw else base.setpoint_steps,
        t_start=float(sw.get("t_start", base.t_start)),
        duration=float(sw.get("duration", base.duration)),
        sim_rate=float(sw.get("sim_rate", base.sim_rate)),
        output_rate=float(sw.get("output_rate", base.output_rate)),
        smoothing_window=int(sw.get("smoothing_window", base.smoothing_window)),
    )
    a = AdamWConfig()
    adamw = AdamWConfig(
        lr=float(tr.get("lr", a.lr)), beta1=float(tr.get("beta1", a.beta1)), beta2=float(tr.get("beta2", a.beta2)),
        eps=float(tr.get("eps", a.eps)), weight_decay=float(tr.get("weight_decay", a.weight_decay)),
        batch_size=int(tr.get("batch_size", a.batch_size)), max_epochs=int(tr.get("max_epochs", a.max_epochs)),
        tol=float(tr.get("tol", a.tol)), patience=int(tr.get("patience", a.patience)),
    )
    count = run.get("count")
    strategy = run.get("strategy")
    return RunConfig(
        name=run.get("name", name),
        component=run.get("component", "gfm"),
        strategy=None if strategy in (None, "", "none") else strategy,
        sweep=sweep,
        method=run.get("method", "RK4"),
        models=tuple(m.strip() for m in tr.get("models", "sirnn, rnn4").split(",") if m.strip()),
        hidden=int(tr.get("hidden", 50)),
        activation=tr.get("activation", "tanh"),
        adamw=adamw,
        lambda_sens=float(tr.get("lambda_sens", 0.0)),
        post_fault_only=_bool(run.get("post_fault_only", "false")),
        split_fraction=float(run.get("split_fraction", 0.9)),
        sens_eps=float(run.get("sens_eps", 1e-3)),
        seed=int(run.get("seed", 0)),
        count=None if count in (None, "", "none") else int(count),
        paths=Paths(**{k: pth[k] for k in pth}),
    )


def preset_names() -> list:
    root = resources.files("sirnn") / "presets"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def load_preset(name: str) -> RunConfig:
    path = resources.files("sirnn") / "presets" / f"{name}.ini"
    if not path.is_file():
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return parse_config(path.read_text(), name)


def load_config(path=None, preset: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    if path is not None and preset is not None:
        raise ValueError("give either a config file or a preset, not both")
    if path is not None:
        cfg = parse_config(Path(path).read_text(), Path(path).stem)
    else:
        cfg = load_preset(preset or "gfm_desk")
    return cfg if seed is None else cfg.with_seed(seed)


def output_root(cli_out: Optional[str], cfg: RunConfig) -> Path:
    if cli_out:
        return Path(cli_out)
    return Path(os.environ.get(OUT_ENV, "runs")) / cfg.name
