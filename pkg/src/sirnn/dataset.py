"""Supervised windows X_t -> x_{t+1}, normalization, scenario-level splits and manifests."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

WINDOW = 4
N_CHANNELS = 7  # delta, omega, E, V, theta, P_star, second set-point
D_X = 3


class TrajectoryTooShort(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    window: np.ndarray  # (4, 7), oldest -> newest
    target: np.ndarray  # (3,)


@dataclass
class SampleSet:
    windows: np.ndarray  # (N, 4, 7)
    targets: np.ndarray  # (N, 3)
    scenario: np.ndarray  # (N,) scenario id of every sample
    index: np.ndarray  # (N,) trajectory index of the target

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i) -> Sample:
        return Sample(self.windows[i], self.targets[i])

    def subset(self, mask) -> "SampleSet":
        return SampleSet(self.windows[mask], self.targets[mask], self.scenario[mask], self.index[mask])

    @classmethod
    def concat(cls, sets: Sequence["SampleSet"]) -> "SampleSet":
        if not sets:
            return cls(np.zeros((0, WINDOW, N_CHANNELS)), np.zeros((0, D_X)), np.zeros(0, int), np.zeros(0, int))
        return cls(
            np.concatenate([s.windows for s in sets]),
            np.concatenate([s.targets for s in sets]),
            np.concatenate([s.scenario for s in sets]),
            np.concatenate([s.index for s in sets]),
        )


def make_samples(traj, scenario_id: Optional[int] = None) -> SampleSet:
    """Cut a trajectory into the T - 4 windows of four consecutive samples and their successor state."""
    ch = traj.channels
    T = len(ch)
    if T < WINDOW + 1:
        raise TrajectoryTooShort(f"need at least {WINDOW + 1} samples, got {T}")
    windows = np.lib.stride_tricks.sliding_window_view(ch[:-1], WINDOW, axis=0)  # (T-4, 7, 4)
    windows = np.ascontiguousarray(windows.transpose(0, 2, 1))
    targets = ch[WINDOW:, :D_X].copy()
    sid = traj.meta.get("id", -1) if scenario_id is None else scenario_id
    return SampleSet(windows, targets, np.full(T - WINDOW, sid, dtype=int), np.arange(WINDOW, T))


def samples_from(trajs: Iterable) -> SampleSet:
    return SampleSet.concat([make_samples(tr) for tr in trajs])


def post_fault_start(traj) -> int:
    """Index of the first sample at or after fault clearance (0 without a fault)."""
    fault = traj.meta.get("fault")
    if not fault or not fault.get("cycles"):
        return 0
    f_nom = traj.meta.get("f_nominal", 50.0)
    t_clear = fault["t_start"] + fault["cycles"] / f_nom
    return int(np.searchsorted(traj.t, t_clear - 1e-9))


def crop(traj, start: int):
    """The trajectory from ``start`` on; time stamps are kept as simulated."""
    if start == 0:
        return traj
    return type(traj)(traj.t[start:], traj.x[start:], traj.y[start:], traj.u[start:], dict(traj.meta))


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray  # (7,)
    std: np.ndarray  # (7,)
    x_min: np.ndarray  # (3,)
    x_max: np.ndarray  # (3,)

    def apply(self, windows):
        return (windows - self.mean) / self.std

    def invert(self, windows):
        return windows * self.std + self.mean

    def apply_x(self, x):
        return (x - self.mean[:D_X]) / self.std[:D_X]

    def invert_x(self, x):
        return x * self.std[:D_X] + self.mean[:D_X]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.mean, self.std, self.x_min, self.x_max):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("mean", "std", "x_min", "x_max")}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(*(np.array(d[k], dtype=float) for k in ("mean", "std", "x_min", "x_max")))


def fit_normalizer(samples: SampleSet) -> NormStats:
    if len(samples) < 2:
        raise ValueError("need at least two samples to fit a normalizer")
    rows = samples.windows.reshape(-1, samples.windows.shape[-1])
    mean = rows.mean(axis=0)
    # summation roundoff would leave a constant channel slightly off zero
    mean = np.where(rows.max(axis=0) == rows.min(axis=0), rows[0], mean)
    std = rows.std(axis=0)
    # degenerate (constant) channels keep unit scale
    std = np.where(std <= 1e-12 * np.maximum(1.0, np.abs(mean)), 1.0, std)
    xs = np.concatenate([rows[:, :D_X], samples.targets])
    return NormStats(mean, std, xs.min(axis=0), xs.max(axis=0))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    test: tuple
    fraction: float = 0.9

    def digest(self) -> str:
        payload = json.dumps({"train": list(self.train), "test": list(self.test), "fraction": self.fraction})
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def n_test_for(total: int, fraction: float = 0.9) -> int:
    # half-up rounding: 45 scenarios -> 5 test
    return int(math.floor((1.0 - fraction) * total + 0.5 + 1e-9))


def split_scenarios(ids, fraction: float = 0.9, seed: int = 0) -> DatasetSplit:
    ids = sorted(int(i) for i in ids)
    if len(ids) < 2:
        raise ValueError("need at least two scenarios to split")
    if len(set(ids)) != len(ids):
        raise ValueError("scenario ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = min(max(n_test_for(len(ids), fraction), 1), len(ids) - 1)
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return DatasetSplit(tuple(train), tuple(test), fraction)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    scenario_files: dict  # id -> csv file name
    split: DatasetSplit
    norm: NormStats
    sim_hash: str
    config_hash: str
    dataset_hash: str = field(default="")

    def __post_init__(self):
        if not self.dataset_hash:
            payload = json.dumps(
                {"sim": self.sim_hash, "split": self.split.digest(), "norm": self.norm.digest(),
                 "config": self.config_hash}, sort_keys=True)
            self.dataset_hash = hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "format": "sirnn-dataset",
            "version": 1,
            "dataset_hash": self.dataset_hash,
            "config_hash": self.config_hash,
            "sim_hash": self.sim_hash,
            "scenarios": {str(k): v for k, v in sorted(self.scenario_files.items())},
            "split": {"train": list(self.split.train), "test": list(self.split.test),
                      "fraction": self.split.fraction},
            "normalizer": self.norm.to_dict(),
            "normalizer_hash": self.norm.digest(),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        if d.get("format") != "sirnn-dataset":
            raise ValueError(f"{path} is not a dataset manifest")
        split = DatasetSplit(tuple(d["split"]["train"]), tuple(d["split"]["test"]), d["split"]["fraction"])
        m = cls({int(k): v for k, v in d["scenarios"].items()}, split, NormStats.from_dict(d["normalizer"]),
                d["sim_hash"], d["config_hash"], d["dataset_hash"])
        return m

    def verify(self) -> bool:
        """Recompute the dataset hash from the stored fields."""
        fresh = DatasetManifest(self.scenario_files, self.split, self.norm, self.sim_hash, self.config_hash)
        return fresh.dataset_hash == self.dataset_hash
