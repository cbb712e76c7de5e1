"""End-to-end acceptance checks, one test per criterion.

The conftest hook prints a PASS/FAIL line per criterion in the terminal
summary. Several of these run the full desk-scale pipeline and take minutes.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from sirnn import dataset as ds
from sirnn import nn, pipeline, sim
from sirnn import sensitivity as sens
from sirnn.config import load_preset
from sirnn.gradcheck import gradcheck
from sirnn.sim import NetworkModel, Trajectory


def announce(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# 1. integrator correctness
# ---------------------------------------------------------------------------


def _global_error(step, n):
    dt, x, worst = 1.0 / n, np.array(1.0), 0.0
    f = lambda x_, y, u: -x_
    for k in range(1, n + 1):
        x = step(f, x, None, None, dt)
        worst = max(worst, abs(float(x) - math.exp(-k * dt)))
    return worst


def test_criterion_1_integrator_correctness():
    t0 = time.perf_counter()
    order_rk4 = math.log2(_global_error(sim.step_rk4, 40) / _global_error(sim.step_rk4, 80))
    order_euler = math.log2(_global_error(sim.step_euler, 40) / _global_error(sim.step_euler, 80))
    taylor = sum((-0.1) ** n / math.factorial(n) for n in range(5))
    one = float(sim.step_rk4(lambda x, y, u: -x, np.array(1.0), None, None, 0.1))
    elapsed = time.perf_counter() - t0
    ok = 3.8 <= order_rk4 <= 4.2 and 0.9 <= order_euler <= 1.1 and abs(one - taylor) < 1e-14 and elapsed < 1.0
    announce(1, ok, f"RK4 order {order_rk4:.3f}, Euler order {order_euler:.3f}, "
                    f"|step - taylor| {abs(one - taylor):.1e}, {elapsed:.2f}s")
    assert 3.8 <= order_rk4 <= 4.2
    assert 0.9 <= order_euler <= 1.1
    assert abs(one - taylor) < 1e-14
    assert elapsed < 1.0


# ---------------------------------------------------------------------------
# 2. stability region on the Droop preset
# ---------------------------------------------------------------------------


def test_criterion_2_stability_region():
    t0 = time.perf_counter()
    cfg = load_preset("gfm_droop")
    (sc,) = pipeline.build_scenarios(cfg)
    model, net, horizon = sc.model, NetworkModel(), cfg.sweep.duration
    dt_euler = sim.stability_threshold(model, net, sc, "Euler", horizon, 1e-4, 2e-2, iters=10)
    dt = 1.25 * dt_euler
    chans, blown = sim.integrate(model, net, [sc], dt, int(math.ceil(horizon / dt)), "Euler", record=True)
    euler_peak = np.nanmax(np.abs(chans[:, 0, :3]))
    rk4, rk4_blown = sim.integrate(model, net, [sc], dt, int(math.ceil(horizon / dt)), "RK4", record=True)
    rk4_peak = np.max(np.abs(rk4[:, 0, :3]))
    elapsed = time.perf_counter() - t0
    euler_diverges = np.isfinite(blown[0]) and (euler_peak > sim.DIVERGENCE_LIMIT or not np.isfinite(euler_peak))
    rk4_ok = not np.isfinite(rk4_blown[0]) and rk4_peak < sim.DIVERGENCE_LIMIT
    ok = euler_diverges and rk4_ok and elapsed < 30
    announce(2, ok, f"Euler limit {dt_euler:.3g}s; at dt={dt:.3g}s Euler blows up at t={blown[0]:.3f}s, "
                    f"RK4 peak |x| {rk4_peak:.1f}; {elapsed:.1f}s")
    assert euler_diverges
    assert rk4_ok
    assert elapsed < 30


# ---------------------------------------------------------------------------
# 3. gradient fidelity
# ---------------------------------------------------------------------------


def test_criterion_3_gradient_fidelity():
    t0 = time.perf_counter()
    res = gradcheck("sirnn", "tanh", hidden=50, n_seeds=10, n_coords=100, seed=0, tol=1e-5)
    elapsed = time.perf_counter() - t0
    ok = res.passed and res.n_checked == 1000 and elapsed < 60
    announce(3, ok, f"max rel err {res.max_rel_err:.2e} over {res.n_checked} coordinates; {elapsed:.1f}s")
    assert res.n_checked == 1000
    assert res.max_rel_err < 1e-5
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 4. network sensitivity versus finite differences
# ---------------------------------------------------------------------------


def _model(seed):
    rng = np.random.default_rng(seed)
    norm = ds.NormStats(rng.normal(size=7), rng.uniform(0.05, 3.0, 7), np.full(3, -1e3), np.full(3, 1e3))
    return nn.Surrogate(nn.init_params("sirnn", 50, seed=seed), norm), rng


def test_criterion_4_sensitivity_correctness():
    t0 = time.perf_counter()
    worst_one, worst_roll = 0.0, 0.0
    h = 1e-6
    for seed in range(10):
        m, rng = _model(seed)
        W = m.norm.invert(rng.normal(size=(8, 4, 7)))
        up, dn = W.copy(), W.copy()
        up[..., nn.P_STAR_COL] += h
        dn[..., nn.P_STAR_COL] -= h
        fd = (m.predict(up)[:, nn.OMEGA] - m.predict(dn)[:, nn.OMEGA]) / (2 * h)
        an = sens.model_sensitivity_onestep(m, W)
        worst_one = max(worst_one, np.max(np.abs(an - fd)) / np.max(np.abs(fd)))
        if seed < 3:
            ch = m.norm.invert(rng.normal(size=(60, 7)))
            step = 10
            rs = sens.rollout_sensitivity(m, ch[:4], ch[:, 3:], 50, step)
            rfd = sens.fd_rollout_sensitivity(m, ch[:4], ch[:, 3:], 50, step, eps=1e-5)
            worst_roll = max(worst_roll, np.max(np.abs(rs.J - rfd)) / np.max(np.abs(rfd)))
    elapsed = time.perf_counter() - t0
    ok = worst_one < 1e-5 and worst_roll < 1e-4 and elapsed < 60
    announce(4, ok, f"one-step rel err {worst_one:.1e}, rollout rel err {worst_roll:.1e}; {elapsed:.1f}s")
    assert worst_one < 1e-5
    assert worst_roll < 1e-4
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 5, 6, 8. desk-scale pipeline
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    cfg = load_preset("gfm_desk")
    roots, times = [], []
    for k in range(2):
        root = tmp_path_factory.mktemp(f"desk{k}")
        t0 = time.perf_counter()
        pipeline.run_all(cfg, root)
        times.append(time.perf_counter() - t0)
        roots.append(root)
    return cfg, roots, times


def _states(root, kind):
    return json.loads((Path(root) / "reports" / f"{kind}.json").read_text())["states"]


def test_criterion_5_learning_comparison(desk_runs):
    cfg, (root, _), (elapsed, _) = desk_runs
    split = json.loads((root / "data" / "dataset.json").read_text())["split"]
    epochs = {k: json.loads((root / "checkpoints" / f"{k}_report.json").read_text())["epochs_run"]
              for k in ("sirnn", "rnn4")}
    si, r4 = _states(root, "sirnn"), _states(root, "rnn4")
    better = {c: si[c]["pred_nmse"] < r4[c]["pred_nmse"] for c in si}
    ok = (all(better.values()) and si["omega"]["pred_nmse"] < 0.2 and si["E"]["pred_nmse"] < 0.35
          and elapsed < 900 and (len(split["train"]), len(split["test"])) == (40, 5))
    detail = ", ".join(f"{c}: {si[c]['pred_nmse']:.2e} vs {r4[c]['pred_nmse']:.2e}" for c in si)
    announce(5, ok, f"SI-RNN vs RNN4 prediction NMSE {detail}; run {elapsed:.0f}s")
    assert (len(split["train"]), len(split["test"])) == (40, 5)
    assert max(epochs.values()) <= 200
    assert all(better.values()), better
    assert si["omega"]["pred_nmse"] < 0.2
    assert si["E"]["pred_nmse"] < 0.35
    assert elapsed < 900


def test_criterion_6_validation_below_prediction(desk_runs):
    cfg, (root, _), _ = desk_runs
    rows, ok = [], True
    for kind in cfg.models:
        for ch, v in _states(root, kind).items():
            val, pred = v["val_nmse"], v["pred_nmse"]
            slack = 1.05 if (val < 0.02 and pred < 0.02) else 1.0
            good = val <= slack * pred
            ok &= good
            rows.append(f"{kind}/{ch} {val:.2e}<={pred:.2e}{'' if good else ' (violated)'}")
    announce(6, ok, "; ".join(rows))
    assert ok, rows


def test_criterion_8_pipeline_determinism(desk_runs):
    cfg, (a, b), _ = desk_runs
    files = ["data/simulation.json", "data/dataset.json"]
    files += [f"checkpoints/{k}_report.json" for k in cfg.models]
    files += [f"checkpoints/{k}.json" for k in cfg.models]
    files += [f"reports/{k}.json" for k in cfg.models] + ["reports/comparison.json", "reports/comparison.csv"]
    files += sorted(str(p.relative_to(a)) for p in (a / "data").glob("*.csv"))
    differ = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    announce(8, not differ, f"{len(files)} artifacts compared, {len(differ)} differ")
    assert not differ, differ


# ---------------------------------------------------------------------------
# 7. simulator sensitivity sanity
# ---------------------------------------------------------------------------


def test_criterion_7_sensitivity_sanity():
    cfg = load_preset("gfm_desk")
    sc = max(pipeline.build_scenarios(cfg), key=lambda s: (s.fault.cycles, s.id))
    net = NetworkModel()
    a = sens.fd_sensitivity_sim(sc, net, cfg.step, eps=1e-3)
    b = sens.fd_sensitivity_sim(sc, net, cfg.step, eps=5e-4)
    t_step = sens.step_time_of(sc)
    pre = a.J[a.t < t_step - 1e-9]
    final = abs(a.J[-1])
    halving = np.max(np.abs(a.J - b.J)) / np.max(np.abs(a.J))
    ok = len(pre) > 0 and np.all(pre == 0.0) and final < 1e-3 and halving < 0.01
    announce(7, ok, f"{len(pre)} pre-step samples all zero: {bool(np.all(pre == 0.0))}, |J(T)| {final:.1e}, "
                    f"eps-halving change {halving:.1e}")
    assert len(pre) > 0 and np.all(pre == 0.0)
    assert final < 1e-3
    assert halving < 0.01


# ---------------------------------------------------------------------------
# 9. data pipeline counts
# ---------------------------------------------------------------------------


def test_criterion_9_data_pipeline_counts(tmp_path):
    cfg = load_preset("smib_sg")
    pipeline.cmd_simulate(cfg, tmp_path)
    summary = pipeline.cmd_dataset(cfg, tmp_path)
    manifest, trajs = pipeline.load_dataset(cfg, tmp_path)
    lengths = [len(tr) for tr in trajs.values()]
    total = ds.samples_from(trajs.values())
    split = (len(manifest.split.train), len(manifest.split.test))
    # value-exact CSV round trip at 17 significant digits
    exact = True
    for sid in list(trajs)[:20]:
        tr = trajs[sid]
        again = Trajectory.from_csv(tmp_path / "data" / manifest.scenario_files[sid]["file"], tr.meta)
        exact &= np.array_equal(again.channels, tr.channels) and np.array_equal(again.t, tr.t)
        tr.to_csv(tmp_path / "copy.csv")
        exact &= np.array_equal(Trajectory.from_csv(tmp_path / "copy.csv", tr.meta).channels, tr.channels)
    expected = sum(n - ds.WINDOW for n in lengths)
    ok = (len(trajs) == 400 and split == (360, 40) and len(total) == expected
          and summary["train_samples"] + summary["test_samples"] == expected and exact)
    announce(9, ok, f"{len(trajs)} scenarios, split {split[0]}/{split[1]}, {len(total)} samples "
                    f"(expected {expected}), CSV exact: {exact}")
    assert len(trajs) == 400 and set(lengths) == {1401}
    assert split == (360, 40)
    assert len(total) == expected == 400 * 1397
    assert summary["train_samples"] + summary["test_samples"] == expected
    assert exact
