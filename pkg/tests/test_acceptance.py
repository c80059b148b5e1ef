"""Acceptance gate: one test per criterion, each at its stated tolerance.

Every test records a one-line verdict (see ``conftest.py``); the lines are
printed together at the end of the run.
"""

import time

import numpy as np
import pytest

from thermodepth.evaluation import metrics, per_depth_report, run_ablation
from thermodepth.heatsim import (
    DEFAULT_DEPTHS,
    CameraSpec,
    ExcitationSpec,
    GridParams,
    PixelCurve,
    SpecimenSpec,
    generate_dataset,
    simulate_pixel,
    thermal_diffusivity,
)
from thermodepth.model import DepthRegressor, ModelConfig
from thermodepth.reconstruct import PipelineOptions, curve_to_stripe, log_enhance, model_input
from thermodepth.training import (
    OptimizerState,
    SchedulerState,
    TrainConfig,
    adamw_step,
    clip_gradients,
    global_norm,
    scheduler_step,
    split_dataset,
    train,
)

from .fdcheck import check_groups
from .test_evaluation import brute_metrics

DEPTHS_MM = [round(d * 1e3, 6) for d in DEFAULT_DEPTHS]


@pytest.mark.criterion(1, "semi-infinite front-face oracle, 2% on [0.5, 5] s, < 10 s")
def test_c1_physics_oracle(criterion):
    t0 = time.perf_counter()
    spec, exc = SpecimenSpec(), ExcitationSpec()
    temps = simulate_pixel(spec, exc, None, GridParams()).samples
    elapsed = time.perf_counter() - t0
    m = spec.material
    alpha = thermal_diffusivity(m)
    frames = np.arange(round(0.5 * exc.frame_rate), round(5.0 * exc.frame_rate) + 1)
    t = frames / exc.frame_rate
    analytic = 2 * exc.absorbed_flux / m.conductivity * np.sqrt(alpha * t / np.pi)
    rel = np.abs((temps[frames] - exc.ambient_temp) - analytic) / analytic
    ok = rel.max() < 0.02 and elapsed < 10.0
    criterion(ok, f"max rel error {rel.max():.4f} at t={t[rel.argmax()]:.2f} s, runtime {elapsed:.2f} s")
    assert ok, f"max rel error {rel.max():.4f} (limit 0.02), runtime {elapsed:.2f} s"


@pytest.mark.criterion(2, "peak contrast falls and peak time rises with depth, < 60 s")
def test_c2_monotonicity(criterion):
    t0 = time.perf_counter()
    spec, exc, grid = SpecimenSpec(), ExcitationSpec(), GridParams()
    sound = simulate_pixel(spec, exc, None, grid).samples
    peaks, times = [], []
    for d in DEFAULT_DEPTHS:
        c = simulate_pixel(spec, exc, d, grid).samples - sound
        peaks.append(c.max())
        times.append(c.argmax() / exc.frame_rate)
    elapsed = time.perf_counter() - t0
    ok = (all(a > b for a, b in zip(peaks, peaks[1:])) and all(a < b for a, b in zip(times, times[1:]))
          and elapsed < 60.0)
    criterion(ok, f"contrast {peaks[0]:.1f}->{peaks[-1]:.1f} K, time {times[0]:.1f}->{times[-1]:.1f} s, "
                  f"runtime {elapsed:.1f} s")
    assert ok


@pytest.mark.criterion(3, "stripe identity, enhance extremes and order, bit-identical reruns")
def test_c3_reconstruction(criterion):
    rng = np.random.default_rng(0)
    opts = PipelineOptions(input_size=64)
    failures = []
    for k in range(100):
        n = int(rng.integers(2, 200))
        v = rng.integers(0, 256, n).astype(float)
        v[rng.integers(n)] = rng.uniform(0, 255)  # one non-integer level
        img = curve_to_stripe(PixelCurve(v, 5.0)).pixels
        if img.shape != (n, n) or any(not np.array_equal(img[:, j], v) for j in range(n)):
            failures.append(f"curve {k}: column extraction")
        out = log_enhance(curve_to_stripe(PixelCurve(v, 5.0))).pixels
        if v.max() > v.min():
            if out.min() != 0.0 or out.max() != 255.0:
                failures.append(f"curve {k}: extremes {out.min()}, {out.max()}")
            a, b = img.ravel(), out.ravel()
            order = np.argsort(a, kind="stable")
            if np.any(np.diff(b[order]) < 0):
                failures.append(f"curve {k}: ordering")
        if not np.array_equal(out, log_enhance(curve_to_stripe(PixelCurve(v, 5.0))).pixels):
            failures.append(f"curve {k}: rerun")
    raw = PixelCurve(rng.integers(0, 256, 10240).astype(float), 50.0)
    if not np.array_equal(model_input(raw, opts), model_input(raw, opts)):
        failures.append("full pipeline rerun differs")
    criterion(not failures, "100 curves" if not failures else "; ".join(failures[:3]))
    assert not failures, failures


@pytest.mark.criterion(4, "analytic vs central-difference gradients < 1e-4 per group, < 60 s")
def test_c4_gradients(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x, y = rng.uniform(-1, 1, (2, 16, 16)), np.array([0.4, 1.2])
    worst = {}
    # every component of a narrowed copy, then sampled components at full width
    narrow = DepthRegressor(ModelConfig(input_size=16, channels=(4, 8, 8), head_widths=(8, 6)))
    for lam in (0.0, 0.5, 1.0):
        p = narrow.init_params(3, labels=y)
        _, g, masks = narrow.gradients(p, x, y, lam, rng=np.random.default_rng(1))
        for k, e in check_groups(narrow, p, x, y, lam, masks, g).items():
            worst[k] = max(worst.get(k, 0.0), e)
    full = DepthRegressor(ModelConfig(input_size=16))
    for lam in (0.0, 0.5, 1.0):
        p = full.init_params(3, labels=y)
        _, g, masks = full.gradients(p, x, y, lam, rng=np.random.default_rng(1))
        for k, e in check_groups(full, p, x, y, lam, masks, g, per_group=8).items():
            worst["full:" + k] = max(worst.get("full:" + k, 0.0), e)
    elapsed = time.perf_counter() - t0
    key = max(worst, key=worst.get)
    ok = worst[key] < 1e-4 and elapsed < 60.0
    criterion(ok, f"{len(worst)} groups, worst {worst[key]:.2e} ({key}), runtime {elapsed:.1f} s")
    assert ok, worst


@pytest.mark.criterion(5, "scheduler examples, zero-gradient AdamW, clip bound")
def test_c5_optimizer_traces(criterion):
    def run(losses):
        s, lrs = SchedulerState(1e-3), []
        for v in losses:
            s = scheduler_step(s, v)
            lrs.append(s.lr)
        return lrs

    checks = {
        "improving": run([1.0, 0.9, 0.8]) == [1e-3] * 3,
        "five stagnant": run([1.0] * 6)[-1] == 5e-4 and run([1.0] * 6)[-2] == 1e-3,
        "counter reset": run([1.0, 0.99] + [0.99] * 5)[-2:] == [1e-3, 5e-4],
    }
    p = {"w": np.array([1.0, -2.0, 3.5])}
    new, _ = adamw_step(p, {"w": np.zeros(3)}, OptimizerState.zeros_like(p), lr=1e-3, wd=1e-4)
    checks["adamw zero grad"] = bool(np.allclose(new["w"], p["w"] * (1 - 1e-3 * 1e-4), rtol=0, atol=1e-15))
    rng = np.random.default_rng(0)
    norms = [global_norm(clip_gradients({"a": rng.normal(0, s, 50), "b": rng.normal(0, s, (3, 4))}, 1.0))
             for s in np.logspace(-3, 3, 200)]
    checks["clip"] = max(norms) <= 1.0 + 1e-12
    bad = [k for k, v in checks.items() if not v]
    criterion(not bad, f"max clipped norm {max(norms):.15f}" if not bad else f"failed: {bad}")
    assert not bad


@pytest.mark.criterion(6, "metrics vs brute force 1e-12 on 1000 vectors; weighted MAE 1e-9")
def test_c6_metric_oracle(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        y = rng.uniform(0.2, 1.6, n)
        p = y + rng.normal(0, 0.05, n)
        got, ref = metrics(p, y), brute_metrics(p, y)
        for k in ref:
            worst = max(worst, abs(getattr(got, k) - ref[k]) / max(abs(ref[k]), 1e-300))
    y = np.repeat(DEPTHS_MM, rng.integers(1, 30, 9))
    p = y + rng.normal(0, 0.03, y.size)
    rep = per_depth_report(p, y, DEPTHS_MM)
    gap = abs(sum(r.mae * r.count for r in rep.per_depth) / y.size - rep.overall.mae)
    ok = worst <= 1e-12 and gap <= 1e-9
    criterion(ok, f"worst rel {worst:.1e}, weighted-MAE gap {gap:.1e}")
    assert ok


@pytest.mark.slow
@pytest.mark.criterion(7, "9x45 end-to-end: test R2 >= 0.95, MAE <= 30 um, <= 15 min")
def test_c7_end_to_end(criterion):
    t0 = time.perf_counter()
    ds = generate_dataset(pixels_per_depth=45, master_seed=0)
    opts = PipelineOptions(input_size=64)
    x = np.stack([model_input(c, opts) for c in ds.curves])
    y = ds.labels * 1e3
    cfg = TrainConfig(epochs=100, seed=0)
    tr, va, te = split_dataset(y, cfg.split, cfg.seed)
    mcfg = ModelConfig(input_size=64)
    res = train(cfg, x[tr], y[tr], x[va], y[va], mcfg)
    pred = DepthRegressor(mcfg).predict(res.params, x[te])
    m = metrics(pred, y[te])
    elapsed = time.perf_counter() - t0
    ok = m.r2 >= 0.95 and m.mae <= 30.0 and elapsed <= 900.0
    criterion(ok, f"R2 {m.r2:.4f}, MAE {m.mae:.1f} um on {m.count} test curves, runtime {elapsed:.0f} s")
    assert ok


@pytest.mark.slow
@pytest.mark.criterion(8, "ablation: four arms, arm 4 MAE <= arm 1 in >= 4 of 5 seeds")
def test_c8_ablation(criterion):
    wins, detail = 0, []
    for seed in range(5):
        ds = generate_dataset(pixels_per_depth=45, master_seed=seed)
        grid = run_ablation(ds.curves, ds.labels * 1e3, TrainConfig(epochs=100, seed=seed),
                            PipelineOptions(input_size=64), ModelConfig(input_size=64), DEPTHS_MM)
        assert list(grid.rows) == ["1", "2", "3", "4"]
        mae = {a: grid.rows[a]["report"].overall.mae for a in grid.rows}
        wins += mae["4"] <= mae["1"]
        detail.append(f"s{seed} " + "/".join(f"{mae[a]:.1f}" for a in "1234"))
    ok = wins >= 4
    criterion(ok, f"{wins}/5 seeds; MAE um arms 1/2/3/4: " + ", ".join(detail))
    assert ok, detail


@pytest.mark.criterion(9, "n=1773 split 1241/265/267, stratified, deterministic")
def test_c9_split(criterion):
    labels = np.repeat(DEPTHS_MM, 197)
    tr, va, te = split_dataset(labels, seed=11)
    again = split_dataset(labels, seed=11)
    sizes = (len(tr), len(va), len(te))
    ok = (sizes == (1241, 265, 267)
          and all(set(labels[s]) == set(DEPTHS_MM) for s in (tr, va, te))
          and len(set(tr) | set(va) | set(te)) == 1773
          and all(np.array_equal(a, b) for a, b in zip((tr, va, te), again)))
    criterion(ok, f"sizes {sizes}")
    assert ok
