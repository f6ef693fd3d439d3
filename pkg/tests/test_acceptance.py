"""Acceptance criteria, one test each, at their stated tolerances.

Every test records PASS/FAIL through the ``criterion`` fixture; the lines are
repeated in the pytest terminal summary.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from mvface.classifiers import FAMILIES, TrainConfig, init_mlp_params, mlp_loss_and_grads
from mvface.cli import main
from mvface.datagen import SubjectSpec, ViewSpec, derive_seed, generate_dataset, render
from mvface.ensemble import RULES, fuse
from mvface.evaluation import EvalCase, metric_report, noise_sweep, run_case
from mvface.imagecore import GrayImage, box_sum, integral_image, mean_filter
from mvface.surf import extract_features
from mvface.template import SplitSpec
from oracles import box_sum_loops, fuse_brute, integral_loops, mean_filter_loops, metrics_loops

N_SEEDS = 5


def test_criterion_1_oracle_equivalence(criterion):
    c = criterion(1, "oracle equivalence")
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {"integral": 0.0, "box_sum": 0.0, "mean_filter": 0.0, "metrics": 0.0}
    fusion_mismatches = 0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(2, 14, size=2))
        a = rng.random((h, w))
        ii = integral_image(GrayImage(a))
        worst["integral"] = max(worst["integral"], float(np.max(np.abs(ii.table - integral_loops(a)))))
        x0, x1 = sorted(int(v) for v in rng.integers(0, w, size=2))
        y0, y1 = sorted(int(v) for v in rng.integers(0, h, size=2))
        worst["box_sum"] = max(worst["box_sum"], abs(box_sum(ii, x0, y0, x1, y1) - box_sum_loops(a, x0, y0, x1, y1)))
        k = int(rng.choice([1, 3, 5]))
        got = mean_filter(GrayImage(a), k).data
        worst["mean_filter"] = max(worst["mean_filter"], float(np.max(np.abs(got - mean_filter_loops(a, k)))))
        G = rng.random((h, w))
        r, o = metric_report(a + 0.01, G), metrics_loops(a + 0.01, G)
        pairs = [(r.mse, o["mse"]), (r.rmse, o["rmse"]), (r.mae, o["mae"]), (r.pfe_percent, o["pfe"]),
                 (r.snr_db, o["snr"]), (r.psnr_db, o["psnr"])]
        worst["metrics"] = max(worst["metrics"], max(abs(u - v) / max(abs(v), 1.0) for u, v in pairs))
        S = rng.random((5, 4))
        S /= S.sum(axis=1, keepdims=True)
        if rng.random() < 0.3:
            S = np.round(S, 1)
        wts = rng.random(5)
        wts /= wts.sum()
        labels = ["A", "B", "C", "D"]
        for rule in RULES:
            fusion_mismatches += fuse(S, rule, wts, labels).predicted_class != fuse_brute(S.tolist(), rule.value, wts.tolist(), labels)
    elapsed = time.perf_counter() - start
    tol = {"integral": 1e-9, "box_sum": 1e-9, "mean_filter": 1e-12, "metrics": 1e-9}
    ok = all(worst[k] <= tol[k] for k in tol) and fusion_mismatches == 0 and elapsed < 30
    detail = ", ".join(f"{k} {worst[k]:.1e}" for k in worst) + f", fusion mismatches {fusion_mismatches}/400, {elapsed:.1f}s"
    c.check(ok, detail)


def test_criterion_2_gradient_check(criterion):
    c = criterion(2, "MLP gradient check")
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    Z = rng.normal(size=(6, 4))
    Y = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    params = init_mlp_params(4, 5, 3, rng)
    params[1] = rng.normal(size=5) * 0.1
    params[3] = rng.normal(size=3) * 0.1
    _, grads = mlp_loss_and_grads(params, Z, Y)
    eps, worst = 1e-5, 0.0
    for p, g in zip(params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = mlp_loss_and_grads(params, Z, Y)[0]
            p[idx] = old - eps
            down = mlp_loss_and_grads(params, Z, Y)[0]
            p[idx] = old
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-8))
    elapsed = time.perf_counter() - start
    c.check(worst < 1e-4 and elapsed < 10, f"max relative error {worst:.2e}, {elapsed:.2f}s")


def test_criterion_3_metric_identities(criterion):
    c = criterion(3, "metric identities")
    rng = np.random.default_rng(3)
    worst_sq = worst_psnr = 0.0
    mae_ok = True
    for _ in range(50):
        h, w = (int(v) for v in rng.integers(4, 64, size=2))
        I, G = rng.random((h, w)), rng.random((h, w))
        r = metric_report(I, G)
        worst_sq = max(worst_sq, abs(r.rmse**2 - r.mse))
        worst_psnr = max(worst_psnr, abs((r.psnr_db - r.psnr_conventional_db) + 10 * math.log10(h * w)))
        mae_ok &= r.mae <= r.rmse
    ok = worst_sq <= 1e-9 and worst_psnr <= 1e-9 and mae_ok
    c.check(ok, f"|rmse^2-mse| {worst_sq:.1e}, psnr offset error {worst_psnr:.1e}, mae<=rmse {mae_ok}")


@pytest.fixture(scope="module")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance") / "synthetic"
    start = time.perf_counter()
    generate_dataset(10, [-45, 0, 45], 12, 7, root)
    return root, time.perf_counter() - start


@pytest.fixture(scope="module")
def template_cache():
    return {}


@pytest.mark.slow
def test_criterion_4_end_to_end_recognition(criterion, synthetic_root, template_cache):
    c = criterion(4, "end-to-end CLVQ frontal GAR")
    root, gen_time = synthetic_root
    start = time.perf_counter()
    report = run_case(
        EvalCase.frontal(), root, TrainConfig(hidden_units=100), M=5,
        split_spec=SplitSpec(0.7, seed=0), threads=1, cache=template_cache,
    )
    elapsed = gen_time + time.perf_counter() - start
    g = report.cell("LVQ", "MV").gar_percent
    c.check(g >= 90.0 and elapsed < 300, f"GAR {g:.2f}% over {report.cell('LVQ', 'MV').probes} probes, {elapsed:.0f}s")


@pytest.fixture(scope="module")
def seed_runs(synthetic_root, template_cache):
    """Per pipeline seed: multiview (-45, 0, 45) and noise (0, 0.05) reports."""
    root, _ = synthetic_root
    runs = []
    for s in range(N_SEEDS):
        cfg, split = TrainConfig(hidden_units=100, seed=s), SplitSpec(0.7, seed=s)
        views = run_case(EvalCase.multiview([-45, 0, 45]), root, cfg, 5, split_spec=split, cache=template_cache)
        noise = run_case(EvalCase.noise([0.0, 0.05]), root, cfg, 5, split_spec=split, noise_seed=s, cache=template_cache)
        runs.append((views, noise))
    return runs


@pytest.mark.slow
def test_criterion_5_pose_degradation(criterion, seed_runs):
    c = criterion(5, "pose degradation")
    parts, ok = [], True
    for fam in FAMILIES:
        front = np.mean([v.cell(fam, "MV", 0).gar_percent for v, _ in seed_runs])
        side = np.mean([(v.cell(fam, "MV", -45).gar_percent + v.cell(fam, "MV", 45).gar_percent) / 2 for v, _ in seed_runs])
        ok &= front >= side
        parts.append(f"{fam} 0deg {front:.2f} vs 45deg {side:.2f}")
    c.check(bool(ok), "; ".join(parts))


@pytest.mark.slow
def test_criterion_6_noise_degradation(criterion, seed_runs):
    c = criterion(6, "noise degradation")
    parts, ok = [], True
    for fam in FAMILIES:
        clean = np.mean([n.cell(fam, "MV", 0, 0.0).gar_percent for _, n in seed_runs])
        noisy = np.mean([n.cell(fam, "MV", 0, 0.05).gar_percent for _, n in seed_runs])
        ok &= noisy <= clean
        parts.append(f"{fam} sigma0 {clean:.2f} vs sigma0.05 {noisy:.2f}")
    c.check(bool(ok), "; ".join(parts))


def test_criterion_7_noise_sweep_trends(criterion):
    c = criterion(7, "noise sweep trends")
    start = time.perf_counter()
    images = [render(SubjectSpec.from_seed(derive_seed(7, i)), ViewSpec(0, jitter_seed=derive_seed(7, i, 0))) for i in range(20)]
    sigmas = [0.0, 0.02, 0.04, 0.06, 0.08, 0.1]
    rows = noise_sweep(images, sigmas, seed=0)
    rho = {col: spearmanr(sigmas, [getattr(r, col) for r in rows]).statistic
           for col in ("mse", "rmse", "mae", "pfe", "snr_db", "psnr_db")}
    elapsed = time.perf_counter() - start
    ok = all(rho[k] >= 0.99 for k in ("mse", "rmse", "mae", "pfe"))
    ok &= all(rho[k] <= -0.99 for k in ("snr_db", "psnr_db")) and elapsed < 60
    c.check(bool(ok), ", ".join(f"{k} {v:+.3f}" for k, v in rho.items()) + f", {elapsed:.1f}s")


@pytest.mark.slow
def test_criterion_8_determinism(criterion, tmp_path):
    c = criterion(8, "determinism")
    train = ["--hidden", "16", "--epochs", "30", "--M", "3", "--seed", "11"]

    def pipeline(name, threads):
        out = tmp_path / name
        data = out / "data"
        steps = [
            ["gen", "--subjects", "5", "--views", "m45,0,p45", "--samples", "5", "--seed", "11", "--out", str(data)],
            ["extract", "--data", str(data), "--out", str(out / "templates.mvbk"), "--threads", threads],
            ["train", "--templates", str(out / "templates.mvbk"), "--out", str(out / "models.mvbm"), "--threads", threads, *train],
            ["eval", "--case", "multiview", "--views", "m45,0,p45", "--data", str(data), "--out", str(out / "res"), "--threads", threads, *train],
            ["eval", "--case", "noise", "--sigmas", "0,0.02", "--data", str(data), "--out", str(out / "res"), "--threads", threads, *train],
        ]
        for argv in steps:
            assert main(argv) == 0, argv
        return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}

    first, second, parallel = pipeline("a", "1"), pipeline("b", "1"), pipeline("c", "8")
    kinds = [k for k in first if k.endswith((".mvbk", ".mvbm", ".csv"))]
    same_runs = first == second
    same_threads = first == parallel
    c.check(same_runs and same_threads and len(kinds) == 6,
            f"{len(first)} files compared ({len(kinds)} template/model/report/log); repeat identical {same_runs}, threads 1 vs 8 identical {same_threads}")


def test_criterion_9_surf_sanity(criterion):
    c = criterion(9, "SURF sanity")
    y, x = np.mgrid[0:160, 0:160].astype(float)
    blob = 0.1 + 0.8 * np.exp(-((x - 80) ** 2 + (y - 80) ** 2) / (2 * 5.0**2))

    def nearest(a):
        feats, _ = extract_features(GrayImage(a))
        return min(feats, key=lambda f: math.hypot(f[0].x - 80, f[0].y - 80))

    p, d = nearest(blob)
    dist = math.hypot(p.x - 80, p.y - 80)
    norm_err = abs(np.linalg.norm(d.values) - 1.0)
    change = max(np.linalg.norm(nearest(blob * k)[1].values - d.values) for k in (0.25, 0.5, 0.8))
    ok = dist <= 3.0 and norm_err <= 1e-6 and change < 1e-3
    c.check(ok, f"center offset {dist:.2f}px, |norm-1| {norm_err:.1e}, contrast change {change:.1e}")
