"""End-to-end acceptance gate: ten criteria, one PASS/FAIL line each.

The heavy training scenarios run once per module (fixtures) so the
feasibility criterion can inspect every run they produced.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from _fd import FD_RTOL, fd_check_many, fd_errors
from conftest import ACCEPTANCE_LINES
from geocrowd.baselines import dawid_skene_em
from geocrowd.cli import main as cli_main
from geocrowd.geometry import align_permutation, brute_force_alignment, confusion_cost, ssc_check
from geocrowd.model import backward, crowd_forward, init_model, load_checkpoint, predict_proba, save_checkpoint
from geocrowd.numerics import Rng
from geocrowd.objective import (
    RegularizerSpec,
    ccem_data_loss,
    oracle_kl_loss,
    reg_logdet_F,
    reg_logdet_W,
    reg_trace,
)
from geocrowd.pipeline import WorldConfig, build_world, run_method
from geocrowd.simulator import ConfusionEnsemble, Dataset, sample_annotations
from geocrowd.trainer import DEFAULT_LAMBDA_GRID, DEFAULT_LR_GRID, TrainConfig, train

pytestmark = pytest.mark.slow

FD_COORDS = 200


def report(n, ok, detail, seconds=None):
    took = f" [{seconds:.1f}s]" if seconds is not None else ""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}{took}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def timed_rows(world_cfg, methods, base, trials, p=None):
    t0 = time.perf_counter()
    rows = []
    for t in range(trials):
        world = build_world(world_cfg, t, p)
        for m in methods:
            row = run_method(m, world, base)
            row["trial"] = t
            rows.append(row)
    return rows, time.perf_counter() - t0


def by_method(rows, method, key):
    return np.array([r[key] for r in rows if r["method"] == method], dtype=np.float64)


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------


def test_c1_gradients_match_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    g = np.random.default_rng(1)
    worst = {}

    T, K = 80, 3
    P = g.dirichlet(np.ones(K), size=T)
    y = g.integers(0, K, T)
    grad = ccem_data_loss(P, y)[1]
    worst["ccem"] = fd_errors(lambda: ccem_data_loss(P, y)[0], P, grad, FD_COORDS, rng)

    F = g.dirichlet(np.ones(K), size=90).T.copy()
    grad = reg_logdet_F(F, 0.1)[1]
    worst["logdet_F"] = fd_errors(lambda: reg_logdet_F(F, 0.1)[0], F, grad, FD_COORDS, rng)

    A = g.dirichlet(np.ones(K), size=(25, K)).transpose(0, 2, 1).copy()
    grad = reg_logdet_W(A, 0.2)[1]
    worst["logdet_W"] = fd_errors(lambda: reg_logdet_W(A, 0.2)[0], A, grad, FD_COORDS, rng)
    grad = reg_trace(A, 0.7)[1]
    worst["trace"] = fd_errors(lambda: reg_trace(A, 0.7)[0], A, grad, FD_COORDS, rng)

    Pt = g.dirichlet(np.ones(K), size=T)
    Q = g.dirichlet(np.ones(K), size=T)
    grad = oracle_kl_loss(Pt, Q)[1]
    worst["oracle_kl"] = fd_errors(lambda: oracle_kl_loss(Pt, Q)[0], Q, grad, FD_COORDS, rng)

    for name, (data_fn, reg_fn) in {
        "backprop_ccem": ("ccem", ("F", "W")),
        "backprop_oracle": ("oracle", ("trace",)),
    }.items():
        model = init_model(6, 3, 6, (12, 8), mu_init=1.0, rng=Rng(1))
        model.B += Rng(1).spawn(9).gen.normal(scale=0.5, size=model.B.shape)
        X = g.normal(size=(6, 12))
        pairs = np.unique(g.integers(0, 12 * 6, 40))
        item, annot = pairs // 6, pairs % 6
        labels = g.integers(0, 3, item.size)
        target = g.dirichlet(np.ones(3), size=item.size)

        def terms(P, Fb, A, data_fn=data_fn, reg_fn=reg_fn):
            if data_fn == "ccem":
                data = ccem_data_loss(P, labels)
            else:
                data = oracle_kl_loss(target, P)
            regs = []
            if "F" in reg_fn:
                regs.append(("F", reg_logdet_F(Fb, 0.05)))
            if "W" in reg_fn:
                regs.append(("A", reg_logdet_W(A, 0.05)))
            if "trace" in reg_fn:
                regs.append(("A", reg_trace(A, 0.05)))
            return data, regs

        def objective(model=model, X=X, item=item, annot=annot, terms=terms):
            model.refresh()
            P, cache = crowd_forward(model, X, item, annot)
            data, regs = terms(P, cache.F, model.A)
            return data[0] + sum(r[1][0] for r in regs)

        model.refresh()
        Pm, cache = crowd_forward(model, X, item, annot)
        data, regs = terms(Pm, cache.F, model.A)
        dF = next((r[1][1] for r in regs if r[0] == "F"), None)
        dA = sum(r[1][1] for r in regs if r[0] == "A")
        grads = backward(model, cache, data[1], dF, dA)
        worst[name] = fd_check_many(objective, model.parameters(), grads.as_list(), 220, rng)

    seconds = time.perf_counter() - t0
    ok = all(e.size >= FD_COORDS and e.max() < FD_RTOL for e in worst.values()) and seconds < 60
    detail = ", ".join(f"{k} {v.max():.1e} ({v.size})" for k, v in worst.items())
    assert report(1, ok, f"max relative FD error: {detail}", seconds)


# ---------------------------------------------------------------------------
# 2. oracle identifiability
# ---------------------------------------------------------------------------

C2_WORLD = WorldConfig(K=3, D=5, N=1000, M=8, p=0.5, n_val=0, n_test=1000, separation=10.0,
                       confusions={"kind": "specialist", "xi": 0.02}, seed=0)
C2_TRAIN = TrainConfig(mode="oracle_kl", lr=0.01, epochs=200, weight_decay=0.0, hidden=(32,))


@pytest.fixture(scope="module")
def c2():
    world = build_world(C2_WORLD)
    t0 = time.perf_counter()
    row = run_method("unregularized", world, C2_TRAIN)
    return world, row, time.perf_counter() - t0


def test_c2_oracle_identifiability(c2):
    world, row, seconds = c2
    ds = world.dataset
    f_ssc = ssc_check(ds.F_true[:, ds.indices("train")].T)
    w_ssc = ssc_check(world.ensemble.A.reshape(-1, 3))
    ok = (row["status"] == "ok" and f_ssc.passed and w_ssc.passed
          and row["confusion_mse"] <= 1e-3 and row["predictor_error"] <= 1e-2 and seconds < 300)
    assert report(2, ok, f"F ssc {f_ssc.verdict}, W ssc {w_ssc.verdict}, "
                         f"confusion mse {row['confusion_mse']:.2e} (<= 1e-3), "
                         f"predictor error {row['predictor_error']:.2e} (<= 1e-2)", seconds)


# ---------------------------------------------------------------------------
# 3. many annotated items: log-det on F beats no regularizer
# ---------------------------------------------------------------------------

C3_WORLD = WorldConfig(K=3, D=5, N=5000, M=5, p=0.2, n_val=500, n_test=2000, separation=1.5,
                       confusions={"kind": "dirichlet", "alpha": 1.0, "boost": 0.3}, seed=0)
C3_TRAIN = TrainConfig(epochs=60, patience=10, lr_grid=DEFAULT_LR_GRID, lam_grid=DEFAULT_LAMBDA_GRID)


@pytest.fixture(scope="module")
def c3():
    return timed_rows(C3_WORLD, ["geocrowd_f", "unregularized"], C3_TRAIN, 5)


def test_c3_logdet_f_beats_unregularized(c3):
    rows, seconds = c3
    acc_f, acc_0 = by_method(rows, "geocrowd_f", "test_accuracy"), by_method(rows, "unregularized", "test_accuracy")
    mse_f, mse_0 = by_method(rows, "geocrowd_f", "confusion_mse"), by_method(rows, "unregularized", "confusion_mse")
    gain = 100 * (acc_f.mean() - acc_0.mean())
    wins = int(np.sum(mse_f < mse_0))
    ok = gain >= 2.0 and wins >= 4 and seconds < 1200
    assert report(3, ok, f"accuracy {acc_f.mean():.4f} vs {acc_0.mean():.4f} (+{gain:.2f} points, "
                         f">= 2), lower mse on {wins}/5 seeds (>= 4)", seconds)


# ---------------------------------------------------------------------------
# 4. many annotators with specialists: log-det on W
# ---------------------------------------------------------------------------

C4_WORLD = WorldConfig(K=3, D=5, N=800, M=25, p=0.15, n_val=200, n_test=2000, separation=1.5,
                       confusions={"kind": "specialist", "xi": 0.05, "alpha": 1.0, "boost": 0.3},
                       seed=0)
C4_TRAIN = TrainConfig(epochs=300, patience=30, lr_grid=DEFAULT_LR_GRID, lam_grid=DEFAULT_LAMBDA_GRID)


@pytest.fixture(scope="module")
def c4():
    return timed_rows(C4_WORLD, ["geocrowd_w", "unregularized", "nn_mv"], C4_TRAIN, 5)


def test_c4_logdet_w_with_specialists(c4):
    rows, seconds = c4
    acc = {m: by_method(rows, m, "test_accuracy").mean() for m in ("geocrowd_w", "unregularized", "nn_mv")}
    ok = acc["geocrowd_w"] >= acc["unregularized"] and acc["geocrowd_w"] >= acc["nn_mv"] and seconds < 1200
    assert report(4, ok, "mean accuracy " + ", ".join(f"{m} {v:.4f}" for m, v in acc.items()), seconds)


# ---------------------------------------------------------------------------
# 5. confusion error shrinks as more labels are observed
# ---------------------------------------------------------------------------

C5_WORLD = WorldConfig(K=3, D=5, N=5000, M=5, n_val=0, n_test=2000, separation=1.5,
                       confusions={"kind": "dirichlet", "alpha": 1.0, "boost": 0.3}, seed=0)
C5_TRAIN = TrainConfig(regularizer=RegularizerSpec("logdet_F", 0.001), lr=0.01, epochs=60)
C5_P = (0.05, 0.1, 0.2, 0.4)


@pytest.fixture(scope="module")
def c5():
    out, total = {}, 0.0
    for p in C5_P:
        out[p], s = timed_rows(C5_WORLD, ["geocrowd_f"], C5_TRAIN, 3, p)
        total += s
    return out, total


def test_c5_error_decreases_with_observation_rate(c5):
    rows, seconds = c5
    med = np.array([np.median(by_method(rows[p], "geocrowd_f", "confusion_mse")) for p in C5_P])
    rises = [(med[i + 1] - med[i]) / med[i] for i in range(len(med) - 1) if med[i + 1] > med[i]]
    ok = (len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.10)) and seconds < 1800
    assert report(5, ok, "median mse by p " + ", ".join(f"{p}: {m:.2e}" for p, m in zip(C5_P, med))
                  + f"; violations {len(rises)}", seconds)


# ---------------------------------------------------------------------------
# 6. Dawid-Skene EM
# ---------------------------------------------------------------------------


def test_c6_dawid_skene_recovery():
    t0 = time.perf_counter()
    K, M, N = 2, 3, 2000
    y = np.random.default_rng(0).integers(0, K, N)
    A = np.stack([np.array([[0.9, 0.1], [0.1, 0.9]])] * M)
    ds = Dataset(np.zeros((1, N)), y, K)
    ann = sample_annotations(ds, ConfusionEnsemble(A, ["planted"] * M), 1.0, seed=1)
    res = dawid_skene_em(ann, tol=0.0, max_iter=200)
    align = align_permutation(res.confusions, A, res.posterior.q, np.eye(K)[:, y])
    mse = float(align.confusion_errors.sum() / (M * K * K))
    acc = float(np.mean(align.pi[res.posterior.hard] == y))
    drops = np.diff(res.objective)
    seconds = time.perf_counter() - t0
    ok = mse <= 0.01 and acc >= 0.95 and drops.min() >= -1e-9 and seconds < 60
    assert report(6, ok, f"mse {mse:.2e} (<= 0.01), accuracy {acc:.4f} (>= 0.95), "
                         f"smallest objective step {drops.min():.1e} over {drops.size} iterations",
                  seconds)


# ---------------------------------------------------------------------------
# 7. permutation machinery
# ---------------------------------------------------------------------------


def test_c7_alignment_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for K in range(2, 7):
        for _ in range(100):
            M = int(rng.integers(1, 6))
            A_hat = rng.dirichlet(np.ones(K), size=(M, K)).transpose(0, 2, 1)
            A = rng.dirichlet(np.ones(K), size=(M, K)).transpose(0, 2, 1)
            res = align_permutation(A_hat, A)
            bf_pi, bf_val = brute_force_alignment(confusion_cost(A_hat, A))
            if not (np.array_equal(res.pi, bf_pi) or math.isclose(res.objective, bf_val, rel_tol=1e-12)):
                mismatches += 1
    recovered = 0
    for K in range(2, 7):
        A = rng.dirichlet(np.ones(K), size=(5, K)).transpose(0, 2, 1)
        pi0 = rng.permutation(K)
        noisy = A[:, :, pi0] + 0.01 * rng.standard_normal(A.shape)
        recovered += int(np.array_equal(align_permutation(noisy, A).pi, pi0))
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and recovered == 5 and seconds < 60
    assert report(7, ok, f"{500 - mismatches}/500 instances match brute force, "
                         f"planted permutation recovered for {recovered}/5 sizes", seconds)


# ---------------------------------------------------------------------------
# 8. SSC checker
# ---------------------------------------------------------------------------


def test_c8_ssc_checker():
    t0 = time.perf_counter()
    eye = ssc_check(np.eye(3), samples=1000)
    uni = ssc_check(np.full((50, 3), 1 / 3))
    spread = sum(ssc_check(np.random.default_rng(s).dirichlet(np.full(3, 0.2), size=50), seed=s).passed
                 for s in range(10))
    flat = sum(not ssc_check(np.random.default_rng(s).dirichlet(np.full(3, 50.0), size=50), seed=s).passed
               for s in range(10))
    seconds = time.perf_counter() - t0
    ok = (eye.passed and eye.samples == 1000 and eye.max_residual <= 1e-8 and not uni.passed
          and spread >= 9 and flat >= 9 and seconds < 60)
    assert report(8, ok, f"identity residual {eye.max_residual:.1e}, uniform {uni.verdict}, "
                         f"Dir(0.2) pass {spread}/10, Dir(50) fail {flat}/10", seconds)


# ---------------------------------------------------------------------------
# 9. determinism and round trips
# ---------------------------------------------------------------------------


def test_c9_determinism_and_round_trip(tmp_path):
    t0 = time.perf_counter()
    world = build_world(WorldConfig(N=400, n_val=80, n_test=200, seed=5))
    cfg = TrainConfig(regularizer=RegularizerSpec("logdet_F", 0.01), lr=0.01, epochs=10, seed=5)
    m1, h1 = train(cfg, world.dataset, world.annotations, checkpoint_path=tmp_path / "a.gcm")
    m2, h2 = train(cfg, world.dataset, world.annotations, checkpoint_path=tmp_path / "b.gcm")
    same_history = h1.to_csv(include_time=False) == h2.to_csv(include_time=False)
    same_params = all(np.array_equal(a, b) for a, b in zip(m1.parameters(), m2.parameters()))
    X = world.dataset.X
    save_checkpoint(m1, tmp_path / "c.gcm")
    loaded = load_checkpoint(tmp_path / "c.gcm")
    same_forward = np.array_equal(predict_proba(loaded, X), predict_proba(m1, X))
    item, annot = world.annotations.item, world.annotations.annot
    same_forward &= np.array_equal(crowd_forward(loaded, X[:, item], np.arange(item.size), annot)[0],
                                   crowd_forward(m1, X[:, item], np.arange(item.size), annot)[0])

    cfg_path = tmp_path / "world.json"
    cfg_path.write_text('{"K": 3, "N": 300, "M": 4, "p": 0.3, "seed": 9}')
    names = ("dataset.csv", "annotations.csv", "confusions.json", "manifest.json")
    for out in ("s1", "s2"):
        assert cli_main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / out)]) == 0
    same_files = all((tmp_path / "s1" / n).read_bytes() == (tmp_path / "s2" / n).read_bytes() for n in names)
    seconds = time.perf_counter() - t0
    ok = same_history and same_params and same_forward and same_files
    assert report(9, ok, f"history identical {same_history} (wall-clock column excluded), "
                         f"parameters identical {same_params}, checkpoint forward bit-exact {same_forward}, "
                         f"simulate files identical {same_files}", seconds)


# ---------------------------------------------------------------------------
# 10. feasibility over every training run above
# ---------------------------------------------------------------------------


def test_c10_feasibility_over_all_runs(c2, c3, c4, c5):
    rows = [c2[1]] + c3[0] + c4[0] + [r for v in c5[0].values() for r in v]
    failed = [r for r in rows if r["status"] != "ok"]
    hists = [r["_history"] for r in rows if "_history" in r]
    dev = max(r["max_colsum_dev"] for r in rows if r["status"] == "ok")
    finite = all(math.isfinite(v) for h in hists for rec in h.records
                 for v in (rec.loss, rec.data, rec.reg))
    decreasing = sum(h.records[-1].loss < h.records[0].loss for h in hists)
    ok = not failed and dev <= 1e-10 and finite and decreasing == len(hists)
    assert report(10, ok, f"{len(rows)} runs, {len(failed)} failed, max column-sum deviation "
                          f"{dev:.1e} (<= 1e-10), all losses finite {finite}, "
                          f"final loss below first on {decreasing}/{len(hists)}")
