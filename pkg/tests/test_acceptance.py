"""End-to-end acceptance checks.

Each test prints one ``[criterion] PASS|FAIL`` line with the measured
quantity. Shared experiment runs are cached in module fixtures.
"""

import math
import time

import numpy as np
import pytest

from hdpissa import model
from hdpissa.adapters import init_hd_pissa, init_pissa
from hdpissa.cli import EQUIVALENCE_BOUND, ablate_gamma, main
from hdpissa.config import parse_config
from hdpissa.distsim import Method, TrainerConfig, init_state, train, train_step
from hdpissa.linalg import svd
from hdpissa.model import AdapterLinearLayer, Mode, Network
from hdpissa.optim import AdamWState, adamw_delta
from hdpissa.rankanalysis import compute_delta, spectrum
from hdpissa.tasks import gen_linear_task

from oracles import central_differences, random_orthogonal, rel_err, separated_matrix

SEEDS = (0, 1, 2)
LR = 1e-2


def report(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\n[{label}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- 1. muted vs residual gradients -------------------------------------------------

def _random_layer(rng):
    r = int(rng.integers(1, 9))
    m, n = (int(v) for v in rng.integers(r, 65, 2))
    K = int(rng.integers(1, min(m, n) // r + 1))
    w = rng.standard_normal((m, n)) / math.sqrt(m)
    pair = init_hd_pissa(w, r, K)[int(rng.integers(0, K))]
    x, t = rng.standard_normal((8, m)), rng.standard_normal((8, n))
    return w, pair, x, t


def _grads(net, x, t):
    _, tape = model.forward(net, x)
    return model.backward(net, tape, t)[1][0]


@pytest.fixture(scope="module")
def muting_errors():
    rng = np.random.default_rng(20240501)
    layers = [_random_layer(rng) for _ in range(100)]
    errs = {g: 0.0 for g in (1e-4, 1e-8, 1e-16)}
    fd_err = 0.0
    for w, pair, x, t in layers:
        residual = Network((AdapterLinearLayer(w - pair.product(), pair, mode=Mode.RESIDUAL),), "none")
        gr = _grads(residual, x, t)
        for gamma in errs:
            gm = _grads(Network((AdapterLinearLayer(w, pair, gamma, Mode.MUTED),), "none"), x, t)
            errs[gamma] = max(errs[gamma], rel_err(gm.g_a, gr.g_a), rel_err(gm.g_b, gr.g_b))
            if gamma == 1e-16:
                # finite differences of the loss the rescaled gradient targets
                layer = residual.layers[0]
                f = lambda: model.loss_only(residual, x, t)
                fa = central_differences(f, layer.adapter.a)
                fb = central_differences(f, layer.adapter.b)
                fd_err = max(fd_err, rel_err(gr.g_a, fa), rel_err(gr.g_b, fb),
                             rel_err(gm.g_a, fa), rel_err(gm.g_b, fb))
    return errs, fd_err


@pytest.mark.parametrize("gamma", [1e-4, 1e-8, 1e-16])
def test_c1_muting_equivalence(muting_errors, capsys, gamma):
    err = muting_errors[0][gamma]
    report(capsys, f"1 muting gamma={gamma:g}", err <= 1e-6, f"max rel error {err:.3g} (bound 1e-6)")


def test_c1_finite_differences(muting_errors, capsys):
    err = muting_errors[1]
    report(capsys, "1 finite differences", err <= 1e-5, f"max rel error {err:.3g} (bound 1e-5)")


# -- 2-4. initialization and one-step oracles ---------------------------------------

def test_c2_pissa_consistency(capsys):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        m, n = (int(v) for v in rng.integers(1, 33, 2))
        w = rng.standard_normal((m, n))
        factors = svd(w)
        for r in range(1, min(m, n) + 1):
            pair, w_res = init_pissa(w, r, factors)
            worst = max(worst, np.linalg.norm(w - (w_res + pair.product())) / np.linalg.norm(w))
    report(capsys, "2 PiSSA consistency", worst <= 1e-12, f"max ||W-(W_res+AB)||/||W|| {worst:.3g}")


def test_c3_orthogonality(capsys):
    rng = np.random.default_rng(3)
    worst = 0.0
    for K in range(2, 9):
        for _ in range(5):
            r = int(rng.integers(1, 4))
            m, n = (int(v) for v in rng.integers(K * r, 41, 2))
            w = separated_matrix(rng, m, n)
            pairs = init_hd_pissa(w, r, K)
            for i in range(K):
                for j in range(K):
                    if i == j:
                        continue
                    a_i, a_j, b_i, b_j = pairs[i].a, pairs[j].a, pairs[i].b, pairs[j].b
                    worst = max(
                        worst,
                        np.linalg.norm(a_i.T @ a_j) / (np.linalg.norm(a_i) * np.linalg.norm(a_j)),
                        np.linalg.norm(b_i @ b_j.T) / (np.linalg.norm(b_i) * np.linalg.norm(b_j)),
                    )
    report(capsys, "3 orthogonality", worst <= 1e-9, f"max normalized cross product {worst:.3g}")


def test_c4_one_step_dwu(capsys):
    worst = 0.0
    for seed in range(5):
        task = gen_linear_task(32, 24, 8, seed=seed)
        config = TrainerConfig(method=Method.HD_PISSA, devices=1, rank=3, lr=LR, global_batch=16, seed=seed)
        state = init_state(config, task.base_weights())
        batch = task.next_batch(0, 16)
        w_dwu = train_step(state, batch, config, task)[0].weights[0]

        pair, w_res = init_pissa(task.base_weights()[0], 3)
        net = Network((AdapterLinearLayer(w_res, pair, mode=Mode.RESIDUAL),), "none")
        g = _grads(net, *batch)
        da, _ = adamw_delta(g.g_a, AdamWState.zeros_like(pair.a, lr=LR))
        db, _ = adamw_delta(g.g_b, AdamWState.zeros_like(pair.b, lr=LR))
        w_ref = w_res + (pair.a + da) @ (pair.b + db)
        worst = max(worst, np.linalg.norm(w_dwu - w_ref) / np.linalg.norm(w_ref))
    report(capsys, "4 one-step DWU oracle", worst <= 1e-10, f"max relative difference {worst:.3g}")


# -- 5-8. desk-scale experiments ------------------------------------------------------

def setup5(method, seed, steps=200, **kw):
    task = gen_linear_task(64, 64, 32, seed=seed)
    config = TrainerConfig(method=method, devices=4, rank=2, steps=steps, lr=LR, seed=seed, **kw)
    return config, task


@pytest.fixture(scope="module")
def rank_runs():
    out, t0 = {}, time.perf_counter()
    for seed in SEEDS:
        for method in (Method.LORA_DP, Method.PISSA_DP, Method.HD_PISSA, Method.LORA_DWU, Method.TOPRANK_DWU):
            res = train(*setup5(method, seed))
            out[method, seed] = (res, spectrum(compute_delta(res, 0)))
    return out, time.perf_counter() - t0


@pytest.mark.parametrize("method, bound, op", [
    (Method.LORA_DP, 2, "<="), (Method.PISSA_DP, 4, "<="), (Method.HD_PISSA, 16, ">="),
])
def test_c5_threshold_rank(rank_runs, capsys, method, bound, op):
    ranks = [rank_runs[0][method, s][1].effective_rank for s in SEEDS]
    ok = all(r <= bound if op == "<=" else r >= bound for r in ranks)
    report(capsys, f"5 {method.value} rank {op} {bound}", ok, f"ranks per seed {ranks}")


def test_c5_sigma17_gap(rank_runs, capsys):
    ratios = []
    for s in SEEDS:
        hd = rank_runs[0][Method.HD_PISSA, s][1].sigma_at(17)
        lo = rank_runs[0][Method.LORA_DP, s][1].sigma_at(17)
        ratios.append(hd / lo if lo > 0 else math.inf)
    report(capsys, "5 sigma_17 HD-PiSSA / LoRA-DP >= 10", all(r >= 10 for r in ratios),
           "ratios " + ", ".join(f"{r:.3g}" for r in ratios))


def test_c5_runtime(rank_runs, capsys):
    # five methods share the cache; the criterion concerns the three compared runs per seed
    elapsed = rank_runs[1]
    report(capsys, "5 runtime < 60 s", elapsed < 60, f"{elapsed:.1f} s for 15 runs")


@pytest.fixture(scope="module")
def loss_runs():
    med = {}
    for method in (Method.FFT, Method.LORA_DP, Method.PISSA_DP, Method.HD_PISSA):
        med[method] = float(np.median([train(*setup5(method, s, steps=500)).eval_loss_final for s in SEEDS]))
    return med


def test_c6_hd_below_pissa_dp(loss_runs, capsys):
    hd, other = loss_runs[Method.HD_PISSA], loss_runs[Method.PISSA_DP]
    report(capsys, "6 HD-PiSSA < PiSSA-DP", hd < other, f"median {hd:.4g} vs {other:.4g}")


def test_c6_hd_below_lora_dp(loss_runs, capsys):
    hd, other = loss_runs[Method.HD_PISSA], loss_runs[Method.LORA_DP]
    report(capsys, "6 HD-PiSSA < LoRA-DP", hd < other, f"median {hd:.4g} vs {other:.4g}")


def test_c6_hd_within_5x_fft(loss_runs, capsys):
    hd, fft = loss_runs[Method.HD_PISSA], loss_runs[Method.FFT]
    report(capsys, "6 HD-PiSSA <= 5x FFT", hd <= 5 * fft, f"median {hd:.4g} vs FFT {fft:.4g}")


def test_c6_lora_far_above_fft(loss_runs, capsys):
    lo, fft = loss_runs[Method.LORA_DP], loss_runs[Method.FFT]
    report(capsys, "6 LoRA-DP >= 10x FFT", lo >= 10 * fft, f"median {lo:.4g} vs FFT {fft:.4g}")


def _ablation(precision, gammas):
    config, task = setup5(Method.HD_PISSA, 0)
    run = parse_config(
        "method = HD-PiSSA\ndevices = 4\nrank = 2\nsteps = 200\nlr = 0.01\nseed = 0\n"
        "kind = linear\ninput_dim = 64\noutput_dim = 64\ntarget_rank = 32\n"
    )
    assert run.trainer == config and run.task == task
    return {r["gamma"]: r for r in ablate_gamma(run, gammas, precision)}


def test_c7_gamma_insensitive_64bit(capsys):
    rows = _ablation("64", [1e-4, 1e-8, 1e-16])
    losses = [rows[g]["final_loss"] for g in (1e-4, 1e-8, 1e-16)]
    spread = (max(losses) - min(losses)) / min(losses)
    report(capsys, "7 64-bit final losses within 1%", spread <= 0.01,
           "losses " + ", ".join(f"{v:.6g}" for v in losses) + f" (spread {spread:.2%})")


def test_c7_float32_tiny_gamma_flat(capsys):
    row = _ablation("32", [1e-32])[1e-32]
    report(capsys, "7 32-bit gamma=1e-32 flat curve", row["flat_curve"] and row["status"] == "ok",
           f"weights unchanged={row['flat_curve']}, loss {row['initial_loss']:.6g} -> {row['final_loss']:.6g}")


def test_c7_large_gamma_detected(capsys):
    row = _ablation("64", [1e-2])[1e-2]
    ok = row["exceeds_bound"] and row["max_grad_error"] > EQUIVALENCE_BOUND
    report(capsys, "7 gamma=1e-2 deviation reported", ok, f"max grad error {row['max_grad_error']:.3g}")


@pytest.mark.parametrize("variant", [Method.LORA_DWU, Method.TOPRANK_DWU])
def test_c8_ablation_variants(rank_runs, capsys, variant):
    runs = rank_runs[0]
    hd = float(np.median([runs[Method.HD_PISSA, s][0].eval_loss_final for s in SEEDS]))
    var = [runs[variant, s][0].eval_loss_final for s in SEEDS]
    ok = all(np.isfinite(var)) and hd <= float(np.median(var))
    report(capsys, f"8 HD-PiSSA <= {variant.value}", ok, f"median {hd:.4g} vs {float(np.median(var)):.4g}")


# -- 9. determinism through the CLI ---------------------------------------------------

@pytest.mark.parametrize("method", ["HD-PiSSA", "LoRA-DP", "FFT"])
def test_c9_cli_determinism(tmp_path, capsys, method):
    text = (f"method = {method}\ndevices = 4\nrank = 2\nsteps = 20\nlr = 0.01\n"
            "kind = linear\ninput_dim = 32\noutput_dim = 32\ntarget_rank = 8\n")
    outs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 4)):
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(text + f"workers = {workers}\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "7"]) == 0
        outs.append(tuple((tmp_path / name / f).read_bytes() for f in ("loss.csv", "snapshots.hdps")))
    report(capsys, f"9 determinism {method}", len(set(outs)) == 1,
           f"{len(set(outs))} distinct output set(s) across serial, serial, 4 workers")


# -- 10. SVD properties ---------------------------------------------------------------

def test_c10_svd_suite(capsys):
    rng = np.random.default_rng(10)
    worst = dict(recon=0.0, ortho=0.0, invariance=0.0)
    ordered = True
    for _ in range(500):
        m, n = (int(v) for v in rng.integers(1, 65, 2))
        a = rng.standard_normal((m, n))
        res = svd(a)
        d = min(m, n)
        ordered &= bool(np.all(np.diff(res.s) <= 0) and np.all(res.s >= 0))
        worst["recon"] = max(worst["recon"], np.linalg.norm(res.reconstruct() - a) / np.linalg.norm(a))
        worst["ortho"] = max(worst["ortho"], np.linalg.norm(res.u.T @ res.u - np.eye(d)),
                             np.linalg.norm(res.vt @ res.vt.T - np.eye(d)))
        b = random_orthogonal(rng, m) @ a @ random_orthogonal(rng, n)
        worst["invariance"] = max(worst["invariance"], np.max(np.abs(svd(b).s - res.s)) / res.s[0])
    ok = ordered and worst["recon"] <= 1e-10 and worst["ortho"] <= 1e-10 and worst["invariance"] <= 1e-10
    report(capsys, "10 SVD oracle suite", ok,
           f"ordered={ordered}, " + ", ".join(f"{k} {v:.3g}" for k, v in worst.items()))
