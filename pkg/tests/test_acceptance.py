"""Acceptance checks.  Each test records a PASS/FAIL line that pytest repeats
in an "acceptance criteria" section at the end of the run.

The end-to-end checks (7 and 9) train three full-size models on the synthetic
20-node set and take roughly a quarter of an hour on a desktop CPU.
"""
import functools
import json
import math
import time

import numpy as np
import pytest
from numpy.polynomial import chebyshev as cheb

from stgcrnn import diffnum as dn
from stgcrnn.cli import main
from stgcrnn.config import load_config
from stgcrnn.data import WindowSet
from stgcrnn.gconv import GConvFilter, GraphOperator, spectral_gconv
from stgcrnn.graph import laplacian, scale_laplacian, transition_set
from stgcrnn.metrics import evaluate, r_squared, rmse, sp_rmse
from stgcrnn.model import GCRNNCell, GCRNNModel, ModelConfig, cell_step, count_parameters, forward
from stgcrnn.pipeline import load_inputs, prepare_from_config, synthetic_graph, train_model
from stgcrnn.train import TrainConfig, fit, lr_schedule, rmse_loss


def random_symmetric(rng, n, density=0.5):
    """Symmetric non-negative weights; a ring keeps every degree positive."""
    W = np.where(rng.uniform(size=(n, n)) < density, rng.uniform(0.1, 1.0, (n, n)), 0.0)
    W = np.triu(W, 1)
    for i in range(n):
        j = (i + 1) % n
        if i != j:
            W[min(i, j), max(i, j)] = max(W[min(i, j), max(i, j)], rng.uniform(0.1, 1.0))
    return W + W.T


def path_graph(n):
    W = np.zeros((n, n))
    i = np.arange(n - 1)
    W[i, i + 1] = W[i + 1, i] = 1.0
    return W


# --------------------------------------------------------------------------
# 1. gradients
# --------------------------------------------------------------------------

def test_c1_full_model_gradient(report):
    W = random_symmetric(np.random.default_rng(11), 5)
    rng = np.random.default_rng(12)
    x = rng.normal(size=(2, 5, 3, 1))
    y = rng.normal(size=(2, 5, 3, 1))
    worst, started = {}, time.perf_counter()
    for kind in ("spectral", "diffusion_dual"):
        for K in (1, 2):
            cfg = ModelConfig(conv=kind, K=K, hidden_dim=3, history=2, horizon=2, seed=K)
            model = GCRNNModel.from_graph(cfg, W)
            worst[f"{kind}/K={K}"] = dn.gradient_check(lambda: rmse_loss(forward(model, x, y), y),
                                                       model.parameters(), step=1e-5)
    elapsed = time.perf_counter() - started
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"max rel err {detail}; {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------
# 2. spectral filter vs eigendecomposition
# --------------------------------------------------------------------------

def eigen_filter(W, lam_max, X, theta, K, fin):
    """Filter through the eigenbasis with the Chebyshev taps rewritten as monomials."""
    d = W.sum(axis=1)
    L = np.eye(len(W)) - W / np.sqrt(np.outer(d, d))
    lam, Phi = np.linalg.eigh(2.0 * L / lam_max - np.eye(len(W)))
    out = np.zeros((len(W), theta.shape[1]))
    for i in range(fin):
        for j in range(theta.shape[1]):
            mono = cheb.cheb2poly(theta[i::fin, j][: K + 1])
            response = sum(c * lam ** m for m, c in enumerate(mono))
            out[:, j] += Phi @ (response * (Phi.T @ X[:, i]))
    return out


def test_c2_spectral_oracle(report):
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(100):
        n, K = int(rng.integers(2, 9)), int(rng.integers(0, 4))
        fin, fout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        W = random_symmetric(rng, n, rng.uniform(0.2, 0.9))
        X = rng.normal(size=(n, fin))
        filt = GConvFilter.create("spectral", K, fin, fout, rng)
        bundle = scale_laplacian(laplacian(W, "sym_normalized"), "power")
        got = spectral_gconv(X, bundle, filt).value - filt.bias.value
        want = eigen_filter(W, bundle.lambda_max, X, filt.theta.value, K, fin)
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst < 1e-8
    report(2, ok, f"100 graphs, max abs diff {worst:.1e}")
    assert ok


# --------------------------------------------------------------------------
# 3. locality
# --------------------------------------------------------------------------

def reach(run, n, j):
    """Largest hop distance at which perturbing node j changes the output."""
    X = np.random.default_rng(n).normal(size=(3, n, 1))
    base = run(X)
    Xp = X.copy()
    Xp[0, j] += 1.0
    moved = np.any(run(Xp) != base, axis=-1)
    return max(abs(i - j) for i in range(n) if moved[i])


KINDS = ("spectral", "diffusion_rw", "diffusion_dual")


def test_c3_single_conv_k_hops(report):
    bad = []
    for n in range(2, 13):
        for kind in KINDS:
            for K in (1, 2, 3):
                op = GraphOperator.build(path_graph(n), kind, K)
                filt = GConvFilter.create(kind, K, 1, 2, np.random.default_rng(K))
                j = n // 2

                def run(X):
                    with dn.no_grad():
                        return op.taps(dn.Tensor(X[0])).value @ filt.theta.value

                if reach(run, n, j) > K:
                    bad.append((n, kind, K))
    ok = not bad
    report("3a", ok, "single conv: no effect beyond K hops on paths N<=12"
           if ok else f"single conv leaks beyond K hops: {bad[:5]}")
    assert ok


def test_c3_recurrent_s_times_k_hops(report):
    observed, bad = {}, []
    for n in (8, 12):
        for kind in KINDS:
            for K in (1, 2):
                op = GraphOperator.build(path_graph(n), kind, K)
                cell = GCRNNCell(kind, K, 1, 3, np.random.default_rng(K))
                for s in (1, 2, 3):

                    def run(X, s=s):
                        H = np.zeros((n, 3))
                        with dn.no_grad():
                            for t in range(s):
                                H = cell_step(X[t], H, cell, op).value
                        return H

                    r = reach(run, n, 0)
                    observed[(K, s)] = max(observed.get((K, s), 0), r)
                    if r > s * K:
                        bad.append((n, kind, K, s, r))
    ok = not bad
    seen = ", ".join(f"K={K} s={s}: {r} (bound {s * K})" for (K, s), r in sorted(observed.items()))
    report("3b", ok, f"recurrent reach {seen}")
    assert ok


# --------------------------------------------------------------------------
# 4. learning-rate schedule
# --------------------------------------------------------------------------

def test_c4_schedule(report):
    got = {e: lr_schedule(e) for e in (0, 9, 10, 19, 20, 30, 99)}
    want = {0: 0.001, 9: 0.001, 10: 1e-4, 19: 1e-4, 20: 1e-5, 30: 2.0e-06, 99: 2.0e-06}
    ok = got == want
    report(4, ok, f"lr by epoch {got}")
    assert ok


# --------------------------------------------------------------------------
# 5. parameter count
# --------------------------------------------------------------------------

def test_c5_parameter_count(report):
    mismatches = []
    for kind in KINDS:
        for K in (0, 1, 2, 3):
            for layers in (1, 2, 3):
                cfg = ModelConfig(conv=kind, K=K, input_dim=2, hidden_dim=4, num_layers=layers)
                model = GCRNNModel.from_graph(cfg, path_graph(3))
                if count_parameters(model) != sum(p.value.size for p in model.parameters()):
                    mismatches.append((kind, K, layers))
    default = ModelConfig()
    enumerated = sum(p.value.size for p in GCRNNModel.from_graph(default, path_graph(4)).parameters())
    n = count_parameters(default)
    ok = not mismatches and n == enumerated and 1e5 <= n <= 1e6
    report(5, ok, f"default model {n} parameters (enumerated {enumerated}); mismatches {mismatches}")
    assert ok


# --------------------------------------------------------------------------
# 6. metric oracles
# --------------------------------------------------------------------------

def loop_rmse(p, t, m):
    acc = n = 0
    for idx in np.ndindex(t.shape):
        if m[idx]:
            acc += (p[idx] - t[idx]) ** 2
            n += 1
    return math.sqrt(acc / n)


def loop_r2(p, t, m):
    pairs = [(p[i], t[i]) for i in np.ndindex(t.shape) if m[i]]
    mean = sum(b for _, b in pairs) / len(pairs)
    return 1 - sum((b - a) ** 2 for a, b in pairs) / sum((b - mean) ** 2 for _, b in pairs)


def loop_sp_rmse(model, w):
    B, T, N, _ = w.inputs.shape
    node_rmse = []
    for i in range(N):
        acc = 0.0
        for b in range(B):
            x = w.inputs[b:b + 1].copy()
            for t in range(T):
                x[0, t, i, 0] = 0.0
            acc += (model.predict(x)[0, 0, i] - w.targets[b, 0, i, 0]) ** 2
        node_rmse.append(math.sqrt(acc / B))
    return sum(node_rmse) / N


def test_c6_metric_oracles(report):
    rng = np.random.default_rng(60)
    worst = {"rmse": 0.0, "r2": 0.0, "sp_rmse": 0.0}
    for _ in range(200):
        B, N, Tp = int(rng.integers(2, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
        p, t = rng.normal(size=(B, Tp, N)), rng.normal(size=(B, Tp, N))
        m = rng.uniform(size=t.shape) < 0.75
        m.flat[:2] = True
        worst["rmse"] = max(worst["rmse"], abs(rmse(p, t, m) - loop_rmse(p, t, m)))
        worst["r2"] = max(worst["r2"], abs(r_squared(p, t, m) - loop_r2(p, t, m)))

        # a lone self-looped node has a zero Laplacian, so only diffusion applies there
        kind = KINDS[int(rng.integers(3))] if N > 1 else "diffusion_rw"
        cfg = ModelConfig(conv=kind, K=int(rng.integers(0, 3)), input_dim=2,
                          hidden_dim=2, num_layers=1, history=2, horizon=Tp, seed=int(rng.integers(1000)))
        W = random_symmetric(rng, N) if N > 1 else np.ones((1, 1))
        model = GCRNNModel.from_graph(cfg, W)
        w = WindowSet(rng.normal(size=(B, 2, N, 2)), rng.normal(size=(B, Tp, N, 1)), np.arange(B))
        worst["sp_rmse"] = max(worst["sp_rmse"], abs(sp_rmse(model, w, 0) - loop_sp_rmse(model, w)))
    ok = max(worst.values()) < 1e-12
    report(6, ok, "200 trials, max abs diff " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# --------------------------------------------------------------------------
# 7 and 9. end-to-end on the synthetic set
# --------------------------------------------------------------------------

# batch 16 and every 6th training window keep a 20-epoch run inside 10 minutes
E2E = {"data": {"train_stride": 6}, "train": {"batch_size": 16, "max_epochs": 20}}


@functools.cache
def synthetic_run(conv, K):
    cfg = load_config(overrides={**E2E, "model": {"conv": conv, "K": K}}, environ={})
    graph, seq = load_inputs(cfg)
    data = prepare_from_config(cfg, seq)
    started = time.perf_counter()
    result = train_model(graph.W, data, cfg.model_config(len(data.feature_names)), cfg.train_config())
    seconds = time.perf_counter() - started
    return cfg, data, result, seconds


def epoch_seconds(K, windows=96, epochs=3):
    """Best-of-``epochs`` training time for one pass over a fixed window subset."""
    cfg = load_config(overrides={**E2E, "model": {"K": K}}, environ={})
    graph, seq = load_inputs(cfg)
    data = prepare_from_config(cfg, seq)
    model = GCRNNModel.from_graph(cfg.model_config(1), graph.W)
    tc = TrainConfig(batch_size=16, max_epochs=epochs, patience=epochs)
    res = fit(model, data.train.subset(np.arange(windows)), data.valid.subset(np.arange(16)), tc)
    return min(r["seconds"] for r in res.history)


def test_c7_end_to_end(report):
    cfg, data, res, seconds = synthetic_run("diffusion_dual", 2)
    rep = evaluate(res.model, data.test, data.stats)
    gain = 1.0 - rep.overall_rmse / rep.persistence_rmse
    epochs = len(res.history)
    beats = gain >= 0.20 and epochs <= 50 and seconds < 600
    report("7a", beats, f"test RMSE {rep.overall_rmse:.4f} vs persistence {rep.persistence_rmse:.4f} "
           f"({gain:.0%} lower), {epochs} epochs, {seconds:.0f}s")

    _, _, res_k1, _ = synthetic_run("diffusion_dual", 1)
    k_ok = res.best_valid < res_k1.best_valid
    report("7b", k_ok, f"valid RMSE K=1 {res_k1.best_valid:.5f}, K=2 {res.best_valid:.5f}")

    timing = [epoch_seconds(K) for K in (1, 2, 3)]
    t_ok = timing[0] < timing[1] < timing[2]
    report("7c", t_ok, "seconds per epoch (96 windows) K=1,2,3: " + ", ".join(f"{t:.2f}" for t in timing))
    assert beats and k_ok and t_ok


def test_c9_sp_rmse_not_below_rmse(report):
    parts, ok = [], True
    for conv in ("diffusion_dual", "spectral"):
        _, data, res, _ = synthetic_run(conv, 2)
        # every 4th test window keeps the 20 blanked passes affordable
        test = data.test.subset(np.arange(0, len(data.test), 4))
        rep = evaluate(res.model, test, data.stats)
        sp = sp_rmse(res.model, test, data.target_index, data.stats)
        ok &= sp >= rep.overall_rmse
        parts.append(f"{conv} spRMSE {sp:.4f} vs RMSE {rep.overall_rmse:.4f}")
    report(9, ok, "; ".join(parts))
    assert ok


# --------------------------------------------------------------------------
# 8. reproducibility through the CLI
# --------------------------------------------------------------------------

SMALL = """\
seed: 3
data:
  T: 4
  T_prime: 3
  synthetic: {nodes: 8, hours: 300, seed: 2}
model: {hidden_dim: 6, num_layers: 2, K: 2}
train: {max_epochs: 3, batch_size: 16}
"""


def test_c8_cli_reproducible(tmp_path, report):
    cfg = tmp_path / "small.yaml"
    cfg.write_text(SMALL)
    out = tmp_path / "runs"
    for _ in range(2):
        assert main(["train", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    first, second = sorted(p for p in out.iterdir() if p.is_dir())

    def blobs(run):
        files = [run / "best.json", *sorted((run / "checkpoints").iterdir())]
        return {p.relative_to(run).as_posix(): p.read_bytes() for p in files}

    def losses(run):
        return [{k: v for k, v in json.loads(line).items() if k != "seconds"}
                for line in (run / "history.jsonl").read_text().splitlines()]

    a, b = blobs(first), blobs(second)
    ok = a == b and losses(first) == losses(second)
    report(8, ok, f"{len(a)} checkpoint files and {len(losses(first))} history records identical"
           if ok else "runs differ")
    assert ok


# --------------------------------------------------------------------------
# 10. dual transitions on symmetric weights
# --------------------------------------------------------------------------

def test_c10_dual_transitions_equal(report):
    rng = np.random.default_rng(100)
    graphs = [random_symmetric(rng, int(rng.integers(2, 21))) for _ in range(100)]
    graphs.append(synthetic_graph(20, 0, 0.01).W)
    worst = 0.0
    for W in graphs:
        fwd, bwd = transition_set(W, "dual_random_walk").matrices
        worst = max(worst, float(np.abs(fwd - bwd).max()))
    ok = worst < 1e-15
    report(10, ok, f"{len(graphs)} symmetric graphs, max abs diff {worst:.1e}")
    assert ok
