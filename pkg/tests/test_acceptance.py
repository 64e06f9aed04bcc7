"""Acceptance criteria, each run at its stated tolerance and time limit.

Every test records one PASS/FAIL line; ``conftest.py`` prints the collected
lines in the terminal summary so they appear in plain ``pytest`` output.
"""
import math
import time

import numpy as np
import pytest

from hifikit import analysis as A
from hifikit import data as D
from hifikit import fidelity as F
from hifikit import model as mdl
from hifikit import modify as M
from hifikit import selection as S

RESULTS = []
SEEDS = range(5)


def _record(n, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail} ({elapsed:.1f}s, limit {limit:.0f}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _wishart(rng, n):
    A_ = rng.standard_normal((n, 2 * n))
    return A_ @ A_.T / (2 * n)


# ---------------------------------------------------------------- 1


def test_criterion_01_fidelity_range_and_monotonicity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    out_of_range = nonmono = 0
    for _ in range(500):
        n = int(rng.integers(4, 33))
        Q = _wishart(rng, n)
        C = rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False)
        fs = F.subset_fidelity(Q, C, 0.0).fidelity
        out_of_range += not (0.0 <= fs <= 1.0 + 1e-9)
    for _ in range(500):
        n = int(rng.integers(4, 33))
        Q = _wishart(rng, n)
        C = rng.choice(n, size=int(rng.integers(2, n + 1)), replace=False)
        D_ = C[: int(rng.integers(1, len(C)))]
        nonmono += F.subset_fidelity(Q, D_, 0.0).fidelity > F.subset_fidelity(Q, C, 0.0).fidelity + 1e-9
    _record(1, out_of_range == 0 and nonmono == 0, f"FS range violations {out_of_range}/500, nesting violations {nonmono}/500", time.perf_counter() - t0, 30)


# ---------------------------------------------------------------- 2


def _orthogonal_layer_csms(rng, c_in, c_out):
    # each sample activates a single input feature, so contributions of
    # different inputs never overlap and every CSM is diagonal
    n = 40 * c_in
    x = np.zeros((n, c_in))
    which = rng.integers(0, c_in, n)
    x[np.arange(n), which] = rng.standard_normal(n) * rng.uniform(0.5, 2.0, c_in)[which]
    layer = mdl.dense(c_in, c_out, rng)
    model = mdl.ModelGraph([layer], c_out, (c_in,))
    return F.estimate_csms(model, x, 0)


def test_criterion_02_naive_equals_exhaustive_for_uncorrelated():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    cases = [F.CSM(np.diag(rng.uniform(0.01, 10.0, int(rng.integers(2, 13))))) for _ in range(100)]
    for _ in range(20):
        cases += _orthogonal_layer_csms(rng, int(rng.integers(3, 13)), 2)
    mismatches = checked = 0
    for csm in cases:
        off = csm.q - np.diag(np.diag(csm.q))
        assert not off.any()
        s = F.singleton_scores(csm)
        for k in range(1, csm.dim + 1):
            checked += 1
            mismatches += S.naive_topk(s, k).indices != S.exhaustive_mfs(csm, k, lam=0.0).indices
    _record(2, mismatches == 0, f"naive vs exhaustive set mismatches {mismatches}/{checked} (k, CSM) pairs", time.perf_counter() - t0, 120)


# ---------------------------------------------------------------- 3


def test_criterion_03_compensation_optimality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    beaten = 0
    worst_kkt = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 13))
        Q = _wishart(rng, n)
        C = np.sort(rng.choice(n, size=int(rng.integers(1, n)), replace=False))
        r = F.subset_fidelity(Q, C, 0.0)
        best = F.residual_energy(Q, r.delta)
        u = 1.0 - r.delta
        kkt = np.linalg.norm(2 * (Q @ u)[C]) / np.linalg.norm(Q)
        worst_kkt = max(worst_kkt, kkt)
        pert = np.zeros((1000, n))
        scale = rng.choice([1e-4, 1e-2, 1.0], size=(1000, 1))
        pert[:, C] = rng.standard_normal((1000, len(C))) * scale
        deltas = r.delta + pert
        U = 1.0 - deltas
        resid = np.einsum("ni,ij,nj->n", U, Q, U)
        beaten += int(np.sum(resid < best - 1e-12 * max(best, 1.0)))
    _record(3, beaten == 0 and worst_kkt <= 1e-8, f"perturbations beating closed form {beaten}/200000, max KKT norm / ||Q||_F {worst_kkt:.1e}", time.perf_counter() - t0, 60)


# ---------------------------------------------------------------- 4


def test_criterion_04_local_to_global_bound():
    t0 = time.perf_counter()
    src = D.blob_source(4, 12, separation=3.0, seed=4)
    mlp = mdl.train(mdl.mlp(12, [32, 24], 4, seed=4), D.sample(src, 100, seed=0), mdl.TrainConfig(epochs=20))
    mlp_data = D.sample(src, 50, seed=1)
    img = D.pattern_source(3, (2, 8, 8), seed=4)
    cnn = mdl.train(mdl.cnn((2, 8, 8), [6, 8], 3, seed=4), D.sample(img, 50, seed=0), mdl.TrainConfig(epochs=10))
    cnn_data = D.sample(img, 30, seed=1)
    violations = total = 0
    notes = []
    for name, model, data, layers in (("mlp", mlp, mlp_data, (0, 2)), ("cnn", cnn, cnn_data, (0, 3))):
        for l in layers:
            masks = A.random_masks(mdl.component_shape(model.layers[l]), 100, seed=l)
            res = A.bound_check(model, l, masks, data)
            total += len(res)
            violations += sum(not r.satisfied for r in res)
            ratios = np.array([r.ratio for r in res if r.local_error > 0])
            notes.append(f"{name}@{l} ratio median {np.median(ratios):.3g} vs C^2 {res[0].worst_case_c2:.3g}")
    print("; ".join(notes))
    _record(4, violations == 0, f"bound violations {violations}/{total}; " + "; ".join(notes), time.perf_counter() - t0, 300)


# ---------------------------------------------------------------- 5


def test_criterion_05_monte_carlo_lower_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    above = checks = 0
    for _ in range(10):
        # half full rank, half rank-deficient with a small ridge
        if rng.random() < 0.5:
            csm = F.CSM(_wishart(rng, 8))
        else:
            B = rng.standard_normal((8, 3))
            csm = F.CSM(B @ B.T + 1e-3 * np.eye(8))
        exact = {k: S.exhaustive_mfs(csm, k).fidelity for k in range(1, 9)}
        for seed in SEEDS:
            for k in range(1, 9):
                checks += 1
                above += S.monte_carlo_mfs(csm, k, n_samples=50, seed=seed).fidelity > exact[k]
    disagree = small = 0
    for _ in range(10):
        csm = F.CSM(_wishart(rng, 6))
        for k in range(1, 7):
            small += 1
            mc = S.monte_carlo_mfs(csm, k, n_samples=500, seed=int(rng.integers(1 << 30)))
            ex = S.exhaustive_mfs(csm, k)
            disagree += mc.indices != ex.indices or mc.fidelity != ex.fidelity
    _record(5, above == 0 and disagree == 0, f"MC above exhaustive {above}/{checks}; n=500 disagreements on 6x6 {disagree}/{small}", time.perf_counter() - t0, 60)


# ---------------------------------------------------------------- 6


def _prune_fixture(seed):
    src = D.blob_source(8, 20, separation=2.5, components=2, seed=seed)
    train = D.sample(src, 150, seed=100 + seed)
    test = D.sample(src, 200, seed=200 + seed)
    model = mdl.train(mdl.mlp(20, [32, 32], 8, seed=seed), train, mdl.TrainConfig(epochs=30, seed=seed))
    return model, src, test


def test_criterion_06_pruning_compensation():
    t0 = time.perf_counter()
    wins = {M.UNION: 0, M.BUDGET: 0}
    removed = {M.UNION: [], M.BUDGET: []}
    identity_ok = True
    for seed in SEEDS:
        model, src, test = _prune_fixture(seed)
        for mode in (M.UNION, M.BUDGET):
            acc = {}
            for comp in (True, False):
                plan = M.PrunePlan([2, 4], keep_fraction=0.7, compensate=comp, mode=mode, seed=seed)
                _, rep = M.modhifi_prune(model, plan, src, test)
                acc[comp] = rep["metrics_after"]["accuracy"]
            removed[mode].append(sum(r["removed"] for r in rep["per_layer"]))
            wins[mode] += acc[True] >= acc[False]
        same, rep = M.modhifi_prune(model, M.PrunePlan([2, 4], keep_fraction=1.0, seed=seed), src, test)
        for a, b in zip(model.layers, same.layers):
            for k in a.params:
                identity_ok &= np.array_equal(a.params[k], b.params[k])
        identity_ok &= np.array_equal(mdl.predict(same, test.x), mdl.predict(model, test.x))
    ok = wins[M.UNION] >= 4 and wins[M.BUDGET] >= 4 and identity_ok
    detail = (
        f"compensated >= uncompensated in {wins[M.UNION]}/5 (union rule, inputs removed {removed[M.UNION]}) "
        f"and {wins[M.BUDGET]}/5 (budget rule, removed {removed[M.BUDGET]}); keep 1.0 exact: {identity_ok}"
    )
    _record(6, ok, detail, time.perf_counter() - t0, 180)


# ---------------------------------------------------------------- 7


def test_criterion_07_unlearning():
    t0 = time.perf_counter()
    good = 0
    rows = []
    for seed in SEEDS:
        src = D.blob_source(3, 16, separation=4.0, seed=seed)
        train = D.sample(src, 150, seed=seed + 1)
        test = D.sample(src, 200, seed=seed + 2)
        model = mdl.train(mdl.mlp(16, [64, 64], 3, seed=seed), train, mdl.TrainConfig(epochs=30, seed=seed))
        forget = D.sample(src, 100, classes=[0], seed=seed + 3)
        _, rep = M.modhifi_unlearn(model, M.UnlearnPlan(0, [2, 4], fraction=0.1, variant=M.ZERO), forget, test)
        f = rep["metrics_after"]["forget_accuracy"]
        r0 = rep["metrics_before"]["retain_accuracy"]
        r1 = rep["metrics_after"]["retain_accuracy"]
        rows.append(f"{f:.2f}/{r1 / r0:.2f}")
        good += f < 0.2 and r1 >= 0.8 * r0
    _record(7, good >= 4, f"forget<0.2 and retain>=0.8x in {good}/5 seeds (forget acc / retain ratio: {', '.join(rows)})", time.perf_counter() - t0, 180)


# ---------------------------------------------------------------- 8


def test_criterion_08_noise_and_counterfactual_direction():
    t0 = time.perf_counter()
    noise_wins = cf_wins = cf_order = 0
    rows = []
    for seed in SEEDS:
        model, src, test = _prune_fixture(seed)
        layer = 2
        scores = A.component_scores(model, layer, D.sample(src, 100, seed=300 + seed))
        sigma = float(np.std(model.layers[layer].params["weight"]))
        noise = {
            kind: np.mean([A.noise_experiment(model, layer, scores, sigma, 0.25, kind, 1000 * seed + j, test) for j in range(10)])
            for kind in (A.HIFI, A.NON_HIFI, A.RANDOM)
        }
        cf = {kind: A.counterfactual_removal(model, layer, scores, kind, 8, seed, test) for kind in (A.HIFI, A.NON_HIFI, A.RANDOM)}
        noise_wins += noise[A.HIFI] < noise[A.NON_HIFI] and noise[A.HIFI] < noise[A.RANDOM]
        cf_wins += cf[A.HIFI] < cf[A.NON_HIFI] and cf[A.HIFI] < cf[A.RANDOM]
        cf_order += abs(cf[A.HIFI]) > abs(cf[A.RANDOM]) > abs(cf[A.NON_HIFI])
        rows.append(f"noise {noise[A.HIFI]:+.3f}/{noise[A.NON_HIFI]:+.3f}/{noise[A.RANDOM]:+.3f} removal {cf[A.HIFI]:+.3f}/{cf[A.NON_HIFI]:+.3f}/{cf[A.RANDOM]:+.3f}")
    print("\n".join(rows))
    detail = f"HiFi noising worst in {noise_wins}/5, HiFi removal worst in {cf_wins}/5, full removal ordering in {cf_order}/5 seeds"
    _record(8, noise_wins >= 4 and cf_wins >= 4, detail, time.perf_counter() - t0, 300)


# ---------------------------------------------------------------- 9


def _closed_form_params(model):
    total = 0
    for layer in model.layers:
        P = layer.params
        if layer.kind in ("Dense", "Conv2D"):
            total += math.prod(P["weight"].shape) + P["weight"].shape[0]
        elif layer.kind == "BatchNorm2D":
            total += 2 * P["gamma"].shape[0]
        elif layer.kind in mdl.NORM_KINDS:
            total += 2 * P["gamma"].shape[0]
        elif layer.kind == "FFNBlock":
            d_ff, d = P["w_up"].shape
            total += 2 * d + d_ff * d + d_ff + d * d_ff + d
    return total


def test_criterion_09_compaction_equivalence_and_accounting():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    worst = 0.0
    param_ok = True
    details = []
    cases = []
    src = D.blob_source(4, 10, seed=9)
    m = mdl.train(mdl.mlp(10, [24, 16], 4, seed=9), D.sample(src, 60, seed=0), mdl.TrainConfig(epochs=5))
    cases.append(("mlp", m, src, [2, 4]))
    img = D.pattern_source(3, (2, 8, 8), seed=9)
    c = mdl.train(mdl.cnn((2, 8, 8), [6, 8], 3, seed=9), D.sample(img, 30, seed=0), mdl.TrainConfig(epochs=3))
    cases.append(("cnn", c, img, [3, 7]))
    tok = D.pattern_source(3, (4, 8), seed=9)
    f = mdl.train(mdl.ffn_classifier(4, 8, 16, 3, seed=9), D.sample(tok, 30, seed=0), mdl.TrainConfig(epochs=3))
    cases.append(("ffn", f, tok, [0, 1]))
    for name, model, source, layers in cases:
        pruned, _ = M.modhifi_prune(model, M.PrunePlan(layers, 0.5, mode=M.BUDGET, n_per_class=30), source)
        compacted = M.compact(pruned)
        x = rng.standard_normal((100,) + model.input_shape)
        diff = float(np.max(np.abs(mdl.predict(compacted, x) - mdl.predict(pruned, x))))
        worst = max(worst, diff)
        counted = M.flop_param_report(compacted)["total"]["params"]
        expected = _closed_form_params(compacted)
        param_ok &= counted == expected == mdl.parameter_count(compacted)
        details.append(f"{name} params {mdl.parameter_count(pruned)}->{counted}")
    _record(9, worst <= 1e-12 and param_ok, f"max |masked - compacted| {worst:.1e}; closed-form params match: {param_ok}; " + ", ".join(details), time.perf_counter() - t0, 30)


# ---------------------------------------------------------------- 10


def _pairs(rng, kind, d, r, n):
    """``n`` pairs with ``||M x||, ||M y|| >= r``, many of them close together near the radius."""

    def project(v):
        return v - v.mean(axis=1, keepdims=True) if kind == "LayerNorm" else v

    def at_least_r(v):
        z = project(v)
        zn = np.linalg.norm(z, axis=1, keepdims=True)
        target = r * np.where(rng.random((len(v), 1)) < 0.5, 1.0, rng.uniform(1.0, 4.0, (len(v), 1)))
        return v + z * (target / zn - 1.0)

    x = at_least_r(rng.standard_normal((n, d)))
    step = rng.standard_normal((n, d)) * rng.choice([1e-3, 1e-1, 1.0, 10.0], size=(n, 1)) * r
    y = at_least_r(x + step)
    return x, y


def test_criterion_10_norm_layer_lipschitz_witnesses():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    unit_viol = gamma_viol = 0
    max_ratio = 0.0
    for kind in ("LayerNorm", "RMSNorm"):
        d, r = 6, 0.7
        x, y = _pairs(rng, kind, d, r, 10_000)
        # unit normalization: gamma = 1, beta = 0
        unit = mdl.ModelGraph([mdl.norm_layer(kind, d, gamma=1.0)], d, (d,))
        L = A.layer_lipschitz(unit.layers[0], r=r)
        lhs = np.linalg.norm(mdl.predict(unit, x) - mdl.predict(unit, y), axis=1)
        rhs = np.linalg.norm(x - y, axis=1)
        unit_viol += int(np.sum(lhs > L * rhs * (1 + 1e-12)))
        max_ratio = max(max_ratio, float(np.max(lhs / (L * rhs))))
        layer = mdl.norm_layer(kind, d)
        layer.params["gamma"] = rng.uniform(-3, 3, d)
        layer.params["beta"] = rng.standard_normal(d)
        scaled = mdl.ModelGraph([layer], d, (d,))
        Lg = A.layer_lipschitz(layer, r=r)
        assert Lg == pytest.approx(np.max(np.abs(layer.params["gamma"])) / r)
        lhs = np.linalg.norm(mdl.predict(scaled, x) - mdl.predict(scaled, y), axis=1)
        gamma_viol += int(np.sum(lhs > Lg * rhs * (1 + 1e-12)))
    detail = f"unit-norm (1/r) violations {unit_viol}/20000, gamma-scaled violations {gamma_viol}/20000, tightest unit ratio {max_ratio:.4f}"
    _record(10, unit_viol == 0 and gamma_viol == 0, detail, time.perf_counter() - t0, 60)
