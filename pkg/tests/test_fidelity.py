import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from hifikit import fidelity as F
from hifikit import model as mdl
from hifikit.errors import EmptyAccumulator, FormatError, TapMismatch

from conftest import random_spd

Q2 = np.array([[2.0, 1.0], [1.0, 2.0]])
D3 = np.diag([1.0, 2.0, 3.0])


def test_accumulator_single_sample_gram():
    a, b = np.array([1.0, 2.0, 0.5]), np.array([-1.0, 0.0, 3.0])
    acc = F.new_accumulator(0, 1, 2, 3)
    F.accumulate(acc, np.stack([a, b])[None, None])
    expected = [[a @ a, a @ b], [a @ b, b @ b]]
    np.testing.assert_array_equal(acc.qsum[0], expected)
    assert acc.count == 1


def test_merge_is_exact_on_integers(rng):
    t = rng.integers(-5, 5, size=(10, 2, 3, 4)).astype(np.float64)
    whole = F.accumulate(F.new_accumulator(0, 2, 3, 4), t)
    a = F.accumulate(F.new_accumulator(0, 2, 3, 4), t[:4])
    b = F.accumulate(F.new_accumulator(0, 2, 3, 4), t[4:])
    m = F.merge(a, b)
    np.testing.assert_array_equal(m.qsum, whole.qsum)
    np.testing.assert_array_equal(m.msum, whole.msum)
    assert m.count == whole.count


def test_orthogonal_contributions_give_diagonal():
    t = np.zeros((5, 1, 3, 6))
    rng = np.random.default_rng(0)
    for i in range(3):
        t[:, 0, i, 2 * i : 2 * i + 2] = rng.standard_normal((5, 2))
    q = F.finalize(F.accumulate(F.new_accumulator(0, 1, 3, 6), t))[0].q
    assert np.all(q[~np.eye(3, dtype=bool)] == 0)


def test_constant_contributions_centered_vs_plain():
    c = np.array([[1.0, 2.0], [0.5, -1.0]])  # (c_in=2, positions=2)
    t = np.broadcast_to(c, (7, 1, 2, 2))
    acc = F.accumulate(F.new_accumulator(0, 1, 2, 2), t)
    np.testing.assert_allclose(F.finalize(acc, F.CENTERED)[0].q, 0.0, atol=1e-12)
    np.testing.assert_allclose(F.finalize(acc, F.PLAIN)[0].q, c @ c.T)


def test_centered_close_to_plain_for_zero_mean(rng):
    t = rng.standard_normal((10_000, 1, 3, 2))
    acc = F.accumulate(F.new_accumulator(0, 1, 3, 2), t)
    p = F.finalize(acc, F.PLAIN)[0].q
    c = F.finalize(acc, F.CENTERED)[0].q
    assert np.max(np.abs(p - c)) < 0.01


def test_accumulator_errors():
    acc = F.new_accumulator(0, 1, 2, 3)
    with pytest.raises(EmptyAccumulator):
        F.finalize(acc)
    with pytest.raises(TapMismatch):
        F.accumulate(acc, np.zeros((1, 1, 3, 3)))
    with pytest.raises(TapMismatch):
        F.merge(acc, F.new_accumulator(1, 1, 2, 3))


def test_estimate_csms_matches_definition(blob_mlp):
    model, _, train, _ = blob_mlp
    x = train.x[:50]
    csms = F.estimate_csms(model, x, 2, batch_size=7)
    h = mdl.layer_inputs(model, x, 2)
    W = model.layers[2].params["weight"]
    c = 3
    A = h * W[c][None, :]
    np.testing.assert_allclose(csms[c].q, A.T @ A / len(x), rtol=1e-10)
    assert csms[c].variant == F.PLAIN and csms[c].n_samples == 50


def test_default_variant_before_batchnorm(small_cnn):
    model = small_cnn[0]
    assert F.default_variant(model, 0) == F.CENTERED
    assert F.default_variant(model, len(model.layers) - 1) == F.PLAIN


def test_full_set_is_exact():
    r = F.subset_fidelity(random_spd(np.random.default_rng(0), 5), range(5), 0.0)
    np.testing.assert_array_equal(r.delta, np.ones(5))
    assert r.fidelity == 1.0


def _brute_force_fs(Q, C):
    # oracle: minimize E||Y - sum_{i in C} d_i A_i||^2 numerically
    n = Q.shape[0]

    def resid(d):
        u = np.ones(n)
        u[list(C)] -= d
        return u @ Q @ u

    res = minimize(resid, np.ones(len(C)), method="BFGS", options={"gtol": 1e-12})
    return 1 - res.fun / Q.sum(), res.x


def test_two_by_two_example():
    r = F.subset_fidelity(Q2, [0], 0.0)
    assert r.delta[0] == pytest.approx(1.5)
    assert r.fidelity == pytest.approx(0.75)
    fs, d = _brute_force_fs(Q2, [0])
    assert r.fidelity == pytest.approx(fs, abs=1e-9)
    assert r.delta[0] == pytest.approx(d[0], abs=1e-6)


def test_diagonal_example():
    r = F.subset_fidelity(D3, [2], 0.0)
    assert r.delta[2] == pytest.approx(1.0)
    assert r.fidelity == pytest.approx(0.5)


def test_subset_matches_brute_force(rng):
    for _ in range(10):
        Q = random_spd(rng, 5, rank=3)
        C = sorted(rng.choice(5, size=2, replace=False))
        assert F.subset_fidelity(Q, C, 0.0).fidelity == pytest.approx(_brute_force_fs(Q, C)[0], abs=1e-7)


def test_dead_channel():
    r = F.subset_fidelity(np.zeros((3, 3)), [1], 0.0)
    assert r.fidelity == 1.0 and r.dead


def test_invalid_subset():
    with pytest.raises(ValueError):
        F.subset_fidelity(D3, [], 0.0)
    with pytest.raises(ValueError):
        F.subset_fidelity(D3, [3], 0.0)


def test_singleton_examples():
    s = F.singleton_scores(D3)
    np.testing.assert_allclose(s.s, [1 / 6, 2 / 6, 3 / 6])
    np.testing.assert_allclose(s.alpha, [1, 1, 1])
    s = F.singleton_scores(Q2)
    np.testing.assert_allclose(s.alpha, [1.5, 1.5])
    np.testing.assert_allclose(s.s, [0.75, 0.75])
    Q = np.zeros((3, 3))
    Q[:2, :2] = Q2
    assert F.singleton_scores(Q).s[2] == 0.0


def test_singleton_equals_subset_fidelity(rng):
    for _ in range(20):
        Q = random_spd(rng, 6)
        s = F.singleton_scores(Q).s
        for i in range(6):
            assert s[i] == pytest.approx(F.subset_fidelity(Q, [i], 0.0).fidelity, abs=1e-9)


def test_cholesky_heuristic_examples():
    np.testing.assert_allclose(F.cholesky_heuristic(D3, 0.0), [1, 2, 3])
    np.testing.assert_allclose(F.cholesky_heuristic(np.eye(4), 1e-4), np.full(4, 1.0001))


def test_saliency_examples(rng):
    np.testing.assert_allclose(F.saliency(D3), [1, 2, 3])
    np.testing.assert_allclose(F.saliency(Q2), [3, 3])
    Q = random_spd(rng, 7)
    np.testing.assert_allclose(F.saliency(Q), F.singleton_scores(Q).alpha * np.diag(Q))


def test_heuristic_rank_agreement_logged(blob_mlp):
    model, _, train, _ = blob_mlp
    csm = F.estimate_csms(model, train.x, 2)[0]
    from hifikit.numerics import spearman_rank

    rho = spearman_rank(F.cholesky_heuristic(csm), F.singleton_scores(csm).s)
    print(f"cholesky heuristic vs singleton spearman: {rho:.3f}")
    assert -1 <= rho <= 1


def test_masked_energy_matches_direct(blob_mlp):
    model, _, train, _ = blob_mlp
    x = train.x[:40]
    csms = F.estimate_csms(model, x, 2)
    mask = (np.random.default_rng(0).random(csms[0].dim) < 0.5).astype(float)
    h = mdl.layer_inputs(model, x, 2)
    W = model.layers[2].params["weight"]
    direct = np.mean(((h * (1 - mask)) @ W[0]) ** 2)
    assert F.masked_energy(csms[0], mask) == pytest.approx(direct, rel=1e-10)


def test_csm_dump_roundtrip(tmp_path, rng):
    csms = [F.CSM(random_spd(rng, 4), F.CENTERED, 3, c, 10) for c in range(2)]
    F.save_csms(csms, tmp_path / "c.json")
    back = F.load_csms(tmp_path / "c.json")
    for a, b in zip(csms, back):
        np.testing.assert_array_equal(np.triu(a.q), np.triu(b.q))
        np.testing.assert_array_equal(b.q, b.q.T)
        assert (a.variant, a.layer, a.channel, a.n_samples) == (b.variant, b.layer, b.channel, b.n_samples)
    with pytest.raises(FormatError):
        F.csm_from_dict({"dim": 3, "q": [1.0, 2.0]})


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**31 - 1), st.data())
def test_fidelity_bounded_and_monotone(n, seed, data):
    rng = np.random.default_rng(seed)
    Q = random_spd(rng, n, rank=data.draw(st.integers(1, n)))
    D_ = sorted(data.draw(st.sets(st.integers(0, n - 1), min_size=1, max_size=n)))
    extra = data.draw(st.sets(st.integers(0, n - 1)))
    C = sorted(set(D_) | extra)
    lam = data.draw(st.sampled_from([1e-8, 1e-4]))
    fd = F.subset_fidelity(Q, D_, lam).fidelity
    fc = F.subset_fidelity(Q, C, lam).fidelity
    assert 0.0 <= fd <= 1.0 and 0.0 <= fc <= 1.0
    assert fd <= fc + 1e-6
