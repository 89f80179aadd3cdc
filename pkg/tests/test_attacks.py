import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memdyn import attacks
from memdyn.attacks import LiraConfig


def naive_rates(decisions, bits):
    N, M = bits.shape
    fpr, tpr = np.empty(M), np.empty(M)
    for j in range(M):
        fi = ni = fo = no = 0
        for i in range(N):
            if bits[i, j]:
                ni += 1
                fi += int(decisions[i, j])
            else:
                no += 1
                fo += int(decisions[i, j])
        tpr[j], fpr[j] = fi / ni, fo / no
    return fpr, tpr


def naive_lira(phi, bits, cfg):
    """Reference log-LR by explicit loops over models and samples."""
    N, M = phi.shape
    out = np.empty((N, M))
    if cfg.variance_mode == "global":
        ssi = sso = di = do = 0.0
        for j in range(M):
            xi = [phi[i, j] for i in range(N) if bits[i, j]]
            xo = [phi[i, j] for i in range(N) if not bits[i, j]]
            ssi += sum((x - np.mean(xi)) ** 2 for x in xi)
            sso += sum((x - np.mean(xo)) ** 2 for x in xo)
            di += len(xi) - 1
            do += len(xo) - 1
    for j in range(M):
        for i in range(N):
            keep = [k for k in range(N) if k != i or not cfg.leave_one_out]
            xi = [phi[k, j] for k in keep if bits[k, j]]
            xo = [phi[k, j] for k in keep if not bits[k, j]]
            if cfg.variance_mode == "global":
                vi, vo = ssi / di, sso / do
            else:
                vi = np.var([phi[k, j] for k in range(N) if bits[k, j]], ddof=1)
                vo = np.var([phi[k, j] for k in range(N) if not bits[k, j]], ddof=1)
            out[i, j] = attacks.lira_score(phi[i, j], xi, xo, LiraConfig("per-sample"), vi, vo)
    return out


def test_logit_examples():
    assert attacks.logit_scale(0.5) == 0
    assert attacks.logit_scale(0.9) == pytest.approx(math.log(9))
    p = np.random.default_rng(0).uniform(1e-6, 1 - 1e-6, 1000)
    assert np.allclose(attacks.logit_scale(p), -attacks.logit_scale(1 - p), atol=1e-9)
    assert np.all(np.diff(attacks.logit_scale(np.sort(p))) >= 0)


def test_lira_score_examples():
    cfg = LiraConfig("per-sample")
    # in-sample mean 2, out-sample mean 0, unit variances supplied
    assert attacks.lira_score(2.0, [1.0, 3.0], [-1.0, 1.0], cfg, 1.0, 1.0) == pytest.approx(2.0)
    assert attacks.lira_score(1.0, [1.0, 3.0], [-1.0, 1.0], cfg, 1.0, 1.0) == pytest.approx(0.0)
    assert attacks.lira_score(7.3, [0.0, 2.0], [0.0, 2.0], cfg) == pytest.approx(0.0)


def test_lira_score_errors():
    with pytest.raises(ValueError):
        attacks.lira_score(0.0, [], [1.0], LiraConfig("per-sample"))
    with pytest.raises(ValueError):
        attacks.lira_score(0.0, [1.0], [1.0])
    with pytest.raises(attacks.DegenerateVarianceError):
        attacks.lira_score(0.0, [1.0, 1.0], [0.0, 2.0], LiraConfig("per-sample"))


@pytest.mark.parametrize("mode", ["global", "per-sample"])
@pytest.mark.parametrize("loo", [True, False])
def test_vectorized_lira_matches_loops(mode, loo):
    rng = np.random.default_rng(1)
    bits = np.zeros((8, 6), dtype=np.uint8)
    for j in range(6):
        bits[rng.permutation(8)[:4], j] = 1
    phi = rng.normal(size=(8, 6)) + 2 * bits
    cfg = LiraConfig(mode, 0.0, loo)
    assert np.allclose(attacks.lira_scores(phi, bits, cfg), naive_lira(phi, bits, cfg), atol=1e-10)


def test_global_variance_is_shared():
    rng = np.random.default_rng(2)
    bits = (rng.random((10, 30)) < 0.5).astype(np.uint8)
    bits[:2], bits[2:4] = 1, 0
    phi = rng.normal(size=(10, 30)) + bits
    vi, vo = attacks.pooled_variances(phi, bits)
    scores = attacks.lira_scores(phi, bits, LiraConfig("global"))
    for j in range(30):
        for i in range(10):
            keep = np.arange(10) != i
            xi = phi[keep & (bits[:, j] == 1), j]
            xo = phi[keep & (bits[:, j] == 0), j]
            ref = attacks.lira_score(phi[i, j], xi, xo, LiraConfig(), vi, vo)
            assert scores[i, j] == pytest.approx(ref, abs=1e-10)


def test_degenerate_variance_names_epoch():
    bits = np.array([[1, 1], [1, 1], [0, 0], [0, 0]], dtype=np.uint8)
    with pytest.raises(attacks.DegenerateVarianceError, match="epoch 7"):
        attacks.lira_scores(np.ones((4, 2)), bits, LiraConfig("per-sample"), epoch=7)
    with pytest.raises(attacks.DegenerateVarianceError, match="epoch 7"):
        attacks.lira_scores(np.ones((4, 2)), bits, LiraConfig("global"), epoch=7)


def test_rates_examples():
    bits = np.array([[1], [1], [0], [0]])
    assert attacks.rates_from_decisions(bits, bits) == (0.0, 1.0)
    f, t = attacks.rates_from_decisions(np.ones((4, 1)), bits)
    assert (f[0], t[0]) == (1.0, 1.0)


def test_rates_match_naive_oracle_1000_fixtures():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        N, M = rng.integers(4, 12), rng.integers(1, 8)
        bits = np.zeros((N, M), dtype=np.uint8)
        for j in range(M):
            bits[rng.permutation(N)[: rng.integers(2, N - 1)], j] = 1
        d = rng.integers(0, 2, (N, M))
        f, t = attacks.rates_from_decisions(d, bits)
        nf, nt = naive_rates(d, bits)
        assert np.array_equal(f, nf) and np.array_equal(t, nt)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(0, 3))
def test_threshold_monotone(seed, tau, step):
    rng = np.random.default_rng(seed)
    bits = np.zeros((8, 5), dtype=np.uint8)
    for j in range(5):
        bits[rng.permutation(8)[:4], j] = 1
    phi = rng.normal(size=(8, 5)) + bits
    s = attacks.lira_scores(phi, bits)
    f1, t1 = attacks.rates_from_decisions(s > tau, bits)
    f2, t2 = attacks.rates_from_decisions(s > tau + step, bits)
    assert np.all(f2 <= f1) and np.all(t2 <= t1)


def test_analytic_roc():
    from scipy.stats import norm
    target = 2 * norm.cdf(1) - 1
    rng = np.random.default_rng(4)
    bits = np.repeat([[1], [0]], 200, axis=0).astype(np.uint8)
    hits = 0
    for _ in range(100):
        phi = rng.normal(size=(400, 1)) + 2 * bits
        f, t = attacks.rates_from_decisions(attacks.lira_scores(phi, bits) > 0, bits)
        hits += abs((t - f)[0] - target) <= 0.12
    assert hits >= 95


def test_field_order_invariance_and_shape(tiny_population):
    pool, plan, cfg, runs, log = tiny_population
    field = attacks.vulnerability_field(log)
    assert field.fpr.shape == (pool.n_samples, len(log.epochs))
    trajs = field.trajectories()
    assert len(trajs) == pool.n_samples and all(len(t) == len(log.epochs) for t in trajs)
    perm = np.random.default_rng(0).permutation(len(log.model_ids))
    shuffled = dataclasses.replace(
        log, model_ids=log.model_ids[perm], member=log.member[perm], conf=log.conf[:, perm],
        loss=log.loss[:, perm], correct=log.correct[:, perm], posteriors=log.posteriors[:, perm])
    other = attacks.vulnerability_field(shuffled)
    assert np.array_equal(field.fpr, other.fpr) and np.array_equal(field.tpr, other.tpr)


def test_initial_states_near_diagonal(tiny_population):
    # at threshold 0 binomial noise over a handful of models dominates |alpha|
    log = tiny_population[4]
    field = attacks.vulnerability_field(log, LiraConfig(threshold=2.0))
    assert np.abs(field.advantage[:, 0]).mean() < 0.15


def test_estimate_state_agrees_with_field(tiny_population):
    pool, _, _, _, log = tiny_population
    field = attacks.vulnerability_field(log)
    s = attacks.estimate_state(int(log.sample_ids[7]), int(log.epochs[-1]), log)
    assert (s.fpr, s.tpr) == (field.fpr[7, -1], field.tpr[7, -1])
    sh = attacks.estimate_state(7, int(log.epochs[-1]), log, method="shokri", labels=pool.labels)
    assert 0 <= sh.fpr <= 1


def test_field_records_order(tiny_population):
    field = attacks.vulnerability_field(tiny_population[4])
    recs = list(field.records())
    keys = [(e, s) for e, s, *_ in recs]
    assert keys == sorted(keys)
    assert all(a == t - f for _, _, f, t, a in recs)


def test_unknown_method(tiny_population):
    with pytest.raises(ValueError):
        attacks.vulnerability_field(tiny_population[4], method="yeom")
    with pytest.raises(ValueError, match="posteriors"):
        attacks.vulnerability_field(tiny_population[4], method="shokri")


def _synthetic_posteriors(rng, n, member):
    hi = np.where(member, 0.99, 0.5)
    p = np.empty((n, 3))
    p[:, 0] = np.clip(hi + rng.normal(scale=0.02, size=n), 0.34, 0.999)
    p[:, 1] = (1 - p[:, 0]) * 0.6
    p[:, 2] = 1 - p[:, 0] - p[:, 1]
    return p


def test_shokri_separable_fixture():
    rng = np.random.default_rng(5)
    m = rng.integers(0, 2, 2000)
    labels = rng.integers(0, 3, 2000)
    post = _synthetic_posteriors(rng, 2000, m)
    model = attacks.shokri_train(post[:1000], labels[:1000], m[:1000], 3)
    assert model.weights.shape == (3, 4)
    acc = np.mean(model.decide(post[1000:], labels[1000:]) == m[1000:])
    assert acc > 0.95


def test_shokri_features_sorted():
    post = np.array([[0.1, 0.7, 0.2]])
    assert attacks.sorted_features(post).tolist() == [[0.7, 0.2, 0.1]]


def test_shokri_single_label_class_errors():
    post = np.full((4, 2), 0.5)
    with pytest.raises(ValueError, match="class 0"):
        attacks.shokri_train(post, np.zeros(4, int), np.ones(4, int), 2)


def test_shokri_constant_classifier_on_diagonal():
    model = attacks.ShokriAttackModel(np.array([[5.0, 0, 0], [5.0, 0, 0]]))
    d = np.stack([model.decide(np.full((3, 2), 0.5), np.array([0, 1, 0])) for _ in range(6)])
    bits = np.array([[1, 1, 1]] * 3 + [[0, 0, 0]] * 3)
    f, t = attacks.rates_from_decisions(d, bits)
    assert np.array_equal(f, t)


def test_fit_logistic_matches_known_solution():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(5000, 2))
    w_true = np.array([0.5, 2.0, -1.0])
    y = (rng.random(5000) < 1 / (1 + np.exp(-(w_true[0] + X @ w_true[1:])))).astype(float)
    w = attacks.fit_logistic(X, y, l2=0.0)
    assert np.allclose(w, w_true, atol=0.15)
