import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfm.errors import DegenerateBatch, EmptyTestSet, LengthMismatch, NonpositiveDelta
from cfm.metric import OracleMetric, PcpBall
from cfm.metric_learning import (
    LearnedMetric,
    MetricTrainConfig,
    PairDataset,
    TripletDataset,
    build_pairs,
    build_triplets,
    contrastive_loss,
    decorrelation_penalty,
    decorrelation_penalty_grad,
    eval_metric,
    huber_grad,
    huber_loss,
    mcc_from_confusion,
    scenario_loss_and_grad,
    tag_pairs,
    train_metric,
    triplet_loss,
    xicor,
    xicor_matrix,
)
from cfm.scm import lin
from cfm.tensor_nn import FeedForwardNet

from conftest import flat, numeric_param_grad, rel_err

V = np.array([1, 2.5, -1.0])


def xicor_brute(x, y):
    """Chatterjee's statistic from its definition, O(n^2), ties by index."""
    n = len(x)
    order = sorted(range(n), key=lambda i: (x[i], i))
    rank = [sum(1 for m in range(n) if y[m] < y[i] or (y[m] == y[i] and m <= i)) for i in range(n)]
    r = [rank[i] for i in order]
    return 1 - 3 * sum(abs(r[i + 1] - r[i]) for i in range(n - 1)) / (n * n - 1)


# -- datasets ----------------------------------------------------------------


def test_pair_tags_examples():
    m = OracleMetric(lin())
    twin = lin().twins(V)[0]
    assert tag_pairs(m, V, twin, 0.1, "distance").tag[0] == 0.0
    assert tag_pairs(m, V, twin, 0.1, "label").tag[0] == 0.0
    far = np.array([1, 3.5, -1.0])
    assert math.isclose(tag_pairs(m, V, far, 0.2, "distance").tag[0], math.sqrt(2))
    assert tag_pairs(m, V, far, 0.2, "label").tag[0] == 1.0


def test_build_pairs_composition():
    m = OracleMetric(lin())
    pairs = build_pairs(lin(), m, 0.1, 4000, 0, "label")
    inside = np.mean(pairs.tag == 0)
    assert 0.45 <= inside <= 0.55
    twins = np.mean(m(pairs.a, pairs.b) == 0)
    assert 0.03 <= twins <= 0.07
    dist = build_pairs(lin(), m, 0.1, 4000, 0, "distance")
    assert np.all(dist.tag >= 0)
    assert np.array_equal(dist.tag > 0.1 + 1e-9, pairs.tag == 1)
    with pytest.raises(ValueError):
        build_pairs(lin(), m, 0.1, 1, 0)


def test_build_triplets_invariant_and_monotone():
    m = OracleMetric(lin())
    t = build_triplets(lin(), m, 0.1, 1000, 0)
    d_ap, d_an = m(t.anchor, t.positive), m(t.anchor, t.negative)
    assert np.all(d_ap <= 0.1 + 1e-9) and np.all(d_an > 0.1)
    t2 = build_triplets(lin(), m, 0.2, 1000, 0)
    assert np.all(m(t2.anchor, t2.positive) <= 0.2 + 1e-9)
    assert np.all(PcpBall(t.anchor[0], 0.2, m).contains(t.positive[:1]))


# -- losses -----------------------------------------------------------------


def test_huber_examples():
    assert huber_loss(1.0, 1.0) == 0
    assert huber_loss(1.5, 1.0, 1.0) == 0.125
    assert huber_loss(4.0, 1.0, 1.0) == 2.5
    with pytest.raises(NonpositiveDelta):
        huber_loss(1.0, 0.0, 0.0)
    # value and slope continuous at the knee
    eps = 1e-9
    assert math.isclose(huber_loss(1 + eps, 0, 1), huber_loss(1 - eps, 0, 1), abs_tol=1e-8)
    assert math.isclose(huber_grad(1 + eps, 0, 1), huber_grad(1 - eps, 0, 1), abs_tol=1e-8)


def test_contrastive_and_triplet_examples():
    assert math.isclose(contrastive_loss(0.3, 0, 0.1), 0.3)
    assert contrastive_loss(0.3, 1, 0.1) == 0
    assert math.isclose(contrastive_loss(0.05, 1, 0.1), 0.05)
    assert triplet_loss(0.2, 0.5, 0) == 0
    assert math.isclose(triplet_loss(0.5, 0.2, 0), 0.3)
    assert triplet_loss(0.4, 0.4, 0) == 0


# -- xicor ------------------------------------------------------------------


def test_xicor_hand_cases():
    x = np.arange(5.0)
    assert xicor(x, x) == 0.5
    assert xicor(x, -x) == 0.5
    assert xicor(x, np.array([2, 4, 1, 5, 3.0])) == -0.375
    for n in range(2, 30):
        assert math.isclose(xicor(np.arange(n), np.arange(n) ** 3), (n - 2) / (n + 1), rel_tol=0, abs_tol=1e-15)
    with pytest.raises(LengthMismatch):
        xicor([1, 2, 3], [1, 2])


def test_xicor_matches_brute_force():
    rng = np.random.default_rng(0)
    for i in range(300):
        n = int(rng.integers(2, 51))
        if i % 2:
            x, y = rng.integers(0, 5, n).astype(float), rng.integers(0, 5, n).astype(float)
        else:
            x, y = rng.normal(size=n), rng.normal(size=n)
        assert abs(xicor(x, y) - xicor_brute(list(x), list(y))) <= 1e-12


@given(
    st.lists(st.tuples(st.integers(-20, 20), st.integers(-20, 20)), min_size=2, max_size=40)
)
def test_xicor_range_and_monotone_invariance(pts):
    x = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts], dtype=float)
    xi = xicor(x, y)
    assert -0.5 <= xi <= 1
    assert xicor(np.exp(x / 10), y) == xi
    assert xicor(3 * x - 7, y) == xi


def test_xicor_matrix_diagonal():
    e = np.random.default_rng(1).normal(size=(50, 3))
    m = xicor_matrix(e)
    assert np.array_equal(np.diag(m), np.ones(3))
    assert m[0, 1] == xicor(e[:, 0], e[:, 1])


# -- decorrelation ------------------------------------------------------------


def test_decorrelation_examples():
    rng = np.random.default_rng(0)
    assert decorrelation_penalty(rng.normal(size=(20, 1))) == 0
    x = rng.normal(size=1000)
    dep = decorrelation_penalty(np.c_[x, x])
    assert abs(dep - math.sqrt(2)) < 0.05
    indep = decorrelation_penalty(rng.normal(size=(1000, 2)))
    assert dep - indep >= 0.5
    x3 = rng.normal(size=500)
    assert abs(decorrelation_penalty(np.c_[x3, x3, x3]) - math.sqrt(6)) < 0.1


def test_decorrelation_degenerate_policy():
    e = np.random.default_rng(0).normal(size=(10, 3))
    e[:, 1] = 2.0
    with pytest.raises(DegenerateBatch):
        decorrelation_penalty(e)
    value, grad = decorrelation_penalty_grad(e, strict=False)
    assert value >= 1.0
    assert not grad[:, 1].any()
    with pytest.raises(DegenerateBatch):
        decorrelation_penalty(np.ones((3, 2)), strict=False)


@pytest.mark.parametrize("standardize", [True, False])
def test_decorrelation_gradient_fd(standardize):
    for seed in range(3):
        e = np.random.default_rng(seed).normal(size=(12, 3))
        e[:, 2] += e[:, 0] ** 2
        _, g = decorrelation_penalty_grad(e, standardize=standardize)
        num = np.zeros_like(e)
        h = 1e-6
        for i in np.ndindex(e.shape):
            ep, em = e.copy(), e.copy()
            ep[i] += h
            em[i] -= h
            num[i] = (decorrelation_penalty(ep, standardize=standardize) - decorrelation_penalty(em, standardize=standardize)) / (2 * h)
        assert rel_err(g, num) <= 1e-6


# -- training ---------------------------------------------------------------


@pytest.mark.parametrize("scenario", ["distance", "label", "triplet"])
@pytest.mark.parametrize("lam", [0.0, 0.1])
def test_scenario_gradients_fd(scenario, lam):
    scm = lin()
    m = OracleMetric(scm)
    for seed in range(2):
        cfg = MetricTrainConfig(scenario=scenario, delta=0.3, lambda_dec=lam, seed=seed)
        if scenario == "triplet":
            data = build_triplets(scm, m, 0.3, 8, seed)
        else:
            data = build_pairs(scm, m, 0.3, 8, seed, "distance" if scenario == "distance" else "label")
        lm = LearnedMetric(FeedForwardNet([3, 8, 8, 2], seed=seed))
        _, grads = scenario_loss_and_grad(lm, data, cfg)
        num = numeric_param_grad(lm.net, lambda: scenario_loss_and_grad(lm, data, cfg, with_grad=False)[0])
        assert rel_err(flat(grads), num) <= 1e-4


def test_train_metric_zero_epochs_and_determinism():
    scm = lin()
    cfg = MetricTrainConfig(epochs=0, count=200, batch_size=50)
    lm, log = train_metric(scm, cfg)
    assert log == []
    assert np.array_equal(lm.net.flat_params(), FeedForwardNet([3] + [100] * 5 + [2], seed=0).flat_params())
    cfg = MetricTrainConfig(epochs=2, count=200, batch_size=50, seed=3)
    a, la = train_metric(scm, cfg)
    b, lb = train_metric(scm, cfg)
    assert la == lb and np.array_equal(a.net.flat_params(), b.net.flat_params())
    assert len(la) == 2


def test_train_metric_rejects_mismatched_data():
    scm = lin()
    m = OracleMetric(scm)
    with pytest.raises(TypeError):
        train_metric(scm, MetricTrainConfig(scenario="triplet"), build_pairs(scm, m, 0.1, 10, 0))
    with pytest.raises(TypeError):
        train_metric(scm, MetricTrainConfig(scenario="label"), build_triplets(scm, m, 0.1, 10, 0))


def test_config_defaults_and_validation():
    assert MetricTrainConfig(scenario="label", delta=0.2).margin == 0.2
    assert MetricTrainConfig(scenario="triplet").margin == 0.0
    with pytest.raises(ValueError):
        MetricTrainConfig(delta=0)
    with pytest.raises(ValueError):
        MetricTrainConfig(scenario="other")
    assert MetricTrainConfig.preset("paper").count == 10000


def test_distance_scenario_desk_accuracy():
    scm = lin()
    m = OracleMetric(scm)
    lm, _ = train_metric(scm, MetricTrainConfig.preset("desk", seed=0), oracle=m)
    rep = eval_metric(lm, m, 0.1, build_pairs(scm, m, 0.1, 2000, 100, "distance"))
    assert rep.acc >= 0.90


@pytest.mark.parametrize("lam", [0.0, 0.1])
def test_decorrelation_roughly_neutral_on_distance_scenario(lam):
    scm = lin()
    m = OracleMetric(scm)
    test = build_pairs(scm, m, 0.1, 2000, 100, "distance")
    accs = []
    for dec in (0.0, lam):
        lm, _ = train_metric(scm, MetricTrainConfig.preset("desk", seed=0, lambda_dec=dec), oracle=m)
        accs.append(eval_metric(lm, m, 0.1, test).acc)
    assert abs(accs[0] - accs[1]) <= 0.05


# -- evaluation -------------------------------------------------------------


def test_eval_metric_self_and_errors():
    m = OracleMetric(lin())
    pairs = build_pairs(lin(), m, 0.1, 300, 0)
    rep = eval_metric(m, m, 0.1, pairs)
    assert rep.acc == 1.0 and rep.mae == 0 and rep.rmse == 0
    with pytest.raises(EmptyTestSet):
        eval_metric(m, m, 0.1, PairDataset(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), "distance"))


def test_mcc_examples():
    assert math.isclose(mcc_from_confusion(45, 40, 10, 5), 0.7035, abs_tol=5e-5)
    assert mcc_from_confusion(10, 0, 5, 0) == 0.0


def test_learned_metric_pseudo_metric():
    lm = LearnedMetric(FeedForwardNet([3, 16, 2], seed=2))
    rng = np.random.default_rng(0)
    a, b, c = (rng.normal(size=(2000, 3)) for _ in range(3))
    assert np.all(lm(a, b) >= 0)
    assert np.array_equal(lm(a, b), lm(b, a))
    assert np.all(lm(a, c) <= lm(a, b) + lm(b, c) + 1e-9)
