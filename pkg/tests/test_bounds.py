import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from boostresnet.boost import BoostConfig, train_boostresnet
from boostresnet.bounds import (ParameterError, SaturationError, block_l1_bound, bounds_report,
                                complexity_terms, generalization_bound, margin_distribution,
                                margin_fraction_bound, margins, path_products, training_error_bound)
from boostresnet.data import make_blobs
from boostresnet.multiclass import train_boostresnet_multiclass
from boostresnet.oracle import OracleConfig
from boostresnet.resnet import ResidualBlock, TrainedResNet

FAST = OracleConfig(epochs=30, learning_rate=0.01, batch_size=32)
PINNED = 14.545357078959611  # T=2, n=2, m=100, theta=1, delta=0.1, identity blocks, r_inf=1, C0=1


def test_training_error_bound_examples():
    assert training_error_bound([0.0] * 5).exponential == 1.0
    b = training_error_bound([0.1] * 100)
    assert b.exponential == pytest.approx(0.606531, abs=1e-6)
    assert b.exponential_clipped == b.exponential
    b = training_error_bound([0.5, -0.2])
    assert b.exponential_clipped == pytest.approx(math.exp(-0.125), abs=1e-15)
    assert b.exponential == pytest.approx(math.exp(-0.5 * (0.25 - 0.04)), abs=1e-15)


@given(st.lists(st.floats(-0.999, 0.999), max_size=30))
def test_product_below_exponential(gammas):
    b = training_error_bound(gammas)
    assert b.product <= b.exponential * (1 + 1e-12)


def test_margin_fraction_bound_examples():
    bound, exact = margin_fraction_bound(2.0, 0.5, [1.0])
    assert bound == pytest.approx(3 * math.exp(-0.5), abs=1e-12)
    assert bound == pytest.approx(1.81959, abs=1e-5) and exact is None
    bound, _ = margin_fraction_bound(0.0, 0.3, [0.2, 0.4])
    assert bound == pytest.approx(math.exp(-0.5 * 0.2), abs=1e-15)
    _, exact = margin_fraction_bound(0.5, 0.3, [0.2], alpha_final=2.0, z_product=0.1)
    assert exact == pytest.approx(math.exp(1.0) * 0.1, abs=1e-15)
    with pytest.raises(SaturationError):
        margin_fraction_bound(1.0, 1.0, [0.1])


def perfect_net():
    return TrainedResNet([], np.array([1.0, 0.0]))


def test_margin_distribution_examples():
    x = np.array([[1.0, 0.0], [2.0, 5.0], [-1.5, 1.0]])
    y = np.array([1, 1, 0])
    rep = margin_distribution(perfect_net(), x, y, thetas=[-10.0, 0.0, 0.5, 1.0])
    assert rep.fractions == [0.0, 0.0, 0.0, 1 / 3]
    assert rep.min_margin == 1.0 and rep.margin_bound == [None] * 4
    assert np.array_equal(margins(perfect_net(), x, y), [1.0, 2.0, 1.5])


@pytest.fixture(scope="module")
def binary_run():
    ds = make_blobs(150, 2, 2, 3.0, seed=7)
    net, run = train_boostresnet(ds.x, ds.y, BoostConfig(t_max=5, patience=10, oracle=FAST))
    return ds, net, run


def test_margin_fraction_at_zero_is_training_error(binary_run):
    ds, net, run = binary_run
    frac = margin_distribution(net, ds.x, ds.y, [0.0]).fractions[0]
    err = float(np.mean(net.predict(ds.x) != ds.y_pm1()))
    assert frac >= err
    ties = int(np.sum(margins(net, ds.x, ds.y) == 0))
    assert frac == err + ties / ds.m


def test_exact_margin_inequality(binary_run):
    ds, net, run = binary_run
    rep = margin_distribution(net, ds.x, ds.y, [0.0, 0.1, 0.5], run.history[-1][0],
                              run.rounds[-1].Z_product)
    for f, b in zip(rep.fractions, rep.margin_bound):
        assert f <= b * (1 + 1e-9)
    assert rep.fractions == sorted(rep.fractions)


def test_multiclass_margins():
    ds = make_blobs(90, 2, 3, 6.0, seed=1)
    net, run = train_boostresnet_multiclass(ds.x, ds.y, 3, BoostConfig(t_max=2, oracle=FAST))
    frac = margin_distribution(net, ds.x, ds.y, [0.0]).fractions[0]
    assert frac == pytest.approx(run.rounds[-1].train_err, abs=1 / 90 + 1e-12)


def identity_net(scale=1.0):
    b = ResidualBlock(np.eye(2) * scale, np.eye(2) * scale)
    return TrainedResNet([b, b], np.array([1.0, 0.0]))


def test_pinned_generalization_bound():
    rep = complexity_terms([1.0, 2.0, 2.0], 1.0, 1.0, 2, 100, 2, 1.0, 0.1)
    assert rep.total == pytest.approx(PINNED, rel=1e-12)
    assert rep.path_products == [2.0, 8.0, 32.0]
    # the same value from a trained-network view
    net = identity_net()
    x = np.tile([[1.0, 0.5], [-1.0, 0.25]], (50, 1))
    y = np.tile([1, 0], 50)
    rep = generalization_bound(net, x, y, 1.0, 0.1)
    assert rep.layer_bounds == [1.0, 2.0, 2.0]
    assert rep.total - rep.margin_term == pytest.approx(PINNED, rel=1e-12)
    assert all(v >= 0 for v in rep.terms.values()) and rep.total >= rep.margin_term


def test_homogeneity_of_path_products():
    lb = [1.0, 1.5, 3.0, 0.5]
    base = path_products(lb)
    doubled = path_products([2 * v for v in lb])
    for t, (a, b) in enumerate(zip(base, doubled)):
        assert b == pytest.approx(a * 2 ** (t + 1), rel=1e-15)
    net = identity_net(2.0)
    assert block_l1_bound(net.blocks[0]) == 1 + 2 * 2


def test_monotonicity():
    args = dict(c0=1.0, r_inf=1.0, n=2, T=3, theta=0.5, delta=0.1)
    totals = [complexity_terms([1, 2, 2, 2], m=m, **args).total for m in (200, 400, 800)]
    assert totals[0] >= totals[1] >= totals[2]
    for i in range(4):
        lb = [1.0, 2.0, 2.0, 2.0]
        up = list(lb)
        up[i] += 0.5
        assert complexity_terms(up, m=200, **args).total >= complexity_terms(lb, m=200, **args).total


def test_parameter_errors():
    with pytest.raises(ParameterError):
        complexity_terms([1, 1, 1], 1, 1, 2, 1, 2, 0.5, 0.1)  # theta^2 m <= log T
    with pytest.raises(ParameterError):
        complexity_terms([1, 1], 1, 1, 2, 100, 1, 1.0, 0.1)
    with pytest.raises(ParameterError):
        complexity_terms([1, 1, 1], 1, 1, 2, 100, 2, 0.0, 0.1)
    with pytest.raises(ParameterError):
        generalization_bound(TrainedResNet([], np.ones(2)), np.ones((3, 2)), np.ones(3), 1.0, 0.1)


def test_bounds_report_shape(binary_run):
    ds, net, run = binary_run
    rep = bounds_report(net, ds.x, ds.y, run, theta=0.5, delta=0.05)
    assert set(rep) == {"margin_report", "complexity_report", "training_error_bound", "per_round"}
    assert len(rep["per_round"]["gamma"]) == len(run.rounds)
    assert rep["complexity_report"]["total"] >= 0
