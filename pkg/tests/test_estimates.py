import numpy as np
import pytest

from hjblab.estimates import (CertificateError, CertificateThresholds, PairSampler, certify,
                              control_norm_certificate, deteriorated_check, growth_envelope,
                              lipschitz_quotient, sup_gradient)
from hjblab.grid import ValueFunction, build_grid
from hjblab.problem import closed_form_problem
from hjblab.solver import ControlField, SchemeConfig, solve, synthesize_feedback


def sample(grid, fn):
    x = grid.nodes()
    return ValueFunction(grid, np.stack([fn(t, x).reshape(grid.shape) for t in grid.times]))


@pytest.fixture
def g1():
    return build_grid([0.0], 4.0, 33, 4, 1.0)


@pytest.fixture(scope="module")
def cf():
    p = closed_form_problem()
    g = build_grid([0.0], 4.0, 33, 16, 1.0)
    u, _ = solve(p, g, 4.0, SchemeConfig())
    return p, u, synthesize_feedback(p, u, 4.0, 20)


def test_sup_gradient_zero(g1):
    assert sup_gradient(ValueFunction.zeros(g1)) == 0.0


def test_sup_gradient_closed_form(cf):
    assert sup_gradient(cf[1]) == pytest.approx(1.0, abs=1e-12)


def test_sup_gradient_sine():
    g = build_grid([0.0], 1.0, 201, 1, 1.0)  # h = 0.01
    assert sup_gradient(sample(g, lambda t, x: np.sin(x[:, 0]))) == pytest.approx(1.0, abs=1e-3)


def test_lipschitz_constant_and_affine(g1):
    assert lipschitz_quotient(sample(g1, lambda t, x: np.full(len(x), 3.0))) == 0.0
    assert lipschitz_quotient(sample(g1, lambda t, x: x[:, 0])) == pytest.approx(1.0, abs=1e-14)


def test_lipschitz_closed_form(cf):
    assert lipschitz_quotient(cf[1]) == pytest.approx(1.0, abs=1e-12)


def test_lipschitz_rejects_zero_pairs(g1):
    with pytest.raises(CertificateError):
        lipschitz_quotient(ValueFunction.zeros(g1), n_pairs=0)


def test_deteriorated_zero(g1):
    assert deteriorated_check(ValueFunction.zeros(g1), 1.0) <= 0.0


def test_deteriorated_sub_lipschitz_grows_with_box():
    vals = []
    for R in (2.0, 4.0, 8.0):
        g = build_grid([0.0], R, 33, 2, 1.0)
        vals.append(deteriorated_check(sample(g, lambda t, x: x[:, 0]), 0.5, PairSampler(core_fraction=1.0)))
    assert vals[0] > 0 and vals[0] < vals[1] < vals[2]


def test_deteriorated_super_lipschitz(g1):
    assert deteriorated_check(sample(g1, lambda t, x: x[:, 0]), 2.0) <= 0.0


def test_deteriorated_monotone_in_K(cf):
    Ms = [deteriorated_check(cf[1], k) for k in (0.0, 0.5, 1.0, 1.5, 3.0)]
    assert all(b <= a for a, b in zip(Ms, Ms[1:]))


def test_growth_examples(g1):
    assert growth_envelope(ValueFunction.zeros(g1)) == 0.0
    assert growth_envelope(sample(g1, lambda t, x: x[:, 0])) == pytest.approx(0.8)
    assert growth_envelope(sample(g1, lambda t, x: 1 + np.abs(x[:, 0]))) == pytest.approx(1.0)


def test_control_margin_examples(g1, cf):
    zeros = ControlField(g1, np.zeros((5, 33, 1)))
    assert control_norm_certificate(zeros, ValueFunction.zeros(g1), 1.0) == 1.0
    assert control_norm_certificate(cf[2], cf[1], 1.0) == pytest.approx(1.0, abs=1e-12)
    wild = ControlField(g1, np.full((5, 33, 1), 5.0))
    assert control_norm_certificate(wild, ValueFunction.zeros(g1), 1.0) == -4.0


def test_control_margin_grid_mismatch(g1, cf):
    with pytest.raises(CertificateError):
        control_norm_certificate(cf[2], ValueFunction.zeros(g1), 1.0)


@pytest.mark.parametrize("lam", [0.5, 3.0])
def test_scaling_covariance(lam):
    g = build_grid([0.0], 3.0, 41, 2, 1.0)
    u = sample(g, lambda t, x: np.sin(x[:, 0]) + t * x[:, 0])
    v = ValueFunction(g, lam * u.values)
    assert sup_gradient(v) == pytest.approx(lam * sup_gradient(u), rel=1e-12)
    assert lipschitz_quotient(v) == pytest.approx(lam * lipschitz_quotient(u), rel=1e-12)
    assert growth_envelope(v) == pytest.approx(lam * growth_envelope(u), rel=1e-12)


def test_consistency_stencil_vs_secant():
    for n in (41, 81):
        g = build_grid([0.0], 3.0, n, 2, 1.0)
        u = sample(g, lambda t, x: np.sin(x[:, 0]))
        assert sup_gradient(u) <= lipschitz_quotient(u) + g.h


def test_pair_sampler_random_branch_deterministic():
    g = build_grid([0.0, 0.0], 2.0, 201, 1, 1.0)
    a = PairSampler(500, 3, 0.6).pairs(g)
    b = PairSampler(500, 3, 0.6).pairs(g)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].size > 500  # random pairs plus nearest neighbours


def test_certify_zero_passes(g1):
    z = ValueFunction.zeros(g1)
    rep = certify(z, field_=ControlField(g1, np.zeros((5, 33, 1))), L_A=1.0)
    assert rep.passed
    assert rep.core_fraction == 0.6


def test_certify_spike_fails(cf):
    vals = cf[1].values.copy()
    vals[3, 16] += 50.0
    rep = certify(ValueFunction(cf[1].grid, vals), CertificateThresholds(lipschitz_max=1.05, growth_max=1.5))
    assert not rep.verdicts["lipschitz_quotient"]
    assert not rep.verdicts["growth_L"]
