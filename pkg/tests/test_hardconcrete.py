import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from softmerge import hardconcrete as hc
from softmerge import tensorcore as tc
from softmerge.hardconcrete import GateParams


def P(log_alpha=0.0, beta=0.5, gamma=-0.1, zeta=1.1):
    return GateParams.make(log_alpha, beta, gamma, zeta)


class TestGateParams:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(beta=0.0), dict(beta=1.0), dict(beta=1.5), dict(gamma=0.0), dict(gamma=0.1), dict(zeta=1.0), dict(zeta=0.9)],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(hc.DomainError):
            P(**kwargs)

    def test_beta_roundtrip_through_unconstrained(self):
        p = P(beta=0.3)
        assert p.beta == pytest.approx(0.3, abs=1e-15)

    @given(st.floats(-30, 30))
    def test_any_u_beta_gives_valid_beta(self, u):
        p = GateParams(0.0, u)
        assert 0.0 < p.beta < 1.0

    def test_saturated_u_beta_rejected(self):
        # logistic(40) rounds to exactly 1.0 in float64
        with pytest.raises(hc.DomainError):
            GateParams(0.0, 40.0)


class TestConcretePdf:
    def test_hand_value(self):
        # alpha*beta*s^-0.5*(1-s)^-0.5 / (s^0.5 + (1-s)^0.5)^2 at s=1/2: 0.5*2 / 2
        assert hc.concrete_pdf(0.5, P(0.0, 0.5)) == pytest.approx(0.5, rel=1e-14)

    def test_symmetric_at_unit_alpha(self):
        p = P(0.0, 0.5)
        assert hc.concrete_pdf(0.25, p) == pytest.approx(hc.concrete_pdf(0.75, p), rel=1e-14)

    # endpoint singularities make quad report roundoff; the tolerance below still holds
    @pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")
    @pytest.mark.parametrize("la", [-3.0, 0.0, 3.0])
    @pytest.mark.parametrize("beta", [0.3, 0.5, 0.8])
    def test_integrates_to_one(self, la, beta):
        p = P(la, beta)
        # split at the median so quad resolves both endpoint singularities
        mid = hc.logistic(la / beta)
        total = sum(
            integrate.quad(lambda s: hc.concrete_pdf(s, p), a, b, limit=200, epsabs=1e-12, epsrel=1e-12)[0]
            for a, b in [(0.0, mid), (mid, 1.0)]
        )
        assert total == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("s", [0.0, 1.0, -0.1, 1.2])
    def test_domain(self, s):
        with pytest.raises(hc.DomainError):
            hc.concrete_pdf(s, P())

    def test_strictly_positive(self):
        s = np.linspace(1e-6, 1 - 1e-6, 1001)
        assert np.all(hc.concrete_pdf(s, P(-3.0)) > 0)


class TestConcreteCdf:
    @pytest.mark.parametrize("beta", [0.2, 0.5, 0.9])
    def test_median(self, beta):
        assert hc.concrete_cdf(0.5, P(0.0, beta)) == pytest.approx(0.5, abs=1e-15)

    def test_cdf_at_zero_threshold(self):
        assert hc.concrete_cdf(1 / 12, P(-3.0, 0.5)) == pytest.approx(0.8583, abs=5e-4)

    def test_derivative_is_pdf(self):
        p = P(-1.3, 0.6)
        h = 1e-6
        fd = (hc.concrete_cdf(0.3 + h, p) - hc.concrete_cdf(0.3 - h, p)) / (2 * h)
        assert fd == pytest.approx(hc.concrete_pdf(0.3, p), rel=1e-5)

    def test_strictly_increasing_in_s(self):
        s = np.linspace(0.001, 0.999, 1000)
        for la in (-3.0, 0.0, 3.0):
            assert np.all(np.diff(hc.concrete_cdf(s, P(la))) > 0)

    def test_strictly_decreasing_in_log_alpha(self):
        vals = [hc.concrete_cdf(0.3, P(la)) for la in np.linspace(-5, 5, 101)]
        assert np.all(np.diff(vals) < 0)

    def test_domain(self):
        with pytest.raises(hc.DomainError):
            hc.concrete_cdf(1.0, P())


class TestSampling:
    def test_median_noise(self):
        assert hc.sample_concrete(P(0.0), 0.5) == 0.5

    def test_hand_value(self):
        assert hc.sample_concrete(P(-3.0, 0.5), 0.5) == pytest.approx(0.002473, abs=5e-7)
        assert hc.sample_concrete(P(-3.0, 0.5), 0.5) == pytest.approx(hc.logistic(-6.0), rel=1e-14)

    @pytest.mark.parametrize("u", [0.0, 1.0])
    def test_domain(self, u):
        with pytest.raises(hc.DomainError):
            hc.sample_concrete(P(), u)

    @pytest.mark.parametrize("la", [-3.0, 0.0, 2.0])
    def test_ks_against_cdf(self, la):
        p = P(la, 0.5)
        u = hc.uniform_noise(np.random.default_rng(1), 100_000)
        s = hc.sample_concrete(p, u)
        res = stats.kstest(s, lambda v: hc.concrete_cdf(np.clip(v, 1e-300, 1 - 1e-16), p))
        assert res.statistic < 0.01

    def test_seeded_determinism(self):
        a = hc.sample_gate(P(-1.0), hc.uniform_noise(np.random.default_rng(5), 1000))
        b = hc.sample_gate(P(-1.0), hc.uniform_noise(np.random.default_rng(5), 1000))
        assert a.tobytes() == b.tobytes()


class TestStretchAndFold:
    def test_midpoint(self):
        assert hc.stretch_and_fold(0.5, P()) == pytest.approx(0.5, abs=1e-15)

    def test_clamps_low(self):
        # s_bar = 0.002473*1.1 + 0.997527*(-0.1) = -0.09703
        assert hc.stretch_and_fold(0.002473, P()) == 0.0

    def test_clamps_high(self):
        # s_bar = 0.9781*1.1 + 0.0219*(-0.1) = 1.0737
        assert hc.stretch_and_fold(0.9781, P()) == 1.0


class TestPointMasses:
    def test_masses_negative_log_alpha(self):
        p = P(-3.0, 0.5)
        assert hc.prob_zero(p) == pytest.approx(0.8583, abs=5e-4)
        assert hc.prob_one(p) == pytest.approx(0.0148, abs=5e-4)

    def test_masses_unit_alpha(self):
        p = P(0.0, 0.5)
        assert hc.prob_zero(p) == pytest.approx(0.2317, abs=5e-4)
        assert hc.prob_one(p) == pytest.approx(0.2317, abs=5e-4)

    def test_mirror(self):
        assert hc.prob_zero(P(3.0)) == pytest.approx(hc.prob_one(P(-3.0)), rel=1e-12)

    @pytest.mark.parametrize("la", [-3.0, 0.0, 3.0])
    @pytest.mark.parametrize("beta", [0.3, 0.5, 0.8])
    def test_total_probability(self, la, beta):
        p = P(la, beta)
        width = p.zeta - p.gamma
        # median of the gate's continuous part, to split the integrable singularities
        mid = min(max(hc.logistic(la / beta) * width + p.gamma, 0.05), 0.95)
        cont = sum(
            integrate.quad(lambda g: hc.hard_concrete_density(g, p), a, b, limit=200, epsabs=1e-12, epsrel=1e-12)[0]
            for a, b in [(0.0, mid), (mid, 1.0)]
        )
        assert hc.prob_zero(p) + hc.prob_one(p) + cont == pytest.approx(1.0, abs=1e-6)


class TestSampleGate:
    def test_values(self):
        assert hc.sample_gate(P(0.0), 0.5) == pytest.approx(0.5, abs=1e-15)
        assert hc.sample_gate(P(-3.0, 0.5), 0.5) == 0.0

    @pytest.mark.parametrize("la", [-3.0, 0.0])
    def test_zero_mass_matches_prob_zero(self, la):
        p = P(la, 0.5)
        n = 100_000
        g = hc.sample_gate(p, hc.uniform_noise(np.random.default_rng(11), n))
        q = hc.prob_zero(p)
        assert abs(np.mean(g == 0.0) - q) <= 3 * math.sqrt(q * (1 - q) / n)

    def test_symmetric_mean(self):
        g = hc.sample_gate(P(0.0, 0.5), hc.uniform_noise(np.random.default_rng(3), 100_000))
        assert 0.49 <= g.mean() <= 0.51

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 100:
            la, beta, u = rng.uniform(-3, 3), rng.uniform(0.2, 0.9), rng.uniform(0.01, 0.99)
            p = P(la, beta)
            s_bar = hc.sample_concrete(p, u) * 1.2 - 0.1
            if not 0.01 < s_bar < 0.99:
                continue
            leaf = tc.Tensor(np.array([la]), requires_grad=True)
            ub = tc.Tensor(np.array([p.u_beta]))
            tc.backward(hc.gate_tensor(leaf, ub, np.array([u])).sum())
            h = 1e-6
            fd = (hc.sample_gate(P(la + h, beta), u) - hc.sample_gate(P(la - h, beta), u)) / (2 * h)
            assert leaf.grad[0] == pytest.approx(fd, rel=1e-5)
            checked += 1

    def test_tensor_matches_scalar_path(self):
        u = hc.uniform_noise(np.random.default_rng(0), (3, 4))
        la = np.linspace(-2, 2, 12).reshape(3, 4)
        out = hc.gate_tensor(tc.Tensor(la), tc.Tensor(np.zeros((3, 4))), u).data
        ref = np.array([[hc.sample_gate(P(la[i, j]), u[i, j]) for j in range(4)] for i in range(3)])
        np.testing.assert_allclose(out, ref, atol=1e-14)


class TestDeterministicGate:
    def test_values(self):
        assert hc.deterministic_gate(P(0.0)) == pytest.approx(0.5, abs=1e-15)
        assert hc.deterministic_gate(P(-3.0)) == 0.0
        assert hc.deterministic_gate(P(3.0)) == 1.0

    @settings(max_examples=200)
    @given(st.floats(-20, 20), st.floats(0, 5))
    def test_monotone(self, la, step):
        assert hc.deterministic_gate(P(la + step)) >= hc.deterministic_gate(P(la))

    def test_vectorized_agrees(self):
        la = np.linspace(-4, 4, 33)
        np.testing.assert_allclose(hc.deterministic_gates(la), [hc.deterministic_gate(P(v)) for v in la], rtol=0, atol=1e-15)
