import numpy as np
import pytest
from scipy.stats import beta, norm

from certify import (
    ABSTAIN_LOW_PA,
    ABSTAIN_RANK,
    CERTIFIED,
    CertifyConfig,
    certify,
    clopper_pearson_lower,
    empirical_radius_check,
    inv_norm_cdf,
    load_certificates,
    save_certificates,
    smoothed_predict,
)
from ensemble_defense import Ensemble
from errors import DomainError, ParameterError, ShapeError


class TestInvNormCdf:
    def test_round_trip_grid(self):
        for p in np.arange(1, 1000) / 1000:
            assert abs(norm.cdf(inv_norm_cdf(p)) - p) < 1e-9

    def test_known_value(self):
        assert inv_norm_cdf(0.6) == pytest.approx(0.253347, abs=1e-6)
        assert inv_norm_cdf(0.5) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.2, 1.5])
    def test_domain(self, p):
        with pytest.raises(DomainError):
            inv_norm_cdf(p)


class TestClopperPearson:
    def test_all_successes_closed_form(self):
        assert clopper_pearson_lower(100, 100, 0.05) == pytest.approx(0.05 ** 0.01, abs=1e-9)

    def test_zero_successes(self):
        assert clopper_pearson_lower(0, 50, 0.01) == 0.0

    def test_below_point_estimate(self):
        for k in range(1, 41):
            assert clopper_pearson_lower(k, 40, 0.05) <= k / 40

    def test_coverage(self):
        rng = np.random.default_rng(0)
        alpha, q, n = 0.05, 0.8, 200
        bounds = [clopper_pearson_lower(k, n, alpha) for k in rng.binomial(n, q, size=500)]
        assert np.mean(np.array(bounds) <= q) >= (1 - alpha) - 0.03

    def test_alpha_above_half(self):
        assert clopper_pearson_lower(50, 100, 0.6) == pytest.approx(beta.ppf(0.6, 50, 51), abs=1e-12)
        assert clopper_pearson_lower(50, 100, 0.6) == pytest.approx(0.50765, abs=1e-4)
        assert clopper_pearson_lower(50, 100, 0.6) > clopper_pearson_lower(50, 100, 0.4)
        assert CertifyConfig(alpha=0.75).alpha == 0.75

    @pytest.mark.parametrize("k, n, alpha", [(5, 4, 0.05), (-1, 4, 0.05), (1, 0, 0.05), (2, 4, 0.0), (2, 4, 1.0)])
    def test_invalid(self, k, n, alpha):
        with pytest.raises(ParameterError):
            clopper_pearson_lower(k, n, alpha)


class TestCertify:
    def test_constant_classifier_radius(self, constant_ensemble):
        ens = constant_ensemble([3] * 10)
        cert = certify(ens, [0.4, 0.6], CertifyConfig(sigma=0.5, n=100, alpha=0.05, seed=0))
        p_lower = 0.05 ** 0.01
        assert cert.label == 3 and cert.n_A == 100
        assert cert.p_lower == pytest.approx(p_lower, abs=1e-9)
        assert cert.radius == pytest.approx(0.5 * norm.ppf(p_lower), abs=1e-9)
        assert cert.radius == pytest.approx(0.944, abs=1e-3)
        assert cert.status == CERTIFIED and cert.certified

    def test_radius_linear_in_sigma(self, constant_ensemble):
        ens = constant_ensemble([1] * 10)
        small = certify(ens, [0.5, 0.5], CertifyConfig(sigma=0.25, n=200, alpha=0.01, seed=3))
        large = certify(ens, [0.5, 0.5], CertifyConfig(sigma=0.5, n=200, alpha=0.01, seed=3))
        assert large.radius == pytest.approx(2 * small.radius, rel=1e-12)

    def test_coin_abstains_with_zero_radius(self, threshold_net):
        cert = certify(Ensemble([threshold_net]), [0.5, 0.5], CertifyConfig(sigma=0.5, n=1000, alpha=0.001, seed=0))
        assert cert.p_lower <= 0.5
        assert cert.radius == 0.0
        assert cert.status == ABSTAIN_LOW_PA

    def test_rank_abstention_keeps_radius(self, constant_ensemble):
        cfg = CertifyConfig(sigma=0.5, n=100, alpha=0.05, seed=0, rv_alpha=0.05)
        cert = certify(constant_ensemble([2] * 5), [0.5, 0.5], cfg)
        assert cert.rv_pvalue == pytest.approx(0.0625)
        assert cert.status == ABSTAIN_RANK
        assert cert.radius > 0
        assert certify(constant_ensemble([2] * 10), [0.5, 0.5], cfg).status == CERTIFIED

    def test_p_lower_at_most_frequency(self, threshold_net):
        ens = Ensemble([threshold_net])
        cert = certify(ens, [0.7, 0.5], CertifyConfig(sigma=0.3, n=300, alpha=0.01, seed=5))
        assert cert.p_lower <= cert.n_A / cert.n

    def test_deterministic(self, threshold_net):
        ens = Ensemble([threshold_net])
        cfg = CertifyConfig(sigma=0.3, n=200, alpha=0.01, seed=8, batch_size=64)
        assert certify(ens, [0.6, 0.2], cfg) == certify(ens, [0.6, 0.2], cfg)

    def test_batch_size_does_not_change_result(self, threshold_net):
        ens = Ensemble([threshold_net])
        a = certify(ens, [0.6, 0.2], CertifyConfig(sigma=0.3, n=150, alpha=0.01, seed=2, batch_size=7))
        b = certify(ens, [0.6, 0.2], CertifyConfig(sigma=0.3, n=150, alpha=0.01, seed=2, batch_size=150))
        assert a == b

    def test_shape_mismatch(self, constant_ensemble):
        with pytest.raises(ShapeError):
            certify(constant_ensemble([0]), [0.1, 0.2, 0.3], CertifyConfig())

    @pytest.mark.parametrize("kwargs", [{"sigma": 0.0}, {"n": 0}, {"alpha": 0.0}, {"alpha": 1.0}, {"rv_alpha": 2.0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ParameterError):
            CertifyConfig(**kwargs)

    def test_records_the_config_used(self, constant_ensemble):
        cfg = CertifyConfig(sigma=0.2, n=40, alpha=0.02, seed=9, rv_alpha=0.05, batch_size=16)
        doc = certify(constant_ensemble([1] * 3), [0.2, 0.2], cfg).to_dict()
        assert {k: doc[k] for k in ("sigma", "n", "alpha", "seed", "rv_alpha", "batch_size")} == {
            "sigma": 0.2, "n": 40, "alpha": 0.02, "seed": 9, "rv_alpha": 0.05, "batch_size": 16,
        }

    def test_jsonl_round_trip(self, tmp_path, constant_ensemble):
        cert = certify(constant_ensemble([1] * 3), [0.2, 0.2], CertifyConfig(sigma=0.2, n=50, alpha=0.01))
        save_certificates([cert, cert], tmp_path / "certs.jsonl")
        assert load_certificates(tmp_path / "certs.jsonl") == [cert, cert]


class TestRadiusCheck:
    def test_zero_radius_is_trivially_consistent(self, threshold_net):
        ens = Ensemble([threshold_net])
        cert = certify(ens, [0.5, 0.5], CertifyConfig(sigma=0.5, n=1000, alpha=0.001))
        assert empirical_radius_check(ens, [0.5, 0.5], cert, trials=10, seed=0) == 1.0

    def test_constant_classifier_always_agrees(self, constant_ensemble):
        ens = constant_ensemble([2] * 3)
        cert = certify(ens, [0.5, 0.5], CertifyConfig(sigma=0.5, n=100, alpha=0.01))
        assert empirical_radius_check(ens, [0.5, 0.5], cert, trials=50, seed=1) == 1.0


class TestSmoothedPredict:
    def test_constant(self, constant_ensemble):
        assert smoothed_predict(constant_ensemble([3, 3, 1]), [0.5, 0.5], 0.5, 50, seed=0) == 3

    def test_far_from_boundary(self, threshold_net):
        assert smoothed_predict(Ensemble([threshold_net]), [0.9, 0.5], 0.1, 100, seed=0) == 1

    def test_invalid(self, threshold_net):
        with pytest.raises(ParameterError):
            smoothed_predict(Ensemble([threshold_net]), [0.9, 0.5], 0.0, 100, seed=0)
