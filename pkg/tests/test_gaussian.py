import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from adapgc.errors import ContractViolation, EmptyClass, NumericalDegeneracy, RejectedInput
from adapgc.gaussian import (
    ClassGaussian,
    Perspective,
    PerspectiveBank,
    SufficientStats,
    cov_deviations,
    install_gaussian,
    mle_from_stats,
    normalize_priors,
    posterior,
    quad_score,
    quad_scores,
    shrink_covariance,
    softmax,
)

LOG2PI = np.log(2 * np.pi)


def gauss(mean, cov, prior=1.0):
    return ClassGaussian.build(prior, np.asarray(mean, float), np.asarray(cov, float))


def bank_of(gaussians, perspective=Perspective.FUSED):
    d = gaussians[0].dim
    return PerspectiveBank(
        perspective, d, len(gaussians), [SufficientStats.zeros(d) for _ in gaussians], tuple(gaussians)
    )


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.5 * np.eye(d)


# -- quad_score ----------------------------------------------------------------


def test_quad_score_at_mean_is_zero():
    assert quad_score([1, 0], gauss([1, 0], np.eye(2))) == 0.0


def test_quad_score_scaled_identity_matches_logpdf():
    got = quad_score([1, 0], gauss([1, 0], 2 * np.eye(2)))
    # independent oracle: scipy log-density with the 2*pi term added back
    oracle = multivariate_normal([1, 0], 2 * np.eye(2)).logpdf([1, 0]) + LOG2PI
    assert got == pytest.approx(oracle, abs=1e-12)
    assert got == pytest.approx(-np.log(2), abs=1e-12)


def test_quad_score_with_prior():
    got = quad_score([3, 0], gauss([1, 0], np.eye(2), prior=0.5))
    assert got == pytest.approx(-2 + np.log(0.5), abs=1e-12)
    assert got == pytest.approx(-2.693147, abs=1e-6)


def test_quad_score_random_against_scipy():
    rng = np.random.default_rng(0)
    for _ in range(50):
        d = int(rng.integers(1, 7))
        cov = random_spd(rng, d)
        mu, z = rng.standard_normal(d), rng.standard_normal(d)
        prior = float(rng.uniform(0.05, 1))
        want = multivariate_normal(mu, cov).logpdf(z) + 0.5 * d * LOG2PI + np.log(prior)
        assert quad_score(z, gauss(mu, cov, prior)) == pytest.approx(want, rel=1e-10, abs=1e-10)


def test_quad_score_errors():
    g = gauss([0, 0], np.eye(2))
    with pytest.raises(ContractViolation):
        quad_score([1, 2, 3], g)
    with pytest.raises(RejectedInput):
        quad_score([np.nan, 0], g)
    with pytest.raises(RejectedInput):
        quad_scores(np.array([[np.inf, 0.0]]), bank_of([g]))


def test_batch_scores_match_single_scores():
    rng = np.random.default_rng(1)
    gs = [gauss(rng.standard_normal(4), random_spd(rng, 4), 0.25) for _ in range(4)]
    bank = bank_of(gs)
    Z = rng.standard_normal((10, 4))
    single = np.array([[quad_score(z, g) for g in gs] for z in Z])
    np.testing.assert_allclose(quad_scores(Z, bank), single, rtol=1e-12, atol=1e-12)


def test_identity_covariance_reduces_to_linear_discriminant():
    rng = np.random.default_rng(2)
    C, d = 4, 8
    mus = rng.standard_normal((C, d))
    priors = normalize_priors(rng.uniform(0.1, 1, C))
    bank = bank_of([gauss(mus[c], np.eye(d), priors[c]) for c in range(C)])
    Z = rng.standard_normal((100, d))
    scores = quad_scores(Z, bank)
    linear = Z @ mus.T - 0.5 * np.sum(mus**2, axis=1) + np.log(priors)
    full = linear - 0.5 * np.sum(Z**2, axis=1, keepdims=True)
    np.testing.assert_allclose(scores, full, atol=1e-10)
    np.testing.assert_allclose(scores - scores[:, :1], linear - linear[:, :1], atol=1e-10)


# -- posterior -----------------------------------------------------------------


def test_posterior_identical_classes_is_uniform():
    g = gauss([0.3, -1], np.eye(2), 0.5)
    np.testing.assert_array_equal(posterior([1.0, 2.0], bank_of([g, g])), [0.5, 0.5])


def test_posterior_from_example_scores():
    # scores 0 and -2 + log 0.5: closed form p0 = 1 / (1 + e^-2 / 2)
    p = softmax(np.array([0.0, -2.0 + np.log(0.5)]))
    p0 = 1.0 / (1.0 + 0.5 * np.exp(-2.0))
    np.testing.assert_allclose(p, [p0, 1 - p0], atol=1e-15)
    np.testing.assert_allclose(p, [0.936621, 0.063379], atol=1e-6)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    s = rng.standard_normal((20, 5))
    np.testing.assert_allclose(softmax(s + 100, axis=1), softmax(s, axis=1), atol=1e-12)


def test_posterior_permutation_equivariant():
    rng = np.random.default_rng(4)
    gs = [gauss(rng.standard_normal(3), random_spd(rng, 3), 1 / 3) for _ in range(3)]
    Z = rng.standard_normal((30, 3))
    perm = [2, 0, 1]
    p = posterior(Z, bank_of(gs))
    pp = posterior(Z, bank_of([gs[i] for i in perm]))
    np.testing.assert_allclose(pp, p[:, perm], atol=1e-15)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# -- mle_from_stats ------------------------------------------------------------


def test_mle_two_point_example():
    stats = SufficientStats(2.0, np.array([4.0, 0.0]), np.array([[10.0, 0.0], [0.0, 0.0]]))
    prior, mean, cov = mle_from_stats(stats, 4.0)
    assert prior == 0.5
    np.testing.assert_allclose(mean, [2, 0])
    np.testing.assert_allclose(cov, [[1, 0], [0, 0]], atol=1e-15)
    # brute force over the sample list {(1,0), (3,0)}
    pts = np.array([[1.0, 0.0], [3.0, 0.0]])
    np.testing.assert_allclose(cov, np.cov(pts.T, bias=True), atol=1e-15)


def test_mle_single_sample_has_zero_scatter():
    z = np.array([0.7, -1.2, 3.0])
    _, mean, cov = mle_from_stats(SufficientStats.from_samples(z), 1.0)
    np.testing.assert_array_equal(mean, z)
    np.testing.assert_allclose(cov, 0, atol=1e-14)


def test_mle_repeated_sample():
    v = np.array([2.0, 5.0])
    _, mean, cov = mle_from_stats(SufficientStats.from_samples(np.tile(v, (3, 1))), 3.0)
    np.testing.assert_allclose(mean, v)
    np.testing.assert_allclose(cov, 0, atol=1e-13)


def test_mle_errors():
    with pytest.raises(EmptyClass):
        mle_from_stats(SufficientStats.zeros(2), 1.0)
    with pytest.raises(ContractViolation):
        mle_from_stats(SufficientStats(3.0, np.zeros(2), np.eye(2)), 2.0)


def test_mle_matches_textbook_on_random_lists():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n, d = int(rng.integers(2, 40)), int(rng.integers(1, 6))
        X = rng.standard_normal((n, d)) * rng.uniform(0.1, 3) + rng.standard_normal(d)
        prior, mean, cov = mle_from_stats(SufficientStats.from_samples(X), 2.0 * n)
        assert prior == pytest.approx(0.5)
        np.testing.assert_allclose(mean, X.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(cov, np.cov(X.T, bias=True).reshape(d, d), atol=1e-10)
        np.testing.assert_array_equal(cov, cov.T)


def test_stats_second_moment_stays_symmetric():
    rng = np.random.default_rng(6)
    s = SufficientStats.zeros(4)
    for _ in range(20):
        a = rng.standard_normal((4, 4))
        s.add(1.0, rng.standard_normal(4), a)  # deliberately asymmetric delta
        np.testing.assert_array_equal(s.second_moment, s.second_moment.T)


# -- shrinkage -----------------------------------------------------------------


def test_shrink_examples():
    np.testing.assert_array_equal(
        shrink_covariance(np.array([[1.0, 0], [0, 0]]), 1e-4), [[1.0001, 0], [0, 0.0001]]
    )
    np.testing.assert_array_equal(shrink_covariance(np.zeros((3, 3)), 1e-4), 1e-4 * np.eye(3))


def test_shrunk_identity_log_det():
    d = 5
    g = install_gaussian(1.0, np.zeros(d), np.eye(d), 1e-4)
    np.testing.assert_allclose(g.covariance, 1.0001 * np.eye(d))
    assert g.log_det == pytest.approx(d * np.log(1.0001), rel=1e-12)
    sign, logdet = np.linalg.slogdet(g.covariance)
    assert sign > 0 and g.log_det == pytest.approx(logdet, rel=1e-10)


def test_shrink_retries_then_raises():
    bad = -np.eye(3)  # eps doubles 8 times to 0.0256, still indefinite
    with pytest.raises(NumericalDegeneracy) as info:
        install_gaussian(1.0, np.zeros(3), bad, 1e-4, class_index=2)
    assert info.value.class_index == 2
    # a mildly negative eigenvalue is rescued by doubling
    g = install_gaussian(1.0, np.zeros(2), np.diag([1.0, -1.5e-4]), 1e-4)
    assert g.shrinkage == pytest.approx(2e-4)


def test_shrink_rejects_nonpositive_eps():
    with pytest.raises(ContractViolation):
        shrink_covariance(np.eye(2), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31), st.floats(1e-6, 1e-1))
def test_shrink_min_eigenvalue_property(d, seed, eps):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, max(d - 1, 1)))
    psd = a @ a.T  # possibly rank deficient
    lam = np.linalg.eigvalsh(shrink_covariance(psd, eps))
    assert lam[0] >= eps - 1e-12 * max(1.0, lam[-1])


# -- priors, deviations ---------------------------------------------------------


def test_prior_floor():
    p = normalize_priors([1.0, 0.0, 0.0])
    assert np.all(p >= 1e-8 / (1 + 2e-8))
    assert p.sum() == pytest.approx(1.0, abs=1e-15)


def test_cov_deviations_shared():
    bank = bank_of([gauss(np.zeros(2), np.eye(2))] * 3)
    _, dev = cov_deviations(bank)
    np.testing.assert_array_equal(dev, 0)


def test_cov_deviations_two_class_example():
    bank = bank_of([gauss(np.zeros(3), 2 * np.eye(3)), gauss(np.zeros(3), 4 * np.eye(3))])
    mean, dev = cov_deviations(bank)
    np.testing.assert_array_equal(mean, 3 * np.eye(3))
    np.testing.assert_array_equal(dev[0], -np.eye(3))
    np.testing.assert_array_equal(dev[1], np.eye(3))


def test_cov_deviations_sum_to_zero():
    rng = np.random.default_rng(7)
    bank = bank_of([gauss(np.zeros(5), random_spd(rng, 5)) for _ in range(6)])
    mean, dev = cov_deviations(bank)
    assert np.abs(dev.sum(axis=0)).max() <= 1e-9 * np.linalg.norm(mean)


def test_bank_validates_sizes_and_snapshot_is_independent():
    g = gauss(np.zeros(2), np.eye(2))
    with pytest.raises(ContractViolation):
        PerspectiveBank(Perspective.M1, 2, 2, [SufficientStats.zeros(2)], (g,))
    with pytest.raises(ContractViolation):
        PerspectiveBank(Perspective.M1, 3, 1, [SufficientStats.zeros(3)], (g,))
    bank = bank_of([g])
    snap = bank.snapshot()
    bank.stats[0].add(1.0, np.ones(2), np.eye(2))
    assert snap.stats[0].count == 0.0
