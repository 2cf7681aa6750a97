import numpy as np
import pytest
from scipy.special import digamma as sp_digamma
from scipy.special import gammaln

from rpmkit.expfam import (
    CategoricalMoment,
    CategoricalNat,
    DirichletMoment,
    DirichletParams,
    GaussianMoment,
    GaussianNat,
    InvalidParameterError,
    entropy,
    kl,
    log_normalizer,
    log_prob,
    moment_to_nat,
    nat_to_moment,
    sample_reparam,
    suffstat_moments,
)
from rpmkit.special import digamma, jittered_cholesky

from oracles import dirichlet_log_density


def random_spd(rng, K):
    A = rng.normal(size=(K, K))
    return A @ A.T + K * np.eye(K)


# ---------------------------------------------------------------------------
# digamma


def test_digamma_recurrence():
    x = np.random.default_rng(0).uniform(1e-3, 1e3, 1000)
    assert np.max(np.abs(digamma(x + 1) - digamma(x) - 1 / x)) < 1e-12


def test_digamma_at_one_matches_log_gamma_difference():
    step = 1e-6
    oracle = (gammaln(1 + step) - gammaln(1 - step)) / (2 * step)
    assert abs(digamma(1.0) - oracle) < 1e-8
    assert abs(digamma(1.0) + 0.5772156649015329) < 1e-12
    assert abs(digamma(2.0) - digamma(1.0) - 1.0) < 1e-14


def test_digamma_accuracy_over_range():
    x = np.logspace(-3, 6, 2000)
    assert np.max(np.abs(digamma(x) - sp_digamma(x))) < 1e-12 * np.maximum(1.0, np.abs(sp_digamma(x))).max()


def test_digamma_rejects_nonpositive():
    with pytest.raises(ValueError):
        digamma(0.0)
    with pytest.raises(ValueError):
        digamma(np.array([1.0, -2.0]))


# ---------------------------------------------------------------------------
# log-normalizer


def test_log_normalizer_examples():
    assert log_normalizer(CategoricalNat([0.0, 0.0])) == pytest.approx(np.log(2), abs=1e-12)
    assert log_normalizer(GaussianNat([0.0], [[-0.5]])) == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-12)


def test_gaussian_log_normalizer_matches_quadrature():
    z = np.arange(-20.0, 20.0 + 1e-9, 1e-3)
    vals = np.exp(2.0 * z - z * z)
    oracle = np.log(np.trapezoid(vals, z))
    assert abs(log_normalizer(GaussianNat([2.0], [[-1.0]])) - oracle) < 1e-6


def test_invalid_natural_parameter_rejected():
    with pytest.raises(InvalidParameterError, match="not a valid natural parameter"):
        GaussianNat([0.0], [[0.5]])
    with pytest.raises(InvalidParameterError, match="not a valid natural parameter"):
        GaussianNat([0.0, 0.0], [[-1.0, 0.0], [0.0, 1.0]])


# ---------------------------------------------------------------------------
# parameter maps


def test_standard_gaussian_naturals():
    nat = moment_to_nat(GaussianMoment(np.zeros(2), np.eye(2)))
    assert np.allclose(nat.h, 0.0)
    assert np.allclose(nat.J, -0.5 * np.eye(2))


def test_categorical_round_trip():
    nat = moment_to_nat(CategoricalMoment([0.25, 0.75]))
    assert nat.logits[1] - nat.logits[0] == pytest.approx(np.log(3), abs=1e-12)
    assert np.allclose(nat_to_moment(nat).probs, [0.25, 0.75], atol=1e-12)


def test_categorical_boundary_rejected():
    with pytest.raises(InvalidParameterError):
        moment_to_nat(CategoricalMoment([0.0, 1.0]))


@pytest.mark.parametrize("seed", range(5))
def test_gaussian_round_trip(seed):
    rng = np.random.default_rng(seed)
    S = random_spd(rng, 3)
    m = rng.normal(size=3)
    back = nat_to_moment(moment_to_nat(GaussianMoment(m, S)))
    assert np.max(np.abs(back.S - S)) / np.max(np.abs(S)) < 1e-10
    assert np.max(np.abs(back.m - m)) < 1e-10 * max(1.0, np.max(np.abs(m)))


@pytest.mark.parametrize("seed", range(5))
def test_dirichlet_round_trip(seed):
    alpha = np.random.default_rng(seed).uniform(0.1, 20.0, 4)
    back = moment_to_nat(nat_to_moment(DirichletParams(alpha)))
    assert np.max(np.abs(back.alpha - alpha) / alpha) < 1e-10


def test_singular_covariance_rejected():
    with pytest.raises(InvalidParameterError):
        GaussianMoment(np.zeros(2), np.ones((2, 2)))


def test_dirichlet_moment_requires_negative_logs():
    with pytest.raises(InvalidParameterError):
        DirichletMoment([0.1, -1.0])


# ---------------------------------------------------------------------------
# KL


def test_kl_examples():
    p = GaussianMoment([0.0], [[1.0]])
    assert kl(p, p) == pytest.approx(0.0, abs=1e-14)
    assert kl(GaussianMoment([1.0], [[1.0]]), p) == pytest.approx(0.5, abs=1e-12)


def test_kl_self_is_zero_and_nonnegative_across_families():
    rng = np.random.default_rng(1)
    for _ in range(100):
        K = int(rng.integers(2, 5))
        c1, c2 = CategoricalNat(rng.normal(size=K)), CategoricalNat(rng.normal(size=K))
        g1 = GaussianMoment(rng.normal(size=K), random_spd(rng, K))
        g2 = GaussianMoment(rng.normal(size=K), random_spd(rng, K))
        d1, d2 = DirichletParams(rng.uniform(0.2, 5, K)), DirichletParams(rng.uniform(0.2, 5, K))
        for a, b in [(c1, c2), (g1, g2), (d1, d2)]:
            assert abs(kl(a, a)) < 1e-12
            assert kl(a, b) >= -1e-12
        assert kl(moment_to_nat(g1), moment_to_nat(g2)) == pytest.approx(kl(g1, g2), rel=1e-9)


def test_kl_mismatch_errors():
    with pytest.raises(InvalidParameterError):
        kl(GaussianMoment([0.0], [[1.0]]), GaussianMoment([0.0, 0.0], np.eye(2)))
    with pytest.raises(InvalidParameterError, match="family mismatch"):
        kl(GaussianMoment([0.0], [[1.0]]), DirichletParams([1.0, 1.0]))


def test_dirichlet_kl_matches_monte_carlo():
    rng = np.random.default_rng(2)
    a, b = np.array([2.0, 3.0, 0.7]), np.array([1.0, 1.5, 2.5])
    w = rng.dirichlet(a, 200_000)
    diff = dirichlet_log_density(a, w) - dirichlet_log_density(b, w)
    se = diff.std() / np.sqrt(diff.size)
    assert abs(kl(DirichletParams(a), DirichletParams(b)) - diff.mean()) < 4 * se


# ---------------------------------------------------------------------------
# entropy


def test_entropy_examples():
    assert entropy(CategoricalNat(np.zeros(4))) == pytest.approx(np.log(4), abs=1e-12)
    assert entropy(GaussianMoment(np.zeros(2), np.eye(2))) == pytest.approx(1 + np.log(2 * np.pi), abs=1e-12)


def test_uniform_dirichlet_entropy_matches_simplex_quadrature():
    # Dirichlet(1,1,1) has density 2 on the simplex; integrate -p log p over a grid.
    n = 2000
    u = (np.arange(n) + 0.5) / n
    w1, w2 = np.meshgrid(u, u, indexing="ij")
    inside = (w1 + w2) < 1
    w = np.stack([w1[inside], w2[inside], 1 - w1[inside] - w2[inside]], axis=1)
    dens = np.exp(dirichlet_log_density([1.0, 1.0, 1.0], w))
    oracle = -np.sum(dens * np.log(dens)) / n**2
    assert entropy(DirichletParams([1.0, 1.0, 1.0])) == pytest.approx(oracle, abs=1e-3)
    assert entropy(DirichletParams([1.0, 1.0, 1.0])) == pytest.approx(-np.log(2.0), abs=1e-12)


def test_dirichlet_entropy_matches_monte_carlo():
    a = np.array([0.8, 2.0, 4.0])
    w = np.random.default_rng(3).dirichlet(a, 200_000)
    lp = dirichlet_log_density(a, w)
    se = lp.std() / np.sqrt(lp.size)
    assert abs(entropy(DirichletParams(a)) + lp.mean()) < 4 * se


# ---------------------------------------------------------------------------
# log densities


def test_log_prob_examples():
    assert log_prob(CategoricalNat([0.0, 0.0]), 0) == pytest.approx(np.log(0.5), abs=1e-14)
    assert log_prob(GaussianMoment([0.0], [[1.0]]), 0.0) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)
    value = log_prob(DirichletParams([2.0, 2.0]), [0.5, 0.5])
    assert value == pytest.approx(np.log(1.5), abs=1e-12)
    assert value == pytest.approx(dirichlet_log_density([2.0, 2.0], np.array([0.5, 0.5])), abs=1e-12)


def test_log_prob_support_errors():
    with pytest.raises(InvalidParameterError):
        log_prob(DirichletParams([2.0, 2.0]), [0.7, 0.7])
    with pytest.raises(InvalidParameterError):
        log_prob(CategoricalNat([0.0, 0.0]), 2)
    with pytest.raises(InvalidParameterError):
        log_prob(GaussianNat([0.0], [[-0.5]]), [0.0, 1.0])


def test_densities_normalise():
    cat = CategoricalNat([0.3, -1.2, 2.0])
    assert sum(np.exp(log_prob(cat, k)) for k in range(3)) == pytest.approx(1.0, abs=1e-14)
    g = GaussianNat([0.7], [[-0.8]])
    z = np.arange(-20.0, 20.0, 1e-3)
    dens = np.exp([log_prob(g, v) for v in z[::10]])
    assert np.trapezoid(dens, z[::10]) == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------------------
# sufficient statistic moments and sampling


def test_suffstat_standard_normal():
    mom = suffstat_moments(GaussianMoment([0.0], [[1.0]]))
    assert np.allclose(mom.mu, [0.0, 1.0], atol=1e-14)
    assert np.allclose(mom.V, [[1.0, 0.0], [0.0, 2.0]], atol=1e-14)


def _mc_suffstats(rng, m, S, n):
    z = rng.multivariate_normal(m, S, size=n)
    t = np.concatenate([z, np.einsum("ni,nj->nij", z, z).reshape(n, -1)], axis=1)
    return t


def test_suffstat_shifted_gaussian_vs_monte_carlo():
    rng = np.random.default_rng(4)
    mom = suffstat_moments(GaussianMoment([1.0], [[1.0]]))
    assert np.allclose(mom.mu, [1.0, 2.0], atol=1e-14)
    # Var(z) = 1, Cov(z, z^2) = 2m = 2, Var(z^2) = 4m^2 + 2 = 6
    assert np.allclose(mom.V, [[1.0, 2.0], [2.0, 6.0]], atol=1e-12)
    chunks = [np.cov(_mc_suffstats(rng, [1.0], [[1.0]], 1_000_000).T) for _ in range(10)]
    est = np.mean(chunks, axis=0)
    se = np.std(chunks, axis=0) / np.sqrt(len(chunks))
    assert np.all(np.abs(est - mom.V) < 4 * se + 1e-3)


def test_suffstat_multivariate_vs_monte_carlo():
    rng = np.random.default_rng(5)
    m = rng.normal(size=2)
    S = random_spd(rng, 2) / 3
    mom = suffstat_moments(GaussianMoment(m, S))
    chunks = [np.cov(_mc_suffstats(rng, m, S, 200_000).T) for _ in range(20)]
    est = np.mean(chunks, axis=0)
    se = np.std(chunks, axis=0, ddof=1) / np.sqrt(len(chunks))
    assert np.all(np.abs(est - mom.V) < 4 * se + 1e-9)
    assert np.linalg.eigvalsh(mom.V).min() >= -1e-10


def test_sample_reparam_examples():
    q = GaussianMoment([1.0, -2.0], [[2.0, 0.3], [0.3, 1.0]])
    assert np.allclose(sample_reparam(q, np.zeros(2)), q.m)
    eps = np.array([0.4, -1.1])
    assert np.allclose(sample_reparam(GaussianMoment(q.m, np.eye(2)), eps), q.m + eps)
    with pytest.raises(InvalidParameterError):
        sample_reparam(q, np.zeros(3))


def test_sample_reparam_moments():
    rng = np.random.default_rng(6)
    q = GaussianMoment([1.0, -2.0], [[2.0, 0.3], [0.3, 1.0]])
    z = sample_reparam(q, rng.standard_normal((100_000, 2)))
    se_mean = np.sqrt(np.diag(q.S) / len(z))
    assert np.all(np.abs(z.mean(axis=0) - q.m) < 4 * se_mean)
    se_cov = np.sqrt((q.S**2 + np.outer(np.diag(q.S), np.diag(q.S))) / len(z))
    assert np.all(np.abs(np.cov(z.T) - q.S) < 4 * se_cov)


def test_jittered_cholesky_escalates_and_fails():
    L = jittered_cholesky(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.all(np.isfinite(L))
    with pytest.raises(np.linalg.LinAlgError):
        jittered_cholesky(-np.eye(2))
