import numpy as np
import pytest
from scipy import integrate
from scipy.special import gammaln, log_softmax

from rpmkit.lda import (
    RPLDA,
    LdaVariational,
    e_step_lda,
    e_step_residuals,
    extract_patches,
    free_energy_lda,
    lda_logit_grad,
    representative_patches,
    write_top_patches_csv,
    write_topic_weights_csv,
)


def random_log_f(rng, N, J, K, scale=1.5):
    return log_softmax(scale * rng.normal(size=(N, J, K)), axis=2)


def quadrature_free_energy_k2(log_f, alpha0, var):
    """Mean-field bound for K=2 by integrating over omega in (0, 1)."""
    N, J, _ = log_f.shape
    log_F = np.log(np.exp(log_f).mean(axis=0))
    total = 0.0
    for n in range(N):
        a, b = var.alpha[n]
        log_beta = gammaln(a) + gammaln(b) - gammaln(a + b)

        def integrand(w):
            lq = (a - 1) * np.log(w) + (b - 1) * np.log1p(-w) - log_beta
            lp = gammaln(2 * alpha0) - 2 * gammaln(alpha0) + (alpha0 - 1) * (np.log(w) + np.log1p(-w))
            val = lp - lq
            for j in range(J):
                g = var.gamma[n, j]
                logs = np.array([np.log(w), np.log1p(-w)])
                val += np.sum(g * (logs + log_f[n, j] - log_F[j] - np.log(g)))
            return np.exp(lq) * val

        total += integrate.quad(integrand, 0, 1, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    return total


def test_uniform_factors_give_symmetric_fixed_point():
    N, J, K = 4, 6, 3
    log_f = np.log(np.full((N, J, K), 1 / K))
    var = e_step_lda(log_f, alpha0=0.7)
    assert np.allclose(var.gamma, 1 / K, atol=1e-14)
    assert np.allclose(var.alpha, 0.7 + J / K, atol=1e-12)


def test_fixed_point_residuals_two_topics():
    log_f = np.log(np.array([[[0.8, 0.2]], [[0.5, 0.5]]]))
    var = e_step_lda(log_f, alpha0=1.0)
    assert var.converged
    assert e_step_residuals(log_f, 1.0, var) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_fixed_point_properties(seed):
    rng = np.random.default_rng(seed)
    K, J = 4, 9
    log_f = random_log_f(rng, 6, J, K)
    trace = []
    var = e_step_lda(log_f, alpha0=0.5, trace=trace)
    assert var.converged
    assert e_step_residuals(log_f, 0.5, var) < 1e-8
    assert np.allclose(var.alpha.sum(axis=1), K * 0.5 + J, atol=1e-12)
    assert np.allclose(var.gamma.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(var.alpha > 0)
    assert np.all(np.diff(trace) >= -1e-10)


def test_single_image_uniform_matches_quadrature():
    log_f = np.log(np.full((1, 1, 2), 0.5))
    var = e_step_lda(log_f, alpha0=1.0)
    value = free_energy_lda(log_f, 1.0, var)
    assert abs(value - quadrature_free_energy_k2(log_f, 1.0, var)) < 1e-4
    assert value <= 1e-12  # log marginal likelihood is 0 when N = 1


def test_free_energy_matches_quadrature_with_informative_factors():
    rng = np.random.default_rng(7)
    log_f = random_log_f(rng, 3, 2, 2)
    var = e_step_lda(log_f, alpha0=1.3)
    assert free_energy_lda(log_f, 1.3, var) == pytest.approx(quadrature_free_energy_k2(log_f, 1.3, var), abs=1e-8)


def test_free_energy_invariant_to_logit_shift():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(5, 4, 3))
    a = log_softmax(logits, axis=2)
    b = log_softmax(logits + 3.7, axis=2)
    var = e_step_lda(a, 1.0)
    assert abs(free_energy_lda(a, 1.0, var) - free_energy_lda(b, 1.0, var)) < 1e-10


def test_logit_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(3, 2, 3))
    var = e_step_lda(log_softmax(logits, axis=2), 1.0)
    g = lda_logit_grad(log_softmax(logits, axis=2), var.gamma)
    step = 1e-6
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        e = np.zeros_like(logits)
        e[idx] = step
        num[idx] = (free_energy_lda(log_softmax(logits + e, axis=2), 1.0, var)
                    - free_energy_lda(log_softmax(logits - e, axis=2), 1.0, var)) / (2 * step)
    assert np.max(np.abs(num - g)) < 1e-7


def test_invalid_alpha():
    with pytest.raises(ValueError, match="alpha"):
        e_step_lda(np.log(np.full((1, 1, 2), 0.5)), alpha0=0.0)


def test_extract_patches_order_and_crop():
    img = np.arange(5 * 6, dtype=float).reshape(1, 5, 6)
    p = extract_patches(img, 2)
    assert p.shape == (1, 6, 4)
    assert np.array_equal(p[0, 0], [0, 1, 6, 7])
    assert np.array_equal(p[0, 1], [2, 3, 8, 9])
    assert np.array_equal(p[0, 3], [12, 13, 18, 19])
    with pytest.raises(ValueError):
        extract_patches(img, 7)


def test_representative_patches():
    flat = np.full((6, 3), 1 / 3)
    assert np.array_equal(representative_patches(flat, 1, 4), [0, 1, 2, 3])
    one = flat.copy()
    one[4] = [0.0, 1.0, 0.0]
    assert representative_patches(one, 1, 2)[0] == 4
    rng = np.random.default_rng(10)
    probs = rng.dirichlet(np.ones(3), 50)
    oracle = sorted(range(50), key=lambda i: (-probs[i, 2], i))[:7]
    assert list(representative_patches(probs, 2, 7)) == oracle


def _tiny_corpus(seed, N=20):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=(N, 4))
    centres = np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    X = centres[labels] + 0.3 * rng.standard_normal((N, 4, 3))
    return X, labels


def test_single_topic_degenerate_fit():
    X, _ = _tiny_corpus(0)
    model = RPLDA(n_topics=1, hidden=(4,), n_iter=3, random_state=0).fit(X)
    assert np.all(model.variational_.gamma == 1.0)
    assert np.all(np.isfinite(model.report_.free_energy))


def test_zero_m_steps_keeps_free_energy_constant():
    X, _ = _tiny_corpus(1)
    model = RPLDA(n_topics=2, hidden=(4,), n_iter=4, m_steps=0, random_state=0).fit(X)
    F = model.report_.phase_values("E")
    assert np.all(F == F[0])


def test_fit_recovers_separable_textures(tmp_path):
    X, labels = _tiny_corpus(2, N=60)
    model = RPLDA(n_topics=2, alpha=1.0, hidden=(8,), n_iter=100, lr=1e-2, random_state=0).fit(X)
    assert model.score(X, labels) == 1.0
    w = model.transform(X)
    assert w.shape == (60, 2) and np.allclose(w.sum(axis=1), 1.0)
    write_topic_weights_csv(tmp_path / "w.csv", w)
    write_top_patches_csv(tmp_path / "top.csv", {k: model.representative(X, k, 3) for k in range(2)})
    assert (tmp_path / "w.csv").read_text().splitlines()[0] == "image,topic_0,topic_1"
    assert len((tmp_path / "top.csv").read_text().splitlines()) == 7


def test_variational_mean_weights():
    var = LdaVariational(np.array([[1.0, 3.0]]), np.full((1, 2, 2), 0.5), True, 1)
    assert np.allclose(var.mean_topic_weights, [[0.25, 0.75]])
