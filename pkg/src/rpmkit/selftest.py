"""Invariant suite run by ``rpmkit selftest``.

Each check is a small seeded computation compared against an independent
oracle. :func:`run_selftest` returns one :class:`CheckResult` per check.
"""

import itertools
import time
from dataclasses import dataclass

import numpy as np

__all__ = ["CheckResult", "CHECKS", "run_selftest"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _digamma():
    from scipy.special import psi

    from .special import digamma

    x = np.random.default_rng(0).uniform(1e-3, 50, 1000)
    rec = np.max(np.abs(digamma(x + 1) - digamma(x) - 1 / x))
    ref = np.max(np.abs(digamma(np.logspace(-3, 6, 500)) - psi(np.logspace(-3, 6, 500))))
    return rec < 1e-12 and ref < 1e-12, f"recurrence {rec:.1e}, vs scipy {ref:.1e}"


def _expfam():
    from . import expfam as ef

    rng = np.random.default_rng(1)
    worst_kl, worst_rt = 0.0, 0.0
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        q = ef.GaussianMoment(rng.normal(size=3), A @ A.T + np.eye(3))
        B = rng.normal(size=(3, 3))
        p = ef.GaussianMoment(rng.normal(size=3), B @ B.T + np.eye(3))
        d = ef.kl(q, p)
        worst_kl = min(worst_kl, d)
        nat = ef.moment_to_nat(q)
        back = ef.nat_to_moment(nat)
        worst_rt = max(worst_rt, np.max(np.abs(back.S - q.S)), np.max(np.abs(back.m - q.m)))
        # natural-form KL and entropy agree with the moment forms
        worst_rt = max(worst_rt, abs(ef.kl(nat, ef.moment_to_nat(p)) - d), abs(ef.entropy(nat) - ef.entropy(q)))
        a = ef.DirichletParams(rng.uniform(0.2, 5, 4))
        back = ef.moment_to_nat(ef.nat_to_moment(a))
        worst_rt = max(worst_rt, np.max(np.abs(back.alpha - a.alpha)))
        c = ef.CategoricalNat(rng.normal(size=5))
        worst_kl = min(worst_kl, ef.kl(c, ef.CategoricalNat(rng.normal(size=5))))
    return worst_kl >= -1e-12 and worst_rt < 1e-8, f"min KL {worst_kl:.1e}, round-trip {worst_rt:.1e}"


def _hungarian():
    from .metrics import hungarian

    rng = np.random.default_rng(2)
    worst = 0
    for trial in range(20):
        n = 2 + trial % 5
        C = rng.integers(0, 4, size=(n, n)).astype(float)
        perms = list(itertools.permutations(range(n)))
        costs = [C[np.arange(n), p].sum() for p in perms]
        best = min(costs)
        lex = min(p for p, c in zip(perms, costs) if c == best)
        perm, total = hungarian(C)
        worst += int(total != best or tuple(perm) != lex)
    return worst == 0, f"{worst} mismatches vs exhaustive search"


def _nmse():
    from .metrics import nmse_regression

    rng = np.random.default_rng(3)
    z = rng.normal(size=(10, 30))
    x = z + 0.3 * rng.normal(size=z.shape)
    base = nmse_regression(x, z)
    moved = nmse_regression(-4.0 * x + 11.0, z)
    return abs(base - moved) < 1e-10, f"affine change {abs(base - moved):.1e}"


def _generators():
    from . import datagen as dg

    a = dg.gen_textured_ball(dg.BouncingBallConfig(n_sequences=3, T=10, seed=5))
    b = dg.gen_textured_ball(dg.BouncingBallConfig(n_sequences=3, T=10, seed=5))
    c = dg.gen_structured_ball(dg.BouncingBallConfig(n_sequences=3, T=10, seed=5, variant="structured"))
    d = dg.gen_structured_ball(dg.BouncingBallConfig(n_sequences=3, T=10, seed=5, variant="structured"))
    e = dg.gen_texture_corpus(n_images=4, seed=5)
    f = dg.gen_texture_corpus(n_images=4, seed=5)
    same = (np.array_equal(a.observations[0], b.observations[0])
            and np.array_equal(c.observations[0], d.observations[0])
            and np.array_equal(e.images, f.images))
    return same, "bitwise repeat" if same else "outputs differ on repeat"


def _net_gradients():
    from .nets import CategoricalHead, Conv2d, Dense, GaussianHead, RecognitionNet, Relu, grad_check, mlp

    rng = np.random.default_rng(6)
    worst = 0.0
    x = rng.normal(size=(5, 6))
    w = rng.normal(size=(5, 3))
    net = mlp(6, (7,), CategoricalHead(3), seed=0)
    worst = max(worst, grad_check(net, x, lambda o: (np.sum(w * o), w)))
    gnet = mlp(6, (7,), GaussianHead(2), seed=1)
    wh, wJ = rng.normal(size=(5, 2)), rng.normal(size=(5, 2, 2))
    worst = max(worst, grad_check(gnet, x, lambda o: (np.sum(wh * o[0]) + np.sum(wJ * o[1]), (wh, wJ))))
    conv = RecognitionNet([Conv2d((1, 5, 5), 2, 3, rng), Relu(), Dense(18, 3, rng)], CategoricalHead(3))
    xc = rng.normal(size=(4, 25))
    wc = rng.normal(size=(4, 3))
    worst = max(worst, grad_check(conv, xc, lambda o: (np.sum(wc * o), wc)))
    return worst < 1e-4, f"max relative error {worst:.1e}"


def _gpfa_gradients():
    from .gpfa import METHODS, gradient_check

    errs = {m: gradient_check(m, seed=0)[0] for m in METHODS}
    worst = max(errs.values())
    ok = all(np.isfinite(e) for e in errs.values()) and worst < 1e-3
    return ok, ", ".join(f"{m} {e:.1e}" for m, e in errs.items())


def _discrete_tightness():
    from .discrete import e_step_exact, free_energy_discrete, log_softmax
    from .special import logsumexp

    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10):
        N, J, K = rng.integers(1, 8), rng.integers(1, 4), rng.integers(2, 6)
        log_f = log_softmax(rng.normal(size=(N, J, K)) * 2)
        F = np.exp(log_f).mean(axis=0)
        ll = sum(logsumexp([np.log(1 / K) + sum(log_f[n, j, k] - np.log(F[j, k]) for j in range(J))
                            for k in range(K)]) for n in range(N))
        post = e_step_exact(log_f)
        worst = max(worst, abs(free_energy_discrete(log_f, post.q) - ll))
    return worst < 1e-10, f"max gap {worst:.1e}"


def _lda_fixed_point():
    from .discrete import log_softmax
    from .lda import e_step_lda, e_step_residuals, free_energy_lda

    rng = np.random.default_rng(8)
    log_f = log_softmax(rng.normal(size=(6, 5, 3)) * 2)
    trace = []
    var = e_step_lda(log_f, 1.0, trace=trace)
    res = e_step_residuals(log_f, 1.0, var)
    drops = np.min(np.diff(trace)) if len(trace) > 1 else 0.0
    shifted = free_energy_lda(log_f + 3.0, 1.0, var) - free_energy_lda(log_f, 1.0, var)
    ok = var.converged and res < 1e-8 and drops >= -1e-10 and abs(shifted) < 1e-10
    return ok, f"residual {res:.1e}, min sweep change {drops:.1e}"


def _sparse_gp():
    from scipy.linalg import solve

    from .gpfa import JITTER, RbfKernel, kernel_gram, kl_inducing, latent_marginals

    worst_m, worst_kl = 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        k = RbfKernel.from_values(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2))
        t = np.cumsum(rng.uniform(0.8, 1.5, 8))
        Kt = kernel_gram(k, t)
        Kx = k.variance * np.exp(-0.5 * (t[:, None] - t[None]) ** 2 / k.lengthscale ** 2)
        A = rng.normal(size=(8, 8)) * 0.3
        Sigma = A @ A.T + 0.1 * np.eye(8)
        mu = rng.normal(size=8)
        m, s = latent_marginals(k, t, mu, np.linalg.cholesky(Sigma), t)
        # dense conditioning of f(t) on u(t) under the jittered prior
        W = solve(Kt, Kx, assume_a="pos").T
        s_ref = k.variance * (1 + JITTER) - np.sum(W * Kx, axis=1) + np.sum((W @ Sigma) * W, axis=1)
        worst_m = max(worst_m, np.max(np.abs(m - W @ mu)), np.max(np.abs(s - s_ref)))
        worst_kl = max(worst_kl, abs(kl_inducing(k, t, np.zeros(8), np.linalg.cholesky(Kt))))
    return worst_m < 1e-8 and worst_kl < 1e-10, f"marginals {worst_m:.1e}, KL at prior {worst_kl:.1e}"


CHECKS = [
    ("digamma", _digamma),
    ("expfam KL/entropy/round-trip", _expfam),
    ("hungarian vs brute force", _hungarian),
    ("nMSE affine invariance", _nmse),
    ("generator determinism", _generators),
    ("network gradients", _net_gradients),
    ("RP-GPFA gradients", _gpfa_gradients),
    ("exact E-step tightness", _discrete_tightness),
    ("RP-LDA fixed point", _lda_fixed_point),
    ("sparse GP marginals", _sparse_gp),
]


def run_selftest(names=None):
    out = []
    for name, fn in CHECKS:
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out
