"""Exact objectives and closed-form optima on enumerable response spaces.

The doubly KL-regularized objective

    E_{y~pi}[r(x,y)] - beta1 KL(pi || pi_ref) - beta2 KL(pi || pi_te)

has the unique maximizer

    pi*(y|x) = pi_ref^{beta1/(beta1+beta2)} * pi_te^{beta2/(beta1+beta2)}
               * exp(r/(beta1+beta2)) / Z(x),

with Z(x) the sum of the numerator over the response space. Everything
here is computed by exact summation; products are assembled in log space
with max-subtraction so Z never under/overflows. Reference and teacher
probabilities are floored at PROB_FLOOR inside exponents so pi* has full
support.

``brute_force_maximize`` is an independent oracle: multi-start projected
gradient ascent on the probability simplex.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import expit, logsumexp

from .policy import PROB_FLOOR
from .validation import check_finite_array

logger = logging.getLogger(__name__)

__all__ = [
    "ExactDistribution",
    "SupportError",
    "exact_distribution",
    "rl_objective",
    "partition_z",
    "optimal_policy",
    "implicit_reward",
    "implicit_reward_constant",
    "bt_preference",
    "brute_force_maximize",
    "project_simplex",
]

NORM_TOL = 1e-10


class SupportError(ValueError):
    """A distribution places mass where a reference distribution has none."""


class ExactDistribution:
    """Explicit probabilities over every response in a ResponseSpace."""

    def __init__(self, space, probs):
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (space.size,):
            raise ValueError(f"probs shape {probs.shape} does not match space size {space.size}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("probabilities must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > NORM_TOL:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1 within {NORM_TOL}")
        self.space = space
        self.probs = probs

    @classmethod
    def from_weights(cls, space, weights):
        weights = check_finite_array(weights, "weights")
        if np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
        return cls(space, weights / weights.sum())

    def prob_of(self, y):
        return float(self.probs[self.space.index_of(y.tokens)])


def exact_distribution(policy, x, space):
    """Materialize a policy's sentence probabilities over a space."""
    logp = np.array([policy.sentence_logprob(x, y) for y in space])
    return ExactDistribution.from_weights(space, np.exp(logp))


def _reward_vector(r, x, space):
    vec = np.array([float(r(x, y)) for y in space])
    if not np.all(np.isfinite(vec)):
        raise ValueError("reward must be finite on the whole response space")
    return vec


def _check_common_space(*dists):
    first = dists[0].space
    for d in dists[1:]:
        if d.space is not first and [y.tokens for y in d.space] != [y.tokens for y in first]:
            raise ValueError("distributions must share the same response space")
    return first


def _kl(p, q, label):
    mask = p > 0
    if np.any(q[mask] == 0):
        raise SupportError(f"{label} has zero mass on the policy's support")
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def rl_objective(policy, ref, teacher, r, betas, x):
    """E_pi[r] - beta1 KL(pi||ref) - beta2 KL(pi||teacher), by exact summation."""
    _check_common_space(policy, ref, teacher)
    rvec = _reward_vector(r, x, policy.space)
    value = float(policy.probs @ rvec)
    if betas.beta1 > 0:
        value -= betas.beta1 * _kl(policy.probs, ref.probs, "reference")
    if betas.beta2 > 0:
        value -= betas.beta2 * _kl(policy.probs, teacher.probs, "teacher")
    return value


def _log_numerator(ref, teacher, r, betas, x):
    space = _check_common_space(ref, teacher)
    rvec = _reward_vector(r, x, space)
    bt = betas.total
    log_ref = np.log(np.maximum(ref.probs, PROB_FLOOR))
    log_te = np.log(np.maximum(teacher.probs, PROB_FLOOR))
    return (betas.beta1 * log_ref + betas.beta2 * log_te + rvec) / bt


def partition_z(ref, teacher, r, betas, x):
    """Normalizer Z(x) of the closed-form optimum (max-subtracted in log space)."""
    return float(np.exp(logsumexp(_log_numerator(ref, teacher, r, betas, x))))


def optimal_policy(ref, teacher, r, betas, x):
    """Closed-form maximizer of the doubly regularized objective."""
    logits = _log_numerator(ref, teacher, r, betas, x)
    probs = np.exp(logits - logsumexp(logits))
    probs = probs / probs.sum()
    return ExactDistribution(ref.space, probs)


def implicit_reward(pi_star, ref, teacher, betas, x, y):
    """Reward recovered from an optimal policy, up to a per-prompt constant.

    Returns (beta1+beta2) log pi*(y) - beta1 log ref(y) - beta2 log te(y).
    The omitted constant is (beta1+beta2) log Z(x); it cannot be recovered
    from pi* alone (shifting r leaves pi* unchanged) — when the true reward
    is known, ``implicit_reward_constant`` supplies it.
    """
    p = pi_star.prob_of(y)
    if p <= 0:
        raise ValueError("implicit reward undefined for a zero-probability response")
    pr = max(ref.prob_of(y), PROB_FLOOR)
    pt = max(teacher.prob_of(y), PROB_FLOOR)
    return float(
        betas.total * np.log(p) - betas.beta1 * np.log(pr) - betas.beta2 * np.log(pt)
    )


def implicit_reward_constant(ref, teacher, r, betas, x):
    """The (beta1+beta2) log Z(x) constant, computable once r is known."""
    return float(betas.total * logsumexp(_log_numerator(ref, teacher, r, betas, x)))


def bt_preference(pi_star, ref, teacher, betas, x, y1, y2):
    """Pairwise preference probability p(y1 > y2); the Z terms cancel."""
    h1 = implicit_reward(pi_star, ref, teacher, betas, x, y1)
    h2 = implicit_reward(pi_star, ref, teacher, betas, x, y2)
    return float(expit(h1 - h2))


def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    cssv = np.cumsum(u) - 1.0
    ind = np.arange(1, len(v) + 1)
    cond = u - cssv / ind > 0
    rho = np.count_nonzero(cond)
    theta = cssv[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


_INTERIOR_EPS = 1e-15


def _objective_and_grad(p, rvec, log_ref, log_te, betas):
    logp = np.log(p)
    value = float(p @ rvec)
    grad = rvec.copy()
    if betas.beta1 > 0:
        value -= betas.beta1 * float(np.sum(p * (logp - log_ref)))
        grad -= betas.beta1 * (logp - log_ref + 1.0)
    if betas.beta2 > 0:
        value -= betas.beta2 * float(np.sum(p * (logp - log_te)))
        grad -= betas.beta2 * (logp - log_te + 1.0)
    return value, grad


def brute_force_maximize(ref, teacher, r, betas, x, iters=400, seed=0, n_starts=6):
    """Projected gradient ascent on the simplex, best of several starts.

    Iterates are kept strictly interior (clipped at 1e-15 and
    renormalized) so entropy gradients stay finite. Non-convergence is
    logged with the final projected-gradient norm; the best iterate found
    is returned regardless.
    """
    space = _check_common_space(ref, teacher)
    rvec = _reward_vector(r, x, space)
    log_ref = np.log(np.maximum(ref.probs, PROB_FLOOR))
    log_te = np.log(np.maximum(teacher.probs, PROB_FLOOR))
    n = space.size
    rng = np.random.default_rng(seed)

    def clean(p):
        p = np.maximum(p, _INTERIOR_EPS)
        return p / p.sum()

    starts = [np.full(n, 1.0 / n)]
    starts.extend(rng.dirichlet(np.ones(n)) for _ in range(n_starts - 1))

    best_p, best_val = None, -np.inf
    worst_resid = 0.0
    for p0 in starts:
        p = clean(p0)
        val, grad = _objective_and_grad(p, rvec, log_ref, log_te, betas)
        step = 1.0 / max(1.0, betas.total)
        for _ in range(iters):
            trial_step = step
            improved = False
            for _ in range(60):
                q = clean(project_simplex(p + trial_step * grad))
                qval, qgrad = _objective_and_grad(q, rvec, log_ref, log_te, betas)
                if qval >= val:
                    improved = qval > val + 1e-16
                    p, val, grad = q, qval, qgrad
                    step = trial_step * 1.5
                    break
                trial_step *= 0.5
            if not improved:
                break
        resid = float(np.linalg.norm(project_simplex(p + grad) - p))
        worst_resid = max(worst_resid, resid)
        if val > best_val:
            best_p, best_val = p, val
    if worst_resid > 1e-6:
        logger.info("brute_force_maximize: final projected-gradient residual %.3e", worst_resid)
    return ExactDistribution(space, best_p)
