"""Analytic gradients of every loss, a finite-difference checker, and updates.

Gradients are taken with respect to the trainable policy's parameters
only; reference and teacher policies are frozen. The differentiable
primitive is the sentence log-probability, which both backends expose
exactly (softmax Jacobian for the tabular backend, chain rule over
positions for the token model).

The distribution-aware preference gradient per example is

    coeff * (beta1 + beta2) * (grad log pi(y_loser) - grad log pi(y_winner)),
    coeff = sigmoid((beta1+beta2) * (-delta_theta) + beta2 * delta_te),

where delta_theta and delta_te are the winner-minus-loser log-ratio gaps
of the policy and the teacher against the reference. A step of
``-lr * grad`` therefore increases the winner margin. The plain-DPO and
teacher-reference gradients are this same path with beta2 = 0 or
beta1 = 0, which keeps the algebraic reductions exact to the bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .losses import BetaPair
from .validation import check_nonempty, check_positive

__all__ = [
    "finite_diff_grad",
    "dadpo_grad",
    "sft_grad",
    "token_kl_grad",
    "loss_grad",
    "LOSS_IDS",
    "OptimConfig",
    "OptimizationError",
    "make_optimizer",
    "step",
]

LOSS_IDS = ("sft", "token_kl", "ddpo", "rdpo", "dadpo", "sft_kl", "ddpo_kl")


class OptimizationError(RuntimeError):
    pass


def finite_diff_grad(loss_eval, params, h):
    """Central-difference gradient of a scalar function of a flat vector."""
    check_positive(h, "h")
    params = np.asarray(params, dtype=float)
    grad = np.zeros(params.size)
    for i in range(params.size):
        bumped = params.copy()
        bumped[i] = params[i] + h
        f_plus = loss_eval(bumped)
        bumped[i] = params[i] - h
        f_minus = loss_eval(bumped)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"loss evaluation non-finite at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def sft_grad(policy, batch):
    check_nonempty(batch, "batch")
    grad = np.zeros(policy.n_params)
    for pair in batch:
        grad -= policy.sentence_logprob_grad(pair.prompt, pair.target)
    return grad / len(batch)


def _positional_kl_grad(student, teacher, prompt, prefix):
    p_raw, jac = student.token_distribution_grad(prompt, prefix)
    q = teacher.token_distribution(prompt, prefix)
    mask = p_raw > 0
    terms = np.log(p_raw[mask]) - np.log(q[mask]) + 1.0
    return terms @ jac[mask]


def token_kl_grad(student, teacher, batch):
    check_nonempty(batch, "batch")
    grad = np.zeros(student.n_params)
    for pair in batch:
        y = pair.target
        acc = np.zeros(student.n_params)
        prefix = ()
        for tok in y.tokens:
            acc += _positional_kl_grad(student, teacher, pair.prompt, prefix)
            prefix = prefix + (tok,)
        grad += acc / y.length
    return grad / len(batch)


def dadpo_grad(policy, ref, teacher, batch, betas, return_coeffs=False):
    """Batch-mean gradient of the distribution-aware preference loss."""
    check_nonempty(batch, "batch")
    if not isinstance(betas, BetaPair):
        betas = BetaPair(*betas)
    bt = betas.total
    grad = np.zeros(policy.n_params)
    coeffs = np.zeros(len(batch))
    for i, t in enumerate(batch):
        pw = policy.sentence_logprob(t.prompt, t.winner)
        pl = policy.sentence_logprob(t.prompt, t.loser)
        rw = ref.sentence_logprob(t.prompt, t.winner)
        rl = ref.sentence_logprob(t.prompt, t.loser)
        tw = teacher.sentence_logprob(t.prompt, t.winner)
        tl = teacher.sentence_logprob(t.prompt, t.loser)
        delta_theta = (pw - rw) - (pl - rl)
        delta_te = (tw - rw) - (tl - rl)
        coeff = float(expit(bt * (-delta_theta) + betas.beta2 * delta_te))
        coeffs[i] = coeff
        gw = policy.sentence_logprob_grad(t.prompt, t.winner)
        gl = policy.sentence_logprob_grad(t.prompt, t.loser)
        grad += coeff * bt * (gl - gw)
    grad /= len(batch)
    if return_coeffs:
        return grad, coeffs
    return grad


def loss_grad(loss_id, policy, batch, *, ref=None, teacher=None, beta=None, betas=None, kl_weight=None):
    """Gradient of the named loss wrt the trainable policy's parameters.

    The two plain preference losses are routed through the
    distribution-aware path with one beta zeroed, so pipeline trajectories
    built from either loss id coincide bit for bit.
    """
    if loss_id == "sft":
        return sft_grad(policy, batch)
    if loss_id == "token_kl":
        if teacher is None:
            raise ValueError("token_kl gradient requires teacher")
        return token_kl_grad(policy, teacher, batch)
    if loss_id == "ddpo":
        if ref is None or beta is None:
            raise ValueError("ddpo gradient requires ref and beta")
        return dadpo_grad(policy, ref, ref, batch, BetaPair(beta, 0.0))
    if loss_id == "rdpo":
        if teacher is None or beta is None:
            raise ValueError("rdpo gradient requires teacher and beta")
        return dadpo_grad(policy, teacher, teacher, batch, BetaPair(0.0, beta))
    if loss_id == "dadpo":
        if ref is None or teacher is None or betas is None:
            raise ValueError("dadpo gradient requires ref, teacher, and betas")
        return dadpo_grad(policy, ref, teacher, batch, betas)
    if loss_id == "sft_kl":
        if teacher is None or kl_weight is None:
            raise ValueError("sft_kl gradient requires teacher and kl_weight")
        return sft_grad(policy, batch) + kl_weight * token_kl_grad(policy, teacher, batch)
    if loss_id == "ddpo_kl":
        if ref is None or teacher is None or beta is None or kl_weight is None:
            raise ValueError("ddpo_kl gradient requires ref, teacher, beta, and kl_weight")
        from .losses import _winner_sft_view

        base = dadpo_grad(policy, ref, ref, batch, BetaPair(beta, 0.0))
        return base + kl_weight * token_kl_grad(policy, teacher, _winner_sft_view(batch))
    raise ValueError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")


@dataclass(frozen=True)
class OptimConfig:
    """Parameter-update settings; plain gradient descent by default."""

    algorithm: str = "sgd"
    lr: float = 1e-2
    step_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"algorithm must be 'sgd' or 'adam', got {self.algorithm!r}")
        check_positive(self.lr, "lr")
        if self.step_clip is not None:
            check_positive(self.step_clip, "step_clip")


def _check_grad(grad):
    grad = np.asarray(grad, dtype=float)
    bad = np.count_nonzero(~np.isfinite(grad))
    if bad:
        raise OptimizationError(f"gradient contains {bad} non-finite entries; aborting update")
    return grad


class SgdOptimizer:
    def __init__(self, cfg):
        self.cfg = cfg

    def step(self, policy, grad):
        grad = _check_grad(grad)
        delta = self.cfg.lr * grad
        if self.cfg.step_clip is not None:
            norm = np.max(np.abs(delta))
            if norm > self.cfg.step_clip:
                delta = delta * (self.cfg.step_clip / norm)
        return policy.with_parameters(policy.parameters - delta)


class AdamOptimizer:
    """Adaptive-moment updates with bias correction; deterministic."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, cfg):
        self.cfg = cfg
        self.m = None
        self.v = None
        self.t = 0

    def step(self, policy, grad):
        grad = _check_grad(grad)
        if self.m is None:
            self.m = np.zeros(grad.size)
            self.v = np.zeros(grad.size)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        delta = self.cfg.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if self.cfg.step_clip is not None:
            norm = np.max(np.abs(delta))
            if norm > self.cfg.step_clip:
                delta = delta * (self.cfg.step_clip / norm)
        return policy.with_parameters(policy.parameters - delta)


def make_optimizer(cfg):
    return SgdOptimizer(cfg) if cfg.algorithm == "sgd" else AdamOptimizer(cfg)


def step(policy, grad, cfg):
    """Single update p <- p - lr * g (adaptive: one fresh-state step)."""
    return make_optimizer(cfg).step(policy, grad)
