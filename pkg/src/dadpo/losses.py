"""Training objectives: SFT, token-level KL, and the DPO loss family.

All losses are pure functions of policies and batches and return a
``LossBreakdown`` whose total is the arithmetic mean of the per-example
values plus any weighted auxiliary term. Sentence log-probabilities enter
the DPO-family margins unnormalized (summed over tokens); the token-level
KL is length-normalized.

``dadpo_loss`` is the general two-regularizer objective; it reduces
exactly to ``ddpo_loss`` at beta2 = 0 and to ``rdpo_loss`` at beta1 = 0.
The direct implementations of those two are kept independent so the
reductions can be cross-checked numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import check_nonnegative, check_nonempty, check_positive, check_same_vocab

__all__ = [
    "BetaPair",
    "LossBreakdown",
    "sft_loss",
    "token_kl_loss",
    "ddpo_loss",
    "rdpo_loss",
    "dadpo_loss",
    "composite_loss",
    "neg_log_sigmoid",
    "dadpo_margin",
]


@dataclass(frozen=True)
class BetaPair:
    """Weights of the reference-KL (beta1) and teacher-KL (beta2) terms."""

    beta1: float
    beta2: float

    def __post_init__(self):
        check_nonnegative(self.beta1, "beta1")
        check_nonnegative(self.beta2, "beta2")
        if self.beta1 + self.beta2 <= 0:
            raise ValueError("beta1 + beta2 must be > 0")

    @property
    def total(self):
        return self.beta1 + self.beta2


@dataclass
class LossBreakdown:
    total: float
    per_example: np.ndarray
    aux: dict = field(default_factory=dict)


def neg_log_sigmoid(z):
    """-log(sigmoid(z)), numerically stable for any real z."""
    return np.logaddexp(0.0, -np.asarray(z, dtype=float))


def sft_loss(policy, batch):
    """Negative mean sentence log-likelihood of the targets."""
    check_nonempty(batch, "batch")
    per = np.array([-policy.sentence_logprob(p.prompt, p.target) for p in batch])
    return LossBreakdown(total=float(per.mean()), per_example=per)


def _positional_kl(p, q):
    kl = float(np.sum(p * (np.log(p) - np.log(q))))
    # exact zero at p == q; clamp stray negative rounding on near-equal inputs
    return max(kl, 0.0)


def token_kl_loss(student, teacher, batch):
    """Length-normalized forward KL from student to teacher token distributions.

    For each pair the KL is evaluated at every position along the target
    response (conditioning on the target's prefix) and averaged by 1/L_y.
    Zero exactly when the two distributions coincide at every visited
    position.
    """
    check_nonempty(batch, "batch")
    check_same_vocab(student, teacher)
    per = np.zeros(len(batch))
    for i, pair in enumerate(batch):
        y = pair.target
        acc = 0.0
        prefix = ()
        for tok in y.tokens:
            ps = student.token_distribution(pair.prompt, prefix)
            pt = teacher.token_distribution(pair.prompt, prefix)
            acc += _positional_kl(ps, pt)
            prefix = prefix + (tok,)
        per[i] = acc / y.length
    return LossBreakdown(total=float(per.mean()), per_example=per)


def _pair_scores(policy, batch):
    w = np.array([policy.sentence_logprob(t.prompt, t.winner) for t in batch])
    l = np.array([policy.sentence_logprob(t.prompt, t.loser) for t in batch])
    return w, l


def ddpo_loss(policy, ref, batch, beta):
    """Preference loss with the frozen reference policy (direct form)."""
    check_nonempty(batch, "batch")
    check_positive(beta, "beta")
    pw, pl = _pair_scores(policy, batch)
    rw, rl = _pair_scores(ref, batch)
    margin = beta * ((pw - rw) - (pl - rl))
    per = neg_log_sigmoid(margin)
    return LossBreakdown(total=float(per.mean()), per_example=per, aux={"margins": margin})


def rdpo_loss(policy, teacher, batch, beta):
    """Preference loss with the teacher distribution as the reference."""
    check_nonempty(batch, "batch")
    check_positive(beta, "beta")
    pw, pl = _pair_scores(policy, batch)
    tw, tl = _pair_scores(teacher, batch)
    margin = beta * ((pw - tw) - (pl - tl))
    per = neg_log_sigmoid(margin)
    return LossBreakdown(total=float(per.mean()), per_example=per, aux={"margins": margin})


def dadpo_margin(policy, ref, teacher, batch, betas):
    """Per-example margin of the distribution-aware preference loss.

    For each response the score is
    (beta1+beta2) log pi_theta - beta1 log pi_ref - beta2 log pi_te,
    and the margin is the winner score minus the loser score.
    """
    pw, pl = _pair_scores(policy, batch)
    rw, rl = _pair_scores(ref, batch)
    tw, tl = _pair_scores(teacher, batch)
    b1, b2 = betas.beta1, betas.beta2
    bt = betas.total
    score_w = bt * pw - b1 * rw - b2 * tw
    score_l = bt * pl - b1 * rl - b2 * tl
    return score_w - score_l


def dadpo_loss(policy, ref, teacher, batch, betas):
    """Distribution-aware preference loss with both regularizers."""
    check_nonempty(batch, "batch")
    if not isinstance(betas, BetaPair):
        betas = BetaPair(*betas)
    margin = dadpo_margin(policy, ref, teacher, batch, betas)
    per = neg_log_sigmoid(margin)
    return LossBreakdown(total=float(per.mean()), per_example=per, aux={"margins": margin})


def _winner_sft_view(batch):
    # a PreferenceTriplet exposes (prompt, winner); an SftPair (prompt, target)
    from .corpus import SftPair

    out = []
    for item in batch:
        if hasattr(item, "target"):
            out.append(item)
        else:
            out.append(SftPair(prompt=item.prompt, target=item.winner))
    return out


def composite_loss(base, kl_weight, policy, teacher, batch, ref=None, beta=None):
    """Base loss plus a weighted token-KL term on the winner responses.

    ``base`` is "sft" (batch of SFT pairs) or "ddpo" (batch of preference
    triplets; requires ``ref`` and ``beta``). The breakdown exposes both
    components.
    """
    check_nonnegative(kl_weight, "kl_weight")
    if base == "sft":
        base_bd = sft_loss(policy, batch)
    elif base == "ddpo":
        if ref is None or beta is None:
            raise ValueError("composite ddpo base requires ref and beta")
        base_bd = ddpo_loss(policy, ref, batch, beta)
    else:
        raise ValueError(f"unknown composite base {base!r}; expected 'sft' or 'ddpo'")
    kl_bd = token_kl_loss(policy, teacher, _winner_sft_view(batch))
    per = base_bd.per_example + kl_weight * kl_bd.per_example
    return LossBreakdown(
        total=float(per.mean()),
        per_example=per,
        aux={"base_total": base_bd.total, "kl_total": kl_bd.total, "kl_weight": float(kl_weight)},
    )
