"""Machine-checkable verification suites behind the `verify` CLI subcommand.

Each suite returns (passed, lines): one report line per instance or check
plus a summary line, so runs are auditable and diffable.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import grads as G
from . import losses as L
from . import theory
from .corpus import Prompt, Response
from .evaluation import WinRateReport
from .losses import BetaPair
from .pipeline import RunConfig, distill
from .policy import ResponseSpace, TabularPolicy, TokenModelPolicy, enumerate_responses
from .worlds import make_world

__all__ = [
    "suite_theorem1",
    "suite_gradients",
    "suite_reductions",
    "suite_winrate",
    "SUITES",
    "random_tabular_instance",
    "random_token_instance",
    "relative_grad_error",
]

BETA1_GRID = (0.01, 0.1, 1.0)
BETA2_GRID = (0.001, 0.01, 0.1, 1.0)


def unary_space(size):
    """Distinct EOS-terminated responses: i content tokens then EOS."""
    return ResponseSpace(Response(tokens=(1,) * i + (0,)) for i in range(size))


def table_reward(space, values):
    values = np.asarray(values, dtype=float)

    def reward(x, y):
        return float(values[space.index_of(y.tokens)])

    return reward


def suite_theorem1(seed=0, n_instances=200, n_random_points=1000, sizes=(3, 40)):
    """Closed-form optimum vs projected-gradient ascent and random simplex points."""
    rng = np.random.default_rng(seed)
    x = Prompt(id="verify", tokens=(1,))
    combos = [(b1, b2) for b1 in BETA1_GRID for b2 in BETA2_GRID]
    lines = []
    max_gap = -np.inf
    max_norm_err = 0.0
    for i in range(n_instances):
        n = int(rng.integers(sizes[0], sizes[1] + 1))
        space = unary_space(n)
        b1, b2 = combos[i % len(combos)]
        betas = BetaPair(b1, b2)
        ref = theory.ExactDistribution(space, rng.dirichlet(np.ones(n)))
        te = theory.ExactDistribution(space, rng.dirichlet(np.ones(n)))
        rvec = rng.normal(0.0, 1.0, size=n)
        r = table_reward(space, rvec)

        star = theory.optimal_policy(ref, te, r, betas, x)
        norm_err = abs(float(star.probs.sum()) - 1.0)
        obj_star = theory.rl_objective(star, ref, te, r, betas, x)

        bf = theory.brute_force_maximize(ref, te, r, betas, x, iters=300, seed=int(rng.integers(2**31)))
        obj_bf = theory.rl_objective(bf, ref, te, r, betas, x)

        q_mat = rng.dirichlet(np.ones(n), size=n_random_points)
        log_ref = np.log(np.maximum(ref.probs, theory.PROB_FLOOR))
        log_te = np.log(np.maximum(te.probs, theory.PROB_FLOOR))
        log_q = np.log(q_mat)
        obj_q = q_mat @ rvec
        obj_q -= b1 * np.sum(q_mat * (log_q - log_ref), axis=1)
        obj_q -= b2 * np.sum(q_mat * (log_q - log_te), axis=1)

        gap = max(obj_bf - obj_star, float(obj_q.max()) - obj_star)
        max_gap = max(max_gap, gap)
        max_norm_err = max(max_norm_err, norm_err)
        lines.append(
            f"instance={i:03d} size={n:02d} beta1={b1} beta2={b2} "
            f"gap={gap:.3e} norm_err={norm_err:.3e}"
        )
    passed = max_gap < 1e-8 and max_norm_err < 1e-10
    lines.append(
        f"summary suite=theorem1 instances={n_instances} max_gap={max_gap:.3e} "
        f"max_norm_err={max_norm_err:.3e} pass={passed}"
    )
    return passed, lines


def random_tabular_instance(rng, n_prompts=2, space_size=6, batch_size=3):
    """Policy triple plus a triplet batch over a small explicit space."""
    space = unary_space(space_size)
    prompts = [Prompt(id=f"q{i}", tokens=(1, 1)) for i in range(n_prompts)]
    vocab = _tiny_vocab()

    def rand_policy():
        return TabularPolicy(
            vocab, space, [p.id for p in prompts],
            rng.uniform(-2.0, 2.0, size=(n_prompts, space.size)),
        )

    policy, ref, teacher = rand_policy(), rand_policy(), rand_policy()
    batch = []
    for _ in range(batch_size):
        p = prompts[int(rng.integers(n_prompts))]
        i, j = rng.choice(space.size, size=2, replace=False)
        batch.append(_triplet(p, space.responses[i], space.responses[j]))
    return policy, ref, teacher, batch


def random_token_instance(rng, batch_size=3, dim=3, max_len=4):
    """Token-model student with tabular-free policies for ref/teacher scoring."""
    vocab = _small_vocab()
    space = enumerate_responses(vocab, max_len - 1)

    def rand_policy():
        n = 2 * vocab.size * dim + vocab.size
        return TokenModelPolicy(vocab, dim, rng.uniform(-2.0, 2.0, size=n), max_len)

    policy, ref, teacher = rand_policy(), rand_policy(), rand_policy()
    prompts = [Prompt(id=f"q{i}", tokens=tuple(rng.integers(1, vocab.size, size=2))) for i in range(2)]
    batch = []
    for _ in range(batch_size):
        p = prompts[int(rng.integers(len(prompts)))]
        i, j = rng.choice(space.size, size=2, replace=False)
        batch.append(_triplet(p, space.responses[i], space.responses[j]))
    return policy, ref, teacher, batch


def _tiny_vocab():
    from .corpus import Vocab

    return Vocab.build(3)


def _small_vocab():
    from .corpus import Vocab

    return Vocab.build(4)


def _triplet(prompt, winner, loser):
    from .corpus import PreferenceTriplet

    return PreferenceTriplet(prompt=prompt, winner=winner, loser=loser)


def _sft_batch_from(batch):
    from .corpus import SftPair

    return [SftPair(prompt=t.prompt, target=t.winner) for t in batch]


def relative_grad_error(analytic, numeric):
    scale = max(1.0, float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) / scale


def _grad_setup(loss_id, policy, ref, teacher, batch, beta, betas, kl_weight):
    sft_batch = _sft_batch_from(batch)
    if loss_id == "sft":
        return (
            lambda p: L.sft_loss(p, sft_batch).total,
            lambda p: G.loss_grad("sft", p, sft_batch),
        )
    if loss_id == "token_kl":
        return (
            lambda p: L.token_kl_loss(p, teacher, sft_batch).total,
            lambda p: G.loss_grad("token_kl", p, sft_batch, teacher=teacher),
        )
    if loss_id == "ddpo":
        return (
            lambda p: L.ddpo_loss(p, ref, batch, beta).total,
            lambda p: G.loss_grad("ddpo", p, batch, ref=ref, beta=beta),
        )
    if loss_id == "rdpo":
        return (
            lambda p: L.rdpo_loss(p, teacher, batch, beta).total,
            lambda p: G.loss_grad("rdpo", p, batch, teacher=teacher, beta=beta),
        )
    if loss_id == "dadpo":
        return (
            lambda p: L.dadpo_loss(p, ref, teacher, batch, betas).total,
            lambda p: G.loss_grad("dadpo", p, batch, ref=ref, teacher=teacher, betas=betas),
        )
    if loss_id == "sft_kl":
        return (
            lambda p: L.composite_loss("sft", kl_weight, p, teacher, sft_batch).total,
            lambda p: G.loss_grad("sft_kl", p, sft_batch, teacher=teacher, kl_weight=kl_weight),
        )
    if loss_id == "ddpo_kl":
        return (
            lambda p: L.composite_loss("ddpo", kl_weight, p, teacher, batch, ref=ref, beta=beta).total,
            lambda p: G.loss_grad("ddpo_kl", p, batch, ref=ref, teacher=teacher, beta=beta, kl_weight=kl_weight),
        )
    raise ValueError(loss_id)


def suite_gradients(seed=0, n_instances=50, h=1e-5, tol=1e-5):
    """Analytic vs central-difference gradients for every loss, both backends."""
    rng = np.random.default_rng(seed)
    lines = []
    passed = True
    for loss_id in G.LOSS_IDS:
        worst = 0.0
        for k in range(n_instances):
            if k % 2 == 0:
                policy, ref, teacher, batch = random_tabular_instance(rng)
            else:
                policy, ref, teacher, batch = random_token_instance(rng)
            beta = float(rng.choice(BETA1_GRID))
            betas = BetaPair(float(rng.choice(BETA1_GRID)), float(rng.choice(BETA2_GRID)))
            kl_weight = float(rng.choice((0.1, 0.2, 0.4)))
            loss_eval, grad_eval = _grad_setup(loss_id, policy, ref, teacher, batch, beta, betas, kl_weight)
            analytic = grad_eval(policy)
            numeric = G.finite_diff_grad(lambda v: loss_eval(policy.with_parameters(v)), policy.parameters, h)
            worst = max(worst, relative_grad_error(analytic, numeric))
        ok = worst < tol
        passed &= ok
        lines.append(f"loss={loss_id} instances={n_instances} max_rel_err={worst:.3e} pass={ok}")

    # coefficient decomposition: sigma((b1+b2)(-delta_theta) + b2*delta_te)
    # must equal sigma(-margin) evaluated from the loss margin
    worst_coeff = 0.0
    for _ in range(50):
        policy, ref, teacher, batch = random_tabular_instance(rng)
        betas = BetaPair(float(rng.choice(BETA1_GRID)), float(rng.choice(BETA2_GRID)))
        _, coeffs = G.dadpo_grad(policy, ref, teacher, batch, betas, return_coeffs=True)
        margins = L.dadpo_loss(policy, ref, teacher, batch, betas).aux["margins"]
        worst_coeff = max(worst_coeff, float(np.max(np.abs(coeffs - expit(-margins)))))
    ok = worst_coeff < 1e-10
    passed &= ok
    lines.append(f"check=coefficient_decomposition max_abs_err={worst_coeff:.3e} pass={ok}")
    lines.append(f"summary suite=gradients pass={passed}")
    return bool(passed), lines


def suite_reductions(seed=0, n_batches=1000, tol=1e-12):
    """dadpo(beta,0) == ddpo(beta) and dadpo(0,beta) == rdpo(beta), then
    bit-identical pipeline trajectories for the same reductions."""
    rng = np.random.default_rng(seed)
    worst_ddpo = 0.0
    worst_rdpo = 0.0
    for _ in range(n_batches):
        policy, ref, teacher, batch = random_tabular_instance(
            rng, space_size=int(rng.integers(4, 9)), batch_size=int(rng.integers(1, 5))
        )
        b1 = float(rng.choice(BETA1_GRID))
        b2 = float(rng.choice(BETA2_GRID))
        d1 = abs(L.dadpo_loss(policy, ref, teacher, batch, BetaPair(b1, 0.0)).total
                 - L.ddpo_loss(policy, ref, batch, b1).total)
        d2 = abs(L.dadpo_loss(policy, ref, teacher, batch, BetaPair(0.0, b2)).total
                 - L.rdpo_loss(policy, teacher, batch, b2).total)
        worst_ddpo = max(worst_ddpo, d1)
        worst_rdpo = max(worst_rdpo, d2)
    lines = [
        f"check=loss_reduction_ddpo batches={n_batches} max_abs_diff={worst_ddpo:.3e} pass={worst_ddpo < tol}",
        f"check=loss_reduction_rdpo batches={n_batches} max_abs_diff={worst_rdpo:.3e} pass={worst_rdpo < tol}",
    ]
    passed = worst_ddpo < tol and worst_rdpo < tol

    world = make_world(seed=seed, vocab_size=4, max_len=3, n_train=12, n_eval=4, student_dim=4)
    base = dict(sft_epochs=20, pref_epochs=25, seed=3, max_len=3)
    pairs = [
        ("ddpo", RunConfig(method="ddpo", beta_grid=(0.1,), **base),
         RunConfig(method="dadpo", beta1_grid=(0.1,), beta2_grid=(0.0,), **base)),
        ("rdpo", RunConfig(method="rdpo", beta_grid=(0.1,), **base),
         RunConfig(method="dadpo", beta1_grid=(0.0,), beta2_grid=(0.1,), **base)),
    ]
    for name, cfg_direct, cfg_general in pairs:
        _, pol_direct = distill(world.train_prompts, world.teacher, world.student, cfg_direct)
        _, pol_general = distill(world.train_prompts, world.teacher, world.student, cfg_general)
        identical = bool(np.array_equal(pol_direct.parameters, pol_general.parameters))
        passed &= identical
        lines.append(f"check=pipeline_bit_identity_{name} identical={identical} pass={identical}")
    lines.append(f"summary suite=reductions pass={passed}")
    return bool(passed), lines


PRINTED_ROWS = [
    # (n_win, n_tie, n_lose, printed omega): every published count row
    # whose printed one-decimal value is arithmetically consistent with
    # its counts under standard rounding
    (82, 43, 175, "-31.0%"),
    (120, 38, 142, "-7.3%"),
    (37, 22, 241, "-68.0%"),
    (161, 20, 119, "14.0%"),
    (71, 38, 191, "-40.0%"),
    (117, 39, 144, "-9.0%"),
    (23, 23, 254, "-77.0%"),
    (41, 33, 226, "-61.7%"),
    (124, 30, 146, "-7.3%"),
    (138, 26, 136, "0.7%"),
    (130, 25, 145, "-5.0%"),
    (29, 17, 254, "-75.0%"),
    (43, 15, 242, "-66.3%"),
    (47, 16, 237, "-63.3%"),
    (68, 18, 214, "-48.7%"),
    (38, 7, 255, "-72.3%"),
    (79, 28, 193, "-38.0%"),
    (81, 29, 190, "-36.3%"),
    (76, 30, 194, "-39.3%"),
    (82, 28, 190, "-36.0%"),
]


def suite_winrate():
    """Win-rate arithmetic reproduces the printed values from raw counts."""
    lines = []
    passed = True
    for n_win, n_tie, n_lose, expected in PRINTED_ROWS:
        report = WinRateReport.from_counts(n_win, n_lose, n_tie)
        ok = report.display() == expected
        passed &= ok
        lines.append(
            f"counts=({n_win},{n_tie},{n_lose}) omega={report.display()} expected={expected} pass={ok}"
        )
    lines.append(f"summary suite=winrate rows={len(PRINTED_ROWS)} pass={passed}")
    return bool(passed), lines


SUITES = {
    "theorem1": suite_theorem1,
    "gradients": suite_gradients,
    "reductions": suite_reductions,
    "winrate": lambda seed=0: suite_winrate(),
}
