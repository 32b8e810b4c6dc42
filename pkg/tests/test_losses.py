import math

import numpy as np
import pytest

from dadpo.corpus import PreferenceTriplet, Prompt, Response, SftPair, Vocab
from dadpo.losses import (
    BetaPair,
    composite_loss,
    dadpo_loss,
    ddpo_loss,
    neg_log_sigmoid,
    rdpo_loss,
    sft_loss,
    token_kl_loss,
)
from dadpo.policy import ResponseSpace, TabularPolicy, TokenModelPolicy, enumerate_responses
from dadpo.verify import random_tabular_instance

X = Prompt(id="p0", tokens=(1,))

LN2 = 0.6931471805599453
NLS3 = 0.04858735157374196  # -ln(sigmoid(3)), sigmoid(3) = 0.9525741268224334


def two_response_policy(p_second):
    """Tabular policy over {[EOS], [t1,EOS]} assigning p_second to the latter."""
    v = Vocab.build(2)
    space = ResponseSpace([Response(tokens=(0,)), Response(tokens=(1, 0))])
    logits = np.log([1.0 - p_second, p_second])
    return TabularPolicy(v, space, ["p0"], [logits]), space


def scores_policy(table):
    """Tabular policy with independent rows; table maps prompt id -> probs."""
    v = Vocab.build(2)
    space = ResponseSpace([Response(tokens=(0,)), Response(tokens=(1, 0))])
    ids = sorted(table)
    logits = np.log([table[i] for i in ids])
    return TabularPolicy(v, space, ids, logits), space


class TestBetaPair:
    def test_both_zero_rejected(self):
        with pytest.raises(ValueError, match="beta1 \\+ beta2"):
            BetaPair(0.0, 0.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            BetaPair(-0.1, 0.5)

    def test_single_zero_allowed(self):
        assert BetaPair(0.5, 0.0).total == 0.5
        assert BetaPair(0.0, 0.5).total == 0.5


class TestSftLoss:
    def test_deterministic_policy_zero(self):
        v = Vocab.build(2)
        space = ResponseSpace([Response(tokens=(0,)), Response(tokens=(1, 0))])
        pol = TabularPolicy(v, space, ["p0"], [[500.0, -500.0]])
        batch = [SftPair(prompt=X, target=space.responses[0])]
        assert sft_loss(pol, batch).total == 0.0

    def test_uniform_token_model(self):
        v = Vocab.build(4)
        tm = TokenModelPolicy(v, 3, np.zeros(2 * 4 * 3 + 4), max_len=4)
        batch = [
            SftPair(prompt=X, target=Response(tokens=(1, 0))),
            SftPair(prompt=X, target=Response(tokens=(3, 0))),
        ]
        assert sft_loss(tm, batch).total == pytest.approx(2 * math.log(4), abs=1e-9)

    def test_hand_mixed_batch(self):
        pol, space = two_response_policy(0.5)
        pol2, _ = two_response_policy(0.25)
        # one pair scored at probability 0.5, another at 0.25, via two prompts
        v = Vocab.build(2)
        both = TabularPolicy(
            v, space, ["a", "b"], np.log([[0.5, 0.5], [0.75, 0.25]])
        )
        batch = [
            SftPair(prompt=Prompt(id="a", tokens=(1,)), target=space.responses[1]),
            SftPair(prompt=Prompt(id="b", tokens=(1,)), target=space.responses[1]),
        ]
        assert sft_loss(both, batch).total == pytest.approx(1.0397207708399179, abs=1e-12)

    def test_empty_batch_rejected(self):
        pol, _ = two_response_policy(0.5)
        with pytest.raises(ValueError):
            sft_loss(pol, [])

    def test_total_is_mean_of_per_example(self):
        rng = np.random.default_rng(0)
        policy, _, _, batch = random_tabular_instance(rng)
        bd = sft_loss(policy, [SftPair(prompt=t.prompt, target=t.winner) for t in batch])
        assert bd.total == pytest.approx(bd.per_example.mean(), abs=1e-15)


class TestTokenKlLoss:
    def test_identical_policies_zero(self):
        v = Vocab.build(4)
        rng = np.random.default_rng(1)
        tm = TokenModelPolicy(v, 3, rng.uniform(-1, 1, 2 * 4 * 3 + 4), max_len=4)
        batch = [SftPair(prompt=X, target=Response(tokens=(2, 1, 0)))]
        assert token_kl_loss(tm, tm, batch).total == 0.0

    def test_two_point_hand_value(self):
        # single position: student (0.5, 0.5) vs teacher (0.9, 0.1)
        student, space = scores_policy({"p0": [0.5, 0.5]})
        teacher, _ = scores_policy({"p0": [0.9, 0.1]})
        batch = [SftPair(prompt=X, target=space.responses[0])]
        # the single-token target [EOS] visits exactly one position
        got = token_kl_loss(student, teacher, batch).total
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert got == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.5108256237659907, abs=1e-12)

    def test_near_deterministic_limit(self):
        eps = 1e-6
        student, space = scores_policy({"p0": [1.0 - eps, eps]})
        teacher, _ = scores_policy({"p0": [0.5, 0.5]})
        batch = [SftPair(prompt=X, target=space.responses[0])]
        got = token_kl_loss(student, teacher, batch).total
        assert got == pytest.approx(LN2, abs=1e-4)

    def test_nonnegative_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            student, _, teacher, batch = random_tabular_instance(rng)
            sft_batch = [SftPair(prompt=t.prompt, target=t.winner) for t in batch]
            assert token_kl_loss(student, teacher, sft_batch).total >= 0.0

    def test_length_normalization(self):
        # same per-position KL at both positions: loss equals one-position KL
        v = Vocab.build(2)
        tm_s = TokenModelPolicy(v, 2, np.zeros(2 * 2 * 2 + 2), max_len=4)
        params = np.zeros(2 * 2 * 2 + 2)
        params[-1] = 1.0
        tm_t = TokenModelPolicy(v, 2, params, max_len=4)
        one = token_kl_loss(tm_s, tm_t, [SftPair(prompt=X, target=Response(tokens=(1, 0)))]).total
        # context state is identical at every position for the all-zero
        # student (embeddings are zero), so per-position KLs coincide
        two = token_kl_loss(tm_s, tm_t, [SftPair(prompt=X, target=Response(tokens=(1, 1, 0)))]).total
        assert one == pytest.approx(two, rel=1e-9)


class TestPreferenceLosses:
    def test_policy_equals_ref_gives_ln2(self):
        rng = np.random.default_rng(3)
        policy, _, teacher, batch = random_tabular_instance(rng)
        assert ddpo_loss(policy, policy, batch, 0.3).total == pytest.approx(LN2, abs=1e-12)
        assert rdpo_loss(policy, policy, batch, 0.3).total == pytest.approx(LN2, abs=1e-12)
        assert dadpo_loss(policy, policy, policy, batch, BetaPair(1.0, 1.0)).total == pytest.approx(LN2, abs=1e-12)

    def test_margin_three_hand_value(self):
        assert float(neg_log_sigmoid(3.0)) == pytest.approx(NLS3, abs=1e-12)
        assert float(neg_log_sigmoid(-3.0)) == pytest.approx(3.0 + NLS3, abs=1e-12)

    def test_rdpo_equals_ddpo_with_teacher_as_ref(self):
        rng = np.random.default_rng(4)
        policy, _, teacher, batch = random_tabular_instance(rng)
        a = rdpo_loss(policy, teacher, batch, 0.7).total
        b = ddpo_loss(policy, teacher, batch, 0.7).total
        assert a == b

    def test_dadpo_hand_example(self):
        # log-prob table from the worked two-regularizer example: margin 3
        scores = {
            "theta": {"w": -1.0, "l": -3.0},
            "ref": {"w": -2.0, "l": -2.0},
            "te": {"w": -1.5, "l": -2.5},
        }
        betas = BetaPair(1.0, 1.0)
        margin = (
            betas.total * (scores["theta"]["w"] - scores["theta"]["l"])
            - betas.beta1 * (scores["ref"]["w"] - scores["ref"]["l"])
            - betas.beta2 * (scores["te"]["w"] - scores["te"]["l"])
        )
        assert margin == pytest.approx(3.0, abs=1e-12)
        assert float(neg_log_sigmoid(margin)) == pytest.approx(NLS3, abs=1e-9)

    def test_dadpo_hand_example_through_policies(self):
        v = Vocab.build(2)
        space = ResponseSpace([Response(tokens=(0,)), Response(tokens=(1, 0))])
        # rows give exp(-1),exp(-3) etc. unnormalized; add the complement mass
        # on a third response so sentence log-probs hit the example values
        space3 = ResponseSpace(
            [Response(tokens=(0,)), Response(tokens=(1, 0)), Response(tokens=(1, 1, 0))]
        )

        def policy_with(w, l):
            rest = 1.0 - math.exp(w) - math.exp(l)
            logits = np.log([math.exp(w), math.exp(l), rest])
            return TabularPolicy(v, space3, ["p0"], [logits])

        policy = policy_with(-1.0, -3.0)
        ref = policy_with(-2.0, -2.0)
        te = policy_with(-1.5, -2.5)
        batch = [PreferenceTriplet(prompt=X, winner=space3.responses[0], loser=space3.responses[1])]
        got = dadpo_loss(policy, ref, te, batch, BetaPair(1.0, 1.0)).total
        assert got == pytest.approx(NLS3, abs=1e-9)

    def test_beta_validation(self):
        rng = np.random.default_rng(5)
        policy, ref, teacher, batch = random_tabular_instance(rng)
        with pytest.raises(ValueError):
            ddpo_loss(policy, ref, batch, 0.0)
        with pytest.raises(ValueError):
            rdpo_loss(policy, teacher, batch, -1.0)
        with pytest.raises(ValueError):
            dadpo_loss(policy, ref, teacher, batch, BetaPair(0.0, 0.0))

    def test_losses_strictly_positive(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            policy, ref, teacher, batch = random_tabular_instance(rng)
            assert ddpo_loss(policy, ref, batch, 0.5).total > 0
            assert dadpo_loss(policy, ref, teacher, batch, BetaPair(0.2, 0.3)).total > 0


class TestReductionIdentities:
    def test_beta2_zero_is_ddpo(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            policy, ref, teacher, batch = random_tabular_instance(rng)
            b1 = float(rng.choice((0.01, 0.1, 1.0)))
            a = dadpo_loss(policy, ref, teacher, batch, BetaPair(b1, 0.0)).total
            b = ddpo_loss(policy, ref, batch, b1).total
            assert abs(a - b) < 1e-12

    def test_beta1_zero_is_rdpo(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            policy, ref, teacher, batch = random_tabular_instance(rng)
            b2 = float(rng.choice((0.001, 0.01, 0.1, 1.0)))
            a = dadpo_loss(policy, ref, teacher, batch, BetaPair(0.0, b2)).total
            b = rdpo_loss(policy, teacher, batch, b2).total
            assert abs(a - b) < 1e-12

    def test_rdpo_equals_dadpo_on_random_batches(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            policy, ref, teacher, batch = random_tabular_instance(rng, batch_size=2)
            beta = float(rng.uniform(0.05, 2.0))
            a = rdpo_loss(policy, teacher, batch, beta).total
            b = dadpo_loss(policy, ref, teacher, batch, BetaPair(0.0, beta)).total
            assert abs(a - b) < 1e-12


class TestSymmetryAndMonotonicity:
    def test_winner_loser_swap_maps_margin_sign(self):
        rng = np.random.default_rng(10)
        policy, ref, teacher, batch = random_tabular_instance(rng, batch_size=4)
        betas = BetaPair(0.4, 0.2)
        fwd = dadpo_loss(policy, ref, teacher, batch, betas)
        swapped = [
            PreferenceTriplet(prompt=t.prompt, winner=t.loser, loser=t.winner) for t in batch
        ]
        bwd = dadpo_loss(policy, ref, teacher, swapped, betas)
        z = np.abs(fwd.aux["margins"])
        expected_sum = z + 2.0 * neg_log_sigmoid(z)
        assert np.allclose(fwd.per_example + bwd.per_example, expected_sum, atol=1e-10)

    def test_increasing_winner_logprob_decreases_loss(self):
        v = Vocab.build(2)
        space = ResponseSpace([Response(tokens=(0,)), Response(tokens=(1, 0))])
        ref = TabularPolicy(v, space, ["p0"], [[0.3, -0.3]])
        te = TabularPolicy(v, space, ["p0"], [[0.1, 0.4]])
        batch = [PreferenceTriplet(prompt=X, winner=space.responses[0], loser=space.responses[1])]
        betas = BetaPair(0.5, 0.5)
        losses = []
        for bump in (0.0, 0.5, 1.0, 2.0):
            pol = TabularPolicy(v, space, ["p0"], [[bump, 0.0]])
            losses.append(dadpo_loss(pol, ref, te, batch, betas).total)
        assert all(a > b for a, b in zip(losses, losses[1:]))


class TestCompositeLoss:
    def make_instance(self, seed=11):
        rng = np.random.default_rng(seed)
        return random_tabular_instance(rng, batch_size=3)

    def test_zero_weight_equals_base(self):
        policy, ref, teacher, batch = self.make_instance()
        sft_batch = [SftPair(prompt=t.prompt, target=t.winner) for t in batch]
        assert composite_loss("sft", 0.0, policy, teacher, sft_batch).total == sft_loss(policy, sft_batch).total
        assert (
            composite_loss("ddpo", 0.0, policy, teacher, batch, ref=ref, beta=0.2).total
            == ddpo_loss(policy, ref, batch, 0.2).total
        )

    def test_student_equals_teacher_drops_kl(self):
        policy, ref, _, batch = self.make_instance()
        sft_batch = [SftPair(prompt=t.prompt, target=t.winner) for t in batch]
        got = composite_loss("sft", 0.3, policy, policy, sft_batch)
        assert got.aux["kl_total"] == 0.0
        assert got.total == pytest.approx(sft_loss(policy, sft_batch).total, abs=1e-15)

    def test_additive_decomposition(self):
        policy, ref, teacher, batch = self.make_instance()
        got = composite_loss("ddpo", 0.2, policy, teacher, batch, ref=ref, beta=0.5)
        base = ddpo_loss(policy, ref, batch, 0.5).total
        kl = token_kl_loss(
            policy, teacher, [SftPair(prompt=t.prompt, target=t.winner) for t in batch]
        ).total
        assert got.total == pytest.approx(base + 0.2 * kl, abs=1e-12)
        assert got.aux["base_total"] == pytest.approx(base, abs=1e-15)
        assert got.aux["kl_total"] == pytest.approx(kl, abs=1e-15)

    def test_unknown_base_rejected(self):
        policy, ref, teacher, batch = self.make_instance()
        with pytest.raises(ValueError, match="unknown composite base"):
            composite_loss("dpo", 0.1, policy, teacher, batch)
