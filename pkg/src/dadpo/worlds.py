"""Synthetic desk-scale worlds for end-to-end pipeline checks.

A world is an echo task: the best response to a prompt repeats the
prompt's last token and stops. The scoring function rewards matching that
target prefix and penalizes extra length, the tabular teacher is a
low-temperature softmax of the scores (so its greedy response is the
target and its distribution ranks alternatives by score), and the student
is a randomly initialized token model that must learn the mapping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Prompt, Response, Vocab, generate_synthetic_corpus
from .policy import TabularPolicy, TokenModelPolicy, enumerate_responses

__all__ = ["SyntheticWorld", "make_world", "echo_reward"]


def _target_tokens(prompt, vocab):
    return (prompt.tokens[-1], vocab.eos_id)


def echo_reward(vocab, match_bonus=2.0, length_penalty=0.5):
    """Score responses by leading-token agreement with the echo target."""

    def reward(x, y):
        target = _target_tokens(x, vocab)
        overlap = 0
        for a, b in zip(y.tokens, target):
            if a != b:
                break
            overlap += 1
        excess = max(0, y.length - len(target))
        return match_bonus * overlap - length_penalty * excess

    return reward


@dataclass
class SyntheticWorld:
    vocab: Vocab
    space: object
    train_prompts: list
    eval_prompts: list
    teacher: TabularPolicy
    student: TokenModelPolicy
    reward: object
    meta: dict


def make_world(seed=0, vocab_size=8, max_len=4, n_train=200, n_eval=60,
               teacher_temperature=0.25, student_dim=8, student_scale=0.4,
               student_decay=0.7):
    """Deterministic world: prompts, low-entropy tabular teacher, noisy student."""
    vocab, prompts = generate_synthetic_corpus(seed, vocab_size, n_train + n_eval, max_len)
    train_prompts = prompts[:n_train]
    eval_prompts = [
        Prompt(id=f"e{p.id}", tokens=p.tokens) for p in prompts[n_train:]
    ]
    space = enumerate_responses(vocab, max_len)
    reward = echo_reward(vocab)
    all_prompts = train_prompts + eval_prompts
    logits = np.zeros((len(all_prompts), space.size))
    for i, prompt in enumerate(all_prompts):
        scores = np.array([reward(prompt, y) for y in space])
        logits[i] = scores / teacher_temperature
    teacher = TabularPolicy(vocab, space, [p.id for p in all_prompts], logits)
    student = TokenModelPolicy.create(
        vocab, student_dim, seed=seed + 1, max_len=max_len,
        decay=student_decay, scale=student_scale,
    )
    meta = {
        "seed": seed,
        "vocab_size": vocab_size,
        "max_len": max_len,
        "n_train": n_train,
        "n_eval": n_eval,
        "teacher_temperature": teacher_temperature,
        "student_dim": student_dim,
        "student_scale": student_scale,
        "student_decay": student_decay,
    }
    return SyntheticWorld(
        vocab=vocab, space=space, train_prompts=train_prompts, eval_prompts=eval_prompts,
        teacher=teacher, student=student, reward=reward, meta=meta,
    )


def world_from_meta(meta):
    return make_world(**meta)
