"""Input validation helpers shared across the package.

All checks raise ValueError (or a subclass) with a message naming the
offending argument, so estimator and loss surfaces fail loudly and early.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_positive",
    "check_nonnegative",
    "check_finite_array",
    "check_nonempty",
    "check_same_vocab",
    "check_token_ids",
]


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a finite positive number, got {value!r}")
    return value


def check_nonnegative(value, name):
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
    return value


def check_finite_array(arr, name):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_nonempty(seq, name):
    if len(seq) == 0:
        raise ValueError(f"{name} must be non-empty")
    return seq


def check_same_vocab(a, b, what="policies"):
    if a.vocab != b.vocab:
        raise ValueError(f"{what} must share the same vocabulary")


def check_token_ids(tokens, vocab_size, name):
    for t in tokens:
        if not (0 <= int(t) < vocab_size):
            raise ValueError(f"{name} contains token id {t} outside vocabulary of size {vocab_size}")
    return tokens
