"""Conditional sequence distributions over token responses.

Two backends share one interface (score, token distribution, sample,
parameter vector, exact gradients of sentence log-probabilities):

* ``TabularPolicy`` stores one logit row per prompt over an enumerated
  response space, so normalizers and sentence probabilities are exact.
* ``TokenModelPolicy`` is a tiny autoregressive model (token embeddings,
  decayed context summary, tanh, linear readout) with hand-derived
  gradients.

Both represent distributions over the same bounded space of EOS-terminated
sequences of length <= max_len: the token model emits EOS with probability
one once a response has max_len - 1 content tokens, mirroring the tabular
marginal at that depth. Token probabilities are clamped below at
``PROB_FLOOR`` before logs so log-ratios stay finite on arbitrary
responses.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .corpus import Prompt, Response, Vocab
from .validation import check_token_ids

PROB_FLOOR = 1e-12
DEFAULT_SPACE_CAP = 100_000

__all__ = [
    "PROB_FLOOR",
    "DecodeConfig",
    "ResponseSpace",
    "SpaceSizeError",
    "enumerate_responses",
    "TabularPolicy",
    "TokenModelPolicy",
    "sentence_logprob",
    "token_distribution",
    "sample",
    "save_policy",
    "load_policy",
    "CheckpointError",
]


class SpaceSizeError(ValueError):
    """Requested response enumeration exceeds the configured cap."""


class CheckpointError(ValueError):
    """Unloadable or inconsistent policy checkpoint."""


@dataclass(frozen=True)
class DecodeConfig:
    """How to draw a response: greedy argmax or temperature sampling."""

    mode: str = "greedy"
    temperature: float = 1.0
    seed: object = None
    max_len: int = 8

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature"):
            raise ValueError(f"decode mode must be 'greedy' or 'temperature', got {self.mode!r}")
        if self.mode == "temperature":
            if not (math.isfinite(self.temperature) and self.temperature > 0):
                raise ValueError(f"temperature must be finite and > 0, got {self.temperature!r}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")


class ResponseSpace:
    """Distinct candidate responses for a prompt, in a fixed order."""

    def __init__(self, responses, prompt_id=None):
        responses = tuple(responses)
        if len(responses) < 2:
            raise ValueError(f"a response space needs at least 2 responses, got {len(responses)}")
        keys = [r.tokens for r in responses]
        if len(set(keys)) != len(keys):
            raise ValueError("response space contains duplicate responses")
        self.responses = responses
        self.prompt_id = prompt_id
        self._index = {r.tokens: i for i, r in enumerate(responses)}
        self._tokmat = None
        self._lengths = None

    @property
    def size(self):
        return len(self.responses)

    def __len__(self):
        return len(self.responses)

    def __iter__(self):
        return iter(self.responses)

    def index_of(self, tokens):
        try:
            return self._index[tuple(tokens)]
        except KeyError:
            raise ValueError(f"response {tuple(tokens)} is not in the response space") from None

    def contains(self, tokens):
        return tuple(tokens) in self._index

    def token_matrix(self):
        """Padded (size, max_len) int matrix with -1 padding, plus lengths."""
        if self._tokmat is None:
            max_len = max(r.length for r in self.responses)
            mat = np.full((self.size, max_len), -1, dtype=np.int64)
            lengths = np.zeros(self.size, dtype=np.int64)
            for i, r in enumerate(self.responses):
                mat[i, : r.length] = r.tokens
                lengths[i] = r.length
            self._tokmat = mat
            self._lengths = lengths
        return self._tokmat, self._lengths


def enumerate_responses(vocab, max_len, cap=DEFAULT_SPACE_CAP):
    """All EOS-terminated sequences with at most max_len - 1 content tokens.

    Responses are returned in lexicographic token order. Sizes follow the
    geometric series sum_{k<max_len} (V-1)^k.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if vocab.size**max_len > cap:
        raise SpaceSizeError(
            f"V^max_len = {vocab.size}^{max_len} exceeds the cap of {cap}; "
            "reduce max_len or raise cap"
        )
    content = sorted(vocab.content_ids)
    seqs = []
    for length in range(max_len):
        for body in itertools.product(content, repeat=length):
            seqs.append(body + (vocab.eos_id,))
    seqs.sort()
    return ResponseSpace(Response(tokens=s) for s in seqs)


def _floored(p):
    p = np.maximum(p, PROB_FLOOR)
    return p / p.sum()


def _validate_prefix(prefix, vocab):
    prefix = tuple(int(t) for t in prefix)
    check_token_ids(prefix, vocab.size, "prefix")
    if vocab.eos_id in prefix:
        raise ValueError("prefix must not contain EOS")
    return prefix


class TabularPolicy:
    """Per-prompt logits over a shared enumerated response space.

    Sentence probabilities are the softmax of the stored row, exactly;
    token-level distributions are obtained by marginalizing over the
    space.
    """

    backend = "tabular"

    def __init__(self, vocab, space, prompt_ids, logits):
        self.vocab = vocab
        self.space = space
        self.prompt_ids = tuple(prompt_ids)
        logits = np.asarray(logits, dtype=float)
        if logits.shape != (len(self.prompt_ids), space.size):
            raise ValueError(
                f"logits shape {logits.shape} does not match "
                f"({len(self.prompt_ids)}, {space.size})"
            )
        if not np.all(np.isfinite(logits)):
            raise ValueError("tabular logits must be finite")
        self._logits = logits
        self._row_index = {pid: i for i, pid in enumerate(self.prompt_ids)}

    @classmethod
    def uniform(cls, vocab, space, prompt_ids):
        return cls(vocab, space, prompt_ids, np.zeros((len(tuple(prompt_ids)), space.size)))

    @property
    def n_params(self):
        return self._logits.size

    @property
    def parameters(self):
        return self._logits.ravel().copy()

    def with_parameters(self, params):
        params = np.asarray(params, dtype=float)
        if params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
        return TabularPolicy(
            self.vocab, self.space, self.prompt_ids, params.reshape(self._logits.shape).copy()
        )

    def _row(self, x):
        try:
            return self._row_index[x.id]
        except KeyError:
            raise ValueError(f"prompt {x.id!r} unknown to this tabular policy") from None

    def logits_row(self, x):
        return self._logits[self._row(x)]

    def probs(self, x):
        return softmax(self.logits_row(x))

    def sentence_logprob(self, x, y):
        y.check(self.vocab)
        row = self.logits_row(x)
        idx = self.space.index_of(y.tokens)
        return float(row[idx] - logsumexp(row))

    def sentence_logprob_grad(self, x, y):
        i = self._row(x)
        idx = self.space.index_of(y.tokens)
        block = -softmax(self._logits[i])
        block[idx] += 1.0
        grad = np.zeros(self.n_params)
        size = self.space.size
        grad[i * size : (i + 1) * size] = block
        return grad

    def _prefix_masks(self, prefix):
        mat, lengths = self.space.token_matrix()
        k = len(prefix)
        mask = lengths > k
        if k:
            mask &= np.all(mat[:, :k] == np.asarray(prefix), axis=1)
        if not mask.any():
            raise ValueError(f"prefix {prefix} has no continuation in the response space")
        return mat, mask, k

    def _token_dist_raw(self, x, prefix):
        mat, mask, k = self._prefix_masks(prefix)
        probs = self.probs(x)
        denom = probs[mask].sum()
        p = np.zeros(self.vocab.size)
        next_tok = mat[:, k]
        for t in range(self.vocab.size):
            sel = mask & (next_tok == t)
            if sel.any():
                p[t] = probs[sel].sum() / denom
        return p

    def token_distribution(self, x, prefix):
        prefix = _validate_prefix(prefix, self.vocab)
        return _floored(self._token_dist_raw(x, prefix))

    def token_distribution_grad(self, x, prefix):
        """Raw next-token probabilities and their Jacobian wrt the logits."""
        prefix = _validate_prefix(prefix, self.vocab)
        mat, mask, k = self._prefix_masks(prefix)
        i = self._row(x)
        probs = softmax(self._logits[i])
        a_d = probs[mask].sum()
        next_tok = mat[:, k]
        size = self.space.size
        p = np.zeros(self.vocab.size)
        jac = np.zeros((self.vocab.size, self.n_params))
        ind_d = mask.astype(float)
        for t in range(self.vocab.size):
            sel = mask & (next_tok == t)
            a_n = probs[sel].sum()
            p[t] = a_n / a_d
            block = probs * (sel.astype(float) * a_d - a_n * ind_d) / (a_d * a_d)
            jac[t, i * size : (i + 1) * size] = block
        return p, jac

    def sample(self, x, cfg):
        row = self.logits_row(x)
        if cfg.mode == "greedy":
            idx = int(np.argmax(row))
        else:
            q = softmax(row / cfg.temperature)
            rng = np.random.default_rng(cfg.seed)
            idx = int(rng.choice(self.space.size, p=q))
        return self.space.responses[idx]


class TokenModelPolicy:
    """Tiny autoregressive policy with exact hand-derived gradients.

    Context tokens are summarized by a decayed embedding sum
    h = sum_k decay^{age_k} E[t_k]; next-token logits are
    W tanh(h) + b. Once a response holds max_len - 1 content tokens the
    model emits EOS with probability one, so its sentence
    probabilities normalize over the bounded response space.
    """

    backend = "token-model"

    def __init__(self, vocab, dim, params, max_len, decay=0.7):
        self.vocab = vocab
        self.dim = int(dim)
        self.max_len = int(max_len)
        self.decay = float(decay)
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay must lie in (0, 1]")
        params = np.asarray(params, dtype=float)
        if params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise ValueError("token model parameters must be finite")
        self._params = params.ravel().copy()

    @classmethod
    def create(cls, vocab, dim, seed, max_len, decay=0.7, scale=0.5):
        n = 2 * vocab.size * dim + vocab.size
        rng = np.random.default_rng(seed)
        return cls(vocab, dim, rng.normal(0.0, scale, size=n), max_len, decay)

    @property
    def n_params(self):
        v, d = self.vocab.size, self.dim
        return 2 * v * d + v

    @property
    def parameters(self):
        return self._params.copy()

    def with_parameters(self, params):
        return TokenModelPolicy(self.vocab, self.dim, params, self.max_len, self.decay)

    def _views(self):
        v, d = self.vocab.size, self.dim
        emb = self._params[: v * d].reshape(v, d)
        out = self._params[v * d : 2 * v * d].reshape(v, d)
        bias = self._params[2 * v * d :]
        return emb, out, bias

    def _context_state(self, tokens):
        emb, _, _ = self._views()
        h = np.zeros(self.dim)
        for t in tokens:
            h = self.decay * h + emb[t]
        return h

    def _logits_from_state(self, h):
        _, out, bias = self._views()
        return out @ np.tanh(h) + bias

    def _forced_eos(self, prefix_len):
        return prefix_len >= self.max_len - 1

    def _token_dist_raw(self, x, prefix):
        if len(prefix) >= self.max_len:
            raise ValueError(f"prefix of length {len(prefix)} leaves no room under max_len {self.max_len}")
        if self._forced_eos(len(prefix)):
            p = np.zeros(self.vocab.size)
            p[self.vocab.eos_id] = 1.0
            return p
        h = self._context_state(tuple(x.tokens) + tuple(prefix))
        return softmax(self._logits_from_state(h))

    def token_distribution(self, x, prefix):
        prefix = _validate_prefix(prefix, self.vocab)
        return _floored(self._token_dist_raw(x, prefix))

    def sentence_logprob(self, x, y):
        y.check(self.vocab, max_len=self.max_len)
        emb, out, bias = self._views()
        h = np.zeros(self.dim)
        for t in x.tokens:
            h = self.decay * h + emb[t]
        total = 0.0
        for n, tok in enumerate(y.tokens):
            if self._forced_eos(n):
                p = np.zeros(self.vocab.size)
                p[self.vocab.eos_id] = 1.0
            else:
                p = softmax(out @ np.tanh(h) + bias)
            total += math.log(_floored(p)[tok])
            h = self.decay * h + emb[tok]
        return total

    def _backprop_position(self, ctx_tokens, a, upstream, grad):
        """Accumulate d(upstream . logits)/d(params) into grad."""
        v, d = self.vocab.size, self.dim
        _, out, _ = self._views()
        g_out = np.outer(upstream, a)
        grad[v * d : 2 * v * d] += g_out.ravel()
        grad[2 * v * d :] += upstream
        gh = (out.T @ upstream) * (1.0 - a * a)
        m = len(ctx_tokens)
        if m:
            weights = self.decay ** (m - 1 - np.arange(m))
            contrib = weights[:, None] * gh[None, :]
            emb_grad = grad[: v * d].reshape(v, d)
            np.add.at(emb_grad, np.asarray(ctx_tokens), contrib)

    def sentence_logprob_grad(self, x, y):
        y.check(self.vocab, max_len=self.max_len)
        emb, out, bias = self._views()
        grad = np.zeros(self.n_params)
        ctx = list(x.tokens)
        h = np.zeros(self.dim)
        for t in ctx:
            h = self.decay * h + emb[t]
        for n, tok in enumerate(y.tokens):
            if not self._forced_eos(n):
                a = np.tanh(h)
                p = softmax(out @ a + bias)
                upstream = -p
                upstream[tok] += 1.0
                self._backprop_position(ctx, a, upstream, grad)
            ctx.append(tok)
            h = self.decay * h + emb[tok]
        return grad

    def token_distribution_grad(self, x, prefix):
        prefix = _validate_prefix(prefix, self.vocab)
        p = self._token_dist_raw(x, prefix)
        jac = np.zeros((self.vocab.size, self.n_params))
        if self._forced_eos(len(prefix)):
            return p, jac
        ctx = tuple(x.tokens) + prefix
        h = self._context_state(ctx)
        a = np.tanh(h)
        for v in range(self.vocab.size):
            upstream = -p[v] * p
            upstream[v] += p[v]
            self._backprop_position(ctx, a, upstream, jac[v])
        return p, jac

    def sample(self, x, cfg):
        rng = np.random.default_rng(cfg.seed) if cfg.mode == "temperature" else None
        max_len = min(cfg.max_len, self.max_len)
        toks = []
        truncated = False
        while True:
            chosen = self._choose(x, tuple(toks), cfg, rng)
            if len(toks) == max_len - 1:
                # final slot: force EOS if the policy picked anything else
                if chosen != self.vocab.eos_id:
                    truncated = True
                toks.append(self.vocab.eos_id)
                break
            toks.append(chosen)
            if chosen == self.vocab.eos_id:
                break
        return Response(tokens=tuple(toks), truncated=truncated)

    def _choose(self, x, prefix, cfg, rng):
        if self._forced_eos(len(prefix)):
            return self.vocab.eos_id
        h = self._context_state(tuple(x.tokens) + prefix)
        logits = self._logits_from_state(h)
        if cfg.mode == "greedy":
            return int(np.argmax(logits))
        q = softmax(logits / cfg.temperature)
        return int(rng.choice(self.vocab.size, p=q))


def sentence_logprob(policy, x, y):
    """log pi(y | x): sum of token log-probabilities along the response."""
    return policy.sentence_logprob(x, y)


def token_distribution(policy, x, prefix):
    """Next-token distribution after the given response prefix."""
    return policy.token_distribution(x, prefix)


def sample(policy, x, cfg):
    """Draw one response per the decode config (deterministic given seed)."""
    return policy.sample(x, cfg)


def save_policy(policy, path):
    """Write a JSON checkpoint with backend tag, vocab hash, and parameters."""
    payload = {
        "backend": policy.backend,
        "vocab": {"tokens": list(policy.vocab.tokens), "eos_id": policy.vocab.eos_id},
        "vocab_hash": policy.vocab.hash_hex(),
        "params": policy.parameters.tolist(),
    }
    if policy.backend == "tabular":
        payload["tabular"] = {
            "prompt_ids": list(policy.prompt_ids),
            "responses": [list(r.tokens) for r in policy.space.responses],
        }
    elif policy.backend == "token-model":
        payload["token_model"] = {
            "dim": policy.dim,
            "decay": policy.decay,
            "max_len": policy.max_len,
        }
    else:
        raise CheckpointError(f"unknown backend {policy.backend!r}")
    path = Path(path)
    path.write_text(json.dumps(payload) + "\n", encoding="utf-8")
    return path


def load_policy(path, expected_vocab=None):
    """Load a checkpoint, validating the stored vocabulary hash."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        vocab = Vocab(tokens=tuple(payload["vocab"]["tokens"]), eos_id=payload["vocab"]["eos_id"])
        stored_hash = payload["vocab_hash"]
        params = np.asarray(payload["params"], dtype=float)
        backend = payload["backend"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} is missing fields: {exc}") from exc
    if vocab.hash_hex() != stored_hash:
        raise CheckpointError(f"checkpoint {path} vocab hash mismatch")
    if expected_vocab is not None and expected_vocab.hash_hex() != stored_hash:
        raise CheckpointError(f"checkpoint {path} was built for a different vocabulary")
    if backend == "tabular":
        spec = payload["tabular"]
        space = ResponseSpace(Response(tokens=tuple(t)) for t in spec["responses"])
        n = len(spec["prompt_ids"])
        return TabularPolicy(vocab, space, spec["prompt_ids"], params.reshape(n, space.size))
    if backend == "token-model":
        spec = payload["token_model"]
        return TokenModelPolicy(vocab, spec["dim"], params, spec["max_len"], spec["decay"])
    raise CheckpointError(f"checkpoint {path} has unknown backend {backend!r}")
