"""Prompt/response data model, JSONL persistence, and dataset construction.

Datasets are built by sampling a winning response from the teacher and a
losing response from the student for each prompt: the teacher response is
both the SFT target and the preference winner. Triplets whose winner and
loser coincide are dropped (the pairwise preference target is undefined at
equality); the drop count is logged and recoverable as
``len(prompts) - len(triplets)``.

File formats (one JSON object per line, UTF-8):
  prompts:  {"id": str, "tokens": [int]}
  sft:      {"prompt_id": str, "target": [int]}
  triplets: {"prompt_id": str, "winner": [int], "loser": [int]}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import check_token_ids

logger = logging.getLogger(__name__)

__all__ = [
    "CorpusError",
    "Vocab",
    "Prompt",
    "Response",
    "SftPair",
    "PreferenceTriplet",
    "load_prompts",
    "save_prompts",
    "generate_synthetic_corpus",
    "build_datasets",
    "write_datasets",
    "load_datasets",
]


class CorpusError(ValueError):
    """Malformed corpus input (parse failures, bad ids, bad tokens)."""


@dataclass(frozen=True)
class Vocab:
    """Ordered token strings with a reserved end-of-sequence id."""

    tokens: tuple[str, ...]
    eos_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least 2 tokens (content + EOS)")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        if not (0 <= self.eos_id < len(self.tokens)):
            raise ValueError(f"eos_id {self.eos_id} out of range for size {len(self.tokens)}")

    @classmethod
    def build(cls, size):
        """Default vocabulary: EOS at id 0, content tokens t1..t{size-1}."""
        if size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {size}")
        return cls(tokens=("<eos>",) + tuple(f"t{i}" for i in range(1, size)), eos_id=0)

    @property
    def size(self):
        return len(self.tokens)

    @property
    def content_ids(self):
        return tuple(i for i in range(self.size) if i != self.eos_id)

    def hash_hex(self):
        payload = json.dumps({"tokens": list(self.tokens), "eos_id": self.eos_id})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Prompt:
    id: str
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.id:
            raise ValueError("prompt id must be non-empty")
        if len(self.tokens) == 0:
            raise ValueError(f"prompt {self.id!r} has no tokens")

    def check_vocab(self, vocab):
        check_token_ids(self.tokens, vocab.size, f"prompt {self.id!r}")
        return self


@dataclass(frozen=True)
class Response:
    """EOS-terminated token sequence; ``truncated`` marks a forced EOS."""

    tokens: tuple[int, ...]
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) == 0:
            raise ValueError("response must contain at least the EOS token")

    @property
    def length(self):
        return len(self.tokens)

    def check(self, vocab, max_len=None):
        check_token_ids(self.tokens, vocab.size, "response")
        if self.tokens[-1] != vocab.eos_id:
            raise ValueError("response must end with EOS")
        if self.tokens.count(vocab.eos_id) != 1:
            raise ValueError("response must contain exactly one EOS")
        if max_len is not None and self.length > max_len:
            raise ValueError(f"response length {self.length} exceeds max_len {max_len}")
        return self


@dataclass(frozen=True)
class SftPair:
    prompt: Prompt
    target: Response


@dataclass(frozen=True)
class PreferenceTriplet:
    prompt: Prompt
    winner: Response
    loser: Response

    def __post_init__(self):
        if self.winner.tokens == self.loser.tokens:
            raise ValueError(f"triplet for prompt {self.prompt.id!r} has winner == loser")


def load_prompts(path, vocab=None):
    """Read prompts from a JSONL file, preserving file order.

    Duplicate ids and malformed lines raise CorpusError naming the line
    number; with ``vocab`` given, token ids are range-checked too.
    """
    prompts = []
    seen = set()
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict) or "id" not in obj or "tokens" not in obj:
                raise CorpusError(f"{path}: line {lineno}: expected object with 'id' and 'tokens'")
            pid = obj["id"]
            if pid in seen:
                raise CorpusError(f"{path}: line {lineno}: duplicate prompt id {pid!r}")
            seen.add(pid)
            try:
                prompt = Prompt(id=pid, tokens=tuple(obj["tokens"]))
            except (TypeError, ValueError) as exc:
                raise CorpusError(f"{path}: line {lineno}: {exc}") from exc
            if vocab is not None:
                try:
                    prompt.check_vocab(vocab)
                except ValueError as exc:
                    raise CorpusError(f"{path}: line {lineno}: {exc}") from exc
            prompts.append(prompt)
    return prompts


def save_prompts(prompts, path):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(json.dumps({"id": p.id, "tokens": list(p.tokens)}) + "\n")
    return path


def generate_synthetic_corpus(seed, vocab_size, n_prompts, max_len):
    """Deterministic synthetic vocabulary and distinct prompts.

    Prompt tokens are drawn from the content ids (EOS never appears inside
    a prompt); lengths are uniform on 1..max_len.
    """
    if vocab_size < 2:
        raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
    if n_prompts < 1:
        raise ValueError(f"n_prompts must be >= 1, got {n_prompts}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    vocab = Vocab.build(vocab_size)
    content = np.array(vocab.content_ids)
    capacity = sum(len(content) ** k for k in range(1, max_len + 1))
    if n_prompts > capacity:
        raise ValueError(
            f"cannot generate {n_prompts} distinct prompts: only {capacity} exist "
            f"for vocab_size={vocab_size}, max_len={max_len}"
        )
    rng = np.random.default_rng(seed)
    seen = set()
    prompts = []
    while len(prompts) < n_prompts:
        length = int(rng.integers(1, max_len + 1))
        toks = tuple(int(content[i]) for i in rng.integers(0, len(content), size=length))
        if toks in seen:
            continue
        seen.add(toks)
        prompts.append(Prompt(id=f"p{len(prompts):05d}", tokens=toks))
    return vocab, prompts


def _child_cfg(cfg, base_seed, index):
    # Stable per-prompt decode seed so parallel construction stays
    # order-deterministic regardless of completion order.
    return dataclasses.replace(cfg, seed=(base_seed, index))


def build_datasets(prompts, teacher, student, decode_cfg, student_decode_cfg=None):
    """Sample one (winner, loser) pair per prompt and assemble both datasets.

    The teacher response is the SFT target and the preference winner; the
    student response is the loser. Equal pairs are dropped from the triplet
    list (the SFT pair is kept). Deterministic for fixed policies and
    configs.
    """
    check = teacher.vocab == student.vocab
    if not check:
        raise ValueError("teacher and student must share the corpus vocabulary")
    student_cfg = student_decode_cfg if student_decode_cfg is not None else decode_cfg
    sft_pairs = []
    triplets = []
    dropped = 0
    t_seed = decode_cfg.seed if decode_cfg.seed is not None else 0
    s_seed = student_cfg.seed if student_cfg.seed is not None else 0
    for i, prompt in enumerate(prompts):
        prompt.check_vocab(teacher.vocab)
        y_t = teacher.sample(prompt, _child_cfg(decode_cfg, t_seed, i))
        y_s = student.sample(prompt, _child_cfg(student_cfg, s_seed, i))
        sft_pairs.append(SftPair(prompt=prompt, target=y_t))
        if y_t.tokens == y_s.tokens:
            dropped += 1
        else:
            triplets.append(PreferenceTriplet(prompt=prompt, winner=y_t, loser=y_s))
    if dropped:
        logger.info("build_datasets: dropped %d/%d triplets with winner == loser", dropped, len(prompts))
    return sft_pairs, triplets


def _dump_jsonl(rows):
    return "".join(json.dumps(row) + "\n" for row in rows)


def sft_pairs_jsonl(sft_pairs):
    return _dump_jsonl({"prompt_id": p.prompt.id, "target": list(p.target.tokens)} for p in sft_pairs)


def triplets_jsonl(triplets):
    return _dump_jsonl(
        {"prompt_id": t.prompt.id, "winner": list(t.winner.tokens), "loser": list(t.loser.tokens)}
        for t in triplets
    )


def write_datasets(sft_pairs, triplets, out_dir, meta=None):
    """Write sft.jsonl / triplets.jsonl (and optional meta.json) to a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sft.jsonl").write_text(sft_pairs_jsonl(sft_pairs), encoding="utf-8")
    (out_dir / "triplets.jsonl").write_text(triplets_jsonl(triplets), encoding="utf-8")
    if meta is not None:
        (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir


def load_datasets(in_dir, prompts, vocab=None):
    """Inverse of write_datasets; prompts are matched back by id."""
    in_dir = Path(in_dir)
    by_id = {p.id: p for p in prompts}

    def resolve(pid, path, lineno):
        if pid not in by_id:
            raise CorpusError(f"{path}: line {lineno}: unknown prompt id {pid!r}")
        return by_id[pid]

    def parse_response(tokens, path, lineno):
        resp = Response(tokens=tuple(tokens))
        if vocab is not None:
            try:
                resp.check(vocab)
            except ValueError as exc:
                raise CorpusError(f"{path}: line {lineno}: {exc}") from exc
        return resp

    sft_pairs = []
    sft_path = in_dir / "sft.jsonl"
    with sft_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            sft_pairs.append(
                SftPair(
                    prompt=resolve(obj["prompt_id"], sft_path, lineno),
                    target=parse_response(obj["target"], sft_path, lineno),
                )
            )
    triplets = []
    tri_path = in_dir / "triplets.jsonl"
    with tri_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            triplets.append(
                PreferenceTriplet(
                    prompt=resolve(obj["prompt_id"], tri_path, lineno),
                    winner=parse_response(obj["winner"], tri_path, lineno),
                    loser=parse_response(obj["loser"], tri_path, lineno),
                )
            )
    return sft_pairs, triplets
