"""Win-rate computation and student-versus-teacher judging.

The win rate is omega = (N_w - N_l) / (N_w + N_l + N_e) * 100, computed
with exact rational arithmetic from integer counts and rounded to one
decimal only for display.

Two judges are provided: a deterministic offline oracle backed by a
scoring function, and an HTTP client for an external chat-completion
judge. The HTTP judge queries each pair twice with the response order
swapped; disagreement between the two orderings counts as a tie, and
unparseable or failed exchanges are excluded from the counts and reported
separately.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .policy import DecodeConfig
from .validation import check_nonempty, check_nonnegative

logger = logging.getLogger(__name__)

__all__ = [
    "JudgeVerdict",
    "JudgeError",
    "OverlapError",
    "WinRateReport",
    "win_rate",
    "oracle_judge",
    "OracleJudge",
    "LlmJudge",
    "llm_judge",
    "HttpTransport",
    "ReplayTransport",
    "load_default_template",
    "EvalConfig",
    "evaluate_model",
    "write_verdict_csv",
    "write_summary_json",
]


class JudgeVerdict(enum.Enum):
    WIN = "win"
    LOSE = "lose"
    TIE = "tie"


class JudgeError(RuntimeError):
    """Transport failure or unparseable judge output."""


class OverlapError(ValueError):
    """Evaluation prompts overlap the training prompt ids."""


@dataclass(frozen=True)
class WinRateReport:
    n_win: int
    n_lose: int
    n_tie: int
    omega: float

    @classmethod
    def from_counts(cls, n_win, n_lose, n_tie):
        for name, v in (("n_win", n_win), ("n_lose", n_lose), ("n_tie", n_tie)):
            if v < 0 or v != int(v):
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")
        total = n_win + n_lose + n_tie
        if total == 0:
            raise ValueError("win-rate denominator is zero")
        omega = float(Fraction(n_win - n_lose, total) * 100)
        return cls(n_win=int(n_win), n_lose=int(n_lose), n_tie=int(n_tie), omega=omega)

    @classmethod
    def from_verdicts(cls, verdicts):
        check_nonempty(verdicts, "verdicts")
        wins = sum(v is JudgeVerdict.WIN for v in verdicts)
        loses = sum(v is JudgeVerdict.LOSE for v in verdicts)
        ties = sum(v is JudgeVerdict.TIE for v in verdicts)
        if wins + loses + ties != len(verdicts):
            raise ValueError("verdicts must all be JudgeVerdict values")
        return cls.from_counts(wins, loses, ties)

    def display(self):
        return f"{self.omega:.1f}%"


def win_rate(verdicts):
    """Aggregate a verdict list into a WinRateReport."""
    return WinRateReport.from_verdicts(verdicts)


def oracle_judge(reward, x, y_student, y_teacher, tie_margin=0.0):
    """Deterministic verdict from a scoring function with a tie margin."""
    check_nonnegative(tie_margin, "tie_margin")
    rs = float(reward(x, y_student))
    rt = float(reward(x, y_teacher))
    if not (math.isfinite(rs) and math.isfinite(rt)):
        raise ValueError("oracle judge requires finite rewards")
    if rs > rt + tie_margin:
        return JudgeVerdict.WIN
    if rt > rs + tie_margin:
        return JudgeVerdict.LOSE
    return JudgeVerdict.TIE


class OracleJudge:
    def __init__(self, reward, tie_margin=0.0):
        self.reward = reward
        self.tie_margin = tie_margin

    def judge(self, x, y_student, y_teacher):
        return oracle_judge(self.reward, x, y_student, y_teacher, self.tie_margin)


def load_default_template():
    return resources.files("dadpo").joinpath("templates/judge_prompt.txt").read_text(encoding="utf-8")


class HttpTransport:
    """POST a single-turn chat-completion request and return the reply text."""

    def __init__(self, endpoint, timeout=30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def __call__(self, prompt_text):
        import requests

        try:
            resp = requests.post(
                self.endpoint,
                json={"messages": [{"role": "user", "content": prompt_text}], "temperature": 0},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
        except Exception as exc:
            raise JudgeError(f"judge endpoint failure: {exc}") from exc
        if isinstance(payload, dict):
            if "choices" in payload:
                try:
                    return payload["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError) as exc:
                    raise JudgeError(f"malformed judge response: {exc}") from exc
            if "content" in payload:
                return payload["content"]
        raise JudgeError("malformed judge response: no content field")


class ReplayTransport:
    """Replay recorded judge replies in order (fixture-driven tests)."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.cursor = 0

    @classmethod
    def from_file(cls, path):
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def __call__(self, prompt_text):
        if self.cursor >= len(self.replies):
            raise JudgeError("replay transport exhausted")
        reply = self.replies[self.cursor]
        self.cursor += 1
        return reply


def _parse_choice(text):
    for line in str(text).strip().splitlines():
        token = line.strip().strip("\"'.:;!` ").lower()
        if not token:
            continue
        if token in ("a", "response a"):
            return "a"
        if token in ("b", "response b"):
            return "b"
        if token in ("tie", "equal"):
            return "tie"
        break
    raise JudgeError(f"unparseable judge verdict: {text!r}")


class LlmJudge:
    """Pairwise judge client with a position-swap consistency protocol.

    Each comparison issues two queries with the response order swapped;
    if the two orderings disagree the result is a tie. Raw exchanges are
    retained on the instance and logged at DEBUG level.
    """

    def __init__(self, transport, vocab, template=None):
        self.transport = transport
        self.vocab = vocab
        self.template = template if template is not None else load_default_template()
        self.exchanges = []

    def _render_tokens(self, tokens):
        return " ".join(self.vocab.tokens[t] for t in tokens)

    def _ask(self, x, first, second):
        prompt_text = self.template.format(
            query=self._render_tokens(x.tokens),
            response_a=self._render_tokens(first.tokens),
            response_b=self._render_tokens(second.tokens),
        )
        reply = self.transport(prompt_text)
        self.exchanges.append({"request": prompt_text, "reply": reply})
        logger.debug("judge exchange: %r -> %r", prompt_text, reply)
        return _parse_choice(reply)

    def judge(self, x, y_student, y_teacher):
        first = self._ask(x, y_student, y_teacher)
        second = self._ask(x, y_teacher, y_student)
        student_first = {"a": JudgeVerdict.WIN, "b": JudgeVerdict.LOSE, "tie": JudgeVerdict.TIE}[first]
        student_second = {"a": JudgeVerdict.LOSE, "b": JudgeVerdict.WIN, "tie": JudgeVerdict.TIE}[second]
        if student_first is student_second:
            return student_first
        return JudgeVerdict.TIE


def llm_judge(endpoint, x, y_a, y_b, template, vocab, timeout=30.0):
    """One position-swapped judgment through an HTTP endpoint."""
    judge = LlmJudge(HttpTransport(endpoint, timeout=timeout), vocab, template)
    return judge.judge(x, y_a, y_b)


@dataclass
class EvalConfig:
    max_len: int = 8
    train_prompt_ids: frozenset = field(default_factory=frozenset)


def evaluate_model(policy, teacher, prompts, judge, cfg):
    """Greedy-decode both models on held-out prompts and aggregate verdicts.

    Prompts whose ids appear in cfg.train_prompt_ids are refused. Judge
    failures are excluded from the counts and surfaced in the per-prompt
    records with status 'error'.
    """
    check_nonempty(prompts, "prompts")
    overlap = {p.id for p in prompts} & set(cfg.train_prompt_ids)
    if overlap:
        raise OverlapError(f"evaluation prompts overlap training prompts: {sorted(overlap)[:5]}")
    decode = DecodeConfig(mode="greedy", max_len=cfg.max_len)
    records = []
    verdicts = []
    n_errors = 0
    for prompt in prompts:
        y_student = policy.sample(prompt, decode)
        y_teacher = teacher.sample(prompt, decode)
        record = {
            "prompt_id": prompt.id,
            "student_tokens": list(y_student.tokens),
            "teacher_tokens": list(y_teacher.tokens),
        }
        try:
            verdict = judge.judge(prompt, y_student, y_teacher)
        except JudgeError as exc:
            n_errors += 1
            record["status"] = "error"
            record["error"] = str(exc)
            records.append(record)
            continue
        record["status"] = "ok"
        record["verdict"] = verdict.value
        records.append(record)
        verdicts.append(verdict)
    if not verdicts:
        raise ValueError("no judgeable prompts (all judge calls failed)")
    if n_errors:
        logger.warning("evaluate_model: %d judge errors excluded from counts", n_errors)
    return win_rate(verdicts), records


def write_verdict_csv(records, path):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["prompt_id", "status", "verdict", "student_tokens", "teacher_tokens"])
        for rec in records:
            writer.writerow([
                rec["prompt_id"],
                rec["status"],
                rec.get("verdict", ""),
                " ".join(str(t) for t in rec["student_tokens"]),
                " ".join(str(t) for t in rec["teacher_tokens"]),
            ])
    return path


def write_summary_json(report, records, path):
    payload = {
        "n_win": report.n_win,
        "n_lose": report.n_lose,
        "n_tie": report.n_tie,
        "omega": report.omega,
        "omega_display": report.display(),
        "n_errors": sum(1 for r in records if r["status"] == "error"),
        "n_prompts": len(records),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Path(path)
