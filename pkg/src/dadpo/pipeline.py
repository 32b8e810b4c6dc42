"""Teacher-to-student distillation pipeline.

Three sklearn-style estimators cover the fit-shaped stages:

* ``SftTrainer``      — supervised stage on teacher responses (optionally
                        with a token-KL term).
* ``PreferenceTrainer`` — preference stage; the reference policy is a
                        frozen copy of the supervised model and the
                        trainable policy starts from it.
* ``Distiller``       — the full pipeline: build datasets, supervised
                        stage, preference stage, manifest.

All preference methods run through the distribution-aware loss/gradient
path with the appropriate beta pair (plain DPO uses (beta, 0), the
teacher-reference variant (0, beta)), so equal-seed trajectories of
algebraically equivalent configurations are bit-identical.

Training is deterministic: batches are ordered by a generator seeded from
(seed, epoch), updates are sequential, and manifests record config and
dataset hashes so a rerun can be checked for exact reproduction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.model_selection import ParameterGrid

from . import losses as L
from . import grads as G
from .corpus import build_datasets, sft_pairs_jsonl, triplets_jsonl, write_datasets
from .policy import DecodeConfig, save_policy

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineError",
    "RunConfig",
    "RunManifest",
    "SftTrainer",
    "PreferenceTrainer",
    "Distiller",
    "run_dsft",
    "run_preference_stage",
    "distill",
    "sweep_preference",
    "CellResult",
    "SFT_METHODS",
    "PREF_METHODS",
    "canonical_hash",
]

SFT_METHODS = ("dsft", "dsft_kl")
PREF_METHODS = ("ddpo", "ddpo_kl", "rdpo", "dadpo")
ALL_METHODS = SFT_METHODS + PREF_METHODS


class PipelineError(RuntimeError):
    def __init__(self, message, manifest=None):
        super().__init__(message)
        self.manifest = manifest


def canonical_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def _default_lr(policy):
    return 1e-2 if policy.backend == "tabular" else 1e-3


def _train_loop(policy, data, loss_fn, grad_fn, *, epochs, lr, optimizer, batch_size,
                seed, plateau_window=5, plateau_tol=1e-6):
    """Deterministic training loop; returns (policy, curve, stop_reason)."""
    curve = [loss_fn(policy, data)]
    if not np.isfinite(curve[0]):
        raise PipelineError("initial loss is not finite")
    opt = G.make_optimizer(G.OptimConfig(algorithm=optimizer, lr=lr))
    stop = "epochs"
    for epoch in range(epochs):
        if batch_size and batch_size < len(data):
            order = np.random.default_rng([int(seed), epoch]).permutation(len(data))
            batches = [
                [data[j] for j in order[i : i + batch_size]]
                for i in range(0, len(order), batch_size)
            ]
        else:
            batches = [data]
        for batch in batches:
            policy = opt.step(policy, grad_fn(policy, batch))
        total = loss_fn(policy, data)
        if not np.isfinite(total):
            raise PipelineError(f"loss diverged to {total!r} at epoch {epoch}")
        curve.append(total)
        if len(curve) > plateau_window:
            prev = curve[-1 - plateau_window]
            if prev - curve[-1] < plateau_tol * max(abs(prev), 1e-12):
                stop = "plateau"
                break
    return policy, curve, stop


class SftTrainer(BaseEstimator):
    """Supervised distillation stage; method 'dsft' or 'dsft_kl'."""

    def __init__(self, method="dsft", kl_weight=0.1, teacher=None, epochs=200, lr=None,
                 optimizer="sgd", batch_size=0, seed=0, plateau_window=5, plateau_tol=1e-6):
        self.method = method
        self.kl_weight = kl_weight
        self.teacher = teacher
        self.epochs = epochs
        self.lr = lr
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.seed = seed
        self.plateau_window = plateau_window
        self.plateau_tol = plateau_tol

    def fit(self, X, y=None, init_policy=None):
        if self.method not in SFT_METHODS:
            raise ValueError(f"SftTrainer method must be one of {SFT_METHODS}, got {self.method!r}")
        if init_policy is None:
            raise ValueError("fit requires init_policy (the student to be trained)")
        if self.method == "dsft_kl" and self.teacher is None:
            raise ValueError("dsft_kl requires a teacher policy")
        lr = self.lr if self.lr is not None else _default_lr(init_policy)
        if self.method == "dsft":
            loss_fn = lambda p, d: L.sft_loss(p, d).total
            grad_fn = lambda p, d: G.loss_grad("sft", p, d)
        else:
            loss_fn = lambda p, d: L.composite_loss("sft", self.kl_weight, p, self.teacher, d).total
            grad_fn = lambda p, d: G.loss_grad("sft_kl", p, d, teacher=self.teacher, kl_weight=self.kl_weight)
        policy, curve, stop = _train_loop(
            init_policy, list(X), loss_fn, grad_fn,
            epochs=self.epochs, lr=lr, optimizer=self.optimizer,
            batch_size=self.batch_size, seed=self.seed,
            plateau_window=self.plateau_window, plateau_tol=self.plateau_tol,
        )
        self.policy_ = policy
        self.loss_curve_ = curve
        self.stop_reason_ = stop
        self.n_epochs_run_ = len(curve) - 1
        return self


class _CachedPreferenceObjective:
    """Preference loss/gradient with frozen reference and teacher scores.

    The reference and teacher are constant during the stage, so their
    sentence log-probabilities (and, for the +KL composite, their token
    distributions along the winners) are computed once. Every preference
    method evaluates through this one code path with its beta pair, which
    is what makes equal-seed trajectories of algebraically equal
    configurations bit-identical.
    """

    def __init__(self, triplets, ref, teacher, betas, kl_weight=0.0):
        self.triplets = triplets
        self.betas = betas
        self.kl_weight = float(kl_weight)
        self.ref_w = np.array([ref.sentence_logprob(t.prompt, t.winner) for t in triplets])
        self.ref_l = np.array([ref.sentence_logprob(t.prompt, t.loser) for t in triplets])
        self.te_w = np.array([teacher.sentence_logprob(t.prompt, t.winner) for t in triplets])
        self.te_l = np.array([teacher.sentence_logprob(t.prompt, t.loser) for t in triplets])
        self.teacher_token_dists = None
        if self.kl_weight > 0.0:
            self.teacher_token_dists = []
            for t in triplets:
                dists = []
                prefix = ()
                for tok in t.winner.tokens:
                    dists.append(teacher.token_distribution(t.prompt, prefix))
                    prefix = prefix + (tok,)
                self.teacher_token_dists.append(dists)

    def _policy_scores(self, policy, idx):
        pw = np.array([policy.sentence_logprob(self.triplets[i].prompt, self.triplets[i].winner) for i in idx])
        pl = np.array([policy.sentence_logprob(self.triplets[i].prompt, self.triplets[i].loser) for i in idx])
        return pw, pl

    def loss(self, policy, idx):
        idx = np.asarray(idx, dtype=int)
        pw, pl = self._policy_scores(policy, idx)
        bt, b1, b2 = self.betas.total, self.betas.beta1, self.betas.beta2
        margin = bt * (pw - pl) - b1 * (self.ref_w[idx] - self.ref_l[idx]) - b2 * (self.te_w[idx] - self.te_l[idx])
        total = float(np.mean(np.logaddexp(0.0, -margin)))
        if self.kl_weight > 0.0:
            total += self.kl_weight * self._kl_value(policy, idx)
        return total

    def grad(self, policy, idx):
        idx = np.asarray(idx, dtype=int)
        bt, b2 = self.betas.total, self.betas.beta2
        grad = np.zeros(policy.n_params)
        for i in idx:
            t = self.triplets[i]
            pw = policy.sentence_logprob(t.prompt, t.winner)
            pl = policy.sentence_logprob(t.prompt, t.loser)
            delta_theta = (pw - self.ref_w[i]) - (pl - self.ref_l[i])
            delta_te = (self.te_w[i] - self.ref_w[i]) - (self.te_l[i] - self.ref_l[i])
            coeff = float(expit(bt * (-delta_theta) + b2 * delta_te))
            gw = policy.sentence_logprob_grad(t.prompt, t.winner)
            gl = policy.sentence_logprob_grad(t.prompt, t.loser)
            grad += coeff * bt * (gl - gw)
        grad /= len(idx)
        if self.kl_weight > 0.0:
            grad += self.kl_weight * self._kl_grad(policy, idx)
        return grad

    def _kl_value(self, policy, idx):
        acc = 0.0
        for i in idx:
            t = self.triplets[i]
            dists = self.teacher_token_dists[i]
            kl = 0.0
            prefix = ()
            for n, tok in enumerate(t.winner.tokens):
                ps = policy.token_distribution(t.prompt, prefix)
                q = dists[n]
                kl += max(float(np.sum(ps * (np.log(ps) - np.log(q)))), 0.0)
                prefix = prefix + (tok,)
            acc += kl / t.winner.length
        return acc / len(idx)

    def _kl_grad(self, policy, idx):
        grad = np.zeros(policy.n_params)
        for i in idx:
            t = self.triplets[i]
            dists = self.teacher_token_dists[i]
            acc = np.zeros(policy.n_params)
            prefix = ()
            for n, tok in enumerate(t.winner.tokens):
                p_raw, jac = policy.token_distribution_grad(t.prompt, prefix)
                q = dists[n]
                mask = p_raw > 0
                terms = np.log(p_raw[mask]) - np.log(q[mask]) + 1.0
                acc += terms @ jac[mask]
                prefix = prefix + (tok,)
            grad += acc / t.winner.length
        return grad / len(idx)


class PreferenceTrainer(BaseEstimator):
    """Preference-optimization stage over (winner, loser) triplets.

    The reference policy is the (frozen) initial policy; the trainable
    policy starts from the same parameters.
    """

    def __init__(self, method="dadpo", beta=0.1, beta1=0.1, beta2=0.01, kl_weight=0.1,
                 teacher=None, epochs=200, lr=None, optimizer="sgd", batch_size=0,
                 seed=0, plateau_window=5, plateau_tol=1e-6):
        self.method = method
        self.beta = beta
        self.beta1 = beta1
        self.beta2 = beta2
        self.kl_weight = kl_weight
        self.teacher = teacher
        self.epochs = epochs
        self.lr = lr
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.seed = seed
        self.plateau_window = plateau_window
        self.plateau_tol = plateau_tol

    def _betas(self):
        if self.method == "dadpo":
            return L.BetaPair(self.beta1, self.beta2)
        if self.method == "rdpo":
            return L.BetaPair(0.0, self.beta)
        return L.BetaPair(self.beta, 0.0)

    def fit(self, X, y=None, init_policy=None):
        if self.method not in PREF_METHODS:
            raise ValueError(f"PreferenceTrainer method must be one of {PREF_METHODS}, got {self.method!r}")
        if init_policy is None:
            raise ValueError("fit requires init_policy (the supervised policy)")
        if self.method in ("rdpo", "dadpo", "ddpo_kl") and self.teacher is None:
            raise ValueError(f"{self.method} requires a teacher policy")
        triplets = list(X)
        if not triplets:
            raise ValueError("preference stage requires a non-empty triplet batch")
        ref = init_policy
        teacher = self.teacher if self.teacher is not None else ref
        betas = self._betas()
        lr = self.lr if self.lr is not None else _default_lr(init_policy)
        objective = _CachedPreferenceObjective(
            triplets, ref, teacher, betas,
            kl_weight=self.kl_weight if self.method == "ddpo_kl" else 0.0,
        )
        policy, curve, stop = _train_loop(
            init_policy, list(range(len(triplets))), objective.loss, objective.grad,
            epochs=self.epochs, lr=lr, optimizer=self.optimizer,
            batch_size=self.batch_size, seed=self.seed,
            plateau_window=self.plateau_window, plateau_tol=self.plateau_tol,
        )
        self.policy_ = policy
        self.ref_policy_ = ref
        self.betas_ = betas
        self.loss_curve_ = curve
        self.stop_reason_ = stop
        self.n_epochs_run_ = len(curve) - 1
        return self


@dataclass
class RunConfig:
    """Pipeline configuration; grids drive sweeps, first cells drive single runs."""

    method: str = "dadpo"
    beta_grid: tuple = (0.01, 0.1, 1.0)
    beta1_grid: tuple = (0.01, 0.1, 1.0)
    beta2_grid: tuple = (0.001, 0.01, 0.1, 1.0)
    kl_weight_grid: tuple = (0.1, 0.2, 0.4)
    sft_epochs: int = 200
    pref_epochs: int = 200
    batch_size: int = 0
    optimizer: str = "sgd"
    sft_lr: float | None = None
    pref_lr: float | None = None
    seed: int = 0
    max_len: int = 8
    decode_mode: str = "greedy"
    decode_temperature: float = 1.0
    out_dir: str | None = None

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ValueError(f"method must be one of {ALL_METHODS}, got {self.method!r}")
        for name in ("beta_grid", "beta1_grid", "beta2_grid", "kl_weight_grid"):
            grid = tuple(getattr(self, name))
            if len(grid) == 0:
                raise ValueError(f"{name} must be non-empty")
            setattr(self, name, grid)
        if self.sft_epochs < 0 or self.pref_epochs < 0:
            raise ValueError("epoch counts must be >= 0")

    def cells(self):
        """Hyperparameter cells for this method, in deterministic order."""
        if self.method in ("dsft",):
            grid = {}
        elif self.method == "dsft_kl":
            grid = {"kl_weight": list(self.kl_weight_grid)}
        elif self.method in ("ddpo", "rdpo"):
            grid = {"beta": list(self.beta_grid)}
        elif self.method == "ddpo_kl":
            grid = {"beta": list(self.beta_grid), "kl_weight": list(self.kl_weight_grid)}
        else:
            grid = {"beta1": list(self.beta1_grid), "beta2": list(self.beta2_grid)}
        return list(ParameterGrid(grid)) if grid else [{}]

    def first_cell(self):
        return self.cells()[0]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_file(cls, path):
        """Parse the flat `key = value` run-config format.

        Grids are comma-separated numbers; `none` clears optional values.
        Unknown keys are rejected.
        """
        known = {f.name for f in cls.__dataclass_fields__.values()}
        kwargs = {}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}: line {lineno}: unknown key {key!r}")
            kwargs[key] = _parse_config_value(key, value)
        return cls(**kwargs)


def _parse_config_value(key, value):
    if key.endswith("_grid"):
        return tuple(float(v) for v in value.split(","))
    if value.lower() == "none":
        return None
    if key in ("sft_epochs", "pref_epochs", "batch_size", "seed", "max_len"):
        return int(value)
    if key in ("sft_lr", "pref_lr", "decode_temperature"):
        return float(value)
    return value


@dataclass
class RunManifest:
    """Reproducibility record for one pipeline run."""

    method: str
    params: dict
    config_hash: str
    dataset_hashes: dict
    loss_curves: dict
    stages: dict
    checkpoints: dict = field(default_factory=dict)
    oracle_omega: float | None = None
    wall_time_s: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
        return Path(path)

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**data)


def _prompts_payload(prompts):
    return "".join(json.dumps({"id": p.id, "tokens": list(p.tokens)}) + "\n" for p in prompts)


def _sha(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Distiller(BaseEstimator):
    """Full pipeline: dataset construction, supervised stage, preference stage."""

    def __init__(self, teacher=None, student=None, method="dadpo", beta=0.1, beta1=0.1,
                 beta2=0.01, kl_weight=0.1, max_len=8, decode_mode="greedy",
                 decode_temperature=1.0, student_decode_mode=None,
                 student_decode_temperature=None, sft_epochs=200, pref_epochs=200,
                 sft_lr=None, pref_lr=None, optimizer="sgd", batch_size=0, seed=0):
        self.teacher = teacher
        self.student = student
        self.method = method
        self.beta = beta
        self.beta1 = beta1
        self.beta2 = beta2
        self.kl_weight = kl_weight
        self.max_len = max_len
        self.decode_mode = decode_mode
        self.decode_temperature = decode_temperature
        self.student_decode_mode = student_decode_mode
        self.student_decode_temperature = student_decode_temperature
        self.sft_epochs = sft_epochs
        self.pref_epochs = pref_epochs
        self.sft_lr = sft_lr
        self.pref_lr = pref_lr
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.seed = seed

    def _run_params(self):
        return {
            "method": self.method,
            "beta": self.beta,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "kl_weight": self.kl_weight,
            "max_len": self.max_len,
            "decode_mode": self.decode_mode,
            "decode_temperature": self.decode_temperature,
            "student_decode_mode": self.student_decode_mode,
            "student_decode_temperature": self.student_decode_temperature,
            "sft_epochs": self.sft_epochs,
            "pref_epochs": self.pref_epochs,
            "sft_lr": self.sft_lr,
            "pref_lr": self.pref_lr,
            "optimizer": self.optimizer,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    def fit(self, X, y=None):
        if self.teacher is None or self.student is None:
            raise ValueError("Distiller requires teacher and student policies")
        if self.method not in ALL_METHODS:
            raise ValueError(f"method must be one of {ALL_METHODS}, got {self.method!r}")
        prompts = list(X)
        t0 = time.perf_counter()
        stages = {}
        curves = {}

        decode_cfg = DecodeConfig(
            mode=self.decode_mode, temperature=self.decode_temperature,
            seed=self.seed, max_len=self.max_len,
        )
        student_cfg = None
        if self.student_decode_mode is not None:
            student_cfg = DecodeConfig(
                mode=self.student_decode_mode,
                temperature=self.student_decode_temperature or 1.0,
                seed=self.seed, max_len=self.max_len,
            )
        sft_pairs, triplets = build_datasets(prompts, self.teacher, self.student, decode_cfg, student_cfg)
        self.sft_pairs_ = sft_pairs
        self.triplets_ = triplets
        self.n_dropped_ = len(prompts) - len(triplets)
        stages["build"] = {
            "n_prompts": len(prompts),
            "n_sft_pairs": len(sft_pairs),
            "n_triplets": len(triplets),
            "n_dropped": self.n_dropped_,
            "decode_mode": decode_cfg.mode,
            "student_decode_mode": (student_cfg or decode_cfg).mode,
        }

        manifest = RunManifest(
            method=self.method,
            params=self._run_params(),
            config_hash=canonical_hash({"params": self._run_params()}),
            dataset_hashes={
                "prompts": _sha(_prompts_payload(prompts)),
                "sft": _sha(sft_pairs_jsonl(sft_pairs)),
                "triplets": _sha(triplets_jsonl(triplets)),
            },
            loss_curves=curves,
            stages=stages,
        )

        try:
            sft = SftTrainer(
                method="dsft_kl" if self.method == "dsft_kl" else "dsft",
                kl_weight=self.kl_weight, teacher=self.teacher, epochs=self.sft_epochs,
                lr=self.sft_lr, optimizer=self.optimizer, batch_size=self.batch_size,
                seed=self.seed,
            ).fit(sft_pairs, init_policy=self.student)
            self.dsft_policy_ = sft.policy_
            curves["dsft"] = [float(v) for v in sft.loss_curve_]
            stages["dsft"] = {"epochs_run": sft.n_epochs_run_, "stop_reason": sft.stop_reason_}

            if self.method in SFT_METHODS:
                self.policy_ = self.dsft_policy_
                self.ref_policy_ = None
            elif not triplets:
                logger.warning("all triplets dropped (winner == loser); skipping preference stage")
                stages["preference"] = {"skipped": "no_triplets"}
                self.policy_ = self.dsft_policy_
                self.ref_policy_ = None
            else:
                pref = PreferenceTrainer(
                    method=self.method, beta=self.beta, beta1=self.beta1, beta2=self.beta2,
                    kl_weight=self.kl_weight, teacher=self.teacher, epochs=self.pref_epochs,
                    lr=self.pref_lr, optimizer=self.optimizer, batch_size=self.batch_size,
                    seed=self.seed,
                ).fit(triplets, init_policy=self.dsft_policy_)
                self.policy_ = pref.policy_
                self.ref_policy_ = pref.ref_policy_
                curves["preference"] = [float(v) for v in pref.loss_curve_]
                stages["preference"] = {
                    "epochs_run": pref.n_epochs_run_,
                    "stop_reason": pref.stop_reason_,
                    "betas": [pref.betas_.beta1, pref.betas_.beta2],
                }
        except PipelineError as exc:
            manifest.wall_time_s = time.perf_counter() - t0
            exc.manifest = manifest
            raise

        manifest.wall_time_s = time.perf_counter() - t0
        self.manifest_ = manifest
        return self

    def save_run(self, out_dir):
        """Write datasets, checkpoints, and the manifest to a directory."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_datasets(self.sft_pairs_, self.triplets_, out_dir)
        entries = {"dsft": self.dsft_policy_, "final": self.policy_}
        if self.ref_policy_ is not None:
            entries["ref"] = self.ref_policy_
        for name, pol in entries.items():
            path = out_dir / f"{name}.json"
            save_policy(pol, path)
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            self.manifest_.checkpoints[name] = {"path": str(path), "sha256": digest, "id": digest[:16]}
        self.manifest_.save(out_dir / "manifest.json")
        return out_dir


def run_dsft(student, sft_data, cfg):
    """Supervised stage per the run config; returns the trained policy."""
    if len(sft_data) == 0:
        raise ValueError("run_dsft requires non-empty data")
    trainer = SftTrainer(
        method="dsft", epochs=cfg.sft_epochs, lr=cfg.sft_lr, optimizer=cfg.optimizer,
        batch_size=cfg.batch_size, seed=cfg.seed,
    )
    return trainer.fit(sft_data, init_policy=student).policy_


def run_preference_stage(pi_dsft, teacher, triplets, cfg):
    """Preference stage per the run config's first grid cell."""
    cell = cfg.first_cell()
    trainer = PreferenceTrainer(
        method=cfg.method, teacher=teacher, epochs=cfg.pref_epochs, lr=cfg.pref_lr,
        optimizer=cfg.optimizer, batch_size=cfg.batch_size, seed=cfg.seed, **cell,
    )
    return trainer.fit(triplets, init_policy=pi_dsft).policy_


def distill(prompts, teacher, student, cfg):
    """Full pipeline run; returns (manifest, final policy)."""
    cell = cfg.first_cell()
    distiller = Distiller(
        teacher=teacher, student=student, method=cfg.method, max_len=cfg.max_len,
        decode_mode=cfg.decode_mode, decode_temperature=cfg.decode_temperature,
        sft_epochs=cfg.sft_epochs, pref_epochs=cfg.pref_epochs, sft_lr=cfg.sft_lr,
        pref_lr=cfg.pref_lr, optimizer=cfg.optimizer, batch_size=cfg.batch_size,
        seed=cfg.seed, **cell,
    ).fit(prompts)
    if cfg.out_dir:
        distiller.save_run(cfg.out_dir)
    return distiller.manifest_, distiller.policy_


@dataclass
class CellResult:
    params: dict
    policy: object
    manifest: RunManifest


def sweep_preference(prompts, teacher, student, cfg):
    """Run the method's hyperparameter grid, sharing datasets and the SFT stage.

    Returns (pi_dsft, [CellResult, ...]) in deterministic grid order.
    """
    if cfg.method not in PREF_METHODS:
        raise ValueError(f"sweep_preference requires a preference method, got {cfg.method!r}")
    prompts = list(prompts)
    decode_cfg = DecodeConfig(
        mode=cfg.decode_mode, temperature=cfg.decode_temperature, seed=cfg.seed, max_len=cfg.max_len
    )
    sft_pairs, triplets = build_datasets(prompts, teacher, student, decode_cfg)
    if not triplets:
        raise PipelineError("sweep has no preference triplets (all winner == loser)")
    sft = SftTrainer(
        method="dsft", epochs=cfg.sft_epochs, lr=cfg.sft_lr, optimizer=cfg.optimizer,
        batch_size=cfg.batch_size, seed=cfg.seed,
    ).fit(sft_pairs, init_policy=student)
    dataset_hashes = {
        "prompts": _sha(_prompts_payload(prompts)),
        "sft": _sha(sft_pairs_jsonl(sft_pairs)),
        "triplets": _sha(triplets_jsonl(triplets)),
    }
    shared_stages = {
        "build": {
            "n_prompts": len(prompts),
            "n_sft_pairs": len(sft_pairs),
            "n_triplets": len(triplets),
            "n_dropped": len(prompts) - len(triplets),
            "decode_mode": decode_cfg.mode,
            "student_decode_mode": decode_cfg.mode,
        },
        "dsft": {"epochs_run": sft.n_epochs_run_, "stop_reason": sft.stop_reason_},
    }
    results = []
    for cell in cfg.cells():
        t0 = time.perf_counter()
        trainer = PreferenceTrainer(
            method=cfg.method, teacher=teacher, epochs=cfg.pref_epochs, lr=cfg.pref_lr,
            optimizer=cfg.optimizer, batch_size=cfg.batch_size, seed=cfg.seed, **cell,
        ).fit(triplets, init_policy=sft.policy_)
        params = {
            "method": cfg.method, "seed": cfg.seed, "max_len": cfg.max_len,
            "sft_epochs": cfg.sft_epochs, "pref_epochs": cfg.pref_epochs,
            "optimizer": cfg.optimizer, "batch_size": cfg.batch_size,
        }
        params.update(cell)
        manifest = RunManifest(
            method=cfg.method,
            params=params,
            config_hash=canonical_hash({"params": params}),
            dataset_hashes=dict(dataset_hashes),
            loss_curves={
                "dsft": [float(v) for v in sft.loss_curve_],
                "preference": [float(v) for v in trainer.loss_curve_],
            },
            stages={
                **{k: dict(v) for k, v in shared_stages.items()},
                "preference": {
                    "epochs_run": trainer.n_epochs_run_,
                    "stop_reason": trainer.stop_reason_,
                    "betas": [trainer.betas_.beta1, trainer.betas_.beta2],
                },
            },
            wall_time_s=time.perf_counter() - t0,
        )
        results.append(CellResult(params=cell, policy=trainer.policy_, manifest=manifest))
    return sft.policy_, results
