"""Command-line interface: data generation, training, evaluation, verification.

Every run writes a manifest; usage errors exit 2, runtime errors exit 1
with a single machine-parseable line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__
from .corpus import load_prompts, save_prompts
from .evaluation import (
    EvalConfig,
    HttpTransport,
    LlmJudge,
    OracleJudge,
    evaluate_model,
    load_default_template,
    write_summary_json,
    write_verdict_csv,
)
from .pipeline import (
    Distiller,
    RunConfig,
    RunManifest,
    canonical_hash,
    sweep_preference,
    PREF_METHODS,
    ALL_METHODS,
)
from .policy import load_policy, save_policy
from .verify import SUITES
from .worlds import echo_reward, make_world

PROG = "dadpo"


def _write_manifest(out_dir, payload):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world = make_world(
        seed=args.seed, vocab_size=args.vocab_size, max_len=args.max_len,
        n_train=args.n_prompts, n_eval=args.n_eval_prompts,
    )
    save_prompts(world.train_prompts, out / "prompts.jsonl")
    save_prompts(world.eval_prompts, out / "eval_prompts.jsonl")
    save_policy(world.teacher, out / "teacher.json")
    save_policy(world.student, out / "student.json")
    (out / "meta.json").write_text(json.dumps(world.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, {
        "command": "gen-data",
        "version": __version__,
        "seed": args.seed,
        "config_hash": canonical_hash(world.meta),
        "files": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
    })
    print(f"wrote world with {len(world.train_prompts)} train / {len(world.eval_prompts)} eval prompts to {out}")
    return 0


def _load_world_dir(data_dir):
    data_dir = Path(data_dir)
    meta = json.loads((data_dir / "meta.json").read_text(encoding="utf-8"))
    teacher = load_policy(data_dir / "teacher.json")
    student = load_policy(data_dir / "student.json")
    train_prompts = load_prompts(data_dir / "prompts.jsonl", vocab=teacher.vocab)
    eval_prompts = load_prompts(data_dir / "eval_prompts.jsonl", vocab=teacher.vocab)
    return meta, teacher, student, train_prompts, eval_prompts


def _oracle_omega(policy, teacher, eval_prompts, reward, train_ids, max_len):
    judge = OracleJudge(reward)
    cfg = EvalConfig(max_len=max_len, train_prompt_ids=frozenset(train_ids))
    report, _ = evaluate_model(policy, teacher, eval_prompts, judge, cfg)
    return report


def cmd_train(args):
    meta, teacher, student, train_prompts, eval_prompts = _load_world_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reward = echo_reward(teacher.vocab)
    train_ids = [p.id for p in train_prompts]
    if args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = RunConfig(
            method=args.method,
            beta_grid=(args.beta,),
            beta1_grid=(args.beta1,),
            beta2_grid=(args.beta2,),
            kl_weight_grid=(args.kl_weight,),
            sft_epochs=args.epochs,
            pref_epochs=args.epochs,
            batch_size=args.batch_size,
            optimizer=args.optimizer,
            sft_lr=args.lr,
            pref_lr=args.lr,
            seed=args.seed,
            max_len=meta["max_len"],
        )
    cells = cfg.cells()
    if len(cells) > 1:
        if cfg.method not in PREF_METHODS:
            raise ValueError("grid sweeps are only defined for preference methods")
        dsft_policy, results = sweep_preference(train_prompts, teacher, student, cfg)
        save_policy(dsft_policy, out / "dsft.json")
        rows = []
        for i, res in enumerate(results):
            cell_dir = out / "cells" / f"cell_{i:03d}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            save_policy(res.policy, cell_dir / "final.json")
            report = _oracle_omega(res.policy, teacher, eval_prompts, reward, train_ids, cfg.max_len)
            res.manifest.oracle_omega = report.omega
            res.manifest.save(cell_dir / "manifest.json")
            rows.append({"cell": i, "params": res.params, "omega": report.omega})
        best = max(rows, key=lambda r: r["omega"])
        (out / "sweep_summary.json").write_text(
            json.dumps({"cells": rows, "best": best}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        _write_manifest(out, {
            "command": "train-sweep", "version": __version__, "method": cfg.method,
            "config_hash": canonical_hash(cfg.to_dict()), "n_cells": len(rows), "best": best,
        })
        print(f"sweep complete: {len(rows)} cells; best omega {best['omega']:.1f} at {best['params']}")
        return 0

    cell = cells[0]
    distiller = Distiller(
        teacher=teacher, student=student, method=cfg.method, max_len=cfg.max_len,
        decode_mode=cfg.decode_mode, decode_temperature=cfg.decode_temperature,
        sft_epochs=cfg.sft_epochs, pref_epochs=cfg.pref_epochs, sft_lr=cfg.sft_lr,
        pref_lr=cfg.pref_lr, optimizer=cfg.optimizer, batch_size=cfg.batch_size,
        seed=cfg.seed, **cell,
    ).fit(train_prompts)
    report = _oracle_omega(distiller.policy_, teacher, eval_prompts, reward, train_ids, cfg.max_len)
    distiller.manifest_.oracle_omega = report.omega
    distiller.save_run(out)
    print(f"trained {cfg.method}; final checkpoint {distiller.manifest_.checkpoints['final']['id']}; "
          f"held-out oracle omega {report.display()}")
    return 0


def cmd_eval(args):
    meta, teacher, _, train_prompts, eval_prompts = _load_world_dir(args.data)
    student = load_policy(args.student, expected_vocab=teacher.vocab)
    if args.teacher:
        teacher = load_policy(args.teacher, expected_vocab=teacher.vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.judge == "oracle":
        judge = OracleJudge(echo_reward(teacher.vocab), tie_margin=args.tie_margin)
    else:
        if not args.judge_endpoint:
            raise ValueError("--judge http requires --judge-endpoint")
        template = Path(args.template).read_text(encoding="utf-8") if args.template else load_default_template()
        judge = LlmJudge(HttpTransport(args.judge_endpoint), teacher.vocab, template)
    cfg = EvalConfig(max_len=meta["max_len"], train_prompt_ids=frozenset(p.id for p in train_prompts))
    report, records = evaluate_model(student, teacher, eval_prompts, judge, cfg)
    write_verdict_csv(records, out / "verdicts.csv")
    write_summary_json(report, records, out / "summary.json")
    _write_manifest(out, {
        "command": "eval", "version": __version__, "judge": args.judge,
        "student": str(args.student), "n_prompts": len(records),
        "omega": report.omega, "seed": args.seed,
    })
    print(f"omega {report.display()} (win {report.n_win} / tie {report.n_tie} / lose {report.n_lose})")
    return 0


def cmd_verify(args):
    suite = SUITES[args.suite]
    passed, lines = suite(seed=args.seed)
    for line in lines:
        print(line)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        _write_manifest(out.parent, {
            "command": "verify", "version": __version__, "suite": args.suite,
            "seed": args.seed, "passed": bool(passed), "report": out.name,
        })
    return 0 if passed else 1


def emit_report(manifest_paths, out_path):
    """Summarize run manifests as a plot-ready CSV with a stable column order."""
    rows = []
    for path in manifest_paths:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        m = RunManifest.load(path)
        pref = m.stages.get("preference", {})
        betas = pref.get("betas")
        if betas is None:
            beta1, beta2 = "", ""
        else:
            beta1, beta2 = repr(float(betas[0])), repr(float(betas[1]))
        curves = m.loss_curves.get("preference") or m.loss_curves.get("dsft") or []
        final_loss = repr(float(curves[-1])) if curves else ""
        omega = repr(float(m.oracle_omega)) if m.oracle_omega is not None else ""
        rows.append({
            "method": m.method,
            "beta1": beta1,
            "beta2": beta2,
            "seed": str(m.params.get("seed", "")),
            "final_loss": final_loss,
            "oracle_omega": omega,
            "runtime_s": repr(float(m.wall_time_s)),
        })
    rows.sort(key=lambda r: (r["method"], _sort_float(r["beta1"]), _sort_float(r["beta2"]), r["seed"]))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=["method", "beta1", "beta2", "seed", "final_loss", "oracle_omega", "runtime_s"],
            lineterminator="\n",
        )
        writer.writeheader()
        writer.writerows(rows)
    return out_path


def _sort_float(text):
    return float(text) if text else -1.0


def cmd_report(args):
    out = emit_report(args.manifests, args.out)
    print(f"wrote {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__)
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic world")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=8)
    p.add_argument("--max-len", type=int, default=4)
    p.add_argument("--n-prompts", type=int, default=200)
    p.add_argument("--n-eval-prompts", type=int, default=60)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the distillation pipeline")
    p.add_argument("--data", required=True, help="directory produced by gen-data")
    p.add_argument("--method", choices=ALL_METHODS, default="dadpo")
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--beta1", type=float, default=0.1)
    p.add_argument("--beta2", type=float, default=0.01)
    p.add_argument("--kl-weight", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=0)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="flat key=value run config (grids enable a sweep)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="judge a student checkpoint against the teacher")
    p.add_argument("--data", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", default=None)
    p.add_argument("--judge", choices=("oracle", "http"), default="oracle")
    p.add_argument("--judge-endpoint", default=None)
    p.add_argument("--template", default=None)
    p.add_argument("--tie-margin", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("--suite", choices=sorted(SUITES), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="summarize run manifests as CSV")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
