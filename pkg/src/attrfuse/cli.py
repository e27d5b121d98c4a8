"""``attrfuse`` command line: fixtures, training, evaluation, ablations and gradient checks."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import load_config
from .data import FixtureConfig, generate_synthetic_fixture, load_manifest, synthetic_samples
from .errors import AttrFuseError
from .training import (
    Checkpoint,
    ablation_table,
    evaluate,
    run_ablation_suite,
    train,
    write_report,
    write_shuffle_log,
)
from .verify import full_pipeline_grad_check


def _gen_fixture(args) -> int:
    base = FixtureConfig(
        n_samples=args.samples, M=args.M, L=args.L, d_v=args.d_v, d_e=args.d_e, d_t=args.d_t,
        n_t=args.n_t, n_p=args.n_p, n_c=args.n_c, vocab_size=args.vocab_size,
        attribute_words=args.attribute_words, attribute_signal=args.attribute_signal,
        knowledge_signal=args.knowledge_signal, seed=args.seed, name=args.name,
    )
    m = generate_synthetic_fixture(base, args.out)
    print(f"wrote {m.N} train samples to {args.out}/train.manifest")
    if args.test_samples:
        t = generate_synthetic_fixture(replace(base, n_samples=args.test_samples, split="test"),
                                       args.out)
        print(f"wrote {t.N} test samples to {args.out}/test.manifest")
    return 0


def _train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    result = train(cfg)
    result.checkpoint.save(out / "checkpoint")
    write_report(result.report, out)
    write_shuffle_log(result.shuffle_log, out / "run.log")
    print(result.report.table("train split"))
    if result.report.heldout is not None:
        print(result.report.heldout.table("held-out split"))
    print(f"checkpoint: {out / 'checkpoint'}")
    return 0


def _eval(args) -> int:
    report = evaluate(Checkpoint.load(args.ckpt), load_manifest(args.manifest))
    print(report.table(f"evaluation on {args.manifest}"))
    for metric, value in report.records():
        print(json.dumps({"metric": metric, "value": value}))
    if args.out:
        write_report(report, args.out, stem="eval")
    return 0


def _ablate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation_suite(cfg)
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    with open(out / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            for metric, value in r.report.records():
                fh.write(json.dumps({"row": r.name, "metric": metric, "value": value}) + "\n")
    print(table)
    return 0


def _grad_check(args) -> int:
    cfg = load_config(args.config)
    started = time.perf_counter()
    report = full_pipeline_grad_check(cfg)
    elapsed = time.perf_counter() - started
    print(f"checked {report.n_checked} parameter entries in {elapsed:.1f}s")
    print(f"max relative error: {report.max_rel_error:.3e} (worst: {report.worst_name})")
    print(f"tolerance: {cfg.grad_tol:.1e} -> {'PASS' if report.passed else 'FAIL'}")
    for name in report.failing_names:
        print(f"  failing: {name}")
    if report.failures:
        n_round = sum(f.within_roundoff for f in report.failures)
        print(f"{len(report.failures)} entries over tolerance; {n_round} differ by no more than "
              f"the difference resolution {report.roundoff:.1e} (loss {report.loss_value:.4f})")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attrfuse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-fixture", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=64)
    g.add_argument("--test-samples", type=int, default=0)
    g.add_argument("--attribute-signal", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--knowledge-signal", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--name", default="synthetic")
    defaults = FixtureConfig()
    for key in ("M", "L", "d_v", "d_e", "d_t", "n_t", "n_p", "n_c", "vocab_size",
                "attribute_words"):
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int,
                       default=getattr(defaults, key))
    g.set_defaults(func=_gen_fixture)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out")
    e.set_defaults(func=_eval)

    a = sub.add_parser("ablate", help="run the four-row component ablation")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_ablate)

    c = sub.add_parser("grad-check", help="finite-difference check of the full pipeline")
    c.add_argument("--config", required=True)
    c.set_defaults(func=_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AttrFuseError as exc:
        print(f"attrfuse: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
