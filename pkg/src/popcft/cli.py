"""Command-line entry point: ``popcft {gen,train,eval,gridsearch,ablate,report}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
The output directory is ``--out``, else ``$POPCFT_OUT``, else the spec's
``output_dir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError
from .datagen import DatasetError, read_dataset
from .experiment import (
    OUT_ENV,
    ExperimentSpec,
    ablate,
    build_report,
    cell_config,
    data_efficiency,
    generate_data,
    gridsearch,
    resolve_output,
    run_cell,
    write_eval_report,
)
from .metrics import EvalConfig, evaluate
from .trainer import NumericDivergence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3

log = logging.getLogger("popcft")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="popcft", description="Multi-frame pop-bug detection with co-finetuning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, spec_required=True):
        sp.add_argument("--spec", required=spec_required, help="experiment spec (JSON)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the spec's seeds with one seed")
        return sp

    common(sub.add_parser("gen", help="generate one dataset directory per title"))
    tr = common(sub.add_parser("train", help="train one model and save its best checkpoint"))
    tr.add_argument("--fraction", type=float, help="labeled fraction of the downstream train split")
    tr.add_argument("--alpha", type=float)
    tr.add_argument("--beta", type=float)
    tr.add_argument("--csl", type=_bool)
    tr.add_argument("--ssl", type=_bool)
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint on a dataset split"), spec_required=False)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", help="dataset directory (default: the spec's downstream title)")
    ev.add_argument("--split", default="test", choices=["train", "validation", "test"])
    ev.add_argument("--condition", default="model", help="label used in the report tables")
    gs = common(sub.add_parser("gridsearch", help="alpha/beta grid search by validation mAP"))
    gs.add_argument("--fraction", type=float)
    ab = common(sub.add_parser("ablate", help="CSL/SSL ablation matrix and data-fraction study"))
    ab.add_argument("--fraction", type=float, nargs="+", help="data fractions for the efficiency study")
    rp = sub.add_parser("report", help="consolidate evaluation reports into normalized tables and t-tests")
    rp.add_argument("--spec")
    rp.add_argument("--out")
    return p


def _spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.spec)
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, seeds=[args.seed])
    return spec


def cmd_gen(args) -> int:
    spec = _spec(args)
    out = resolve_output(spec, args.out)
    for title, path in generate_data(spec, out).items():
        print(f"{title}: {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _spec(args)
    out = resolve_output(spec, args.out)
    overrides = {}
    for name, key in (("fraction", "labeled_fraction"), ("alpha", "alpha"), ("beta", "beta"), ("csl", "csl_enabled"), ("ssl", "ssl_enabled")):
        if getattr(args, name) is not None:
            overrides[key] = getattr(args, name)
    for seed in spec.seeds:
        r = run_cell(spec, out, cell_config(spec, seed, **overrides), save_model=True)
        print(json.dumps({k: r[k] for k in ("key", "seed", "val_map", "test_map", "test_f1")}))
        print(f"checkpoint: {out / 'runs' / r['key'] / 'best'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = _spec(args) if args.spec else None
    if args.data:
        data_path = Path(args.data)
    elif spec is not None:
        data_path = resolve_output(spec, args.out) / "data" / spec.downstream_title
    else:
        raise UsageError("eval needs --data or --spec")
    ds = read_dataset(data_path, splits=(args.split,))
    cfg = spec.eval_config if spec is not None else EvalConfig()
    report = evaluate(args.checkpoint, ds.split(args.split), cfg)
    out = Path(args.out) if args.out else (resolve_output(spec) if spec else Path("."))
    path = write_eval_report(out, args.condition, ds.style.title_id, report)
    print(json.dumps({"map": report.map, "f1": report.f1, "precision": report.precision, "recall": report.recall}))
    print(f"report: {path}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    spec = _spec(args)
    if args.fraction is not None:
        spec = replace(spec, train_config=replace(spec.train_config, labeled_fraction=args.fraction))
    out = resolve_output(spec, args.out)
    result = gridsearch(spec, out, on_cell=lambda r: log.info("cell alpha=%s beta=%s val_map=%.4f", r["alpha"], r["beta"], r["val_map"]))
    print((out / "gridsearch.txt").read_text(), end="")
    best = result["best"]
    print(json.dumps({"alpha": best["alpha"], "beta": best["beta"], "val_map": best["val_map"]}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = _spec(args)
    out = resolve_output(spec, args.out)
    ablate(spec, out)
    print((out / "ablation.txt").read_text(), end="")
    fractions = args.fraction or spec.data_fractions
    if len(fractions) > 1 or fractions[0] != 1.0:
        data_efficiency(spec, out, fractions)
        print((out / "efficiency.txt").read_text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    spec = ExperimentSpec.load(args.spec) if args.spec else None
    if args.out:
        out = Path(args.out)
    elif spec is not None:
        out = resolve_output(spec)
    else:
        out = Path(os.environ.get(OUT_ENV, "."))
    titles = [spec.downstream_title, *spec.co_titles] if spec is not None else None
    print(build_report(out, titles), end="")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gridsearch": cmd_gridsearch,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"popcft: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"popcft: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericDivergence as exc:
        print(f"popcft: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DatasetError, CheckpointError, ValueError, OSError) as exc:
        print(f"popcft: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
