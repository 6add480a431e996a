"""Command-line entry point.

Exit codes: 0 success, 1 validation/usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path


from . import evalkit
from .autodiff import NonFiniteError
from .corpus import CorpusError, load_jsonl
from .evalkit import TRANSFORMATIONS
from .treebank import PtbParseError, TreeError, read_tree_file, render_ptb, strip_preterminals, to_dependency
from .trainer import TrainConfig, TrainingAborted, make_embeddings, predict_all, train
from .model import VARIANTS, SrlModel

log = logging.getLogger("spangcn")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4

PATH_KEYS = ("train", "dev", "test", "embeddings", "checkpoint_dir")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_run_config(path, overrides: dict) -> tuple[TrainConfig, dict]:
    """Split a run config file into the training config and its paths."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: expected a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    paths = {k: raw.pop(k) for k in PATH_KEYS if k in raw}
    try:
        config = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as err:
        raise UsageError(f"{path}: {err}") from None
    for key in ("train", "checkpoint_dir"):
        if key not in paths:
            raise UsageError(f"{path}: missing required key {key!r}")
    base = path.parent
    for key, value in paths.items():
        p = Path(value)
        if not p.is_absolute():
            p = base / p
        paths[key] = p
        if key != "checkpoint_dir" and not p.exists():
            raise UsageError(f"{path}: {key} path does not exist: {p}")
    return config, paths


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "max_epochs": args.max_epochs, "variant": args.variant, "lr": args.lr}
    if args.checkpoint_dir:
        overrides["checkpoint_dir"] = args.checkpoint_dir
    config, paths = load_run_config(args.config, overrides)
    need_tree = config.variant != "baseline"
    train_set = load_jsonl(paths["train"], require_tree=need_tree, skip_bad=args.skip_bad)
    dev_set = load_jsonl(paths["dev"], require_tree=need_tree, skip_bad=args.skip_bad) if "dev" in paths else []
    extra = load_jsonl(paths["test"], skip_bad=args.skip_bad) if "test" in paths else []
    emb = make_embeddings(config, train_set + dev_set + extra, paths.get("embeddings"))
    result = train(config, train_set, dev_set, emb, out_dir=paths["checkpoint_dir"])
    print(json.dumps({"best_dev_f1": result.best_dev_f1, "epochs": len(result.log), "lr_halvings": result.lr_halvings}))
    return EXIT_OK


def _predict(checkpoint, data, skip_bad):
    model, _ = SrlModel.load(checkpoint)
    sentences = load_jsonl(data, require_tree=model.config.syntactic, skip_bad=skip_bad)
    instances = model.instances(sentences)
    return model, instances, predict_all(model, instances)


def cmd_eval(args) -> int:
    _, instances, preds = _predict(args.checkpoint, args.data, args.skip_bad)
    report = evalkit.full_report(evalkit.records_from(instances, preds))
    print(report.to_text() if args.text else evalkit.report_json(report))
    return EXIT_OK


def _parse_buckets(specs) -> dict:
    out = {}
    for spec in specs or []:
        name, _, edges = spec.partition(":")
        if name not in ("sentence_length", "pred_arg_distance") or not edges:
            raise UsageError(f"bad --buckets value {spec!r}; expected NAME:e0,e1,...")
        out[name] = [math.inf if e in ("inf", "∞") else float(e) for e in edges.split(",")]
    return out


def cmd_analyze(args) -> int:
    buckets = _parse_buckets(args.buckets)
    if not buckets:
        buckets = {"sentence_length": [0, 10, 20, 30, 40, math.inf], "pred_arg_distance": [0, 1, 2, 4, 7, math.inf]}
    oracle = args.oracle if args.oracle else list(evalkit.CHAIN_ORDER)
    for name in oracle:
        if name not in TRANSFORMATIONS:
            raise UsageError(f"unknown oracle transformation {name!r}")
    _, instances, preds = _predict(args.checkpoint, args.data, args.skip_bad)
    report = evalkit.full_report(evalkit.records_from(instances, preds), buckets, oracle)
    if args.plot_data:
        out = Path(args.plot_data)
        out.mkdir(parents=True, exist_ok=True)
        for fname, text in evalkit.plot_csv(report).items():
            (out / fname).write_text(text, encoding="utf-8")
    if args.json:
        Path(args.json).write_text(evalkit.report_json(report) + "\n", encoding="utf-8")
    print(report.to_text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    result = run_gradcheck(args.variant, eps=args.eps, sample=args.sample, seed=args.seed)
    ok = result.max_rel_error < GRADCHECK_TOLERANCE
    print(
        f"variant={args.variant} max_rel_error={result.max_rel_error:.3e} "
        f"max_abs_error={result.max_abs_error:.3e} max_rel_error_large={result.max_rel_error_large:.3e} param={result.param} index={result.index} checked={result.checked} "
        f"{'PASS' if ok else 'FAIL'}"
    )
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    from .corpus import dump_jsonl
    from .synthetic import gen_synthetic

    if args.size < 1:
        raise UsageError("--size must be at least 1")
    dump_jsonl(gen_synthetic(args.seed, args.size, args.depth), args.out)
    return EXIT_OK


def cmd_convert_tree(args) -> int:
    """Tree file -> JSONL dependency trees (``null`` where the input line is ``-``)."""
    trees = read_tree_file(args.inp)
    with open(args.out, "w", encoding="utf-8") as fh:
        for tree in trees:
            if tree is None:
                fh.write("null\n")
                continue
            stripped = strip_preterminals(tree)
            dep = to_dependency(stripped)
            rec = {"tokens": list(tree.tokens), "heads": list(dep.heads), "labels": list(dep.labels), "tree": render_ptb(stripped)}
            fh.write(json.dumps(rec) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spangcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--skip-bad", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="span P/R/F1 of a checkpoint on a JSONL file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--text", action="store_true", help="aligned-column output instead of JSON")
    p.add_argument("--skip-bad", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="bucketed F1 and oracle corrections")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--buckets", nargs="*", help="e.g. sentence_length:0,10,20,inf")
    p.add_argument("--oracle", nargs="*", help=f"subset of {', '.join(TRANSFORMATIONS)}")
    p.add_argument("--plot-data", help="directory for per-figure CSV files")
    p.add_argument("--json", help="also write the report as JSON here")
    p.add_argument("--skip-bad", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of a model variant")
    p.add_argument("--variant", choices=VARIANTS, default="spangcn")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--sample", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic JSONL corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert-tree", help="tree file -> dependency JSONL")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert_tree)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as err:  # --help
        return EXIT_OK if err.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteError, TrainingAborted, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorpusError, PtbParseError, TreeError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
