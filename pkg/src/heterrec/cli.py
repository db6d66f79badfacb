"""Command-line entry point.

Exit codes: 0 success, 1 data error or failed check, 2 configuration or
usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from heterrec.data import (
    SyntheticSpec,
    ingest,
    prepare,
    write_normalized,
    write_synthetic,
)
from heterrec.errors import ConfigError, DataError
from heterrec.htfl import FeatureSchema, QuantileCodebook, fit_schema

SCALING_PAIRS = ((1, 1), (1, 2), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6))
ABLATIONS = {
    "full": {},
    "wo_htfl": {"htfl_off": True},
    "wo_mfk": {"mfk_off": True},
    "wo_hct": {"hct_off": True},
    "wo_lmp": {"lmp_off": True},
    "wo_tlmp": {"tlmp_off": True},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _data_paths(data: str | None) -> tuple[Path, Path, Path]:
    if data is None:
        raise ConfigError("--data DIR is required (interactions.jsonl, items.jsonl, schema.json)")
    d = Path(data)
    return d / "interactions.jsonl", d / "items.jsonl", d / "schema.json"


def _prepared(args):
    inter, items, schema_path = _data_paths(args.data)
    for p in (inter, items, schema_path):
        if not p.exists():
            raise DataError(f"missing input file {p}")
    ds = ingest(inter, items, schema_path)
    return ds, prepare(ds, FeatureSchema.load(schema_path))


def _experiment_config(args):
    from heterrec.trainer import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _log(quiet: bool):
    if quiet:
        return None
    return lambda row: print(json.dumps(row, sort_keys=True), flush=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec()
    if args.config:
        spec = SyntheticSpec.from_json(json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    paths = write_synthetic(spec, args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return 0


def cmd_fit_codebook(args) -> int:
    inter, items, schema_path = _data_paths(args.data)
    ds = ingest(inter, items, schema_path)
    schema = fit_schema(FeatureSchema.load(schema_path), ds.items)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema.save(out / "schema.fitted.json")
    QuantileCodebook.fit(schema, ds.items).save(out / "codebook")
    print(f"wrote {out / 'schema.fitted.json'} and {out / 'codebook'}.{{json,bin}}")
    return 0


def cmd_prepare(args) -> int:
    ds, prep = _prepared(args)
    out = Path(args.out)
    write_normalized(ds, out)
    prep.schema.save(out / "schema.fitted.json")
    prep.codebook.save(out / "codebook")
    summary = ds.summary()
    summary.update({"train_users": len(prep.train_items), "heldout_users": int(len(prep.test_truth))})
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from heterrec.trainer import run_experiment

    cfg = _experiment_config(args)
    _, prep = _prepared(args)
    rep = run_experiment(cfg, prep, args.out, log=_log(args.quiet))
    print(json.dumps({"final": rep["final"], "popularity": rep["popularity"]}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    from heterrec.numerics import load_arrays
    from heterrec.trainer import ExperimentConfig, Trainer

    if not args.checkpoint:
        raise ConfigError("--checkpoint PATH is required")
    _, meta = load_arrays(args.checkpoint)
    cfg = ExperimentConfig.from_json(meta["config"])
    _, prep = _prepared(args)
    tr = Trainer(cfg, prep)
    tr.load(args.checkpoint)
    rep = {"model": tr.evaluate().to_json(), "popularity": tr.popularity().to_json()}
    _write_json(Path(args.out) / "eval.json", rep)
    print(json.dumps(rep, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    from heterrec.checks import run_all

    results = run_all(range(args.seeds), tol=args.tol, include_model=not args.primitives_only)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.report.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return 1 if failed else 0


def _study(args, runs: dict) -> int:
    from heterrec.trainer import run_experiment

    _, prep = _prepared(args)
    out = Path(args.out)
    summary = {}
    for name, cfg in runs.items():
        if not args.quiet:
            print(f"== {name}", flush=True)
        rep = run_experiment(cfg, prep, out / name, log=_log(args.quiet))
        summary[name] = {"recall": rep["final"]["recall"], "ndcg": rep["final"]["ndcg"],
                         "flags": rep["flags"], "blocks": rep["blocks"]}
    _write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_study_scaling(args) -> int:
    base = _experiment_config(args)
    return _study(args, {f"scaling_n1-{a}_n2-{b}": base.with_blocks(a, b) for a, b in SCALING_PAIRS})


def cmd_study_ablation(args) -> int:
    base = _experiment_config(args)
    return _study(args, {name: base.with_flags(**flags) for name, flags in ABLATIONS.items()})


COMMANDS = {
    "gen-synthetic": (cmd_gen_synthetic, "write a planted-rule corpus, its schema and rule file"),
    "fit-codebook": (cmd_fit_codebook, "fit numerical bins and multimodal quantile codebooks"),
    "prepare": (cmd_prepare, "ingest, validate, normalize and fit the token vocabularies"),
    "train": (cmd_train, "train and evaluate one configuration"),
    "evaluate": (cmd_evaluate, "evaluate a saved checkpoint"),
    "grad-check": (cmd_grad_check, "finite-difference checks of every backward rule"),
    "study-scaling": (cmd_study_scaling, "train the seven (N1, N2) depth pairs"),
    "study-ablation": (cmd_study_ablation, "train the full model and its five ablations"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (synthetic spec for gen-synthetic, experiment otherwise)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--data", help="directory with interactions.jsonl, items.jsonl and schema.json")
    common.add_argument("--quiet", action="store_true", help="no per-epoch log lines")
    parser = _Parser(prog="heterrec", description="heterogeneous-token sequential retrieval")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "evaluate":
            p.add_argument("--checkpoint", help="checkpoint path (stem of .json/.bin)")
        if name == "grad-check":
            p.add_argument("--seeds", type=int, default=10)
            p.add_argument("--tol", type=float, default=1e-3)
            p.add_argument("--primitives-only", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return COMMANDS[args.command][0](args)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
