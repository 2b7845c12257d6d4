"""Command-line entry point: ``leco run|sweep|gen-data|infer-hierarchy|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from leco import harness
from leco.hierinfer import PairedLabeling, infer_parent_map, masked_fraction, taxonomy_from_parent_map
from leco.ontology import Taxonomy
from leco.synthdata import HierarchicalGaussianSpec, generate_pool, save_pool


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _error("usage", f"{self.prog}: {message}")
        sys.exit(2)


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _load_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config)
    if args.seeds:
        cfg = cfg.replace(seeds=tuple(args.seeds))
    if args.out:
        cfg = cfg.replace(out=args.out)
    return cfg


def cmd_run(args) -> dict:
    cfg = _load_config(args)
    table = harness.run_experiment(cfg, workers=args.workers)
    root = harness.run_dir(cfg)
    print(table.to_text(scale=100.0), end="")
    return {"results": str(root / "results.csv"), "rows": len(table)}


def cmd_sweep(args) -> dict:
    cfg = _load_config(args)
    result = harness.sweep(cfg, args.grid, workers=args.workers)
    print(result.table.to_text(scale=100.0), end="")
    return {"selected": result.selected}


def cmd_gen_data(args) -> dict:
    raw = json.loads(Path(args.spec).read_text())
    tax_raw = raw.pop("taxonomy", {"branching": [20, 5]})
    sizes = raw.pop("sizes", None)
    test_size = raw.pop("test_size", 10000)
    if "file" in tax_raw:
        tax = Taxonomy.load(tax_raw["file"])
    elif "level_sizes" in tax_raw:
        tax = Taxonomy.random(tax_raw["level_sizes"], np.random.default_rng([tax_raw.get("seed", 0), 0x7A0]))
    else:
        tax = Taxonomy.balanced(tax_raw["branching"])
    spec = HierarchicalGaussianSpec.from_dict({**raw, "seed": args.seed})
    if sizes is None:
        sizes = [10000] * tax.num_levels
    pool = generate_pool(spec, tax, sizes, test_size)
    out = save_pool(pool, args.out)
    return {"out": str(out), "samples": len(pool), "level_sizes": list(tax.level_sizes)}


def cmd_infer_hierarchy(args) -> dict:
    paired = PairedLabeling.load(args.pairs)
    num_old = args.num_old or int(paired.old.max()) + 1
    num_new = args.num_new or int(paired.new.max()) + 1
    parent = infer_parent_map(paired, num_new, num_old)
    tax = taxonomy_from_parent_map(parent, num_old)
    tax.save(args.out)
    return {"out": args.out, "num_old": num_old, "num_new": num_new, "masked_fraction": masked_fraction(paired, parent)}


def cmd_report(args) -> dict:
    table = harness.load_table(args.inp)
    text = harness.emit_report(table, args.format, args.output, scale=100.0 if args.percent else 1.0)
    if args.output is None:
        sys.stdout.write(text)
    return {"rows": len(table)}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="leco", description="Learning with an evolving class ontology on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, doc in (("run", cmd_run, "run an experiment config"), ("sweep", cmd_sweep, "lr x weight-decay grid search")):
        s = sub.add_parser(name, help=doc)
        s.add_argument("--config", required=True)
        s.add_argument("--seeds", type=_seeds, help="comma-separated, overrides the config")
        s.add_argument("--out", help="output root, overrides the config")
        s.add_argument("--workers", type=int, default=1, help="seeds trained in parallel")
        if name == "sweep":
            s.add_argument("--grid", required=True, help='JSON file {"lr": [...], "weight_decay": [...]}')
        s.set_defaults(func=fn)

    s = sub.add_parser("gen-data", help="generate and save a synthetic pool")
    s.add_argument("--spec", required=True, help="JSON data spec (sigmas, dim, taxonomy, sizes, test_size)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("infer-hierarchy", help="majority parent map from paired labels")
    s.add_argument("--pairs", required=True, help="lines '<old> <new> [<weight>]'")
    s.add_argument("--out", required=True, help="taxonomy file to write")
    s.add_argument("--num-old", type=int)
    s.add_argument("--num-new", type=int)
    s.set_defaults(func=cmd_infer_hierarchy)

    s = sub.add_parser("report", help="render a results table")
    s.add_argument("--in", dest="inp", required=True, help="results file or run directory")
    s.add_argument("--format", choices=harness.REPORT_FORMATS, default="text")
    s.add_argument("--output", help="write here instead of stdout")
    s.add_argument("--percent", action="store_true", help="scale mAcc to percent in text tables")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        info = args.func(args)
    except harness.ConfigError as exc:
        _error("config", exc)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        _error("io", exc)
        return 3
    except (ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        _error(type(exc).__name__, exc)
        return 1
    if info:
        print(json.dumps({"status": "ok", "command": args.command, **info}, default=str), file=sys.stderr)
    return 0


def _error(kind: str, exc: BaseException) -> None:
    print(json.dumps({"status": "error", "kind": kind, "message": str(exc)}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
