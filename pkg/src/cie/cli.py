"""Command-line entry point: ``cie <subcommand> [flags]``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import BASELINES, load_config
from .errors import DivergenceError, InvalidInputError, NumericOverflowError, SchemaError
from .harness import (
    JUDGES,
    SPLITS,
    DataError,
    cmd_eval,
    cmd_gen_data,
    cmd_grid,
    cmd_report,
    cmd_scaling,
    cmd_sweep,
    cmd_train,
    cmd_winrate,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _ints(text):
    return tuple(int(x) for x in text.split(","))


def _floats(text):
    return tuple(float(x) for x in text.split(","))


def _names(text):
    names = tuple(x.strip() for x in text.split(","))
    bad = [n for n in names if n not in BASELINES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown baseline(s) {bad}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cie", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", type=Path, help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        if data:
            sp.add_argument("--data", type=Path, help="dataset directory (default: data_dir from config)")

    sp = sub.add_parser("gen-data", help="write train/val/range/heldout splits")
    common(sp, data=False)
    sp.add_argument("--force", action="store_true")

    sp = sub.add_parser("train", help="train a model and write checkpoint + loss trace")
    common(sp)
    sp.add_argument("--baseline", choices=BASELINES)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from train_state.ckpt in --out")

    for name, helptext in (("eval", "judge generations against targets"), ("sweep", "per-target box stats on range split")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--baseline", choices=BASELINES, help="default: the checkpoint's own")
        if name == "eval":
            sp.add_argument("--split", choices=SPLITS, default="val")

    sp = sub.add_parser("grid", help="epochs x learning-rate grid, scored on val")
    common(sp)
    sp.add_argument("--baseline", choices=BASELINES)
    sp.add_argument("--epochs-list", type=_ints, default=(12, 24), metavar="E1,E2,..")
    sp.add_argument("--lrs", type=_floats, default=(1e-3, 3e-3), metavar="LR1,LR2,..")

    sp = sub.add_parser("scaling", help="train each baseline at each data fraction, score on heldout")
    common(sp)
    sp.add_argument("--fractions", type=_floats, default=(0.25, 0.5, 0.75, 1.0))
    sp.add_argument("--baselines", type=_names, default=("cie", "discrete"))
    sp.add_argument("--split", choices=SPLITS, default="heldout")

    sp = sub.add_parser("winrate", help="pairwise judging with randomized presentation order")
    sp.add_argument("--a", type=Path, required=True, help="judgments JSONL for system A")
    sp.add_argument("--b", type=Path, required=True, help="judgments JSONL for system B")
    sp.add_argument("--judge", choices=sorted(JUDGES), default="heuristic")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("report", help="method x metric tables from metrics CSVs")
    sp.add_argument("--out", type=Path, required=True, help="run directory to scan and write into")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "winrate":
            tally = cmd_winrate(args.a, args.b, JUDGES[args.judge], args.out, args.seed)
            print(f"win={tally['win']} tie={tally['tie']} loss={tally['loss']}")
            return EXIT_OK
        if args.command == "report":
            text, problems = cmd_report(args.out)
            print(text)
            return EXIT_OK
        flags = {"seed": args.seed}
        if args.command in ("train", "grid"):
            flags.update(baseline=args.baseline)
        if args.command == "train":
            flags.update(fraction=args.fraction, epochs=args.epochs)
        cfg = load_config(args.config, **flags)
        if args.command == "gen-data":
            for p in cmd_gen_data(cfg, args.out, force=args.force):
                print(p)
        elif args.command == "train":
            for p in cmd_train(cfg, args.out, args.data, resume=args.resume):
                print(p)
        elif args.command == "eval":
            paths = cmd_eval(cfg, args.checkpoint, args.split, args.out, args.data, args.baseline)
            print(paths[0].read_text(encoding="utf-8"), end="")
        elif args.command == "sweep":
            for method, (summaries, rho) in cmd_sweep(cfg, args.checkpoint, args.out, args.data, args.baseline).items():
                top = summaries[-1]
                print(f"{method}: spearman={rho:.4f} iqr@{top.target:g}={top.iqr:.2f}")
        elif args.command == "grid":
            for row in cmd_grid(cfg, args.out, args.data, args.epochs_list, args.lrs):
                print(" ".join(f"{k}={v}" for k, v in row.items()))
        elif args.command == "scaling":
            for row in cmd_scaling(cfg, args.out, args.data, args.fractions, args.baselines, args.split):
                print(" ".join(f"{k}={v}" for k, v in row.items()))
    except (DivergenceError, NumericOverflowError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SchemaError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except InvalidInputError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
