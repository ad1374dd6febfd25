"""Command-line runner.

Exit codes: 0 success, 2 usage error, 3 numerical instability, 4 failed
acceptance check.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from . import qg as qgm
from .calibrate import TrainingFailed
from .suites import THEORY_SUITES, run_suite

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INSTABILITY = 3
EXIT_ACCEPTANCE = 4


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="closurelab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="TOML file overriding the defaults")
        p.add_argument("--seed", type=_u64, help="overrides the config seed")
        p.add_argument("--out", type=Path, required=out_required, help="output directory")
        p.add_argument("--resume", action="store_true", help="reuse completed outputs in --out")

    p = sub.add_parser("generate", help="spin up the fine model and write coarse snapshots")
    common(p)

    p = sub.add_parser("train", help="fit a closure on a dataset")
    common(p)
    p.add_argument("--dataset", type=Path, required=True)

    p = sub.add_parser("evaluate", help="score curves, spectra, spectrum errors and long runs")
    common(p)
    p.add_argument("--checkpoint", type=Path, action="append", default=[], help="closure file; repeatable")
    p.add_argument("--dataset", type=Path, required=True, help="validation dataset")
    p.add_argument("--train-dataset", type=Path, help="training dataset, checked for seed collisions")

    p = sub.add_parser("theory", help="run a theory-lab acceptance suite")
    common(p, out_required=False)
    p.add_argument("suite", help=f"one of {sorted(THEORY_SUITES)}")

    p = sub.add_parser("plot", help="render CSV outputs of evaluate to PNG files")
    p.add_argument("--out", type=Path, required=True, help="directory holding evaluate outputs")
    p.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=_u64, help=argparse.SUPPRESS)
    p.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    return ap


def _cfg(args) -> dict:
    cfg = ex.load_config(args.config)
    if args.seed is not None:
        cfg = ex.merge(cfg, {"seed": args.seed})
    return cfg


def cmd_generate(args) -> int:
    man = ex.generate(_cfg(args), args.out, resume=args.resume)
    print(f"wrote {man['n_snapshots']} snapshots to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    man = ex.train(_cfg(args), args.dataset, args.out, resume=args.resume)
    print(f"wrote closure to {args.out / 'closure.cgcl'} (phase losses {man['phase_loss']})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ev = ex.evaluate(_cfg(args), args.checkpoint, args.dataset, args.out, train_dataset=args.train_dataset)
    for k, v in ev.rows():
        print(f"{k} {v}")
    return EXIT_OK


def cmd_theory(args) -> int:
    if args.suite not in THEORY_SUITES:
        print(f"unknown suite {args.suite!r}; choose from {sorted(THEORY_SUITES)}", file=sys.stderr)
        return EXIT_USAGE
    seed = _cfg(args)["seed"]
    results = run_suite(args.suite, seed)
    for r in results:
        print(r.line())
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / f"{r.name}.txt").write_text(r.report())
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    def read(path):
        rows = [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]
        return np.loadtxt(rows[1:], delimiter=",", ndmin=2)

    spectra = sorted(args.out.glob("spectrum_*.csv"))
    curves = sorted(args.out.glob("score_*.csv"))
    if not spectra and not curves:
        print(f"no evaluate outputs in {args.out}", file=sys.stderr)
        return EXIT_USAGE
    if spectra:
        fig, ax = plt.subplots(figsize=(5, 4))
        for path in spectra:
            d = read(path)
            pos = d[:, 1] > 0
            ax.loglog(d[pos, 0], d[pos, 1], label=path.stem.removeprefix("spectrum_"))
        ax.set_xlabel("wavenumber (rad/m)")
        ax.set_ylabel("KE density")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(args.out / "spectra.png", dpi=120)
        plt.close(fig)
    if curves:
        fig, ax = plt.subplots(figsize=(5, 4))
        for path in curves:
            d = read(path)
            ax.plot(d[:, 1], d[:, 2], label=path.stem.removeprefix("score_"))
        ax.set_xlabel("lead time (h)")
        ax.set_ylabel("mean energy score")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(args.out / "scores.png", dpi=120)
        plt.close(fig)
    print(f"wrote plots to {args.out}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "theory": cmd_theory,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (qgm.InstabilityDetected, TrainingFailed) as e:
        print(f"instability: {e}", file=sys.stderr)
        return EXIT_INSTABILITY
    except (ex.SeedCollision, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
