"""Command line entry point: run, sweep, calibrate, dump-messages."""
from __future__ import annotations

import argparse
import contextlib
import sys

from .calibration import calibrate
from .harness import SpecError, dump_messages, load_config, run, sweep


def _values(text: str) -> list[str]:
    return [v for v in text.replace(",", " ").split() if v]


def _open_out(path):
    return contextlib.nullcontext(sys.stdout) if path in (None, "-") else open(path, "w", encoding="utf-8", newline="")


def cmd_run(args) -> int:
    spec = load_config(args.config)
    result = run(spec, workers=args.workers)
    with _open_out(args.out) as fh:
        result.write_csv(fh)
    for seed, name in result.failed_checks():
        print(f"check failed: {name} (seed {seed})", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_sweep(args) -> int:
    spec = load_config(args.config)
    values = _values(args.values)
    fit = sweep(args.axis, values, spec, workers=args.workers, min_seeds=args.min_seeds)
    with _open_out(args.out) as fh:
        fh.write(fit.to_csv())
    print(f"slope {fit.slope:.3f} (95% CI {fit.ci[0]:.3f}..{fit.ci[1]:.3f})", file=sys.stderr)
    if args.expect:
        lo, hi = (float(x) for x in args.expect.split(":"))
        return 0 if fit.within(lo, hi) else 1
    return 0


def cmd_calibrate(args) -> int:
    report = calibrate(args.out, quick=args.quick)
    print(f"c_A={report['c_A']:.3f} freq_variance_constant={report['freq_variance_constant']:.3f} "
          f"rank_chunk_C={report['rank_chunk_C']:.3f} ok={report['ok']}")
    return 0 if report["ok"] else 1


def cmd_dump(args) -> int:
    spec = load_config(args.config)
    with _open_out(args.out) as fh:
        dump_messages(spec, fh, args.seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="disttrack", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config and write per-probe CSV")
    p.add_argument("config")
    p.add_argument("-o", "--out")
    p.add_argument("-j", "--workers", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one parameter and fit a log-log slope")
    p.add_argument("config")
    p.add_argument("--axis", choices=("k", "eps", "N"), required=True)
    p.add_argument("--values", required=True, help="comma or space separated")
    p.add_argument("--expect", help="required slope window LO:HI")
    p.add_argument("--min-seeds", type=int, default=20)
    p.add_argument("-o", "--out")
    p.add_argument("-j", "--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="run the oracles and write the constants file")
    p.add_argument("-o", "--out", default="constants.json")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("dump-messages", help="write the message log of one seed as CSV")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
