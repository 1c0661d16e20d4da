"""``flexp-sfl`` command line: run, sweep, verify, gen-data, print-config-reference.

Exit codes: 0 success, 1 invalid config or input, 2 runtime or I/O failure,
3 a verification oracle failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import SWEEP_PARAMS, config_reference, load_config, parse_config, to_experiment
from .data import export_csv, generate_federation
from .errors import ConfigError, FlexpError, InputError

log = logging.getLogger("flexp_sfl")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _seeds(args, cfg) -> list[int]:
    return list(args.seed) if args.seed else list(cfg.seeds)


def _out(args, cfg) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir)


def cmd_run(args) -> int:
    from .experiment import run_all_seeds

    cfg = load_config(args.config)
    seeds, out = _seeds(args, cfg), _out(args, cfg)
    for d in run_all_seeds(cfg, seeds, out):
        log.info("wrote %s", d)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import sweep, write_sweep

    cfg = load_config(args.config)
    out = _out(args, cfg)
    rows = sweep(cfg, args.param, args.values, _seeds(args, cfg), jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{args.param}.csv"
    write_sweep(rows, path)
    for r in rows:
        print(f"{args.param}={r['value']:g}  personalized {r['personalized_acc_mean']:.4f}"
              f"±{r['personalized_acc_std']:.4f}  global {r['global_acc_mean']:.4f}"
              f"  sim {r['total_sim_s_mean']:.1f}s")
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config) if args.config else parse_config({})
    spec = to_experiment(cfg).federation
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    for s in _seeds(args, cfg):
        path = out / f"shards_seed_{s}.csv"
        export_csv(generate_federation(spec, s), path)
        log.info("wrote %s", path)
    return EXIT_OK


def cmd_reference(args) -> int:
    print(config_reference())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which here means a runtime failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flexp-sfl", description="Desk-scale flexible split federated learning.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML or JSON experiment config")
        sp.add_argument("--seed", type=int, action="append", help="seed to run (repeatable); default: config seeds")
        sp.add_argument("--out", help="output directory; default: config output_dir")

    run = sub.add_parser("run", help="run one experiment per seed and write CSV metrics")
    common(run)
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="sweep one parameter and write mean/std per value")
    common(sw)
    sw.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sw.add_argument("--values", required=True, type=_values, help="comma-separated values, e.g. 0,0.25,0.5")
    sw.add_argument("--jobs", type=int, default=1, help="worker processes")
    sw.set_defaults(func=cmd_sweep)

    ver = sub.add_parser("verify", help="run the oracle checks")
    ver.set_defaults(func=cmd_verify)

    gen = sub.add_parser("gen-data", help="export the synthetic federation shards as CSV")
    common(gen, config_required=False)
    gen.set_defaults(func=cmd_gen_data)

    ref = sub.add_parser("print-config-reference", help="print every config key with type and default")
    ref.set_defaults(func=cmd_reference)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, RuntimeError, ArithmeticError, FlexpError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
