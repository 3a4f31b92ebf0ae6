"""Command-line front end: ``coofdm-sco {run,sweep-osnr,sweep-sco,phase-profile}``.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 an estimate was
flagged unreliable (results are still written).
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, ParameterError
from .harness import (PARAMETERS, SweepSpec, emit_phase_profile, format_sweep_csv, resolve_params,
                      run_single, sweep)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_UNRELIABLE = 3

UNRELIABLE_PREFIXES = ("unreliable", "out_of_range")


def parse_overrides(items) -> dict:
    """Turn ``KEY=VALUE`` strings into typed overrides using the config parsers."""
    out = {}
    for text in items:
        if "=" not in text:
            raise ConfigError(f"expected KEY=VALUE, got {text!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if key not in PARAMETERS:
            raise ConfigError(f"unknown key {key!r}", key=key)
        try:
            out[key] = PARAMETERS[key][1](value)
        except ValueError:
            raise ConfigError(f"type mismatch for {key!r}: got {value!r}", key=key) from None
    return out


def _float_list(text):
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coofdm-sco",
                                     description="Dual-pol CO-OFDM SCO estimation and compensation simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value parameter file (defaults are built in)")
    common.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    common.add_argument("--seeds", type=int, default=1, help="number of seeds per point (default 1)")
    common.add_argument("--out", help="output CSV path (stdout when omitted for sweeps)")
    common.add_argument("--no-timestamp", action="store_true", help="omit the timestamp header line")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a single parameter (repeatable)")

    sub.add_parser("run", parents=[common], help="single end-to-end run")
    for name, var in (("sweep-osnr", "OSNR values in dB"), ("sweep-sco", "SCO values in ppm")):
        sp = sub.add_parser(name, parents=[common], help=f"sweep over {var}")
        sp.add_argument("--values", type=_float_list, help=f"{var}, comma separated; write --values=-200,0 when the list starts with a minus sign")
        sp.add_argument("--workers", type=int, help="worker processes (default from config)")
    pp = sub.add_parser("phase-profile", parents=[common], help="per-symbol SCO phase versus subcarrier")
    pp.add_argument("--symbols", type=int, default=7, help="number of leading symbols (default 7)")
    return parser


def _unreliable(flags) -> bool:
    return any(f.startswith(UNRELIABLE_PREFIXES) for f in flags)


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _cmd_run(args, params):
    results = []
    for i in range(args.seeds):
        seed = args.seed + i
        r = run_single(params, seed=seed)
        results.append((0.0, seed, r))
        print(f"seed={seed} ber={r.ber:.6g} bit_errors={r.bit_errors} bits_counted={r.bits_counted} "
              f"evm_db={r.evm_db:.3f} gamma_true={r.gamma_true:.6g} gamma_hat={r.gamma_hat:.6g} "
              f"rel_err={r.rel_err:.6g} flags={';'.join(r.flags) or '-'}")
    if args.out is not None:
        _emit(format_sweep_csv("run", results, timestamp=not args.no_timestamp), args.out)
    return results


def _cmd_sweep(args, params, variable):
    key = "sweep_osnr_db" if variable == "osnr_db" else "sweep_sco_ppm"
    values = args.values if args.values is not None else params[key]
    workers = args.workers if args.workers is not None else params["workers"]
    spec = SweepSpec(variable, tuple(values), fixed=params, seeds=args.seeds, base_seed=args.seed)
    results, text = sweep(spec, None, timestamp=not args.no_timestamp, workers=workers)
    _emit(text, args.out)
    return results


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seeds < 1:
            raise ParameterError("--seeds must be >= 1")
        params = resolve_params(args.config, **parse_overrides(args.overrides))
        if args.command == "run":
            results = _cmd_run(args, params)
        elif args.command == "sweep-osnr":
            results = _cmd_sweep(args, params, "osnr_db")
        elif args.command == "sweep-sco":
            results = _cmd_sweep(args, params, "sco_ppm")
        else:
            text = emit_phase_profile(params, args.symbols, None, seed=args.seed,
                                      timestamp=not args.no_timestamp)
            _emit(text, args.out)
            results = []
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if any(_unreliable(r.flags) for _, _, r in results):
        print("warning: at least one SCO estimate was flagged unreliable", file=sys.stderr)
        return EXIT_UNRELIABLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
