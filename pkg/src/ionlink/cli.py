"""Command-line front end.

Exit codes: 0 success, 1 acceptance failure, 2 usage, config or input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .budget import load_budget
from .config import ConfigError, load_config
from .fit import FitError, fit_conversion_curve
from .pipeline import (RunManifest, Stopwatch, analyze, file_digest, load_analysis_config,
                       write_outputs)
from .qtt import QttFormatError
from .reproduce import SCENARIOS, reproduce
from .sim import simulate

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _manifest_path(output: Path) -> Path:
    return output.with_name(output.name + ".manifest.json")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.duration_s is not None:
        changes["duration_s"] = args.duration_s
    cfg = cfg.with_overrides(**changes).validate()
    out = Path(args.output)
    with Stopwatch() as sw:
        with open(out, "wb") as fh:
            n = simulate(cfg, fh)
    manifest = RunManifest("simulate", str(args.config), cfg.digest().hex(), cfg.seed,
                           [str(out)], wall_clock_s=sw.elapsed)
    manifest.write(_manifest_path(out))
    print(f"wrote {out} ({n} bytes, {cfg.n_cycles} cycles, seed {cfg.seed})")
    return EXIT_OK


def cmd_analyze(args) -> int:
    acfg = load_analysis_config(args.config)
    if args.n_max is not None:
        acfg.n_max = args.n_max
    if args.block_s is not None:
        acfg.block_s = args.block_s
    acfg.validate()
    out_root = Path(args.output)
    digest = hashlib.sha256(json.dumps(_jsonable(vars(acfg)), sort_keys=True).encode()).hexdigest()
    outputs, inputs = [], {}
    with Stopwatch() as sw:
        for path in args.inputs:
            path = Path(path)
            if not path.is_file():
                raise UsageError(f"no such input file: {path}")
            report = analyze(path, acfg)
            out_dir = out_root / path.stem if len(args.inputs) > 1 else out_root
            outputs += [str(p) for p in write_outputs(report, out_dir)]
            inputs[str(path)] = file_digest(path)
            for corr in report.correlations:
                z = "undefined" if corr.z is None else f"{corr.z:.3f}"
                print(f"{path.name}: ch{corr.channel_a}-ch{corr.channel_b} G(0)={corr.g0} "
                      f"theory {corr.theory_zero:.2f}, mean G(n!=0)={corr.mean_nonzero:.2f} "
                      f"theory {corr.theory_nonzero:.2f}, z={z}")
            for ch, value in sorted(report.snr.items()):
                print(f"{path.name}: ch{ch} SNR {'undefined' if value is None else f'{value:.4g}'}")
    manifest = RunManifest("analyze", args.config, digest, None, outputs, inputs, wall_clock_s=sw.elapsed)
    manifest.write(out_root / "manifest.json")
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def read_fit_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Columns: pump power (mW), efficiency and optionally sigma; one header row."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    if data.shape[1] not in (2, 3):
        raise UsageError(f"{path}: expected 2 or 3 columns, found {data.shape[1]}")
    sigma = data[:, 2] if data.shape[1] == 3 else None
    return data[:, 0], data[:, 1], sigma


def cmd_fit(args) -> int:
    power, eff, sigma = read_fit_csv(args.data)
    with Stopwatch() as sw:
        result = fit_conversion_curve(power, eff, sigma)
    lines = [row.format() for row in result.report()]
    lines += [f"residual\t{p:.6g}\t{r:.6g}" for p, r in zip(power.tolist(), result.residuals.tolist())]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.output:
        out = Path(args.output)
        out.write_text(text)
        RunManifest("fit", str(args.data), file_digest(args.data), None, [str(out)],
                    wall_clock_s=sw.elapsed).write(_manifest_path(out))
    return EXIT_OK


def cmd_budget(args) -> int:
    budget = load_budget(args.config)
    lines = []
    for title, rows in budget.report():
        lines.append(f"# {title}")
        lines += [row.format() for row in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.output:
        out = Path(args.output)
        out.write_text(text)
        RunManifest("budget", args.config, None, None, [str(out)]).write(_manifest_path(out))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}")
    with Stopwatch() as sw:
        result = reproduce(args.scenario, args.duration_s, args.seed, args.output)
    print(result.table())
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        table = out / f"{args.scenario}_checks.txt"
        table.write_text(result.table() + "\n")
        RunManifest("reproduce", args.scenario, result.config_digest, result.seed,
                    [str(p) for p in result.outputs] + [str(table)],
                    wall_clock_s=sw.elapsed).write(out / f"{args.scenario}_manifest.json")
    print("PASS" if result.passed else "FAIL")
    return EXIT_OK if result.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ionlink", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a run and write a .qtt file")
    p.add_argument("--config", required=True, help="experiment TOML file or preset name")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--output", "-o", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="gate, correlate and summarize .qtt files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--config", help="analysis TOML file (defaults apply when omitted)")
    p.add_argument("--output", "-o", required=True, help="output directory")
    p.add_argument("--n-max", type=int)
    p.add_argument("--block-s", type=float)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", help="fit a conversion-efficiency curve from CSV")
    p.add_argument("data", help="CSV with power_mW, efficiency[, sigma]")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("budget", help="print an efficiency budget breakdown")
    p.add_argument("--config", default="paper-budget", help="budget TOML file or preset name")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("reproduce", help="run a named scenario and its checks")
    p.add_argument("scenario", help=", ".join(SCENARIOS))
    p.add_argument("--seed", type=int)
    p.add_argument("--duration-s", type=float)
    p.add_argument("--output", "-o", help="directory for CSV outputs and the check table")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc.key}: {exc.reason}", file=sys.stderr)
    except QttFormatError as exc:
        print(f"input error: {exc}", file=sys.stderr)
    except (UsageError, FitError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
