"""``ostta`` command line: run, sweep, gradcheck, dump-synth, serve.

Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, DimensionMismatch, FormatError, SeparationInfeasible
from .experiment import (
    KEYS,
    SWEEP_AXES,
    check_output_dir,
    load_config,
    parse_sweep_values,
    run_experiment,
    scenario_prototypes,
    summary_line,
    sweep,
    sweep_csv,
    write_run_outputs,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="flat key = value config file")
    for key, (_, default, help_text) in KEYS.items():
        shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
        p.add_argument(
            "--" + key.replace("_", "-"),
            dest=key,
            metavar="VALUE",
            default=None,
            help=f"{help_text} (default: {shown})",
        )


def _config_from(args: argparse.Namespace):
    overrides = {k: getattr(args, k) for k in KEYS}
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    # argparse exits with 2 on usage errors, which matches the config-error code
    parser = argparse.ArgumentParser(prog="ostta", description="Open-set single-image test-time adaptation on embedding streams.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log failed steps and progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and write steps.csv, summary.json, hist.csv")
    _add_config_flags(p)
    p.add_argument("--out", default=".", help="existing output directory (default: .)")

    p = sub.add_parser("sweep", help="one run per value of a single axis; writes sweep.csv")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    p.add_argument("--out", default=".", help="existing output directory (default: .)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    # test hook: corrupt analytic gradients so the detector must fail
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)

    p = sub.add_parser("dump-synth", help="write a synthetic scenario as an EMB1 file")
    _add_config_flags(p)
    p.add_argument("--output", required=True, help="destination .emb1 path")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def cmd_run(args) -> int:
    config = _config_from(args)
    out = check_output_dir(args.out)
    result = run_experiment(config)
    write_run_outputs(out, config, result)
    print(summary_line(config, result))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _config_from(args)
    values = parse_sweep_values(args.axis, args.values)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out = check_output_dir(args.out)
    rows = sweep(config, args.axis, values, args.jobs)
    (out / "sweep.csv").write_text(sweep_csv(args.axis, rows))
    for value, summary, _ in rows:
        hm = summary.hm if summary else None
        print(f"{args.axis}={value} hm={'NA' if hm is None else format(hm, '.4f')}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    report = run_gradcheck(args.seed, args.trials, args.perturb)
    for name, err in report.max_errors().items():
        flag = "ok" if err <= report.tolerance else "FAIL"
        print(f"{name:<22s} max_rel_err={err:.3e} {flag}")
    print(f"gradcheck {'passed' if report.passed else 'FAILED'} ({report.trials} trials, tol {report.tolerance:g})")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_dump_synth(args) -> int:
    from .stream import synth_stream, write_embedding_dump

    config = _config_from(args)
    if config.input is not None:
        raise ConfigError("dump-synth synthesises a scenario; --input does not apply")
    target = Path(args.output)
    check_output_dir(target.parent if str(target.parent) else ".")
    prototypes = scenario_prototypes(config.scenario)
    samples = synth_stream(config.scenario, prototypes)
    write_embedding_dump(target, prototypes, samples)
    print(f"wrote {len(samples)} samples (dim {prototypes.dim}, {prototypes.num_classes} classes) to {target}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "dump-synth": cmd_dump_synth,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, FormatError, DimensionMismatch) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SeparationInfeasible, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
