"""Command-line entry point: ``gatedwindow <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or contract error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from . import __version__, checks, pipeline, storage, transport
from .cells import ContractError
from .config import StudyConfig, load_config, preset
from .stable_noise import StableDomainError
from .training import ConfigError, TrainingError

log = logging.getLogger("gatedwindow")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("gen", "train", "diagnose", "window", "plot", "verify", "run")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gatedwindow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="study config (JSON) or preset name: desk, full")
    common.add_argument("--out", help="output directory (default: config output_dir or ./study)")
    common.add_argument("--seed", type=_u64, help="override the master seed")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--order", choices=transport.ORDERS, help="transport order for diagnostics")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate training and diagnostic datasets",
        "train": "train one model per cell kind",
        "diagnose": "effective rates, matched statistic, noise fits, time scales",
        "window": "learnability windows and the study report",
        "plot": "SVG figures from report.json",
        "verify": "run the property suites",
        "run": "gen, train, diagnose, window and plot in one go",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "plot":
            sp.add_argument("--report", help="report.json (default: <out>/report.json)")
    return p


def _config(args) -> StudyConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = preset(args.config) if args.config in ("desk", "full") and not Path(args.config).exists() \
        else load_config(args.config)
    return cfg.with_overrides(seed=args.seed, order=args.order) if (args.seed is not None or args.order) else cfg


def _out(args, cfg: StudyConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path("study")


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _report(status: pipeline.StageStatus, what: str) -> int:
    for kind, ok in status.ok.items():
        if not ok:
            print(f"{what} {kind}: {status.messages[kind]}", file=sys.stderr)
        elif status.messages.get(kind):
            print(f"{what} {kind}: warning: {status.messages[kind]}", file=sys.stderr)
    return EXIT_OK if status.all_ok else EXIT_RUNTIME


def _dispatch(args) -> int:
    if args.command == "verify":
        results = checks.run_property_suite()
        for r in results:
            print(r.line())
        return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME
    if args.command == "plot":
        cfg = None
        if args.config:
            cfg = _config(args)
        out = _out(args, cfg)
        report_path = Path(args.report) if args.report else out / "report.json"
        try:
            report = storage.read_json(report_path)
        except (OSError, ValueError) as exc:
            raise pipeline.ReportError(f"cannot read report {report_path}: {exc}") from None
        files = pipeline.stage_plot(report, out / "plots")
        print(f"wrote {len(files)} SVG files to {out / 'plots'}")
        return EXIT_OK
    cfg = _config(args)
    out = _out(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "gen":
        files = pipeline.stage_gen(cfg, out)
        print("wrote " + ", ".join(str(p) for p in files.values()))
        return EXIT_OK
    if args.command == "train":
        return _report(pipeline.stage_train(cfg, out), "train")
    if args.command == "diagnose":
        return _report(pipeline.stage_diagnose(cfg, out), "diagnose")
    if args.command == "window":
        report = pipeline.stage_window(cfg, out)
        for tag, rep in report["kinds"].items():
            w = rep["window"]
            if not w["available"]:
                print(f"window {tag}: unavailable ({w['reason']})", file=sys.stderr)
        print(f"wrote {out / 'window.csv'} and {out / 'report.json'}")
        return EXIT_OK
    # run
    pipeline.stage_gen(cfg, out)
    code = _report(pipeline.stage_train(cfg, out), "train")
    code = max(code, _report(pipeline.stage_diagnose(cfg, out), "diagnose"))
    report = pipeline.stage_window(cfg, out)
    pipeline.stage_plot(report, out / "plots")
    print(f"study written to {out}")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return _dispatch(args)
    except (ConfigError, ContractError, pipeline.ReportError, storage.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.StageError, TrainingError, StableDomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
