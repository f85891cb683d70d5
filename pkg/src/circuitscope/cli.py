"""``circuitscope`` command line.

Exit codes: 0 success, 2 config or usage error, 3 stage failure, 4 verification
failure. Failures print one ``circuitscope: error: code=<n> stage=<s> message=<m>``
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .pipeline import STAGES, StageError, Workspace, analyze_trace, clean_json, run_pipeline, run_stage
from .report import VerificationError, verify

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_VERIFY = 0, 2, 3, 4


def _error(code: int, stage: str, message: str) -> int:
    message = " ".join(str(message).split())
    print(f"circuitscope: error: code={code} stage={stage} message={json.dumps(message)}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides config and $CIRCUITSCOPE_OUT)")
    common.add_argument("--resume", action="store_true", help="skip stages already completed with this config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="circuitscope", description="two-arm circuit analysis of small diffusion models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES[:-1]:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name == "analyze":
            p.add_argument("--trace", type=Path, help="analyze an existing DTRC trace file instead of the pipeline's")
            p.add_argument("--json", type=Path, help="where to write the analysis of --trace (default stdout)")
    sub.add_parser("run-all", parents=[common], help="run every stage in order")
    p = sub.add_parser("report", parents=[common], help="assemble report.json and tables")
    p.add_argument("--verify", action="store_true", help="recompute three random report numbers from the traces")
    return parser


def _analyze_external(args, cfg: ExperimentConfig) -> int:
    from .trace import TraceFormatError, read_trace

    try:
        trace = read_trace(args.trace)
    except (OSError, TraceFormatError) as exc:
        return _error(EXIT_STAGE, "analyze", f"{type(exc).__name__}: {exc}")
    a = cfg.section("analysis")
    result = clean_json(analyze_trace(trace, "", int(a["bins"]), bool(a["per_row_entropy"]), float(a["sparsity_eps"])))
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.json:
        args.json.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        code = exc.code if isinstance(exc.code, int) else EXIT_CONFIG
        return EXIT_OK if code == 0 else _error(EXIT_CONFIG, "cli", "invalid command line")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = ExperimentConfig.load(args.config, seed=args.seed, out=args.out)
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", str(exc))

    cmd = args.command
    try:
        if cmd == "analyze" and args.trace is not None:
            return _analyze_external(args, cfg)
        if cmd == "run-all":
            run_pipeline(cfg, resume=args.resume)
        else:
            ws = Workspace(cfg.output_dir)
            ws.root.mkdir(parents=True, exist_ok=True)
            checking = cmd == "report" and args.verify
            if not (checking and ws.report.exists()):
                # --verify checks the report already on disk rather than a fresh rebuild
                run_stage(cmd, cfg, ws, resume=args.resume)
            if checking:
                for item in verify(cfg.output_dir, seed=cfg.seed):
                    print(f"verified {item['item']}: {item['stored']!r}")
    except StageError as exc:
        return _error(EXIT_STAGE, exc.stage, str(exc))
    except VerificationError as exc:
        return _error(EXIT_VERIFY, "report", str(exc))
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", str(exc))
    except (OSError, ValueError, KeyError) as exc:
        return _error(EXIT_VERIFY if cmd == "report" else EXIT_STAGE, cmd, f"{type(exc).__name__}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
