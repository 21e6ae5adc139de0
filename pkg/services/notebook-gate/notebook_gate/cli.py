"""
notebook-gate command line.

    notebook-gate serve [--config gateway.json]
    notebook-gate check-config [gateway.json]
    notebook-gate hash-password [--algorithm sha256]
    notebook-gate mock-upstream [--listen 127.0.0.1:8888] [--latency 0.01]
    notebook-gate bench --target URL --connections 50,100 (--requests N | --duration S) [...]
    notebook-gate report A.csv B.csv [--label-a A] [--label-b B] [--output comparison.csv]

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import getpass
import logging
import os
import secrets
import signal
import sys
import threading
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from notebook_gate.bench import LoadSpec, run_sweep, write_csv_atomic, write_results_csv, write_samples_csv
from notebook_gate.config import CONFIG_ENV_VAR, GatewayConfig, load_config
from notebook_gate.errors import GateError, StartupError, loc_to_path
from notebook_gate.gateway import serve
from notebook_gate.mock_kernel import mock_kernel_serve
from notebook_gate.report import StackRun, compare_report
from notebook_gate.resources import DEFAULT_INTERVAL, ResourceSampler
from notebook_gate.security import DIGEST_HEX_LENGTH, hash_password
from notebook_gate.server import ServerHandle

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV_VAR = "NOTEBOOK_GATE_LOG_LEVEL"
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class GateArgumentParser(argparse.ArgumentParser):
    """Usage errors exit 1 (argparse's default is 2, which we reserve for runtime failures)."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _levels(value: str) -> list[int]:
    try:
        levels = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{value}' is not a comma-separated list of integers")
    if not levels or any(level < 1 for level in levels):
        raise argparse.ArgumentTypeError("connection levels must be positive integers")
    return levels


def _labelled_pid(value: str) -> tuple[str, int]:
    label, sep, pid = value.partition("=")
    if not sep or not label or not pid.isdigit():
        raise argparse.ArgumentTypeError(f"'{value}' must have the form label=pid")
    return label, int(pid)


def _config_path(args: argparse.Namespace) -> Path | None:
    value = args.config or os.environ.get(CONFIG_ENV_VAR)
    return Path(value) if value else None


def _load(args: argparse.Namespace) -> GatewayConfig:
    path = _config_path(args)
    if path is None:
        raise GateError(f"no config file given and {CONFIG_ENV_VAR} is not set")
    return load_config(path)


def _run_until_interrupted(handle: ServerHandle) -> None:
    stop = threading.Event()

    def _request_stop(signum, frame):
        logger.info(f"[SERVE] Received {signal.Signals(signum).name}, draining")
        stop.set()

    signal.signal(signal.SIGINT, _request_stop)
    signal.signal(signal.SIGTERM, _request_stop)
    try:
        while not stop.wait(0.5):
            if not handle.thread.is_alive():
                raise StartupError(f"server on {handle.url} exited unexpectedly")
    finally:
        handle.shutdown()


# ═══════════════════════════════════════════════════════════
# Subcommands
# ═══════════════════════════════════════════════════════════

def cmd_serve(args: argparse.Namespace) -> int:
    cfg = _load(args)
    _run_until_interrupted(serve(cfg))
    return EXIT_OK


def cmd_check_config(args: argparse.Namespace) -> int:
    cfg = _load(args)
    logger.info(f"Config OK: listen={cfg.listen_address} upstream={cfg.upstream} notebook={cfg.notebook_path}")
    return EXIT_OK


def cmd_hash_password(args: argparse.Namespace) -> int:
    password = getpass.getpass("Enter password: ")
    if getpass.getpass("Verify password: ") != password:
        print("[ERROR] Passwords do not match", file=sys.stderr)
        return EXIT_FAILURE
    print(hash_password(password, secrets.token_hex(6), args.algorithm))
    return EXIT_OK


def cmd_mock_upstream(args: argparse.Namespace) -> int:
    _run_until_interrupted(mock_kernel_serve(args.listen, args.latency))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    spec = LoadSpec(
        target_url=args.target,
        connections=args.connections[0],
        duration=args.duration,
        total_requests=args.requests,
        warmup=args.warmup,
        repetitions=args.repetitions,
        ca_cert=args.ca_cert,
        insecure=args.insecure,
    )
    sampler = ResourceSampler(dict(args.pid), interval=args.interval) if args.pid else None
    sweep = run_sweep(args.connections, spec, sampler)

    write_results_csv(sweep, args.output)
    logger.info(f"[BENCH] Wrote {args.output}")
    if sampler is not None and args.samples_output:
        write_samples_csv(sampler.samples, args.samples_output)
        logger.info(f"[BENCH] Wrote {args.samples_output}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    a = StackRun.from_csv(args.label_a, args.results_a, args.samples_a)
    b = StackRun.from_csv(args.label_b, args.results_b, args.samples_b)
    report = compare_report(a, b)
    print(report.render(), end="")
    if args.output:
        report.to_csv(args.output)
    if args.cpu_output and report.cpu_series is not None:
        write_csv_atomic(report.cpu_series, args.cpu_output)
    return EXIT_OK


# ═══════════════════════════════════════════════════════════
# Parser
# ═══════════════════════════════════════════════════════════

def build_parser() -> GateArgumentParser:
    parser = GateArgumentParser(prog="notebook-gate", description="Embed, secure and reverse-proxy a Jupyter notebook")
    parser.add_argument(
        "--log-level",
        default=os.environ.get(LOG_LEVEL_ENV_VAR, "INFO"),
        type=str.upper,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help=f"Log level (default: ${LOG_LEVEL_ENV_VAR} or INFO)",
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = commands.add_parser("serve", help="Run the gateway until interrupted")
    p.add_argument("--config", help=f"Gateway config JSON (default: ${CONFIG_ENV_VAR})")
    p.set_defaults(handler=cmd_serve)

    p = commands.add_parser("check-config", help="Validate a gateway config and exit")
    p.add_argument("config", nargs="?", help=f"Gateway config JSON (default: ${CONFIG_ENV_VAR})")
    p.set_defaults(handler=cmd_check_config)

    p = commands.add_parser("hash-password", help="Prompt for a password and print algorithm:salt:digest")
    p.add_argument("--algorithm", default="sha256", choices=sorted(DIGEST_HEX_LENGTH))
    p.set_defaults(handler=cmd_hash_password)

    p = commands.add_parser("mock-upstream", help="Run the mock notebook server and kernel")
    p.add_argument("--listen", default="127.0.0.1:8888", help="host:port (default: 127.0.0.1:8888)")
    p.add_argument("--latency", type=float, default=0.0, help="Artificial per-request latency in seconds")
    p.set_defaults(handler=cmd_mock_upstream)

    p = commands.add_parser("bench", help="Closed-loop latency/throughput sweep, written as CSV")
    p.add_argument("--target", required=True, help="URL every request is sent to")
    p.add_argument("--connections", type=_levels, required=True, help="Comma list, e.g. 50,100,250")
    stop = p.add_mutually_exclusive_group(required=True)
    stop.add_argument("--requests", type=int, help="Measured requests per repetition")
    stop.add_argument("--duration", type=float, help="Measured seconds per repetition")
    p.add_argument("--warmup", type=float, default=3.0, help="Warmup seconds excluded from results (default: 3)")
    p.add_argument("--repetitions", type=int, default=3, help="Runs per level; the median is reported (default: 3)")
    p.add_argument("--pid", type=_labelled_pid, action="append", default=[], help="label=pid to sample (repeatable)")
    p.add_argument("--interval", type=float, default=DEFAULT_INTERVAL, help="Resource sampling interval in seconds")
    p.add_argument("--output", default="bench.csv", help="Results CSV (default: bench.csv)")
    p.add_argument("--samples-output", help="Resource samples CSV")
    p.add_argument("--ca-cert", type=Path, help="CA bundle for an HTTPS target")
    p.add_argument("--insecure", action="store_true", help="Skip TLS verification")
    p.set_defaults(handler=cmd_bench)

    p = commands.add_parser("report", help="Compare two bench CSVs")
    p.add_argument("results_a", help="Results CSV of stack A (the baseline)")
    p.add_argument("results_b", help="Results CSV of stack B")
    p.add_argument("--label-a", default="A")
    p.add_argument("--label-b", default="B")
    p.add_argument("--samples-a", help="Resource samples CSV of stack A")
    p.add_argument("--samples-b", help="Resource samples CSV of stack B")
    p.add_argument("--output", help="Comparison CSV")
    p.add_argument("--cpu-output", help="CPU time-series CSV")
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    for noisy in ("httpx", "httpcore", "websockets"):
        logging.getLogger(noisy).setLevel(logging.WARNING)

    try:
        return args.handler(args)
    except ValidationError as e:
        first = e.errors()[0]
        parser.error(f"{loc_to_path(first['loc'])}: {first['msg']}")
    except GateError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
