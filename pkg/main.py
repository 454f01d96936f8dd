"""
mwctl: runs the rendezvous store, the demo scenarios and the throughput benchmarks.

Without --role a scenario command launches every role as its own process and
prints the verdict; with --role it plays that single role and writes JSON
records to stdout.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import sentry_sdk
from pydantic import ValidationError

from routers.bench import launch_bench, run_bench
from routers.launcher import EXIT_ENV, Launcher
from routers.rhombus import ROLES as RHOMBUS_ROLES, launch_rhombus, run_rhombus
from routers.scenarios import launch_fault, launch_join, run_fault, run_join
from routers.store import run_store
from schemas.scenario_schema import Scenario, ScenarioSpec, ScenarioVerdict
from utils.config import settings
from utils.logger import logger
from utils.metrics import serve_metrics

COMMANDS_FILE = Path(__file__).resolve().parent / "commands.json"

RoleRunner = Callable[[ScenarioSpec], int]
ScenarioLauncher = Callable[[ScenarioSpec, Launcher], Tuple[int, ScenarioVerdict]]

RUNNERS: Dict[str, Tuple[RoleRunner, ScenarioLauncher]] = {
    "fault": (run_fault, launch_fault),
    "join": (run_join, launch_join),
    "bench": (run_bench, launch_bench),
    "rhombus": (run_rhombus, launch_rhombus),
}

# argparse dest -> (ScenarioSpec field, command-line flag)
SPEC_FIELDS: Dict[str, Tuple[str, str]] = {
    "size": ("message_size", "--size"),
    "count": ("message_count", "--count"),
    "rate": ("rate", "--rate"),
    "kill_after": ("kill_after", "--kill-after"),
    "join_at": ("join_at", "--join-at"),
    "single_world": ("single_world", "--single-world"),
    "senders": ("senders", "--senders"),
    "interval": ("interval", "--interval"),
    "duration": ("duration", "--duration"),
    "repeat": ("repeat", "--repeat"),
    "sizes": ("sizes", "--sizes"),
    "kill": ("kill", "--kill"),
    "recover": ("recover", "--recover"),
    "host": ("listen_host", "--host"),
    "mode": (None, "--mode"),
}


def load_catalog(path: Path = COMMANDS_FILE) -> Dict[str, Dict[str, Any]]:
    """Reads commands.json into {name: entry}."""
    with open(path, encoding="utf-8") as fh:
        return {entry["name"]: entry for entry in json.load(fh)["commands"]}


def _int_list(raw: str) -> List[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}")


def build_parser(catalog: Optional[Dict[str, Dict[str, Any]]] = None) -> argparse.ArgumentParser:
    catalog = catalog if catalog is not None else load_catalog()
    parser = argparse.ArgumentParser(
        prog="mwctl",
        description="Elastic multi-world collective communication: store, scenarios and benchmarks.",
        epilog="examples:\n" + "\n".join(f"  {c['example']}" for c in catalog.values()),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--store", default=settings.MW_STORE_ADDR, help="Rendezvous store address (env MW_STORE_ADDR).")
    common.add_argument("--role", default=None, help="Play one role; omitted, all roles are launched.")
    common.add_argument("--run-id", default="manual", help="Namespace for world names of one run.")
    common.add_argument("--out", default=None, help="Append JSON records to this report file.")
    common.add_argument("--host", default="127.0.0.1", help="Host peers dial for this role's listeners.")
    common.add_argument("--size", type=int, help="Message size in bytes.")
    common.add_argument("--count", type=int, help="Messages per sender.")
    common.add_argument("--rate", type=float, help="Messages per second of the primary sender.")

    store = sub.add_parser("store", help=catalog["store"]["description"])
    store.add_argument("--listen", default=catalog["store"]["defaults"]["listen"], help="Address to bind.")

    fault = sub.add_parser("fault", parents=[common], help=catalog["fault"]["description"])
    fault.add_argument("--kill-after", type=int, help="workerB exits after this many messages.")
    fault.add_argument("--single-world", action="store_true", help="All three processes share one world.")

    join = sub.add_parser("join", parents=[common], help=catalog["join"]["description"])
    join.add_argument("--join-at", type=float, help="Seconds after start at which workerB joins.")
    join.add_argument("--interval", type=int, help="Messages per throughput sample.")
    join.add_argument("--duration", type=float, help="Seconds the senders keep sending.")

    bench = sub.add_parser("bench", parents=[common], help=catalog["bench"]["description"])
    bench.add_argument("--mode", choices=("p2p", "fanin"), help="Point-to-point or fan-in layout.")
    bench.add_argument("--senders", type=int, help="Fan-in senders, 1..3.")
    bench.add_argument("--sizes", type=_int_list, help="Comma-separated message sizes.")
    bench.add_argument("--repeat", type=int, help="Repetitions per size.")
    bench.add_argument("--interval", type=int, help="Messages per throughput sample.")

    rhombus = sub.add_parser("rhombus", parents=[common], help=catalog["rhombus"]["description"])
    rhombus.add_argument("--kill", choices=RHOMBUS_ROLES, help="Stage to kill; --recover needs P2 or P3.")
    rhombus.add_argument("--kill-after", type=int, help="Messages the victim handles before dying.")
    rhombus.add_argument("--recover", action="store_true", help="Replace the victim with P5.")

    for name, command in sub.choices.items():
        defaults = dict(catalog.get(name, {}).get("defaults", {}))
        defaults.pop("listen", None)
        command.set_defaults(**defaults)
    return parser


def resolve_defaults(args: argparse.Namespace) -> argparse.Namespace:
    """Fills scenario-dependent defaults that a flat catalog cannot express."""
    if args.command == "rhombus" and not args.kill:
        args.kill_after = None
    return args


def scenario_of(args: argparse.Namespace) -> Scenario:
    if args.command == "bench":
        return Scenario.BENCH_FANIN if args.mode == "fanin" else Scenario.BENCH_P2P
    return Scenario(args.command)


def spec_from_args(args: argparse.Namespace, role: Optional[str] = None) -> ScenarioSpec:
    """
    Builds the ScenarioSpec a role process (or the launcher) works from.

    Raises:
        ValidationError: If the flags do not make a valid scenario.
    """
    fields: Dict[str, Any] = {
        "scenario": scenario_of(args),
        "role": role or args.role or "launcher",
        "store_addr": args.store,
        "run_id": args.run_id,
    }
    for dest, (field, _flag) in SPEC_FIELDS.items():
        value = getattr(args, dest, None)
        if field is not None and value is not None:
            fields[field] = value
    return ScenarioSpec(**fields)


def passthrough_args(args: argparse.Namespace) -> List[str]:
    """Scenario flags as resolved here, so every role process sees the same values."""
    argv: List[str] = []
    for dest, (_field, flag) in SPEC_FIELDS.items():
        value = getattr(args, dest, None)
        if value is None or value is False:
            continue
        if value is True:
            argv.append(flag)
        elif isinstance(value, list):
            argv += [flag, ",".join(str(v) for v in value)]
        else:
            argv += [flag, str(value)]
    return argv


def bootstrap() -> None:
    """Optional error tracking and metrics, both driven by the environment."""
    if settings.SENTRY_DSN:
        sentry_sdk.init(dsn=settings.SENTRY_DSN, traces_sample_rate=0.0)
        logger.info("Sentry error tracking enabled.")
    if settings.MW_METRICS_PORT:
        try:
            serve_metrics(settings.MW_METRICS_PORT)
        except OSError as e:
            logger.warning(f"Metrics port {settings.MW_METRICS_PORT} unavailable: {e}")


def run_launcher(args: argparse.Namespace, spec: ScenarioSpec) -> int:
    _run_role, launch = RUNNERS[args.command]
    try:
        with Launcher(args.command, passthrough_args(args), args.store, args.out) as launcher:
            code, verdict = launch(spec, launcher)
    except OSError as e:
        logger.error(f"Cannot reach or start the rendezvous store at {args.store}: {e}")
        return EXIT_ENV
    line = verdict.model_dump_json()
    print(line, flush=True)
    if args.out:
        with open(args.out, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    logger.info(f"{spec.scenario.value}: {'PASS' if verdict.passed else 'FAIL'} {verdict.reasons}")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = resolve_defaults(parser.parse_args(argv))
    bootstrap()

    if args.command == "store":
        return run_store(args.listen)

    try:
        spec = spec_from_args(args)
    except ValidationError as e:
        parser.error(str(e))

    if args.role is None:
        return run_launcher(args, spec)
    run_role, _launch = RUNNERS[args.command]
    return run_role(spec)


if __name__ == "__main__":
    sys.exit(main())
