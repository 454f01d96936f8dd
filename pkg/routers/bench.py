"""
`mwctl bench`: loopback throughput.

p2p    one sender, one receiver. Every size is measured twice in the same
       binary: SW drives a bare transport connection with a blocking loop,
       MW goes through WorldManager + WorldCommunicator. Overhead is 1 - MW/SW.
fanin  one receiver, N senders, each sender in its own world. Every size first
       runs sender1 alone (MW-solo), then all senders at once (MW-aggregate).
"""
import queue
import statistics
import threading
import time
from collections import deque
from typing import Deque, Dict, List, Optional, Tuple

from models.work import WorkHandle
from routers.launcher import (
    EXIT_ENV,
    EXIT_FAIL,
    EXIT_PASS,
    Launcher,
    RoleContext,
    environment_failed,
    message_buffer,
    message_template,
    run_role,
)
from schemas.scenario_schema import BenchRecord, Scenario, ScenarioSpec, ScenarioVerdict
from services.store_service import StoreClient
from services.transport_service import Frame, connect, listen
from services.world_manager import WorldManager
from utils.exceptions import MwTimeoutError
from utils.logger import logger

DEFAULT_SIZES = [4096, 40960, 409600, 4194304]
WINDOW = 4
MIN_MW_RATIO = 0.9
# Aggregate fan-in throughput against sender1 alone; one receiving poller bounds both
MIN_FANIN_RATIO = 0.9
CHECKED_SIZES = (409600, 4194304)
IO_TIMEOUT = 60.0


def sizes_for(spec: ScenarioSpec) -> List[int]:
    return list(spec.sizes) or DEFAULT_SIZES


def fanin_roles(senders: int) -> List[str]:
    return ["receiver"] + [f"sender{i}" for i in range(1, senders + 1)]


def run_bench(spec: ScenarioSpec) -> int:
    if spec.scenario == Scenario.BENCH_FANIN:
        return run_role(spec, _fanin_receiver if spec.role == "receiver" else _fanin_sender)
    return run_role(spec, _p2p_receiver if spec.role == "receiver" else _p2p_sender)


def _emit_run(ctx: RoleContext, path: str, size: int, rep: int, arrivals: List[float], started: float,
              world: Optional[str] = None, senders: int = 1) -> BenchRecord:
    """Emits per-interval samples followed by the whole-run sample."""
    every = ctx.spec.interval
    span_start = started
    for index, at in enumerate(arrivals[every - 1::every]):
        ctx.emit_record(BenchRecord(
            role=ctx.spec.role, event="interval", path=path, world=world, message_size=size,
            messages=every, duration=max(at - span_start, 1e-9), interval_index=index,
            senders=senders, repeat_index=rep,
        ))
        span_start = at
    record = BenchRecord(
        role=ctx.spec.role, path=path, world=world, message_size=size, messages=len(arrivals),
        duration=max((arrivals[-1] if arrivals else started) - started, 1e-9), senders=senders, repeat_index=rep,
    )
    ctx.emit_record(record)
    return record


# single-world direct loop

def _sw_key(ctx: RoleContext, size: int, rep: int) -> str:
    return f"mwctl/{ctx.spec.run_id}/sw/{size}/{rep}/addr"


def _sw_receive(ctx: RoleContext, size: int, rep: int) -> None:
    spec = ctx.spec
    world = spec.world(f"sw{rep}")
    accepted: "queue.Queue" = queue.Queue()
    listener = listen(spec.listen_addr, world, 0, on_connection=accepted.put)
    try:
        with StoreClient(spec.store_addr) as store:
            store.set(_sw_key(ctx, size, rep), str(listener.addr))
        conn = accepted.get(timeout=IO_TIMEOUT)
    finally:
        listener.close()
    try:
        ctx.barrier(f"sw-{size}-{rep}", 2)
        started = time.monotonic()
        arrivals = []
        for _ in range(spec.message_count):
            conn.recv_frame(deadline=IO_TIMEOUT)
            arrivals.append(time.monotonic())
        _emit_run(ctx, "SW", size, rep, arrivals, started)
        ctx.barrier(f"sw-done-{size}-{rep}", 2)
    finally:
        conn.close()


def _sw_send(ctx: RoleContext, size: int, rep: int) -> None:
    spec = ctx.spec
    world = spec.world(f"sw{rep}")
    with StoreClient(spec.store_addr) as store:
        addr = store.wait(_sw_key(ctx, size, rep), IO_TIMEOUT).decode()
    conn = connect(addr, world, 1, 0)
    payload = message_buffer(0, size)
    try:
        ctx.barrier(f"sw-{size}-{rep}", 2)
        for _ in range(spec.message_count):
            conn.send_frame(Frame.data(world, payload), deadline=IO_TIMEOUT)
        ctx.barrier(f"sw-done-{size}-{rep}", 2)
    finally:
        conn.close()


# multi-world communicator path

def _mw_stream_send(manager: WorldManager, world: str, size: int, count: int) -> None:
    comm = manager.communicator()
    payload = message_buffer(0, size)
    window: Deque[WorkHandle] = deque()
    for _ in range(count):
        if len(window) >= WINDOW:
            window.popleft().wait(IO_TIMEOUT)
        window.append(comm.send(world, 0, payload))
    while window:
        window.popleft().wait(IO_TIMEOUT)


def _mw_stream_receive(manager: WorldManager, worlds: List[str], size: int, count: int) -> Dict[str, List[float]]:
    """Keeps WINDOW receives outstanding per world until `count` messages per world arrived."""
    comm = manager.communicator()
    template = message_template(size)
    ready = threading.Event()

    def post(world: str) -> None:
        handle = comm.recv(world, 1, template)
        handle.add_done_callback(lambda _h: ready.set())
        windows[world].append(handle)
        posted[world] += 1

    arrivals: Dict[str, List[float]] = {w: [] for w in worlds}
    windows: Dict[str, Deque[WorkHandle]] = {w: deque() for w in worlds}
    posted = {w: 0 for w in worlds}
    for w in worlds:
        while posted[w] < count and len(windows[w]) < WINDOW:
            post(w)
    deadline = time.monotonic() + IO_TIMEOUT * max(1, count // 100)
    while any(windows.values()):
        ready.clear()
        progressed = False
        for w, window in windows.items():
            while window and window[0].done():
                window.popleft().wait()
                arrivals[w].append(time.monotonic())
                progressed = True
                if posted[w] < count:
                    post(w)
        if not progressed:
            if time.monotonic() > deadline:
                raise MwTimeoutError(detail=f"stream stalled with {sum(map(len, windows.values()))} receives pending.")
            ready.wait(0.5)
    return arrivals


def _p2p_receiver(ctx: RoleContext) -> int:
    spec = ctx.spec
    mw = spec.world("mw")
    with WorldManager() as manager:
        ctx.initialize_all(manager, [("mw", 2, 0)])
        # First op dials the connection; report it as the warm-up sample.
        warm_start = time.monotonic()
        arrivals = _mw_stream_receive(manager, [mw], spec.message_size, 1)[mw]
        ctx.emit("warmup", world="mw", seconds=arrivals[0] - warm_start)
        for size in sizes_for(spec):
            for rep in range(spec.repeat):
                _sw_receive(ctx, size, rep)
                ctx.barrier(f"mw-{size}-{rep}", 2)
                started = time.monotonic()
                arrivals = _mw_stream_receive(manager, [mw], size, spec.message_count)[mw]
                _emit_run(ctx, "MW", size, rep, arrivals, started, world="mw")
        ctx.barrier("p2p-done", 2)
    return EXIT_PASS


def _p2p_sender(ctx: RoleContext) -> int:
    spec = ctx.spec
    mw = spec.world("mw")
    with WorldManager() as manager:
        ctx.initialize_all(manager, [("mw", 2, 1)])
        _mw_stream_send(manager, mw, spec.message_size, 1)
        for size in sizes_for(spec):
            for rep in range(spec.repeat):
                _sw_send(ctx, size, rep)
                ctx.barrier(f"mw-{size}-{rep}", 2)
                _mw_stream_send(manager, mw, size, spec.message_count)
        ctx.barrier("p2p-done", 2)
    return EXIT_PASS


def _fanin_receiver(ctx: RoleContext) -> int:
    spec = ctx.spec
    bases = [f"fanin{i}" for i in range(1, spec.senders + 1)]
    worlds = [spec.world(b) for b in bases]
    parties = spec.senders + 1
    with WorldManager() as manager:
        ctx.initialize_all(manager, [(b, 2, 0) for b in bases])
        _mw_stream_receive(manager, worlds, spec.message_size, 1)
        for size in sizes_for(spec):
            for rep in range(spec.repeat):
                # sender1 alone first, as the baseline the aggregate is held to
                ctx.barrier(f"fanin-solo-{size}-{rep}", parties)
                started = time.monotonic()
                solo = _mw_stream_receive(manager, worlds[:1], size, spec.message_count)
                _emit_run(ctx, "MW-solo", size, rep, solo[worlds[0]], started)
                ctx.barrier(f"fanin-{size}-{rep}", parties)
                started = time.monotonic()
                arrivals = _mw_stream_receive(manager, worlds, size, spec.message_count)
                for base, world in zip(bases, worlds):
                    _emit_run(ctx, "MW", size, rep, arrivals[world], started, world=base)
                merged = sorted(t for times in arrivals.values() for t in times)
                _emit_run(ctx, "MW-aggregate", size, rep, merged, started, senders=spec.senders)
        ctx.barrier("fanin-done", parties)
    return EXIT_PASS


def _fanin_sender(ctx: RoleContext) -> int:
    spec = ctx.spec
    index = int(spec.role.removeprefix("sender"))
    base = f"fanin{index}"
    with WorldManager() as manager:
        ctx.initialize_all(manager, [(base, 2, 1)])
        _mw_stream_send(manager, spec.world(base), spec.message_size, 1)
        for size in sizes_for(spec):
            for rep in range(spec.repeat):
                ctx.barrier(f"fanin-solo-{size}-{rep}", spec.senders + 1)
                if index == 1:
                    _mw_stream_send(manager, spec.world(base), size, spec.message_count)
                ctx.barrier(f"fanin-{size}-{rep}", spec.senders + 1)
                _mw_stream_send(manager, spec.world(base), size, spec.message_count)
        ctx.barrier("fanin-done", spec.senders + 1)
    return EXIT_PASS


# verdicts

def _medians(records: List[Dict], path: str) -> Dict[int, float]:
    by_size: Dict[int, List[float]] = {}
    for r in records:
        if r.get("event") == "throughput" and r.get("path") == path and r.get("world") in (None, "mw"):
            by_size.setdefault(r["message_size"], []).append(r["throughput"])
    return {size: statistics.median(values) for size, values in by_size.items()}


def p2p_verdict(records: List[Dict]) -> ScenarioVerdict:
    sw, mw = _medians(records, "SW"), _medians(records, "MW")
    reasons: List[str] = []
    overhead: Dict[str, float] = {}
    for size in sorted(set(sw) & set(mw)):
        ratio = mw[size] / sw[size] if sw[size] else 0.0
        overhead[str(size)] = round(1 - ratio, 4)
        if size in CHECKED_SIZES and ratio < MIN_MW_RATIO:
            reasons.append(f"MW reached {ratio:.1%} of SW at {size} bytes, need {MIN_MW_RATIO:.0%}")
    if not overhead:
        reasons.append("no matching SW and MW samples")
    summary = {"sw_median": sw, "mw_median": mw, "overhead": overhead}
    return ScenarioVerdict(scenario=Scenario.BENCH_P2P, passed=not reasons, reasons=reasons, summary=summary)


def fanin_verdict(records: List[Dict], spec: ScenarioSpec) -> ScenarioVerdict:
    aggregate, solo = _medians(records, "MW-aggregate"), _medians(records, "MW-solo")
    reasons: List[str] = []
    expected = len(sizes_for(spec))
    if len(aggregate) < expected:
        reasons.append(f"aggregate samples for {len(aggregate)} of {expected} sizes")
    gain: Dict[str, float] = {}
    for size in sorted(set(aggregate) & set(solo)):
        ratio = aggregate[size] / solo[size] if solo[size] else 0.0
        gain[str(size)] = round(ratio, 4)
        if size in CHECKED_SIZES and ratio < MIN_FANIN_RATIO:
            reasons.append(
                f"{spec.senders} senders reached {ratio:.1%} of one sender at {size} bytes, need {MIN_FANIN_RATIO:.0%}"
            )
    return ScenarioVerdict(
        scenario=Scenario.BENCH_FANIN, passed=not reasons, reasons=reasons,
        summary={"aggregate_median": aggregate, "solo_median": solo, "gain": gain, "senders": spec.senders},
    )


def launch_bench(spec: ScenarioSpec, launcher: Launcher) -> Tuple[int, ScenarioVerdict]:
    fanin = spec.scenario == Scenario.BENCH_FANIN
    roles = fanin_roles(spec.senders) if fanin else ["receiver", "sender"]
    for role in roles:
        launcher.spawn(role)
    volume = sum(sizes_for(spec)) * spec.message_count * spec.repeat * (spec.senders + 1 if fanin else 2)
    codes = launcher.wait_all(timeout=120.0 + volume / 50e6)
    records = launcher.records(role="receiver")
    verdict = fanin_verdict(records, spec) if fanin else p2p_verdict(records)
    verdict.summary["exit_codes"] = codes
    logger.info(f"Bench verdict: {verdict.summary}")
    if environment_failed(codes):
        return EXIT_ENV, verdict
    if any(code not in (0,) for code in codes.values()):
        return EXIT_FAIL, verdict
    return (EXIT_PASS if verdict.passed else EXIT_FAIL), verdict
