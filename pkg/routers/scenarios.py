"""
`mwctl fault` and `mwctl join`: the fault-tolerance and online-instantiation demos.

fault:  leader holds w1 (with workerA) and w2 (with workerB). workerA sends at
        --rate, workerB at half of it and kills itself after --kill-after
        messages. The leader keeps receiving on w1 while w2 breaks.
        --single-world puts all three in one world of size 3.
join:   leader and workerA stream large messages on w1; the leader starts
        initializing w2 halfway to --join-at and workerB joins at --join-at.
        w1's arrival gaps during the wait must stay small.
"""
import threading
import time
from typing import Dict, List, Optional, Tuple

from models.work import WorkHandle, WorkState
from routers.launcher import (
    END_MARKER,
    EXIT_ENV,
    EXIT_FAIL,
    EXIT_PASS,
    Launcher,
    RoleContext,
    environment_failed,
    message_buffer,
    message_index,
    message_template,
    pace,
    run_role,
    self_kill,
)
from schemas.scenario_schema import BenchRecord, Scenario, ScenarioSpec, ScenarioVerdict
from services.world_manager import WorldManager
from utils.exceptions import MwError
from utils.logger import logger

FAULT_ROLES = ("leader", "workerA", "workerB")
JOIN_ROLES = FAULT_ROLES
STALL_LIMIT = 10.0
DETECTION_BOUND = 3.5
MIN_W1_MESSAGES = 20
MAX_JOIN_GAP = 0.1
MIN_WINDOW_RATIO = 0.8
MAX_JOIN_LATENCY = 1.0
POLL_PERIOD = 0.002


# world layout: role -> [(world base name, world size, my rank)]

def fault_layout(single_world: bool) -> Dict[str, List[Tuple[str, int, int]]]:
    if single_world:
        return {"leader": [("w1", 3, 0)], "workerA": [("w1", 3, 1)], "workerB": [("w1", 3, 2)]}
    return {"leader": [("w1", 2, 0), ("w2", 2, 0)], "workerA": [("w1", 2, 1)], "workerB": [("w2", 2, 1)]}


def _sender_rate(spec: ScenarioSpec) -> Optional[float]:
    rate = spec.rate if spec.rate is not None else 1.0
    return rate / 2 if spec.role == "workerB" else rate


class _Receiver:
    """Keeps one outstanding recv per (world, source) and reports what completes."""

    def __init__(self, manager: WorldManager, template):
        self.comm = manager.communicator()
        self.template = template
        self.pending: Dict[Tuple[str, int], WorkHandle] = {}

    def post(self, world: str, src: int) -> None:
        self.pending[(world, src)] = self.comm.recv(world, src, self.template)

    def drop_world(self, world: str) -> None:
        for key in [k for k in self.pending if k[0] == world]:
            del self.pending[key]

    def completed(self) -> List[Tuple[str, int, WorkHandle]]:
        return [(w, s, h) for (w, s), h in list(self.pending.items()) if h.poll() is not WorkState.PENDING]


# fault

def run_fault(spec: ScenarioSpec) -> int:
    return run_role(spec, _fault_leader if spec.role == "leader" else _fault_worker)


def _fault_worker(ctx: RoleContext) -> int:
    spec = ctx.spec
    (base, _size, _rank), = fault_layout(spec.single_world)[spec.role]
    world = spec.world(base)
    victim = spec.role == "workerB"
    with WorldManager() as manager:
        latency = ctx.initialize_all(manager, fault_layout(spec.single_world)[spec.role])
        ctx.emit("ready", world=base, join_latency=latency[base])
        comm = manager.communicator()
        if victim and spec.kill_after == 0:
            ctx.emit("killed", world=base, after=0)
            self_kill()
        rate = _sender_rate(spec)
        started = time.monotonic()
        for i in range(1, spec.message_count + 1):
            pace(started, i - 1, rate)
            try:
                comm.send(world, 0, message_buffer(i, spec.message_size)).wait()
            except MwError as e:
                ctx.emit("send_failed", world=base, index=i, kind=e.kind.value, error=str(e))
                return EXIT_PASS
            ctx.emit("sent", world=base, index=i)
            if victim and spec.kill_after == i:
                ctx.emit("killed", world=base, after=i)
                self_kill()
        try:
            comm.send(world, 0, message_buffer(END_MARKER, spec.message_size)).wait()
        except MwError as e:
            ctx.emit("send_failed", world=base, index=END_MARKER, kind=e.kind.value, error=str(e))
    return EXIT_PASS


def _fault_leader(ctx: RoleContext) -> int:
    spec = ctx.spec
    layout = fault_layout(spec.single_world)["leader"]
    sources = {"w1": [1, 2]} if spec.single_world else {"w1": [1], "w2": [1]}
    with WorldManager() as manager:
        latency = ctx.initialize_all(manager, layout)
        for base, value in latency.items():
            ctx.emit("ready", world=base, join_latency=value)
        rx = _Receiver(manager, message_template(spec.message_size))
        names = {spec.world(base): base for base in sources}
        for base, srcs in sources.items():
            for src in srcs:
                rx.post(spec.world(base), src)
        expected = spec.message_count / (spec.rate or 1.0)
        deadline = time.monotonic() + 2 * expected + 30.0
        last_rx = time.monotonic()
        stalled = False
        while rx.pending and time.monotonic() < deadline:
            for world, src, handle in rx.completed():
                base = names[world]
                if handle.error is not None:
                    err = handle.error
                    logger.info(f"Leader lost world {base}: {err}")
                    ctx.emit("world_broken", world=base, kind=err.kind.value, error=str(err))
                    rx.drop_world(world)
                    manager.remove_world(world)
                    if spec.single_world:
                        ctx.emit("halted", world=base)
                        return EXIT_PASS
                    continue
                index = message_index(handle.result)
                if index == END_MARKER:
                    del rx.pending[(world, src)]
                    ctx.emit("stream_end", world=base, src=src)
                    continue
                now = time.monotonic()
                if now - last_rx > STALL_LIMIT:
                    stalled = True
                    ctx.emit("stall", world=base, seconds=now - last_rx)
                last_rx = now
                ctx.emit("received", world=base, src=src, index=index)
                rx.post(world, src)
            time.sleep(POLL_PERIOD)
        if rx.pending:
            ctx.emit("deadline", pending=[names[w] for w, _ in rx.pending])
    return EXIT_FAIL if stalled else EXIT_PASS


def fault_verdict(launcher: Launcher, spec: ScenarioSpec) -> ScenarioVerdict:
    leader = launcher.records(role="leader")
    received = [r for r in leader if r["event"] == "received"]
    broken = {r["world"]: r for r in leader if r["event"] == "world_broken"}
    killed = launcher.records(role="workerB", event="killed")
    reasons: List[str] = []
    summary: Dict[str, object] = {"received": len(received), "broken": sorted(broken)}

    if spec.single_world:
        if "w1" not in broken or not any(r["event"] == "halted" for r in leader):
            reasons.append("single-world leader did not halt on the failure")
        return ScenarioVerdict(scenario=Scenario.FAULT, passed=not reasons, reasons=reasons, summary=summary)

    w1 = [r for r in received if r["world"] == "w1"]
    need = min(MIN_W1_MESSAGES, spec.message_count)
    last_w1 = max((r["detail"]["index"] for r in w1), default=0)
    summary["w1_last_index"] = last_w1
    if last_w1 < need:
        reasons.append(f"leader got w1 messages only up to {last_w1}, need {need}")
    if "w1" in broken:
        reasons.append("w1 broke although workerA stayed alive")
    if killed:
        if "w2" not in broken:
            reasons.append("w2 never reported broken")
        else:
            delay = broken["w2"]["ts"] - killed[0]["ts"]
            summary["detection_seconds"] = round(delay, 3)
            if not 0 <= delay <= DETECTION_BOUND:
                reasons.append(f"w2 broken {delay:.2f}s after the kill, bound is {DETECTION_BOUND}s")
            if not any(r["ts"] > broken["w2"]["ts"] for r in w1):
                reasons.append("no w1 message after w2 broke")
    gaps = [b["ts"] - a["ts"] for a, b in zip(w1, w1[1:])]
    summary["max_w1_gap"] = round(max(gaps, default=0.0), 3)
    if any(r["event"] == "stall" for r in leader) or max(gaps, default=0.0) > STALL_LIMIT:
        reasons.append(f"leader stalled for more than {STALL_LIMIT}s")
    return ScenarioVerdict(scenario=Scenario.FAULT, passed=not reasons, reasons=reasons, summary=summary)


def launch_fault(spec: ScenarioSpec, launcher: Launcher) -> Tuple[int, ScenarioVerdict]:
    for role in FAULT_ROLES:
        launcher.spawn(role)
    expected = spec.message_count / (spec.rate or 1.0)
    codes = launcher.wait_all(timeout=2 * expected + 60.0)
    verdict = fault_verdict(launcher, spec)
    verdict.summary["exit_codes"] = codes
    if environment_failed(codes):
        return EXIT_ENV, verdict
    return (EXIT_PASS if verdict.passed else EXIT_FAIL), verdict


# join

class _IntervalMeter:
    """Throughput samples of `every` messages each, with their time spans."""

    def __init__(self, ctx: RoleContext, world: str, message_size: int, every: int):
        self.ctx = ctx
        self.world = world
        self.message_size = message_size
        self.every = every
        self.count = 0
        self.index = 0
        self.span_start = time.monotonic()
        self.spans: List[Tuple[float, float, float]] = []
        self.arrivals: List[float] = []

    def tick(self) -> None:
        now = time.monotonic()
        self.arrivals.append(now)
        self.count += 1
        if self.count == self.every:
            duration = now - self.span_start
            record = BenchRecord(
                role=self.ctx.spec.role, event="interval", path="MW", world=self.world,
                message_size=self.message_size, messages=self.count, duration=duration,
                interval_index=self.index,
            )
            self.ctx.emit_record(record)
            self.spans.append((self.span_start, now, record.throughput))
            self.index += 1
            self.count = 0
            self.span_start = now


def join_window_stats(meter: _IntervalMeter, window: Tuple[float, float]) -> Dict[str, float]:
    """
    Arrival-gap and throughput statistics of one stream over a time window.

    Returns:
        Dict: max_gap (largest inter-arrival inside the window), pre_mean
        (mean throughput of whole intervals before the window, first one
        excluded as warm-up) and min_ratio (worst window interval / pre_mean).
    """
    start, end = window
    inside = [t for t in meter.arrivals if start <= t <= end]
    before = [t for t in meter.arrivals if t < start][-1:]
    after = [t for t in meter.arrivals if t > end][:1]
    points = before + inside + after
    max_gap = max((b - a for a, b in zip(points, points[1:])), default=0.0)
    pre = [tp for (s, e, tp) in meter.spans[1:] if e <= start]
    pre_mean = sum(pre) / len(pre) if pre else 0.0
    during = [tp for (s, e, tp) in meter.spans if s < end and e > start]
    min_ratio = min(during) / pre_mean if during and pre_mean else 1.0
    return {"max_gap": max_gap, "pre_mean": pre_mean, "min_ratio": min_ratio}


def run_join(spec: ScenarioSpec) -> int:
    return run_role(spec, _join_leader if spec.role == "leader" else _join_worker)


def _join_worker(ctx: RoleContext) -> int:
    spec = ctx.spec
    base = "w1" if spec.role == "workerA" else "w2"
    world = spec.world(base)
    with WorldManager() as manager:
        if spec.role == "workerB":
            delay = (spec.join_at or 0.0) - ctx.elapsed()
            if delay > 0:
                time.sleep(delay)
        latency = ctx.initialize_all(manager, [(base, 2, 1)])[base]
        ctx.emit("joined", world=base, join_latency=latency)
        comm = manager.communicator()
        sent = 0
        while ctx.elapsed() < spec.duration:
            pace(ctx.started, sent, spec.rate)
            try:
                comm.send(world, 0, message_buffer(sent, spec.message_size)).wait()
            except MwError as e:
                ctx.emit("send_failed", world=base, index=sent, kind=e.kind.value, error=str(e))
                return EXIT_FAIL
            sent += 1
        comm.send(world, 0, message_buffer(END_MARKER, spec.message_size)).wait()
        ctx.emit("sent_total", world=base, messages=sent)
    return EXIT_PASS


def _join_leader(ctx: RoleContext) -> int:
    spec = ctx.spec
    join_at = spec.join_at if spec.join_at is not None else 20.0
    init_at = join_at / 2
    w1, w2 = spec.world("w1"), spec.world("w2")
    with WorldManager() as manager:
        ctx.initialize_all(manager, [("w1", 2, 0)])
        rx = _Receiver(manager, message_template(spec.message_size))
        meters = {w1: _IntervalMeter(ctx, "w1", spec.message_size, spec.interval)}
        w2_state: Dict[str, float] = {}
        w2_ready = threading.Event()

        def initialize_w2() -> None:
            wait = init_at - ctx.elapsed()
            if wait > 0:
                time.sleep(wait)
            w2_state["start"] = time.monotonic()
            ctx.emit("w2_init_start", world="w2")
            try:
                latency = ctx.initialize_all(manager, [("w2", 2, 0)])["w2"]
            except MwError as e:
                w2_state["end"] = time.monotonic()
                ctx.emit("w2_init_failed", world="w2", kind=e.kind.value, error=str(e))
                return
            w2_state["end"] = time.monotonic()
            ctx.emit("w2_ready", world="w2", join_latency=latency)
            w2_ready.set()

        initializer = threading.Thread(target=initialize_w2, name="mwctl-join-w2", daemon=True)
        initializer.start()
        rx.post(w1, 1)
        deadline = ctx.started + spec.duration + join_at + 30.0
        while time.monotonic() < deadline:
            if w2_ready.is_set() and w2 not in meters:
                meters[w2] = _IntervalMeter(ctx, "w2", spec.message_size, spec.interval)
                rx.post(w2, 1)
            if not rx.pending and (w2_ready.is_set() or not initializer.is_alive()):
                break
            for world, src, handle in rx.completed():
                if handle.error is not None:
                    ctx.emit("world_broken", world=meters[world].world, kind=handle.error.kind.value)
                    rx.drop_world(world)
                    continue
                if message_index(handle.result) == END_MARKER:
                    del rx.pending[(world, src)]
                    continue
                meters[world].tick()
                rx.post(world, src)
            time.sleep(POLL_PERIOD)
        initializer.join(timeout=1)
        window = (w2_state.get("start", 0.0), w2_state.get("end", w2_state.get("start", 0.0)))
        stats = join_window_stats(meters[w1], window)
        ctx.emit(
            "join_summary", world="w1",
            w1_messages=len(meters[w1].arrivals),
            w2_messages=len(meters[w2].arrivals) if w2 in meters else 0,
            wait_seconds=window[1] - window[0], **stats,
        )
    return EXIT_PASS


def join_verdict(launcher: Launcher, spec: ScenarioSpec) -> ScenarioVerdict:
    reasons: List[str] = []
    summaries = launcher.records(role="leader", event="join_summary")
    joined = launcher.records(role="workerB", event="joined")
    summary: Dict[str, object] = {}
    if not summaries:
        reasons.append("leader produced no join summary")
    else:
        s = summaries[-1]["detail"]
        summary.update(s)
        if s["max_gap"] > MAX_JOIN_GAP:
            reasons.append(f"w1 arrival gap {s['max_gap']:.3f}s during the wait exceeds {MAX_JOIN_GAP}s")
        if s["min_ratio"] < MIN_WINDOW_RATIO:
            reasons.append(f"w1 interval fell to {s['min_ratio']:.0%} of the pre-wait mean")
        if s["w2_messages"] == 0:
            reasons.append("no traffic on w2 after the join")
    if not joined:
        reasons.append("workerB never joined w2")
    else:
        latency = joined[-1]["detail"]["join_latency"]
        summary["join_latency"] = latency
        if latency >= MAX_JOIN_LATENCY:
            reasons.append(f"join latency {latency:.3f}s is not under {MAX_JOIN_LATENCY}s")
    return ScenarioVerdict(scenario=Scenario.JOIN, passed=not reasons, reasons=reasons, summary=summary)


def launch_join(spec: ScenarioSpec, launcher: Launcher) -> Tuple[int, ScenarioVerdict]:
    for role in JOIN_ROLES:
        launcher.spawn(role)
    join_at = spec.join_at if spec.join_at is not None else 20.0
    codes = launcher.wait_all(timeout=spec.duration + join_at + 60.0)
    verdict = join_verdict(launcher, spec)
    verdict.summary["exit_codes"] = codes
    if environment_failed(codes):
        return EXIT_ENV, verdict
    return (EXIT_PASS if verdict.passed else EXIT_FAIL), verdict
