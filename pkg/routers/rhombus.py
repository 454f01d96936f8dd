"""
`mwctl rhombus`: a three-stage serving pipeline whose middle stage is replicated.

    P1 --w1--> P2 --w3--> P4
    P1 --w2--> P3 --w4--> P4

One world per edge, so killing any stage breaks only the worlds on its edges;
the stages left running drain their streams and finish.
With --recover, P5 takes over the middle role through w6 (P1->P5) and
w7 (P5->P4) while P1, P2 and P4 keep running.
"""
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from models.buffer import Buffer, DType, ReduceOp
from models.work import WorkHandle, WorkState
from models.world import WorldStatus
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
from schemas.scenario_schema import Scenario, ScenarioSpec, ScenarioVerdict
from services.world_manager import WorldManager
from utils.exceptions import MwError
from utils.logger import logger

ROLES = ("P1", "P2", "P3", "P4")
RECOVERY_ROLE = "P5"

# world -> (rank 0 role, rank 1 role); data flows from rank 0 to rank 1
TOPOLOGY: Dict[str, Tuple[str, str]] = {
    "w1": ("P1", "P2"),
    "w2": ("P1", "P3"),
    "w3": ("P2", "P4"),
    "w4": ("P3", "P4"),
}
RECOVERY_TOPOLOGY: Dict[str, Tuple[str, str]] = {
    "w6": ("P1", "P5"),
    "w7": ("P5", "P4"),
}
POLL_PERIOD = 0.002


def worlds_of(role: str, topology: Dict[str, Tuple[str, str]] = TOPOLOGY) -> Dict[str, int]:
    """World base name -> this role's rank, for every edge touching `role`."""
    return {w: members.index(role) for w, members in topology.items() if role in members}


def expected_broken(victim: Optional[str]) -> Set[str]:
    return {w for w, members in TOPOLOGY.items() if victim in members} if victim else set()


def live_roles(spec: ScenarioSpec) -> List[str]:
    roles = [r for r in ROLES if r != spec.kill]
    if spec.recover:
        roles.append(RECOVERY_ROLE)
    return roles


@dataclass
class PipelineStage:
    """
    One process of the pipeline: receives on its in-worlds, forwards on its
    out-worlds, alternating among the out-worlds that are still Ready.

    The source (no in-worlds) generates messages; the sink (no out-worlds)
    only counts them. A message whose first element is END_MARKER closes a stream.
    """
    ctx: RoleContext
    manager: WorldManager
    in_worlds: List[str]
    out_worlds: List[str]
    broken: Set[str] = field(default_factory=set)
    handled: int = 0
    _next_out: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def comm(self):
        return self.manager.communicator()

    @property
    def spec(self) -> ScenarioSpec:
        return self.ctx.spec

    def name(self, base: str) -> str:
        return self.spec.world(base)

    def add_out(self, base: str) -> None:
        with self._lock:
            self.out_worlds.append(base)

    def add_in(self, base: str) -> None:
        with self._lock:
            self.in_worlds.append(base)

    def lose(self, base: str, error: MwError) -> None:
        if base in self.broken:
            return
        self.broken.add(base)
        logger.warning(f"{self.spec.role} lost world {base}: {error}")
        self.ctx.emit("world_broken", world=base, kind=error.kind.value, error=str(error))
        with self._lock:
            if base in self.out_worlds:
                self.out_worlds.remove(base)
            if base in self.in_worlds:
                self.in_worlds.remove(base)

    def live_outs(self) -> List[str]:
        with self._lock:
            return list(self.out_worlds)

    def forward(self, buf: Buffer) -> bool:
        """Sends on the next live out-world; a world that fails is dropped and the next one tried."""
        while True:
            outs = self.live_outs()
            if not outs:
                return False
            base = outs[self._next_out % len(outs)]
            self._next_out += 1
            try:
                self.comm.send(self.name(base), 1, buf).wait()
                return True
            except MwError as e:
                self.lose(base, e)

    def close_outputs(self) -> None:
        end = message_buffer(END_MARKER, self.spec.message_size)
        for base in self.live_outs():
            try:
                self.comm.send(self.name(base), 1, end).wait()
            except MwError as e:
                self.lose(base, e)

    def maybe_die(self) -> None:
        if self.spec.kill == self.spec.role and self.spec.kill_after == self.handled:
            self.ctx.emit("killed", after=self.handled)
            self_kill()

    # roles

    def run_source(self) -> None:
        spec = self.spec
        started = time.monotonic()
        self.maybe_die()
        index = 0
        while index < spec.message_count:
            pace(started, index, spec.rate)
            if not self.forward(message_buffer(index, spec.message_size)):
                if spec.recover and self._wait_for_outputs(timeout=60.0):
                    continue
                self.ctx.emit("source_stopped", index=index)
                break
            index += 1
            self.handled += 1
            self.maybe_die()
        self.ctx.emit("source_done", sent=index)

    def _wait_for_outputs(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.live_outs():
                return True
            time.sleep(0.05)
        return False

    def run_relay(self) -> None:
        """Forwards from the single in-world; after losing the output it drains until END."""
        template = message_template(self.spec.message_size)
        (base,) = self.in_worlds
        self.maybe_die()
        while True:
            try:
                buf = self.comm.recv(self.name(base), 0, template).wait()
            except MwError as e:
                self.lose(base, e)
                break
            if message_index(buf) == END_MARKER:
                break
            self.handled += 1
            if self.live_outs():
                self.forward(buf)
            self.maybe_die()
        self.close_outputs()

    def run_sink(self, recovering: threading.Event) -> int:
        """Keeps one recv per live in-world until every stream ended or broke."""
        template = message_template(self.spec.message_size)
        pending: Dict[str, WorkHandle] = {}
        ended: Set[str] = set()
        received_by: Dict[str, int] = {}
        self.maybe_die()
        deadline = time.monotonic() + self.spec.message_count / (self.spec.rate or 50.0) + 120.0
        while time.monotonic() < deadline:
            with self._lock:
                live = [w for w in self.in_worlds if w not in ended]
            for base in live:
                if base not in pending:
                    try:
                        pending[base] = self.comm.recv(self.name(base), 0, template)
                    except MwError as e:
                        self.lose(base, e)
            if not pending and not recovering.is_set():
                break
            for base, handle in list(pending.items()):
                if handle.poll() is WorkState.PENDING:
                    continue
                del pending[base]
                if handle.error is not None:
                    self.lose(base, handle.error)
                    continue
                if message_index(handle.result) == END_MARKER:
                    ended.add(base)
                    continue
                self.handled += 1
                received_by[base] = received_by.get(base, 0) + 1
                self.maybe_die()
            time.sleep(POLL_PERIOD)
        self.ctx.emit("sink_done", received=self.handled, by_world=received_by)
        return self.handled

    def closing_round(self) -> Dict[str, bool]:
        """One all_reduce(SUM) per world that is still Ready; every member contributes 1."""
        handles: Dict[str, WorkHandle] = {}
        for base in sorted(set(worlds_of(self.spec.role)) | set(worlds_of(self.spec.role, RECOVERY_TOPOLOGY))):
            name = self.name(base)
            try:
                if self.manager.world_status(name) is WorldStatus.READY:
                    handles[base] = self.comm.all_reduce(name, Buffer.from_values(DType.I32, [1]), ReduceOp.SUM)
            except MwError:
                continue
        results: Dict[str, bool] = {}
        for base, handle in handles.items():
            try:
                results[base] = handle.wait(30.0).tolist() == [2]
            except MwError as e:
                self.lose(base, e)
                results[base] = False
        self.ctx.emit("closing_round", results=results)
        return results

    def snapshot(self) -> List[str]:
        statuses = self.manager.worlds()
        names = {self.name(b): b for b in list(TOPOLOGY) + list(RECOVERY_TOPOLOGY)}
        broken = {names[n] for n, s in statuses.items() if s is WorldStatus.BROKEN and n in names}
        return sorted(broken | self.broken)


def _recovery_worlds(role: str) -> Dict[str, int]:
    return worlds_of(role, RECOVERY_TOPOLOGY)


def _start_recovery(ctx: RoleContext, manager: WorldManager, stage: PipelineStage,
                    recovering: threading.Event) -> Optional[threading.Thread]:
    """P1 and P4 form their world with P5 in the background once their replica's world breaks."""
    mine = _recovery_worlds(ctx.spec.role)
    if not ctx.spec.recover or not mine or ctx.spec.role == RECOVERY_ROLE:
        return None
    (base, rank), = mine.items()
    recovering.set()

    def recover() -> None:
        try:
            while not (stage.broken & expected_broken(ctx.spec.kill)):
                time.sleep(0.05)
            latency = ctx.initialize_all(manager, [(base, 2, rank)])[base]
            ctx.emit("recovered", world=base, join_latency=latency)
            if rank == 0:
                stage.add_out(base)
            else:
                stage.add_in(base)
        except MwError as e:
            ctx.emit("recovery_failed", world=base, kind=e.kind.value, error=str(e))
        finally:
            recovering.clear()

    thread = threading.Thread(target=recover, name=f"mwctl-recover-{base}", daemon=True)
    thread.start()
    return thread


def run_rhombus(spec: ScenarioSpec) -> int:
    return run_role(spec, _rhombus_role)


def _rhombus_role(ctx: RoleContext) -> int:
    spec = ctx.spec
    role = spec.role
    topology = RECOVERY_TOPOLOGY if role == RECOVERY_ROLE else TOPOLOGY
    mine = worlds_of(role, topology)
    with WorldManager() as manager:
        latency = ctx.initialize_all(manager, [(base, 2, rank) for base, rank in mine.items()])
        ctx.emit("ready", worlds=sorted(latency))
        stage = PipelineStage(
            ctx, manager,
            in_worlds=sorted(b for b, r in mine.items() if r == 1),
            out_worlds=sorted(b for b, r in mine.items() if r == 0),
        )
        recovering = threading.Event()
        recovery = _start_recovery(ctx, manager, stage, recovering)
        if not stage.in_worlds:
            stage.run_source()
            if recovery is not None:
                # P5 must see the end of the stream too.
                recovery.join(timeout=90.0)
            stage.close_outputs()
        elif not stage.out_worlds:
            stage.run_sink(recovering)
        else:
            stage.run_relay()
        if recovery is not None:
            recovery.join(timeout=0.1)
        stage.closing_round()
        ctx.emit("final", broken=stage.snapshot(), handled=stage.handled)
        try:
            ctx.barrier("rhombus-done", len(live_roles(spec)), timeout=120.0)
        except MwError as e:
            logger.warning(f"{role} left before every live role reached the exit barrier: {e}")
    return EXIT_PASS


def rhombus_verdict(launcher: Launcher, spec: ScenarioSpec) -> ScenarioVerdict:
    reasons: List[str] = []
    finals = {r["role"]: r["detail"] for r in launcher.records(event="final")}
    closing = {r["role"]: r["detail"]["results"] for r in launcher.records(event="closing_round")}
    reported: Set[str] = set()
    for detail in finals.values():
        reported |= set(detail["broken"]) & set(TOPOLOGY)
    expected = expected_broken(spec.kill)
    missing = [r for r in live_roles(spec) if r not in finals]
    if missing:
        reasons.append(f"roles without a final record: {missing}")
    if reported != expected:
        reasons.append(f"broken worlds {sorted(reported)}, expected {sorted(expected)}")
    for role, results in closing.items():
        # a world the victim belonged to may break under its closing round
        failed = [w for w, ok in results.items() if not ok and w not in expected]
        if failed:
            reasons.append(f"{role} failed the closing round on {failed}")
    intact = set(TOPOLOGY) - expected
    passed_round = {w for results in closing.values() for w, ok in results.items() if ok}
    if not intact <= passed_round:
        reasons.append(f"intact worlds without a closing round: {sorted(intact - passed_round)}")
    sink = finals.get("P4", {})
    summary = {"broken": sorted(reported), "expected": sorted(expected), "sink_received": sink.get("handled")}
    if not spec.kill and sink.get("handled") != spec.message_count:
        reasons.append(f"P4 received {sink.get('handled')} of {spec.message_count} messages")
    if spec.recover:
        by_world = next((r["detail"].get("by_world", {}) for r in launcher.records(role="P4", event="sink_done")), {})
        summary["via_recovery"] = by_world.get("w7", 0)
        if not by_world.get("w7"):
            reasons.append("no message reached P4 through P5")
    return ScenarioVerdict(scenario=Scenario.RHOMBUS, passed=not reasons, reasons=reasons, summary=summary)


def launch_rhombus(spec: ScenarioSpec, launcher: Launcher) -> Tuple[int, ScenarioVerdict]:
    for role in ROLES:
        launcher.spawn(role)
    budget = spec.message_count / (spec.rate or 50.0) + 120.0
    if spec.recover:
        code = launcher.wait_for(spec.kill, timeout=budget)
        if code is None:
            logger.error(f"{spec.kill} is still running; starting {RECOVERY_ROLE} anyway.")
        launcher.spawn(RECOVERY_ROLE)
    codes = launcher.wait_all(timeout=budget)
    verdict = rhombus_verdict(launcher, spec)
    verdict.summary["exit_codes"] = codes
    if environment_failed(codes):
        return EXIT_ENV, verdict
    return (EXIT_PASS if verdict.passed else EXIT_FAIL), verdict
