"""
Plumbing shared by every mwctl scenario: role context and record sink,
store barrier, message payloads, self-termination and the multi-process
launcher that runs all roles of a scenario and collects their records.
"""
import json
import os
import signal
import subprocess
import sys
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from models.buffer import Buffer, BufferTemplate, DType
from schemas.scenario_schema import ScenarioRecord, ScenarioSpec
from schemas.world_schema import WorldDescriptor
from services.store_service import StoreClient, StoreServer, wait_for_store
from services.world_manager import WorldManager
from utils.exceptions import MwError, MwTimeoutError
from utils.logger import logger

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_ENV = 2

MAIN_SCRIPT = Path(__file__).resolve().parent.parent / "main.py"
END_MARKER = -1


class RecordSink:
    """Writes records as JSON lines to stdout and, optionally, appends them to a file."""

    def __init__(self, out: Optional[str] = None):
        self.out = out
        self._lock = threading.Lock()

    def emit(self, record: BaseModel) -> None:
        line = record.model_dump_json()
        with self._lock:
            sys.stdout.write(line + "\n")
            sys.stdout.flush()
            if self.out:
                with open(self.out, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


class RoleContext:
    """Per-process helpers for a scenario role."""

    def __init__(self, spec: ScenarioSpec, sink: RecordSink):
        self.spec = spec
        self.sink = sink
        self.started = time.monotonic()

    def elapsed(self) -> float:
        return time.monotonic() - self.started

    def emit(self, event: str, world: Optional[str] = None, **detail: Any) -> None:
        self.sink.emit(ScenarioRecord(role=self.spec.role, event=event, world=world, detail=detail))

    def emit_record(self, record: BaseModel) -> None:
        self.sink.emit(record)

    def descriptor(self, base: str, size: int, rank: int) -> WorldDescriptor:
        return WorldDescriptor(
            name=self.spec.world(base), size=size, my_rank=rank,
            store_addr=self.spec.store_addr, my_listen_addr=self.spec.listen_addr,
        )

    def initialize_all(self, manager: WorldManager, layout: Sequence[Tuple[str, int, int]],
                       timeout: Optional[float] = None) -> Dict[str, float]:
        """Initializes every (base, size, rank) concurrently; returns join latency per base name."""
        if not layout:
            return {}
        with ThreadPoolExecutor(max_workers=len(layout), thread_name_prefix="mw-role-init") as pool:
            futures = {
                base: pool.submit(manager.initialize_world, self.descriptor(base, size, rank), timeout)
                for base, size, rank in layout
            }
            return {base: fut.result() for base, fut in futures.items()}

    def barrier(self, name: str, parties: int, timeout: float = 60.0) -> None:
        store_barrier(self.spec.store_addr, f"mwctl/{self.spec.run_id}/{name}", parties, timeout)


def store_barrier(store_addr: str, key: str, parties: int, timeout: float) -> None:
    """
    Blocks until `parties` callers have arrived at `key`.

    Raises:
        MwTimeoutError: Not everyone arrived in time.
    """
    with StoreClient(store_addr) as store:
        arrived = store.add(f"{key}/arrived", 1)
        if arrived >= parties:
            store.set(f"{key}/open", b"1")
        else:
            store.wait(f"{key}/open", timeout)


def message_template(size: int) -> BufferTemplate:
    return BufferTemplate(DType.F32, max(1, size // DType.F32.width))


def message_buffer(index: int, size: int) -> Buffer:
    """An F32 payload of `size` bytes whose first element carries `index`."""
    values = np.zeros(message_template(size).count, dtype=np.float32)
    values[0] = index
    return Buffer.from_array(values, DType.F32)


def message_index(buf: Buffer) -> int:
    return int(buf.to_array()[0])


def self_kill() -> None:
    """Dies the way a crashed worker does: no cleanup, no goodbye."""
    sys.stdout.flush()
    os.kill(os.getpid(), signal.SIGKILL)


def pace(started: float, index: int, rate: Optional[float]) -> None:
    """Sleeps until message `index` (0-based) is due at `rate` messages per second."""
    if not rate:
        return
    delay = started + index / rate - time.monotonic()
    if delay > 0:
        time.sleep(delay)


def ensure_store(addr: str) -> Optional[StoreServer]:
    """
    Returns None when a store already answers at `addr`, else starts one in-process.

    Raises:
        OSError: `addr` is neither served nor bindable.
    """
    if wait_for_store(addr, 0.5):
        logger.info(f"Using rendezvous store at {addr}.")
        return None
    server = StoreServer(addr).start()
    logger.info(f"Started in-process rendezvous store at {server.address}.")
    return server


@dataclass
class RoleProcess:
    role: str
    argv: List[str]
    proc: Optional[subprocess.Popen] = None
    records: List[Dict[str, Any]] = field(default_factory=list)
    reader: Optional[threading.Thread] = None
    started_at: float = 0.0

    @property
    def returncode(self) -> Optional[int]:
        return None if self.proc is None else self.proc.returncode

    @property
    def killed(self) -> bool:
        return self.returncode == -signal.SIGKILL


class Launcher:
    """
    Runs the roles of one scenario as separate OS processes.

    Every role re-executes main.py with `--role`; its stdout is parsed as JSON
    lines, its stderr (logs) is inherited.
    """

    def __init__(self, command: str, passthrough: Sequence[str], store_addr: str, out: Optional[str] = None):
        self.command = command
        self.passthrough = list(passthrough)
        self.store_addr = store_addr
        self.run_id = uuid.uuid4().hex[:8]
        self.out = out
        self.roles: Dict[str, RoleProcess] = {}
        self._server: Optional[StoreServer] = None

    def __enter__(self) -> "Launcher":
        self._server = ensure_store(self.store_addr)
        return self

    def __exit__(self, *exc) -> None:
        self.terminate()
        if self._server is not None:
            self._server.stop()

    def spawn(self, role: str, extra: Iterable[str] = ()) -> RoleProcess:
        argv = [
            sys.executable, str(MAIN_SCRIPT), self.command, *self.passthrough, *extra,
            "--role", role, "--store", self.store_addr, "--run-id", self.run_id,
        ]
        rp = RoleProcess(role, argv)
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        rp.proc = subprocess.Popen(argv, stdout=subprocess.PIPE, text=True, env=env)
        rp.started_at = time.time()
        rp.reader = threading.Thread(target=self._read, args=(rp,), name=f"mwctl-read-{role}", daemon=True)
        rp.reader.start()
        self.roles[role] = rp
        logger.info(f"Spawned role {role} (pid {rp.proc.pid}).")
        return rp

    def _read(self, rp: RoleProcess) -> None:
        for line in rp.proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                logger.warning(f"Role {rp.role} printed a non-JSON line: {line[:120]}")
                continue
            rp.records.append(record)
            if self.out:
                with open(self.out, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")

    def wait_for(self, role: str, timeout: float) -> Optional[int]:
        rp = self.roles[role]
        try:
            rp.proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            return None
        return rp.proc.returncode

    def wait_all(self, timeout: float) -> Dict[str, Optional[int]]:
        """Waits for every role; roles still running at the deadline are killed and reported as None."""
        deadline = time.monotonic() + timeout
        codes: Dict[str, Optional[int]] = {}
        for role, rp in self.roles.items():
            try:
                codes[role] = rp.proc.wait(timeout=max(0.0, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                logger.error(f"Role {role} did not finish in time; killing it.")
                rp.proc.kill()
                rp.proc.wait()
                codes[role] = None
        for rp in self.roles.values():
            if rp.reader is not None:
                rp.reader.join(timeout=5)
        return codes

    def terminate(self) -> None:
        for rp in self.roles.values():
            if rp.proc is not None and rp.proc.poll() is None:
                rp.proc.kill()
                rp.proc.wait()

    def records(self, role: Optional[str] = None, event: Optional[str] = None) -> List[Dict[str, Any]]:
        roles = [self.roles[role]] if role else list(self.roles.values())
        out = [r for rp in roles for r in rp.records]
        if event is not None:
            out = [r for r in out if r.get("event") == event]
        return sorted(out, key=lambda r: r.get("ts", 0.0))


def environment_failed(codes: Dict[str, Optional[int]]) -> bool:
    return any(code == EXIT_ENV for code in codes.values())


def run_role(spec: ScenarioSpec, body) -> int:
    """Runs `body(ctx)` for one role with the exit-code mapping shared by all scenarios."""
    ctx = RoleContext(spec, RecordSink())
    try:
        return body(ctx)
    except MwTimeoutError as e:
        ctx.emit("error", kind=e.kind.value, error=str(e))
        logger.error(f"Role {spec.role} timed out: {e}")
        return EXIT_ENV if e.world is None else EXIT_FAIL
    except MwError as e:
        ctx.emit("error", kind=e.kind.value, error=str(e))
        logger.error(f"Role {spec.role} failed: {e}")
        return EXIT_FAIL
