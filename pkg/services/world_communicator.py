import queue
import threading
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Deque, Dict, Optional, Sequence, Tuple

from models.buffer import Buffer, BufferTemplate, DType, ReduceOp
from models.work import ROOTED_OPS, CollectiveCall, OpClass, OpKind, WorkHandle, WorkState
from models.world import WorldEntry, WorldStatus
from services import collectives
from services.transport_service import Connection, ConnState, connect
from utils import metrics
from utils.config import settings
from utils.exceptions import (
    AbortedError,
    BrokenWorldError,
    MwError,
    MwTimeoutError,
    ProtocolError,
    RemoteWorkerError,
)
from utils.logger import logger

if TYPE_CHECKING:
    from services.world_manager import WorldManager

# Idle sleep used in spin-with-yield mode
YIELD_SLEEP = 0.0005


class _WorldContext:
    """KernelContext for one world incarnation; used only on the poller thread."""

    def __init__(self, comm: "WorldCommunicator", entry: WorldEntry):
        self.comm = comm
        self.entry = entry
        self.world = entry.name
        self.my_rank = entry.my_rank
        self.size = entry.size
        self._dials: Dict[int, Future] = {}

    def connection(self, peer: int):
        entry = self.entry
        while True:
            if entry.status == WorldStatus.BROKEN:
                raise BrokenWorldError(self.world, cause=entry.cause)
            if entry.status == WorldStatus.REMOVED:
                raise AbortedError(self.world)
            conn = entry.connections.get(peer)
            if conn is not None:
                return conn
            # The lower rank dials; the higher rank waits for the accept.
            if self.my_rank < peer:
                dial = self._dials.get(peer)
                if dial is None:
                    self._dials[peer] = self.comm.dial(entry, peer)
                elif dial.done():
                    del self._dials[peer]
                    self.comm.install(entry, dial.result())
                    continue
            yield


@dataclass
class _ClassQueue:
    """Submission-ordered calls of one op class; at most one of them runs at a time."""
    pending: Deque[Tuple[CollectiveCall, WorkHandle]] = field(default_factory=deque)
    active: Optional[Tuple[WorkHandle, Any, float]] = None


@dataclass
class _WorldQueue:
    entry: WorldEntry
    ctx: _WorldContext
    classes: Dict[OpClass, _ClassQueue] = field(default_factory=dict)


class WorldCommunicator:
    """
    Non-blocking collective surface over every world of one WorldManager.

    submit() and the op helpers return WorkHandles at once; a single poller
    thread starts kernels, advances them without blocking and settles their
    handles. Within a world each op class (sends to one peer, receives from
    one peer, collectives) runs one kernel at a time in submission order;
    different classes and different worlds progress side by side.
    """

    def __init__(self, manager: "WorldManager", poller_yield: Optional[bool] = None,
                 op_timeout: Optional[float] = None, inbox_limit: Optional[int] = None):
        self.manager = manager
        self.poller_yield = settings.MW_POLLER_YIELD if poller_yield is None else poller_yield
        if op_timeout is None and settings.MW_OP_DEFAULT_TIMEOUT_MS is not None:
            op_timeout = settings.MW_OP_DEFAULT_TIMEOUT_MS / 1000.0
        self.op_timeout = op_timeout
        self.inbox_limit = inbox_limit or settings.MW_INBOX_LIMIT_BYTES
        self.iterations = 0
        self._submissions: "queue.SimpleQueue[Tuple[WorldEntry, CollectiveCall, WorkHandle]]" = queue.SimpleQueue()
        self._incoming: "queue.SimpleQueue[Tuple[WorldEntry, Connection]]" = queue.SimpleQueue()
        self._aborts: "queue.SimpleQueue[Tuple[WorldEntry, bool]]" = queue.SimpleQueue()
        self._queues: Dict[int, _WorldQueue] = {}
        self._seq_lock = threading.Lock()
        self._call_seqs: Dict[Tuple[str, int, OpClass], int] = {}
        self._dialer = ThreadPoolExecutor(max_workers=8, thread_name_prefix="mw-dial")
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # lifecycle

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self.run_poller, name="mw-poller", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=5)
        self._dialer.shutdown(wait=False)

    # submission surface

    def submit(self, call: CollectiveCall) -> WorkHandle:
        """
        Queues a collective for the poller.

        Returns:
            WorkHandle: Pending handle; never waits on the network.

        Raises:
            UnknownWorldError: World never created or already removed.
            BrokenWorldError: World is Broken.
            ProtocolError: World still initializing, or the call is malformed for this rank.
        """
        entry = self.manager.lookup_for_submit(call.world)
        self._validate(entry, call)
        key = (entry.name, entry.epoch, call.op_class)
        with self._seq_lock:
            seq = self._call_seqs.get(key, 0)
            self._call_seqs[key] = seq + 1
        call = replace(call, call_seq=seq)
        handle = WorkHandle(call)
        self._submissions.put((entry, call, handle))
        metrics.ops_submitted.labels(op=call.op.value).inc()
        return handle

    def send(self, world: str, dst: int, buf: Buffer) -> WorkHandle:
        return self.submit(CollectiveCall(world, OpKind.SEND, buffer=buf, peer=dst))

    def recv(self, world: str, src: int, template: BufferTemplate) -> WorkHandle:
        return self.submit(CollectiveCall(world, OpKind.RECV, template=template, peer=src))

    def broadcast(self, world: str, root: int, buf: Buffer) -> WorkHandle:
        return self.submit(CollectiveCall(world, OpKind.BROADCAST, buffer=buf, peer=root))

    def all_reduce(self, world: str, buf: Buffer, op: ReduceOp = ReduceOp.SUM) -> WorkHandle:
        return self.submit(CollectiveCall(world, OpKind.ALL_REDUCE, buffer=buf, reduce_op=op))

    def reduce(self, world: str, root: int, buf: Buffer, op: ReduceOp = ReduceOp.SUM) -> WorkHandle:
        return self.submit(CollectiveCall(world, OpKind.REDUCE, buffer=buf, peer=root, reduce_op=op))

    def all_gather(self, world: str, buf: Buffer) -> WorkHandle:
        return self.submit(CollectiveCall(world, OpKind.ALL_GATHER, buffer=buf))

    def gather(self, world: str, root: int, buf: Buffer) -> WorkHandle:
        return self.submit(CollectiveCall(world, OpKind.GATHER, buffer=buf, peer=root))

    def scatter(self, world: str, root: int, parts: Optional[Sequence[Buffer]] = None,
                template: Optional[BufferTemplate] = None) -> WorkHandle:
        if template is None and parts:
            template = parts[0].template
        return self.submit(CollectiveCall(
            world, OpKind.SCATTER, parts=list(parts) if parts is not None else None, template=template, peer=root,
        ))

    def barrier(self, world: str) -> WorkHandle:
        """All members return once every member has entered the barrier."""
        return self.all_reduce(world, Buffer.from_values(DType.I32, [1]), ReduceOp.SUM)

    def wait(self, handle: WorkHandle, timeout: Optional[float] = None) -> Any:
        """Blocks the calling thread only; a timeout leaves the handle Pending."""
        return handle.wait(timeout)

    def poll(self, handle: WorkHandle) -> WorkState:
        return handle.poll()

    def _validate(self, entry: WorldEntry, call: CollectiveCall) -> None:
        size, me, world = entry.size, entry.my_rank, entry.name
        if call.op in (OpKind.SEND, OpKind.RECV):
            if call.peer is None or not 0 <= call.peer < size:
                raise ProtocolError(f"peer {call.peer} out of range for world size {size}.", world=world)
            if call.peer == me:
                raise ProtocolError(f"rank {me} cannot {call.op.value} to itself.", world=world)
        if call.op in ROOTED_OPS and (call.peer is None or not 0 <= call.peer < size):
            raise ProtocolError(f"root {call.peer} out of range for world size {size}.", world=world)
        if call.op in (OpKind.REDUCE, OpKind.ALL_REDUCE) and call.reduce_op is None:
            raise ProtocolError(f"{call.op.value} needs a reduce op.", world=world)
        if call.op == OpKind.RECV and call.template is None:
            raise ProtocolError("recv needs a template.", world=world)
        if call.op == OpKind.SCATTER:
            if call.peer == me:
                collectives.check_scatter_parts(world, size, call.parts)
            elif call.template is None:
                raise ProtocolError("non-root scatter needs a template.", world=world)
        elif call.op != OpKind.RECV and call.buffer is None:
            raise ProtocolError(f"{call.op.value} needs an input buffer.", world=world)

    # connection plumbing

    def accept_connection(self, entry: WorldEntry, conn: Connection) -> None:
        """Listener callback; the poller installs the connection."""
        self._incoming.put((entry, conn))

    def dial(self, entry: WorldEntry, peer: int) -> Future:
        addr = str(entry.peers[peer])
        return self._dialer.submit(connect, addr, entry.name, entry.my_rank, peer, inbox_limit=self.inbox_limit)

    def install(self, entry: WorldEntry, conn: Connection) -> None:
        if entry.status not in (WorldStatus.INITIALIZING, WorldStatus.READY) or self.manager.current_entry(entry.name) is not entry:
            conn.close()
            return
        if conn.peer_rank in entry.connections:
            logger.warning(f"Duplicate connection from rank {conn.peer_rank} in world {entry.name}; closing it.")
            conn.close()
            return
        entry.connections[conn.peer_rank] = conn
        self._queue_for(entry)
        logger.debug(f"Connection to rank {conn.peer_rank} open in world {entry.name}.")

    def abort_world(self, entry: WorldEntry, removed: bool) -> None:
        """Asks the poller to settle every handle of `entry` and close its connections."""
        self._aborts.put((entry, removed))

    # poller

    def run_poller(self) -> None:
        """
        Busy-wait service loop: drains submissions, advances every in-flight
        kernel by non-blocking steps and settles handles. Never sleeps in spin
        mode; in yield mode an idle iteration gives the core away briefly.
        """
        logger.info(f"Poller started ({'spin-with-yield' if self.poller_yield else 'spin'} mode).")
        while not self._stop.is_set():
            try:
                progressed = self._iterate()
            except Exception as e:
                logger.error(f"Poller iteration failed: {e!r}")
                progressed = False
            self.iterations += 1
            if not progressed:
                time.sleep(YIELD_SLEEP if self.poller_yield else 0)
        try:
            self._iterate()
        except Exception as e:
            logger.error(f"Final poller iteration failed: {e!r}")
        logger.info("Poller stopped.")

    def _queue_for(self, entry: WorldEntry) -> _WorldQueue:
        wq = self._queues.get(id(entry))
        if wq is None or wq.entry is not entry:
            wq = _WorldQueue(entry, _WorldContext(self, entry))
            self._queues[id(entry)] = wq
        return wq

    def _iterate(self) -> bool:
        progressed = False
        while True:
            try:
                entry, conn = self._incoming.get_nowait()
            except queue.Empty:
                break
            self.install(entry, conn)
            progressed = True
        while True:
            try:
                entry, call, handle = self._submissions.get_nowait()
            except queue.Empty:
                break
            wq = self._queue_for(entry)
            wq.classes.setdefault(call.op_class, _ClassQueue()).pending.append((call, handle))
            progressed = True
        while True:
            try:
                entry, removed = self._aborts.get_nowait()
            except queue.Empty:
                break
            self._abort(entry, removed)
            progressed = True
        for wq in list(self._queues.values()):
            if self._advance(wq):
                progressed = True
        return progressed

    def _terminal_error(self, entry: WorldEntry) -> MwError:
        if entry.status == WorldStatus.REMOVED:
            return AbortedError(entry.name)
        return BrokenWorldError(entry.name, cause=entry.cause)

    def _settle_error(self, handle: WorkHandle, error: MwError) -> None:
        if handle.set_error(error):
            metrics.ops_completed.labels(op=handle.op.value, outcome=error.kind.value).inc()

    def _abort(self, entry: WorldEntry, removed: bool) -> None:
        wq = self._queues.pop(id(entry), None)
        error = self._terminal_error(entry)
        if wq is not None:
            for cq in wq.classes.values():
                if cq.active is not None:
                    handle, gen, _ = cq.active
                    cq.active = None
                    gen.close()
                    self._settle_error(handle, error)
                for _call, handle in cq.pending:
                    self._settle_error(handle, error)
                cq.pending.clear()
        for conn in list(entry.connections.values()):
            conn.close(send_bye=removed)
        entry.connections.clear()
        with self._seq_lock:
            for key in [k for k in self._call_seqs if k[:2] == (entry.name, entry.epoch)]:
                del self._call_seqs[key]

    def _break(self, wq: _WorldQueue, error: MwError, observer: Optional[_ClassQueue] = None) -> None:
        """
        Fails the kernel that observed `error` (every running kernel when the
        poller's own read observed it) and breaks the world; the rest settle
        with BrokenWorld when the world is aborted.
        """
        for cq in wq.classes.values():
            if cq.active is None or (observer is not None and cq is not observer):
                continue
            handle, gen, _ = cq.active
            cq.active = None
            gen.close()
            self._settle_error(handle, error)
        self.manager.mark_broken(wq.entry.name, error, entry=wq.entry)

    def _advance(self, wq: _WorldQueue) -> bool:
        entry = wq.entry
        if entry.status in (WorldStatus.BROKEN, WorldStatus.REMOVED):
            self._abort(entry, entry.status == WorldStatus.REMOVED)
            return True
        progressed = False
        # Eager receive keeps peers' sends from waiting on our posted receives.
        # Frames a peer sent before failing stay deliverable; the world breaks
        # once they are consumed.
        for conn in list(entry.connections.values()):
            if conn.state != ConnState.OPEN:
                if not conn.buffered and conn.error is not None:
                    self._break(wq, conn.error)
                    return True
                continue
            try:
                if conn.read_step():
                    progressed = True
            except MwError as e:
                if not conn.buffered:
                    self._break(wq, e)
                    return True
                progressed = True
        for cq in list(wq.classes.values()):
            if self._step(wq, cq):
                progressed = True
            if entry.status != WorldStatus.READY:
                return True
        return progressed

    def _step(self, wq: _WorldQueue, cq: _ClassQueue) -> bool:
        """Starts or advances the running kernel of one op class."""
        entry = wq.entry
        if cq.active is None:
            if not cq.pending:
                return False
            call, handle = cq.pending.popleft()
            cq.active = (handle, collectives.kernel_for(wq.ctx, call), time.monotonic())
        handle, gen, started = cq.active
        try:
            next(gen)
        except StopIteration as done:
            cq.active = None
            if handle.set_result(done.value):
                metrics.ops_completed.labels(op=handle.op.value, outcome="Done").inc()
            return True
        except (RemoteWorkerError, MwTimeoutError) as e:
            self._break(wq, e, observer=cq)
            return True
        except (BrokenWorldError, AbortedError) as e:
            cq.active = None
            self._settle_error(handle, e)
            return True
        except ProtocolError as e:
            if any(c.state == ConnState.POISONED for c in entry.connections.values()):
                self._break(wq, e, observer=cq)
            else:
                cq.active = None
                self._settle_error(handle, e)
            return True
        except MwError as e:
            cq.active = None
            self._settle_error(handle, e)
            return True
        except Exception as e:
            logger.error(f"Kernel {handle.call.summary()} raised {e!r}")
            cq.active = None
            self._settle_error(handle, ProtocolError(f"kernel failed: {e}", world=entry.name))
            return True
        if self.op_timeout is not None and time.monotonic() - started > self.op_timeout:
            self._break(wq, MwTimeoutError(
                detail=f"{handle.call.summary()} exceeded {self.op_timeout}s.", world=entry.name,
            ), observer=cq)
            return True
        return False
