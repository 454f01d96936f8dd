import threading
import time
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from typing import Dict, Optional

from models.world import WorldEntry, WorldStatus, parse_addr
from schemas.watchdog_schema import WatchdogConfig
from schemas.world_schema import WorldDescriptor, validate_descriptor
from services.store_service import StoreClient
from services.transport_service import listen
from services.watchdog import Watchdog
from services.world_communicator import WorldCommunicator
from utils import metrics
from utils.config import settings
from utils.exceptions import (
    AbortedError,
    BrokenWorldError,
    MwError,
    MwTimeoutError,
    ProtocolError,
    RankConflictError,
    RemoteWorkerError,
    SizeMismatchError,
    UnknownWorldError,
    WorldExistsError,
)
from utils.logger import logger


def epoch_key(name: str) -> str:
    return f"world/{name}/epoch"


def world_prefix(name: str, epoch: int) -> str:
    return f"world/{name}/{epoch}/"


def addr_key(name: str, epoch: int, rank: int) -> str:
    return f"{world_prefix(name, epoch)}rank/{rank}/addr"


class WorldManager:
    """
    Lifecycle authority for every world this process belongs to.

    The registry maps world name to its live WorldEntry. Initialization runs on
    a background executor thread (the caller waits on its future) so
    collectives in other worlds keep moving on the poller while a rendezvous
    blocks. The watchdog reports stale peers back through mark_broken.
    """

    def __init__(self, watchdog_config: Optional[WatchdogConfig] = None, poller_yield: Optional[bool] = None,
                 op_timeout: Optional[float] = None, start: bool = True):
        self._lock = threading.RLock()
        self._registry: Dict[str, WorldEntry] = {}
        self._init_pool = ThreadPoolExecutor(max_workers=16, thread_name_prefix="mw-init")
        self._communicator = WorldCommunicator(self, poller_yield=poller_yield, op_timeout=op_timeout)
        self._watchdog = Watchdog(watchdog_config, notify=self._on_suspect)
        self._closed = False
        if start:
            self.start()

    def start(self) -> "WorldManager":
        self._communicator.start()
        self._watchdog.start()
        return self

    @property
    def watchdog(self) -> Watchdog:
        return self._watchdog

    # registry

    def communicator(self) -> WorldCommunicator:
        return self._communicator

    def world_status(self, name: str) -> WorldStatus:
        with self._lock:
            entry = self._registry.get(name)
        if entry is None:
            raise UnknownWorldError(name)
        return entry.status

    def worlds(self) -> Dict[str, WorldStatus]:
        """Snapshot of every registered world and its status."""
        with self._lock:
            return {name: entry.status for name, entry in self._registry.items()}

    def current_entry(self, name: str) -> Optional[WorldEntry]:
        with self._lock:
            return self._registry.get(name)

    def lookup_for_submit(self, name: str) -> WorldEntry:
        with self._lock:
            entry = self._registry.get(name)
        if entry is None or entry.status == WorldStatus.REMOVED:
            raise UnknownWorldError(name)
        if entry.status == WorldStatus.BROKEN:
            raise BrokenWorldError(name, cause=entry.cause)
        if entry.status == WorldStatus.INITIALIZING:
            raise ProtocolError("world not ready", world=name)
        return entry

    def _refresh_gauge(self) -> None:
        counts = {status: 0 for status in WorldStatus}
        for entry in self._registry.values():
            counts[entry.status] += 1
        for status, count in counts.items():
            metrics.worlds.labels(status=status.value).set(count)

    # lifecycle

    def initialize_world(self, descriptor: WorldDescriptor, timeout: Optional[float] = None) -> float:
        """
        Joins `descriptor.name` through the store rendezvous and blocks until Ready.

        Args:
            descriptor (WorldDescriptor): World to join.
            timeout (Optional[float]): Seconds to wait for every member; MW_INIT_TIMEOUT_MS by default.

        Returns:
            float: Join latency in seconds, from this call to Ready.

        Raises:
            ProtocolError: Invalid descriptor.
            WorldExistsError: The name is Initializing, Ready or Broken here.
            MwTimeoutError: Peers did not arrive in time; the entry is left Broken.
            SizeMismatchError, RankConflictError: Another member disagrees on the world's shape.
        """
        validate_descriptor(descriptor)
        if timeout is None:
            timeout = settings.MW_INIT_TIMEOUT_MS / 1000.0
        with self._lock:
            existing = self._registry.get(descriptor.name)
            if existing is not None and existing.status != WorldStatus.REMOVED:
                raise WorldExistsError(descriptor.name)
            entry = WorldEntry(descriptor=descriptor)
            self._registry[descriptor.name] = entry
            self._refresh_gauge()
        logger.info(f"Initializing world {descriptor.name} as rank {descriptor.my_rank}/{descriptor.size}.")
        return self._init_pool.submit(self._rendezvous, entry, timeout).result()

    def _rendezvous(self, entry: WorldEntry, timeout: float) -> float:
        started = time.monotonic()
        deadline = started + timeout
        d = entry.descriptor
        name, rank = d.name, d.my_rank

        def remaining() -> float:
            left = deadline - time.monotonic()
            if left <= 0:
                raise MwTimeoutError(detail=f"peers did not join within {timeout}s.", world=name)
            return left

        store = StoreClient(d.store_addr)
        published = counted = False
        base = ""
        try:
            # Bind before publishing so the advertised address is connectable.
            try:
                entry.listener = listen(
                    d.my_listen_addr, name, rank,
                    on_connection=partial(self._communicator.accept_connection, entry),
                    accept_rank=lambda r: 0 <= r < rank,
                    inbox_limit=self._communicator.inbox_limit,
                )
            except OSError as e:
                raise ProtocolError(f"cannot listen on {d.my_listen_addr}: {e}", world=name)
            entry.epoch = store.add(epoch_key(name), 0)
            base = world_prefix(name, entry.epoch)

            agreed = store.get(f"{base}size")
            if agreed is None:
                store.set(f"{base}size", str(d.size))
            elif int(agreed) != d.size:
                raise SizeMismatchError(f"store says size {int(agreed)}, this member says {d.size}.", world=name)

            my_addr = str(entry.listener.addr)
            claimed = store.get(addr_key(name, entry.epoch, rank))
            if claimed is not None and claimed.decode() != my_addr:
                raise RankConflictError(f"rank {rank} already claimed by {claimed.decode()}.", world=name)
            store.set(addr_key(name, entry.epoch, rank), my_addr)
            published = True

            joined = store.add(f"{base}joined", 1)
            counted = True
            if joined >= d.size:
                store.set(f"{base}ready", b"1")
            else:
                store.wait(f"{base}ready", remaining())
            for peer in range(d.size):
                raw = store.wait(addr_key(name, entry.epoch, peer), remaining())
                entry.peers[peer] = parse_addr(raw.decode())
        except MwError as e:
            if e.world is None:
                e.world = name
            self._abandon_rendezvous(entry, store, published, counted, base, e)
            raise
        finally:
            store.close()

        with self._lock:
            ready = entry.transition(WorldStatus.READY)
            self._refresh_gauge()
        if not ready:
            if entry.listener is not None:
                entry.listener.close()
            if entry.status == WorldStatus.REMOVED:
                raise AbortedError(name, detail="world removed during initialization.")
            raise BrokenWorldError(name, cause=entry.cause)
        self._watchdog.register(name, entry.epoch, rank, d.size, d.store_addr)
        latency = time.monotonic() - started
        logger.info(f"World {name} epoch {entry.epoch} Ready in {latency:.3f}s.")
        return latency

    def _abandon_rendezvous(self, entry: WorldEntry, store: StoreClient, published: bool, counted: bool,
                            base: str, error: MwError) -> None:
        d = entry.descriptor
        try:
            if published:
                store.delete(addr_key(d.name, entry.epoch, d.my_rank))
            if counted:
                store.add(f"{base}joined", -1)
        except MwError as cleanup_error:
            logger.warning(f"Rendezvous cleanup for world {d.name} failed: {cleanup_error}")
        if entry.listener is not None:
            entry.listener.close()
        with self._lock:
            if entry.transition(WorldStatus.BROKEN):
                entry.cause = error
                metrics.worlds_broken.inc()
            self._refresh_gauge()
        logger.error(f"Initialization of world {d.name} failed: {error}")

    def mark_broken(self, name: str, cause: MwError, entry: Optional[WorldEntry] = None) -> None:
        """
        Quarantines a world: Broken status, every pending handle fails with
        BrokenWorld carrying `cause`. Idempotent; other worlds are untouched.
        """
        with self._lock:
            current = self._registry.get(name)
            if current is None or (entry is not None and current is not entry):
                return
            if current.status not in (WorldStatus.READY, WorldStatus.INITIALIZING):
                return
            current.cause = cause
            current.transition(WorldStatus.BROKEN)
            self._refresh_gauge()
        metrics.worlds_broken.inc()
        logger.warning(f"World {name} is Broken: {cause}")
        self._watchdog.unregister(name)
        self._communicator.abort_world(current, removed=False)

    def remove_world(self, name: str) -> None:
        """
        Retires a world in any state: pending ops fail with Aborted, BYE is sent,
        the listener closes and this incarnation's store keys are deleted.

        Raises:
            UnknownWorldError: The name was never created here.
        """
        with self._lock:
            entry = self._registry.get(name)
            if entry is None:
                raise UnknownWorldError(name)
            if entry.status == WorldStatus.REMOVED:
                return
            if entry.status == WorldStatus.INITIALIZING:
                entry.transition(WorldStatus.BROKEN)
            entry.transition(WorldStatus.REMOVED)
            self._refresh_gauge()
        self._watchdog.unregister(name)
        if entry.listener is not None:
            entry.listener.close()
        self._communicator.abort_world(entry, removed=True)
        self._retire_in_store(entry)
        logger.info(f"World {name} epoch {entry.epoch} removed.")

    def _retire_in_store(self, entry: WorldEntry) -> None:
        name, epoch = entry.name, entry.epoch
        try:
            with StoreClient(entry.descriptor.store_addr) as store:
                # Only the first remover of an incarnation bumps the epoch.
                if store.add(f"world/{name}/retired/{epoch}", 1) == 1:
                    store.add(epoch_key(name), 1)
                store.delete_prefix(world_prefix(name, epoch))
                store.delete_prefix(f"heartbeat/{name}/{epoch}/")
        except MwError as e:
            logger.warning(f"Store cleanup for world {name} skipped: {e}")

    def _on_suspect(self, world: str, epoch: int, rank: int, reason: str) -> None:
        entry = self.current_entry(world)
        if entry is None or entry.epoch != epoch:
            return
        if rank == entry.my_rank:
            cause: MwError = MwTimeoutError(detail=reason, world=world)
        else:
            cause = RemoteWorkerError(detail=f"rank {rank} missed heartbeats: {reason}", world=world)
        self.mark_broken(world, cause, entry=entry)

    def shutdown(self, remove_worlds: bool = False) -> None:
        """Stops the watchdog and the poller; optionally removes every world first."""
        if self._closed:
            return
        self._closed = True
        if remove_worlds:
            for name in list(self.worlds()):
                self.remove_world(name)
        self._watchdog.stop()
        self._communicator.stop()
        with self._lock:
            entries = list(self._registry.values())
        for entry in entries:
            if entry.listener is not None:
                entry.listener.close()
            for conn in list(entry.connections.values()):
                conn.close()
        self._init_pool.shutdown(wait=False)

    def __enter__(self) -> "WorldManager":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown(remove_worlds=True)
