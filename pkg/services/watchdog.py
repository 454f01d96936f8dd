"""
Heartbeat watchdog.

One daemon thread per process publishes an i64 counter per Ready world at
heartbeat/<world>/<epoch>/<rank> and scans peers' counters. A peer is stale
when its counter has not moved for liveness_timeout of *local* monotonic
time; peers never write timestamps, so wall-clock skew is irrelevant.
"""
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from schemas.watchdog_schema import WatchdogConfig
from services.store_service import StoreClient, decode_counter
from utils import metrics
from utils.exceptions import MwError, ProtocolError
from utils.logger import logger

# notify(world, epoch, rank, reason); rank is our own rank for self-suspicion
SuspectCallback = Callable[[str, int, int, str], None]


def heartbeat_key(world: str, epoch: int, rank: int) -> str:
    return f"heartbeat/{world}/{epoch}/{rank}"


@dataclass
class HeartbeatRecord:
    world: str
    rank: int
    counter: int = 0
    last_observed_change: float = 0.0


@dataclass
class _Watched:
    world: str
    epoch: int
    my_rank: int
    size: int
    store_addr: str
    records: Dict[int, HeartbeatRecord] = field(default_factory=dict)


class Watchdog:
    """
    Publishes heartbeats and reports stale peers to `notify`, at most once per
    (world, epoch).

    Args:
        config (WatchdogConfig): Timings.
        notify (SuspectCallback): Called from the watchdog thread, outside its lock.
        clock (Callable[[], float]): Monotonic clock; injectable for tests.
    """

    def __init__(self, config: Optional[WatchdogConfig] = None, notify: Optional[SuspectCallback] = None,
                 clock: Callable[[], float] = time.monotonic):
        self.config = config or WatchdogConfig()
        self.notify = notify
        self.clock = clock
        self._lock = threading.Lock()
        self._worlds: Dict[str, _Watched] = {}
        self._reported: Set[Tuple[str, int]] = set()
        self._clients: Dict[str, StoreClient] = {}
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._last_publish_ok = clock()

    # registration

    def register(self, world: str, epoch: int, my_rank: int, size: int, store_addr: str) -> None:
        now = self.clock()
        watched = _Watched(world, epoch, my_rank, size, store_addr)
        for rank in range(size):
            if rank != my_rank:
                watched.records[rank] = HeartbeatRecord(world, rank, last_observed_change=now)
        with self._lock:
            self._worlds[world] = watched
        logger.debug(f"Watchdog tracking world {world} epoch {epoch} ({size - 1} peers).")

    def unregister(self, world: str) -> None:
        with self._lock:
            self._worlds.pop(world, None)
            self._reported = {key for key in self._reported if key[0] != world}

    def watched(self) -> List[str]:
        with self._lock:
            return sorted(self._worlds)

    # thread

    def start(self) -> "Watchdog":
        if self._thread is None:
            self._last_publish_ok = self.clock()
            self._thread = threading.Thread(target=self._run, name="mw-watchdog", daemon=True)
            self._thread.start()
        return self

    def stop(self) -> None:
        """Stops publishing and scanning. Heartbeat keys stay in the store."""
        self._stop.set()
        thread, self._thread = self._thread, None
        if thread is not None and thread is not threading.current_thread():
            thread.join(timeout=5)
        for client in list(self._clients.values()):
            client.close()
        self._clients.clear()

    def _run(self) -> None:
        cfg = self.config
        next_beat = next_scan = self.clock()
        while not self._stop.is_set():
            now = self.clock()
            if now >= next_beat:
                self.publish()
                next_beat = max(next_beat + cfg.heartbeat_interval, now)
            if now >= next_scan:
                self.scan()
                next_scan = max(next_scan + cfg.scan_interval, now)
            self._stop.wait(max(0.0, min(next_beat, next_scan) - self.clock()))

    def _client(self, addr: str) -> StoreClient:
        client = self._clients.get(addr)
        if client is None:
            client = StoreClient(addr, timeout=self.config.heartbeat_interval)
            self._clients[addr] = client
        return client

    # rounds

    def publish(self) -> None:
        """One heartbeat round; sustained failure reports every world suspect locally."""
        with self._lock:
            worlds = list(self._worlds.values())
        failed = False
        for w in worlds:
            try:
                self._client(w.store_addr).add(heartbeat_key(w.world, w.epoch, w.my_rank), 1)
                metrics.heartbeats_published.inc()
            except MwError as e:
                failed = True
                logger.warning(f"Heartbeat for world {w.world} failed: {e}")
        now = self.clock()
        if not failed:
            self._last_publish_ok = now
        elif now - self._last_publish_ok > self.config.liveness_timeout:
            for w in worlds:
                self.on_suspect(w.world, w.my_rank, "store unreachable from this member")

    def scan(self) -> None:
        """Reads every peer counter once and reports those stale past liveness_timeout."""
        with self._lock:
            worlds = list(self._worlds.values())
        for w in worlds:
            try:
                counters = {
                    rank: self._client(w.store_addr).get(heartbeat_key(w.world, w.epoch, rank))
                    for rank in w.records
                }
            except MwError as e:
                logger.debug(f"Scan of world {w.world} skipped: {e}")
                continue
            now = self.clock()
            for rank, raw in counters.items():
                record = w.records[rank]
                if raw is not None:
                    try:
                        counter = decode_counter(raw)
                    except ProtocolError:
                        logger.warning(f"Heartbeat of rank {rank} in world {w.world} is not a counter.")
                        counter = record.counter
                    if counter > record.counter:
                        record.counter = counter
                        record.last_observed_change = now
                    elif counter < record.counter:
                        logger.warning(f"Heartbeat of rank {rank} in world {w.world} went backwards; ignoring.")
                if now - record.last_observed_change > self.config.liveness_timeout:
                    self.on_suspect(w.world, rank, f"no heartbeat for {now - record.last_observed_change:.2f}s")

    def on_suspect(self, world: str, rank: int, reason: str = "stale heartbeat") -> bool:
        """
        Reports (world, rank) once per (world, epoch); unregistered worlds are ignored.

        Returns:
            bool: True if a notification was sent.
        """
        with self._lock:
            w = self._worlds.get(world)
            if w is None or (world, w.epoch) in self._reported:
                return False
            self._reported.add((world, w.epoch))
            epoch = w.epoch
        logger.warning(f"World {world} epoch {epoch}: rank {rank} suspect ({reason}).")
        if self.notify is not None:
            try:
                self.notify(world, epoch, rank, reason)
            except Exception as e:
                logger.error(f"Suspect notification for world {world} failed: {e!r}")
        return True
