import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Sequence

import pytest

from schemas.watchdog_schema import WatchdogConfig
from schemas.world_schema import WorldDescriptor
from services.store_service import StoreClient, StoreServer
from services.world_manager import WorldManager

FIXTURES = Path(__file__).parent / "fixtures"

# Short timings so failure detection fits in a unit test
FAST_WATCHDOG = WatchdogConfig(heartbeat_interval=0.1, liveness_timeout=0.6, scan_interval=0.05)


def wait_until(predicate: Callable[[], bool], timeout: float = 5.0, period: float = 0.01) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(period)
    return predicate()


@pytest.fixture
def fixture_bytes() -> Callable[[str], bytes]:
    return lambda name: (FIXTURES / name).read_bytes()


# In-process rendezvous store on an ephemeral port
@pytest.fixture
def store():
    server = StoreServer("127.0.0.1:0").start()
    try:
        yield server.address
    finally:
        server.stop()


@pytest.fixture
def store_client(store):
    client = StoreClient(store, timeout=2.0)
    try:
        yield client
    finally:
        client.close()


# Factory for WorldManagers that are shut down after the test
@pytest.fixture
def make_manager():
    managers: List[WorldManager] = []

    def factory(**kwargs) -> WorldManager:
        kwargs.setdefault("watchdog_config", FAST_WATCHDOG)
        kwargs.setdefault("poller_yield", True)
        manager = WorldManager(**kwargs)
        managers.append(manager)
        return manager

    yield factory
    for manager in managers:
        manager.shutdown(remove_worlds=True)


# Initializes one world across several managers concurrently; rank i is managers[i]
@pytest.fixture
def init_world(store):
    def initialize(managers: Sequence[WorldManager], name: str, timeout: float = 10.0) -> List[float]:
        with ThreadPoolExecutor(max_workers=len(managers)) as pool:
            futures = [
                pool.submit(
                    manager.initialize_world,
                    WorldDescriptor(name=name, size=len(managers), my_rank=rank, store_addr=store),
                    timeout,
                )
                for rank, manager in enumerate(managers)
            ]
            return [future.result() for future in futures]

    return initialize
