import socket

import pytest
from pydantic import ValidationError

from schemas.watchdog_schema import WatchdogConfig
from services.store_service import decode_counter
from services.watchdog import Watchdog, heartbeat_key
from tests.conftest import wait_until

CONFIG = WatchdogConfig(heartbeat_interval=0.1, liveness_timeout=0.5, scan_interval=0.05)


class FakeClock:
    def __init__(self):
        self.now = 100.0

    def __call__(self) -> float:
        return self.now


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def suspects():
    return []


@pytest.fixture
def watchdog(clock, suspects):
    dog = Watchdog(CONFIG, notify=lambda *args: suspects.append(args), clock=clock)
    yield dog
    dog.stop()


def test_config_requires_two_beats_per_timeout():
    with pytest.raises(ValidationError):
        WatchdogConfig(heartbeat_interval=1.0, liveness_timeout=1.5, scan_interval=0.5)
    WatchdogConfig(heartbeat_interval=1.0, liveness_timeout=2.0, scan_interval=0.5)


# Test case for publishing
def test_publish_increments_own_counter(watchdog, store, store_client):
    watchdog.register("w1", 0, 0, 2, store)
    watchdog.publish()
    watchdog.publish()
    assert decode_counter(store_client.get(heartbeat_key("w1", 0, 0))) == 2


# Test cases for staleness on the local clock
def test_fresh_peer_is_not_suspected(watchdog, clock, suspects, store, store_client):
    watchdog.register("w1", 0, 0, 2, store)
    for _ in range(5):
        store_client.add(heartbeat_key("w1", 0, 1), 1)
        clock.now += 0.3
        watchdog.scan()
    assert suspects == []


def test_stale_peer_reported_once(watchdog, clock, suspects, store, store_client):
    watchdog.register("w1", 7, 0, 3, store)
    store_client.add(heartbeat_key("w1", 7, 1), 1)
    store_client.add(heartbeat_key("w1", 7, 2), 1)
    watchdog.scan()
    clock.now += 0.3
    store_client.add(heartbeat_key("w1", 7, 1), 1)
    watchdog.scan()
    assert suspects == []
    clock.now += 0.3
    watchdog.scan()
    assert len(suspects) == 1
    world, epoch, rank, _reason = suspects[0]
    assert (world, epoch, rank) == ("w1", 7, 2)
    clock.now += 5
    watchdog.scan()
    assert len(suspects) == 1


def test_new_epoch_can_be_reported_again(watchdog, clock, suspects, store):
    watchdog.register("w1", 0, 0, 2, store)
    clock.now += 1
    watchdog.scan()
    watchdog.register("w1", 1, 0, 2, store)
    clock.now += 1
    watchdog.scan()
    assert [s[1] for s in suspects] == [0, 1]


def test_counter_going_backwards_does_not_refresh(watchdog, clock, suspects, store, store_client):
    watchdog.register("w1", 0, 0, 2, store)
    store_client.add(heartbeat_key("w1", 0, 1), 10)
    watchdog.scan()
    store_client.add(heartbeat_key("w1", 0, 1), -5)
    clock.now += 0.6
    watchdog.scan()
    assert [s[2] for s in suspects] == [1]


def test_unregistered_world_is_ignored(watchdog, clock, suspects, store):
    watchdog.register("w1", 0, 0, 2, store)
    watchdog.unregister("w1")
    clock.now += 1
    watchdog.scan()
    assert not watchdog.on_suspect("w1", 1)
    assert suspects == []


def test_unregister_forgets_reported_suspects(watchdog, clock, suspects, store):
    watchdog.register("w1", 0, 0, 2, store)
    watchdog.register("w2", 0, 0, 2, store)
    clock.now += 1
    watchdog.scan()
    assert sorted(s[0] for s in suspects) == ["w1", "w2"]
    watchdog.unregister("w1")
    assert watchdog._reported == {("w2", 0)}
    watchdog.register("w1", 0, 0, 2, store)
    clock.now += 1
    watchdog.scan()
    assert sorted(s[0] for s in suspects) == ["w1", "w1", "w2"]


# Self-suspicion when the store is gone
def test_unreachable_store_suspects_self(watchdog, clock, suspects):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        dead = f"127.0.0.1:{s.getsockname()[1]}"
    watchdog.register("w1", 0, 1, 2, dead)
    watchdog.publish()
    assert suspects == []
    clock.now += 0.6
    watchdog.publish()
    assert [(s[0], s[2]) for s in suspects] == [("w1", 1)]


# Thread lifecycle
def test_stop_is_idempotent_and_keeps_keys(store, store_client):
    dog = Watchdog(CONFIG)
    dog.register("w1", 0, 0, 2, store)
    dog.start()
    assert wait_until(lambda: store_client.get(heartbeat_key("w1", 0, 0)) is not None)
    dog.stop()
    dog.stop()
    assert store_client.get(heartbeat_key("w1", 0, 0)) is not None
