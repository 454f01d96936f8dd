import threading

import pytest

from models.buffer import BufferTemplate, DType
from models.world import WorldStatus
from schemas.world_schema import WorldDescriptor
from services.store_service import decode_counter
from services.watchdog import heartbeat_key
from services.world_manager import addr_key, epoch_key, world_prefix
from tests.conftest import wait_until
from utils.exceptions import (
    MwTimeoutError,
    ProtocolError,
    RankConflictError,
    RemoteWorkerError,
    SizeMismatchError,
    UnknownWorldError,
    WorldExistsError,
)


def _descriptor(store: str, name: str = "w1", size: int = 2, rank: int = 0) -> WorldDescriptor:
    return WorldDescriptor(name=name, size=size, my_rank=rank, store_addr=store)


# Test case for a normal rendezvous
def test_initialize_world_reaches_ready(make_manager, init_world, store_client):
    managers = [make_manager(), make_manager()]
    latencies = init_world(managers, "w1")
    assert all(latency > 0 for latency in latencies)
    for rank, manager in enumerate(managers):
        assert manager.world_status("w1") is WorldStatus.READY
        entry = manager.current_entry("w1")
        assert entry.epoch == 0
        assert sorted(entry.peers) == [0, 1]
        assert store_client.get(addr_key("w1", 0, rank)) == str(entry.peers[rank]).encode()
    assert managers[0].worlds() == {"w1": WorldStatus.READY}


def test_duplicate_initialize_is_refused(make_manager, init_world, store):
    managers = [make_manager(), make_manager()]
    init_world(managers, "w1")
    with pytest.raises(WorldExistsError):
        managers[0].initialize_world(_descriptor(store), timeout=1)


def test_invalid_descriptor_is_a_protocol_error(make_manager, store):
    with pytest.raises(ProtocolError):
        make_manager().initialize_world(_descriptor(store, size=1))


# Rendezvous failures
def test_missing_peer_times_out_and_cleans_up(make_manager, store, store_client):
    manager = make_manager()
    with pytest.raises(MwTimeoutError):
        manager.initialize_world(_descriptor(store), timeout=0.5)
    assert manager.world_status("w1") is WorldStatus.BROKEN
    assert store_client.get(addr_key("w1", 0, 0)) is None
    assert decode_counter(store_client.get(f"{world_prefix('w1', 0)}joined")) == 0


def test_size_disagreement(make_manager, store, store_client):
    store_client.set(f"{world_prefix('w1', 0)}size", "3")
    with pytest.raises(SizeMismatchError):
        make_manager().initialize_world(_descriptor(store), timeout=1)


def test_rank_already_claimed(make_manager, store, store_client):
    store_client.set(addr_key("w1", 0, 0), "10.9.9.9:1")
    with pytest.raises(RankConflictError):
        make_manager().initialize_world(_descriptor(store), timeout=1)


def test_submit_while_initializing(make_manager, store):
    manager = make_manager()
    failures = []

    def attempt():
        try:
            manager.initialize_world(_descriptor(store), timeout=1.0)
        except MwTimeoutError as e:
            failures.append(e)

    worker = threading.Thread(target=attempt)
    worker.start()
    assert wait_until(lambda: manager.worlds().get("w1") is WorldStatus.INITIALIZING)
    with pytest.raises(ProtocolError) as exc:
        manager.communicator().recv("w1", 1, BufferTemplate(DType.I32, 1))
    assert "not ready" in str(exc.value)
    worker.join(timeout=5)
    assert len(failures) == 1


# Removal and re-creation
def test_remove_world_retires_epoch_once(make_manager, init_world, store_client):
    managers = [make_manager(), make_manager()]
    init_world(managers, "w1")
    for manager in managers:
        manager.remove_world("w1")
        manager.remove_world("w1")
    assert decode_counter(store_client.get(epoch_key("w1"))) == 1
    assert store_client.get(f"{world_prefix('w1', 0)}size") is None
    assert store_client.get(heartbeat_key("w1", 0, 0)) is None
    assert managers[0].world_status("w1") is WorldStatus.REMOVED

    init_world(managers, "w1")
    assert [m.current_entry("w1").epoch for m in managers] == [1, 1]
    assert managers[1].world_status("w1") is WorldStatus.READY


def test_remove_unknown_world(make_manager):
    with pytest.raises(UnknownWorldError):
        make_manager().remove_world("never")
    with pytest.raises(UnknownWorldError):
        make_manager().world_status("never")


# Watchdog integration
def test_silent_peer_is_detected_by_heartbeat(make_manager, init_world):
    managers = [make_manager(), make_manager()]
    init_world(managers, "w1")
    managers[1].watchdog.stop()
    assert wait_until(lambda: managers[0].world_status("w1") is WorldStatus.BROKEN, timeout=5)
    cause = managers[0].current_entry("w1").cause
    assert isinstance(cause, RemoteWorkerError)
    assert "rank 1" in str(cause)


def test_mark_broken_is_idempotent(make_manager, init_world):
    managers = [make_manager(), make_manager()]
    init_world(managers, "w1")
    first = RemoteWorkerError("first", world="w1")
    managers[0].mark_broken("w1", first)
    managers[0].mark_broken("w1", RemoteWorkerError("second", world="w1"))
    assert managers[0].current_entry("w1").cause is first
    assert "w1" not in managers[0].watchdog.watched()
