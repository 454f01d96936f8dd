import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from services.store_service import (
    Opcode,
    Request,
    Status,
    StoreClient,
    decode_counter,
    encode_counter,
    encode_request,
    encode_response,
    wait_for_store,
)
from utils.exceptions import MwTimeoutError, ProtocolError


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# Wire codec
def test_set_request_matches_golden(fixture_bytes):
    assert encode_request(Request(Opcode.SET, b"a", value=b"b")) == fixture_bytes("store_set.bin")


def test_add_request_matches_golden(fixture_bytes):
    assert encode_request(Request(Opcode.ADD, b"c", delta=5)) == fixture_bytes("store_add.bin")


def test_response_and_counter_encoding():
    assert encode_response(Status.NOT_FOUND) == b"\x01\x00\x00\x00\x00"
    assert decode_counter(encode_counter(-3)) == -3
    with pytest.raises(ProtocolError):
        decode_counter(b"\x01\x02")


def test_empty_or_oversized_keys_are_rejected():
    with pytest.raises(ProtocolError):
        encode_request(Request(Opcode.GET, b""))
    with pytest.raises(ProtocolError):
        encode_request(Request(Opcode.GET, b"k" * 513))


# Server behaviour through the client
def test_set_get_delete(store_client):
    assert store_client.get("missing") is None
    store_client.set("k", b"v1")
    store_client.set("k", "v2")
    assert store_client.get("k") == b"v2"
    store_client.delete("k")
    assert store_client.get("k") is None


def test_add_creates_and_increments(store_client):
    assert store_client.add("n", 0) == 0
    assert store_client.add("n", 5) == 5
    assert store_client.add("n", -2) == 3


def test_add_on_non_counter_is_a_protocol_error(store_client):
    store_client.set("text", b"hello")
    with pytest.raises(ProtocolError):
        store_client.add("text", 1)


def test_concurrent_adds_return_distinct_values(store):
    def bump(_):
        with StoreClient(store) as client:
            return [client.add("ctr", 1) for _ in range(25)]

    with ThreadPoolExecutor(max_workers=4) as pool:
        values = [v for chunk in pool.map(bump, range(4)) for v in chunk]
    assert sorted(values) == list(range(1, 101))


def test_wait_returns_once_key_is_set(store, store_client):
    def later():
        time.sleep(0.2)
        with StoreClient(store) as other:
            other.set("late", b"here")

    threading.Thread(target=later).start()
    assert store_client.wait("late", timeout=5.0) == b"here"


def test_wait_times_out(store_client):
    started = time.monotonic()
    with pytest.raises(MwTimeoutError):
        store_client.wait("never", timeout=0.2)
    assert time.monotonic() - started < 2.0
    # the connection is still usable afterwards
    assert store_client.add("after", 1) == 1


def test_delete_prefix_only_touches_prefix(store_client):
    for key in ("world/a/0/size", "world/a/0/rank/0/addr", "world/a/1/size", "world/b/0/size"):
        store_client.set(key, b"x")
    store_client.delete_prefix("world/a/0/")
    assert store_client.get("world/a/0/size") is None
    assert store_client.get("world/a/0/rank/0/addr") is None
    assert store_client.get("world/a/1/size") == b"x"
    assert store_client.get("world/b/0/size") == b"x"


# Unreachable store
def test_unreachable_store_surfaces_timeout():
    client = StoreClient(f"127.0.0.1:{_free_port()}", timeout=0.3)
    with pytest.raises(MwTimeoutError):
        client.get("k")
    assert not client.ping()


def test_wait_for_store(store):
    assert wait_for_store(store, 1.0)
    assert not wait_for_store(f"127.0.0.1:{_free_port()}", 0.3)


# Raw-socket behaviour of the server
def _raw(store: str) -> socket.socket:
    host, port = store.rsplit(":", 1)
    return socket.create_connection((host, int(port)), timeout=5)


def _read_response(sock: socket.socket):
    head = b""
    while len(head) < 5:
        chunk = sock.recv(5 - len(head))
        if not chunk:
            return None, b""
        head += chunk
    length = int.from_bytes(head[1:], "little")
    value = b""
    while len(value) < length:
        value += sock.recv(length - len(value))
    return Status(head[0]), value


# Test case for a WAIT whose timeout does not fit a thread wait
def test_wait_with_huge_timeout_still_returns(store):
    raw = _raw(store)
    try:
        raw.sendall(encode_request(Request(Opcode.WAIT, b"huge", timeout_ms=2**64 - 1)))
        time.sleep(0.2)
        with StoreClient(store) as other:
            other.set("huge", b"ready")
        assert _read_response(raw) == (Status.OK, b"ready")
    finally:
        raw.close()


# Test case for the 64 KiB value limit
def test_value_size_limit(store, store_client):
    store_client.set("big", b"x" * 65536)
    assert len(store_client.get("big")) == 65536
    with pytest.raises(ProtocolError):
        store_client.set("big", b"x" * 65537)
    raw = _raw(store)
    try:
        raw.sendall(bytes([int(Opcode.SET)]) + (3).to_bytes(4, "little") + b"big" + (65537).to_bytes(4, "little"))
        assert _read_response(raw)[0] is Status.PROTO_ERR
    finally:
        raw.close()
    assert len(store_client.get("big")) == 65536


# Test case for an unknown opcode on one connection
def test_bad_opcode_closes_only_that_connection(store, store_client):
    store_client.set("steady", b"1")
    raw = _raw(store)
    try:
        raw.sendall(b"\xff")
        assert _read_response(raw)[0] is Status.PROTO_ERR
        assert _read_response(raw) == (None, b"")
    finally:
        raw.close()
    assert store_client.get("steady") == b"1"
    assert store_client.add("counter", 2) == 2


# Test case for a client vanishing mid-request
def test_store_survives_abrupt_disconnect(store, store_client):
    raw = _raw(store)
    raw.sendall(bytes([int(Opcode.SET)]) + (5).to_bytes(4, "little") + b"ab")
    # reset instead of an orderly close
    raw.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
    raw.close()
    waiter = _raw(store)
    waiter.sendall(encode_request(Request(Opcode.WAIT, b"gone", timeout_ms=60_000)))
    waiter.close()
    time.sleep(0.1)
    store_client.set("alive", b"yes")
    assert store_client.get("alive") == b"yes"
    with StoreClient(store) as other:
        assert other.add("alive-counter", 1) == 1
