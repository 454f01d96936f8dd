"""
Rendezvous key-value store: wire codec, threaded TCP server and client.

Wire format, all integers little-endian:
    request  = u8 opcode · u32 key_len · key · (SET: u32 val_len · val | ADD: i64 delta | WAIT: u64 timeout_ms)
    response = u8 status · u32 val_len · val
"""
import socket
import socketserver
import struct
import threading
import time
from enum import IntEnum
from typing import Dict, NamedTuple, Optional, Union

from models.world import parse_addr
from utils.config import settings
from utils.exceptions import MwError, MwTimeoutError, ProtocolError
from utils.logger import logger
from utils import metrics

MAX_KEY_BYTES = 512
MAX_VALUE_BYTES = 64 * 1024

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")
_RESPONSE_HEAD = struct.Struct("<BI")


class Opcode(IntEnum):
    SET = 1
    GET = 2
    ADD = 3
    WAIT = 4
    DELETE = 5
    DELETE_PREFIX = 6


class Status(IntEnum):
    OK = 0
    NOT_FOUND = 1
    TIMEOUT = 2
    PROTO_ERR = 3


class Request(NamedTuple):
    opcode: Opcode
    key: bytes
    value: bytes = b""
    delta: int = 0
    timeout_ms: int = 0


KeyLike = Union[str, bytes]


def _key_bytes(key: KeyLike) -> bytes:
    raw = key.encode("utf-8") if isinstance(key, str) else bytes(key)
    if not raw or len(raw) > MAX_KEY_BYTES:
        raise ProtocolError(f"store key must be 1..{MAX_KEY_BYTES} bytes, got {len(raw)}.")
    return raw


def _value_bytes(value: KeyLike) -> bytes:
    raw = value.encode("utf-8") if isinstance(value, str) else bytes(value)
    if len(raw) > MAX_VALUE_BYTES:
        raise ProtocolError(f"store value exceeds {MAX_VALUE_BYTES} bytes ({len(raw)}).")
    return raw


def encode_request(req: Request) -> bytes:
    key = _key_bytes(req.key)
    out = bytes([int(req.opcode)]) + _U32.pack(len(key)) + key
    if req.opcode == Opcode.SET:
        value = _value_bytes(req.value)
        out += _U32.pack(len(value)) + value
    elif req.opcode == Opcode.ADD:
        out += _I64.pack(req.delta)
    elif req.opcode == Opcode.WAIT:
        out += _U64.pack(req.timeout_ms)
    return out


def encode_response(status: Status, value: bytes = b"") -> bytes:
    return _RESPONSE_HEAD.pack(int(status), len(value)) + value


def encode_counter(value: int) -> bytes:
    return _I64.pack(value)


def decode_counter(raw: bytes) -> int:
    if len(raw) != _I64.size:
        raise ProtocolError(f"counter value must be 8 bytes, got {len(raw)}.")
    return _I64.unpack(raw)[0]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed while reading")
        buf += chunk
    return bytes(buf)


def read_request(sock: socket.socket) -> Optional[Request]:
    """Reads one request; returns None on a clean EOF before the opcode."""
    head = sock.recv(1)
    if not head:
        return None
    try:
        opcode = Opcode(head[0])
    except ValueError:
        raise ProtocolError(f"unknown store opcode 0x{head[0]:02X}.")
    key_len = _U32.unpack(_recv_exact(sock, 4))[0]
    if key_len == 0 or key_len > MAX_KEY_BYTES:
        raise ProtocolError(f"bad key length {key_len}.")
    key = _recv_exact(sock, key_len)
    if opcode == Opcode.SET:
        val_len = _U32.unpack(_recv_exact(sock, 4))[0]
        if val_len > MAX_VALUE_BYTES:
            raise ProtocolError(f"value length {val_len} exceeds {MAX_VALUE_BYTES}.")
        return Request(opcode, key, value=_recv_exact(sock, val_len))
    if opcode == Opcode.ADD:
        return Request(opcode, key, delta=_I64.unpack(_recv_exact(sock, 8))[0])
    if opcode == Opcode.WAIT:
        return Request(opcode, key, timeout_ms=_U64.unpack(_recv_exact(sock, 8))[0])
    return Request(opcode, key)


class StoreState:
    """Key-value map with one serialized mutation order across all connections."""

    def __init__(self):
        self._data: Dict[bytes, bytes] = {}
        self._cond = threading.Condition()

    def apply(self, req: Request):
        """Executes one request and returns (Status, value)."""
        if req.opcode == Opcode.WAIT:
            # u64 milliseconds can exceed what Condition.wait accepts
            deadline = min(req.timeout_ms / 1000.0, threading.TIMEOUT_MAX)
            with self._cond:
                found = self._cond.wait_for(lambda: req.key in self._data, timeout=deadline)
                if not found:
                    return Status.TIMEOUT, b""
                return Status.OK, self._data[req.key]
        with self._cond:
            if req.opcode == Opcode.SET:
                self._data[req.key] = req.value
                self._cond.notify_all()
                return Status.OK, b""
            if req.opcode == Opcode.GET:
                if req.key not in self._data:
                    return Status.NOT_FOUND, b""
                return Status.OK, self._data[req.key]
            if req.opcode == Opcode.ADD:
                current = self._data.get(req.key)
                if current is not None and len(current) != _I64.size:
                    return Status.PROTO_ERR, b""
                base = 0 if current is None else _I64.unpack(current)[0]
                # i64 wraparound keeps the value representable
                new_value = (base + req.delta + 2**63) % 2**64 - 2**63
                self._data[req.key] = _I64.pack(new_value)
                self._cond.notify_all()
                return Status.OK, self._data[req.key]
            if req.opcode == Opcode.DELETE:
                self._data.pop(req.key, None)
                return Status.OK, b""
            if req.opcode == Opcode.DELETE_PREFIX:
                for key in [k for k in self._data if k.startswith(req.key)]:
                    del self._data[key]
                return Status.OK, b""
        return Status.PROTO_ERR, b""


class _StoreRequestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        state: StoreState = self.server.state
        self.server.track(sock)
        try:
            self._serve(sock, state)
        finally:
            self.server.untrack(sock)

    def _serve(self, sock: socket.socket, state: "StoreState"):
        while not self.server.stopping.is_set():
            try:
                req = read_request(sock)
            except ProtocolError as e:
                logger.warning(f"Store closing connection from {self.client_address}: {e.detail}")
                try:
                    sock.sendall(encode_response(Status.PROTO_ERR))
                except OSError:
                    pass
                return
            except (ConnectionError, OSError):
                return
            if req is None:
                return
            metrics.store_requests.labels(opcode=req.opcode.name).inc()
            status, value = state.apply(req)
            try:
                sock.sendall(encode_response(status, value))
            except OSError:
                return


class StoreServer(socketserver.ThreadingTCPServer):
    """Threaded store server; one handler thread per client connection."""
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, listen_addr: str):
        addr = parse_addr(listen_addr)
        self.state = StoreState()
        self.stopping = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._clients = set()
        self._clients_lock = threading.Lock()
        super().__init__((addr.host, addr.port), _StoreRequestHandler)

    def track(self, sock: socket.socket) -> None:
        with self._clients_lock:
            self._clients.add(sock)

    def untrack(self, sock: socket.socket) -> None:
        with self._clients_lock:
            self._clients.discard(sock)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "StoreServer":
        self._thread = threading.Thread(target=self.serve_forever, name="mw-store", daemon=True)
        self._thread.start()
        logger.info(f"Rendezvous store listening on {self.address}.")
        return self

    def stop(self) -> None:
        self.stopping.set()
        self.shutdown()
        self.server_close()
        with self._clients_lock:
            clients = list(self._clients)
        for sock in clients:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=5)
        logger.info(f"Rendezvous store on {self.address} stopped.")


def serve(listen_addr: str) -> StoreServer:
    """
    Binds and starts a store server in a background thread.

    Raises:
        OSError: If the address cannot be bound.
    """
    return StoreServer(listen_addr).start()


class StoreClient:
    """
    Client for the rendezvous store.

    One TCP connection per client; an internal lock serializes requests so a
    client may be shared, though one client per thread is the intended use.
    Transport failures close the socket and surface as MwTimeoutError; the next
    request reconnects.
    """

    def __init__(self, addr: Optional[str] = None, timeout: Optional[float] = None):
        self.addr = parse_addr(addr or settings.MW_STORE_ADDR)
        self.timeout = timeout if timeout is not None else settings.MW_STORE_TIMEOUT_MS / 1000.0
        self._sock: Optional[socket.socket] = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            sock = socket.create_connection((self.addr.host, self.addr.port), timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
        return self._sock

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def _call(self, req: Request, extra_timeout: float = 0.0):
        payload = encode_request(req)
        with self._lock:
            try:
                sock = self._connect()
                sock.settimeout(self.timeout + extra_timeout)
                sock.sendall(payload)
                status_raw, val_len = _RESPONSE_HEAD.unpack(_recv_exact(sock, _RESPONSE_HEAD.size))
                value = _recv_exact(sock, val_len) if val_len else b""
            except socket.timeout:
                self._drop()
                raise MwTimeoutError(detail=f"store {self.addr} did not answer {req.opcode.name} in time.")
            except (ConnectionError, OSError) as e:
                self._drop()
                raise MwTimeoutError(detail=f"store {self.addr} unreachable: {e}")
        status = Status(status_raw)
        if status == Status.PROTO_ERR:
            raise ProtocolError(f"store rejected {req.opcode.name} on {req.key!r}.")
        return status, value

    def set(self, key: KeyLike, value: KeyLike) -> None:
        self._call(Request(Opcode.SET, _key_bytes(key), value=_value_bytes(value)))

    def get(self, key: KeyLike) -> Optional[bytes]:
        """Returns the value, or None when the key is absent."""
        status, value = self._call(Request(Opcode.GET, _key_bytes(key)))
        return None if status == Status.NOT_FOUND else value

    def add(self, key: KeyLike, delta: int) -> int:
        status, value = self._call(Request(Opcode.ADD, _key_bytes(key), delta=delta))
        return decode_counter(value)

    def wait(self, key: KeyLike, timeout: float) -> bytes:
        """
        Blocks until `key` exists, server-side.

        Raises:
            MwTimeoutError: If the key did not appear within `timeout` seconds.
        """
        timeout_ms = max(0, int(timeout * 1000))
        status, value = self._call(Request(Opcode.WAIT, _key_bytes(key), timeout_ms=timeout_ms), extra_timeout=timeout)
        if status == Status.TIMEOUT:
            raise MwTimeoutError(detail=f"key {key!r} not set within {timeout}s.")
        return value

    def delete(self, key: KeyLike) -> None:
        self._call(Request(Opcode.DELETE, _key_bytes(key)))

    def delete_prefix(self, prefix: KeyLike) -> None:
        self._call(Request(Opcode.DELETE_PREFIX, _key_bytes(prefix)))

    def ping(self) -> bool:
        """True if the store answers a GET."""
        try:
            self.get("__ping__")
            return True
        except MwError:
            return False

    def close(self) -> None:
        with self._lock:
            self._drop()

    def __enter__(self) -> "StoreClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def wait_for_store(addr: str, timeout: float) -> bool:
    """Polls until a store answers at `addr` or `timeout` passes."""
    deadline = time.monotonic() + timeout
    client = StoreClient(addr, timeout=0.5)
    try:
        while time.monotonic() < deadline:
            if client.ping():
                return True
            time.sleep(0.1)
        return False
    finally:
        client.close()
