"""
Framed point-to-point transport between world peers.

Frame layout, little-endian:
    u32 magic · u8 version · u8 msg_type · u16 world_name_len · world_name
    · u64 op_seq · u8 dtype · u64 elem_count · payload

A DATA frame's op_seq carries its lane in the top byte and the lane's own
sequence number in the low 56 bits. Lanes let point-to-point traffic and
collectives share one connection without consuming each other's frames.

Sockets stay non-blocking once a connection is Open. The poller drives a
connection with read_step()/write_step(); send_frame()/recv_frame() are the
blocking forms built on the same steps.
"""
import select
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Deque, Dict, Optional, Tuple

from models.buffer import Buffer, DType
from models.world import PeerAddr, parse_addr
from utils.exceptions import MwError, MwTimeoutError, ProtocolError, RemoteWorkerError
from utils.logger import logger

MAGIC = 0x4D574C44
VERSION = 1
HANDSHAKE_TIMEOUT = 5.0
BYE_DRAIN_TIMEOUT = 0.5

_PREFIX = struct.Struct("<IBBH")
_SUFFIX = struct.Struct("<QBQ")
_IOV_MAX = 64

LANE_SHIFT = 56
SEQ_MASK = (1 << LANE_SHIFT) - 1


class MsgType(IntEnum):
    DATA = 1
    HELLO = 2
    BYE = 3


class Lane(IntEnum):
    COLLECTIVE = 0
    P2P = 1


def pack_seq(lane: Lane, seq: int) -> int:
    return (int(lane) << LANE_SHIFT) | (seq & SEQ_MASK)


def split_seq(op_seq: int) -> Tuple[Lane, int]:
    """
    Raises:
        ProtocolError: If the top byte names no known lane.
    """
    try:
        lane = Lane(op_seq >> LANE_SHIFT)
    except ValueError:
        raise ProtocolError(f"op_seq 0x{op_seq:016X} names unknown lane {op_seq >> LANE_SHIFT}.")
    return lane, op_seq & SEQ_MASK


class ConnState(str, Enum):
    OPEN = "Open"
    POISONED = "Poisoned"
    CLOSED = "Closed"


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    world: str
    op_seq: int = 0
    dtype_code: int = 0
    elem_count: int = 0
    payload: bytes = b""

    @classmethod
    def data(cls, world: str, buf: Buffer, op_seq: int = 0) -> "Frame":
        return cls(MsgType.DATA, world, op_seq, buf.dtype.code, len(buf), buf.data)

    @classmethod
    def hello(cls, world: str, rank: int) -> "Frame":
        return cls(MsgType.HELLO, world, op_seq=rank)

    @classmethod
    def bye(cls, world: str) -> "Frame":
        return cls(MsgType.BYE, world)

    @property
    def lane(self) -> Lane:
        return split_seq(self.op_seq)[0]

    def to_buffer(self) -> Buffer:
        return Buffer(DType.from_code(self.dtype_code), self.payload)


def validate_frame(frame: Frame) -> None:
    """
    Raises:
        ProtocolError: If the payload disagrees with dtype/elem_count, or a control frame carries one.
    """
    if frame.msg_type == MsgType.DATA:
        width = DType.from_code(frame.dtype_code).width
        if len(frame.payload) != frame.elem_count * width:
            raise ProtocolError(
                f"DATA payload is {len(frame.payload)} bytes, expected {frame.elem_count} x {width}.",
                world=frame.world,
            )
    elif frame.payload:
        raise ProtocolError(f"{frame.msg_type.name} frame must not carry a payload.", world=frame.world)


def encode_header(frame: Frame) -> bytes:
    name = frame.world.encode("utf-8")
    return (
        _PREFIX.pack(MAGIC, VERSION, int(frame.msg_type), len(name))
        + name
        + _SUFFIX.pack(frame.op_seq, frame.dtype_code, frame.elem_count)
    )


def encode_frame(frame: Frame) -> bytes:
    validate_frame(frame)
    return encode_header(frame) + frame.payload


class FrameDecoder:
    """Incremental parser; feed() bytes as they arrive, next_frame() pops complete frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf += data

    def pending_bytes(self) -> int:
        return len(self._buf)

    def next_frame(self) -> Optional[Frame]:
        buf = self._buf
        if len(buf) < _PREFIX.size:
            return None
        magic, version, msg_type, name_len = _PREFIX.unpack_from(buf, 0)
        if magic != MAGIC:
            raise ProtocolError(f"bad frame magic 0x{magic:08X}.")
        if version != VERSION:
            raise ProtocolError(f"unsupported frame version {version}.")
        try:
            kind = MsgType(msg_type)
        except ValueError:
            raise ProtocolError(f"unknown frame type {msg_type}.")
        head_len = _PREFIX.size + name_len + _SUFFIX.size
        if len(buf) < head_len:
            return None
        world = bytes(buf[_PREFIX.size:_PREFIX.size + name_len]).decode("utf-8", errors="replace")
        op_seq, dtype_code, elem_count = _SUFFIX.unpack_from(buf, _PREFIX.size + name_len)
        payload_len = 0
        if kind == MsgType.DATA:
            payload_len = elem_count * DType.from_code(dtype_code).width
        if len(buf) < head_len + payload_len:
            return None
        payload = bytes(buf[head_len:head_len + payload_len])
        del buf[:head_len + payload_len]
        return Frame(kind, world, op_seq, dtype_code, elem_count, payload)


def _tune(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


class Connection:
    """
    One peer connection of one world.

    A connection is driven by a single context per direction. Each lane has
    its own send and receive sequence and its own inbox. Errors convert to the
    taxonomy: EOF/reset -> RemoteWorkerError (Poisoned), bad magic or sequence
    gap -> ProtocolError (Poisoned), deadline -> MwTimeoutError (stays Open).
    """

    def __init__(self, sock: socket.socket, peer: PeerAddr, world: str, peer_rank: int,
                 inbox_limit: int = 64 * 1024 * 1024, decoder: Optional[FrameDecoder] = None):
        self.sock = sock
        self.peer = peer
        self.world = world
        self.peer_rank = peer_rank
        self.state = ConnState.OPEN
        self.next_send_seq: Dict[Lane, int] = {lane: 0 for lane in Lane}
        self.next_recv_seq: Dict[Lane, int] = {lane: 0 for lane in Lane}
        self.inbox_limit = inbox_limit
        self._decoder = decoder or FrameDecoder()
        self._inboxes: Dict[Lane, Deque[Frame]] = {lane: deque() for lane in Lane}
        self._inbox_bytes = 0
        self._outbox: Deque[memoryview] = deque()
        self._error: Optional[MwError] = None
        self._peer_left = False
        sock.setblocking(False)
        if self._decoder.pending_bytes():
            self._drain_decoder()

    def __repr__(self) -> str:
        return f"Connection(world={self.world}, peer_rank={self.peer_rank}, {self.peer}, {self.state.value})"

    def fileno(self) -> int:
        return self.sock.fileno()

    # state

    def _check_usable(self) -> None:
        if self._error is not None:
            raise self._error
        if self.state != ConnState.OPEN:
            raise RemoteWorkerError(detail=f"connection to rank {self.peer_rank} is {self.state.value}.", world=self.world)

    def _poison(self, error: MwError) -> MwError:
        self.state = ConnState.POISONED
        self._error = error
        self._outbox.clear()
        return error

    @property
    def inbox_full(self) -> bool:
        return self._inbox_bytes >= self.inbox_limit

    @property
    def buffered(self) -> int:
        """Received DATA frames not yet popped, across lanes."""
        return sum(len(inbox) for inbox in self._inboxes.values())

    @property
    def error(self) -> Optional[MwError]:
        return self._error

    # sending

    def queue_frame(self, frame: Frame, lane: Lane = Lane.COLLECTIVE) -> int:
        """
        Validates and queues a frame for writing; DATA frames get the lane's next op_seq.

        Returns:
            int: The op_seq assigned (DATA) or carried (control frames).
        """
        self._check_usable()
        if frame.world != self.world:
            raise ProtocolError(f"frame for world {frame.world!r} on a {self.world!r} connection.", world=self.world)
        if frame.msg_type == MsgType.DATA:
            op_seq = pack_seq(lane, self.next_send_seq[lane])
            frame = Frame(frame.msg_type, frame.world, op_seq, frame.dtype_code, frame.elem_count, frame.payload)
        validate_frame(frame)
        self._outbox.append(memoryview(encode_header(frame)))
        if frame.payload:
            self._outbox.append(memoryview(frame.payload))
        if frame.msg_type == MsgType.DATA:
            self.next_send_seq[lane] += 1
        return frame.op_seq

    def write_step(self) -> bool:
        """Writes as much queued output as the socket takes; True once the outbox is empty."""
        self._check_usable()
        while self._outbox:
            chunks = [self._outbox[i] for i in range(min(len(self._outbox), _IOV_MAX))]
            try:
                sent = self.sock.sendmsg(chunks)
            except (BlockingIOError, InterruptedError):
                return False
            except OSError as e:
                raise self._poison(RemoteWorkerError(detail=f"send to rank {self.peer_rank} failed: {e}", world=self.world))
            while sent > 0:
                head = self._outbox[0]
                if sent >= len(head):
                    sent -= len(head)
                    self._outbox.popleft()
                else:
                    self._outbox[0] = head[sent:]
                    sent = 0
        return True

    # receiving

    def read_step(self) -> int:
        """
        Reads whatever is available into the lane inboxes.

        Returns:
            int: Number of frames added.
        """
        self._check_usable()
        if self.inbox_full:
            return 0
        added = 0
        while not self.inbox_full:
            try:
                chunk = self.sock.recv(1 << 20)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as e:
                raise self._poison(RemoteWorkerError(detail=f"recv from rank {self.peer_rank} failed: {e}", world=self.world))
            if not chunk:
                raise self._poison(RemoteWorkerError(detail=f"rank {self.peer_rank} closed the connection.", world=self.world))
            self._decoder.feed(chunk)
            added += self._drain_decoder()
            if self._peer_left:
                raise self._poison(RemoteWorkerError(detail=f"rank {self.peer_rank} left the world.", world=self.world))
        return added

    def _drain_decoder(self) -> int:
        added = 0
        while True:
            try:
                frame = self._decoder.next_frame()
            except ProtocolError as e:
                raise self._poison(ProtocolError(e.detail, world=self.world))
            if frame is None:
                return added
            if frame.world != self.world:
                raise self._poison(ProtocolError(f"frame for world {frame.world!r} on a {self.world!r} connection.", world=self.world))
            if frame.msg_type == MsgType.BYE:
                self._peer_left = True
                return added
            if frame.msg_type == MsgType.HELLO:
                raise self._poison(ProtocolError("unexpected HELLO on an open connection.", world=self.world))
            try:
                lane, seq = split_seq(frame.op_seq)
            except ProtocolError as e:
                raise self._poison(ProtocolError(e.detail, world=self.world))
            if seq != self.next_recv_seq[lane]:
                raise self._poison(ProtocolError(
                    f"sequence gap from rank {self.peer_rank} on the {lane.name} lane: "
                    f"got {seq}, expected {self.next_recv_seq[lane]}.",
                    world=self.world,
                ))
            self.next_recv_seq[lane] += 1
            self._inboxes[lane].append(frame)
            self._inbox_bytes += len(frame.payload)
            added += 1

    def pop_frame(self, lane: Lane = Lane.COLLECTIVE) -> Optional[Frame]:
        """Next received DATA frame of `lane`, or None; raises if the connection failed and the lane is empty."""
        inbox = self._inboxes[lane]
        if inbox:
            frame = inbox.popleft()
            self._inbox_bytes -= len(frame.payload)
            return frame
        self._check_usable()
        return None

    # blocking forms

    def send_frame(self, frame: Frame, deadline: Optional[float] = None, lane: Lane = Lane.COLLECTIVE) -> int:
        """
        Writes one frame completely.

        Args:
            frame (Frame): Frame to send; DATA op_seq is assigned here.
            deadline (Optional[float]): Seconds to wait for the socket to drain.
            lane (Lane): Lane a DATA frame travels on.

        Returns:
            int: The op_seq the frame was sent with.
        """
        seq = self.queue_frame(frame, lane)
        end = None if deadline is None else time.monotonic() + deadline
        while not self.write_step():
            remaining = None if end is None else end - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise MwTimeoutError(detail=f"send to rank {self.peer_rank} did not drain in {deadline}s.", world=self.world)
            select.select([], [self.sock], [], remaining)
        return seq

    def recv_frame(self, deadline: Optional[float] = None, lane: Lane = Lane.COLLECTIVE) -> Frame:
        """
        Returns the next complete DATA frame of `lane`.

        Raises:
            MwTimeoutError: Nothing arrived before `deadline` seconds; the connection stays Open.
            RemoteWorkerError: Peer closed, reset or left.
            ProtocolError: Bad magic, version, world, lane or sequence.
        """
        end = None if deadline is None else time.monotonic() + deadline
        while True:
            frame = self.pop_frame(lane)
            if frame is not None:
                return frame
            remaining = None if end is None else end - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise MwTimeoutError(detail=f"no frame from rank {self.peer_rank} within {deadline}s.", world=self.world)
            readable, _, _ = select.select([self.sock], [], [], remaining)
            if readable:
                try:
                    self.read_step()
                except MwError:
                    # frames read before the failure are still delivered
                    if not self._inboxes[lane]:
                        raise

    def close(self, send_bye: bool = False) -> None:
        """
        Closes the socket. With `send_bye`, queued output is flushed first so BYE
        lands on a frame boundary; BYE is skipped if that flush does not finish.
        """
        if self.state == ConnState.CLOSED:
            return
        if send_bye and self.state == ConnState.OPEN:
            try:
                self.sock.settimeout(BYE_DRAIN_TIMEOUT)
                while self._outbox:
                    self.sock.sendall(self._outbox.popleft())
                self.sock.sendall(encode_frame(Frame.bye(self.world)))
            except OSError:
                pass
        self.state = ConnState.CLOSED
        self._outbox.clear()
        try:
            self.sock.close()
        except OSError:
            pass


def _recv_handshake(sock: socket.socket, deadline: float) -> Tuple[Frame, FrameDecoder]:
    """Reads the peer HELLO; bytes that arrived after it stay in the returned decoder."""
    decoder = FrameDecoder()
    while True:
        frame = decoder.next_frame()
        if frame is not None:
            if frame.msg_type != MsgType.HELLO:
                raise ProtocolError(f"expected HELLO, got {frame.msg_type.name}.")
            return frame, decoder
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise MwTimeoutError(detail="handshake timed out.")
        sock.settimeout(remaining)
        chunk = sock.recv(4096)
        if not chunk:
            raise RemoteWorkerError(detail="peer closed during handshake.")
        decoder.feed(chunk)


def connect(addr: str, world: str, my_rank: int, peer_rank: int, timeout: float = HANDSHAKE_TIMEOUT,
            inbox_limit: int = 64 * 1024 * 1024) -> Connection:
    """
    Dials a peer listener and completes the HELLO exchange.

    Raises:
        RemoteWorkerError: Peer unreachable or closed during the handshake.
        ProtocolError: Peer answered for another world or another rank.
    """
    peer = parse_addr(addr)
    deadline = time.monotonic() + timeout
    try:
        sock = socket.create_connection((peer.host, peer.port), timeout=timeout)
    except OSError as e:
        raise RemoteWorkerError(detail=f"cannot reach rank {peer_rank} at {peer}: {e}", world=world)
    try:
        _tune(sock)
        sock.sendall(encode_frame(Frame.hello(world, my_rank)))
        reply, decoder = _recv_handshake(sock, deadline)
        if reply.world != world:
            raise ProtocolError(f"peer at {peer} serves world {reply.world!r}, not {world!r}.", world=world)
        if reply.op_seq != peer_rank:
            raise ProtocolError(f"peer at {peer} is rank {reply.op_seq}, expected {peer_rank}.", world=world)
    except MwError as e:
        sock.close()
        if e.world is None:
            e.world = world
        raise
    except OSError as e:
        sock.close()
        raise RemoteWorkerError(detail=f"handshake with rank {peer_rank} failed: {e}", world=world)
    return Connection(sock, peer, world, peer_rank, inbox_limit, decoder)


class Listener:
    """
    Accepts peer connections for one world on a background thread.

    Each accepted socket must open with a HELLO naming this world; the listener
    answers with its own HELLO and hands the Open connection to `on_connection`.
    """

    def __init__(self, addr: str, world: str, my_rank: int,
                 on_connection: Callable[[Connection], None],
                 accept_rank: Optional[Callable[[int], bool]] = None,
                 inbox_limit: int = 64 * 1024 * 1024):
        bind = parse_addr(addr)
        self.world = world
        self.my_rank = my_rank
        self.on_connection = on_connection
        self.accept_rank = accept_rank or (lambda rank: rank != my_rank)
        self.inbox_limit = inbox_limit
        self._stop = threading.Event()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((bind.host, bind.port))
            self._sock.listen(64)
        except OSError:
            self._sock.close()
            raise
        self._sock.settimeout(0.2)
        host, port = self._sock.getsockname()[:2]
        self.addr = PeerAddr(bind.host if bind.host not in ("0.0.0.0", "") else host, port)
        self._thread = threading.Thread(target=self._accept_loop, name=f"mw-listen-{world}", daemon=True)
        self._thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, remote = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                if not self._stop.is_set():
                    logger.warning(f"Listener for world {self.world} stopped accepting.")
                return
            try:
                conn = self._handshake(sock, remote)
            except MwError as e:
                logger.warning(f"Rejected connection from {remote} on world {self.world}: {e}")
                sock.close()
                continue
            except OSError as e:
                logger.warning(f"Handshake with {remote} on world {self.world} failed: {e}")
                sock.close()
                continue
            self.on_connection(conn)

    def _handshake(self, sock: socket.socket, remote) -> Connection:
        _tune(sock)
        hello, decoder = _recv_handshake(sock, time.monotonic() + HANDSHAKE_TIMEOUT)
        if hello.world != self.world:
            # Our HELLO names the world we serve, so the dialer fails with Protocol too.
            sock.sendall(encode_frame(Frame.hello(self.world, self.my_rank)))
            raise ProtocolError(f"HELLO for world {hello.world!r}, this listener serves {self.world!r}.", world=self.world)
        if not self.accept_rank(hello.op_seq):
            raise ProtocolError(f"HELLO from unexpected rank {hello.op_seq}.", world=self.world)
        sock.sendall(encode_frame(Frame.hello(self.world, self.my_rank)))
        return Connection(sock, PeerAddr(remote[0], remote[1]), self.world, hello.op_seq, self.inbox_limit, decoder)

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        if self._thread is not threading.current_thread():
            self._thread.join(timeout=2)


def listen(addr: str, world: str, my_rank: int, on_connection: Callable[[Connection], None], **kwargs) -> Listener:
    """Binds a listener for `world`; raises OSError when the address cannot be bound."""
    return Listener(addr, world, my_rank, on_connection, **kwargs)
