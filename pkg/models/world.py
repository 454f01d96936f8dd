import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, NamedTuple, Optional

from utils.exceptions import MwError, ProtocolError


class PeerAddr(NamedTuple):
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"


def parse_addr(value: str) -> PeerAddr:
    """Parses a "host:port" endpoint."""
    host, sep, port = str(value).rpartition(":")
    if not sep or not host:
        raise ProtocolError(f"invalid endpoint {value!r}, expected host:port.")
    try:
        port_num = int(port)
    except ValueError:
        raise ProtocolError(f"invalid port in endpoint {value!r}.")
    if not 0 <= port_num <= 65535:
        raise ProtocolError(f"port out of range in endpoint {value!r}.")
    return PeerAddr(host, port_num)


class WorldStatus(str, Enum):
    INITIALIZING = "Initializing"
    READY = "Ready"
    BROKEN = "Broken"
    REMOVED = "Removed"


_LEGAL_TRANSITIONS = {
    WorldStatus.INITIALIZING: {WorldStatus.READY, WorldStatus.BROKEN},
    WorldStatus.READY: {WorldStatus.BROKEN, WorldStatus.REMOVED},
    WorldStatus.BROKEN: {WorldStatus.REMOVED},
    WorldStatus.REMOVED: set(),
}


def is_legal_transition(old: WorldStatus, new: WorldStatus) -> bool:
    return new in _LEGAL_TRANSITIONS[old]


@dataclass(eq=False)
class WorldEntry:
    """
    Live registry state of one world incarnation.

    Attributes:
        descriptor: The validated WorldDescriptor this entry was created from.
        epoch (int): Join generation read from the store at initialization.
        status (WorldStatus): Lifecycle state; changed only through transition().
        peers (Dict[int, PeerAddr]): Listen address of every rank once Ready.
        connections (Dict[int, Any]): Open transport connections by peer rank, owned by the poller.
        cause (Optional[MwError]): Why the world broke, if it did.
    """
    descriptor: Any
    epoch: int = 0
    status: WorldStatus = WorldStatus.INITIALIZING
    peers: Dict[int, PeerAddr] = field(default_factory=dict)
    connections: Dict[int, Any] = field(default_factory=dict)
    cause: Optional[MwError] = None
    listener: Any = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def name(self) -> str:
        return self.descriptor.name

    @property
    def size(self) -> int:
        return self.descriptor.size

    @property
    def my_rank(self) -> int:
        return self.descriptor.my_rank

    def transition(self, new: WorldStatus) -> bool:
        """Moves to `new` if legal; returns False (and changes nothing) otherwise."""
        with self.lock:
            if not is_legal_transition(self.status, new):
                return False
            self.status = new
            return True

    def visible_connections(self) -> Dict[int, Any]:
        """Connections callers may use; Broken and Removed entries expose none."""
        if self.status in (WorldStatus.BROKEN, WorldStatus.REMOVED):
            return {}
        return dict(self.connections)
