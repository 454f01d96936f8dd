import re

from pydantic import BaseModel, ConfigDict, Field

from models.world import parse_addr
from utils.exceptions import ProtocolError

WORLD_NAME_PATTERN = re.compile(r"^[A-Za-z0-9_-]+$")
MAX_WORLD_NAME_BYTES = 128


class WorldDescriptor(BaseModel):
    """
    Identity and endpoints of one world as seen by this process.

    Attributes:
        name (str): World name, [A-Za-z0-9_-], at most 128 bytes.
        size (int): Number of members, at least 2.
        my_rank (int): This process's rank, 0 <= my_rank < size.
        store_addr (str): Rendezvous store "host:port".
        my_listen_addr (str): Where this member accepts peer connections; port 0 picks a free port.

    Field types are checked on construction; the domain rules are checked by
    validate_descriptor so a bad descriptor surfaces as a Protocol error.
    """
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., description="World name.")
    size: int = Field(..., description="Number of world members.")
    my_rank: int = Field(..., description="This member's rank.")
    store_addr: str = Field("127.0.0.1:29500", description="Rendezvous store endpoint.")
    my_listen_addr: str = Field("127.0.0.1:0", description="Peer listen endpoint.")


def validate_world_name(name: str) -> str:
    if not name or len(name.encode("utf-8")) > MAX_WORLD_NAME_BYTES or not WORLD_NAME_PATTERN.match(name):
        raise ProtocolError(f"invalid world name {name!r}.")
    return name


def validate_descriptor(d: WorldDescriptor) -> WorldDescriptor:
    """
    Checks every WorldDescriptor rule.

    Args:
        d (WorldDescriptor): Descriptor to check.

    Returns:
        WorldDescriptor: The same descriptor when valid.

    Raises:
        ProtocolError: Naming the first violated rule.
    """
    validate_world_name(d.name)
    if d.size < 2:
        raise ProtocolError(f"world size must be >= 2, got {d.size}.", world=d.name)
    if not 0 <= d.my_rank < d.size:
        raise ProtocolError(f"rank out of range: {d.my_rank} not in [0, {d.size}).", world=d.name)
    parse_addr(d.store_addr)
    parse_addr(d.my_listen_addr)
    return d
