import itertools
from concurrent.futures import Future, InvalidStateError
from concurrent.futures import TimeoutError as FutureTimeoutError
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, List, Optional, Tuple

from models.buffer import Buffer, BufferTemplate, ReduceOp
from utils.exceptions import MwError, MwTimeoutError


class OpKind(str, Enum):
    SEND = "send"
    RECV = "recv"
    BROADCAST = "broadcast"
    ALL_REDUCE = "all_reduce"
    REDUCE = "reduce"
    ALL_GATHER = "all_gather"
    GATHER = "gather"
    SCATTER = "scatter"


# Ops whose call names a root; SEND/RECV name a peer instead.
ROOTED_OPS = {OpKind.BROADCAST, OpKind.REDUCE, OpKind.GATHER, OpKind.SCATTER}

# Execution class: sends per destination, receives per source, collectives together
OpClass = Tuple[str, Optional[int]]


@dataclass(frozen=True)
class CollectiveCall:
    """
    One logical collective as submitted by the caller.

    Attributes:
        world (str): Target world name.
        op (OpKind): Which of the eight operations.
        buffer (Optional[Buffer]): Input for every op except recv and non-root scatter.
        parts (Optional[List[Buffer]]): Root's world-size input list for scatter.
        template (Optional[BufferTemplate]): Expected shape for recv and non-root scatter.
        peer (Optional[int]): Destination for send, source for recv, root for rooted ops.
        reduce_op (Optional[ReduceOp]): Operator for reduce and all_reduce.
        call_seq (int): Submission sequence within (world incarnation, op class), assigned at submit.
    """
    world: str
    op: OpKind
    buffer: Optional[Buffer] = None
    parts: Optional[List[Buffer]] = None
    template: Optional[BufferTemplate] = None
    peer: Optional[int] = None
    reduce_op: Optional[ReduceOp] = None
    call_seq: int = -1

    def summary(self) -> str:
        target = "" if self.peer is None else f" peer/root={self.peer}"
        return f"{self.op.value}#{self.call_seq} on {self.world}{target}"

    @property
    def op_class(self) -> OpClass:
        if self.op == OpKind.SEND:
            return ("send", self.peer)
        if self.op == OpKind.RECV:
            return ("recv", self.peer)
        return ("collective", None)


class WorkState(str, Enum):
    PENDING = "Pending"
    DONE = "Done"
    FAILED = "Failed"


_handle_ids = itertools.count()


class WorkHandle:
    """
    Pollable token for one in-flight collective; terminates exactly once.
    """

    def __init__(self, call: CollectiveCall):
        self.id: int = next(_handle_ids)
        self.call = call
        self._future: Future = Future()
        self._future.set_running_or_notify_cancel()

    @property
    def world(self) -> str:
        return self.call.world

    @property
    def op(self) -> OpKind:
        return self.call.op

    def poll(self) -> WorkState:
        if not self._future.done():
            return WorkState.PENDING
        if self._future.exception() is not None:
            return WorkState.FAILED
        return WorkState.DONE

    def done(self) -> bool:
        return self._future.done()

    def wait(self, timeout: Optional[float] = None) -> Any:
        """
        Blocks until terminal or until `timeout` seconds pass.

        Returns:
            The op's result at this rank (Buffer, list of Buffers, or None).

        Raises:
            MwTimeoutError: Deadline passed; the handle stays Pending.
            MwError: The error the op failed with.
        """
        try:
            return self._future.result(timeout=timeout)
        except FutureTimeoutError:
            raise MwTimeoutError(detail=f"{self.call.summary()} still pending after {timeout}s.", world=self.world)

    @property
    def error(self) -> Optional[MwError]:
        if not self._future.done():
            return None
        return self._future.exception()

    @property
    def result(self) -> Any:
        if self.poll() is not WorkState.DONE:
            return None
        return self._future.result()

    def add_done_callback(self, fn: Callable[["WorkHandle"], None]) -> None:
        self._future.add_done_callback(lambda _f: fn(self))

    def set_result(self, value: Any) -> bool:
        """Completes the handle; returns False if it was already terminal."""
        try:
            self._future.set_result(value)
            return True
        except InvalidStateError:
            return False

    def set_error(self, error: MwError) -> bool:
        """Fails the handle; returns False if it was already terminal."""
        try:
            self._future.set_exception(error)
            return True
        except InvalidStateError:
            return False

    def __repr__(self) -> str:
        return f"WorkHandle(id={self.id}, {self.call.summary()}, {self.poll().value})"
