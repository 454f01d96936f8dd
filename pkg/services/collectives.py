"""
The eight collective kernels.

Each kernel is a generator: the poller calls next() on it, the kernel advances
as far as the sockets allow and yields when it would block. The kernel's
return value (StopIteration.value) is the op's result at this rank.

Algorithms are flat: broadcast fans out from the root, reduce fans in to the
root and folds rank-ascending, all_reduce is reduce-to-0 then broadcast,
all_gather is a full exchange, gather and scatter are flat.
"""
from typing import Generator, List, Optional, Protocol, Sequence, Tuple

from models.buffer import Buffer, BufferTemplate, ReduceOp
from models.work import CollectiveCall, OpKind
from services.transport_service import Connection, Frame, Lane
from utils.exceptions import MwError, ProtocolError

Step = Generator[None, None, object]


class KernelContext(Protocol):
    world: str
    my_rank: int
    size: int

    def connection(self, peer: int) -> Generator[None, None, Connection]:
        """Yields until an Open connection to `peer` exists, then returns it."""
        ...


def _check_rank(ctx: KernelContext, rank: int, what: str) -> None:
    if rank is None or not 0 <= rank < ctx.size:
        raise ProtocolError(f"{what} {rank} out of range for world size {ctx.size}.", world=ctx.world)


def _check_peer(ctx: KernelContext, peer: int) -> None:
    _check_rank(ctx, peer, "peer")
    if peer == ctx.my_rank:
        raise ProtocolError(f"rank {peer} cannot exchange with itself.", world=ctx.world)


def _others(ctx: KernelContext) -> List[int]:
    return [r for r in range(ctx.size) if r != ctx.my_rank]


def _send_all(ctx: KernelContext, items: Sequence[Tuple[int, Buffer]],
              lane: Lane = Lane.COLLECTIVE) -> Generator[None, None, None]:
    pending: List[Connection] = []
    for peer, buf in items:
        conn = yield from ctx.connection(peer)
        conn.queue_frame(Frame.data(ctx.world, buf), lane)
        if not conn.write_step():
            pending.append(conn)
    for conn in pending:
        while not conn.write_step():
            yield


def _recv_one(ctx: KernelContext, peer: int, template: BufferTemplate,
              lane: Lane = Lane.COLLECTIVE) -> Generator[None, None, Buffer]:
    conn = yield from ctx.connection(peer)
    while True:
        frame = conn.pop_frame(lane)
        if frame is not None:
            break
        try:
            added = conn.read_step()
        except MwError:
            # pop_frame still hands out what arrived before the failure, then raises it
            continue
        if added == 0:
            yield
    if frame.dtype_code != template.dtype.code or frame.elem_count != template.count:
        raise ProtocolError(
            f"rank {peer} sent {frame.elem_count} elements of dtype code {frame.dtype_code}, "
            f"expected {template.count} x {template.dtype.name}.",
            world=ctx.world,
        )
    return frame.to_buffer()


def p2p_send(ctx: KernelContext, dst: int, buf: Buffer) -> Step:
    _check_peer(ctx, dst)
    yield from _send_all(ctx, [(dst, buf)], Lane.P2P)
    return None


def p2p_recv(ctx: KernelContext, src: int, template: BufferTemplate) -> Step:
    _check_peer(ctx, src)
    return (yield from _recv_one(ctx, src, template, Lane.P2P))


def broadcast(ctx: KernelContext, root: int, buf: Buffer) -> Step:
    _check_rank(ctx, root, "root")
    if ctx.my_rank == root:
        yield from _send_all(ctx, [(peer, buf) for peer in _others(ctx)])
        return buf
    return (yield from _recv_one(ctx, root, buf.template))


def reduce(ctx: KernelContext, root: int, buf: Buffer, op: ReduceOp) -> Step:
    _check_rank(ctx, root, "root")
    if ctx.my_rank != root:
        yield from _send_all(ctx, [(root, buf)])
        return None
    inputs: List[Optional[Buffer]] = [None] * ctx.size
    inputs[root] = buf
    for peer in _others(ctx):
        inputs[peer] = yield from _recv_one(ctx, peer, buf.template)
    return op.fold(inputs)


def all_reduce(ctx: KernelContext, buf: Buffer, op: ReduceOp) -> Step:
    reduced = yield from reduce(ctx, 0, buf, op)
    return (yield from broadcast(ctx, 0, reduced if ctx.my_rank == 0 else buf))


def all_gather(ctx: KernelContext, buf: Buffer) -> Step:
    yield from _send_all(ctx, [(peer, buf) for peer in _others(ctx)])
    out: List[Optional[Buffer]] = [None] * ctx.size
    out[ctx.my_rank] = buf
    for peer in _others(ctx):
        out[peer] = yield from _recv_one(ctx, peer, buf.template)
    return out


def gather(ctx: KernelContext, root: int, buf: Buffer) -> Step:
    _check_rank(ctx, root, "root")
    if ctx.my_rank != root:
        yield from _send_all(ctx, [(root, buf)])
        return None
    out: List[Optional[Buffer]] = [None] * ctx.size
    out[root] = buf
    for peer in _others(ctx):
        out[peer] = yield from _recv_one(ctx, peer, buf.template)
    return out


def scatter(ctx: KernelContext, root: int, parts: Optional[Sequence[Buffer]], template: Optional[BufferTemplate]) -> Step:
    _check_rank(ctx, root, "root")
    if ctx.my_rank == root:
        check_scatter_parts(ctx.world, ctx.size, parts)
        yield from _send_all(ctx, [(peer, parts[peer]) for peer in _others(ctx)])
        return parts[root]
    if template is None:
        raise ProtocolError("non-root scatter needs a receive template.", world=ctx.world)
    return (yield from _recv_one(ctx, root, template))


def check_scatter_parts(world: str, size: int, parts: Optional[Sequence[Buffer]]) -> None:
    if parts is None or len(parts) != size:
        got = 0 if parts is None else len(parts)
        raise ProtocolError(f"scatter needs {size} parts, got {got}.", world=world)
    shapes = {p.template for p in parts}
    if len(shapes) != 1:
        raise ProtocolError("scatter parts must share dtype and length.", world=world)


def kernel_for(ctx: KernelContext, call: CollectiveCall) -> Step:
    """Builds the kernel generator that executes `call` at this rank."""
    op = call.op
    if op == OpKind.SEND:
        return p2p_send(ctx, call.peer, call.buffer)
    if op == OpKind.RECV:
        return p2p_recv(ctx, call.peer, call.template)
    if op == OpKind.BROADCAST:
        return broadcast(ctx, call.peer, call.buffer)
    if op == OpKind.ALL_REDUCE:
        return all_reduce(ctx, call.buffer, call.reduce_op)
    if op == OpKind.REDUCE:
        return reduce(ctx, call.peer, call.buffer, call.reduce_op)
    if op == OpKind.ALL_GATHER:
        return all_gather(ctx, call.buffer)
    if op == OpKind.GATHER:
        return gather(ctx, call.peer, call.buffer)
    if op == OpKind.SCATTER:
        return scatter(ctx, call.peer, call.parts, call.template)
    raise ProtocolError(f"unsupported op {op}.", world=call.world)


def reference_result(op: OpKind, inputs: Sequence[Buffer], rank: int, root: int = 0,
                     reduce_op: Optional[ReduceOp] = None) -> object:
    """
    What `op` returns at `rank` when rank i contributed inputs[i], computed locally.

    For SCATTER, `inputs` are the root's parts. Point-to-point ops are not covered.
    """
    if op == OpKind.BROADCAST:
        return inputs[root]
    if op == OpKind.ALL_REDUCE:
        return reduce_op.fold(list(inputs))
    if op == OpKind.REDUCE:
        return reduce_op.fold(list(inputs)) if rank == root else None
    if op == OpKind.ALL_GATHER:
        return list(inputs)
    if op == OpKind.GATHER:
        return list(inputs) if rank == root else None
    if op == OpKind.SCATTER:
        return inputs[rank]
    raise ProtocolError(f"no reference result for {op}.")
