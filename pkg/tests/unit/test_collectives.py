import numpy as np
import pytest

from models.buffer import Buffer, BufferTemplate, DType, ReduceOp
from models.work import OpKind
from services.collectives import check_scatter_parts, reference_result
from utils.exceptions import ProtocolError

WAIT = 10.0


@pytest.fixture
def trio(make_manager, init_world):
    """Three managers sharing world "c3"; returns their communicators by rank."""
    managers = [make_manager() for _ in range(3)]
    init_world(managers, "c3")
    return [m.communicator() for m in managers]


def _inputs(dtype: DType = DType.F32, count: int = 4):
    return [Buffer.from_array(np.arange(count) + 10 * rank, dtype) for rank in range(3)]


def _lists(result):
    if result is None:
        return None
    if isinstance(result, list):
        return [b.tolist() for b in result]
    return result.tolist()


# Test cases comparing each collective with the local reference result
def test_broadcast(trio):
    inputs = _inputs()
    handles = [comm.broadcast("c3", 1, inputs[r]) for r, comm in enumerate(trio)]
    for rank, h in enumerate(handles):
        assert _lists(h.wait(WAIT)) == _lists(reference_result(OpKind.BROADCAST, inputs, rank, root=1))


@pytest.mark.parametrize("op", list(ReduceOp))
def test_all_reduce(trio, op):
    inputs = _inputs(DType.I64)
    handles = [comm.all_reduce("c3", inputs[r], op) for r, comm in enumerate(trio)]
    expected = _lists(reference_result(OpKind.ALL_REDUCE, inputs, 0, reduce_op=op))
    assert [_lists(h.wait(WAIT)) for h in handles] == [expected] * 3


def test_reduce_only_root_gets_result(trio):
    inputs = _inputs()
    handles = [comm.reduce("c3", 2, inputs[r], ReduceOp.MAX) for r, comm in enumerate(trio)]
    results = [h.wait(WAIT) for h in handles]
    assert results[0] is None and results[1] is None
    assert results[2].tolist() == [20.0, 21.0, 22.0, 23.0]


def test_all_gather(trio):
    inputs = _inputs(DType.I32, 2)
    handles = [comm.all_gather("c3", inputs[r]) for r, comm in enumerate(trio)]
    for rank, h in enumerate(handles):
        assert _lists(h.wait(WAIT)) == _lists(reference_result(OpKind.ALL_GATHER, inputs, rank))


def test_gather(trio):
    inputs = _inputs(DType.U8, 3)
    handles = [comm.gather("c3", 0, inputs[r]) for r, comm in enumerate(trio)]
    assert _lists(handles[0].wait(WAIT)) == [[0, 1, 2], [10, 11, 12], [20, 21, 22]]
    assert handles[1].wait(WAIT) is None
    assert handles[2].wait(WAIT) is None


def test_scatter(trio):
    parts = _inputs(DType.F64, 2)
    template = BufferTemplate(DType.F64, 2)
    handles = [
        comm.scatter("c3", 1, parts if r == 1 else None, template) for r, comm in enumerate(trio)
    ]
    for rank, h in enumerate(handles):
        assert _lists(h.wait(WAIT)) == _lists(reference_result(OpKind.SCATTER, parts, rank, root=1))


def test_consecutive_collectives_stay_matched(trio):
    handles = []
    for step in range(5):
        for rank, comm in enumerate(trio):
            handles.append((step, comm.all_reduce("c3", Buffer.from_values(DType.I32, [step + rank]))))
    for step, h in handles:
        assert h.wait(WAIT).tolist() == [3 * step + 3]


def test_barrier_completes_everywhere(trio):
    handles = [comm.barrier("c3") for comm in trio]
    assert [h.wait(WAIT).tolist() for h in handles] == [[3]] * 3


# Argument checks that need no network
def test_scatter_parts_must_match_world_size():
    with pytest.raises(ProtocolError):
        check_scatter_parts("w", 3, [Buffer.from_values(DType.I32, [1])] * 2)
    with pytest.raises(ProtocolError):
        check_scatter_parts("w", 2, [Buffer.from_values(DType.I32, [1]), Buffer.from_values(DType.I32, [1, 2])])
    with pytest.raises(ProtocolError):
        check_scatter_parts("w", 2, None)


def test_reference_result_has_no_point_to_point():
    with pytest.raises(ProtocolError):
        reference_result(OpKind.SEND, [], 0)


# Randomized comparison with the local reference across world sizes and element types
def _random_inputs(rng, dtype: DType, size: int, count: int):
    # small integers keep float reductions exact in any order
    return [Buffer.from_array(rng.integers(0, 8, count), dtype) for _ in range(size)]


@pytest.mark.parametrize("size", [2, 3, 4, 5])
@pytest.mark.parametrize("dtype", list(DType))
def test_collectives_match_reference_on_random_inputs(make_manager, init_world, size, dtype):
    rng = np.random.default_rng(size * 31 + dtype.code)
    managers = [make_manager() for _ in range(size)]
    name = f"r{size}{dtype.name.lower()}"
    init_world(managers, name)
    comms = [m.communicator() for m in managers]

    for op in (OpKind.BROADCAST, OpKind.ALL_REDUCE, OpKind.REDUCE, OpKind.ALL_GATHER, OpKind.GATHER, OpKind.SCATTER):
        count = int(rng.integers(0, 4097))
        inputs = _random_inputs(rng, dtype, size, count)
        root = int(rng.integers(0, size))
        reduce_op = list(ReduceOp)[int(rng.integers(0, len(ReduceOp)))]
        if op == OpKind.BROADCAST:
            handles = [c.broadcast(name, root, inputs[r]) for r, c in enumerate(comms)]
        elif op == OpKind.ALL_REDUCE:
            handles = [c.all_reduce(name, inputs[r], reduce_op) for r, c in enumerate(comms)]
        elif op == OpKind.REDUCE:
            handles = [c.reduce(name, root, inputs[r], reduce_op) for r, c in enumerate(comms)]
        elif op == OpKind.ALL_GATHER:
            handles = [c.all_gather(name, inputs[r]) for r, c in enumerate(comms)]
        elif op == OpKind.GATHER:
            handles = [c.gather(name, root, inputs[r]) for r, c in enumerate(comms)]
        else:
            template = BufferTemplate(dtype, count)
            handles = [
                c.scatter(name, root, inputs if r == root else None, template) for r, c in enumerate(comms)
            ]
        for rank, h in enumerate(handles):
            expected = reference_result(op, inputs, rank, root=root, reduce_op=reduce_op)
            assert _lists(h.wait(WAIT)) == _lists(expected), (op, rank, count)


@pytest.mark.parametrize("size", [2, 4])
def test_empty_all_gather(make_manager, init_world, size):
    managers = [make_manager() for _ in range(size)]
    init_world(managers, "empty")
    empty = Buffer.from_values(DType.F32, [])
    handles = [m.communicator().all_gather("empty", empty) for m in managers]
    assert [_lists(h.wait(WAIT)) for h in handles] == [[[]] * size] * size
