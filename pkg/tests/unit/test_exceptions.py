import pytest

from utils.exceptions import (
    AbortedError,
    BrokenWorldError,
    ErrorKind,
    MwError,
    MwTimeoutError,
    ProtocolError,
    RemoteWorkerError,
    UnknownWorldError,
)


# Test case for the rendered message with and without a world
def test_error_str_includes_kind_and_world():
    assert str(RemoteWorkerError("peer reset", world="w2")) == "RemoteWorker(world=w2): peer reset"
    assert str(MwTimeoutError("store slow")) == "Timeout: store slow"


def test_subclasses_carry_their_kind():
    assert UnknownWorldError("w").kind is ErrorKind.UNKNOWN_WORLD
    assert ProtocolError().kind is ErrorKind.PROTOCOL
    assert isinstance(AbortedError("w"), MwError)


# Test case for the cause chain of a broken world
def test_broken_world_keeps_cause():
    cause = RemoteWorkerError("rank 1 closed the connection.", world="w2")
    err = BrokenWorldError("w2", cause=cause)
    assert err.cause is cause
    assert "rank 1 closed" in str(err)
    assert err.world == "w2"


@pytest.mark.parametrize("factory", [lambda: BrokenWorldError(""), lambda: AbortedError("")])
def test_world_scoped_errors_require_a_name(factory):
    with pytest.raises(ValueError):
        factory()
