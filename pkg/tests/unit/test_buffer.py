import numpy as np
import pytest

from models.buffer import Buffer, BufferTemplate, DType, ReduceOp
from services.transport_service import Frame, FrameDecoder, encode_frame
from utils.exceptions import ProtocolError


# Test case for the little-endian F32 encoding
def test_f32_values_pack_little_endian():
    buf = Buffer.from_values(DType.F32, [1.0, 2.0])
    assert buf.data == bytes.fromhex("0000803f00000040")
    assert len(buf) == 2
    assert buf.template == BufferTemplate(DType.F32, 2)


def test_from_array_infers_dtype():
    buf = Buffer.from_array(np.arange(3, dtype=np.int64))
    assert buf.dtype is DType.I64
    assert buf.tolist() == [0, 1, 2]


def test_payload_must_match_width():
    with pytest.raises(ProtocolError):
        Buffer(DType.I32, b"\x00\x00\x00")


def test_unknown_dtype_code():
    with pytest.raises(ProtocolError):
        DType.from_code(99)
    assert DType.from_code(5) is DType.U8


def test_zeros_and_nbytes():
    template = BufferTemplate(DType.F64, 4)
    assert template.nbytes == 32
    assert Buffer.zeros(template).tolist() == [0.0] * 4


# Reduce operators
@pytest.mark.parametrize("op, expected", [
    (ReduceOp.SUM, [6, 9]),
    (ReduceOp.PROD, [6, 24]),
    (ReduceOp.MIN, [1, 2]),
    (ReduceOp.MAX, [3, 4]),
])
def test_fold_reduces_elementwise(op, expected):
    inputs = [Buffer.from_values(DType.I32, v) for v in ([1, 4], [2, 2], [3, 3])]
    assert op.fold(inputs).tolist() == expected


def test_combine_rejects_mismatched_templates():
    with pytest.raises(ProtocolError):
        ReduceOp.SUM.combine(Buffer.from_values(DType.I32, [1]), Buffer.from_values(DType.I32, [1, 2]))
    with pytest.raises(ProtocolError):
        ReduceOp.SUM.fold([])


# Test case for every element type through the frame codec
@pytest.mark.parametrize("dtype", list(DType))
def test_every_dtype_survives_a_frame(dtype):
    values = np.random.default_rng(dtype.code).integers(0, 200, 257)
    buf = Buffer.from_array(values, dtype)
    assert buf.dtype is dtype
    assert len(buf.data) == 257 * dtype.width

    decoder = FrameDecoder()
    decoder.feed(encode_frame(Frame.data("w", buf)))
    back = decoder.next_frame().to_buffer()
    assert back == buf
    assert back.to_array().dtype == dtype.np_dtype
    assert back.tolist() == values.astype(dtype.np_dtype).tolist()
