from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Sequence

import numpy as np

from utils.exceptions import ProtocolError


class DType(Enum):
    """Element types a Buffer may hold: (wire code, width in bytes, numpy little-endian type)."""
    F32 = (1, 4, "<f4")
    F64 = (2, 8, "<f8")
    I32 = (3, 4, "<i4")
    I64 = (4, 8, "<i8")
    U8 = (5, 1, "u1")

    def __init__(self, code: int, width: int, np_type: str):
        self.code = code
        self.width = width
        self.np_dtype = np.dtype(np_type)

    @classmethod
    def from_code(cls, code: int) -> "DType":
        for dtype in cls:
            if dtype.code == code:
                return dtype
        raise ProtocolError(f"unknown dtype code {code}.")

    @classmethod
    def from_numpy(cls, np_dtype) -> "DType":
        np_dtype = np.dtype(np_dtype)
        for dtype in cls:
            if dtype.np_dtype.kind == np_dtype.kind and dtype.np_dtype.itemsize == np_dtype.itemsize:
                return dtype
        raise ProtocolError(f"unsupported element type {np_dtype}.")


@dataclass(frozen=True)
class BufferTemplate:
    """Expected dtype and element count of an incoming Buffer."""
    dtype: DType
    count: int

    def __post_init__(self):
        if self.count < 0:
            raise ProtocolError(f"element count must be >= 0, got {self.count}.")

    @property
    def nbytes(self) -> int:
        return self.count * self.dtype.width


@dataclass(frozen=True)
class Buffer:
    """
    A contiguous typed payload moved by collectives.

    Attributes:
        dtype (DType): Element type.
        data (bytes): Little-endian packed elements, exactly len × width bytes.
    """
    dtype: DType
    data: bytes

    def __post_init__(self):
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))
        if len(self.data) % self.dtype.width != 0:
            raise ProtocolError(
                f"payload of {len(self.data)} bytes is not a multiple of {self.dtype.name} width {self.dtype.width}."
            )

    def __len__(self) -> int:
        return len(self.data) // self.dtype.width

    @property
    def count(self) -> int:
        return len(self)

    @property
    def template(self) -> BufferTemplate:
        return BufferTemplate(self.dtype, len(self))

    @classmethod
    def from_array(cls, array: np.ndarray, dtype: DType = None) -> "Buffer":
        """Encodes a one-dimensional array; the element type is inferred unless given."""
        if dtype is None:
            dtype = DType.from_numpy(np.asarray(array).dtype)
        packed = np.ascontiguousarray(np.asarray(array).ravel(), dtype=dtype.np_dtype)
        return cls(dtype, packed.tobytes())

    @classmethod
    def from_values(cls, dtype: DType, values: Iterable) -> "Buffer":
        return cls.from_array(np.asarray(list(values)), dtype)

    @classmethod
    def zeros(cls, template: BufferTemplate) -> "Buffer":
        return cls(template.dtype, bytes(template.nbytes))

    def to_array(self) -> np.ndarray:
        """Decodes the payload into a read-only numpy view."""
        return np.frombuffer(self.data, dtype=self.dtype.np_dtype)

    def tolist(self) -> List:
        return self.to_array().tolist()


class ReduceOp(Enum):
    SUM = "sum"
    PROD = "prod"
    MIN = "min"
    MAX = "max"

    @property
    def ufunc(self) -> np.ufunc:
        return _UFUNCS[self]

    def combine(self, left: Buffer, right: Buffer) -> Buffer:
        """Elementwise left ∘ right; both sides must share dtype and length."""
        if left.template != right.template:
            raise ProtocolError(f"cannot reduce {left.template} with {right.template}.")
        with np.errstate(all="ignore"):
            out = self.ufunc(left.to_array(), right.to_array())
        return Buffer.from_array(out, left.dtype)

    def fold(self, buffers: Sequence[Buffer]) -> Buffer:
        """Left fold in sequence order; callers pass buffers rank-ascending."""
        if not buffers:
            raise ProtocolError("cannot reduce an empty buffer list.")
        acc = buffers[0]
        for buf in buffers[1:]:
            acc = self.combine(acc, buf)
        return acc


_UFUNCS = {
    ReduceOp.SUM: np.add,
    ReduceOp.PROD: np.multiply,
    ReduceOp.MIN: np.minimum,
    ReduceOp.MAX: np.maximum,
}
