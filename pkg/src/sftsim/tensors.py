"""Dense 4-D tensors and the fixed-point number system.

Real tensors hold float64 data. Fixed-point tensors hold integer codes
(int64) together with the :class:`FxpFormat` that gives them meaning,
``value = code * 2**-fraction_bits``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NVCT"
FILE_VERSION = 1
HEADER = struct.Struct("<4sHBBBB6sIIII")  # 32 bytes

MODE_REAL = 0
MODE_FXP = 1


@dataclass(frozen=True)
class FxpFormat:
    total_bits: int
    fraction_bits: int
    signed: bool = True

    def __post_init__(self):
        if not 0 < self.fraction_bits < self.total_bits <= 32:
            raise ValueError(
                f"invalid format: need 0 < fraction_bits < total_bits <= 32, "
                f"got total={self.total_bits} frac={self.fraction_bits}")

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_code(self) -> int:
        if self.signed:
            return (1 << (self.total_bits - 1)) - 1
        return (1 << self.total_bits) - 1

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.fraction_bits

    def __str__(self):
        s = "s" if self.signed else "u"
        return f"{s}{self.total_bits}.{self.fraction_bits}"


# Defaults: 16-bit weights and 12-bit activations.
WEIGHT_FORMAT = FxpFormat(16, 12)
ACTIVATION_FORMAT = FxpFormat(12, 9)


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable (batch, channels, rows, cols) tensor.

    ``fmt`` is None for real tensors. The backing array is made read-only on
    construction; use :meth:`to_numpy` for a writable copy.
    """

    data: np.ndarray
    fmt: FxpFormat | None = None
    saturated: int = field(default=0, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"tensor must be 4-D, got shape {arr.shape}")
        if self.fmt is None:
            arr = np.array(arr, dtype=np.float64)
        else:
            if not np.issubdtype(arr.dtype, np.integer):
                raise TypeError("fixed-point tensor needs integer codes")
            arr = np.array(arr, dtype=np.int64)
            if arr.size and (arr.min() < self.fmt.min_code
                             or arr.max() > self.fmt.max_code):
                raise ValueError(f"codes out of range for {self.fmt}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def is_fxp(self) -> bool:
        return self.fmt is not None

    def flat_index(self, b: int, c: int, r: int, x: int) -> int:
        _, C, R, X = self.shape
        return ((b * C + c) * R + r) * X + x

    def get(self, b: int, c: int, r: int, x: int):
        return self.data.reshape(-1)[self.flat_index(b, c, r, x)]

    def to_numpy(self) -> np.ndarray:
        return self.data.copy()

    def values(self) -> np.ndarray:
        """Real-valued view of the payload (dequantized for fxp)."""
        if self.fmt is None:
            return self.data
        return self.data * self.fmt.ulp


def round_half_even_shift(codes: np.ndarray, shift: int) -> np.ndarray:
    """Integer ``codes / 2**shift`` rounded to nearest, ties to even."""
    codes = np.asarray(codes, dtype=np.int64)
    if shift <= 0:
        return codes << (-shift)
    q = codes >> shift  # floor
    rem = codes - (q << shift)
    half = 1 << (shift - 1)
    up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + up


def saturate(codes: np.ndarray, fmt: FxpFormat) -> tuple[np.ndarray, int]:
    clipped = np.clip(codes, fmt.min_code, fmt.max_code)
    return clipped.astype(np.int64), int(np.count_nonzero(clipped != codes))


def quantize(t: Tensor | np.ndarray, fmt: FxpFormat) -> Tensor:
    """Round-to-nearest-even quantization with saturation.

    The number of saturated elements is kept on the result (``saturated``).
    """
    if isinstance(t, Tensor):
        if t.is_fxp:
            raise TypeError("quantize expects a real tensor")
        arr = t.data
    else:
        arr = np.asarray(t, dtype=np.float64)
    scaled = np.rint(np.ldexp(arr, fmt.fraction_bits))  # rint is half-even
    codes, n_sat = saturate(scaled, fmt)
    return Tensor(codes, fmt, saturated=n_sat)


def dequantize(t: Tensor) -> Tensor:
    if not t.is_fxp:
        raise TypeError("dequantize expects a fixed-point tensor")
    return Tensor(np.ldexp(t.data.astype(np.float64), -t.fmt.fraction_bits))


def requantize(acc: np.ndarray, acc_fraction_bits: int,
               fmt: FxpFormat) -> tuple[np.ndarray, int]:
    """Map wide accumulator codes to ``fmt`` (single rounding + saturation)."""
    codes = round_half_even_shift(acc, acc_fraction_bits - fmt.fraction_bits)
    return saturate(codes, fmt)


def tensor_slice_rows(t: Tensor, start: int, stop: int) -> Tensor:
    rows = t.shape[2]
    if not 0 <= start <= stop <= rows:
        raise IndexError(f"row range [{start}, {stop}) outside [0, {rows})")
    return Tensor(t.data[:, :, start:stop, :], t.fmt, t.saturated)


def concat_rows(parts: list[Tensor]) -> Tensor:
    fmts = {p.fmt for p in parts}
    if len(fmts) != 1:
        raise ValueError("cannot concatenate tensors with different formats")
    return Tensor(np.concatenate([p.data for p in parts], axis=2), fmts.pop())


def save_tensor(t: Tensor, path: str | Path) -> None:
    """Write the little-endian tensor file (32-byte header + payload).

    Real payloads are float64, fixed-point payloads int32 codes.
    """
    if t.is_fxp:
        mode, total, frac = MODE_FXP, t.fmt.total_bits, t.fmt.fraction_bits
        signed = int(t.fmt.signed)
        payload = t.data.astype("<i4").tobytes()
    else:
        mode, total, frac, signed = MODE_REAL, 0, 0, 1
        payload = t.data.astype("<f8").tobytes()
    header = HEADER.pack(MAGIC, FILE_VERSION, mode, total, frac, signed,
                         b"\0" * 6, *t.shape)
    Path(path).write_bytes(header + payload)


def load_tensor(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ValueError(f"{path}: truncated tensor header")
    magic, version, mode, total, frac, signed, _, *shape = \
        HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FILE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    n = int(np.prod(shape))
    body = raw[HEADER.size:]
    if mode == MODE_REAL:
        arr = np.frombuffer(body, dtype="<f8", count=n)
        return Tensor(arr.reshape(shape))
    if mode == MODE_FXP:
        arr = np.frombuffer(body, dtype="<i4", count=n)
        return Tensor(arr.reshape(shape).astype(np.int64),
                      FxpFormat(total, frac, bool(signed)))
    raise ValueError(f"{path}: unknown numeric mode {mode}")
