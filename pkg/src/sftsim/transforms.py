"""Transform matrices and the fast tile formula ``A^T [(G W G^T) * (B^T X B)] A``.

Two instantiations are built in: Winograd F(2x2, 3x3) for 3x3 stride-1
convolution and the T3(6x6, 4x4) fast transposed-convolution transform for
4x4 stride-2 deconvolution. Other matrix sets can be loaded from a text file.

Every matrix is dyadic: ``value = numerator / 2**shift`` with an integer
numerator array and one shift per matrix. Fixed-point transforms run on the
numerators alone, which keeps them exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class DyadicMatrix:
    num: np.ndarray
    shift: int = 0

    def __post_init__(self):
        num = np.array(self.num, dtype=np.int64)
        num.setflags(write=False)
        object.__setattr__(self, "num", num)

    @classmethod
    def from_fractions(cls, rows) -> "DyadicMatrix":
        fr = [[Fraction(v) for v in row] for row in rows]
        shift = 0
        for row in fr:
            for v in row:
                den = v.denominator
                if den & (den - 1):
                    raise ValueError(f"entry {v} is not a dyadic rational")
                shift = max(shift, den.bit_length() - 1)
        num = [[int(v * (1 << shift)) for v in row] for row in fr]
        return cls(np.array(num, dtype=np.int64), shift)

    @property
    def shape(self) -> tuple[int, int]:
        return self.num.shape

    @property
    def T(self) -> "DyadicMatrix":
        return DyadicMatrix(self.num.T, self.shift)

    def real(self) -> np.ndarray:
        return np.ldexp(self.num.astype(np.float64), -self.shift)

    def fractions(self) -> list[list[Fraction]]:
        den = 1 << self.shift
        return [[Fraction(int(v), den) for v in row] for row in self.num]

    def __eq__(self, other):
        if not isinstance(other, DyadicMatrix):
            return NotImplemented
        return self.fractions() == other.fractions()


@dataclass(frozen=True, eq=False)
class TransformSet:
    """Matrices A (mu x m), B (p x mu), G (mu x k) plus their dimensions."""

    kind: str
    m: int
    k: int
    s: int
    p: int
    mu: int
    A: DyadicMatrix
    B: DyadicMatrix
    G: DyadicMatrix
    r: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("conv", "deconv"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "conv":
            if self.s != 1 or not (self.p == self.mu == self.m + self.k - 1):
                raise ValueError("conv transform needs s=1 and p=mu=m+k-1")
        else:
            r = self.r
            if r is None or self.m != r * self.s:
                raise ValueError("deconv transform needs m = r*s")
            if self.p != math.ceil((self.k + r * self.s - 1) / self.s):
                raise ValueError("deconv patch edge must be ceil((k+r*s-1)/s)")
            if self.mu != self.k + (r - 1) * self.s:
                raise ValueError("deconv mu must be k+(r-1)*s")
        expect = {"A": (self.mu, self.m), "B": (self.p, self.mu),
                  "G": (self.mu, self.k)}
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")

    @property
    def mults_per_tile(self) -> int:
        return self.mu * self.mu


def _conv_f2x2_3x3() -> TransformSet:
    BT = [[1, 0, -1, 0],
          [0, 1, 1, 0],
          [0, -1, 1, 0],
          [0, 1, 0, -1]]
    G = [[1, 0, 0],
         ["1/2", "1/2", "1/2"],
         ["1/2", "-1/2", "1/2"],
         [0, 0, 1]]
    AT = [[1, 1, 1, 0],
          [0, 1, -1, -1]]
    return TransformSet(
        "conv", m=2, k=3, s=1, p=4, mu=4,
        A=DyadicMatrix.from_fractions(AT).T,
        B=DyadicMatrix.from_fractions(BT).T,
        G=DyadicMatrix.from_fractions(G),
        name="F(2x2,3x3)")


def _deconv_t3_6x6_4x4() -> TransformSet:
    BT = [[1, 0, -1, 0, 0],
          [0, 1, 1, 0, 0],
          [0, -1, 1, 0, 0],
          [0, -1, 0, 1, 0],
          [0, 1, 0, -1, 0],
          [0, 0, 1, 1, 0],
          [0, 0, -1, 1, 0],
          [0, 0, -1, 0, 1]]
    G = [[0, 0, 0, 1],
         [0, "1/2", 0, "1/2"],
         [0, "-1/2", 0, "1/2"],
         [0, 1, 0, 0],
         [0, 0, 1, 0],
         ["1/2", 0, "1/2", 0],
         ["-1/2", 0, "1/2", 0],
         [1, 0, 0, 0]]
    AT = [[1, 1, 1, 0, 0, 0, 0, 0],
          [0, 0, 0, 0, 1, 1, 1, 0],
          [0, 1, -1, 0, 0, 0, 0, 0],
          [0, 0, 0, 0, 0, 1, -1, 0],
          [0, 1, 1, 1, 0, 0, 0, 0],
          [0, 0, 0, 0, 0, 1, 1, 1]]
    return TransformSet(
        "deconv", m=6, k=4, s=2, p=5, mu=8, r=3,
        A=DyadicMatrix.from_fractions(AT).T,
        B=DyadicMatrix.from_fractions(BT).T,
        G=DyadicMatrix.from_fractions(G),
        name="T3(6x6,4x4)")


_CONV = _conv_f2x2_3x3()
_DECONV = _deconv_t3_6x6_4x4()


def builtin_conv_f2x2_3x3() -> TransformSet:
    return _CONV


def builtin_deconv_t3_6x6_4x4() -> TransformSet:
    return _DECONV


def _check_edge(arr: np.ndarray, edge: int, what: str):
    if arr.shape[-2:] != (edge, edge):
        raise ValueError(f"{what} must end in ({edge}, {edge}), "
                         f"got {arr.shape}")


# The transforms accept any leading batch dimensions. Integer inputs take the
# exact numerator path: the result is scaled by 2**(2*shift) of the matrix.

def input_transform(ts: TransformSet, x: np.ndarray) -> np.ndarray:
    """``B^T X B`` over the last two axes."""
    x = np.asarray(x)
    _check_edge(x, ts.p, "input patch")
    B = ts.B.num if _is_int(x) else ts.B.real()
    return np.einsum("ai,...ab,bj->...ij", B, x, B)


def weight_transform(ts: TransformSet, w: np.ndarray) -> np.ndarray:
    """``G W G^T`` over the last two axes."""
    w = np.asarray(w)
    _check_edge(w, ts.k, "kernel")
    G = ts.G.num if _is_int(w) else ts.G.real()
    return np.einsum("ia,...ab,jb->...ij", G, w, G)


def output_transform(ts: TransformSet, u: np.ndarray) -> np.ndarray:
    """``A^T U A`` over the last two axes."""
    u = np.asarray(u)
    _check_edge(u, ts.mu, "transform-domain patch")
    A = ts.A.num if _is_int(u) else ts.A.real()
    return np.einsum("ai,...ab,bj->...ij", A, u, A)


def fast_tile(ts: TransformSet, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Full single-tile pipeline in real arithmetic."""
    y = input_transform(ts, np.asarray(x, dtype=np.float64))
    e = weight_transform(ts, np.asarray(w, dtype=np.float64))
    return output_transform(ts, e * y)


def integer_scale_bits(ts: TransformSet) -> dict[str, int]:
    """Extra fraction bits introduced by the integer (numerator) path."""
    return {"input": 2 * ts.B.shift, "weight": 2 * ts.G.shift,
            "output": 2 * ts.A.shift}


def tile_multiplication_count(ts: TransformSet) -> tuple[int, int]:
    """(transform-domain multiplications, dense-equivalent MACs) per tile."""
    fast = ts.mu * ts.mu
    if ts.kind == "conv":
        dense = ts.m ** 2 * ts.k ** 2
    else:
        dense = ts.k ** 2 * ts.m ** 2 // ts.s ** 2
    return fast, dense


def weight_growth_bits(ts: TransformSet) -> int:
    """Integer bits gained by ``G W G^T`` over ``W`` (worst case)."""
    row_sum = np.abs(ts.G.real()).sum(axis=1).max()
    return 2 * max(0, math.ceil(math.log2(row_sum)))


def _is_int(a: np.ndarray) -> bool:
    return np.issubdtype(a.dtype, np.integer)


# --- matrix override files -------------------------------------------------

def load_transform_set(path: str | Path, kind: str, s: int = 1) -> TransformSet:
    """Load A, B, G from a text file.

    Blocks start with a header ``A|B|G rows cols`` followed by ``rows`` lines
    of whitespace-separated rationals (``n/d`` or integers). ``#`` starts a
    comment. Dimensions are inferred from the matrix shapes.
    """
    mats: dict[str, DyadicMatrix] = {}
    lines = [ln.split("#", 1)[0].strip()
             for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 3 or head[0] not in ("A", "B", "G"):
            raise ValueError(f"{path}: bad block header {lines[i]!r}")
        name, rows, cols = head[0], int(head[1]), int(head[2])
        body = lines[i + 1:i + 1 + rows]
        if len(body) != rows:
            raise ValueError(f"{path}: block {name} truncated")
        vals = [[Fraction(tok) for tok in ln.split()] for ln in body]
        if any(len(row) != cols for row in vals):
            raise ValueError(f"{path}: block {name} has ragged rows")
        mats[name] = DyadicMatrix.from_fractions(vals)
        i += 1 + rows
    missing = {"A", "B", "G"} - mats.keys()
    if missing:
        raise ValueError(f"{path}: missing matrices {sorted(missing)}")
    A, B, G = mats["A"], mats["B"], mats["G"]
    mu, m = A.shape
    p = B.shape[0]
    k = G.shape[1]
    r = m // s if kind == "deconv" else None
    return TransformSet(kind, m=m, k=k, s=s, p=p, mu=mu, A=A, B=B, G=G, r=r,
                        name=Path(path).stem)


def dump_transform_set(ts: TransformSet) -> str:
    out = []
    for name in ("A", "B", "G"):
        mat = getattr(ts, name)
        out.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat.fractions():
            out.append(" ".join(str(v) for v in row))
    return "\n".join(out) + "\n"
