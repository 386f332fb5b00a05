"""Transform-domain weight pruning.

Transform-domain weights ``E = G W G^T`` are scored by ``Q^2 * E^2`` where
``Q`` measures how strongly each transform-domain position reaches the
output tile. The lowest-scoring positions are masked out, and the survivors
are stored as (flat index, value) pairs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .tensors import FxpFormat, Tensor
from .transforms import TransformSet, weight_growth_bits, weight_transform

PER_KERNEL = "per-kernel"
SHARED = "shared"
POLICIES = (PER_KERNEL, SHARED)


class BudgetError(ValueError):
    """A kernel keeps more weights than the SCU has multipliers for."""


@dataclass(frozen=True, eq=False)
class ImportanceMatrix:
    q: np.ndarray
    transform: TransformSet


@dataclass(frozen=True, eq=False)
class SparsityMask:
    m: np.ndarray       # (..., mu, mu) of {0, 1}
    rho: float
    zeta: np.ndarray    # realized cut score, one per ranked group
    policy: str = PER_KERNEL


@dataclass(eq=False)
class SparseKernelBank:
    """Compressed transform-domain weights of one layer.

    ``kernels[co][ci]`` is a pair of arrays ``(indices, values)`` with
    strictly increasing flat indices into the mu x mu transform domain.
    ``fmt`` is the fixed-point format of the values (None for real values).
    """

    mu: int
    kernels: list[list[tuple[np.ndarray, np.ndarray]]]
    rho: float = 0.0
    policy: str = PER_KERNEL
    fmt: FxpFormat | None = None
    meta: dict = field(default_factory=dict)

    @property
    def cout(self) -> int:
        return len(self.kernels)

    @property
    def cin(self) -> int:
        return len(self.kernels[0]) if self.kernels else 0

    def nnz(self) -> np.ndarray:
        return np.array([[len(idx) for idx, _ in row] for row in self.kernels],
                        dtype=np.int64).reshape(self.cout, self.cin)

    def decompress(self) -> np.ndarray:
        dtype = np.int64 if self.fmt is not None else np.float64
        out = np.zeros((self.cout, self.cin, self.mu * self.mu), dtype=dtype)
        for co, row in enumerate(self.kernels):
            for ci, (idx, val) in enumerate(row):
                out[co, ci, idx] = val
        return out.reshape(self.cout, self.cin, self.mu, self.mu)


def importance_matrix(ts: TransformSet) -> ImportanceMatrix:
    """Factored form: product of row norms of A and column norms of B."""
    a = np.sqrt((ts.A.real() ** 2).sum(axis=1))   # over output positions
    b = np.sqrt((ts.B.real() ** 2).sum(axis=0))   # over input positions
    f = a * b
    return ImportanceMatrix(np.outer(f, f), ts)


def importance_matrix_bruteforce(ts: TransformSet) -> np.ndarray:
    """Six-index sum over (c, d, q, v) of (A[i,c] A[j,d] B[q,i] B[v,j])^2."""
    A, B = ts.A.real(), ts.B.real()
    mu, m, p = ts.mu, ts.m, ts.p
    q = np.zeros((mu, mu))
    for i in range(mu):
        for j in range(mu):
            acc = 0.0
            for c in range(m):
                for d in range(m):
                    for qq in range(p):
                        for vv in range(p):
                            h = A[i, c] * A[j, d] * B[qq, i] * B[vv, j]
                            acc += h * h
            q[i, j] = math.sqrt(acc)
    return q


def pruned_count(mu: int, rho: float) -> int:
    return math.floor(rho * mu * mu + 1e-9)


def _rank_mask(scores: np.ndarray, n_zero: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero the ``n_zero`` lowest scores of each row; ties keep low indices."""
    flat = scores.reshape(-1, scores.shape[-1])
    mask = np.ones_like(flat, dtype=np.int8)
    zeta = np.zeros(flat.shape[0])
    idx = np.arange(flat.shape[1])
    for g, row in enumerate(flat):
        order = np.lexsort((-idx, row))
        mask[g, order[:n_zero]] = 0
        if n_zero:
            zeta[g] = row[order[n_zero]] if n_zero < len(row) else np.inf
    return mask.reshape(scores.shape), zeta


def make_mask(e: np.ndarray, q: ImportanceMatrix, rho: float,
              policy: str = PER_KERNEL) -> SparsityMask:
    """Build keep/drop masks for transform-domain weights ``e`` (..., mu, mu).

    ``per-kernel`` ranks each kernel on its own; ``shared`` sums the scores of
    every kernel given and ranks once, yielding a single mu x mu mask.
    ``zeta`` is the smallest surviving score (0 when nothing is pruned).
    """
    if not 0 <= rho < 1:
        raise ValueError(f"rho must be in [0, 1), got {rho}")
    if policy not in POLICIES:
        raise ValueError(f"unknown mask policy {policy!r}")
    e = np.asarray(e, dtype=np.float64)
    mu = q.q.shape[0]
    if e.shape[-2:] != (mu, mu):
        raise ValueError(f"weights must end in ({mu}, {mu})")
    scores = (q.q ** 2) * e ** 2
    n_zero = pruned_count(mu, rho)
    if policy == SHARED:
        total = scores.reshape(-1, mu * mu).sum(axis=0)
        m, zeta = _rank_mask(total[None], n_zero)
        return SparsityMask(m.reshape(mu, mu), rho, zeta, policy)
    m, zeta = _rank_mask(scores.reshape(*scores.shape[:-2], mu * mu), n_zero)
    return SparsityMask(m.reshape(e.shape), rho, zeta.reshape(e.shape[:-2]),
                        policy)


def transformed_weight_format(fmt: FxpFormat, ts: TransformSet) -> FxpFormat:
    """Format that holds ``G W G^T`` of ``fmt`` weights without loss."""
    extra_frac = 2 * ts.G.shift
    total = fmt.total_bits + weight_growth_bits(ts) + extra_frac
    if total > 32:
        raise ValueError(f"transformed weights need {total} bits (> 32)")
    return FxpFormat(total, fmt.fraction_bits + extra_frac, fmt.signed)


def transform_weights(ts: TransformSet, w) -> tuple[np.ndarray, FxpFormat | None]:
    """Transform (cout, cin, k, k) weights. Fixed-point weights stay exact."""
    if isinstance(w, Tensor):
        if w.is_fxp:
            return weight_transform(ts, w.data), \
                transformed_weight_format(w.fmt, ts)
        w = w.data
    return weight_transform(ts, np.asarray(w, dtype=np.float64)), None


def compress(e_bank: np.ndarray, mask: SparsityMask, *,
             fmt: FxpFormat | None = None, mult_budget: int | None = None,
             drop_zeros: bool = False) -> SparseKernelBank:
    """Pack masked weights into per-kernel (index, value) lists.

    Every mask-selected slot is kept, so the per-kernel count equals the
    mask budget. ``drop_zeros`` also discards slots whose value is exactly 0.
    With ``mult_budget`` set, a kernel with more entries raises BudgetError.
    """
    e_bank = np.asarray(e_bank)
    if e_bank.ndim != 4 or e_bank.shape[2] != e_bank.shape[3]:
        raise ValueError("e_bank must be (cout, cin, mu, mu)")
    cout, cin, mu, _ = e_bank.shape
    m = np.broadcast_to(mask.m, e_bank.shape).reshape(cout, cin, mu * mu)
    flat = e_bank.reshape(cout, cin, mu * mu)
    kernels = []
    for co in range(cout):
        row = []
        for ci in range(cin):
            keep = m[co, ci] != 0
            if drop_zeros:
                keep &= flat[co, ci] != 0
            idx = np.flatnonzero(keep).astype(np.int64)
            if mult_budget is not None and len(idx) > mult_budget:
                raise BudgetError(
                    f"kernel ({co}, {ci}) keeps {len(idx)} weights, "
                    f"budget is {mult_budget}")
            row.append((idx, flat[co, ci, idx].copy()))
        kernels.append(row)
    return SparseKernelBank(mu, kernels, mask.rho, mask.policy, fmt)


def sparse_tile(ts: TransformSet, kernel: tuple[np.ndarray, np.ndarray],
                y: np.ndarray) -> np.ndarray:
    """Index-selected Hadamard product; ``y`` may carry leading batch axes."""
    idx, val = kernel
    y = np.asarray(y)
    mu = ts.mu
    if y.shape[-2:] != (mu, mu):
        raise ValueError(f"input-domain patch must end in ({mu}, {mu})")
    if len(idx) and (idx.min() < 0 or idx.max() >= mu * mu):
        raise IndexError("sparse index outside the transform domain")
    yf = y.reshape(*y.shape[:-2], mu * mu)
    dtype = np.result_type(yf.dtype, np.asarray(val).dtype)
    u = np.zeros(yf.shape, dtype=dtype)
    u[..., idx] = yf[..., idx] * val
    return u.reshape(y.shape)


def prune_layer(ts: TransformSet, w, rho: float, policy: str = PER_KERNEL,
                mult_budget: int | None = None) -> tuple[SparseKernelBank, SparsityMask]:
    """Transform, score, mask and compress a (cout, cin, k, k) weight set."""
    e, fmt = transform_weights(ts, w)
    mask = make_mask(e if fmt is None else e * 2.0 ** -fmt.fraction_bits,
                     importance_matrix(ts), rho, policy)
    bank = compress(e, mask, fmt=fmt, mult_budget=mult_budget)
    bank.meta["kind"] = ts.kind
    return bank, mask


# --- sparse-bank file ------------------------------------------------------

BANK_MAGIC = b"NVCS"
BANK_HEADER = struct.Struct("<4sBHHHHBBBB")


def save_bank(bank: SparseKernelBank, path: str | Path) -> None:
    """Header, then per kernel (out-major): nnz u16, u8 indices, values.

    Values are int32 codes for fixed-point banks and float64 otherwise.
    """
    frac = Fraction(bank.rho).limit_denominator(10000)
    fxp = bank.fmt is not None
    header = BANK_HEADER.pack(
        BANK_MAGIC, bank.mu, bank.cin, bank.cout, frac.numerator,
        frac.denominator, POLICIES.index(bank.policy), int(fxp),
        bank.fmt.total_bits if fxp else 0, bank.fmt.fraction_bits if fxp else 0)
    parts = [header]
    vdt = "<i4" if fxp else "<f8"
    for row in bank.kernels:
        for idx, val in row:
            parts.append(struct.pack("<H", len(idx)))
            parts.append(np.asarray(idx, dtype="u1").tobytes())
            parts.append(np.asarray(val).astype(vdt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_bank(path: str | Path) -> SparseKernelBank:
    raw = Path(path).read_bytes()
    (magic, mu, cin, cout, rn, rd, pol, fxp, total, fbits) = \
        BANK_HEADER.unpack_from(raw)
    if magic != BANK_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    fmt = FxpFormat(total, fbits) if fxp else None
    vdt = np.dtype("<i4") if fxp else np.dtype("<f8")
    pos = BANK_HEADER.size
    kernels = []
    for _ in range(cout):
        row = []
        for _ in range(cin):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            idx = np.frombuffer(raw, dtype="u1", count=n, offset=pos)
            pos += n
            val = np.frombuffer(raw, dtype=vdt, count=n, offset=pos)
            pos += n * vdt.itemsize
            val = val.astype(np.int64 if fxp else np.float64)
            row.append((idx.astype(np.int64), val))
        kernels.append(row)
    return SparseKernelBank(mu, kernels, rn / rd, POLICIES[pol], fmt)
