"""Brute-force references for convolution and transposed convolution.

Everything here is written for clarity, not speed. Arrays are
(batch, channels, rows, cols); weights are (out_channels, in_channels, k, k)
for both convolution and deconvolution. Integer inputs are accumulated in
int64 so the fixed-point path can be checked bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensors import Tensor
from .transforms import TransformSet, fast_tile


class AlignmentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvParams:
    k: int
    s: int = 1
    pad: int = 0
    kind: str = "conv"

    def __post_init__(self):
        if self.k < 1 or self.s < 1 or self.pad < 0:
            raise ValueError(f"bad conv params {self}")
        if self.kind not in ("conv", "deconv"):
            raise ValueError(f"unknown kind {self.kind!r}")

    def out_size(self, n: int) -> int:
        if self.kind == "conv":
            return (n + 2 * self.pad - self.k) // self.s + 1
        return (n - 1) * self.s + self.k - 2 * self.pad


@dataclass(frozen=True)
class TileAlignment:
    """Where a fast tile lands in the (uncropped) direct output.

    A patch whose top-left input pixel is ``(i, j)`` produces the output tile
    starting at ``(s*i + offset[0], s*j + offset[1])``. Tiles advance by
    ``in_step`` input pixels and ``out_step`` output pixels.
    """

    offset: tuple[int, int]
    in_step: int
    out_step: int
    patch: int
    tile: int


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _acc_dtype(*arrays):
    if all(np.issubdtype(a.dtype, np.integer) for a in arrays):
        return np.int64
    return np.float64


def _check_shapes(x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("expected 4-D input and 4-D weights")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, "
                         f"weights expect {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ValueError("kernels must be square")


def direct_conv(x, w, params: ConvParams) -> np.ndarray:
    """Cross-correlation, one kernel tap at a time."""
    x, w = _arr(x), _arr(w)
    _check_shapes(x, w)
    k, s, pad = w.shape[2], params.s, params.pad
    if k != params.k:
        raise ValueError(f"kernel is {k}x{k}, params say {params.k}")
    dt = _acc_dtype(x, w)
    xp = np.pad(x.astype(dt), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, cin, H, W = x.shape
    Ho, Wo = params.out_size(H), params.out_size(W)
    if Ho < 1 or Wo < 1:
        raise ValueError("kernel larger than padded input")
    out = np.zeros((n, w.shape[0], Ho, Wo), dtype=dt)
    for co in range(w.shape[0]):
        for ci in range(cin):
            for a in range(k):
                for b in range(k):
                    win = xp[:, ci, a:a + s * (Ho - 1) + 1:s,
                             b:b + s * (Wo - 1) + 1:s]
                    out[:, co] += win * w[co, ci, a, b]
    return out


def direct_conv_im2col(x, w, params: ConvParams) -> np.ndarray:
    """Second, independent convolution: explicit column matrix + matmul."""
    x, w = _arr(x), _arr(w)
    _check_shapes(x, w)
    k, s, pad = params.k, params.s, params.pad
    dt = _acc_dtype(x, w)
    n, cin, H, W = x.shape
    Ho, Wo = params.out_size(H), params.out_size(W)
    xp = np.zeros((n, cin, H + 2 * pad, W + 2 * pad), dtype=dt)
    xp[:, :, pad:pad + H, pad:pad + W] = x
    cols = np.zeros((n, cin * k * k, Ho * Wo), dtype=dt)
    for oy in range(Ho):
        for ox in range(Wo):
            patch = xp[:, :, oy * s:oy * s + k, ox * s:ox * s + k]
            cols[:, :, oy * Wo + ox] = patch.reshape(n, -1)
    wmat = w.reshape(w.shape[0], -1).astype(dt)
    out = np.stack([wmat @ cols[b] for b in range(n)])
    return out.reshape(n, w.shape[0], Ho, Wo)


def direct_deconv(x, w, params: ConvParams) -> np.ndarray:
    """Transposed convolution by scatter-accumulate, then crop ``pad``."""
    x, w = _arr(x), _arr(w)
    _check_shapes(x, w)
    k, s, pad = w.shape[2], params.s, params.pad
    dt = _acc_dtype(x, w)
    n, cin, H, W = x.shape
    full = np.zeros((n, w.shape[0], (H - 1) * s + k, (W - 1) * s + k), dtype=dt)
    xd = x.astype(dt)
    for co in range(w.shape[0]):
        for ci in range(cin):
            for a in range(k):
                for b in range(k):
                    full[:, co, a:a + s * (H - 1) + 1:s,
                         b:b + s * (W - 1) + 1:s] += xd[:, ci] * w[co, ci, a, b]
    Ho, Wo = params.out_size(H), params.out_size(W)
    if Ho < 1 or Wo < 1:
        raise ValueError("padding crops away the whole output")
    return full[:, :, pad:pad + Ho, pad:pad + Wo]


def deconv_by_zero_stuffing(x, w, params: ConvParams) -> np.ndarray:
    """Insert s-1 zeros between inputs, pad k-1-pad, correlate with the
    spatially flipped kernel."""
    x, w = _arr(x), _arr(w)
    k, s, pad = params.k, params.s, params.pad
    n, cin, H, W = x.shape
    stuffed = np.zeros((n, cin, (H - 1) * s + 1, (W - 1) * s + 1), dtype=x.dtype)
    stuffed[:, :, ::s, ::s] = x
    edge = k - 1 - pad
    if edge < 0:
        raise ValueError("zero-stuffing identity needs pad <= k-1")
    flipped = w[:, :, ::-1, ::-1]
    return direct_conv(stuffed, flipped, ConvParams(k, 1, edge, "conv"))


def direct(x, w, params: ConvParams) -> np.ndarray:
    if params.kind == "conv":
        return direct_conv(x, w, params)
    return direct_deconv(x, w, params)


def find_tile_alignment(ts: TransformSet, trials: int = 100,
                        seed: int = 0) -> TileAlignment:
    """Search the output offset at which fast tiles reproduce the direct op.

    A random patch is embedded in a larger random image; every candidate
    offset in [-k, k]^2 is checked (bit-exact, integer-valued data) against
    the direct result of the whole image, so only offsets where the tile is
    complete survive. Exactly one offset must survive all trials.
    """
    rng = np.random.default_rng(seed)
    k, s, p, m = ts.k, ts.s, ts.p, ts.m
    margin = k
    size = p + 2 * margin
    kind = ts.kind
    params = ConvParams(k, s, 0, kind)
    candidates = {(dr, dc) for dr in range(-k, k + 1) for dc in range(-k, k + 1)}
    for _ in range(trials):
        img = rng.integers(-8, 9, size=(1, 1, size, size)).astype(np.float64)
        ker = rng.integers(-8, 9, size=(1, 1, k, k)).astype(np.float64)
        full = direct(img, ker, params)[0, 0]
        tile = fast_tile(ts, img[0, 0, margin:margin + p, margin:margin + p],
                         ker[0, 0])
        base = s * margin
        alive = set()
        for dr, dc in candidates:
            r0, c0 = base + dr, base + dc
            if r0 < 0 or c0 < 0 or r0 + m > full.shape[0] or c0 + m > full.shape[1]:
                continue
            if np.array_equal(full[r0:r0 + m, c0:c0 + m], tile):
                alive.add((dr, dc))
        candidates = alive
        if not candidates:
            break
    if len(candidates) != 1:
        raise AlignmentError(
            f"{ts.name or ts.kind}: expected one matching offset, "
            f"found {sorted(candidates)}")
    (offset,) = candidates
    in_step = m // s
    return TileAlignment(offset=offset, in_step=in_step, out_step=in_step * s,
                         patch=p, tile=m)


def dense_mult_count(params: ConvParams, out_h: int, out_w: int,
                     cin: int = 1, cout: int = 1) -> int:
    """Multiplications of the direct algorithm for the given output size.

    Deconvolution counts k^2/s^2 MACs per output element (the average number
    of scatter contributions per output).
    """
    k2 = params.k * params.k
    if params.kind == "conv":
        return k2 * cin * cout * out_h * out_w
    total = k2 * cin * cout * out_h * out_w
    if total % (params.s * params.s):
        raise ValueError("output area is not a whole number of stride cells")
    return total // (params.s * params.s)


def count_scatter_macs(params: ConvParams, in_h: int, in_w: int,
                       rows: range, cols: range) -> int:
    """Brute-force count of scatter MACs landing inside an output window."""
    k, s = params.k, params.s
    n = 0
    for i in range(in_h):
        for j in range(in_w):
            for a in range(k):
                for b in range(k):
                    if (i * s + a - params.pad) in rows and \
                            (j * s + b - params.pad) in cols:
                        n += 1
    return n


def direct_tiles(ts: TransformSet, x: np.ndarray, w: np.ndarray,
                 alignment: TileAlignment) -> np.ndarray:
    """Direct result over the tile window for a batch of (patch, kernel) pairs.

    ``x`` is (n, p, p) and ``w`` is (n, k, k), each pair with its own kernel.
    The patch is processed on its own (no padding); the tile is cut from the
    uncropped output at the alignment offset.
    """
    x, w = np.asarray(x), np.asarray(w)
    n, k, s, m = x.shape[0], ts.k, ts.s, ts.m
    dt = _acc_dtype(x, w)
    if ts.kind == "conv":
        full_edge = ts.p - k + 1
        full = np.zeros((n, full_edge, full_edge), dtype=dt)
        for a in range(k):
            for b in range(k):
                full += x[:, a:a + full_edge, b:b + full_edge] * w[:, a, b, None, None]
    else:
        full_edge = (ts.p - 1) * s + k
        full = np.zeros((n, full_edge, full_edge), dtype=dt)
        span = s * (ts.p - 1) + 1
        for a in range(k):
            for b in range(k):
                full[:, a:a + span:s, b:b + span:s] += x * w[:, a, b, None, None]
    r0, c0 = alignment.offset
    return full[:, r0:r0 + m, c0:c0 + m]


def tile_equivalence(ts: TransformSet, trials: int, seed: int = 0) -> float:
    """Max |fast - direct| over ``trials`` random real (patch, kernel) pairs."""
    rng = np.random.default_rng(seed)
    al = find_tile_alignment(ts, seed=seed)
    x = rng.standard_normal((trials, ts.p, ts.p))
    w = rng.standard_normal((trials, ts.k, ts.k))
    fast = fast_tile(ts, x, w)
    return float(np.abs(fast - direct_tiles(ts, x, w, al)).max()) if trials else 0.0
