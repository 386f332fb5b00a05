"""Whole-layer execution on the sparse fast-transform core, plus its cycle model.

A layer is cut into output tiles. Each tile's input patch is moved to the
transform domain once per input channel; the index-selected products are
summed over input channels in the transform domain, and only the sum goes
through the inverse transform.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .oracle import ConvParams, TileAlignment, dense_mult_count, direct, \
    find_tile_alignment
from .pruning import PER_KERNEL, SparseKernelBank, SparsityMask, compress, \
    prune_layer, sparse_tile, transform_weights
from .tensors import ACTIVATION_FORMAT, WEIGHT_FORMAT, FxpFormat, Tensor, \
    requantize
from .transforms import TransformSet, builtin_conv_f2x2_3x3, \
    builtin_deconv_t3_6x6_4x4, input_transform, output_transform

CONV = "conv3x3s1"
DECONV = "deconv4x4s2"
BOUNDARY = "boundary"
KINDS = (CONV, DECONV, BOUNDARY)

FAST_SPARSE = "fast-sparse"
FAST_DENSE = "fast-dense"
DIRECT = "direct"
ALGORITHMS = (FAST_SPARSE, FAST_DENSE, DIRECT)

_GEOMETRY = {CONV: (3, 1, "conv"), DECONV: (4, 2, "deconv")}


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the decoder.

    ``h``/``w`` are the input spatial size. Boundary layers are opaque: they
    are never executed and only carry byte and cycle costs.
    """

    kind: str
    cin: int
    cout: int
    h: int
    w: int
    algorithm: str = FAST_SPARSE
    activation: str = "none"
    pad: int = 1
    rho: float = 0.5
    weight_fmt: FxpFormat = WEIGHT_FORMAT
    act_fmt: FxpFormat = ACTIVATION_FORMAT
    out_fmt: FxpFormat = ACTIVATION_FORMAT
    name: str = ""
    tag: str = ""
    out_h_: int | None = None
    out_w_: int | None = None
    boundary_bytes: int | None = None
    boundary_cycles: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.activation not in ("none", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.cin, self.cout, self.h, self.w) < 1:
            raise ValueError(f"layer {self.name!r}: sizes must be positive")
        if not 0 <= self.rho < 1:
            raise ValueError(f"layer {self.name!r}: rho must be in [0, 1)")

    @property
    def is_boundary(self) -> bool:
        return self.kind == BOUNDARY

    @property
    def params(self) -> ConvParams:
        if self.is_boundary:
            raise ValueError("boundary layers have no convolution params")
        k, s, op = _GEOMETRY[self.kind]
        return ConvParams(k, s, self.pad, op)

    @property
    def k(self) -> int:
        return self.params.k

    @property
    def s(self) -> int:
        return self.params.s

    @property
    def out_h(self) -> int:
        if self.is_boundary:
            return self.out_h_ if self.out_h_ is not None else self.h
        return self.params.out_size(self.h)

    @property
    def out_w(self) -> int:
        if self.is_boundary:
            return self.out_w_ if self.out_w_ is not None else self.w
        return self.params.out_size(self.w)

    @property
    def transform(self) -> TransformSet:
        if self.kind == CONV:
            return builtin_conv_f2x2_3x3()
        if self.kind == DECONV:
            return builtin_deconv_t3_6x6_4x4()
        raise ValueError("boundary layers have no transform")

    @property
    def effective_rho(self) -> float:
        return self.rho if self.algorithm == FAST_SPARSE else 0.0

    def with_(self, **kw) -> "LayerSpec":
        return replace(self, **kw)


@dataclass(frozen=True)
class ScuConfig:
    pif: int = 12
    pof: int = 12
    rho: float = 0.5
    frequency_hz: float = 400e6
    preu_fill: int = 4
    postu_fill: int = 3
    convs_per_pass: int = 4
    base_multipliers: int = 64

    def __post_init__(self):
        if self.pif < 1 or self.pof < 1:
            raise ValueError("Pif and Pof must be >= 1")

    @property
    def multipliers_per_scu(self) -> int:
        # sized for the weights that survive pruning (32 at rho = 0.5)
        return round(self.base_multipliers * (1 - self.rho))

    @property
    def peak_ops_per_s(self) -> float:
        """Raw multiplier throughput, one multiply + one add per multiplier."""
        return self.pif * self.pof * self.multipliers_per_scu * 2 * self.frequency_hz


# --- tiling ------------------------------------------------------------------

_ALIGN_CACHE: dict[str, TileAlignment] = {}


def tile_alignment(ts: TransformSet) -> TileAlignment:
    key = ts.name or ts.kind
    if key not in _ALIGN_CACHE:
        _ALIGN_CACHE[key] = find_tile_alignment(ts)
    return _ALIGN_CACHE[key]


@dataclass(frozen=True)
class TileGrid:
    """Tile placement along one spatial axis.

    Tile ``t`` reads input pixels ``[in0 + t*in_step, ... + patch)`` and
    writes cropped output pixels ``[out0 + t*tile, ... + tile)``.
    """

    count: int
    in0: int
    in_step: int
    out0: int
    tile: int
    patch: int

    def in_range(self, t: int) -> tuple[int, int]:
        lo = self.in0 + t * self.in_step
        return lo, lo + self.patch

    def out_range(self, t: int) -> tuple[int, int]:
        lo = self.out0 + t * self.tile
        return lo, lo + self.tile


def tile_grid(spec: LayerSpec, axis_len: int, out_len: int) -> TileGrid:
    ts = spec.transform
    al = tile_alignment(ts)
    s, m = ts.s, ts.m
    # padding shifts conv outputs forward and crops deconv outputs
    shift = al.offset[0] + (spec.pad if ts.kind == "conv" else -spec.pad)
    # first input origin whose tile starts at or before cropped output 0
    in0 = -shift // s
    out0 = s * in0 + shift
    count = max(1, math.ceil((out_len - out0) / m))
    return TileGrid(count, in0, al.in_step, out0, m, ts.p)


def tiles_per_layer(spec: LayerSpec) -> int:
    gr = tile_grid(spec, spec.h, spec.out_h)
    gc = tile_grid(spec, spec.w, spec.out_w)
    return gr.count * gc.count


def _extract_patches(x: np.ndarray, gr: TileGrid, gc: TileGrid) -> np.ndarray:
    """(n, c, H, W) -> (n, c, Tr, Tc, p, p), zero outside the input."""
    n, c, H, W = x.shape
    top, left = max(0, -gr.in0), max(0, -gc.in0)
    need_h = gr.in0 + (gr.count - 1) * gr.in_step + gr.patch
    need_w = gc.in0 + (gc.count - 1) * gc.in_step + gc.patch
    bottom, right = max(0, need_h - H), max(0, need_w - W)
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    xp = xp[:, :, gr.in0 + top:, gc.in0 + left:]
    view = np.lib.stride_tricks.sliding_window_view(xp, (gr.patch, gc.patch),
                                                    axis=(2, 3))
    return view[:, :, ::gr.in_step, ::gc.in_step][:, :, :gr.count, :gc.count]


# --- execution ---------------------------------------------------------------

def prepare_weights(spec: LayerSpec, w, policy: str = PER_KERNEL,
                    mult_budget: int | None = None) -> SparseKernelBank:
    """Turn dense spatial weights into the bank the engine consumes."""
    ts = spec.transform
    if spec.algorithm == FAST_SPARSE and spec.rho > 0:
        bank, _ = prune_layer(ts, w, spec.rho, policy, mult_budget)
        return bank
    e, fmt = transform_weights(ts, w)
    full = SparsityMask(np.ones((ts.mu, ts.mu), dtype=np.int8), 0.0,
                        np.zeros(1), policy)
    bank = compress(e, full, fmt=fmt)
    bank.meta["kind"] = ts.kind
    return bank


def run_layer(x: Tensor, weights, spec: LayerSpec, threads: int = 1,
              policy: str = PER_KERNEL) -> Tensor:
    """Execute one layer.

    ``weights`` is a dense (cout, cin, k, k) Tensor/array or a prepared
    SparseKernelBank. A fixed-point input selects fixed-point execution; the
    weights must then be fixed-point too, and the output is re-quantized to
    ``spec.out_fmt`` once, after the inverse transform.
    """
    if spec.is_boundary:
        raise ValueError(f"layer {spec.name!r} is opaque and cannot be executed")
    n, cin, H, W = x.shape
    if (cin, H, W) != (spec.cin, spec.h, spec.w):
        raise ValueError(f"input {x.shape} does not match layer "
                         f"({spec.cin}, {spec.h}, {spec.w})")
    if spec.algorithm == DIRECT:
        return _run_direct(x, weights, spec)

    bank = weights if isinstance(weights, SparseKernelBank) \
        else prepare_weights(spec, weights, policy)
    if (bank.cout, bank.cin) != (spec.cout, spec.cin):
        raise ValueError("weight bank channels do not match the layer")
    if x.is_fxp != (bank.fmt is not None):
        raise ValueError("input and weights must both be real or both fxp")
    ts = spec.transform
    Ho, Wo = spec.out_h, spec.out_w
    gr, gc = tile_grid(spec, H, Ho), tile_grid(spec, W, Wo)
    y = input_transform(ts, _extract_patches(x.data, gr, gc))  # n,c,Tr,Tc,mu,mu

    def one_channel(co: int) -> np.ndarray:
        u = None
        for ci in range(cin):  # fixed ascending order
            part = sparse_tile(ts, bank.kernels[co][ci], y[:, ci])
            u = part if u is None else u + part
        v = output_transform(ts, u)  # n,Tr,Tc,m,m
        v = v.transpose(0, 1, 3, 2, 4).reshape(n, gr.count * gr.tile,
                                               gc.count * gc.tile)
        return v[:, -gr.out0:-gr.out0 + Ho, -gc.out0:-gc.out0 + Wo]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            chans = list(pool.map(one_channel, range(spec.cout)))
    else:
        chans = [one_channel(co) for co in range(spec.cout)]
    acc = np.stack(chans, axis=1)

    if x.is_fxp:
        bits = x.fmt.fraction_bits + bank.fmt.fraction_bits \
            + 2 * ts.B.shift + 2 * ts.A.shift
        return _finish_fxp(acc, bits, spec)
    return _finish_real(acc, spec)


def _run_direct(x: Tensor, w, spec: LayerSpec) -> Tensor:
    w_arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    acc = direct(x.data, w_arr, spec.params)
    if x.is_fxp:
        if not (isinstance(w, Tensor) and w.is_fxp):
            raise ValueError("fixed-point input needs fixed-point weights")
        return _finish_fxp(acc, x.fmt.fraction_bits + w.fmt.fraction_bits, spec)
    return _finish_real(acc, spec)


def _finish_fxp(acc, acc_bits, spec) -> Tensor:
    codes, n_sat = requantize(acc, acc_bits, spec.out_fmt)
    if spec.activation == "relu":
        codes = np.maximum(codes, 0)
    return Tensor(codes, spec.out_fmt, saturated=n_sat)


def _finish_real(acc, spec) -> Tensor:
    if spec.activation == "relu":
        acc = np.maximum(acc, 0.0)
    return Tensor(acc)


# --- performance model -------------------------------------------------------

def kernel_nnz(spec: LayerSpec) -> int:
    mu = spec.transform.mu
    return mu * mu - math.floor(spec.effective_rho * mu * mu + 1e-9)


def tiles_per_pass(spec: LayerSpec, scu: ScuConfig) -> int:
    return scu.convs_per_pass if spec.kind == CONV else 1


def cycles_per_pass(spec: LayerSpec, scu: ScuConfig) -> int:
    """1 when the kept weights fit the SCU multipliers, more for denser layers."""
    demand = kernel_nnz(spec) * tiles_per_pass(spec, scu)
    return math.ceil(demand / scu.multipliers_per_scu)


def channel_passes(spec: LayerSpec, scu: ScuConfig) -> int:
    return math.ceil(spec.cin / scu.pif) * math.ceil(spec.cout / scu.pof)


def tile_cycles(spec: LayerSpec, scu: ScuConfig, tiles: int) -> int:
    """Array cycles for ``tiles`` output tiles, without pipeline fill."""
    if spec.is_boundary:
        raise ValueError("boundary layers have no tile cycles")
    if spec.algorithm == DIRECT:
        raise ValueError(f"layer {spec.name!r}: cycle model needs a fast algorithm")
    groups = math.ceil(tiles / tiles_per_pass(spec, scu))
    return channel_passes(spec, scu) * groups * cycles_per_pass(spec, scu)


def pipeline_fill(scu: ScuConfig) -> int:
    return scu.preu_fill + scu.postu_fill


def layer_cycle_model(spec: LayerSpec, scu: ScuConfig) -> int:
    if spec.is_boundary:
        return spec.boundary_cycles
    return tile_cycles(spec, scu, tiles_per_layer(spec)) + pipeline_fill(scu)


def layer_dense_mults(spec: LayerSpec) -> int:
    if spec.is_boundary:
        return 0
    return dense_mult_count(spec.params, spec.out_h, spec.out_w, spec.cin,
                            spec.cout)


def layer_gops(spec: LayerSpec) -> int:
    """Dense-equivalent operation count (multiply and add counted separately)."""
    return 2 * layer_dense_mults(spec)


def layer_raw_mults(spec: LayerSpec) -> int:
    """Multiplications the SCU array actually performs."""
    if spec.is_boundary:
        return 0
    return tiles_per_layer(spec) * kernel_nnz(spec) * spec.cin * spec.cout
