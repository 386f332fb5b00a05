import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sftsim.engine import (CONV, DECONV, DIRECT, FAST_DENSE, FAST_SPARSE,
                           LayerSpec, ScuConfig, _extract_patches,
                           layer_cycle_model, layer_dense_mults, layer_raw_mults,
                           pipeline_fill, prepare_weights, run_layer, tile_cycles,
                           tile_grid, tiles_per_layer)
from sftsim.oracle import direct
from sftsim.pruning import prune_layer
from sftsim.tensors import (ACTIVATION_FORMAT, WEIGHT_FORMAT, Tensor, quantize,
                            requantize)
from sftsim.transforms import input_transform, output_transform


def dyadic(rng, shape, bits=6):
    return rng.integers(-64, 64, shape) / 2.0 ** bits


@pytest.mark.parametrize("kind,shape", [(CONV, (1, 8, 16, 16)), (DECONV, (1, 4, 8, 8)),
                                        (CONV, (2, 3, 7, 5)), (DECONV, (1, 2, 5, 7))])
def test_dense_fast_layer_is_bit_exact(kind, shape):
    rng = np.random.default_rng(0)
    _, cin, h, w = shape
    spec = LayerSpec(kind, cin, 3, h, w, algorithm=FAST_DENSE)
    x = dyadic(rng, shape)
    wt = dyadic(rng, (3, cin, spec.k, spec.k))
    got = run_layer(Tensor(x), wt, spec).data
    assert np.array_equal(got, direct(x, wt, spec.params))
    assert got.shape[2:] == (spec.out_h, spec.out_w)


@pytest.mark.parametrize("kind", [CONV, DECONV])
def test_rho_zero_sparse_equals_dense(kind):
    rng = np.random.default_rng(1)
    spec = LayerSpec(kind, 3, 2, 6, 6, rho=0.0)
    x, wt = dyadic(rng, (1, 3, 6, 6)), dyadic(rng, (2, 3, spec.k, spec.k))
    assert np.array_equal(run_layer(Tensor(x), wt, spec).data,
                          direct(x, wt, spec.params))


def masked_pipeline(x, bank, spec):
    """Tile-by-tile reference: sum_c (M*E_c)*Y_c, inverse transform, stitch."""
    ts = spec.transform
    gr, gc = tile_grid(spec, spec.h, spec.out_h), tile_grid(spec, spec.w, spec.out_w)
    e = bank.decompress().astype(np.float64)
    pad = np.zeros((x.shape[1], spec.h + 40, spec.w + 40))
    pad[:, 20:20 + spec.h, 20:20 + spec.w] = x[0]
    out = np.zeros((bank.cout, gr.count * ts.m, gc.count * ts.m))
    for tr in range(gr.count):
        for tc in range(gc.count):
            r0, c0 = gr.in_range(tr)[0] + 20, gc.in_range(tc)[0] + 20
            y = input_transform(ts, pad[:, r0:r0 + ts.p, c0:c0 + ts.p])
            for co in range(bank.cout):
                u = (e[co] * y).sum(axis=0)
                out[co, tr * ts.m:(tr + 1) * ts.m, tc * ts.m:(tc + 1) * ts.m] = \
                    output_transform(ts, u)
    return out[:, -gr.out0:-gr.out0 + spec.out_h, -gc.out0:-gc.out0 + spec.out_w]


@pytest.mark.parametrize("kind", [CONV, DECONV])
def test_sparse_layer_matches_masked_pipeline(kind):
    rng = np.random.default_rng(2)
    spec = LayerSpec(kind, 3, 2, 9, 8, rho=0.5)
    x, wt = dyadic(rng, (1, 3, 9, 8)), dyadic(rng, (2, 3, spec.k, spec.k))
    bank = prepare_weights(spec, wt)
    assert (bank.nnz() == spec.transform.mu ** 2 // 2).all()
    got = run_layer(Tensor(x), bank, spec).data[0]
    assert np.array_equal(got, masked_pipeline(x, bank, spec))


@pytest.mark.parametrize("kind,shape", [(CONV, (1, 12, 32, 32)), (DECONV, (1, 12, 16, 16))])
def test_fxp_layer_within_one_ulp(kind, shape):
    rng = np.random.default_rng(3)
    spec = LayerSpec(kind, 12, 12, shape[2], shape[3], rho=0.0)
    x = quantize(rng.uniform(-1, 1, shape), ACTIVATION_FORMAT)
    w = quantize(rng.uniform(-0.1, 0.1, (12, 12, spec.k, spec.k)), WEIGHT_FORMAT)
    got = run_layer(x, w, spec)
    acc = direct(x.data, w.data, spec.params)
    want, _ = requantize(acc, ACTIVATION_FORMAT.fraction_bits + WEIGHT_FORMAT.fraction_bits,
                         spec.out_fmt)
    assert got.fmt == spec.out_fmt
    assert np.abs(got.data - want).max() <= 1


def test_fxp_sparse_layer_is_deterministic_across_threads():
    rng = np.random.default_rng(4)
    spec = LayerSpec(DECONV, 5, 7, 6, 6, activation="relu")
    x = quantize(rng.uniform(-1, 1, (1, 5, 6, 6)), ACTIVATION_FORMAT)
    w = quantize(rng.uniform(-0.2, 0.2, (7, 5, 4, 4)), WEIGHT_FORMAT)
    bank, _ = prune_layer(spec.transform, w, 0.5)
    a = run_layer(x, bank, spec, threads=1)
    b = run_layer(x, bank, spec, threads=4)
    assert np.array_equal(a.data, b.data) and (a.data >= 0).all()


def test_relu_is_idempotent():
    rng = np.random.default_rng(5)
    x = Tensor(dyadic(rng, (1, 2, 6, 6)))
    relu = LayerSpec(CONV, 2, 2, 6, 6, activation="relu", algorithm=FAST_DENSE)
    ident = np.zeros((2, 2, 3, 3))
    ident[0, 0, 1, 1] = ident[1, 1, 1, 1] = 1
    once = run_layer(x, ident, relu)
    twice = run_layer(once, ident, relu)
    assert np.array_equal(once.data, np.maximum(x.data, 0))
    assert np.array_equal(once.data, twice.data)


def test_direct_algorithm_runs_the_oracle():
    rng = np.random.default_rng(6)
    spec = LayerSpec(DECONV, 2, 2, 4, 4, algorithm=DIRECT)
    x, w = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 2, 4, 4))
    assert np.array_equal(run_layer(Tensor(x), w, spec).data, direct(x, w, spec.params))


def test_layer_errors():
    with pytest.raises(ValueError):
        LayerSpec("conv5x5", 1, 1, 4, 4)
    with pytest.raises(ValueError):
        LayerSpec(CONV, 1, 1, 4, 4, rho=1.0)
    spec = LayerSpec(CONV, 2, 2, 4, 4)
    with pytest.raises(ValueError):
        run_layer(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((2, 3, 3, 3)), spec)
    fx = quantize(np.zeros((1, 2, 4, 4)), ACTIVATION_FORMAT)
    with pytest.raises(ValueError):
        run_layer(fx, np.zeros((2, 2, 3, 3)), spec)
    with pytest.raises(ValueError):
        run_layer(fx, np.zeros((2, 2, 3, 3)), LayerSpec("boundary", 2, 2, 4, 4))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 16))
def test_channel_sum_commutes_with_inverse_transform(c, seed):
    from sftsim.transforms import builtin_deconv_t3_6x6_4x4
    ts = builtin_deconv_t3_6x6_4x4()
    u = np.random.default_rng(seed).integers(-1000, 1000, (c, 8, 8))
    assert np.array_equal(output_transform(ts, u).sum(axis=0),
                          output_transform(ts, u.sum(axis=0)))


def test_patch_extraction_covers_padding():
    spec = LayerSpec(CONV, 1, 1, 5, 5)
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    g = tile_grid(spec, 5, 5)
    assert (g.in0, g.out0, g.count) == (-1, 0, 3)
    patches = _extract_patches(x, g, g)
    assert patches.shape == (1, 1, 3, 3, 4, 4)
    assert patches[0, 0, 0, 0, 0].tolist() == [0, 0, 0, 0]
    assert patches[0, 0, 1, 1, 1:, 1:].tolist() == x[0, 0, 2:5, 2:5].tolist()


# --- cycle model ---------------------------------------------------------------

def test_peak_throughput():
    scu = ScuConfig()
    assert scu.multipliers_per_scu == 32
    assert scu.peak_ops_per_s == pytest.approx(3.6864e12, rel=0, abs=1)
    assert 0.90 <= 3525e9 / scu.peak_ops_per_s <= 1.0


def test_single_deconv_tile_is_one_pass():
    spec = LayerSpec(DECONV, 12, 12, 3, 3)
    scu = ScuConfig()
    assert tile_cycles(spec, scu, 1) == 1
    assert tiles_per_layer(spec) == 1
    assert layer_cycle_model(spec, scu) == 1 + pipeline_fill(scu)


def test_conv_tiles_pack_four_per_pass():
    spec = LayerSpec(CONV, 12, 12, 8, 8)
    scu = ScuConfig()
    assert tile_cycles(spec, scu, 4) == 1
    assert tile_cycles(spec, scu, 5) == 2


def test_dense_layers_take_more_cycles_per_pass():
    scu = ScuConfig()
    assert tile_cycles(LayerSpec(DECONV, 12, 12, 3, 3, algorithm=FAST_DENSE), scu, 1) == 2
    assert tile_cycles(LayerSpec(CONV, 12, 12, 3, 3, algorithm=FAST_DENSE), scu, 4) == 2


def test_doubling_cout_doubles_passes():
    scu = ScuConfig()
    a = LayerSpec(CONV, 12, 24, 8, 8)
    b = a.with_(cout=48)
    assert tile_cycles(b, scu, 16) == 2 * tile_cycles(a, scu, 16)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 100), st.integers(1, 100), st.integers(1, 16), st.integers(1, 16),
       st.sampled_from([CONV, DECONV]))
def test_cycles_monotone_in_parallelism(cin, cout, pif, pof, kind):
    spec = LayerSpec(kind, cin, cout, 10, 10)
    base = tile_cycles(spec, ScuConfig(pif=pif, pof=pof), 20)
    assert tile_cycles(spec, ScuConfig(pif=pif + 1, pof=pof), 20) <= base
    assert tile_cycles(spec, ScuConfig(pif=pif, pof=pof + 1), 20) <= base
    if cin % (2 * pif) == 0:
        assert 2 * tile_cycles(spec, ScuConfig(pif=2 * pif, pof=pof), 20) == base


def test_cycles_scale_with_area():
    scu = ScuConfig()
    a = LayerSpec(CONV, 36, 36, 64, 64)
    b = a.with_(h=128, w=128)
    assert tile_cycles(b, scu, tiles_per_layer(b)) == 4 * tile_cycles(a, scu, tiles_per_layer(a))


def test_operation_counts():
    deconv = LayerSpec(DECONV, 12, 12, 3, 3)
    assert layer_dense_mults(deconv) == 144 * 144
    assert layer_raw_mults(deconv) == 32 * 144
    conv = LayerSpec(CONV, 1, 1, 2, 2, algorithm=FAST_SPARSE)
    assert layer_dense_mults(conv) == 36
