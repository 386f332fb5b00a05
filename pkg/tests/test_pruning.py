import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sftsim.pruning import (PER_KERNEL, SHARED, BudgetError, SparsityMask,
                            compress, importance_matrix,
                            importance_matrix_bruteforce, load_bank, make_mask,
                            prune_layer, save_bank, sparse_tile,
                            transform_weights)
from sftsim.tensors import WEIGHT_FORMAT, quantize
from sftsim.transforms import (builtin_conv_f2x2_3x3, builtin_deconv_t3_6x6_4x4,
                               input_transform)

CONV = builtin_conv_f2x2_3x3()
DECONV = builtin_deconv_t3_6x6_4x4()
BOTH = [CONV, DECONV]


@pytest.mark.parametrize("ts", BOTH, ids=lambda t: t.kind)
def test_importance_factored_equals_bruteforce(ts):
    q = importance_matrix(ts).q
    assert np.abs(q - importance_matrix_bruteforce(ts)).max() < 1e-12
    assert np.array_equal(q, q.T)
    assert (q >= 0).all()


def test_importance_does_not_depend_on_weights():
    assert np.array_equal(importance_matrix(CONV).q, importance_matrix(CONV).q)


def test_rho_zero_keeps_everything():
    e = np.random.default_rng(0).standard_normal((3, 4, 4))
    mask = make_mask(e, importance_matrix(CONV), 0.0)
    assert mask.m.all() and not mask.zeta.any()


@pytest.mark.parametrize("ts,zeros", [(CONV, 8), (DECONV, 32)], ids=["conv", "deconv"])
def test_half_sparsity_budget(ts, zeros):
    e = np.random.default_rng(1).standard_normal((5, 6, ts.mu, ts.mu))
    mask = make_mask(e, importance_matrix(ts), 0.5)
    assert ((mask.m == 0).reshape(30, -1).sum(axis=1) == zeros).all()


def test_dominant_entry_survives():
    rng = np.random.default_rng(2)
    e = rng.standard_normal((4, 4)) * 1e-6
    e[2, 1] = 10.0
    assert make_mask(e, importance_matrix(CONV), 0.5).m[2, 1] == 1


def test_ties_keep_lower_index():
    e = np.ones((4, 4))
    q = importance_matrix(CONV)
    flat_q = q.q.ravel()
    mask = make_mask(e, q, 0.25).m.ravel()
    # among equal-score positions, pruned ones have higher indices than kept ones
    for score in np.unique(flat_q):
        pos = np.flatnonzero(flat_q == score)
        kept, cut = pos[mask[pos] == 1], pos[mask[pos] == 0]
        if len(kept) and len(cut):
            assert kept.max() < cut.min()


def test_zeta_is_smallest_surviving_score():
    e = np.random.default_rng(3).standard_normal((4, 4))
    q = importance_matrix(CONV)
    mask = make_mask(e, q, 0.5)
    scores = (q.q ** 2) * e ** 2
    assert mask.zeta.item() == scores[mask.m == 1].min()
    assert (scores[mask.m == 0] <= mask.zeta.item()).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(0.0, 0.9), st.floats(0.0, 0.9))
def test_masks_are_nested(seed, r1, r2):
    lo, hi = sorted((r1, r2))
    e = np.random.default_rng(seed).standard_normal((3, 8, 8))
    q = importance_matrix(DECONV)
    m_lo, m_hi = make_mask(e, q, lo).m, make_mask(e, q, hi).m
    assert (m_hi <= m_lo).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(1e-3, 1e3))
def test_mask_is_scale_invariant(seed, c):
    e = np.random.default_rng(seed).standard_normal((2, 2, 4, 4))
    q = importance_matrix(CONV)
    assert np.array_equal(make_mask(e, q, 0.5).m, make_mask(c * e, q, 0.5).m)


def test_shared_policy_gives_one_mask():
    e = np.random.default_rng(4).standard_normal((3, 2, 8, 8))
    mask = make_mask(e, importance_matrix(DECONV), 0.5, SHARED)
    assert mask.m.shape == (8, 8) and (mask.m == 0).sum() == 32
    bank = compress(e, mask)
    assert all(np.array_equal(idx, np.flatnonzero(mask.m)) for row in bank.kernels
               for idx, _ in row)


def test_compress_layout_and_round_trip():
    rng = np.random.default_rng(5)
    e = rng.standard_normal((3, 2, 8, 8))
    mask = make_mask(e, importance_matrix(DECONV), 0.5)
    bank = compress(e, mask)
    nnz = bank.nnz()
    assert (nnz == 32).all() and nnz.max() - nnz.min() == 0
    for row in bank.kernels:
        for idx, _ in row:
            assert (np.diff(idx) > 0).all()
    assert np.array_equal(bank.decompress(), e * mask.m)


def test_all_zero_kernel_compresses_to_nothing():
    e = np.zeros((1, 1, 4, 4))
    mask = SparsityMask(np.zeros((1, 1, 4, 4), dtype=np.int8), 1 - 1e-9, np.zeros(1))
    idx, val = compress(e, mask).kernels[0][0]
    assert len(idx) == len(val) == 0
    idx, _ = compress(e, make_mask(e, importance_matrix(CONV), 0.5),
                      drop_zeros=True).kernels[0][0]
    assert len(idx) == 0


def test_budget_is_enforced():
    e = np.ones((1, 1, 4, 4))
    mask = make_mask(e, importance_matrix(CONV), 0.25)
    with pytest.raises(BudgetError):
        compress(e, mask, mult_budget=8)
    assert compress(e, mask, mult_budget=12).nnz().item() == 12


def test_sparse_tile_edge_cases():
    y = np.random.default_rng(6).standard_normal((4, 4))
    empty = (np.array([], dtype=np.int64), np.array([]))
    assert not sparse_tile(CONV, empty, y).any()
    full = (np.arange(16), np.arange(16.0))
    assert np.array_equal(sparse_tile(CONV, full, y), y * np.arange(16.0).reshape(4, 4))
    with pytest.raises(IndexError):
        sparse_tile(CONV, (np.array([16]), np.array([1.0])), y)


@pytest.mark.parametrize("ts", BOTH, ids=lambda t: t.kind)
def test_sparse_tile_matches_masked_dense_in_fxp(ts):
    rng = np.random.default_rng(7)
    w = quantize(rng.uniform(-1, 1, (200, 1, ts.k, ts.k)), WEIGHT_FORMAT)
    bank, mask = prune_layer(ts, w, 0.5)
    G = ts.G.num
    e = np.einsum("ia,nab,jb->nij", G, w.data[:, 0], G)[:, None]  # integer codes
    x = rng.integers(-2048, 2048, (200, ts.p, ts.p))
    y = input_transform(ts, x)
    for i in range(200):
        got = sparse_tile(ts, bank.kernels[i][0], y[i])
        assert np.array_equal(got, mask.m[i, 0] * e[i, 0] * y[i])


def test_transformed_weights_keep_their_precision():
    ts = CONV
    w = quantize(np.random.default_rng(8).uniform(-1, 1, (2, 2, 3, 3)), WEIGHT_FORMAT)
    e, fmt = transform_weights(ts, w)
    assert fmt.fraction_bits == WEIGHT_FORMAT.fraction_bits + 2
    assert np.array_equal(e * 2.0 ** -fmt.fraction_bits,
                          transform_weights(ts, w.values())[0])
    assert np.abs(e).max() <= fmt.max_code


@pytest.mark.parametrize("fxp", [False, True])
def test_bank_file_round_trip(fxp, tmp_path):
    rng = np.random.default_rng(9)
    w = rng.uniform(-1, 1, (3, 2, 4, 4))
    if fxp:
        w = quantize(w, WEIGHT_FORMAT)
    bank, _ = prune_layer(DECONV, w, 0.5, PER_KERNEL)
    save_bank(bank, tmp_path / "b.nvcs")
    back = load_bank(tmp_path / "b.nvcs")
    assert (back.mu, back.cin, back.cout, back.rho, back.policy, back.fmt) == \
        (bank.mu, bank.cin, bank.cout, bank.rho, bank.policy, bank.fmt)
    assert np.array_equal(back.decompress(), bank.decompress())
    assert (tmp_path / "b.nvcs").read_bytes()[:4] == b"NVCS"
