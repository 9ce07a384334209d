import numpy as np
import pytest

from lynx.exceptions import ConfigurationError, DimensionError, FormatError
from lynx.models.kernel_models import KernelConfig
from lynx.models.sparsity_models import CompensationGranularity, NMPattern, PackedNM
from lynx.models.tensor_models import RandomSpec
from lynx.services.nm_format import pack, unpack
from lynx.services.sparsifier import sparsify_activation, topk_mask
from lynx.models.lowrank_models import LoraPair
from lynx.services.spmm import apply_lora, fused_sparse_linear, fused_sparse_lora_linear, lora_residual, spmm, spmm_instrumented
from lynx.services.tensor_ops import frobenius_norm, gemm, gemm_instrumented, sample
from lynx.utils.optional_imports import HAS_NUMBA

TWO_FOUR = NMPattern()
G = CompensationGranularity
SMALL_TILES = KernelConfig(tile_m=8, tile_n=16, tile_k=32)


def _rel(a, b):
    return frobenius_norm(np.asarray(a, np.float64) - np.asarray(b, np.float64)) / frobenius_norm(b)


def test_spmm_examples():
    w = [[1, 1, 1, 1], [0, 1, 0, 1]]
    assert spmm(pack([[1, 0, 0, 2]], TWO_FOUR), w).tolist() == [[3.0, 2.0]]
    assert not np.any(spmm(pack(np.zeros((3, 8)), TWO_FOUR), np.ones((5, 8))))


def test_spmm_random_case_matches_dense():
    x = sample(RandomSpec.gaussian(seed=1), 64, 64)
    w = sample(RandomSpec.gaussian(seed=2), 32, 64)
    masked = np.where(topk_mask(x, TWO_FOUR), x, np.float32(0.0))
    assert _rel(spmm(pack(masked, TWO_FOUR), w, SMALL_TILES), gemm(masked, w)) <= 1e-5


@pytest.mark.skipif(not HAS_NUMBA, reason="exact agreement needs the compiled kernels")
def test_spmm_reproduces_dense_kernel_bit_for_bit():
    x = sample(RandomSpec.spike_slab(seed=3), 40, 96)
    w = sample(RandomSpec.gaussian(seed=4), 24, 96)
    _, sx = sparsify_activation(x, TWO_FOUR)
    np.testing.assert_array_equal(spmm(pack(sx, TWO_FOUR), w, SMALL_TILES), gemm(sx, w, SMALL_TILES))


@pytest.mark.slow
def test_spmm_oracle_equivalence_random_shapes():
    rng = np.random.default_rng(2024)
    for case in range(200):
        m = int(rng.integers(1, 33))
        k = 4 * int(rng.integers(16, 257))
        n = int(rng.integers(1, 49))
        x = sample(RandomSpec.spike_slab(seed=case), m, k)
        w = sample(RandomSpec.gaussian(0.0, 1.0 / np.sqrt(k), seed=10_000 + case), n, k)
        _, sx = sparsify_activation(x, TWO_FOUR)
        y_sparse = spmm(pack(sx, TWO_FOUR), w)
        y_dense = gemm(sx, w)
        if frobenius_norm(y_dense) > 0:
            assert _rel(y_sparse, y_dense) <= 1e-5


def test_spmm_errors():
    p = pack(np.zeros((2, 8)), TWO_FOUR)
    with pytest.raises(DimensionError):
        spmm(p, np.ones((3, 4)))
    corrupted = PackedNM(rows=1, cols=4, pattern=TWO_FOUR, values=np.ones((1, 2), dtype=np.float32), meta=np.array([[7]], dtype=np.uint8))
    with pytest.raises(FormatError):
        spmm(corrupted, np.ones((2, 4)))


@pytest.mark.parametrize("pattern", [NMPattern(n=1, m=2), NMPattern(n=2, m=4), NMPattern(n=4, m=8), NMPattern(n=1, m=4)])
def test_multiply_add_count_is_n_over_m_of_dense(pattern):
    x = sample(RandomSpec.gaussian(seed=5), 33, 128)
    w = sample(RandomSpec.gaussian(seed=6), 17, 128)
    _, sx = sparsify_activation(x, pattern)
    _, sparse_madds = spmm_instrumented(pack(sx, pattern), w, SMALL_TILES)
    _, dense_madds = gemm_instrumented(x, w, SMALL_TILES)
    assert sparse_madds * pattern.m == dense_madds * pattern.n


@pytest.mark.parametrize("granularity", list(CompensationGranularity))
@pytest.mark.parametrize("cfg", [KernelConfig(), SMALL_TILES, KernelConfig(tile_m=5, tile_n=3, tile_k=12)])
def test_fused_matches_staged_pipeline_exactly(granularity, cfg):
    x = sample(RandomSpec.spike_slab(seed=7), 21, 96)
    x[3] = 0.0
    x[5, :8] = 0.0
    w = sample(RandomSpec.gaussian(seed=8), 19, 96)

    _, sx = sparsify_activation(x, TWO_FOUR, granularity)
    staged = spmm(pack(sx, TWO_FOUR), w, cfg)
    fused, timing = fused_sparse_linear(x, w, TWO_FOUR, granularity, cfg=cfg)
    np.testing.assert_array_equal(fused, staged)
    assert timing.total_ns >= timing.multiply_ns
    assert 0.0 <= timing.sparse_cost_pct <= 100.0


def test_fused_per_group_example_with_identity_weight():
    y, _ = fused_sparse_linear([[4, 3, 2, 1]], np.eye(4), TWO_FOUR, G.PER_GROUP, 1e-8)
    np.testing.assert_allclose(y, [[4.3818, 3.2863, 0.0, 0.0]], rtol=1e-4)


def test_fused_on_already_sparse_input_equals_gemm():
    x = sample(RandomSpec.gaussian(seed=9), 16, 64)
    x = np.where(topk_mask(x, TWO_FOUR), x, np.float32(0.0))
    w = sample(RandomSpec.gaussian(seed=10), 8, 64)
    y, _ = fused_sparse_linear(x, w, TWO_FOUR, G.NONE)
    assert _rel(y, gemm(x, w)) <= 1e-6


def test_fused_rejects_bad_inputs():
    with pytest.raises(DimensionError):
        fused_sparse_linear(np.ones((2, 8)), np.ones((3, 4)), TWO_FOUR)
    with pytest.raises(DimensionError):
        fused_sparse_linear(np.ones((2, 6)), np.ones((3, 6)), TWO_FOUR)


def test_lora_zero_branch_is_transparent():
    x = sample(RandomSpec.spike_slab(seed=11), 12, 32)
    w = sample(RandomSpec.gaussian(seed=12), 10, 32)
    lb = sample(RandomSpec.gaussian(seed=13), 4, 32)
    y_plain, _ = fused_sparse_linear(x, w, TWO_FOUR)
    y_lora = fused_sparse_lora_linear(x, w, np.zeros((10, 4)), lb, TWO_FOUR)
    np.testing.assert_array_equal(y_lora, y_plain)


def test_lora_matches_two_pass_oracle():
    x = sample(RandomSpec.spike_slab(seed=14), 24, 64)
    w = sample(RandomSpec.gaussian(seed=15), 16, 64)
    la = sample(RandomSpec.gaussian(seed=16), 16, 8)
    lb = sample(RandomSpec.gaussian(seed=17), 8, 64)
    _, sx = sparsify_activation(x, TWO_FOUR)
    x64 = x.astype(np.float64)
    oracle = sx.astype(np.float64) @ w.astype(np.float64).T + (x64 @ lb.astype(np.float64).T) @ la.astype(np.float64).T
    y = fused_sparse_lora_linear(x, w, la, lb, TWO_FOUR, cfg=SMALL_TILES)
    assert _rel(y, oracle) <= 1e-5


def test_apply_lora_uses_the_pair_factors():
    x = sample(RandomSpec.spike_slab(seed=18), 8, 32)
    w = sample(RandomSpec.gaussian(seed=19), 6, 32)
    la = sample(RandomSpec.gaussian(seed=20), 6, 4)
    lb = sample(RandomSpec.gaussian(seed=21), 4, 32)
    pair = LoraPair(la=la, lb=lb)
    expected = fused_sparse_lora_linear(x, w, la, lb, TWO_FOUR, G.PER_ROW)
    np.testing.assert_array_equal(apply_lora(x, w, pair, TWO_FOUR, G.PER_ROW), expected)


def test_lora_residual_can_carry_the_whole_layer():
    x = sample(RandomSpec.gaussian(seed=18), 6, 8)
    w = sample(RandomSpec.gaussian(seed=19), 5, 8)
    # lA lB = W with R = D_in
    residual = lora_residual(x, w, np.eye(8))
    assert _rel(residual, gemm(x, w)) <= 1e-6


def test_lora_shape_errors():
    x = np.ones((2, 8), dtype=np.float32)
    w = np.ones((3, 8), dtype=np.float32)
    with pytest.raises(DimensionError):
        fused_sparse_lora_linear(x, w, np.ones((3, 2)), np.ones((4, 8)), TWO_FOUR)
    with pytest.raises(DimensionError):
        fused_sparse_lora_linear(x, w, np.ones((4, 2)), np.ones((2, 8)), TWO_FOUR)
    with pytest.raises(DimensionError):
        fused_sparse_lora_linear(x, w, np.ones((3, 2)), np.ones((2, 6)), TWO_FOUR)


def test_unpacked_fused_operand_round_trips():
    x = sample(RandomSpec.spike_slab(seed=20), 4, 16)
    _, sx = sparsify_activation(x, TWO_FOUR, G.PER_ROW)
    np.testing.assert_array_equal(unpack(pack(sx, TWO_FOUR)), sx)


def test_spmm_is_linear_in_weight_and_activation():
    x = sample(RandomSpec.spike_slab(seed=21), 12, 64)
    masked = np.where(topk_mask(x, TWO_FOUR), x, np.float32(0.0))
    w1 = sample(RandomSpec.gaussian(seed=22), 10, 64)
    w2 = sample(RandomSpec.gaussian(seed=23), 10, 64)
    packed = pack(masked, TWO_FOUR)
    np.testing.assert_allclose(spmm(packed, w1 + w2), spmm(packed, w1) + spmm(packed, w2), rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(spmm(pack(2.5 * masked, TWO_FOUR), w1), 2.5 * spmm(packed, w1), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("m", [3, 5, 6, 7])
def test_default_tiling_follows_group_width(m):
    pattern = NMPattern(n=1, m=m)
    x = sample(RandomSpec.spike_slab(seed=24), 5, 6 * m)
    w = sample(RandomSpec.gaussian(seed=25), 3, 6 * m)
    _, sx = sparsify_activation(x, pattern, G.PER_ROW)
    fused, _ = fused_sparse_linear(x, w, pattern, G.PER_ROW)
    np.testing.assert_array_equal(fused, spmm(pack(sx, pattern), w))


def test_one_of_three_on_small_matrix():
    x = [[1, 0, 3, 0, 2, 0], [0, 0, 1, 5, 0, 0]]
    y, _ = fused_sparse_linear(x, np.eye(6), NMPattern(n=1, m=3), G.NONE)
    assert y.tolist() == [[0, 0, 3, 0, 2, 0], [0, 0, 1, 5, 0, 0]]


def test_explicit_tile_k_must_match_group_width():
    pattern = NMPattern(n=1, m=3)
    assert KernelConfig.for_pattern(pattern).tile_k % 3 == 0
    assert KernelConfig.for_pattern(pattern, 48).tile_k == 48
    with pytest.raises(ConfigurationError):
        KernelConfig.for_pattern(pattern, 256)
    with pytest.raises(ConfigurationError):
        fused_sparse_linear(np.ones((2, 6)), np.ones((3, 6)), pattern, cfg=KernelConfig(tile_k=256))
