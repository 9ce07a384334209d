import json
import logging

import numpy as np
import pytest

from lynx.exceptions import ConfigurationError, FormatError, TrainingError
from lynx.models.lowrank_models import LoraPair, Solver, TrainConfig
from lynx.models.sparsity_models import CompensationGranularity, NMPattern, ScoreSpec
from lynx.models.tensor_models import RandomSpec
from lynx.services.lowrank import (
    LORA_META_FILE,
    compensation_loss,
    compensation_target,
    gd_fit,
    load_lora,
    loss_and_gradients,
    rank_sweep,
    rrr_fit,
    save_lora,
    slim_init,
    slim_rank,
    slim_residual,
)
from lynx.services.sparsifier import prune_weights, score_weights, sparsify_activation, topk_mask
from lynx.services.tensor_ops import sample

TWO_FOUR = NMPattern()
G = CompensationGranularity
RANKS = (1, 2, 4, 8, 16, 32, 64)


def _layer(seed, rows=64, d_in=32, d_out=24):
    x = sample(RandomSpec.spike_slab(0.3, 0.05, 1.0, seed=seed), rows, d_in)
    w = sample(RandomSpec.gaussian(0.0, 1.0 / np.sqrt(d_in), seed=seed + 1000), d_out, d_in)
    return x, w


def test_zero_lora_loss_on_already_sparse_input_is_zero():
    x, w = _layer(1)
    x = np.where(topk_mask(x, TWO_FOUR), x, np.float32(0.0))
    assert compensation_loss(x, w, None, TWO_FOUR, G.NONE) == 0.0
    assert compensation_loss(x, w, LoraPair.zeros(24, 32, 4), TWO_FOUR, G.NONE) == 0.0


def test_zero_lora_loss_is_sparsification_error():
    x, w = _layer(2)
    _, sx = sparsify_activation(x, TWO_FOUR)
    delta = (x.astype(np.float64) - sx.astype(np.float64)) @ w.astype(np.float64).T
    assert compensation_loss(x, w, None, TWO_FOUR) == pytest.approx(float(np.sum(delta ** 2)), rel=1e-10)


def test_rrr_without_pruning_fits_a_zero_map():
    x, w = _layer(3)
    x = np.where(topk_mask(x, TWO_FOUR), x, np.float32(0.0))
    pair = rrr_fit(x, w, TWO_FOUR, G.NONE, rank=8)
    assert np.allclose(pair.la.astype(np.float64) @ pair.lb.astype(np.float64), 0.0)


def test_rrr_full_rank_square_batch_is_exact():
    q, _ = np.linalg.qr(np.random.default_rng(4).standard_normal((16, 16)))
    x = (3.0 * q).astype(np.float32)
    w = sample(RandomSpec.gaussian(0.0, 0.25, seed=5), 16, 16)
    _, target = compensation_target(x, w, TWO_FOUR, G.PER_TENSOR)
    pair = rrr_fit(x, w, TWO_FOUR, G.PER_TENSOR, rank=16)
    assert not pair.info.rank_deficient
    assert compensation_loss(x, w, pair, TWO_FOUR) <= 1e-8 * float(np.sum(target ** 2))


def test_rrr_flags_rank_deficient_batches():
    x, w = _layer(6, rows=8)
    pair = rrr_fit(x, w, TWO_FOUR, rank=4)
    assert pair.info.rank_deficient
    assert pair.info.numerical_rank == 8
    assert pair.info.solver == Solver.RRR
    assert (pair.la.shape, pair.lb.shape) == ((24, 4), (4, 32))


def test_rrr_rank_bounds():
    x, w = _layer(7)
    with pytest.raises(ConfigurationError):
        rrr_fit(x, w, TWO_FOUR, rank=0)
    with pytest.raises(ConfigurationError):
        rrr_fit(x, w, TWO_FOUR, rank=25)


def test_fitted_branch_reduces_loss():
    x, w = _layer(8)
    pair = rrr_fit(x, w, TWO_FOUR, rank=8)
    assert compensation_loss(x, w, pair, TWO_FOUR) < compensation_loss(x, w, None, TWO_FOUR)


def test_gradients_match_central_differences():
    rng = np.random.default_rng(9)
    h = 1e-3
    for _ in range(10):
        x = rng.standard_normal((12, 8))
        target = rng.standard_normal((12, 6))
        la = rng.standard_normal((6, 3))
        lb = rng.standard_normal((3, 8))
        _, grad_a, grad_b = loss_and_gradients(x, target, la, lb)

        numeric_a = np.zeros_like(la)
        for idx in np.ndindex(*la.shape):
            up, down = la.copy(), la.copy()
            up[idx] += h
            down[idx] -= h
            numeric_a[idx] = (loss_and_gradients(x, target, up, lb)[0] - loss_and_gradients(x, target, down, lb)[0]) / (2 * h)
        numeric_b = np.zeros_like(lb)
        for idx in np.ndindex(*lb.shape):
            up, down = lb.copy(), lb.copy()
            up[idx] += h
            down[idx] -= h
            numeric_b[idx] = (loss_and_gradients(x, target, la, up)[0] - loss_and_gradients(x, target, la, down)[0]) / (2 * h)

        assert np.linalg.norm(grad_a - numeric_a) <= 1e-4 * np.linalg.norm(numeric_a)
        assert np.linalg.norm(grad_b - numeric_b) <= 1e-4 * np.linalg.norm(numeric_b)


def test_gd_zero_init_starts_at_zero_branch_loss(caplog):
    x, w = _layer(10)
    cfg = TrainConfig(steps=3, init_scale=0.0, batch=64, seed=1)
    with caplog.at_level(logging.WARNING, logger="lynx.services.lowrank"):
        pair, trace = gd_fit(x, w, TWO_FOUR, rank=4, cfg=cfg)
    assert len(trace) == 3
    assert trace[0] == pytest.approx(compensation_loss(x, w, None, TWO_FOUR), rel=1e-10)
    # zero pair is a stationary point
    assert trace[0] == trace[-1]
    assert not np.any(pair.la) and not np.any(pair.lb)
    assert any("trace stays flat" in record.getMessage() for record in caplog.records)


def test_gd_descends_and_stays_above_closed_form():
    x, w = _layer(11, rows=64, d_in=16, d_out=16)
    cfg = TrainConfig(steps=50, learning_rate=1e-3, init_scale=0.1, batch=64, seed=3)
    pair, trace = gd_fit(x, w, TWO_FOUR, rank=4, cfg=cfg)
    assert trace[-1] < trace[0]
    assert pair.info.seed == 3
    closed = rrr_fit(x, w, TWO_FOUR, rank=4)
    assert compensation_loss(x, w, pair, TWO_FOUR) >= compensation_loss(x, w, closed, TWO_FOUR) - 1e-6


def test_gd_is_reproducible_per_seed():
    x, w = _layer(12)
    cfg = TrainConfig(steps=5, batch=16, seed=7)
    first, trace_a = gd_fit(x, w, TWO_FOUR, rank=4, cfg=cfg)
    second, trace_b = gd_fit(x, w, TWO_FOUR, rank=4, cfg=cfg)
    assert trace_a == trace_b
    np.testing.assert_array_equal(first.la, second.la)


def test_gd_divergence_reports_step():
    x, w = _layer(13)
    cfg = TrainConfig(steps=200, learning_rate=1e6, init_scale=1.0, batch=64, seed=0)
    with pytest.raises(TrainingError) as exc:
        gd_fit(x, w, TWO_FOUR, rank=4, cfg=cfg)
    assert exc.value.step is not None


def test_slim_identical_weights_give_zero_branch():
    w = sample(RandomSpec.gaussian(seed=14), 8, 12)
    pair = slim_init(w, w, 3)
    assert not np.any(pair.la.astype(np.float64) @ pair.lb.astype(np.float64))


def test_slim_recovers_rank_one_delta():
    u = np.arange(1, 9, dtype=np.float32)
    v = np.array([1, -2, 3, 0, 1, 2, -1, 4, 2, 1, -3, 1], dtype=np.float32)
    w = np.outer(u, v).astype(np.float32)
    pair = slim_init(w, np.zeros_like(w), 1)
    assert slim_residual(w, np.zeros_like(w), pair) <= 1e-6 * float(np.linalg.norm(w))


def test_slim_rank():
    assert slim_rank(192, 768) == 19
    assert slim_rank(4, 4) == 1


@pytest.mark.slow
def test_residuals_do_not_grow_with_rank():
    for seed in range(16):
        x, w = _layer(seed, rows=128, d_in=64, d_out=64)
        losses = [loss for _, loss in rank_sweep(x, w, TWO_FOUR, ranks=RANKS)]
        for lower, higher in zip(losses, losses[1:]):
            assert higher <= lower * (1 + 1e-6) + 1e-9

        pruned = prune_weights(w, score_weights(w, None, ScoreSpec()), TWO_FOUR)
        scale = float(np.linalg.norm(w.astype(np.float64) - pruned))
        residuals = [slim_residual(w, pruned, slim_init(w, pruned, r)) for r in RANKS]
        for lower, higher in zip(residuals, residuals[1:]):
            assert higher <= lower + 1e-5 * scale


def test_save_and_load_lora(tmp_path):
    x, w = _layer(15)
    pair = rrr_fit(x, w, TWO_FOUR, rank=4)
    save_lora(tmp_path / "lora", pair)
    loaded = load_lora(tmp_path / "lora")
    np.testing.assert_array_equal(loaded.la, pair.la)
    np.testing.assert_array_equal(loaded.lb, pair.lb)
    assert loaded.info.solver == Solver.RRR
    assert loaded.info.numerical_rank == pair.info.numerical_rank


def test_load_lora_rejects_inconsistent_metadata(tmp_path):
    save_lora(tmp_path, LoraPair.zeros(6, 8, 2))
    meta = json.loads((tmp_path / LORA_META_FILE).read_text())
    meta["rank"] = 3
    (tmp_path / LORA_META_FILE).write_text(json.dumps(meta))
    with pytest.raises(FormatError):
        load_lora(tmp_path)


def test_fits_leave_the_backbone_weight_untouched():
    x, w = _layer(30)
    before = w.tobytes()
    rrr_fit(x, w, TWO_FOUR, G.PER_TENSOR, rank=4)
    assert w.tobytes() == before
    gd_fit(x, w, TWO_FOUR, rank=4, cfg=TrainConfig(steps=5, batch=32, seed=1))
    assert w.tobytes() == before
    pruned = prune_weights(w, score_weights(w, np.ones(w.shape[1]), ScoreSpec()), TWO_FOUR)
    pruned_before = pruned.tobytes()
    slim_init(w, pruned, 4)
    assert w.tobytes() == before
    assert pruned.tobytes() == pruned_before
