import base64

import numpy as np
import pytest

from lynx.exceptions import DimensionError, UndefinedReferenceError
from lynx.models.sparsity_models import CompensationGranularity, NMPattern
from lynx.models.stack_models import ExecMode, Layer, LayerPolicy, LayerKind, LayerSpec, Preset, StackConfig, Stream
from lynx.models.tensor_models import RandomSpec
from lynx.services import analysis
from lynx.services.dit_stack import build_stack, default_policy, forward
from lynx.services.sparsifier import sparsify_activation, topk_mask
from lynx.services.tensor_ops import gemm, sample

TWO_FOUR = NMPattern()


def _layer(seed, d_in=256, d_out=256):
    spec = LayerSpec(name=f"layer.{seed}", kind=LayerKind.UP, d_in=d_in, d_out=d_out, stream=Stream.IMAGE)
    weight = sample(RandomSpec.gaussian(0.0, 1.0 / np.sqrt(d_in), seed=seed), d_out, d_in)
    return Layer(spec=spec, weight=weight)


def _stack(depth=2, seed=0, preset=Preset.QWEN_LIKE):
    return build_stack(StackConfig(preset=preset, depth=depth, scale=16, seed=seed))


def test_rfe_examples():
    assert analysis.rfe([[3, 4]], [[3, 0]]) == pytest.approx(0.8)
    assert analysis.rfe([[3, 4]], [[3, 4]]) == 0.0
    assert analysis.rfe([[3, 4]], [[0, 0]]) == 1.0


def test_rfe_is_scale_invariant():
    a = sample(RandomSpec.gaussian(seed=1), 4, 8)
    b = sample(RandomSpec.gaussian(seed=2), 4, 8)
    assert analysis.rfe(a * 8, b * 8) == pytest.approx(analysis.rfe(a, b), rel=1e-12)


def test_rfe_errors():
    with pytest.raises(UndefinedReferenceError):
        analysis.rfe(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(DimensionError):
        analysis.rfe(np.ones((2, 2)), np.ones((2, 3)))


def test_histogram_of_constant_matrix():
    hist = analysis.histogram(np.full((3, 4), 5.0))
    assert hist.normalization == 5.0
    assert hist.counts[-1] == 12
    assert hist.total == 12
    assert len(hist.bin_edges) == 51


def test_histogram_of_symmetric_data_is_mirrored():
    values = np.array([0.1, 0.3, 0.5, 0.77, 1.0])
    hist = analysis.histogram(np.concatenate([values, -values]).reshape(2, 5))
    assert hist.counts == hist.counts[::-1]


def test_histogram_errors():
    with pytest.raises(UndefinedReferenceError):
        analysis.histogram(np.zeros((2, 2)))


def test_spike_slab_concentrates_more_mass_at_center_than_gaussian():
    gauss = analysis.histogram(sample(RandomSpec.gaussian(seed=3), 1000, 1000))
    spiky = analysis.histogram(sample(RandomSpec.spike_slab(0.1, 0.01, 1.0, seed=4), 1000, 1000))
    center = slice(24, 26)
    assert sum(gauss.counts[center]) > gauss.counts[0] + gauss.counts[-1]
    assert sum(spiky.counts[center]) / spiky.total > sum(gauss.counts[center]) / gauss.total


def test_active_fraction():
    assert analysis.active_fraction(np.zeros((2, 2))) == 0.0
    assert analysis.active_fraction([[1.0, 0.05, 0.5, 0.0]]) == 0.5
    fraction = analysis.active_fraction(sample(RandomSpec.spike_slab(seed=5), 256, 256))
    assert 0.03 < fraction < 0.12


def test_tensor_digest():
    m = sample(RandomSpec.gaussian(seed=6), 4, 4)
    digest = analysis.tensor_digest(m)
    assert digest == analysis.tensor_digest(m.copy())
    assert len(base64.b64decode(digest)) == 32
    assert digest != analysis.tensor_digest(m + 1)


def test_sweep_layer_on_already_sparse_input():
    layer = _layer(7, d_in=64, d_out=32)
    x = sample(RandomSpec.gaussian(seed=8), 16, 64)
    x = np.where(topk_mask(x, TWO_FOUR), x, np.float32(0.0))
    report = analysis.sweep_layer(layer, x, granularity=CompensationGranularity.NONE)
    assert report.rfe_activation == pytest.approx(0.0, abs=1e-6)
    assert report.rfe_weight > 0.0


def test_sweep_activation_error_matches_independent_computation():
    layer = _layer(9, d_in=64, d_out=48)
    x = sample(RandomSpec.spike_slab(seed=10), 20, 64)
    report = analysis.sweep_layer(layer, x)
    _, sx = sparsify_activation(x, TWO_FOUR)
    expected = analysis.rfe(gemm(x, layer.weight), gemm(sx, layer.weight))
    assert report.rfe_activation == pytest.approx(expected, rel=1e-5)


@pytest.mark.slow
def test_activation_sparsity_beats_weight_sparsity_on_spike_slab_inputs():
    act, weight = [], []
    for seed in range(100):
        report = analysis.sweep_layer(_layer(seed), sample(RandomSpec.spike_slab(0.1, 0.01, 1.0, seed=1000 + seed), 64, 256))
        act.append(report.rfe_activation)
        weight.append(report.rfe_weight)
    act, weight = np.array(act), np.array(weight)
    assert act.mean() < weight.mean()
    assert np.sum(act < weight) >= 95


def test_layer_sweep_covers_every_layer():
    stack = _stack(depth=2)
    x0 = sample(RandomSpec.spike_slab(seed=11), 16, stack.d_model)
    sparse = default_policy(stack, ExecMode.ACTIVATION_SPARSE, name="act")
    reports = analysis.layer_sweep(stack, x0, policies=[sparse])
    assert len(reports) == 2 * 6
    assert [r.name for r in reports] == stack.names
    assert all("act" in r.rfe_by_policy for r in reports)
    assert all(r.rfe_by_policy["act"] == pytest.approx(r.rfe_activation, rel=1e-6) for r in reports)
    assert sorted(analysis.aggregate_by_depth(reports)) == [0, 1]
    assert analysis.aggregate_by_kind(reports)["Up"]["count"] == 2
    assert len(analysis.skip_candidates(reports, top_k=2)) == 2

    csv_text = analysis.reports_to_csv(reports)
    lines = csv_text.strip().split("\n")
    assert lines[0] == "layer,kind,depth,method,rfe,active_fraction"
    assert len(lines) == 1 + 3 * len(reports)


def test_sweep_report_metadata():
    stack = _stack(depth=1)
    x0 = sample(RandomSpec.spike_slab(seed=12), 8, stack.d_model)
    report = analysis.sweep_report(stack, x0)
    assert report.preset == "qwen-like"
    assert report.rng_algorithm == "numpy.PCG64"
    assert report.schema_version == "1.0"
    assert len(report.layers) == 6
    assert '"rfe_activation"' in report.model_dump_json()


def test_compare_dense_against_itself_is_exact():
    stack = _stack(depth=1)
    x0 = sample(RandomSpec.spike_slab(seed=13), 8, stack.d_model)
    report = analysis.compare_methods(stack, x0, [default_policy(stack, name="dense-copy")])
    result = report.result("dense-copy")
    assert result.end_to_end_rfe == 0.0
    assert all(value == 0.0 for value in result.per_layer_rfe.values())
    assert report.notes["rng_algorithm"] == "numpy.PCG64"


def test_method_ladder_names_and_csv():
    stack = _stack(depth=1)
    x0 = sample(RandomSpec.spike_slab(seed=14), 32, stack.d_model)
    ladder = analysis.method_ladder(stack, x0, rank=8)
    names = [policy.name for policy in ladder]
    assert names == [
        analysis.SA_NATIVE,
        analysis.SA_NC,
        analysis.SA_NC_LORA,
        analysis.SA_NC_LORA_SL,
        *analysis.WEIGHT_BASELINES,
        analysis.SW_SLIM,
    ]
    report = analysis.compare_methods(stack, x0, ladder)
    # qwen-like keeps no layer dense, so adding skip changes nothing
    assert report.result(analysis.SA_NC_LORA_SL).end_to_end_rfe == report.result(analysis.SA_NC_LORA).end_to_end_rfe
    lines = analysis.comparison_to_csv(report).strip().split("\n")
    assert lines[0] == "layer,method,rfe"
    assert len(lines) == 1 + len(ladder) * (1 + len(stack.layers))
    assert lines[1].startswith("<output>,SA-Native,")


def test_skipping_every_layer_removes_all_error():
    stack = _stack(depth=1, preset=Preset.ZIMAGE_LIKE)
    x0 = sample(RandomSpec.spike_slab(seed=15), 8, stack.d_model)
    report = analysis.compare_methods(stack, x0, [default_policy(stack, ExecMode.SKIP, name="all-skip")])
    assert report.result("all-skip").end_to_end_rfe == 0.0


@pytest.mark.slow
def test_lora_compensation_ordering_across_seeds():
    lora_beats_nc = 0
    lora_beats_native = 0
    for seed in range(20):
        stack = _stack(depth=6, seed=seed)
        x0 = sample(RandomSpec.spike_slab(0.1, 0.01, 1.0, seed=500 + seed), 128, stack.d_model)
        ladder = analysis.method_ladder(stack, x0, rank=64, weight_baselines=False)
        report = analysis.compare_methods(stack, x0, ladder)
        native = report.result(analysis.SA_NATIVE).end_to_end_rfe
        nc = report.result(analysis.SA_NC).end_to_end_rfe
        lora = report.result(analysis.SA_NC_LORA).end_to_end_rfe
        lora_beats_nc += lora <= nc
        lora_beats_native += lora <= native
    assert lora_beats_nc >= 18
    assert lora_beats_native >= 18


def _skip_worst_layer(stack, x0):
    sparse = default_policy(stack, ExecMode.ACTIVATION_SPARSE, name="sparse")
    before = analysis.compare_methods(stack, x0, [sparse]).result("sparse")
    worst = max(before.per_layer_rfe, key=before.per_layer_rfe.get)
    overrides = {**sparse.overrides, worst: LayerPolicy(mode=ExecMode.SKIP)}
    skipped = sparse.model_copy(update={"name": "sparse+worst", "overrides": overrides})
    return before, worst, skipped


def test_skipping_the_worst_layer_runs_it_dense():
    stack = _stack(depth=2, seed=3)
    x0 = sample(RandomSpec.spike_slab(seed=16), 32, stack.d_model)
    _, worst, skipped = _skip_worst_layer(stack, x0)
    _, records = forward(stack, x0, skipped)
    io = records[worst]
    np.testing.assert_array_equal(io.output, gemm(io.input, stack.layer(worst).weight))


@pytest.mark.slow
def test_skipping_the_worst_layer_does_not_raise_end_to_end_error():
    held = 0
    for seed in range(10):
        stack = _stack(depth=4, seed=seed)
        x0 = sample(RandomSpec.spike_slab(0.1, 0.01, 1.0, seed=700 + seed), 64, stack.d_model)
        before, _, skipped = _skip_worst_layer(stack, x0)
        after = analysis.compare_methods(stack, x0, [skipped]).result("sparse+worst")
        held += after.end_to_end_rfe <= before.end_to_end_rfe
    assert held >= 8
