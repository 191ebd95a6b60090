import numpy as np
import pytest

from ternq.layers import LayerSpec, ModelSpec, build_model
from ternq.modelfile import FLAVOR_DEPLOY, records_from_model, serialize
from ternq.packing import pack
from ternq.quantizers import (
    ConstantFactor,
    QuantizerKind,
    TernaryCodebook,
    TernaryPartition,
    ttq_materialize,
)
from ternq.runtime import (
    InferenceModel,
    build_plan,
    op_count_report,
    ternary_conv_forward,
    ternary_dense_forward,
)
from ternq.tensor import ShapeError, Tensor, conv2d

CB = TernaryCodebook(1.2, 0.7)


def dense_plan(signs, cb=CB):
    return build_plan(pack(TernaryPartition(np.asarray(signs, dtype=np.int8)), cb), "dense")


class TestBuildPlan:
    def test_all_zero_layer_has_empty_index_lists(self):
        plan = dense_plan(np.zeros((3, 5)))
        assert all(len(u.pos) == 0 and len(u.neg) == 0 for u in plan.units)
        assert plan.nonzero_count == 0

    def test_direct_construction(self):
        plan = dense_plan([[1, 0, -1], [0, 0, 1]])
        assert plan.units[0].pos.tolist() == [0]
        assert plan.units[0].neg.tolist() == [2]
        assert plan.units[1].pos.tolist() == [2]
        assert plan.units[1].neg.tolist() == []

    def test_index_lists_disjoint_and_count_nonzeros(self, rng):
        signs = rng.integers(-1, 2, (8, 20)).astype(np.int8)
        plan = dense_plan(signs)
        for row, unit in zip(signs, plan.units):
            assert len(np.intersect1d(unit.pos, unit.neg)) == 0
            assert len(unit.pos) + len(unit.neg) == np.count_nonzero(row)

    def test_corrupt_packed_data_propagates(self):
        from ternq.packing import CorruptModelError

        packed = pack(TernaryPartition(np.zeros((2, 3), dtype=np.int8)), CB)
        packed.words[0] |= 0b11
        with pytest.raises(CorruptModelError):
            build_plan(packed, "dense")


class TestDenseForward:
    def test_empty_plan_gives_bias_only(self):
        plan = dense_plan(np.zeros((4, 3)))
        bias = np.array([1.0, -2.0, 3.0, 0.5])
        out = ternary_dense_forward(plan, np.ones((2, 3)), bias)
        assert np.array_equal(out, np.tile(bias, (2, 1)))

    def test_hand_arithmetic(self):
        plan = dense_plan([[1, 0, -1]])
        out = ternary_dense_forward(plan, np.array([[1.0, 5.0, 2.0]]))
        assert abs(out[0, 0] - (1.2 * 1.0 - 0.7 * 2.0)) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ternary_dense_forward(dense_plan([[1, 0, -1]]), np.ones((2, 4)))

    @pytest.mark.parametrize("batch", [1, 7, 32])
    def test_matches_dense_reference(self, rng, batch):
        signs = rng.integers(-1, 2, (10, 17)).astype(np.int8)
        plan = dense_plan(signs)
        bias = rng.normal(size=10)
        x = rng.normal(size=(batch, 17))
        out = ternary_dense_forward(plan, x, bias)
        wt = ttq_materialize(TernaryPartition(signs), CB)
        ref = x @ wt.T + bias
        assert np.abs(out - ref).max() < 1e-9


class TestConvForward:
    def test_all_zero_filter_gives_zero_map(self):
        packed = pack(TernaryPartition(np.zeros((2, 1, 3, 3), dtype=np.int8)), CB)
        plan = build_plan(packed, "conv", stride=1, padding=1)
        out = ternary_conv_forward(plan, np.ones((1, 1, 5, 5)))
        assert np.array_equal(out, np.zeros((1, 2, 5, 5)))

    def test_center_impulse_filter_copies_input(self, rng):
        signs = np.zeros((1, 1, 3, 3), dtype=np.int8)
        signs[0, 0, 1, 1] = 1
        plan = build_plan(pack(TernaryPartition(signs), CB), "conv", stride=1, padding=1)
        x = rng.normal(size=(1, 1, 6, 6))
        out = ternary_conv_forward(plan, x)
        assert np.abs(out[0, 0] - 1.2 * x[0, 0]).max() < 1e-12

    @pytest.mark.parametrize("batch", [1, 7, 32])
    def test_matches_conv_reference(self, rng, batch):
        signs = rng.integers(-1, 2, (4, 3, 3, 3)).astype(np.int8)
        plan = build_plan(pack(TernaryPartition(signs), CB), "conv", stride=2, padding=1)
        bias = rng.normal(size=4)
        x = rng.normal(size=(batch, 3, 9, 9))
        out = ternary_conv_forward(plan, x, bias)
        wt = ttq_materialize(TernaryPartition(signs), CB)
        ref = conv2d(Tensor(x), Tensor(wt), stride=2, padding=1).data + bias[None, :, None, None]
        assert np.abs(out - ref).max() < 1e-9


class TestOpCounts:
    def test_dense_multiplications_fixed_at_two_per_output(self, rng):
        for r in (0.0, 0.5, 0.9):
            signs = (rng.random((512, 512)) > r).astype(np.int8)
            plan = dense_plan(signs)
            counts = op_count_report(plan, (1, 512))
            assert counts["multiplications"] == 2 * 512

    def test_conv_additions_proportional_to_density(self, rng):
        signs = rng.integers(-1, 2, (8, 4, 3, 3)).astype(np.int8)
        plan = build_plan(pack(TernaryPartition(signs), CB), "conv", stride=1, padding=1)
        counts = op_count_report(plan, (2, 4, 8, 8))
        density = np.count_nonzero(signs) / signs.size
        assert counts["additions"] == round(density * counts["baseline_macs"])
        assert counts["additions"] + counts["skipped_macs"] == counts["baseline_macs"]
        assert counts["density"] == density

    def test_zero_size_input_gives_zero_counts(self):
        plan = dense_plan(np.ones((4, 6), dtype=np.int8))
        counts = op_count_report(plan, (0, 6))
        assert counts["multiplications"] == 0
        assert counts["additions"] == 0
        assert counts["skipped_macs"] == 0
        assert counts["baseline_macs"] == 0


class TestInferenceModel:
    def _model(self, seed=2, exempt=False):
        spec = ModelSpec(
            input_shape=(1, 8, 8),
            layers=[LayerSpec("conv", out_channels=4, kernel=3, padding=1),
                    LayerSpec("conv", out_channels=6, kernel=3, padding=1),
                    LayerSpec("dense", features=16),
                    LayerSpec("dense", features=3)],
            default_quantizer=QuantizerKind.TTQ,
            default_policy=ConstantFactor(t=0.05),
            exempt_first_last=exempt,
        )
        return build_model(spec, np.random.default_rng(seed))

    @pytest.mark.parametrize("batch", [1, 7, 32])
    def test_packed_inference_matches_training_forward(self, rng, batch):
        model = self._model()  # every layer packed
        infer = InferenceModel.from_bytes(serialize(records_from_model(model, FLAVOR_DEPLOY)))
        x = rng.normal(size=(batch, 1, 8, 8))
        train_out = model.logits(x)
        infer_out = infer.logits(x)
        denom = np.maximum(np.abs(train_out), 1.0)
        assert (np.abs(infer_out - train_out) / denom).max() < 1e-9

    def test_mixed_model_tracks_training_at_f32_resolution(self, rng):
        # exempt layers are stored as 32-bit floats in deployment files, so
        # a mixed model reproduces the f64 training forward only to f32 noise
        model = self._model(exempt=True)
        infer = InferenceModel.from_bytes(serialize(records_from_model(model, FLAVOR_DEPLOY)))
        x = rng.normal(size=(4, 1, 8, 8))
        train_out = model.logits(x)
        infer_out = infer.logits(x)
        denom = np.maximum(np.abs(train_out), 1.0)
        assert (np.abs(infer_out - train_out) / denom).max() < 1e-5

    def test_op_count_rows_cover_every_layer(self):
        model = self._model(exempt=True)
        infer = InferenceModel.from_bytes(serialize(records_from_model(model, FLAVOR_DEPLOY)))
        rows = infer.op_counts(batch_size=5)
        assert [r["layer"] for r in rows] == ["conv1", "conv2", "dense1", "dense2"]
        assert rows[0]["quantized"] is False
        assert rows[1]["quantized"] is True
        # quantized conv: 2 mults per output element, 6 channels of 8x8, batch 5
        assert rows[1]["multiplications"] == 2 * 5 * 6 * 8 * 8

    def test_plan_building_is_deterministic(self, rng):
        model = self._model()
        raw = serialize(records_from_model(model, FLAVOR_DEPLOY))
        a = InferenceModel.from_bytes(raw)
        b = InferenceModel.from_bytes(raw)
        x = rng.normal(size=(3, 1, 8, 8))
        assert np.array_equal(a.logits(x), b.logits(x))
