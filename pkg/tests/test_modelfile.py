import struct
from pathlib import Path

import numpy as np
import pytest

from ternq.data import make_moons
from ternq.layers import LayerSpec, ModelSpec, build_model
from ternq.modelfile import (
    FLAVOR_CHECKPOINT,
    FLAVOR_DEPLOY,
    ChecksumError,
    ModelFileData,
    ModelFileError,
    TruncatedFileError,
    VersionError,
    compression_report,
    deserialize,
    fnv1a64,
    model_from_records,
    read_model_file,
    records_from_model,
    serialize,
    write_model_file,
)
from ternq.quantizers import ConstantFactor, QuantizerKind
from ternq.training import TrainConfig, evaluate, train


def ttq_mlp(seed=2, hidden=16):
    spec = ModelSpec(
        input_shape=(2,),
        layers=[LayerSpec("dense", features=hidden),
                LayerSpec("dense", features=hidden),
                LayerSpec("dense", features=2)],
        default_quantizer=QuantizerKind.TTQ,
        default_policy=ConstantFactor(t=0.05),
    )
    return build_model(spec, np.random.default_rng(seed))


def conv_model(seed=4):
    spec = ModelSpec(
        input_shape=(1, 8, 8),
        layers=[LayerSpec("conv", out_channels=4, kernel=3, padding=1),
                LayerSpec("conv", out_channels=4, kernel=3, padding=1),
                LayerSpec("dense", features=3)],
        default_quantizer=QuantizerKind.TTQ,
    )
    return build_model(spec, np.random.default_rng(seed))


class TestSerializeRoundtrip:
    @pytest.mark.parametrize("flavor", [FLAVOR_DEPLOY, FLAVOR_CHECKPOINT])
    def test_dense_model_roundtrip(self, flavor):
        model = ttq_mlp()
        data = records_from_model(model, flavor)
        parsed = deserialize(serialize(data))
        assert parsed.flavor == flavor
        assert parsed.input_shape == (2,)
        assert [r.name for r in parsed.layers] == ["dense1", "dense2", "dense3"]
        q = parsed.layers[1]
        assert q.is_quantized
        assert np.array_equal(q.packed.words, data.layers[1].packed.words)
        assert q.packed.codebook == data.layers[1].packed.codebook
        if flavor == FLAVOR_CHECKPOINT:
            assert np.array_equal(q.latent, model.layers[1].weight.data)
        else:
            assert q.latent is None

    def test_conv_model_roundtrip(self):
        model = conv_model()
        parsed = deserialize(serialize(records_from_model(model, FLAVOR_CHECKPOINT)))
        conv = parsed.layers[0]
        assert conv.kind == "conv"
        assert conv.dims == (4, 1, 3, 3, 1, 1)
        assert not conv.is_quantized  # first layer exempt
        assert np.array_equal(conv.raw_weight, model.layers[0].weight.data)

    def test_checkpoint_rebuild_matches_forward_bitwise(self, rng):
        model = ttq_mlp()
        rebuilt = model_from_records(deserialize(serialize(records_from_model(model, FLAVOR_CHECKPOINT))))
        x = rng.normal(size=(9, 2))
        assert np.array_equal(model.logits(x), rebuilt.logits(x))

    def test_deployment_raw_weights_round_to_f32(self):
        model = ttq_mlp()
        parsed = deserialize(serialize(records_from_model(model, FLAVOR_DEPLOY)))
        exempt = parsed.layers[0]
        assert np.array_equal(exempt.raw_weight, model.layers[0].weight.data.astype(np.float32).astype(np.float64))

    def test_empty_model_file(self):
        data = ModelFileData(FLAVOR_DEPLOY, (), [])
        parsed = deserialize(serialize(data))
        assert parsed.layers == []
        model = model_from_records(parsed)
        assert model.layers == []

    def test_serialization_is_deterministic(self):
        a = serialize(records_from_model(ttq_mlp(), FLAVOR_CHECKPOINT))
        b = serialize(records_from_model(ttq_mlp(), FLAVOR_CHECKPOINT))
        assert a == b

    def test_stochastic_layers_export_deterministically(self):
        spec = ModelSpec(
            input_shape=(2,),
            layers=[LayerSpec("dense", features=8), LayerSpec("dense", features=8),
                    LayerSpec("dense", features=2)],
            default_quantizer=QuantizerKind.STOCHASTIC_TERNARY,
        )
        model = build_model(spec, np.random.default_rng(3))
        a = serialize(records_from_model(model, FLAVOR_DEPLOY))
        b = serialize(records_from_model(model, FLAVOR_DEPLOY))
        assert a == b


class TestGoldenFile:
    """Pin the byte-level format against a checked-in fixture."""

    GOLDEN = Path(__file__).parent / "data" / "golden_model.ttq"

    def _golden_model(self):
        spec = ModelSpec(
            input_shape=(1, 6, 6),
            layers=[LayerSpec("conv", out_channels=3, kernel=3, padding=1),
                    LayerSpec("conv", out_channels=4, kernel=3, padding=1),
                    LayerSpec("dense", features=5)],
            default_quantizer=QuantizerKind.TTQ,
            default_policy=ConstantFactor(t=0.05),
        )
        return build_model(spec, np.random.default_rng(20260809))

    def test_fixture_parses_with_frozen_values(self):
        data = deserialize(self.GOLDEN.read_bytes())
        assert data.flavor == FLAVOR_DEPLOY
        assert data.input_shape == (1, 6, 6)
        assert [r.name for r in data.layers] == ["conv1", "conv2", "dense1"]
        q = data.layers[1]
        assert int(q.packed.words[0]) == 2593559956
        assert q.packed.codebook.w_pos == pytest.approx(0.344752340279166, abs=0, rel=0)
        assert len(data.layers[2].bias) == 5

    def test_reserialization_is_byte_identical(self):
        raw = self.GOLDEN.read_bytes()
        assert serialize(deserialize(raw)) == raw

    def test_writer_reproduces_fixture_from_seed(self):
        raw = serialize(records_from_model(self._golden_model(), FLAVOR_DEPLOY))
        assert raw == self.GOLDEN.read_bytes()


class TestFileErrors:
    def _bytes(self):
        return serialize(records_from_model(ttq_mlp(), FLAVOR_DEPLOY))

    def test_tampered_byte_fails_checksum(self):
        raw = bytearray(self._bytes())
        raw[len(raw) // 2] ^= 0x40
        with pytest.raises(ChecksumError):
            deserialize(bytes(raw))

    def test_version_mismatch_rejected(self):
        raw = bytearray(self._bytes())
        raw[4] = 99  # version field, low byte
        body = bytes(raw[:-8])
        fixed = body + struct.pack("<Q", fnv1a64(body))
        with pytest.raises(VersionError):
            deserialize(fixed)

    def test_truncated_file_rejected(self):
        raw = self._bytes()
        with pytest.raises(ModelFileError):
            deserialize(raw[: len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            deserialize(raw[:6])

    def test_bad_magic_rejected(self):
        raw = bytearray(self._bytes())
        raw[0] = ord("X")
        body = bytes(raw[:-8])
        with pytest.raises(ModelFileError, match="magic"):
            deserialize(body + struct.pack("<Q", fnv1a64(body)))

    def test_trailing_garbage_rejected(self):
        raw = self._bytes()
        body = raw[:-8] + b"\x00\x00"
        with pytest.raises(ModelFileError, match="trailing"):
            deserialize(body + struct.pack("<Q", fnv1a64(body)))

    def test_deployment_file_cannot_rebuild_training_model(self):
        parsed = deserialize(self._bytes())
        with pytest.raises(ModelFileError, match="latent"):
            model_from_records(parsed)


class TestExportImportEvaluate:
    def test_identical_error_rate_after_roundtrip(self, tmp_path):
        data = make_moons(n_train=128, n_val=128, rng=np.random.default_rng(1))
        model = ttq_mlp()
        model, _ = train(model, data, TrainConfig(lr=0.05, epochs=10, seed=5))
        pre_loss, pre_err = evaluate(model, data.x_val, data.y_val)

        path = tmp_path / "model.ttq"
        write_model_file(path, model, FLAVOR_CHECKPOINT)
        rebuilt = model_from_records(read_model_file(path))
        post_loss, post_err = evaluate(rebuilt, data.x_val, data.y_val)
        assert post_err == pre_err
        assert post_loss == pre_loss  # checkpoint keeps full f64 state


class TestCompressionReport:
    def test_single_quantized_dense_layer_ratio(self):
        spec = ModelSpec(
            input_shape=(512,),
            layers=[LayerSpec("dense", features=512, quantizer=QuantizerKind.TTQ)],
            exempt_first_last=False,
        )
        model = build_model(spec, np.random.default_rng(0))
        report = compression_report(records_from_model(model, FLAVOR_DEPLOY))
        row = report.rows[0]
        assert row.payload_bytes == 512 * 512 * 2 // 8
        assert row.baseline_bytes == 512 * 512 * 4
        assert row.width_bits == 2
        assert 15.5 < report.quantized_ratio <= 16.0

    def test_fully_exempt_model_ratio_near_one(self):
        spec = ModelSpec(
            input_shape=(256,),
            layers=[LayerSpec("dense", features=256), LayerSpec("dense", features=256)],
            default_quantizer=QuantizerKind.NONE,
        )
        model = build_model(spec, np.random.default_rng(0))
        report = compression_report(records_from_model(model, FLAVOR_DEPLOY))
        assert all(r.width_bits == 32 for r in report.rows)
        assert abs(report.total_ratio - 1.0) < 0.01
        assert report.quantized_packed == 0

    def test_density_equals_one_minus_partition_sparsity(self):
        model = ttq_mlp()
        data = records_from_model(model, FLAVOR_DEPLOY)
        report = compression_report(data)
        # recount from the packed partitions themselves
        from ternq.packing import unpack

        for row, rec in zip(report.rows, data.layers):
            if rec.is_quantized:
                part, _ = unpack(rec.packed)
                assert row.density == 1.0 - part.sparsity
            else:
                assert row.density == 1.0
