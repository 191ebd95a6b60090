import numpy as np
import pytest

from ternq.config import ConfigError, load_config, parse_config
from ternq.quantizers import ConstantFactor, ConstantSparsity, QuantizerKind

VALID = """
seed = 5

[model]
input = [2]

[[model.layers]]
kind = "dense"
features = 8

[[model.layers]]
kind = "dense"
features = 8

[[model.layers]]
kind = "dense"
features = 2

[data]
generator = "moons"
train_size = 64
val_size = 32

[quantize]
default = "ttq"
t = 0.05

[train]
optimizer = "sgd"
lr = 0.05
epochs = 2
batch_size = 16
"""


def write_config(tmp_path, text=VALID, name="exp.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParsing:
    def test_valid_config(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        assert cfg.seed == 5
        assert cfg.model.input_shape == (2,)
        assert cfg.model.default_quantizer is QuantizerKind.TTQ
        assert cfg.model.default_policy == ConstantFactor(t=0.05)
        assert cfg.train.epochs == 2
        assert cfg.train.seed == 5

    def test_model_builds_and_dataset_matches(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        model = cfg.build_model()
        data = cfg.make_dataset()
        assert data.input_shape == (2,)
        assert model.logits(data.x_val).shape == (32, 2)

    def test_dataset_generation_is_deterministic(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        a, b = cfg.make_dataset(), cfg.make_dataset()
        assert np.array_equal(a.x_train, b.x_train)
        assert np.array_equal(a.y_val, b.y_val)

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ConfigError, match="config.trian"):
            load_config(write_config(tmp_path, VALID + "\n[trian]\nlr = 1\n"))

    def test_unknown_train_key_names_field(self, tmp_path):
        with pytest.raises(ConfigError, match="train.learning_rate"):
            load_config(write_config(tmp_path, VALID + "\nlearning_rate = 0.1\n"))

    def test_unknown_quantizer(self):
        doc = {"model": {"input": [2], "layers": [{"kind": "dense", "features": 2}]},
               "data": {"generator": "moons"}, "quantize": {"default": "int8"}}
        with pytest.raises(ConfigError, match="unknown quantizer 'int8'"):
            parse_config(doc)

    def test_both_t_and_r_rejected(self):
        doc = {"model": {"input": [2], "layers": [{"kind": "dense", "features": 2}]},
               "data": {"generator": "moons"}, "quantize": {"t": 0.05, "r": 0.5}}
        with pytest.raises(ConfigError, match="not both"):
            parse_config(doc)

    def test_sparsity_policy_via_r(self):
        doc = {"model": {"input": [2], "layers": [{"kind": "dense", "features": 2}]},
               "data": {"generator": "moons"}, "quantize": {"default": "ttq", "r": 0.4}}
        cfg = parse_config(doc)
        assert cfg.model.default_policy == ConstantSparsity(r=0.4)

    def test_missing_sections(self):
        with pytest.raises(ConfigError, match="model"):
            parse_config({"data": {"generator": "moons"}})
        with pytest.raises(ConfigError, match="data"):
            parse_config({"model": {"input": [2], "layers": [{"kind": "dense", "features": 2}]}})

    def test_conv_layer_requires_kernel(self):
        doc = {"model": {"input": [1, 8, 8], "layers": [{"kind": "conv", "out_channels": 4}]},
               "data": {"generator": "patterns"}}
        with pytest.raises(ConfigError, match="out_channels and kernel"):
            parse_config(doc)

    def test_toml_syntax_error_reported(self, tmp_path):
        with pytest.raises(ConfigError, match="line"):
            load_config(write_config(tmp_path, "seed = [unclosed"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.toml")

    def test_train_validation_wrapped(self, tmp_path):
        with pytest.raises(ConfigError, match="train.*lr"):
            load_config(write_config(tmp_path), overrides=["train.lr=-1"])


class TestOverrides:
    def test_scalar_override(self, tmp_path):
        cfg = load_config(write_config(tmp_path), overrides=["train.epochs=9", "seed=42"])
        assert cfg.train.epochs == 9
        assert cfg.seed == 42

    def test_string_override(self, tmp_path):
        cfg = load_config(write_config(tmp_path), overrides=["train.optimizer='adam'"])
        assert cfg.train.optimizer == "adam"

    def test_bare_word_passes_as_string(self, tmp_path):
        cfg = load_config(write_config(tmp_path), overrides=["quantize.default=twn"])
        assert cfg.model.default_quantizer is QuantizerKind.TWN

    def test_override_still_validated(self, tmp_path):
        with pytest.raises(ConfigError, match="train.typo"):
            load_config(write_config(tmp_path), overrides=["train.typo=1"])

    def test_malformed_override(self, tmp_path):
        with pytest.raises(ConfigError, match="KEY=VALUE"):
            load_config(write_config(tmp_path), overrides=["train.lr"])
