"""Declarative experiment configs: one TOML file describes one run.

Strict by design: unknown keys are rejected up front with their full path
so a typo cannot silently fall back to a default. Scalar fields can be
overridden from the command line with KEY=VALUE pairs.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ternq.data import Dataset, load_pgm_dataset, make_blobs, make_moons, make_patterns
from ternq.layers import LayerSpec, Model, ModelSpec, build_model
from ternq.quantizers import ConstantFactor, ConstantSparsity, QuantizerKind
from ternq.training import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


_TOP_KEYS = {"seed", "model", "data", "quantize", "train", "output"}
_MODEL_KEYS = {"input", "layers"}
_LAYER_KEYS = {"kind", "features", "out_channels", "kernel", "stride", "padding", "quantizer", "t", "r"}
_DATA_KEYS = {"generator", "classes", "train_size", "val_size", "noise", "path", "val_fraction"}
_QUANT_KEYS = {"default", "policy", "t", "r", "exempt_first_last", "unsigned_wneg_grad"}
_TRAIN_KEYS = {"optimizer", "lr", "momentum", "beta1", "beta2", "eps", "lr_schedule",
               "weight_decay", "epochs", "batch_size", "codebook_lr_scale"}
_OUTPUT_KEYS = {"model", "report"}

_QUANTIZER_NAMES = {k.value: k for k in QuantizerKind}


@dataclass
class DataSpec:
    generator: str
    classes: int = 4
    train_size: int = 300
    val_size: int = 300
    noise: float | None = None
    path: str | None = None
    val_fraction: float = 0.25

    def make(self, rng: np.random.Generator) -> Dataset:
        if self.generator == "blobs":
            noise = 0.6 if self.noise is None else self.noise
            return make_blobs(self.train_size, self.val_size, self.classes, noise, rng)
        if self.generator == "moons":
            noise = 0.15 if self.noise is None else self.noise
            return make_moons(self.train_size, self.val_size, noise, rng)
        if self.generator == "patterns":
            noise = 0.5 if self.noise is None else self.noise
            return make_patterns(self.train_size, self.val_size, self.classes, noise, rng)
        if self.generator == "pgm":
            if self.path is None:
                raise ConfigError("data.path is required for the pgm loader")
            return load_pgm_dataset(self.path, self.val_fraction, rng)
        raise ConfigError(f"data.generator: unknown generator {self.generator!r}")


@dataclass
class ExperimentConfig:
    seed: int
    model: ModelSpec
    data: DataSpec
    train: TrainConfig
    output_model: str | None = None
    output_report: str | None = None

    def data_rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed).spawn(2)[0])

    def init_rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed).spawn(2)[1])

    def make_dataset(self) -> Dataset:
        return self.data.make(self.data_rng())

    def build_model(self) -> Model:
        return build_model(self.model, self.init_rng())


def _reject_unknown(table: dict, allowed: set, path: str):
    for key in table:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key (allowed: {', '.join(sorted(allowed))})")


def _policy_from(table: dict, path: str, default=None):
    has_t, has_r = "t" in table, "r" in table
    if has_t and has_r:
        raise ConfigError(f"{path}: give either t (constant factor) or r (constant sparsity), not both")
    name = table.get("policy")
    if name is None and not has_t and not has_r:
        return default
    if name == "constant_sparsity" or (name is None and has_r):
        if not has_r:
            raise ConfigError(f"{path}: constant_sparsity policy needs r")
        return ConstantSparsity(r=float(table["r"]))
    if name in (None, "constant_factor"):
        return ConstantFactor(t=float(table.get("t", 0.05)))
    raise ConfigError(f"{path}.policy: unknown policy {name!r}")


def _quantizer_from(name, path: str):
    if name not in _QUANTIZER_NAMES:
        raise ConfigError(f"{path}: unknown quantizer {name!r} (choose from {', '.join(_QUANTIZER_NAMES)})")
    return _QUANTIZER_NAMES[name]


def _layer_from(table: dict, index: int) -> LayerSpec:
    path = f"model.layers[{index}]"
    _reject_unknown(table, _LAYER_KEYS, path)
    kind = table.get("kind")
    if kind not in ("dense", "conv"):
        raise ConfigError(f"{path}.kind: expected 'dense' or 'conv', got {kind!r}")
    quantizer = None
    if "quantizer" in table:
        quantizer = _quantizer_from(table["quantizer"], f"{path}.quantizer")
    policy = _policy_from({k: table[k] for k in ("t", "r") if k in table}, path)
    if kind == "dense":
        if "features" not in table:
            raise ConfigError(f"{path}.features: required for dense layers")
        return LayerSpec("dense", features=int(table["features"]), quantizer=quantizer, policy=policy)
    if "out_channels" not in table or "kernel" not in table:
        raise ConfigError(f"{path}: conv layers need out_channels and kernel")
    return LayerSpec(
        "conv",
        out_channels=int(table["out_channels"]),
        kernel=int(table["kernel"]),
        stride=int(table.get("stride", 1)),
        padding=int(table.get("padding", 0)),
        quantizer=quantizer,
        policy=policy,
    )


def parse_config(doc: dict) -> ExperimentConfig:
    _reject_unknown(doc, _TOP_KEYS, "config")
    seed = int(doc.get("seed", 0))

    model_tbl = doc.get("model")
    if not isinstance(model_tbl, dict):
        raise ConfigError("model: section is required")
    _reject_unknown(model_tbl, _MODEL_KEYS, "model")
    if "input" not in model_tbl:
        raise ConfigError("model.input: required (feature count or [C, H, W])")
    input_shape = tuple(int(v) for v in model_tbl["input"])
    layer_tables = model_tbl.get("layers", [])
    if not layer_tables:
        raise ConfigError("model.layers: at least one layer is required")
    layers = [_layer_from(t, i) for i, t in enumerate(layer_tables)]

    quant_tbl = doc.get("quantize", {})
    _reject_unknown(quant_tbl, _QUANT_KEYS, "quantize")
    default_kind = QuantizerKind.NONE
    if "default" in quant_tbl:
        default_kind = _quantizer_from(quant_tbl["default"], "quantize.default")
    default_policy = _policy_from(quant_tbl, "quantize", default=ConstantFactor(t=0.05))
    spec = ModelSpec(
        input_shape=input_shape,
        layers=layers,
        default_quantizer=default_kind,
        default_policy=default_policy,
        exempt_first_last=bool(quant_tbl.get("exempt_first_last", True)),
        unsigned_wneg_grad=bool(quant_tbl.get("unsigned_wneg_grad", False)),
    )

    data_tbl = doc.get("data")
    if not isinstance(data_tbl, dict):
        raise ConfigError("data: section is required")
    _reject_unknown(data_tbl, _DATA_KEYS, "data")
    if "generator" not in data_tbl:
        raise ConfigError("data.generator: required")
    data = DataSpec(
        generator=data_tbl["generator"],
        classes=int(data_tbl.get("classes", 4)),
        train_size=int(data_tbl.get("train_size", 300)),
        val_size=int(data_tbl.get("val_size", 300)),
        noise=data_tbl.get("noise"),
        path=data_tbl.get("path"),
        val_fraction=float(data_tbl.get("val_fraction", 0.25)),
    )

    train_tbl = doc.get("train", {})
    _reject_unknown(train_tbl, _TRAIN_KEYS, "train")
    schedule = [(int(e), float(f)) for e, f in train_tbl.get("lr_schedule", [])]
    try:
        train_cfg = TrainConfig(
            optimizer=train_tbl.get("optimizer", "sgd"),
            lr=float(train_tbl.get("lr", 0.05)),
            momentum=float(train_tbl.get("momentum", 0.9)),
            beta1=float(train_tbl.get("beta1", 0.9)),
            beta2=float(train_tbl.get("beta2", 0.999)),
            eps=float(train_tbl.get("eps", 1e-8)),
            lr_schedule=schedule,
            weight_decay=float(train_tbl.get("weight_decay", 0.0)),
            epochs=int(train_tbl.get("epochs", 50)),
            batch_size=int(train_tbl.get("batch_size", 32)),
            seed=seed,
            codebook_lr_scale=float(train_tbl.get("codebook_lr_scale", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc

    out_tbl = doc.get("output", {})
    _reject_unknown(out_tbl, _OUTPUT_KEYS, "output")

    return ExperimentConfig(
        seed=seed,
        model=spec,
        data=data,
        train=train_cfg,
        output_model=out_tbl.get("model"),
        output_report=out_tbl.get("report"),
    )


def _apply_override(doc: dict, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r}: expected KEY=VALUE")
    key, _, raw_value = assignment.partition("=")
    try:
        value = tomllib.loads(f"v = {raw_value}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw_value  # bare words pass through as strings
    node = doc
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {part} is not a table")
    node[parts[-1]] = value


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{Path(path).name}: {exc}")
    for assignment in overrides or []:
        _apply_override(doc, assignment)
    return parse_config(doc)
