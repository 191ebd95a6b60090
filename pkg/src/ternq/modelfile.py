"""Binary model files: packed ternary weights plus per-layer codebooks.

Two flavors share one container (magic "TTQ1", little-endian, trailing
64-bit FNV-1a checksum): deployment files hold only what inference needs
(packed 2-bit weights + codebook scalars, exempt layers as 32-bit floats),
checkpoint files additionally retain the latent full-precision weights so
training can resume or fine-tune. See FORMAT.md for the exact layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ternq.layers import ConvLayer, DenseLayer, Model
from ternq.packing import PackedTernaryTensor, pack
from ternq.quantizers import (
    ConstantFactor,
    ConstantSparsity,
    QuantizerKind,
    TernaryCodebook,
)

MAGIC = b"TTQ1"
VERSION = 1
FLAVOR_DEPLOY = 0
FLAVOR_CHECKPOINT = 1

# Stochastic layers are materialized once at export; drawing from this seed
# in layer order reproduces exactly the weights evaluate() samples.
EXPORT_SEED = 0x7E51

_KIND_CODE = {"dense": 0, "conv": 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}
_QUANT_CODE = {
    QuantizerKind.NONE: 0,
    QuantizerKind.TTQ: 1,
    QuantizerKind.TWN: 2,
    QuantizerKind.DOREFA: 3,
    QuantizerKind.STOCHASTIC_BINARY: 4,
    QuantizerKind.STOCHASTIC_TERNARY: 5,
}
_CODE_QUANT = {v: k for k, v in _QUANT_CODE.items()}


class ModelFileError(ValueError):
    """Base error for unreadable or inconsistent model files."""


class ChecksumError(ModelFileError):
    pass


class VersionError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; the file's integrity checksum."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class LayerRecord:
    """One layer as stored on disk."""

    name: str
    kind: str  # "dense" | "conv"
    dims: tuple[int, ...]  # dense: (out,in); conv: (F,C,kh,kw,stride,pad)
    quantizer: QuantizerKind
    policy: ConstantFactor | ConstantSparsity | None
    bias: np.ndarray
    packed: PackedTernaryTensor | None = None
    raw_weight: np.ndarray | None = None
    latent: np.ndarray | None = None

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return self.dims[:2] if self.kind == "dense" else self.dims[:4]

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def is_quantized(self) -> bool:
        return self.packed is not None


@dataclass
class ModelFileData:
    flavor: int
    input_shape: tuple[int, ...]
    layers: list[LayerRecord] = field(default_factory=list)


def _policy_fields(policy) -> tuple[int, float]:
    if policy is None:
        return 0, 0.0
    if isinstance(policy, ConstantFactor):
        return 1, policy.t
    if isinstance(policy, ConstantSparsity):
        return 2, policy.r
    raise ValueError(f"unknown policy {policy!r}")


def _policy_from_fields(code: int, param: float):
    if code == 0:
        return None
    if code == 1:
        return ConstantFactor(t=param)
    if code == 2:
        return ConstantSparsity(r=param)
    raise ModelFileError(f"unknown policy code {code}")


def serialize_layer(rec: LayerRecord, flavor: int) -> bytes:
    out = bytearray()
    encoding = 1 if rec.is_quantized else 0
    pcode, pparam = _policy_fields(rec.policy)
    name_bytes = rec.name.encode()
    out += struct.pack("<BBBBd", _KIND_CODE[rec.kind], encoding, _QUANT_CODE[rec.quantizer], pcode, pparam)
    out += struct.pack("<H", len(name_bytes)) + name_bytes
    if rec.kind == "dense":
        out += struct.pack("<II", *rec.dims)
    else:
        out += struct.pack("<IIIIII", *rec.dims)
    if rec.is_quantized:
        cb = rec.packed.codebook
        out += struct.pack("<dd", cb.w_pos, cb.w_neg)
        out += struct.pack("<I", len(rec.packed.words))
        out += rec.packed.words.astype("<u4").tobytes()
        if flavor == FLAVOR_CHECKPOINT:
            out += rec.latent.astype("<f8").tobytes()
    else:
        dtype = "<f8" if flavor == FLAVOR_CHECKPOINT else "<f4"
        out += rec.raw_weight.astype(dtype).tobytes()
    out += struct.pack("<I", len(rec.bias))
    out += rec.bias.astype("<f8").tobytes()
    return bytes(out)


def serialize(data: ModelFileData) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HBB", VERSION, data.flavor, 0)
    out += struct.pack("<B", len(data.input_shape))
    out += struct.pack(f"<{len(data.input_shape)}I", *data.input_shape)
    out += struct.pack("<I", len(data.layers))
    for rec in data.layers:
        out += serialize_layer(rec, data.flavor)
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"file ends at byte {len(self.raw)}, needed {self.pos + n}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()


def deserialize(raw: bytes) -> ModelFileData:
    if len(raw) < len(MAGIC) + 8:
        raise TruncatedFileError(f"file too short to be a model file ({len(raw)} bytes)")
    (stored,) = struct.unpack("<Q", raw[-8:])
    if fnv1a64(raw[:-8]) != stored:
        raise ChecksumError("checksum mismatch: file corrupt or truncated")
    if raw[:4] != MAGIC:
        raise ModelFileError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    r = _Reader(raw[: len(raw) - 8])
    r.pos = 4
    version, flavor, _reserved = r.unpack("<HBB")
    if version != VERSION:
        raise VersionError(f"unsupported format version {version}, expected {VERSION}")
    if flavor not in (FLAVOR_DEPLOY, FLAVOR_CHECKPOINT):
        raise ModelFileError(f"unknown flavor {flavor}")
    (ndim,) = r.unpack("<B")
    input_shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
    (n_layers,) = r.unpack("<I")
    layers = []
    for _ in range(n_layers):
        kind_code, encoding, quant_code, pcode, pparam = r.unpack("<BBBBd")
        if kind_code not in _CODE_KIND:
            raise ModelFileError(f"unknown layer kind code {kind_code}")
        kind = _CODE_KIND[kind_code]
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        dims = tuple(r.unpack("<II") if kind == "dense" else r.unpack("<IIIIII"))
        quantizer = _CODE_QUANT.get(quant_code)
        if quantizer is None:
            raise ModelFileError(f"layer {name}: unknown quantizer code {quant_code}")
        policy = _policy_from_fields(pcode, pparam)
        weight_shape = dims[:2] if kind == "dense" else dims[:4]
        count = int(np.prod(weight_shape))
        packed = raw_weight = latent = None
        if encoding == 1:
            w_pos, w_neg = r.unpack("<dd")
            (n_words,) = r.unpack("<I")
            words = r.array("<u4", n_words)
            packed = PackedTernaryTensor(weight_shape, words, TernaryCodebook(w_pos, w_neg))
            if flavor == FLAVOR_CHECKPOINT:
                latent = r.array("<f8", count).reshape(weight_shape)
        elif encoding == 0:
            dtype = "<f8" if flavor == FLAVOR_CHECKPOINT else "<f4"
            raw_weight = r.array(dtype, count).astype(np.float64).reshape(weight_shape)
        else:
            raise ModelFileError(f"layer {name}: unknown weight encoding {encoding}")
        (bias_len,) = r.unpack("<I")
        bias = r.array("<f8", bias_len)
        layers.append(LayerRecord(name, kind, dims, quantizer, policy, bias, packed, raw_weight, latent))
    if r.pos != len(r.raw):
        raise ModelFileError(f"{len(r.raw) - r.pos} unexpected trailing bytes before checksum")
    return ModelFileData(flavor, input_shape, layers)


def records_from_model(model: Model, flavor: int = FLAVOR_DEPLOY) -> ModelFileData:
    """Snapshot a training model's layers into file records.

    Quantized layers are materialized once (stochastic kinds draw from
    EXPORT_SEED in layer order, matching evaluate()); exempt layers store
    their weights raw. Checkpoints keep the latent weights alongside.
    """
    rng = np.random.default_rng(EXPORT_SEED)
    layers = []
    for layer in model.layers:
        dims = (
            (layer.out_features, layer.in_features)
            if layer.kind == "dense"
            else (layer.out_channels, layer.in_channels, layer.kernel_size, layer.kernel_size,
                  layer.stride, layer.padding)
        )
        if layer.is_quantized:
            layer.quantized_weight(rng)
            scales = layer.effective_scales()
            packed = pack(layer.last_partition, TernaryCodebook(*scales))
            latent = layer.weight.data.copy() if flavor == FLAVOR_CHECKPOINT else None
            rec = LayerRecord(layer.name, layer.kind, dims, layer.quantizer, layer.policy,
                              layer.bias.data.copy(), packed=packed, latent=latent)
        else:
            rec = LayerRecord(layer.name, layer.kind, dims, layer.quantizer, None,
                              layer.bias.data.copy(), raw_weight=layer.weight.data.copy())
        layers.append(rec)
    return ModelFileData(flavor, model.input_shape, layers)


def model_from_records(data: ModelFileData) -> Model:
    """Rebuild a training model from a checkpoint (or raw-only deployment) file."""
    rng = np.random.default_rng(0)  # weights are overwritten below
    layers = []
    for rec in data.layers:
        if rec.is_quantized and rec.latent is None:
            raise ModelFileError(
                f"layer {rec.name}: deployment file has no latent weights; use the inference runtime"
            )
        weight = rec.latent if rec.is_quantized else rec.raw_weight
        common = dict(quantizer=rec.quantizer, policy=rec.policy, weight=weight.copy())
        if rec.kind == "dense":
            out_f, in_f = rec.dims
            layer = DenseLayer(rec.name, in_f, out_f, rng, **common)
        else:
            f, c, kh, kw, stride, pad = rec.dims
            layer = ConvLayer(rec.name, c, f, kh, rng, stride=stride, padding=pad, **common)
        layer.bias.data = rec.bias.copy()
        if rec.quantizer is QuantizerKind.TTQ:
            layer.w_pos.data = np.asarray(rec.packed.codebook.w_pos)
            layer.w_neg.data = np.asarray(rec.packed.codebook.w_neg)
        layers.append(layer)
    return Model(layers, data.input_shape)


def write_model_file(path, model: Model, flavor: int = FLAVOR_CHECKPOINT):
    data = serialize(records_from_model(model, flavor))
    with open(path, "wb") as f:
        f.write(data)


def read_model_file(path) -> ModelFileData:
    with open(path, "rb") as f:
        return deserialize(f.read())


@dataclass
class CompressionRow:
    layer: str
    kind: str
    weights: int
    density: float  # 1 - sparsity of the stored assignment
    width_bits: int  # 2 for packed layers, 32 for full-precision ones
    payload_bytes: int  # weight payload as stored in a deployment file
    overhead_bytes: int  # codebook + per-layer metadata (bias excluded)
    baseline_bytes: int  # weights at the 32-bit baseline width
    ratio: float


@dataclass
class CompressionReport:
    rows: list[CompressionRow]
    total_baseline: int
    total_packed: int
    total_ratio: float
    quantized_baseline: int
    quantized_packed: int
    quantized_ratio: float  # headline number; exempt layers excluded

    def to_records(self):
        for row in self.rows:
            yield {"record": "compression_layer", **row.__dict__}
        yield {
            "record": "compression_total",
            "total_baseline": self.total_baseline,
            "total_packed": self.total_packed,
            "total_ratio": self.total_ratio,
            "quantized_baseline": self.quantized_baseline,
            "quantized_packed": self.quantized_packed,
            "quantized_ratio": self.quantized_ratio,
        }


def compression_report(data: ModelFileData) -> CompressionReport:
    """Per-layer and total deployment size against the 32-bit baseline.

    Byte accounting covers the weight payload plus per-layer overhead
    (codebook scalars and record metadata); biases appear identically on
    both sides of the ratio and are left out.
    """
    from ternq.packing import unpack

    rows = []
    totals = {"baseline": 0, "packed": 0, "q_baseline": 0, "q_packed": 0}
    for rec in data.layers:
        n = rec.weight_count
        baseline = 4 * n
        record_bytes = len(serialize_layer(rec, FLAVOR_DEPLOY))
        bias_bytes = 8 * len(rec.bias)
        if rec.is_quantized:
            partition, _ = unpack(rec.packed)
            density = 1.0 - partition.sparsity
            width = 2
            payload = rec.packed.packed_bytes
        else:
            density = 1.0
            width = 32
            payload = 4 * n
        overhead = record_bytes - bias_bytes - payload
        accounted = payload + overhead
        rows.append(CompressionRow(rec.name, rec.kind, n, density, width,
                                   payload, overhead, baseline, baseline / accounted))
        totals["baseline"] += baseline
        totals["packed"] += accounted
        if rec.is_quantized:
            totals["q_baseline"] += baseline
            totals["q_packed"] += accounted
    return CompressionReport(
        rows,
        totals["baseline"],
        totals["packed"],
        totals["baseline"] / totals["packed"] if totals["packed"] else 0.0,
        totals["q_baseline"],
        totals["q_packed"],
        totals["q_baseline"] / totals["q_packed"] if totals["q_packed"] else 0.0,
    )
