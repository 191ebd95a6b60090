"""Forward-only execution over packed ternary weights.

Each output unit's nonzero inputs are gathered through precomputed index
lists, summed, and scaled once per sign: two multiplications per output
element no matter how sparse the layer is. Zero weights contribute no
work at all. Partial sums accumulate in float64 so results track the
dense reference to well under 1e-9.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ternq.modelfile import ModelFileData, deserialize
from ternq.packing import PackedTernaryTensor, unpack
from ternq.quantizers import TernaryCodebook
from ternq.tensor import ShapeError, _im2col


@dataclass
class UnitIndexSet:
    """Input positions with positive and negative weights for one output unit."""

    pos: np.ndarray
    neg: np.ndarray


@dataclass
class TernaryExecPlan:
    kind: str  # "dense" | "conv"
    weight_shape: tuple[int, ...]
    units: list[UnitIndexSet]  # one per output unit / filter
    codebook: TernaryCodebook
    stride: int = 1
    padding: int = 0

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape[1:]))

    @property
    def nonzero_count(self) -> int:
        return sum(len(u.pos) + len(u.neg) for u in self.units)


def build_plan(packed: PackedTernaryTensor, kind: str, stride: int = 1, padding: int = 0) -> TernaryExecPlan:
    """Turn a packed tensor into per-unit gather lists; corrupt data propagates."""
    partition, codebook = unpack(packed)
    if kind == "dense":
        mat = partition.signs
    elif kind == "conv":
        f = packed.shape[0]
        mat = partition.signs.reshape(f, -1)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    units = [UnitIndexSet(np.nonzero(row == 1)[0], np.nonzero(row == -1)[0]) for row in mat]
    return TernaryExecPlan(kind, packed.shape, units, codebook, stride, padding)


def ternary_dense_forward(plan: TernaryExecPlan, x: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """out_j = w_pos * sum(x[pos_j]) - w_neg * sum(x[neg_j]) + bias_j."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != plan.fan_in:
        raise ShapeError(f"input shape {x.shape} does not match plan fan-in {plan.fan_in}")
    wp, wn = plan.codebook.w_pos, plan.codebook.w_neg
    out = np.empty((x.shape[0], len(plan.units)))
    for j, unit in enumerate(plan.units):
        out[:, j] = wp * x[:, unit.pos].sum(axis=1) - wn * x[:, unit.neg].sum(axis=1)
    if bias is not None:
        out += bias
    return out


def ternary_conv_forward(plan: TernaryExecPlan, x: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Per-filter positive/negative window sums, two multiplications per output element."""
    x = np.asarray(x, dtype=np.float64)
    f, c, kh, kw = plan.weight_shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"input shape {x.shape} does not match conv plan {plan.weight_shape}")
    n = x.shape[0]
    cols, h_out, w_out = _im2col(x, kh, kw, plan.stride, plan.padding)
    wp, wn = plan.codebook.w_pos, plan.codebook.w_neg
    out = np.empty((n, f, h_out * w_out))
    for j, unit in enumerate(plan.units):
        out[:, j, :] = wp * cols[:, unit.pos, :].sum(axis=1) - wn * cols[:, unit.neg, :].sum(axis=1)
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(n, f, h_out, w_out)


def _conv_out_hw(plan: TernaryExecPlan, h: int, w: int) -> tuple[int, int]:
    _, _, kh, kw = plan.weight_shape
    return (
        (h + 2 * plan.padding - kh) // plan.stride + 1,
        (w + 2 * plan.padding - kw) // plan.stride + 1,
    )


def op_count_report(plan: TernaryExecPlan, input_shape: tuple[int, ...]) -> dict:
    """Exact operation counts for one forward pass over this plan.

    multiplications: two per output element (the deferred codebook scales);
    additions: one per nonzero-weight MAC; skipped: the zero-weight MACs a
    dense kernel would have spent. Baseline counts are what a
    full-precision layer of the same geometry performs.
    """
    if plan.kind == "dense":
        n = input_shape[0]
        positions = 1
    else:
        n = input_shape[0]
        h_out, w_out = _conv_out_hw(plan, input_shape[2], input_shape[3])
        positions = h_out * w_out
    out_units = len(plan.units)
    out_elements = n * out_units * positions
    nonzero = plan.nonzero_count
    total_weights = out_units * plan.fan_in
    return {
        "output_elements": out_elements,
        "multiplications": 2 * out_elements,
        "additions": n * positions * nonzero,
        "skipped_macs": n * positions * (total_weights - nonzero),
        "baseline_macs": n * positions * total_weights,
        "density": nonzero / total_weights if total_weights else 0.0,
    }


class _RawDense:
    quantized = False

    def __init__(self, rec):
        self.name = rec.name
        self.kind = "dense"
        self.weight = rec.raw_weight
        self.bias = rec.bias

    def forward(self, x):
        return x @ self.weight.T + self.bias

    def baseline_macs(self, input_shape):
        return input_shape[0] * self.weight.size


class _RawConv:
    quantized = False

    def __init__(self, rec):
        self.name = rec.name
        self.kind = "conv"
        self.weight = rec.raw_weight
        self.bias = rec.bias
        _, _, _, _, self.stride, self.padding = rec.dims

    def forward(self, x):
        f = self.weight.shape[0]
        kh, kw = self.weight.shape[2:]
        cols, h_out, w_out = _im2col(x, kh, kw, self.stride, self.padding)
        out = np.matmul(self.weight.reshape(f, -1), cols)
        out += self.bias[None, :, None]
        return out.reshape(x.shape[0], f, h_out, w_out)

    def baseline_macs(self, input_shape):
        n, _, h, w = input_shape
        kh = self.weight.shape[2]
        h_out = (h + 2 * self.padding - kh) // self.stride + 1
        w_out = (w + 2 * self.padding - kh) // self.stride + 1
        return n * h_out * w_out * self.weight.size


class _PlanLayer:
    quantized = True

    def __init__(self, rec):
        self.name = rec.name
        self.kind = rec.kind
        stride, padding = (1, 0) if rec.kind == "dense" else rec.dims[4:6]
        self.plan = build_plan(rec.packed, rec.kind, stride, padding)
        self.bias = rec.bias

    def forward(self, x):
        if self.kind == "dense":
            return ternary_dense_forward(self.plan, x, self.bias)
        return ternary_conv_forward(self.plan, x, self.bias)

    def op_counts(self, input_shape):
        return op_count_report(self.plan, input_shape)


class InferenceModel:
    """Forward-only model over file records: packed plans plus raw exempt layers."""

    def __init__(self, layers, input_shape):
        self.layers = layers
        self.input_shape = tuple(input_shape)

    @staticmethod
    def from_records(data: ModelFileData) -> "InferenceModel":
        layers = []
        for rec in data.layers:
            if rec.is_quantized:
                layers.append(_PlanLayer(rec))
            elif rec.kind == "dense":
                layers.append(_RawDense(rec))
            else:
                layers.append(_RawConv(rec))
        return InferenceModel(layers, data.input_shape)

    @staticmethod
    def from_bytes(raw: bytes) -> "InferenceModel":
        return InferenceModel.from_records(deserialize(raw))

    @staticmethod
    def from_file(path) -> "InferenceModel":
        with open(path, "rb") as f:
            return InferenceModel.from_bytes(f.read())

    def logits(self, x: np.ndarray, rng=None) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense" and h.ndim == 4:
                h = h.reshape(h.shape[0], -1)
            h = layer.forward(h)
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        return h

    def op_counts(self, batch_size: int = 1) -> list[dict]:
        """Per-layer operation counts for a forward pass at the given batch size."""
        rows = []
        shape = (batch_size, *self.input_shape)
        for layer in self.layers:
            if layer.kind == "dense" and len(shape) == 4:
                shape = (shape[0], int(np.prod(shape[1:])))
            if layer.quantized:
                row = {"layer": layer.name, "kind": layer.kind, "quantized": True}
                row.update(layer.op_counts(shape))
            else:
                macs = layer.baseline_macs(shape)
                row = {
                    "layer": layer.name, "kind": layer.kind, "quantized": False,
                    "multiplications": macs, "additions": macs, "skipped_macs": 0,
                    "baseline_macs": macs, "density": 1.0,
                }
            rows.append(row)
            if layer.kind == "dense":
                shape = (shape[0], len(layer.bias))
            else:
                plan_like = layer.plan if layer.quantized else None
                if plan_like is not None:
                    h_out, w_out = _conv_out_hw(plan_like, shape[2], shape[3])
                    f = plan_like.weight_shape[0]
                else:
                    kh = layer.weight.shape[2]
                    h_out = (shape[2] + 2 * layer.padding - kh) // layer.stride + 1
                    w_out = (shape[3] + 2 * layer.padding - kh) // layer.stride + 1
                    f = layer.weight.shape[0]
                shape = (shape[0], f, h_out, w_out)
        return rows
