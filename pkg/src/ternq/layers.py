"""Quantized dense/conv layers and the model container.

Each layer keeps latent full-precision weights and re-quantizes them on
every forward pass: normalize, threshold, materialize against the layer
codebook, then run the linear op. Backward routes the materialized-weight
gradient to the latent weights (scaled three-case rule for the trained
quantizer, straight-through for the baselines) and, for the trained
quantizer, to the two scaling coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ternq import tensor as T
from ternq.quantizers import (
    ConstantFactor,
    QuantizerKind,
    TernaryCodebook,
    TernaryPartition,
    ThresholdPolicy,
    codebook_warm_start,
    compute_threshold,
    dorefa_binarize,
    normalize_weights,
    stochastic_binarize,
    stochastic_ternarize,
    ttq_backward,
    ttq_materialize,
    ttq_partition,
    twn_quantize,
)

# Quantizers that draw fresh randomness each forward pass.
STOCHASTIC_KINDS = (QuantizerKind.STOCHASTIC_BINARY, QuantizerKind.STOCHASTIC_TERNARY)


def assignment_churn(prev: TernaryPartition, next_: TernaryPartition) -> float:
    """Fraction of weights whose ternary sign changed between two partitions."""
    if prev.signs.shape != next_.signs.shape:
        raise ValueError(f"partition shapes differ: {prev.signs.shape} vs {next_.signs.shape}")
    return float(np.count_nonzero(prev.signs != next_.signs)) / prev.signs.size


class QuantizedLayer:
    """Shared quantization machinery for dense and conv layers."""

    def __init__(self, name, weight, quantizer, policy, unsigned_wneg_grad=False):
        self.name = name
        self.weight = T.Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.quantizer = quantizer
        self.policy = policy if policy is not None else ConstantFactor()
        self.unsigned_wneg_grad = unsigned_wneg_grad
        if quantizer is QuantizerKind.TTQ:
            cb = codebook_warm_start(self.weight.data)
            self.w_pos = T.Tensor(cb.w_pos, requires_grad=True, name=f"{name}.w_pos")
            self.w_neg = T.Tensor(cb.w_neg, requires_grad=True, name=f"{name}.w_neg")
        else:
            self.w_pos = None
            self.w_neg = None
        # Inspection state from the most recent forward; does not feed back
        # into any computation.
        self.last_partition: TernaryPartition | None = None
        self.last_scale: float | None = None
        self.last_threshold: float | None = None
        self.last_scale_pair: tuple[float, float] | None = None

    @property
    def is_quantized(self) -> bool:
        return self.quantizer is not QuantizerKind.NONE

    def codebook(self) -> TernaryCodebook | None:
        if self.w_pos is None:
            return None
        return TernaryCodebook(float(self.w_pos.data), float(self.w_neg.data))

    def effective_scales(self) -> tuple[float, float] | None:
        """(positive, negative) weight magnitudes used by the last forward."""
        if self.quantizer is QuantizerKind.TTQ:
            return float(self.w_pos.data), float(self.w_neg.data)
        if self.last_scale_pair is not None:
            return self.last_scale_pair
        return None

    def parameters(self) -> list[T.Tensor]:
        params = [self.weight, self.bias]
        if self.w_pos is not None:
            params += [self.w_pos, self.w_neg]
        return params

    def decayed_parameters(self) -> list[T.Tensor]:
        """Parameters subject to weight decay: never the scaling coefficients."""
        return [self.weight, self.bias]

    def quantized_weight(self, rng: np.random.Generator | None = None) -> T.Tensor:
        """Materialize this step's effective weights as an autodiff node."""
        kind = self.quantizer
        self.last_scale_pair = None
        if kind is QuantizerKind.NONE:
            self.last_partition = None
            return self.weight

        w = self.weight
        if kind is QuantizerKind.TTQ:
            scale = float(np.abs(w.data).max())
            w_norm = normalize_weights(w.data)
            delta = compute_threshold(w_norm, self.policy)
            part = ttq_partition(w_norm, delta)
            cb = TernaryCodebook(float(self.w_pos.data), float(self.w_neg.data))
            data = ttq_materialize(part, cb)
            self.last_partition = part
            self.last_scale = scale
            self.last_threshold = delta
            w_pos, w_neg = self.w_pos, self.w_neg
            unsigned = self.unsigned_wneg_grad

            out = T.Tensor(data, requires_grad=True)
            out._parents = (w, w_pos, w_neg)

            def backward(g):
                grad_latent, grad_wpos, grad_wneg = ttq_backward(g, part, cb, unsigned_wneg_grad=unsigned)
                w._accumulate(grad_latent)
                w_pos._accumulate(np.asarray(grad_wpos))
                w_neg._accumulate(np.asarray(grad_wneg))

            out._backward = backward
            return out

        # Baselines: fixed scales, straight-through backward.
        if kind is QuantizerKind.TWN:
            data = twn_quantize(w.data)
        elif kind is QuantizerKind.DOREFA:
            data = dorefa_binarize(w.data)
        elif kind is QuantizerKind.STOCHASTIC_BINARY:
            if rng is None:
                raise ValueError(f"layer {self.name}: stochastic quantizer needs an rng")
            data = stochastic_binarize(w.data, rng)
        elif kind is QuantizerKind.STOCHASTIC_TERNARY:
            if rng is None:
                raise ValueError(f"layer {self.name}: stochastic quantizer needs an rng")
            data = stochastic_ternarize(w.data, rng)
        else:
            raise ValueError(f"unhandled quantizer kind: {kind}")

        self.last_partition = TernaryPartition(np.sign(data).astype(np.int8))
        self.last_scale = None
        self.last_threshold = None
        mags = np.abs(data[data != 0])
        s = float(mags[0]) if mags.size else 0.0
        self.last_scale_pair = (s, s)

        out = T.Tensor(data, requires_grad=True)
        out._parents = (w,)
        out._backward = lambda g: w._accumulate(g)
        return out


class DenseLayer(QuantizedLayer):
    """Fully connected layer; weight laid out (out_features, in_features)."""

    kind = "dense"

    def __init__(self, name, in_features, out_features, rng, quantizer=QuantizerKind.NONE, policy=None, weight=None, unsigned_wneg_grad=False):
        self.in_features = in_features
        self.out_features = out_features
        if weight is None:
            weight = rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features))
        super().__init__(name, weight, quantizer, policy, unsigned_wneg_grad)
        self.bias = T.Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")

    def forward(self, x: T.Tensor, rng=None) -> T.Tensor:
        wt = self.quantized_weight(rng)
        return T.add(T.matmul(x, T.transpose(wt)), self.bias)


class ConvLayer(QuantizedLayer):
    """2-D convolution layer; kernel laid out (out_c, in_c, kh, kw)."""

    kind = "conv"

    def __init__(self, name, in_channels, out_channels, kernel_size, rng, stride=1, padding=0, quantizer=QuantizerKind.NONE, policy=None, weight=None, unsigned_wneg_grad=False):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        if weight is None:
            fan_in = in_channels * kernel_size * kernel_size
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel_size, kernel_size))
        super().__init__(name, weight, quantizer, policy, unsigned_wneg_grad)
        self.bias = T.Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.bias")

    def forward(self, x: T.Tensor, rng=None) -> T.Tensor:
        wt = self.quantized_weight(rng)
        out = T.conv2d(x, wt, stride=self.stride, padding=self.padding)
        bias = T.reshape(self.bias, (self.out_channels, 1, 1))
        return T.add(out, bias)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class Model:
    """Ordered layers with ReLU between them and a softmax cross-entropy head."""

    def __init__(self, layers: list[QuantizedLayer], input_shape: tuple[int, ...]):
        self.layers = layers
        self.input_shape = tuple(input_shape)

    def forward_tensor(self, x: T.Tensor, rng=None) -> T.Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense" and h.data.ndim == 4:
                n = h.data.shape[0]
                h = T.reshape(h, (n, int(np.prod(h.data.shape[1:]))))
            h = layer.forward(h, rng)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        return h

    def logits(self, x: np.ndarray, rng=None) -> np.ndarray:
        return self.forward_tensor(T.Tensor(x), rng).data

    def loss(self, x: np.ndarray, labels: np.ndarray, rng=None) -> tuple[T.Tensor, np.ndarray]:
        out = self.forward_tensor(T.Tensor(x), rng)
        return T.softmax_cross_entropy(out, labels), out.data

    def parameters(self) -> list[T.Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def decayed_parameters(self) -> list[T.Tensor]:
        return [p for layer in self.layers for p in layer.decayed_parameters()]

    def quantized_layers(self) -> list[QuantizedLayer]:
        return [l for l in self.layers if l.is_quantized]

    def ttq_layers(self) -> list[QuantizedLayer]:
        return [l for l in self.layers if l.quantizer is QuantizerKind.TTQ]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def output_classes(self) -> int:
        last = self.layers[-1]
        return last.out_features if last.kind == "dense" else last.out_channels


@dataclass
class LayerSpec:
    """Declarative description of one layer before shapes are resolved."""

    kind: str  # "dense" | "conv"
    features: int | None = None  # dense: out_features
    out_channels: int | None = None  # conv
    kernel: int | None = None
    stride: int = 1
    padding: int = 0
    quantizer: QuantizerKind | None = None  # None -> default assignment
    policy: ThresholdPolicy | None = None


@dataclass
class ModelSpec:
    """Architecture plus per-layer quantizer assignments.

    Layers whose spec leaves the quantizer unset get the default kind,
    except the first and last layers, which stay at full precision unless
    exempt_first_last is turned off or the layer sets a kind explicitly.
    """

    input_shape: tuple[int, ...]
    layers: list[LayerSpec] = field(default_factory=list)
    default_quantizer: QuantizerKind = QuantizerKind.NONE
    default_policy: ThresholdPolicy | None = None
    exempt_first_last: bool = True
    unsigned_wneg_grad: bool = False

    def resolved_quantizers(self) -> list[QuantizerKind]:
        kinds = []
        last = len(self.layers) - 1
        for i, spec in enumerate(self.layers):
            if spec.quantizer is not None:
                kinds.append(spec.quantizer)
            elif self.exempt_first_last and i in (0, last):
                kinds.append(QuantizerKind.NONE)
            else:
                kinds.append(self.default_quantizer)
        return kinds


def build_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """Instantiate a Model from a ModelSpec, resolving input shapes layer by layer."""
    if not spec.layers:
        raise ValueError("model needs at least one layer")
    kinds = spec.resolved_quantizers()
    layers: list[QuantizedLayer] = []
    shape = tuple(spec.input_shape)
    counts = {"dense": 0, "conv": 0}
    for i, (lspec, kind) in enumerate(zip(spec.layers, kinds)):
        policy = lspec.policy if lspec.policy is not None else spec.default_policy
        counts[lspec.kind] = counts.get(lspec.kind, 0) + 1
        name = f"{lspec.kind}{counts[lspec.kind]}"
        if lspec.kind == "dense":
            in_features = int(np.prod(shape))
            layer = DenseLayer(
                name, in_features, lspec.features, rng,
                quantizer=kind, policy=policy, unsigned_wneg_grad=spec.unsigned_wneg_grad,
            )
            shape = (lspec.features,)
        elif lspec.kind == "conv":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv needs a (C,H,W) input, have {shape}")
            c, h, w = shape
            layer = ConvLayer(
                name, c, lspec.out_channels, lspec.kernel, rng,
                stride=lspec.stride, padding=lspec.padding,
                quantizer=kind, policy=policy, unsigned_wneg_grad=spec.unsigned_wneg_grad,
            )
            h2, w2 = layer.output_hw(h, w)
            if h2 < 1 or w2 < 1:
                raise ValueError(f"layer {i}: conv output collapses to {h2}x{w2}")
            shape = (lspec.out_channels, h2, w2)
        else:
            raise ValueError(f"layer {i}: unknown kind {lspec.kind!r}")
        layers.append(layer)
    return Model(layers, spec.input_shape)
