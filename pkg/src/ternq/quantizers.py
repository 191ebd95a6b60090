"""Weight quantizers and their backward rules.

The trained-ternary quantizer ("ttq") maps normalized weights to
{+w_pos, 0, -w_neg} with two learned per-layer scaling coefficients and
routes gradients both to the latent weights (scaled, three-case rule) and
to the coefficients (per-sign sums). The baselines (twn, dorefa,
stochastic binary/ternary) use fixed scales and straight-through
gradients. All functions here are pure; the stochastic pair takes an
explicit numpy Generator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

# Lower bound applied to the trained scaling coefficients after every
# optimizer step, so a coefficient can never cross zero and flip the sign
# semantics of the ternary encoding.
CODEBOOK_FLOOR = 1e-8


class DegenerateWeightsError(ValueError):
    """Raised when an all-zero weight tensor cannot be normalized."""


class QuantizerKind(enum.Enum):
    """Which quantizer a layer applies to its weights each forward pass."""

    NONE = "none"
    TTQ = "ttq"
    TWN = "twn"
    DOREFA = "dorefa"
    STOCHASTIC_BINARY = "stochastic_binary"
    STOCHASTIC_TERNARY = "stochastic_ternary"


@dataclass
class TernaryCodebook:
    """Per-layer magnitudes of the positive and negative ternary values.

    Both coefficients are trained and kept strictly positive during
    optimization (see CODEBOOK_FLOOR); zero is tolerated only for the
    degenerate all-zero quantization produced by twn on near-zero layers.
    """

    w_pos: float
    w_neg: float

    def __post_init__(self):
        if self.w_pos < 0 or self.w_neg < 0:
            raise ValueError(f"codebook values must be non-negative, got ({self.w_pos}, {self.w_neg})")


@dataclass
class TernaryPartition:
    """Per-weight assignment into {positive, zero, negative}, stored as int8 signs."""

    signs: np.ndarray

    def __post_init__(self):
        self.signs = np.asarray(self.signs, dtype=np.int8)
        bad = np.setdiff1d(np.unique(self.signs), [-1, 0, 1])
        if bad.size:
            raise ValueError(f"partition signs must be in {{-1,0,1}}, got {bad.tolist()}")

    @property
    def shape(self):
        return self.signs.shape

    @property
    def sparsity(self) -> float:
        """Fraction of weights assigned to zero."""
        return float(np.count_nonzero(self.signs == 0)) / self.signs.size


@dataclass
class ConstantFactor:
    """Threshold = t * max(|w|), one t shared by all layers."""

    t: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.t < 1.0:
            raise ValueError(f"threshold factor t must lie in (0,1), got {self.t}")


@dataclass
class ConstantSparsity:
    """Threshold chosen per layer so a fraction r of weights goes to zero."""

    r: float

    def __post_init__(self):
        if not 0.0 <= self.r < 1.0:
            raise ValueError(f"target sparsity r must lie in [0,1), got {self.r}")


ThresholdPolicy = ConstantFactor | ConstantSparsity


def normalize_weights(w: np.ndarray) -> np.ndarray:
    """Scale w by 1/max(|w|) so the result spans [-1, 1] with at least one ±1."""
    w = np.asarray(w, dtype=np.float64)
    m = np.abs(w).max() if w.size else 0.0
    if m == 0.0:
        raise DegenerateWeightsError("cannot normalize an all-zero weight tensor")
    return w / m


def compute_threshold(w_norm: np.ndarray, policy: ThresholdPolicy) -> float:
    """Cut magnitude below which (inclusive) weights are assigned to zero.

    ConstantFactor: t * max(|w|). ConstantSparsity: the ceil(r*n)-th
    smallest |w|, the smallest threshold whose zero fraction reaches r;
    ties at the cut all go to zero, so achieved sparsity may exceed r.
    """
    w_norm = np.asarray(w_norm, dtype=np.float64)
    if w_norm.size == 0:
        raise ValueError("cannot compute a threshold for an empty tensor")
    if isinstance(policy, ConstantFactor):
        return float(policy.t * np.abs(w_norm).max())
    if isinstance(policy, ConstantSparsity):
        k = int(np.ceil(policy.r * w_norm.size))
        if k == 0:
            return 0.0
        mags = np.abs(w_norm).ravel()
        return float(np.partition(mags, k - 1)[k - 1])
    raise TypeError(f"unknown threshold policy: {policy!r}")


def ttq_partition(w_norm: np.ndarray, delta: float) -> TernaryPartition:
    """Sign +1 where w > delta, -1 where w < -delta, 0 where |w| <= delta."""
    if delta < 0:
        raise ValueError(f"threshold must be non-negative, got {delta}")
    w_norm = np.asarray(w_norm, dtype=np.float64)
    signs = np.zeros(w_norm.shape, dtype=np.int8)
    signs[w_norm > delta] = 1
    signs[w_norm < -delta] = -1
    return TernaryPartition(signs)


def ttq_materialize(partition: TernaryPartition, codebook: TernaryCodebook) -> np.ndarray:
    """Expand a partition to dense weights: +1 -> w_pos, -1 -> -w_neg, 0 -> 0."""
    signs = partition.signs
    out = np.zeros(signs.shape, dtype=np.float64)
    out[signs == 1] = codebook.w_pos
    out[signs == -1] = -codebook.w_neg
    return out


def ttq_backward(
    grad_wt: np.ndarray,
    partition: TernaryPartition,
    codebook: TernaryCodebook,
    unsigned_wneg_grad: bool = False,
) -> tuple[np.ndarray, float, float]:
    """Split the ternary-weight gradient into latent and coefficient gradients.

    Latent weights receive the scaled gradient: w_pos * g on the positive
    set, w_neg * g on the negative set, and 1 * g on the zero set (plain
    straight-through there). The coefficient gradients are sums of g over
    their index sets; since the materialized weight on the negative set is
    -w_neg, the chain rule negates the negative-set sum. Pass
    unsigned_wneg_grad=True for the legacy convention that keeps the raw
    (unnegated) sum; only the chain-rule default survives a
    finite-difference check on w_neg.
    """
    grad_wt = np.asarray(grad_wt, dtype=np.float64)
    signs = partition.signs
    if grad_wt.shape != signs.shape:
        raise ValueError(f"gradient shape {grad_wt.shape} does not match partition shape {signs.shape}")
    pos = signs == 1
    neg = signs == -1

    grad_wpos = float(grad_wt[pos].sum())
    neg_sum = float(grad_wt[neg].sum())
    grad_wneg = neg_sum if unsigned_wneg_grad else -neg_sum

    grad_latent = grad_wt.copy()
    grad_latent[pos] *= codebook.w_pos
    grad_latent[neg] *= codebook.w_neg
    return grad_latent, grad_wpos, grad_wneg


def twn_threshold_and_scale(w: np.ndarray) -> tuple[float, float]:
    """Fixed symmetric threshold 0.7*mean(|w|) and the mean magnitude above it.

    The scale is the L2-motivated representative value of the surviving
    weights; when nothing survives the threshold the layer quantizes to
    all zeros and the scale is 0.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    mags = np.abs(w)
    delta = 0.7 * float(mags.mean())
    above = mags[mags > delta]
    scale = float(above.mean()) if above.size else 0.0
    return delta, scale


def twn_quantize(w: np.ndarray) -> np.ndarray:
    """Map w to {-W, 0, +W} with the symmetric threshold/scale pair."""
    w = np.asarray(w, dtype=np.float64)
    delta, scale = twn_threshold_and_scale(w)
    out = np.zeros_like(w)
    out[w > delta] = scale
    out[w < -delta] = -scale
    return out


def twn_partition(w: np.ndarray) -> TernaryPartition:
    """Sign assignment induced by the symmetric twn threshold."""
    delta, _ = twn_threshold_and_scale(np.asarray(w, dtype=np.float64))
    return ttq_partition(np.asarray(w, dtype=np.float64), delta)


def dorefa_binarize(w: np.ndarray) -> np.ndarray:
    """mean(|w|) * sign(w), with sign(0) taken as +1."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    scale = float(np.abs(w).mean())
    signs = np.where(w >= 0, 1.0, -1.0)
    return scale * signs


def stochastic_binarize(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ±1 per element with P(+1) = (clip(w)+1)/2."""
    w = np.clip(np.asarray(w, dtype=np.float64), -1.0, 1.0)
    draws = rng.random(w.shape)
    return np.where(draws < (w + 1.0) / 2.0, 1.0, -1.0)


def stochastic_ternarize(w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw sign(w) with probability |clip(w)|, else 0, per element."""
    w = np.clip(np.asarray(w, dtype=np.float64), -1.0, 1.0)
    draws = rng.random(w.shape)
    return np.where(draws < np.abs(w), np.sign(w), 0.0)


def codebook_warm_start(w: np.ndarray) -> TernaryCodebook:
    """Symmetric starting codebook: the twn scale of the initial weights."""
    _, scale = twn_threshold_and_scale(w)
    scale = max(scale, CODEBOOK_FLOOR)
    return TernaryCodebook(scale, scale)
