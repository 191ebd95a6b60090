"""Optimization loop: SGD/Adam, schedules, weight decay, metrics, traces.

Weight decay applies to latent weights and biases but never to the two
scaling coefficients; those also get an optional learning-rate multiplier
and are clamped to a small positive floor after every step. One training
run is sequential and fully determined by the config seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ternq.data import Dataset
from ternq.layers import Model, ModelSpec, assignment_churn, build_model
from ternq.quantizers import CODEBOOK_FLOOR, ConstantSparsity

# Fixed seed for quantizer draws during evaluation, so evaluating twice
# gives identical numbers even for stochastic quantizers.
EVAL_SEED = 0x7E51


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the step and offending layer."""

    def __init__(self, epoch, step, layer):
        self.epoch = epoch
        self.step = step
        self.layer = layer
        super().__init__(f"non-finite loss at epoch {epoch}, step {step} (first bad layer: {layer})")


class ArchitectureMismatchError(ValueError):
    """Source and target models disagree on layer kinds or shapes."""


@dataclass
class TrainConfig:
    optimizer: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: list[tuple[int, float]] = field(default_factory=list)
    weight_decay: float = 0.0
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    codebook_lr_scale: float = 1.0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        epochs_in_schedule = [e for e, _ in self.lr_schedule]
        if epochs_in_schedule != sorted(set(epochs_in_schedule)):
            raise ValueError(f"lr_schedule epochs must be strictly increasing: {epochs_in_schedule}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for boundary, factor in self.lr_schedule:
            if epoch >= boundary:
                lr *= factor
        return lr


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_err: float
    val_loss: float
    val_err: float
    val_err_avg: float  # running mean over all epochs so far


@dataclass
class LayerStepRecord:
    step: int
    layer: str
    w_pos: float | None
    w_neg: float | None
    sparsity: float
    churn: float


@dataclass
class TrainReport:
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    layer_steps: list[LayerStepRecord] = field(default_factory=list)

    def to_records(self):
        yield {"record": "run_meta", "schema": 1, "seed": self.seed}
        for e in self.epochs:
            yield {"record": "epoch", **asdict(e)}
        for s in self.layer_steps:
            yield {"record": "layer_step", **asdict(s)}

    def save(self, path):
        with open(path, "w") as f:
            for rec in self.to_records():
                f.write(json.dumps(rec) + "\n")

    @staticmethod
    def load(path) -> "TrainReport":
        report = TrainReport(seed=0)
        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                kind = rec.pop("record")
                if kind == "run_meta":
                    report.seed = rec.get("seed", 0)
                elif kind == "epoch":
                    report.epochs.append(EpochRecord(**rec))
                elif kind == "layer_step":
                    report.layer_steps.append(LayerStepRecord(**rec))
        return report

    def layer_trace(self, layer: str) -> list[LayerStepRecord]:
        return [s for s in self.layer_steps if s.layer == layer]


class _Sgd:
    def __init__(self, params, momentum):
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, params, grads, lr_each):
        for p, g, v, lr in zip(params, grads, self.velocity, lr_each):
            v *= self.momentum
            v += g
            p.data = p.data - lr * v


class _Adam:
    def __init__(self, params, beta1, beta2, eps):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, params, grads, lr_each):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (p, g, lr) in enumerate(zip(params, grads, lr_each)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def evaluate(model, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Forward-only loss and error rate; no parameter mutation."""
    rng = np.random.default_rng(EVAL_SEED)
    logits = model.logits(x, rng)
    n, k = logits.shape
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float((lse - shifted[np.arange(n), y]).mean())
    err = float(np.count_nonzero(np.argmax(logits, axis=1) != y)) / n
    return loss, err


def _first_non_finite_layer(model) -> str:
    for layer in model.layers:
        for p in layer.parameters():
            if not np.isfinite(p.data).all() or (p.grad is not None and not np.isfinite(p.grad).all()):
                return layer.name
    return "loss"


def train(model: Model, data: Dataset, cfg: TrainConfig) -> tuple[Model, TrainReport]:
    """Run the minibatch training loop, collecting per-step layer traces."""
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(seed=cfg.seed)

    params = model.parameters()
    decayed = set(id(p) for p in model.decayed_parameters())
    codebook_ids = set()
    for layer in model.ttq_layers():
        codebook_ids.add(id(layer.w_pos))
        codebook_ids.add(id(layer.w_neg))

    opt = (_Sgd(params, cfg.momentum) if cfg.optimizer == "sgd"
           else _Adam(params, cfg.beta1, cfg.beta2, cfg.eps))

    prev_partitions = {}
    n = len(data.y_train)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = data.x_train[idx], data.y_train[idx]
            model.zero_grad()
            loss, _ = model.loss(xb, yb, rng)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, step, _first_non_finite_layer(model))
            loss.backward()

            grads, lr_each = [], []
            for p in params:
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                if cfg.weight_decay and id(p) in decayed:
                    g = g + cfg.weight_decay * p.data
                grads.append(g)
                lr_each.append(lr * cfg.codebook_lr_scale if id(p) in codebook_ids else lr)
            opt.step(params, grads, lr_each)

            for layer in model.ttq_layers():
                layer.w_pos.data = np.maximum(layer.w_pos.data, CODEBOOK_FLOOR)
                layer.w_neg.data = np.maximum(layer.w_neg.data, CODEBOOK_FLOOR)

            for layer in model.quantized_layers():
                part = layer.last_partition
                prev = prev_partitions.get(layer.name)
                churn = assignment_churn(prev, part) if prev is not None else 0.0
                prev_partitions[layer.name] = part
                scales = layer.effective_scales()
                w_pos, w_neg = scales if scales is not None else (None, None)
                report.layer_steps.append(
                    LayerStepRecord(step, layer.name, w_pos, w_neg, part.sparsity, churn)
                )
            step += 1

        train_loss, train_err = evaluate(model, data.x_train, data.y_train)
        val_loss, val_err = evaluate(model, data.x_val, data.y_val)
        past = [e.val_err for e in report.epochs] + [val_err]
        report.epochs.append(
            EpochRecord(epoch, lr, train_loss, train_err, val_loss, val_err, float(np.mean(past)))
        )
    return model, report


def copy_latent_weights(source: Model, target: Model):
    """Copy weights and biases layer by layer; architectures must agree."""
    if len(source.layers) != len(target.layers):
        raise ArchitectureMismatchError(
            f"layer counts differ: {len(source.layers)} vs {len(target.layers)}"
        )
    for src, dst in zip(source.layers, target.layers):
        if src.kind != dst.kind or src.weight.data.shape != dst.weight.data.shape:
            raise ArchitectureMismatchError(
                f"layer {dst.name}: {src.kind}{src.weight.data.shape} vs {dst.kind}{dst.weight.data.shape}"
            )
        dst.weight.data = src.weight.data.copy()
        dst.bias.data = src.bias.data.copy()


def finetune_from(source: Model, spec: ModelSpec, data: Dataset, cfg: TrainConfig) -> tuple[Model, TrainReport]:
    """Initialize a quantized model from a trained full-precision one, then train.

    Latent weights are copied from the source and the scaling coefficients
    are re-warm-started from those weights before training begins.
    """
    from ternq.quantizers import codebook_warm_start

    target = build_model(spec, np.random.default_rng(cfg.seed))
    copy_latent_weights(source, target)
    for layer in target.ttq_layers():
        cb = codebook_warm_start(layer.weight.data)
        layer.w_pos.data = np.asarray(cb.w_pos)
        layer.w_neg.data = np.asarray(cb.w_neg)
    return train(target, data, cfg)


def sparsity_sweep(spec: ModelSpec, data: Dataset, r_values, cfg: TrainConfig) -> list[dict]:
    """Train one model per target sparsity r, identical seed and budget."""
    rows = []
    for r in r_values:
        if not 0.0 <= r < 1.0:
            raise ValueError(f"sweep sparsity r must lie in [0,1), got {r}")
        policy = ConstantSparsity(r=r)
        spec_r = replace(
            spec,
            default_policy=policy,
            layers=[replace(l, policy=policy) for l in spec.layers],
        )
        model = build_model(spec_r, np.random.default_rng(cfg.seed))
        model, report = train(model, data, cfg)
        last = report.epochs[-1] if report.epochs else None
        rows.append({
            "r": float(r),
            "train_err": last.train_err if last else None,
            "val_err": last.val_err if last else None,
            "val_err_avg": last.val_err_avg if last else None,
        })
    return rows
