"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: just the primitives needed to train the dense/conv
classifiers in this package. Tensors produced by ops are treated as
immutable; parameters (leaf tensors) are updated in place between
forward passes by the optimizer.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "add",
    "matmul",
    "transpose",
    "reshape",
    "mul",
    "relu",
    "tensor_sum",
    "conv2d",
    "softmax_cross_entropy",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A node in the (dynamically rebuilt) computation graph.

    Leaf tensors with ``requires_grad=True`` are trainable parameters;
    every op output carries a closure that propagates gradients to its
    parents. Gradients accumulate additively, so a tensor feeding two
    consumers receives the sum of both path gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from this scalar through the recorded graph.

        One backward per forward: re-invoking without rebuilding the graph
        raises, since saved contexts are consumed conceptually and grads
        would silently double-accumulate.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_ran:
            raise RuntimeError("backward already ran for this graph; rebuild the forward pass first")
        self._backward_ran = True

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    out._parents = parents
    out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition with numpy broadcasting."""
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a[m,k] @ b[k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes do not compose: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """2-D transpose."""
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.data.shape}")
    data = a.data.T.copy()

    def backward(g):
        a._accumulate(g.T)

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)
    old_shape = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(old_shape))

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    """max(0, x); subgradient at exactly 0 is 0."""
    data = np.maximum(0.0, a.data)
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _make(data, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    data = np.asarray(a.data.sum())

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).astype(np.float64))

    return _make(data, (a,), backward)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold [N,C,H,W] into patch columns [N, C*kh*kw, H'*W']."""
    n, c, h, w = x.shape
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    return cols.reshape(n, c * kh * kw, h_out * w_out), h_out, w_out


def _col2im(gcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int, h_out: int, w_out: int):
    """Scatter-add patch-column gradients back to the input layout."""
    n, c, h, w = x_shape
    g = gcols.reshape(n, c, kh, kw, h_out, w_out)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += g[:, :, i, j]
    if pad:
        gx = gx[:, :, pad : pad + h, pad : pad + w]
    return gx


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with kernel[F,C,kh,kw], zero padding."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.data.shape} and {kernel.data.shape}")
    n, c, h, w = x.data.shape
    f, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {kernel.data.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"kernel {kernel.data.shape} larger than padded input {x.data.shape} with padding {padding}"
        )
    cols, h_out, w_out = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, f, h_out, w_out)

    def backward(g):
        gmat = g.reshape(n, f, h_out * w_out)
        kernel._accumulate(np.einsum("nfl,nkl->fk", gmat, cols).reshape(kernel.data.shape))
        gcols = np.matmul(wmat.T, gmat)
        x._accumulate(_col2im(gcols, x.data.shape, kh, kw, stride, padding, h_out, w_out))

    return _make(out, (x, kernel), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch, max-stabilized."""
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range [0,{k}): {labels[(labels < 0) | (labels >= k)][0]}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    losses = -shifted[np.arange(n), labels] + np.log(exp.sum(axis=1))
    data = np.asarray(losses.mean())

    def backward(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        logits._accumulate(g * grad / n)

    return _make(data, (logits,), backward)
