"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through a network is a `Tensor`: a numpy float64 array
plus an optional gradient buffer and a handle into the computation graph
(parent tensors and a backward closure). Graphs are built eagerly during the
forward pass and consumed by `backward()`, which walks the nodes once in
reverse topological order. Everything is single-threaded and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (slow, for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _check_finite(data: np.ndarray, where: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {where}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional float64 array with an autodiff graph handle.

    `data` is row-major float64; `grad` is lazily allocated and shape-matches
    `data`. Leaf tensors with `requires_grad=True` are trainable parameters;
    op outputs carry `_parents` and a `_backward` closure that scatters the
    incoming gradient to the parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward, where: str) -> "Tensor":
        _check_finite(data, where)
        out = Tensor(data)
        live = tuple(p for p in parents if p.requires_grad or p._parents)
        if live:
            out.requires_grad = any(p.requires_grad for p in parents)
            out._parents = live
            out._backward = backward
        return out

    def backward(self) -> None:
        """Populate `grad` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
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
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ---------------------------------------------

    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

        return Tensor._make(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), lambda g: a.accumulate_grad(-g), "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._make(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._make(a.data / b.data, (a, b), bw, "div")

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        n = float(exponent)

        def bw(g):
            a.accumulate_grad(g * n * a.data ** (n - 1.0))

        return Tensor._make(a.data**n, (a,), bw, "pow")

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def bw(g):
            a.accumulate_grad(g * out_data)

        return Tensor._make(out_data, (a,), bw, "exp")

    def log(self) -> "Tensor":
        a = self

        def bw(g):
            a.accumulate_grad(g / a.data)

        return Tensor._make(np.log(a.data), (a,), bw, "log")

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def bw(g):
            a.accumulate_grad(g.reshape(old))

        return Tensor._make(a.data.reshape(shape), (a,), bw, "reshape")

    def transpose(self, axes) -> "Tensor":
        a = self
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def bw(g):
            a.accumulate_grad(g.transpose(inv))

        return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "transpose")

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None) -> "Tensor":
        a = self
        shape = a.data.shape

        def bw(g):
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, shape).astype(np.float64))
            else:
                a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), shape).astype(np.float64))

        return Tensor._make(a.data.sum(axis=axis), (a,), bw, "sum")

    def mean(self, axis=None) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    # -- nonlinearities -------------------------------------------------------

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0  # subgradient at exactly 0 is 0

        def bw(g):
            a.accumulate_grad(g * mask)

        return Tensor._make(np.where(mask, a.data, 0.0), (a,), bw, "relu")

    def sigmoid(self) -> "Tensor":
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def bw(g):
            a.accumulate_grad(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (a,), bw, "sigmoid")

    def softmax(self) -> "Tensor":
        """Softmax over the last axis."""
        a = self
        shifted = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=-1, keepdims=True)

        def bw(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            a.accumulate_grad(s * (g - dot))

        return Tensor._make(s, (a,), bw, "softmax")

    def element(self, index: int) -> "Tensor":
        """Scalar view of one entry of a 1-D tensor."""
        a = self

        def bw(g):
            buf = np.zeros_like(a.data)
            buf[index] = g
            a.accumulate_grad(buf)

        return Tensor._make(np.asarray(a.data[index]), (a,), bw, "element")

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")

        def bw(g):
            a.accumulate_grad(g @ b.data.T)
            b.accumulate_grad(a.data.T @ g)

        return Tensor._make(a.data @ b.data, (a, b), bw, "matmul")


# -- structural ops -----------------------------------------------------------


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate [N,C,H,W] tensors along the channel axis."""
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = tuple(tensors)

    def bw(g):
        for t, lo, hi in zip(parents, offsets[:-1], offsets[1:]):
            t.accumulate_grad(g[:, lo:hi])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=1), parents, bw, "concat")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of an [N,C,H,W] tensor by an integer factor."""
    a = x
    n, c, h, w = a.data.shape
    out_data = a.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        a.accumulate_grad(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return Tensor._make(out_data, (a,), bw, "upsample")


# -- neural-net ops ------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x[N,D] @ weight[D,K] + bias[K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.data.shape} vs {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ValueError(f"linear bias shape {bias.data.shape} != ({weight.data.shape[1]},)")
    a, w, b = x, weight, bias

    def bw(g):
        a.accumulate_grad(g @ w.data.T)
        w.accumulate_grad(a.data.T @ g)
        b.accumulate_grad(g.sum(axis=0))

    return Tensor._make(a.data @ w.data + b.data, (a, w, b), bw, "linear")


def _conv_windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, k, k), (sn, sc, sh * stride, sw * stride, sh, sw), writeable=False
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[N,Cin,H,W] with weight[Cout,Cin,k,k] plus bias[Cout]."""
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got {kh}x{kw}")
    if cin_w != cin:
        raise ValueError(f"weight expects {cin_w} input channels, input has {cin}")
    if bias.data.shape != (cout,):
        raise ValueError(f"bias shape {bias.data.shape} != ({cout},)")
    k = kh
    if (h + 2 * padding - k) % stride != 0 or (w + 2 * padding - k) % stride != 0:
        raise ValueError(
            f"non-integral output extent for input {h}x{w}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = _conv_windows(xp, k, stride, ho, wo)
    out_data = np.tensordot(win, weight.data, axes=((1, 4, 5), (1, 2, 3)))
    out_data = np.ascontiguousarray(out_data.transpose(0, 3, 1, 2))
    out_data += bias.data[None, :, None, None]

    a, wt, b = x, weight, bias

    def bw(g):
        wt.accumulate_grad(np.tensordot(g, win, axes=((0, 2, 3), (0, 2, 3))))
        b.accumulate_grad(g.sum(axis=(0, 2, 3)))
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                tap = np.tensordot(g, wt.data[:, :, i, j], axes=(1, 0))  # [N,Ho,Wo,Cin]
                dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                    tap.transpose(0, 3, 1, 2)
                )
        if padding > 0:
            a.accumulate_grad(dxp[:, :, padding : padding + h, padding : padding + w])
        else:
            a.accumulate_grad(dxp)

    return Tensor._make(out_data, (a, wt, b), bw, "conv2d")


# -- losses ---------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits[N,K])."""
    if logits.data.ndim != 2:
        raise ValueError("softmax_cross_entropy expects [N,K] logits")
    n, k = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} != ({n},)")
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"target class out of range [0,{k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsumexp - shifted[np.arange(n), targets]))
    a = logits

    def bw(g):
        probs = np.exp(shifted - logsumexp[:, None])
        probs[np.arange(n), targets] -= 1.0
        a.accumulate_grad(probs * (g / n))

    return Tensor._make(np.asarray(loss), (a,), bw, "softmax_cross_entropy")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mse shape mismatch: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    a, b = pred, target

    def bw(g):
        a.accumulate_grad(g * 2.0 * diff / n)
        b.accumulate_grad(g * -2.0 * diff / n)

    return Tensor._make(np.asarray(float(np.mean(diff * diff))), (a, b), bw, "mse")


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient uses sign(0) = 0."""
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mae shape mismatch: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    a, b = pred, target

    def bw(g):
        s = np.sign(diff)
        a.accumulate_grad(g * s / n)
        b.accumulate_grad(g * -s / n)

    return Tensor._make(np.asarray(float(np.mean(np.abs(diff)))), (a, b), bw, "mae")


# -- optimizer -------------------------------------------------------------------


@dataclass
class OptimState:
    """SGD with momentum and decoupled-from-nothing classic weight decay.

    One velocity buffer per parameter, allocated on first step.
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocities: dict[int, np.ndarray] = field(default_factory=dict)


def sgd_step(params: list[Tensor], state: OptimState) -> None:
    """v <- momentum*v + grad + wd*param;  param <- param - lr*v."""
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient")
        v = state.velocities.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
            state.velocities[id(p)] = v
        v *= state.momentum
        v += p.grad
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data -= state.lr * v


def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None
