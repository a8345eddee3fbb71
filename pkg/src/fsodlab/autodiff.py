"""Minimal reverse-mode automatic differentiation engine and SGD optimizer.

Tensors wrap numpy arrays and record the operations that produced them;
``backward`` on a scalar loss fills ``grad`` on every reachable tensor that
requires it. Training runs in float32; tests re-run the same graphs in
float64 against a central finite-difference oracle.

No broadcasting, no GPU, no optimizer besides SGD with momentum. The op set
is exactly what the toy two-stage detector needs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

# When True, every forward op asserts its output is finite (slow; used by
# tests, not by training loops).
DEBUG_CHECKS = False

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise ContractError(f"{op}: non-finite values in output")


class Tensor:
    """N-dimensional value, optionally a node in a reverse-mode graph.

    ``data`` is a row-major numpy array; ``grad`` is ``None`` until a
    backward pass (or explicit accumulation) fills it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; shapes must agree exactly (no broadcasting)
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)


def _node(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def backward(loss: Tensor) -> None:
    """Fill ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out. ``loss`` must be a
    scalar (a single-element tensor).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")

    # iterative topological order over the subgraph that requires grad
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._grad_fn is None or node.grad is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is not None and parent.requires_grad:
                parent.accumulate_grad(g)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,), "scale")


def tsum(a: Tensor) -> Tensor:
    return _node(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.full_like(a.data, g.reshape(-1)[0]),),
        "sum",
    )


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full_like(a.data, g.reshape(-1)[0] / n),),
        "mean",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _node(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "permute",
    )


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack: empty input")
    shape0 = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape0:
            raise ShapeError(f"stack: shapes {shape0} and {t.shape} differ")
    data = np.stack([t.data for t in tensors])

    def grad_fn(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _node(data, tuple(tensors), grad_fn, "stack")


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the first axis; duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), grad_fn, "take")


def select_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """From a [N, G, B] tensor pick block idx[i] of row i, giving [N, B]."""
    if a.data.ndim != 3:
        raise ShapeError(f"select_per_row: expected 3-d input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.shape != (n,):
        raise ShapeError(f"select_per_row: index shape {idx.shape} != ({n},)")
    rows = np.arange(n)

    def grad_fn(g):
        out = np.zeros_like(a.data)
        out[rows, idx] = g
        return (out,)

    return _node(a.data[rows, idx], (a,), grad_fn, "select_per_row")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d @ 2-d or 2-d @ 1-d matrix product."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape} differ")

    if b.data.ndim == 1:
        def grad_fn(g):
            return (np.outer(g, b.data), a.data.T @ g)
    else:
        def grad_fn(g):
            return (g @ b.data.T, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), grad_fn, "matmul")


# ---------------------------------------------------------------------------
# neural ops
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    return _node(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, ho, wo),
        strides=(sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows.reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of a [C_in,H,W] input with [C_out,C_in,kH,kW] filters."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be [C,H,W], got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [C_out,C_in,kH,kW], got {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise ShapeError(
            f"conv2d: input channels {x.shape[0]} != weight C_in {c_in}"
        )
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if stride < 1 or pad < 0 or kh < 1 or kw < 1:
        raise ContractError("conv2d: stride >= 1, pad >= 0, kernel >= 1 required")
    _, h, w = x.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({h},{w}) + 2*{pad}")

    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(c_out, c_in * kh * kw)
    out = (w2 @ cols + bias.data[:, None]).reshape(c_out, ho, wo)

    def grad_fn(g):
        g2 = g.reshape(c_out, ho * wo)
        dw = (g2 @ cols.T).reshape(weight.shape)
        db = g2.sum(axis=1)
        dcols = (w2.T @ g2).reshape(c_in, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, ki : ki + ho * stride : stride, kj : kj + wo * stride : stride] += dcols[:, ki, kj]
        dx = dxp[:, pad : pad + h, pad : pad + w] if pad else dxp
        return (dx, dw, db)

    return _node(out, (x, weight, bias), grad_fn, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: out = x @ weight.T + bias for [D] or batched [N,D] input."""
    if weight.data.ndim != 2:
        raise ShapeError(f"linear: weight must be [M,D], got {weight.shape}")
    m, d = weight.shape
    if bias.shape != (m,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({m},)")
    if x.data.ndim == 1:
        if x.shape[0] != d:
            raise ShapeError(f"linear: input dim {x.shape[0]} != weight D {d}")
        out = weight.data @ x.data + bias.data

        def grad_fn(g):
            return (weight.data.T @ g, np.outer(g, x.data), g)

    elif x.data.ndim == 2:
        if x.shape[1] != d:
            raise ShapeError(f"linear: input dim {x.shape[1]} != weight D {d}")
        out = x.data @ weight.data.T + bias.data

        def grad_fn(g):
            return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    else:
        raise ShapeError(f"linear: input must be 1-d or 2-d, got {x.shape}")
    return _node(out, (x, weight, bias), grad_fn, "linear")


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; gradient goes to the first
    (row-major) argmax of each window."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d: input must be [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: window {k} does not divide ({h},{w})")
    ho, wo = h // k, w // k
    # windows laid out row-major so argmax picks the first max in each window
    win = (
        x.data.reshape(c, ho, k, wo, k)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, ho, wo, k * k)
    )
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]

    def grad_fn(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=3)
        dx = (
            dwin.reshape(c, ho, wo, k, k)
            .transpose(0, 1, 3, 2, 4)
            .reshape(c, h, w)
        )
        return (dx,)

    return _node(out, (x,), grad_fn, "maxpool2d")


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit L2 norm.

    out = x / max(||x||, eps); the eps floor makes the zero vector map to
    zero instead of dividing by zero.
    """
    if eps <= 0:
        raise ContractError("l2_normalize: eps must be > 0")
    if x.data.ndim == 1:
        norms = np.linalg.norm(x.data, keepdims=True)
    elif x.data.ndim == 2:
        norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    else:
        raise ShapeError(f"l2_normalize: input must be 1-d or 2-d, got {x.shape}")
    denom = np.maximum(norms, eps)
    out = x.data / denom

    def grad_fn(g):
        # rows above the floor: d(x/n) = (g - y (y.g)) / n; floored rows are
        # a plain scaling by 1/eps
        above = norms >= eps
        if x.data.ndim == 1:
            if above[0]:
                return ((g - out * float(out @ g)) / denom,)
            return (g / denom,)
        dots = np.sum(out * g, axis=1, keepdims=True)
        dx = np.where(above, (g - out * dots) / denom, g / denom)
        return (dx,)

    return _node(out, (x,), grad_fn, "l2_normalize")


def softmax_ce_loss(logits: Tensor, label) -> Tensor:
    """Cross-entropy of softmax(logits) against an integer label.

    1-d logits take a single label; 2-d [N,C] logits take a length-N label
    sequence and return the mean loss. Computed with max subtraction.
    """
    if logits.data.ndim == 1:
        labels = np.asarray([label], dtype=np.int64)
        z = logits.data[None, :]
    elif logits.data.ndim == 2:
        labels = np.asarray(label, dtype=np.int64)
        if labels.shape != (logits.shape[0],):
            raise ShapeError(
                f"softmax_ce_loss: {labels.shape[0] if labels.ndim else 1} labels for {logits.shape[0]} rows"
            )
        z = logits.data
    else:
        raise ShapeError(f"softmax_ce_loss: logits must be 1-d or 2-d, got {logits.shape}")
    n, c = z.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"softmax_ce_loss: label out of range [0,{c})")

    zs = z - z.max(axis=1, keepdims=True)
    log_probs = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    def grad_fn(g):
        softmax = np.exp(log_probs)
        softmax[np.arange(n), labels] -= 1.0
        dz = softmax * (g.reshape(-1)[0] / n)
        return (dz if logits.data.ndim == 2 else dz[0],)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn, "softmax_ce_loss")


def smooth_l1_loss(pred: Tensor, target: np.ndarray | Tensor, beta: float = 1.0) -> Tensor:
    """Huber-style box regression loss, mean over elements."""
    if beta <= 0:
        raise ContractError("smooth_l1_loss: beta must be > 0")
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != tgt.shape:
        raise ShapeError(f"smooth_l1_loss: shapes {pred.shape} and {tgt.shape} differ")
    d = pred.data - tgt
    ad = np.abs(d)
    quad = ad < beta
    vals = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = max(d.size, 1)

    def grad_fn(g):
        dd = np.where(quad, d / beta, np.sign(d))
        return (dd * (g.reshape(-1)[0] / n),)

    return _node(np.asarray(vals.mean() if d.size else 0.0, dtype=pred.dtype), (pred,), grad_fn, "smooth_l1_loss")


def sigmoid_bce_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy on logits, mean over elements; numerically safe."""
    t = np.asarray(targets, dtype=logits.dtype)
    if logits.shape != t.shape:
        raise ShapeError(f"sigmoid_bce_loss: shapes {logits.shape} and {t.shape} differ")
    z = logits.data
    # log(1+exp(-|z|)) + max(z,0) - z*t
    vals = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0) - z * t
    n = max(z.size, 1)

    def grad_fn(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        return ((sig - t) * (g.reshape(-1)[0] / n),)

    return _node(np.asarray(vals.mean() if z.size else 0.0, dtype=logits.dtype), (logits,), grad_fn, "sigmoid_bce_loss")


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    learning_rate: float = 0.0025
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("OptimizerConfig: learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ContractError("OptimizerConfig: momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("OptimizerConfig: weight_decay must be >= 0")


@dataclass
class ParamEntry:
    tensor: Tensor
    trainable: bool = True
    velocity: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.velocity is None:
            self.velocity = np.zeros_like(self.tensor.data)


class ParameterRegistry:
    """Ordered map from hierarchical names to trainable parameters.

    Names look like ``backbone.conv1.weight``; the freeze policy operates
    on dotted prefixes of these names.
    """

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def register(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ContractError(f"ParameterRegistry: duplicate name {name!r}")
        tensor.requires_grad = True
        self._entries[name] = ParamEntry(tensor=tensor, trainable=trainable)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterable[tuple[str, ParamEntry]]:
        return self._entries.items()

    def top_level_prefixes(self) -> list[str]:
        seen: dict[str, None] = {}
        for name in self._entries:
            seen.setdefault(name.split(".", 1)[0])
        return list(seen)

    def zero_grads(self) -> None:
        for entry in self._entries.values():
            entry.tensor.zero_grad()

    def checksum(self) -> str:
        """SHA-256 over names, shapes, and little-endian float32 bytes."""
        h = hashlib.sha256()
        for name, entry in self._entries.items():
            h.update(name.encode("utf-8"))
            h.update(str(entry.tensor.shape).encode("ascii"))
            h.update(np.ascontiguousarray(entry.tensor.data, dtype="<f4").tobytes())
        return h.hexdigest()


def sgd_momentum_step(reg: ParameterRegistry, cfg: OptimizerConfig) -> None:
    """One SGD update: g' = grad + wd*p; v = mu*v + g'; p -= lr*v.

    Non-trainable entries and their velocities are untouched. All grads
    (trainable or not) are cleared afterwards.
    """
    for name, entry in reg.items():
        if not entry.trainable:
            continue
        t = entry.tensor
        if t.grad is None:
            raise ContractError(f"sgd_momentum_step: trainable parameter {name!r} has no grad")
        g = t.grad + cfg.weight_decay * t.data
        entry.velocity *= cfg.momentum
        entry.velocity += g
        t.data -= cfg.learning_rate * entry.velocity
    reg.zero_grads()


def uniform_fan_in(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) float32 init."""
    bound = float(np.sqrt(1.0 / max(fan_in, 1)))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(np.float32)
