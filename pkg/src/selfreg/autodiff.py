"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

The engine provides exactly the primitives the regularized training graph
needs: matrix products, bias adds, ReLU, batch normalization, softmax
cross-entropy, row gathering (positive-pair selection), constant scaling,
and the mean squared row distance. Operations executed inside a ``with
Tape()`` block are recorded; ``backward`` replays the records in reverse
to populate ``.grad`` on every tensor that requires gradients. Outside a
tape, the same functions run as plain numpy forward passes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "sum_all",
    "gather_rows",
    "batch_norm",
    "softmax_cross_entropy",
    "squared_l2_rowmean",
    "backward",
    "grad_check",
]


class Tensor:
    """Dense float64 array with optional participation in gradient recording.

    ``data`` is always a float64 ndarray; ``grad`` starts as None and is
    populated (and accumulated across multiple uses) by ``backward``.
    Tensors are treated as immutable after creation except for ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _OpRecord:
    """One executed primitive: inputs, output, and the local backward rule."""

    __slots__ = ("seq", "op", "inputs", "output", "backward_fn")

    def __init__(self, seq, op, inputs, output, backward_fn):
        self.seq = seq
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed primitives, usable as a context manager.

    Creation order is always a valid topological order (an op's inputs
    exist before its output), and ``backward`` re-sorts by sequence number,
    so a permuted-but-valid record list yields identical gradients.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_OpRecord] = []
        self._next_seq = 0

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], tuple]) -> None:
        self.records.append(_OpRecord(self._next_seq, op, tuple(inputs), output, backward_fn))
        self._next_seq += 1

    def __len__(self) -> int:
        return len(self.records)


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = Tape.active()
    if tape is not None and requires:
        tape.record(op, inputs, out, backward_fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``a`` [m,k] and ``b`` [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _apply("matmul", (a, b), ad @ bd, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports adding a 1-D bias to each row of a 2-D tensor."""
    if a.shape == b.shape:
        def bwd(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        def bwd(g):
            return g, g.sum(axis=0)
    else:
        raise ValueError(f"add shapes incompatible: {a.shape} + {b.shape}")
    return _apply("add", (a, b), a.data + b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _apply("mul", (a, b), ad * bd, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant; the constant is not differentiated."""
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _apply("scale", (x,), x.data * c, bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x). Subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _apply("relu", (x,), np.where(mask, x.data, 0.0), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = x.shape

    def bwd(g):
        return (np.full(shape, float(g)),)

    return _apply("sum", (x,), np.asarray(x.data.sum()), bwd)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows of a 2-D tensor by index; backward scatter-adds."""
    idx = np.asarray(index, dtype=np.intp)
    if x.data.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-D tensor, got {x.shape}")
    if idx.ndim != 1:
        raise ValueError("gather_rows index must be 1-D")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows index out of range for {n} rows")

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _apply("gather_rows", (x,), x.data[idx], bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-feature standardization with batch statistics, then affine scale/shift.

    Training-mode only: statistics always come from the current batch, so
    at least two rows are required.
    """
    if x.data.ndim != 2:
        raise ValueError(f"batch_norm expects a 2-D input, got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"batch_norm needs a batch of at least 2 rows, got {n}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"batch_norm affine parameters must have shape ({d},)")
    mean = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data
    gd = gamma.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gd
        dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    return _apply("batch_norm", (x, gamma, beta), out, bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    ``labels`` is an integer array of class indices in [0, num_classes).
    """
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects 2-D logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if y.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = -logp[np.arange(n), y].mean()
    probs = np.exp(logp)

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1.0
        return (float(g) * d / n,)

    return _apply("softmax_cross_entropy", (logits,), np.asarray(loss), bwd)


def squared_l2_rowmean(a: Tensor, b: Tensor) -> Tensor:
    """(1/N) * sum_i ||a_i - b_i||^2 over the rows of two [N,d] tensors."""
    if a.shape != b.shape:
        raise ValueError(f"squared_l2_rowmean shapes differ: {a.shape} vs {b.shape}")
    if a.data.ndim != 2:
        raise ValueError(f"squared_l2_rowmean expects 2-D tensors, got {a.shape}")
    n = a.shape[0]
    diff = a.data - b.data

    def bwd(g):
        d = (2.0 / n) * float(g) * diff
        return d, -d

    return _apply("squared_l2_rowmean", (a, b), np.asarray((diff * diff).sum() / n), bwd)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    Records are processed in reverse sequence order, which is a reverse
    topological order regardless of how ``tape.records`` happens to be
    arranged. Gradients accumulate, so a tensor used along several paths
    receives the sum of all path contributions.
    """
    if loss.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    _accumulate(loss, np.asarray(1.0))
    for rec in sorted(tape.records, key=lambda r: r.seq, reverse=True):
        g = rec.output.grad
        if g is None:
            continue  # not on a path from the loss
        grads = rec.backward_fn(g)
        for inp, gi in zip(rec.inputs, grads):
            if inp.requires_grad:
                _accumulate(inp, gi)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
               rng: Optional[np.random.Generator] = None,
               max_coords: Optional[int] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``x`` (it may
    close over other tensors). The error at each checked coordinate is
    |analytic - numeric| / max(1, |analytic|). When ``max_coords`` is set,
    a random subset of coordinates is checked instead of all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.grad = None
    with Tape() as tape:
        out = f(x)
    backward(out, tape)
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
