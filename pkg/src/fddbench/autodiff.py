"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run engine: every operation records its parents and a backward
closure, so each forward pass builds a fresh graph and ``backward`` walks it
in reverse topological order. Gradients are exact (no numerical tricks beyond
the usual stabilized softmax), which is what the gradient-based attacks and
the input-sensitivity defense rely on.

Everything is float64. Non-finite values are rejected when a tensor is built,
so a NaN loss surfaces at the op that produced it instead of three layers up.

Thread-safety: a graph is single-threaded during construction and backward.
Tensors with ``requires_grad=False`` have read-only buffers and can be shared
freely; parallel evaluation should build independent graphs per thread over a
shared parameter store.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12  # probabilities are clamped here before any log


class Tensor:
    """An n-d float64 array, optionally tracked in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, allow_nonfinite: bool = False):
        arr = np.array(data, dtype=np.float64)  # copy: the tensor owns its buffer
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise ValueError("tensor construction rejected non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]] | None = None
        self._op: str | None = None
        if not self.requires_grad:
            self.data.setflags(write=False)

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], list[tuple["Tensor", np.ndarray]]]) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise ValueError(f"op '{op}' produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            # constant subgraph: drop references so inference doesn't hold graphs
            out.requires_grad = False
            out._parents = ()
            out._backward = None
            out.data.setflags(write=False)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    # small operator sugar used by the model code; shapes must already agree
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return slice_(self, key)

    def __repr__(self) -> str:
        tag = self._op or ("param" if self.requires_grad else "const")
        return f"Tensor(shape={self.data.shape}, op={tag})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns a map of every reachable ``requires_grad`` leaf to its gradient
    (also stored on ``tensor.grad``). Repeated calls on the same graph reset
    and recompute, so they are idempotent.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, contrib in node._backward(node.grad):
            if not parent.requires_grad:
                continue
            parent.grad = contrib if parent.grad is None else parent.grad + contrib
    return {n: n.grad for n in order if n._backward is None and n.grad is not None}


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product [p,q] @ [q,r] -> [p,r]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes disagree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return Tensor._from_op(out, "matmul", (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shapes disagree: {a.data.shape} vs {b.data.shape}")
    return Tensor._from_op(a.data + b.data, "add", (a, b),
                           lambda g: [(a, g), (b, g)])


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Broadcast a 1-d bias along one axis of x (the only broadcast we allow)."""
    if bias.data.ndim != 1:
        raise ValueError(f"bias must be 1-d, got shape {bias.data.shape}")
    ax = axis % x.data.ndim
    if x.data.shape[ax] != bias.data.shape[0]:
        raise ValueError(f"bias length {bias.data.shape[0]} does not match axis {axis} of {x.data.shape}")
    shape = [1] * x.data.ndim
    shape[ax] = bias.data.shape[0]
    out = x.data + bias.data.reshape(shape)
    other_axes = tuple(i for i in range(x.data.ndim) if i != ax)

    def bwd(g):
        return [(x, g), (bias, g.sum(axis=other_axes))]

    return Tensor._from_op(out, "add_bias", (x, bias), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub shapes disagree: {a.data.shape} vs {b.data.shape}")
    return Tensor._from_op(a.data - b.data, "sub", (a, b),
                           lambda g: [(a, g), (b, -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shapes disagree: {a.data.shape} vs {b.data.shape}")
    return Tensor._from_op(a.data * b.data, "mul", (a, b),
                           lambda g: [(a, g * b.data), (b, g * a.data)])


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(x.data * c, "scale", (x,), lambda g: [(x, g * c)])


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0
    return Tensor._from_op(out, "relu", (x,), lambda g: [(x, g * mask)])


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return [(x, g * out * (1.0 - out))]

    return Tensor._from_op(out, "sigmoid", (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, "tanh", (x,), lambda g: [(x, g * (1.0 - out * out))])


def abs_(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)  # sign(0) == 0, consistent with the attack convention
    return Tensor._from_op(np.abs(x.data), "abs", (x,), lambda g: [(x, g * sgn)])


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    if not lo <= hi:
        raise ValueError(f"clip bounds reversed: lo={lo} hi={hi}")
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(out, "clip", (x,), lambda g: [(x, g * mask)])


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    src = x.data.shape
    return Tensor._from_op(out, "reshape", (x,), lambda g: [(x, g.reshape(src))])


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._from_op(out, "transpose", (x,),
                           lambda g: [(x, np.ascontiguousarray(g.transpose(inv)))])


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat of no tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        contribs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            contribs.append((p, np.ascontiguousarray(g[tuple(idx)])))
        return contribs

    return Tensor._from_op(out, "concat", tuple(parts), bwd)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing as a graph op."""
    out = np.ascontiguousarray(x.data[key])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return [(x, full)]

    return Tensor._from_op(out, "slice", (x,), bwd)


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one column per row of a 2-d tensor: out[i] = x[i, idx[i]]."""
    if x.data.ndim != 2:
        raise ValueError(f"take_per_row expects 2-d input, got {x.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out = x.data[rows, idx].copy()

    def bwd(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        return [(x, full)]

    return Tensor._from_op(out, "take_per_row", (x,), bwd)


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())
    return Tensor._from_op(out, "reduce_sum", (x,),
                           lambda g: [(x, np.full(x.data.shape, float(g)))])


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean())
    return Tensor._from_op(out, "reduce_mean", (x,),
                           lambda g: [(x, np.full(x.data.shape, float(g) / n))])


def softmax_t(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature softmax over the last axis, stabilized by max subtraction.

    Rows sum to 1 to within 1e-12. Large temperatures flatten the output
    toward uniform; as the temperature approaches 0 the output approaches a
    one-hot at the argmax.
    """
    t = float(temperature)
    if not t > 0.0:
        raise ValueError(f"softmax temperature must be positive, got {t}")
    z = logits.data / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return [(logits, out * (g - inner) / t)]

    return Tensor._from_op(out, "softmax_t", (logits,), bwd)


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Negative log likelihood of the target under a probability vector.

    ``probs`` is [m] or [batch, m] and must sum to 1 (within 1e-6) per row;
    probabilities are clamped to 1e-12 before the log. ``target`` is a class
    index, an index array for batched input, or a distribution of the same
    shape as ``probs`` (soft labels), in which case the loss is
    -sum(q * log p) per row.
    """
    p = probs.data
    sums = p.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= 1e-6):
        raise ValueError("cross_entropy expects probabilities summing to 1 per row")
    clamped = np.maximum(p, PROB_FLOOR)
    live = p >= PROB_FLOOR  # no gradient through the clamp floor

    if isinstance(target, (int, np.integer)):
        if p.ndim != 1:
            raise ValueError("scalar target requires a 1-d probability vector")
        t = int(target)
        if not 0 <= t < p.shape[0]:
            raise IndexError(f"target {t} out of range for {p.shape[0]} classes")
        out = np.asarray(-np.log(clamped[t]))

        def bwd(g):
            full = np.zeros_like(p)
            if live[t]:
                full[t] = -float(g) / clamped[t]
            return [(probs, full)]

        return Tensor._from_op(out, "cross_entropy", (probs,), bwd)

    tgt = np.asarray(target)
    if tgt.shape == p.shape and np.issubdtype(tgt.dtype, np.floating):
        q = tgt
        out = np.asarray(-(q * np.log(clamped)).sum(axis=-1))

        def bwd(g):
            gg = np.asarray(g)[..., None] if p.ndim == 2 else np.asarray(g)
            return [(probs, -q / clamped * live * gg)]

        return Tensor._from_op(out, "cross_entropy", (probs,), bwd)

    if p.ndim != 2:
        raise ValueError("index-array targets require [batch, m] probabilities")
    idx = tgt.astype(np.int64)
    if idx.shape != (p.shape[0],):
        raise ValueError(f"target shape {idx.shape} does not match batch {p.shape[0]}")
    if idx.min() < 0 or idx.max() >= p.shape[1]:
        raise IndexError(f"target out of range for {p.shape[1]} classes")
    rows = np.arange(p.shape[0])
    out = -np.log(clamped[rows, idx])

    def bwd(g):
        full = np.zeros_like(p)
        full[rows, idx] = -np.asarray(g) / clamped[rows, idx] * live[rows, idx]
        return [(probs, full)]

    return Tensor._from_op(out, "cross_entropy", (probs,), bwd)


def conv1d_causal(x: Tensor, kernels: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated 1-d convolution.

    ``x`` is [channels, time] or [batch, channels, time]; ``kernels`` is
    [out, in, width]. Tap i of the kernel reads i*dilation steps into the
    past, with left zero padding of (width-1)*dilation, so output at time t
    never depends on inputs after t.
    """
    if int(dilation) < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    dilation = int(dilation)
    if kernels.data.ndim != 3:
        raise ValueError(f"kernels must be [out, in, width], got {kernels.data.shape}")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ValueError(f"input must be [channels, time] or [batch, channels, time], got {x.data.shape}")
    n_out, n_in, width = kernels.data.shape
    if xd.shape[1] != n_in:
        raise ValueError(f"channel mismatch: input has {xd.shape[1]} channels, kernels expect {n_in}")
    t_len = xd.shape[2]
    pad = (width - 1) * dilation
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, 0)))
    out = np.zeros((xd.shape[0], n_out, t_len))
    for i in range(width):
        off = (width - 1 - i) * dilation
        out += np.einsum("oc,bct->bot", kernels.data[:, :, i], xp[:, :, off:off + t_len])

    def bwd(g):
        gb = g[None] if squeeze else g
        gk = np.zeros_like(kernels.data)
        gxp = np.zeros_like(xp)
        for i in range(width):
            off = (width - 1 - i) * dilation
            seg = xp[:, :, off:off + t_len]
            gk[:, :, i] = np.einsum("bot,bct->oc", gb, seg)
            gxp[:, :, off:off + t_len] += np.einsum("oc,bot->bct", kernels.data[:, :, i], gb)
        gx = gxp[:, :, pad:]
        return [(x, gx[0] if squeeze else gx), (kernels, gk)]

    res = out[0] if squeeze else out
    return Tensor._from_op(res, "conv1d_causal", (x, kernels), bwd)


def straight_through(x: Tensor, transform: Callable[[np.ndarray], np.ndarray], name: str = "straight_through") -> Tensor:
    """Apply a non-differentiable, shape-preserving transform with identity gradient."""
    out = np.asarray(transform(np.asarray(x.data)), dtype=np.float64)
    if out.shape != x.data.shape:
        raise ValueError(f"straight-through transform changed shape {x.data.shape} -> {out.shape}")
    return Tensor._from_op(out, name, (x,), lambda g: [(x, g)])


def finite_diff_check(fn: Callable[[Tensor], Tensor], point: Tensor, step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - fd| / (|analytic| + 1e-8);
    the maximum over coordinates is returned, never masked, so a genuinely
    non-differentiable point reports a large value.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = Tensor(point.data, requires_grad=True)
    loss = fn(x)
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    base = np.array(point.data)
    fd = np.zeros_like(base)
    flat = base.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(Tensor(base)).data)
        flat[i] = orig - step
        lo = float(fn(Tensor(base)).data)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * step)

    rel = np.abs(analytic - fd) / (np.abs(analytic) + 1e-8)
    return float(rel.max())
