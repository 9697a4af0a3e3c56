"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure computing the parents' gradients from its own.  Nodes receive a
monotonically increasing id at creation, so sorting the reachable graph by
id gives a valid topological order; :class:`Tape` is that ordering.

Broadcasting is deliberately restricted to scalar-with-tensor.  Anything
else has to go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "ConfigurationError",
    "NumericError",
    "no_grad",
    "grad_enabled",
    "make_op",
    "constant",
    "parameter",
    "affine",
    "hadamard",
    "add",
    "sub",
    "scale",
    "add_scalar",
    "neg",
    "tensor_sum",
    "tensor_mean",
    "log",
    "clamp",
    "sigmoid",
    "tanh",
    "relu",
    "identity",
    "activation",
    "reshape",
    "index",
    "masked_select",
    "concat",
    "stack",
    "broadcast_to",
    "conv2d_masked",
    "max_reduce",
    "backward",
    "zero_grad",
    "grad_check",
    "adam_step",
    "Adam",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An operation was configured with invalid hyperparameters."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a forward or backward pass."""

    def __init__(self, op: str, phase: str = "forward"):
        super().__init__(f"non-finite value in {phase} of op '{op}'")
        self.op = op
        self.phase = phase


_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that can take part in differentiation.

    ``values`` holds the data, ``grad`` the accumulated gradient of
    trainable leaves.  Non-leaf tensors carry ``op`` and ``parents``.
    """

    __slots__ = ("values", "grad", "trainable", "name", "op", "parents",
                 "_backward", "_needs_grad", "_id")

    def __init__(self, values, trainable: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.trainable = trainable
        self.grad = np.zeros_like(self.values) if trainable else None
        self.name = name
        self.op = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._needs_grad = trainable
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = self.name or self.op or "leaf"
        return f"Tensor({tag}, shape={self.shape})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        if np.ndim(other) == 0:
            return scale(self, other)
        return hadamard(self, constant(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return index(self, key)


def constant(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, trainable=True, name=name)


def make_op(values: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable,
            op: str) -> Tensor:
    """Wrap ``values`` as the output of ``op``.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
    parent.  The node is only linked into the graph when recording is on
    and some parent needs a gradient.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise NumericError(op)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.trainable = False
    out.name = None
    out.op = op
    out._id = next(_ids)
    if grad_enabled() and any(p._needs_grad for p in parents):
        out.parents = tuple(parents)
        out._backward = backward_fn
        out._needs_grad = True
    else:
        out.parents = ()
        out._backward = None
        out._needs_grad = False
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise and linear ops
# --------------------------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ W.T + b`` over the last axis of ``x``."""
    x, W = constant(x), constant(W)
    if W.values.ndim != 2:
        raise DimensionError(f"affine: weight must be 2-D, got {W.shape}")
    dout, din = W.shape
    xv = x.values if x.values.ndim else x.values.reshape(1)
    if xv.shape[-1] != din:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {W.shape}")
    if b is not None:
        b = constant(b)
        if b.shape != (dout,):
            raise DimensionError(f"affine: bias {b.shape} incompatible with weight {W.shape}")
    y = xv @ W.values.T
    if b is not None:
        y = y + b.values

    def bw(g):
        gx = (g @ W.values).reshape(x.shape)
        x2 = xv.reshape(-1, din)
        g2 = g.reshape(-1, dout)
        gW = g2.T @ x2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return make_op(y, parents, bw, "affine")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _same_shape(a, b, "hadamard")
    return make_op(a.values * b.values, (a, b),
                   lambda g: (g * b.values, g * a.values), "hadamard")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _same_shape(a, b, "add")
    return make_op(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _same_shape(a, b, "sub")
    return make_op(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(x.values * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return make_op(x.values + float(c), (x,), lambda g: (g,), "add_scalar")


def neg(x: Tensor) -> Tensor:
    return make_op(-x.values, (x,), lambda g: (-g,), "neg")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.asarray(x.values.sum()), (x,),
                   lambda g: (np.full(shape, float(g)),), "sum")


def tensor_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_op(np.asarray(x.values.mean()), (x,),
                   lambda g: (np.full(shape, float(g) / n),), "mean")


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise NumericError("log")
    return make_op(np.log(x.values), (x,), lambda g: (g / x.values,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; gradient is zero where clipping was active."""
    inside = (x.values >= lo) & (x.values <= hi)
    return make_op(np.clip(x.values, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)
    return make_op(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x: Tensor) -> Tensor:
    on = x.values > 0
    return make_op(x.values * on, (x,), lambda g: (g * on,), "relu")


def identity(x: Tensor) -> Tensor:
    return x


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "identity": identity}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown activation {name!r}; expected one of {sorted(_ACTIVATIONS)}") from None


# --------------------------------------------------------------------------
# structural ops
# --------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def index(x: Tensor, key) -> Tensor:
    """Basic numpy indexing (ints and slices)."""
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return make_op(x.values[key].copy(), (x,), bw, "index")


def masked_select(x: Tensor, mask: np.ndarray) -> Tensor:
    """Flat vector of entries where ``mask`` is true (row-major order)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"masked_select: mask {mask.shape} vs tensor {x.shape}")
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[mask] = g
        return (gx,)

    return make_op(x.values[mask], (x,), bw, "masked_select")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [constant(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([x.values for x in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [constant(x) for x in xs]
    for x in xs[1:]:
        _same_shape(xs[0], x, "stack")

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_op(np.stack([x.values for x in xs], axis=axis), xs, bw, "stack")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient is summed back."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.values, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {shape}") from None
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src) if axes else g,)

    return make_op(out, (x,), bw, "broadcast_to")


# --------------------------------------------------------------------------
# masked convolution over 2D moment maps
# --------------------------------------------------------------------------

def conv2d_masked(x: Tensor, kernel: Tensor, mask: np.ndarray,
                  bias: Tensor | None = None) -> Tensor:
    """Same-size 2D convolution over an ``[B?, N, N, D]`` map.

    Invalid positions are zeroed in the input before convolving and in the
    output afterwards.  ``kernel`` has shape ``[K, K, D, D_out]`` with odd K.
    """
    x, kernel = constant(x), constant(kernel)
    kv = kernel.values
    if kv.ndim != 4 or kv.shape[0] != kv.shape[1]:
        raise DimensionError(f"conv2d_masked: kernel must be [K, K, D, D'], got {kernel.shape}")
    K = kv.shape[0]
    if K % 2 == 0:
        raise ConfigurationError(f"conv2d_masked: kernel size must be odd, got {K}")
    squeeze = x.values.ndim == 3
    xv = x.values[None] if squeeze else x.values
    if xv.ndim != 4 or xv.shape[1] != xv.shape[2]:
        raise DimensionError(f"conv2d_masked: map must be [B?, N, N, D], got {x.shape}")
    B, N, _, D = xv.shape
    if kv.shape[2] != D:
        raise DimensionError(f"conv2d_masked: map {x.shape} incompatible with kernel {kernel.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (N, N):
        raise DimensionError(f"conv2d_masked: mask {mask.shape} vs map size {N}")
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (kv.shape[3],):
            raise DimensionError(f"conv2d_masked: bias {bias.shape} vs kernel {kernel.shape}")
    m = mask[None, :, :, None].astype(np.float64)
    pad = (K - 1) // 2
    xp = np.zeros((B, N + 2 * pad, N + 2 * pad, D))
    xp[:, pad:pad + N, pad:pad + N] = xv * m
    # im2col: [B, N, N, K, K, D] -> rows of length K*K*D
    win = np.lib.stride_tricks.sliding_window_view(xp, (K, K), axis=(1, 2))
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * N * N, K * K * D)
    wmat = kv.reshape(K * K * D, -1)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.values
    out = out.reshape(B, N, N, -1) * m

    def bw(g):
        g = (g[None] if squeeze else g) * m
        g2 = g.reshape(B * N * N, -1)
        gk = (cols.T @ g2).reshape(kv.shape)
        gcols = (g2 @ wmat.T).reshape(B, N, N, K, K, D)
        gxp = np.zeros_like(xp)
        for di in range(K):
            for dj in range(K):
                gxp[:, di:di + N, dj:dj + N] += gcols[:, :, :, di, dj]
        gx = gxp[:, pad:pad + N, pad:pad + N] * m
        if squeeze:
            gx = gx[0]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out[0] if squeeze else out, parents, bw, "conv2d_masked")


# --------------------------------------------------------------------------
# reductions with routing
# --------------------------------------------------------------------------

def max_reduce(x: Tensor, valid_mask: np.ndarray | None = None) -> tuple[Tensor, tuple[int, ...]]:
    """Maximum over valid positions and its index.

    Ties go to the lowest row-major index.  The backward pass routes the
    whole incoming gradient to that single position.
    """
    x = constant(x)
    if valid_mask is None:
        valid_mask = np.ones(x.shape, dtype=bool)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if valid_mask.shape != x.shape:
        raise DimensionError(f"max_reduce: mask {valid_mask.shape} vs tensor {x.shape}")
    if not valid_mask.any():
        raise ValueError("max_reduce: no valid position")
    masked = np.where(valid_mask, x.values, -np.inf)
    flat = int(np.argmax(masked))  # first occurrence on ties
    arg = np.unravel_index(flat, x.shape)
    arg = tuple(int(a) for a in arg)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[arg] = float(g)
        return (gx,)

    return make_op(np.asarray(x.values[arg]), (x,), bw, "max_reduce"), arg


# --------------------------------------------------------------------------
# backward sweep
# --------------------------------------------------------------------------

class Tape:
    """Reachable operation nodes of a loss, in topological (creation) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack_ = [out]
        while stack_:
            t = stack_.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack_.extend(t.parents)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [t.op for t in self.nodes]


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(param) into ``.grad`` of every trainable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p._needs_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(p.shape)
            if not np.isfinite(pg).all():
                raise NumericError(node.op, "backward")
            if p.trainable:
                p.grad += pg
            if p._backward is not None:
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg
    if loss.trainable:
        loss.grad += 1.0
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0


# --------------------------------------------------------------------------
# finite-difference gradient checking
# --------------------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference partials.

    ``fn`` is re-evaluated with each input entry nudged by ``±h``.  Relative
    error uses ``max(1, |analytic|, |numeric|)`` as denominator.  ``coords``
    limits each input to a random subset of entries.
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    zero_grad(inputs)
    saved = [(p.trainable, p._needs_grad, p.grad) for p in inputs]
    for p in inputs:
        p.trainable = True
        p._needs_grad = True
        if p.grad is None or p.grad.shape != p.shape:
            p.grad = np.zeros_like(p.values)
    try:
        backward(fn())
        worst = 0.0
        for p in inputs:
            analytic = p.grad.copy()
            flat = p.values.reshape(-1)
            idx = range(flat.size)
            if coords is not None and coords < flat.size:
                rng = rng or np.random.default_rng(0)
                idx = rng.choice(flat.size, size=coords, replace=False)
            for i in idx:
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + h
                    fp = fn().item()
                    flat[i] = orig - h
                    fm = fn().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                ana = analytic.reshape(-1)[i]
                err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                worst = max(worst, err)
        return worst
    finally:
        for p, (tr, ng, gr) in zip(inputs, saved):
            p.trainable, p._needs_grad = tr, ng
            if gr is None:
                p.grad = None


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict,
              lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, in place on ``params``.

    ``state`` holds ``t``, ``m`` and ``v``; pass ``{}`` for a fresh start.
    """
    if lr <= 0:
        raise ValueError("adam_step: learning rate must be positive")
    b1, b2 = betas
    if not state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step([p.values for p in self.params], [p.grad for p in self.params],
                  self.state, lr=self.lr, betas=self.betas, eps=self.eps)
