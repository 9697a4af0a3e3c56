"""2D temporal maps of candidate moments.

Position ``(i, j)`` of an ``N x N`` map stands for the moment spanning clips
``i`` through ``j``; only the upper triangle ``i <= j`` is valid.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .autodiff import Tensor, constant, make_op, ConfigurationError

__all__ = [
    "InsufficientFramesError",
    "InvalidMomentError",
    "valid_mask",
    "moment_count",
    "pool_clips",
    "build_map_pool",
    "build_map_stackconv",
    "moment_to_span",
]


class InsufficientFramesError(ValueError):
    pass


class InvalidMomentError(ValueError):
    pass


@lru_cache(maxsize=None)
def _mask(n: int) -> np.ndarray:
    m = np.triu(np.ones((n, n), dtype=bool))
    m.setflags(write=False)
    return m


def valid_mask(n: int) -> np.ndarray:
    """Read-only boolean ``n x n`` mask with ``True`` where ``i <= j``."""
    return _mask(int(n))


def moment_count(n: int) -> int:
    return n * (n + 1) // 2


def pool_clips(frames: np.ndarray, n: int) -> np.ndarray:
    """Max-pool ``T`` frame features into ``n`` contiguous clips.

    Groups have size ``T // n``; the first ``T % n`` groups take one extra
    frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    T = frames.shape[0]
    if n < 1:
        raise ValueError("clip count must be positive")
    if T < n:
        raise InsufficientFramesError(f"need at least {n} frames, got {T}")
    base, extra = divmod(T, n)
    sizes = [base + 1 if c < extra else base for c in range(n)]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return np.stack([frames[bounds[c]:bounds[c + 1]].max(axis=0) for c in range(n)])


def build_map_pool(clips: np.ndarray) -> np.ndarray:
    """``F[i, j] = max(f_i, ..., f_j)`` elementwise; zeros below the diagonal."""
    clips = np.asarray(clips, dtype=np.float64)
    n, d = clips.shape
    out = np.zeros((n, n, d))
    # offset-by-offset: max over [i, i+k] = max(max over [i, i+k-1], f_{i+k})
    cur = clips.copy()
    idx = np.arange(n)
    out[idx, idx] = cur
    for k in range(1, n):
        cur = np.maximum(cur[:-1], clips[k:])
        out[idx[:n - k], idx[k:]] = cur
    return out


_ACT = {
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
}


def build_map_stackconv(clips, kernel: Tensor, bias: Tensor | None = None,
                        act: str = "relu") -> Tensor:
    """Moment features grown offset by offset with one shared 2-tap kernel.

    The diagonal holds the clip features.  Each further anti-diagonal is
    ``act(W0 @ F[i, j-1] + W1 @ F[i+1, j] + b)``, so every moment sees the
    two moments one clip shorter.  ``kernel`` is ``[2, D, D]``.
    """
    clips = constant(clips)
    kernel = constant(kernel)
    if act not in _ACT:
        raise ConfigurationError(f"unknown map activation {act!r}")
    fwd, dact = _ACT[act]
    cv = clips.values
    n, d = cv.shape
    if kernel.shape != (2, d, d):
        raise ConfigurationError(f"stackconv kernel must be (2, {d}, {d}), got {kernel.shape}")
    W0, W1 = kernel.values[0], kernel.values[1]
    bv = np.zeros(d) if bias is None else constant(bias).values

    diags = [cv]
    pre = [None]
    for k in range(1, n):
        prev = diags[-1]
        z = prev[:-1] @ W0.T + prev[1:] @ W1.T + bv
        pre.append(z)
        diags.append(fwd(z))
    out = np.zeros((n, n, d))
    idx = np.arange(n)
    for k, a in enumerate(diags):
        out[idx[:n - k], idx[k:]] = a

    def bw(g):
        gdiag = [g[idx[:n - k], idx[k:]].copy() for k in range(n)]
        gW0 = np.zeros_like(W0)
        gW1 = np.zeros_like(W1)
        gb = np.zeros(d)
        for k in range(n - 1, 0, -1):
            gz = gdiag[k] * dact(pre[k], diags[k])
            prev = diags[k - 1]
            gW0 += gz.T @ prev[:-1]
            gW1 += gz.T @ prev[1:]
            gb += gz.sum(axis=0)
            gdiag[k - 1][:-1] += gz @ W0
            gdiag[k - 1][1:] += gz @ W1
        gk = np.stack([gW0, gW1])
        if bias is None:
            return gdiag[0], gk
        return gdiag[0], gk, gb

    parents = (clips, kernel) if bias is None else (clips, kernel, constant(bias))
    return make_op(out, parents, bw, "stackconv_map")


def moment_to_span(i: int, j: int, duration: float, n: int) -> tuple[float, float]:
    """Seconds ``[s, e]`` covered by moment ``(i, j)`` of an ``n``-clip video."""
    if not (0 <= i <= j <= n - 1):
        raise InvalidMomentError(f"invalid moment ({i}, {j}) for {n} clips")
    step = duration / n
    return i * step, (j + 1) * step
