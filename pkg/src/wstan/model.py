"""Cross-modal matching classifier with a complementary prediction branch.

Sentence vectors and moment features are fused by a Hadamard product of
two linear projections, passed through a stack of masked 2D convolutions
(the temporal adjacent network) and read out by two independent sigmoid
heads: the matching head and the complementary branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Tensor
from .moment_map import build_map_pool, build_map_stackconv, valid_mask
from .text import EncoderParams, encode_sentence


@dataclass(frozen=True)
class ModelConfig:
    n_clips: int = 16
    d_s: int = 64
    d_v: int = 16
    d_f: int = 32
    tan_layers: int = 4
    tan_kernel: int = 3
    backend: str = "stackconv"
    activation: str = "relu"
    map_activation: str = "relu"
    encoder_layers: int = 1
    conv_bias: bool = True

    def validate(self) -> None:
        if self.tan_kernel % 2 == 0:
            raise ConfigurationError(f"tan_kernel must be odd, got {self.tan_kernel}")
        if self.tan_layers < 1:
            raise ConfigurationError("tan_layers must be >= 1")
        if self.backend not in ("stackconv", "pool"):
            raise ConfigurationError(f"unknown map backend {self.backend!r}")
        if self.d_s % 2:
            raise ConfigurationError("d_s must be even")
        ad.activation(self.activation)
        ad.activation(self.map_activation)


@dataclass
class FusionParams:
    w_s: Tensor  # [d_f, d_s]
    w_v: Tensor  # [d_f, d_v]


@dataclass
class TanParams:
    kernels: list[Tensor]  # each [K, K, d_f, d_f]
    biases: list[Tensor | None]
    activation: str = "relu"


@dataclass
class HeadParams:
    w: Tensor  # [1, d_f]
    b: Tensor  # [1]


def fuse(h: Tensor, fmap: Tensor, params: FusionParams) -> Tensor:
    """``(w_s h) * (w_v F_ij)`` at every valid ``(i, j)``.

    ``h`` is one sentence ``[d_s]`` or a stack ``[n_p, d_s]``; the result is
    ``[N, N, d_f]`` or ``[n_p, N, N, d_f]`` accordingly.
    """
    h, fmap = ad.constant(h), ad.constant(fmap)
    if h.shape[-1] != params.w_s.shape[1] or fmap.shape[-1] != params.w_v.shape[1]:
        raise ConfigurationError(
            f"fuse: sentence {h.shape} / map {fmap.shape} do not match "
            f"w_s {params.w_s.shape} / w_v {params.w_v.shape}")
    n = fmap.shape[0]
    d_f = params.w_s.shape[0]
    mask = valid_mask(n)
    u = ad.affine(h, params.w_s)
    v = ad.affine(fmap, params.w_v) * np.broadcast_to(mask[:, :, None], (n, n, d_f))
    if h.values.ndim == 1:
        return ad.hadamard(ad.broadcast_to(ad.reshape(u, (1, 1, d_f)), (n, n, d_f)), v)
    k = h.shape[0]
    uu = ad.broadcast_to(ad.reshape(u, (k, 1, 1, d_f)), (k, n, n, d_f))
    vv = ad.broadcast_to(ad.reshape(v, (1, n, n, d_f)), (k, n, n, d_f))
    return ad.hadamard(uu, vv)


def tan_forward(fused: Tensor, params: TanParams) -> Tensor:
    """Stack of masked same-size convolutions with the activation in between."""
    n = fused.shape[-2]
    mask = valid_mask(n)
    act = ad.activation(params.activation)
    x = fused
    last = len(params.kernels) - 1
    for li, (k, b) in enumerate(zip(params.kernels, params.biases)):
        x = ad.conv2d_masked(x, k, mask, b)
        if li < last:
            x = act(x)
    return x


def score_head(context: Tensor, head: HeadParams) -> Tensor:
    """Per-moment linear readout and sigmoid; lower triangle forced to 0."""
    n = context.shape[-2]
    logits = ad.affine(context, head.w, head.b)
    probs = ad.sigmoid(ad.reshape(logits, logits.shape[:-1]))
    mask = np.broadcast_to(valid_mask(n), probs.shape).astype(np.float64)
    return probs * mask


cb_score_head = score_head  # same contract; callers pass the complementary head's params


def matching_score(maps: Sequence[Tensor] | Tensor) -> tuple[Tensor, int, tuple[int, int]]:
    """Video-level score: max over sentences of the max over valid moments.

    Returns ``(P, k, (i, j))``.  Only the global argmax receives gradient.
    """
    if isinstance(maps, Tensor):
        stacked = maps
    else:
        if len(maps) == 0:
            raise ValueError("matching_score: empty map list")
        stacked = ad.stack(list(maps))
    if stacked.values.ndim != 3 or stacked.shape[0] == 0:
        raise ValueError(f"matching_score: expected [n_p, N, N] maps, got {stacked.shape}")
    n = stacked.shape[-1]
    mask = np.broadcast_to(valid_mask(n), stacked.shape)
    p, (k, i, j) = ad.max_reduce(stacked, mask)
    return p, k, (i, j)


@dataclass
class ModelOutput:
    p_m: Tensor    # [n_p, N, N] matching-head maps
    p_cb: Tensor   # [n_p, N, N] complementary-branch maps
    sentences: Tensor  # [n_p, d_s]


class WSTAN:
    """All learnable state plus the forward pass from clips and tokens to score maps."""

    def __init__(self, config: ModelConfig, vocab_size: int, seed: int = 0):
        config.validate()
        self.config = config
        self.vocab_size = vocab_size
        rng = np.random.default_rng(seed)
        c = config
        self.encoder = EncoderParams.init(vocab_size, c.d_s, c.encoder_layers, rng)
        self.fusion = FusionParams(
            ad.parameter(rng.normal(0, 1 / np.sqrt(c.d_s), (c.d_f, c.d_s))),
            ad.parameter(rng.normal(0, 1 / np.sqrt(c.d_v), (c.d_f, c.d_v))),
        )
        K = c.tan_kernel
        fan_in = K * K * c.d_f
        self.tan = TanParams(
            [ad.parameter(rng.normal(0, np.sqrt(2.0 / fan_in), (K, K, c.d_f, c.d_f)))
             for _ in range(c.tan_layers)],
            [ad.parameter(np.zeros(c.d_f)) if c.conv_bias else None
             for _ in range(c.tan_layers)],
            c.activation,
        )
        self.head = HeadParams(ad.parameter(rng.normal(0, 1 / np.sqrt(c.d_f), (1, c.d_f))),
                               ad.parameter(np.zeros(1)))
        self.cb_head = HeadParams(ad.parameter(rng.normal(0, 1 / np.sqrt(c.d_f), (1, c.d_f))),
                                  ad.parameter(np.zeros(1)))
        # averaging start: each offset is the mean of the two shorter moments
        eye = np.eye(c.d_v)
        self.map_kernel = ad.parameter(np.stack([0.5 * eye, 0.5 * eye])
                                       + rng.normal(0, 0.01, (2, c.d_v, c.d_v)))
        self.map_bias = ad.parameter(np.zeros(c.d_v))
        for name, t in self.named_parameters().items():
            t.name = name

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.encoder.tensors())
        out["fusion.w_s"] = self.fusion.w_s
        out["fusion.w_v"] = self.fusion.w_v
        for li, (k, b) in enumerate(zip(self.tan.kernels, self.tan.biases)):
            out[f"tan.l{li}.kernel"] = k
            if b is not None:
                out[f"tan.l{li}.bias"] = b
        out["head.w"] = self.head.w
        out["head.b"] = self.head.b
        out["cb_head.w"] = self.cb_head.w
        out["cb_head.b"] = self.cb_head.b
        if self.config.backend == "stackconv":
            out["map.kernel"] = self.map_kernel
            out["map.bias"] = self.map_bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"checkpoint tensor {name}: shape {state[name].shape} != {t.shape}")
            t.values[...] = state[name]

    def moment_map(self, clips: np.ndarray) -> Tensor:
        if self.config.backend == "pool":
            return Tensor(build_map_pool(clips))
        return build_map_stackconv(clips, self.map_kernel, self.map_bias,
                                   self.config.map_activation)

    def encode(self, sentences: Sequence[Sequence[int]]) -> Tensor:
        return ad.stack([encode_sentence(tok, self.encoder) for tok in sentences])

    def forward(self, clips: np.ndarray, sentences: Sequence[Sequence[int]],
                fmap: Tensor | None = None) -> ModelOutput:
        if len(sentences) == 0:
            raise ValueError("forward: need at least one sentence")
        clips = np.asarray(clips, dtype=np.float64)
        if clips.shape != (self.config.n_clips, self.config.d_v):
            raise ConfigurationError(
                f"clip features {clips.shape} do not match model "
                f"({self.config.n_clips}, {self.config.d_v})")
        fmap = self.moment_map(clips) if fmap is None else fmap
        h = self.encode(sentences)
        context = tan_forward(fuse(h, fmap, self.fusion), self.tan)
        return ModelOutput(score_head(context, self.head), cb_score_head(context, self.cb_head), h)
