"""Central-difference checks for every differentiable operation.

Each registered check draws a random point from a seeded generator, builds
a scalar probe of the operation and hands it to :func:`grad_check`.  Kink
neighbourhoods (relu near 0, near-ties in max) are avoided by resampling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .model import (FusionParams, HeadParams, ModelConfig, TanParams, WSTAN, fuse,
                    matching_score, score_head, tan_forward)
from .moment_map import build_map_stackconv, valid_mask
from .text import EncoderParams, encode_sentence

TOL = 1e-4
STEP = 1e-5
POINTS = 25
KINK = 1e-3

# A check builds (fn, inputs) from a generator: fn() -> scalar Tensor.
Check = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
REGISTRY: dict[str, Check] = {}
# Per-input coordinate budget for checks over whole models; every tensor is
# still probed at each seeded point, only a random subset of its entries.
COORDS: dict[str, int] = {}


def register(name: str, coords: int | None = None):
    def deco(fn: Check) -> Check:
        if name in REGISTRY:
            raise ValueError(f"duplicate gradient check {name!r}")
        REGISTRY[name] = fn
        if coords is not None:
            COORDS[name] = coords
        return fn
    return deco


def _p(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return ad.parameter(rng.uniform(lo, hi, size=shape))


def _away_from_zero(rng, shape) -> np.ndarray:
    x = rng.uniform(-1, 1, size=shape)
    small = np.abs(x) < KINK
    while small.any():
        x[small] = rng.uniform(-1, 1, size=int(small.sum()))
        small = np.abs(x) < KINK
    return x



@register("affine")
def _affine(rng):
    x, W, b = _p(rng, 3, 4), _p(rng, 5, 4), _p(rng, 5)
    c = rng.normal(size=(3, 5))
    return lambda: ad.tensor_sum(ad.affine(x, W, b) * c), [x, W, b]


@register("hadamard")
def _hadamard(rng):
    a, b = _p(rng, 4, 3), _p(rng, 4, 3)
    c = rng.normal(size=(4, 3))
    return lambda: ad.tensor_sum(ad.hadamard(ad.hadamard(a, b), Tensor(c))), [a, b]


@register("add_sub_scale")
def _arith(rng):
    a, b = _p(rng, 6), _p(rng, 6)
    c = rng.normal(size=6)
    return lambda: ad.tensor_sum(((a + b) * 2.5 - b + 0.3 - a * 0.5) * c), [a, b]


@register("sum_mean")
def _sum_mean(rng):
    a = _p(rng, 3, 3)
    return lambda: ad.tensor_sum(a * a) + ad.tensor_mean(a), [a]


@register("log")
def _log(rng):
    a = _p(rng, 5, lo=0.2, hi=2.0)
    c = rng.normal(size=5)
    return lambda: ad.tensor_sum(ad.log(a) * c), [a]


@register("clamp")
def _clamp(rng):
    x = rng.uniform(-2, 2, size=8)
    near = np.abs(np.abs(x) - 1.0) < KINK
    x[near] += 0.01
    a = ad.parameter(x)
    c = rng.normal(size=8)
    return lambda: ad.tensor_sum(ad.clamp(a, -1.0, 1.0) * c), [a]


@register("sigmoid")
def _sigmoid(rng):
    a = _p(rng, 6, lo=-4, hi=4)
    W = _p(rng, 6, 6)
    c = rng.normal(size=6)
    # chain of two sigmoids through an affine map
    return lambda: ad.tensor_sum(ad.sigmoid(ad.affine(ad.sigmoid(a), W)) * c), [a, W]


@register("tanh")
def _tanh(rng):
    a = _p(rng, 6, lo=-3, hi=3)
    c = rng.normal(size=6)
    return lambda: ad.tensor_sum(ad.tanh(a) * c), [a]


@register("relu")
def _relu(rng):
    a = ad.parameter(_away_from_zero(rng, 8))
    c = rng.normal(size=8)
    return lambda: ad.tensor_sum(ad.relu(a) * c), [a]


@register("structural")
def _structural(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 3)
    mask = rng.random((2, 6)) < 0.5
    mask[0, 0] = True
    c = rng.normal(size=int(mask.sum()))
    d = rng.normal(size=(4, 2, 3))

    def fn():
        cat = ad.concat([a, b], axis=1)            # [2, 6]
        sel = ad.masked_select(cat, mask)
        st = ad.stack([a, b, ad.reshape(ad.reshape(a, (6,)), (2, 3)), b[0:2]])  # [4, 2, 3]
        bc = ad.broadcast_to(ad.reshape(a[1], (1, 1, 3)), (4, 2, 3))
        return ad.tensor_sum(sel * c) + ad.tensor_sum(ad.hadamard(st, bc) * d)
    return fn, [a, b]


@register("conv2d_masked")
def _conv(rng):
    n, d, d2, k = 5, 2, 3, 3
    x, kern, bias = _p(rng, 2, n, n, d), _p(rng, k, k, d, d2), _p(rng, d2)
    mask = valid_mask(n)
    c = rng.normal(size=(2, n, n, d2))
    return lambda: ad.tensor_sum(ad.conv2d_masked(x, kern, mask, bias) * c), [x, kern, bias]


@register("max_reduce")
def _max(rng):
    while True:
        v = rng.uniform(-1, 1, size=(3, 4))
        mask = rng.random((3, 4)) < 0.7
        top = np.sort(v[mask])
        if top.size >= 2 and top[-1] - top[-2] > KINK:
            break
    x = ad.parameter(v)

    def fn():
        m, _ = ad.max_reduce(ad.tanh(x), mask)
        return m * m
    return fn, [x]


def _stackconv_check(act):
    def build(rng):
        n, d = 5, 3
        while True:
            clips = rng.uniform(-1, 1, size=(n, d))
            kern = rng.uniform(-0.8, 0.8, size=(2, d, d))
            bias = rng.uniform(-0.3, 0.3, size=d)
            if act != "relu" or _min_preact(clips, kern, bias) > KINK:
                break
        x, k, b = ad.parameter(clips), ad.parameter(kern), ad.parameter(bias)
        c = rng.normal(size=(n, n, d))
        return lambda: ad.tensor_sum(build_map_stackconv(x, k, b, act) * c), [x, k, b]
    return build


def _min_preact(clips, kern, bias) -> float:
    prev, low = clips, np.inf
    for _ in range(1, clips.shape[0]):
        z = prev[:-1] @ kern[0].T + prev[1:] @ kern[1].T + bias
        low = min(low, float(np.abs(z).min()))
        prev = np.maximum(z, 0.0)
    return low


for _act in ("identity", "tanh", "relu"):
    register(f"stackconv_map[{_act}]")(_stackconv_check(_act))


@register("encode_sentence", coords=4)
def _encoder(rng):
    params = EncoderParams.init(7, 6, 2, rng)
    for t in params.tensors().values():
        t.values[...] = rng.uniform(-0.5, 0.5, size=t.shape)
    tokens = [int(t) for t in rng.integers(0, 7, size=int(rng.integers(1, 5)))]
    return lambda: ad.tensor_sum(encode_sentence(tokens, params)), list(params.tensors().values())


def _tiny_model(rng, **kw) -> tuple[WSTAN, np.ndarray, list[list[int]]]:
    cfg = ModelConfig(n_clips=4, d_s=4, d_v=3, d_f=4, tan_layers=2, tan_kernel=3,
                      activation="tanh", map_activation="tanh", **kw)
    model = WSTAN(cfg, vocab_size=6, seed=int(rng.integers(1 << 31)))
    for t in model.parameters():
        t.values[...] = rng.uniform(-0.8, 0.8, size=t.shape)
    clips = rng.uniform(-1, 1, size=(4, 3))
    sents = [[int(t) for t in rng.integers(0, 6, size=int(rng.integers(1, 4)))]
             for _ in range(int(rng.integers(1, 4)))]
    return model, clips, sents


@register("fuse")
def _fuse(rng):
    h, fmap = _p(rng, 2, 3), _p(rng, 4, 4, 2)
    fp = FusionParams(_p(rng, 5, 3), _p(rng, 5, 2))
    c = rng.normal(size=(2, 4, 4, 5))
    return lambda: ad.tensor_sum(fuse(h, fmap, fp) * c), [h, fmap, fp.w_s, fp.w_v]


@register("tan_forward")
def _tan(rng):
    x = _p(rng, 4, 4, 3)
    tp = TanParams([_p(rng, 3, 3, 3, 3), _p(rng, 3, 3, 3, 3)], [_p(rng, 3), None], "tanh")
    c = rng.normal(size=(4, 4, 3))
    return lambda: ad.tensor_sum(tan_forward(x, tp) * c), [x, *tp.kernels, tp.biases[0]]


@register("score_head")
def _head(rng):
    x = _p(rng, 2, 4, 4, 3)
    hp = HeadParams(_p(rng, 1, 3), _p(rng, 1))
    c = rng.normal(size=(2, 4, 4))
    return lambda: ad.tensor_sum(score_head(x, hp) * c), [x, hp.w, hp.b]


@register("matching_score", coords=3)
def _matching(rng):
    model, clips, sents = _tiny_model(rng)
    with ad.no_grad():
        v = np.sort(model.forward(clips, sents).p_m.values.reshape(-1))
    if v[-1] - v[-2] <= KINK:
        return _matching(rng)
    return lambda: matching_score(model.forward(clips, sents).p_m)[0], model.parameters()


@register("mil_loss")
def _mil(rng):
    p = ad.parameter(rng.uniform(0.05, 0.95))
    y = int(rng.integers(2))
    return lambda: L.mil_loss(p, y), [p]


def _frozen_maps(rng, n_p=2, n=4):
    maps = ad.parameter(np.where(valid_mask(n), rng.uniform(0.05, 0.95, size=(n_p, n, n)), 0.0))
    return maps


@register("soft_ce_loss")
def _soft_ce(rng):
    m = _frozen_maps(rng, 1)[0]
    m = ad.parameter(m.values)
    y = np.where(valid_mask(4), rng.random((4, 4)), 0.0)
    w = float(rng.uniform(0.1, 1.0))
    return lambda: L.soft_ce_loss(m, y, w), [m]


@register("sd_loss")
def _sd(rng):
    maps = _frozen_maps(rng)
    targets = L.pseudo_targets(maps)
    return lambda: L.sd_loss(maps, targets=targets), [maps]


@register("cb_loss")
def _cb(rng):
    src, cbm = _frozen_maps(rng), _frozen_maps(rng)
    targets = L.pseudo_targets(src)
    return lambda: L.cb_loss(src, cbm, targets=targets), [src, cbm]


@register("cb_sd_loss")
def _cbsd(rng):
    cbm = _frozen_maps(rng)
    targets = L.pseudo_targets(cbm)
    return lambda: L.cb_sd_loss(cbm, targets=targets), [cbm]


@register("total_loss[end_to_end]", coords=3)
def _end_to_end(rng):
    model, clips, sents = _tiny_model(rng)
    th = L.Thresholds(0.5, 1.0)
    weights = L.LossWeights(0.5, 0.25, 0.25)
    with ad.no_grad():
        out = model.forward(clips, sents)
    v = np.sort(out.p_m.values.reshape(-1))
    if v[-1] - v[-2] <= KINK:
        return _end_to_end(rng)
    # targets frozen at the evaluation point: label generation is gradient-free
    t_m = L.pseudo_targets(out.p_m, th)
    t_cb = L.pseudo_targets(out.p_cb, th)

    def fn():
        o = model.forward(clips, sents)
        P, _, _ = matching_score(o.p_m)
        parts = {"mil": L.mil_loss(P, 1),
                 "sd": L.sd_loss(o.p_m, th, t_m),
                 "cb": L.cb_loss(o.p_m, o.p_cb, th, t_m),
                 "cb_sd": L.cb_sd_loss(o.p_cb, th, t_cb)}
        return L.total_loss(parts, weights, 1)
    return fn, model.parameters()


@dataclass
class CheckResult:
    name: str
    max_error: float
    points: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOL


def run_check(name: str, check: Check, points: int = POINTS, seed: int = 0,
              h: float = STEP) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(points):
        fn, inputs = check(rng)
        worst = max(worst, ad.grad_check(fn, inputs, h, coords=COORDS.get(name), rng=rng))
    return CheckResult(name, worst, points, time.perf_counter() - t0)


def run_suite(points: int = POINTS, seed: int = 0, registry: dict[str, Check] | None = None,
              ) -> list[CheckResult]:
    registry = REGISTRY if registry is None else registry
    return [run_check(name, chk, points, seed) for name, chk in registry.items()]
