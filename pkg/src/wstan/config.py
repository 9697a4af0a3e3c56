"""Flat run configuration, ``key=value`` files and fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .autodiff import ConfigurationError
from .losses import LossWeights, Thresholds
from .model import ModelConfig
from .synth import DataConfig


@dataclass(frozen=True)
class RunConfig:
    # data
    seed: int = 7
    n_train: int = 500
    n_test: int = 100
    n_clips: int = 16
    d_v: int = 16
    n_events: int = 24
    n_verbs: int = 12
    n_objects: int = 12
    n_modifiers: int = 10
    np_min: int = 2
    np_max: int = 3
    span_min: int = 3
    span_max: int = 8
    noise: float = 0.1
    proto_scale: float = 1.0
    duration_min: float = 20.0
    duration_max: float = 40.0
    # model
    d_s: int = 64
    d_f: int = 32
    tan_layers: int = 4
    tan_kernel: int = 3
    backend: str = "stackconv"
    activation: str = "relu"
    map_activation: str = "relu"
    encoder_layers: int = 1
    conv_bias: bool = True
    model_seed: int = 7
    # objective
    o_min: float = 0.9
    o_max: float = 1.0
    alpha: float = 0.5
    beta: float = 0.25
    gamma: float = 0.25
    sd_mil: bool = True
    cb: bool = True
    sd_cb: bool = True
    # optimisation
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 1
    train_seed: int = 7
    # inference
    nms_thresh: float = 0.5
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.thresholds()
        self.loss_weights()
        self.model_config().validate()
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        for name in ("batch_size", "workers", "n_clips", "d_s", "d_v", "d_f"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if not 0.0 <= self.nms_thresh <= 1.0:
            raise ConfigurationError("nms_thresh must lie in [0, 1]")

    def thresholds(self) -> Thresholds:
        return Thresholds(self.o_min, self.o_max)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            n_clips=self.n_clips, d_s=self.d_s, d_v=self.d_v, d_f=self.d_f,
            tan_layers=self.tan_layers, tan_kernel=self.tan_kernel, backend=self.backend,
            activation=self.activation, map_activation=self.map_activation,
            encoder_layers=self.encoder_layers, conv_bias=self.conv_bias)

    def data_config(self) -> DataConfig:
        names = {f.name for f in fields(DataConfig)}
        return DataConfig(**{k: v for k, v in self.as_dict().items() if k in names})

    @property
    def variant(self) -> str:
        if not (self.sd_mil or self.cb or self.sd_cb):
            return "base"
        if self.sd_mil and self.cb and self.sd_cb:
            return "full"
        return "partial"

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            kw[key] = _parse(key, raw, type(getattr(base, key)))
        return dataclasses.replace(base, **kw)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_mapping(parse_kv(text), base)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), base)

    # -- fingerprints --------------------------------------------------------

    def fingerprint(self) -> str:
        """Stable hash of every result-affecting key (``workers`` excluded)."""
        d = self.as_dict()
        d.pop("workers")
        return _digest(d)

    def data_fingerprint(self) -> str:
        return _digest(dataclasses.asdict(self.data_config()) | {"seed": self.seed})


DATA_KEYS = tuple(f.name for f in fields(DataConfig)) + ("seed",)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, raw: str, typ: type):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _digest(d: dict) -> str:
    canon = "\n".join(f"{k}={_fmt(d[k])}" for k in sorted(d))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
