"""Attention-encoded temporal convolutional network for next-month heat."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from . import tensor as T
from .layers import (
    LinearLayer,
    Module,
    ResidualBlock,
    SelfAttentionLayer,
    block_dilations,
    load_parameters,
    parameters_to_json,
    receptive_field,
)
from .tensor import ShapeError, Tensor

if TYPE_CHECKING:
    from .data import HeatSeries, Normalizer

MODEL_FORMAT = "shdp-tcn-model/1"


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ModelConfig:
    window_len: int = 100
    topic_dim: int = 50
    channels: Optional[int] = None  # None: same as the input channel count
    kernel_size: int = 3
    num_blocks: int = 3
    dropout_rate: float = 0.1
    use_attention: bool = True
    seed: int = 0

    @property
    def input_channels(self) -> int:
        return 1 + self.topic_dim

    @property
    def hidden_channels(self) -> int:
        return self.input_channels if self.channels is None else self.channels

    @property
    def dilations(self) -> list[int]:
        return [2**i for i in range(self.num_blocks)]

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.kernel_size, block_dilations(self.num_blocks))

    def validate(self) -> "ModelConfig":
        for name in ("window_len", "topic_dim", "kernel_size", "num_blocks", "seed"):
            if not isinstance(getattr(self, name), (int, np.integer)) or isinstance(getattr(self, name), bool):
                raise ConfigError(name, f"expected an integer, got {getattr(self, name)!r}")
        if self.window_len < 2:
            raise ConfigError("window_len", "must be >= 2")
        if self.topic_dim < 0:
            raise ConfigError("topic_dim", "must be >= 0")
        if self.channels is not None and (not isinstance(self.channels, int) or self.channels < 1):
            raise ConfigError("channels", "must be a positive integer or null")
        if self.kernel_size < 1:
            raise ConfigError("kernel_size", "must be >= 1")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks", "must be >= 1")
        if not 0.0 <= float(self.dropout_rate) < 1.0:
            raise ConfigError("dropout_rate", "must lie in [0, 1)")
        if not isinstance(self.use_attention, bool):
            raise ConfigError("use_attention", "must be a boolean")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown model setting")
        return cls(**doc).validate()

    def parameter_count(self) -> int:
        """Closed-form count of trainable scalars.

        Attention: ``3 d^2`` with ``d`` the input channels. Each convolution
        with ``a`` inputs, ``b`` outputs and kernel ``K`` holds ``b*a*K``
        filter values, ``b`` biases and ``b`` gains. A block is two such
        convolutions plus a 1x1 one when ``a != b``. Head: ``c + 1``.
        """
        d, c, k = self.input_channels, self.hidden_channels, self.kernel_size
        total = 3 * d * d if self.use_attention else 0
        c_in = d
        for _ in range(self.num_blocks):
            total += (c * c_in * k + 2 * c) + (c * c * k + 2 * c)
            if c_in != c:
                total += c * c_in + 2 * c
            c_in = c
        return total + c + 1


@dataclass
class Prediction:
    point: float
    denormalized: float


class ShdpTcnModel(Module):
    """Self-attention encoder, residual TCN stack and a linear readout of the
    final time step."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d, c = config.input_channels, config.hidden_channels
        self.attention = SelfAttentionLayer(d, rng) if config.use_attention else None
        self.blocks = []
        c_in = d
        for i, dilation in enumerate(config.dilations):
            self.blocks.append(
                ResidualBlock(c_in, c, config.kernel_size, dilation, config.dropout_rate, rng,
                              seed=config.seed * 1000 + 2 * i + 1)
            )
            c_in = c
        self.head = LinearLayer(c, 1, rng)
        self.eval()

    def encode(self, x: Tensor) -> Tensor:
        """Time-major input [n, d] -> TCN features [c, n]."""
        if x.data.ndim != 2 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"model expects [n, {self.config.input_channels}] input, got {x.shape}"
            )
        h = self.attention(x) if self.attention is not None else x
        h = T.transpose(h)
        for block in self.blocks:
            h = block(h)
        return h

    def __call__(self, x: Tensor) -> Tensor:
        h = self.encode(x)
        last = T.reshape(T.take(h, (slice(None), -1)), (1, h.shape[0]))
        return T.reshape(self.head(last), ())

    def predict(self, x: Tensor, normalizer: Optional["Normalizer"] = None) -> Prediction:
        point = self(x).item()
        denorm = normalizer.inverse(point) if normalizer is not None else point
        return Prediction(point, float(denorm))


def build(config: ModelConfig) -> ShdpTcnModel:
    return ShdpTcnModel(config)


def assemble_input(heat_window: Sequence[float], topic_feature: Optional[Sequence[float]],
                   config: ModelConfig) -> Tensor:
    """Stack the heat window as channel 0 and repeat the topic feature across
    every time step as the remaining channels."""
    heat = np.asarray(heat_window, dtype=np.float64)
    if heat.shape != (config.window_len,):
        raise ConfigError("window_len", f"heat window has length {heat.size}, expected {config.window_len}")
    feat = np.zeros(0) if topic_feature is None else np.asarray(topic_feature, dtype=np.float64)
    if feat.shape != (config.topic_dim,):
        raise ConfigError("topic_dim", f"topic feature has length {feat.size}, expected {config.topic_dim}")
    x = np.empty((config.window_len, config.input_channels))
    x[:, 0] = heat
    x[:, 1:] = feat[None, :]
    return Tensor(x)


def predict_horizon(model: ShdpTcnModel, series: "HeatSeries", steps: int,
                    normalizer: "Normalizer",
                    topic_feature: Optional[Sequence[float]] = None) -> list[Prediction]:
    """Autoregressive rollout: each prediction is appended to the window that
    produces the next one. The topic feature stays fixed."""
    cfg = model.config
    if steps < 1:
        raise ConfigError("steps", "must be >= 1")
    if len(series.values) < cfg.window_len:
        raise ConfigError(
            "window_len",
            f"series has {len(series.values)} months, forecasting needs at least {cfg.window_len}",
        )
    if topic_feature is None and cfg.topic_dim > 0:
        raise ConfigError("topic_dim", "model uses topic features but none was supplied")
    model.eval()
    window = list(normalizer.transform(np.asarray(series.values[-cfg.window_len:], dtype=float)))
    out = []
    for _ in range(steps):
        pred = model.predict(assemble_input(window, topic_feature, cfg), normalizer)
        out.append(pred)
        window = window[1:] + [pred.point]
    return out


def model_to_json(model: ShdpTcnModel, extra: Optional[dict] = None) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "config": model.config.to_dict(),
        "parameters": parameters_to_json(model),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> tuple[ShdpTcnModel, dict]:
    """Rebuild a model; returns it with the remaining top-level entries
    (normaliser, trend threshold and so on)."""
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise ConfigError("format", f"unsupported model file format {doc.get('format')!r}")
    config = ModelConfig.from_dict(doc["config"])
    model = ShdpTcnModel(config)
    load_parameters(model, doc["parameters"])
    rest = {k: v for k, v in doc.items() if k not in ("format", "config", "parameters")}
    return model, rest
