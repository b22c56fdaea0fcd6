"""Graph-convolutional LSTM forecasters (DGCN-LSTM and its LSTM / GCN-LSTM baselines).

Shapes: features ``(B, l, N, F)``, adjacency ``(B, l, N, N)`` when dynamic or
``(N, N)`` when static, predictions ``(B, N, p)``. Unbatched inputs (no ``B``
axis) are accepted and return ``(N, p)``.

Parameters are shared across nodes, so every model is equivariant under a
consistent permutation of nodes in features and adjacency.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ADJACENCY_MODES = ("dynamic", "static", "none")


@dataclass
class ModelConfig:
    node_count: int
    input_feature_count: int
    hidden_size: int = 64
    input_length: int = 6
    horizon: int = 6
    adjacency_mode: str = "dynamic"

    def __post_init__(self):
        if self.input_length < 1 or self.horizon < 1 or self.hidden_size < 1:
            raise ValueError("input_length, horizon and hidden_size must be >= 1")
        if self.node_count < 1 or self.input_feature_count < 1:
            raise ValueError("node_count and input_feature_count must be >= 1")
        if self.adjacency_mode not in ADJACENCY_MODES:
            raise ValueError(f"adjacency_mode must be one of {ADJACENCY_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_lstm(rng, input_size: int, hidden: int, prefix: str = "lstm") -> dict[str, np.ndarray]:
    """Gate blocks are packed in the order input, forget, cell, output."""
    return {
        f"{prefix}_wx": uniform_init(rng, hidden, (input_size, 4 * hidden)),
        f"{prefix}_wh": uniform_init(rng, hidden, (hidden, 4 * hidden)),
        f"{prefix}_b": uniform_init(rng, hidden, (4 * hidden,)),
    }


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    F, H, p = config.input_feature_count, config.hidden_size, config.horizon
    params = {
        "gc_w": uniform_init(rng, F, (F, H)),
        "gc_b": uniform_init(rng, F, (H,)),
    }
    params.update(init_lstm(rng, H, H))
    params["head_w"] = uniform_init(rng, H, (H, p))
    params["head_b"] = uniform_init(rng, H, (p,))
    return params


def dgcn_layer(x, a_norm, weight, bias) -> Tensor:
    """``tanh(A X W + b)``; ``a_norm`` is data (``None`` means identity)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if a_norm is not None:
        a = np.asarray(a_norm.values if isinstance(a_norm, Tensor) else a_norm)
        if a.shape[-1] != x.shape[-2] or a.shape[-2] != a.shape[-1]:
            raise ad.ShapeError(f"adjacency {a.shape} does not match {x.shape[-2]} nodes")
        x = ad.matmul(a, x)
    return ad.tanh(ad.matmul(x, weight) + bias)


def lstm_cell(x, h, c, wx, wh, b):
    """Standard LSTM step; returns ``(h', c')``."""
    hidden = h.shape[-1]
    z = ad.matmul(x, wx) + ad.matmul(h, wh) + b
    i = ad.sigmoid(z[..., 0:hidden])
    f = ad.sigmoid(z[..., hidden : 2 * hidden])
    g = ad.tanh(z[..., 2 * hidden : 3 * hidden])
    o = ad.sigmoid(z[..., 3 * hidden :])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    return h_new, c_new


def _batched(features, adjacency, config: ModelConfig):
    x = np.asarray(features.values if isinstance(features, Tensor) else features, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
        if adjacency is not None and config.adjacency_mode == "dynamic":
            adjacency = np.asarray(adjacency)[None]
    if x.ndim != 4:
        raise ad.ShapeError(f"features must be (B, l, N, F), got {x.shape}")
    if x.shape[1] != config.input_length:
        raise ValueError(f"window has {x.shape[1]} steps; model expects input_length={config.input_length}")
    if x.shape[2] != config.node_count or x.shape[3] != config.input_feature_count:
        raise ad.ShapeError(
            f"features {x.shape[1:]} do not match model (l, N={config.node_count}, F={config.input_feature_count})"
        )
    if config.adjacency_mode == "dynamic":
        a = np.asarray(adjacency, dtype=np.float64)
        if a.shape != (x.shape[0], x.shape[1], x.shape[2], x.shape[2]):
            raise ad.ShapeError(f"dynamic adjacency must be (B, l, N, N), got {a.shape}")
    elif config.adjacency_mode == "static":
        a = np.asarray(adjacency, dtype=np.float64)
        if a.shape != (x.shape[2], x.shape[2]):
            raise ad.ShapeError(f"static adjacency must be (N, N), got {a.shape}")
    else:
        a = None
    return (features if isinstance(features, Tensor) and not squeeze else x), a, squeeze


def forward(params: dict[str, Tensor], features, adjacency, config: ModelConfig) -> Tensor:
    """DGCN-LSTM: per step graph convolution then LSTM; affine head on the last hidden state."""
    x, a, squeeze = _batched(features, adjacency, config)
    xt = x if isinstance(x, Tensor) else Tensor(x)
    B, N, H = xt.shape[0], config.node_count, config.hidden_size
    h = Tensor(np.zeros((B, N, H)))
    c = Tensor(np.zeros((B, N, H)))
    for t in range(config.input_length):
        a_t = a[:, t] if config.adjacency_mode == "dynamic" else a
        g = dgcn_layer(xt[:, t], a_t, params["gc_w"], params["gc_b"])
        h, c = lstm_cell(g, h, c, params["lstm_wx"], params["lstm_wh"], params["lstm_b"])
    out = ad.matmul(h, params["head_w"]) + params["head_b"]
    return out[0] if squeeze else out


def final_hidden(params, features, adjacency, config: ModelConfig) -> Tensor:
    x, a, _ = _batched(features, adjacency, config)
    xt = x if isinstance(x, Tensor) else Tensor(x)
    B, N, H = xt.shape[0], config.node_count, config.hidden_size
    h = Tensor(np.zeros((B, N, H)))
    c = Tensor(np.zeros((B, N, H)))
    for t in range(config.input_length):
        a_t = a[:, t] if config.adjacency_mode == "dynamic" else a
        g = dgcn_layer(xt[:, t], a_t, params["gc_w"], params["gc_b"])
        h, c = lstm_cell(g, h, c, params["lstm_wx"], params["lstm_wh"], params["lstm_b"])
    return h


BASELINE_MODES = {"lstm": "none", "gcn_lstm": "static", "dgcn_lstm": "dynamic"}


def baseline_forward(variant: str, params, features, adjacency, config: ModelConfig) -> Tensor:
    """LSTM (no spatial mixing) or GCN-LSTM (one static adjacency) through the same network."""
    if variant not in ("lstm", "gcn_lstm"):
        raise ValueError(f"unknown baseline {variant!r}")
    mode = BASELINE_MODES[variant]
    if config.adjacency_mode != mode:
        raise ValueError(f"{variant} needs adjacency_mode={mode!r}, config has {config.adjacency_mode!r}")
    return forward(params, features, None if variant == "lstm" else adjacency, config)


class Normalizer:
    """Per-feature z-score; a zero spread maps to scale 1."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        self.std = np.where(std > 1e-12, std, 1.0)

    @classmethod
    def fit(cls, values: np.ndarray, axis) -> "Normalizer":
        return cls(values.mean(axis=axis), values.std(axis=axis))

    def __call__(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values) * self.std + self.mean


class Forecaster:
    """A DGCN-LSTM (or baseline) with its parameters and normalization statistics."""

    kind = "forecaster"

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        raw = params if params is not None else init_params(config, seed)
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in raw.items()}
        self._check_shapes()
        self.feature_norm: Normalizer | None = None
        self.target_norm: Normalizer | None = None
        # adjacency construction used with this model's data
        self.tau = 1.0
        self.adjacency_norm = "affinity"
        self.symmetric = False
        self.static_adjacency: np.ndarray | None = None

    def _check_shapes(self):
        ref = init_params(self.config, 0)
        for k, v in ref.items():
            if k not in self.params or self.params[k].shape != v.shape:
                got = self.params[k].shape if k in self.params else None
                raise ad.ShapeError(f"parameter {k}: expected {v.shape}, got {got}")

    @property
    def variant(self) -> str:
        return {v: k for k, v in BASELINE_MODES.items()}[self.config.adjacency_mode]

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.values for k, p in self.params.items()}

    def __call__(self, features, adjacency) -> Tensor:
        return forward(self.params, features, adjacency, self.config)

    def predict(self, features, adjacency) -> np.ndarray:
        with ad.no_grad():
            return self(features, adjacency).values
