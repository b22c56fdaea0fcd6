"""Frozen pretrained forecaster + evacuation LSTM branch + sigmoid control gate.

    output = gate * pretrained(traffic, adjacency) + branch(traffic ++ evac)

``gate`` is an elementwise ``N x p`` sigmoid of an affine map of the branch's
final hidden state. The pretrained branch runs under ``no_grad`` and its
parameters are never handed to the optimizer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import params_digest
from .models import Forecaster, init_lstm, lstm_cell, uniform_init


@dataclass
class TransferConfig:
    evac_feature_count: int
    hidden_size: int = 32
    composition: str = "additive"

    def to_dict(self) -> dict:
        return asdict(self)


def init_transfer_params(pre_config, config: TransferConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    F = pre_config.input_feature_count + config.evac_feature_count
    H, p = config.hidden_size, pre_config.horizon
    params = init_lstm(rng, F, H, prefix="evac")
    params["evac_head_w"] = uniform_init(rng, H, (H, p))
    params["evac_head_b"] = uniform_init(rng, H, (p,))
    params["control_w"] = uniform_init(rng, H, (H, p))
    params["control_b"] = uniform_init(rng, H, (p,))
    return params


def control_gate(context, weight, bias) -> Tensor:
    """Elementwise sigmoid gate from the branch context ``(..., N, H) -> (..., N, p)``."""
    context = context if isinstance(context, Tensor) else Tensor(context)
    if context.shape[-1] != weight.shape[0]:
        raise ad.ShapeError(f"context width {context.shape[-1]} does not match gate weights {weight.shape}")
    return ad.sigmoid(ad.matmul(context, weight) + bias)


class TransferModel:
    kind = "transfer"

    def __init__(self, pretrained: Forecaster, config: TransferConfig, seed: int = 0, params=None):
        if config.composition != "additive":
            raise ValueError("only additive composition is supported")
        self.pretrained = pretrained
        self.pretrained.freeze()
        self.pretrained_digest = params_digest(pretrained.param_arrays())
        self.config = config
        raw = params if params is not None else init_transfer_params(pretrained.config, config, seed)
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in raw.items()}
        ref = init_transfer_params(pretrained.config, config, 0)
        for k, v in ref.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ad.ShapeError(f"transfer parameter {k}: expected {v.shape}")
        self.evac_norm = None  # Normalizer over the evacuation-only columns

    @property
    def input_length(self) -> int:
        return self.pretrained.config.input_length

    def trainable(self) -> dict[str, Tensor]:
        return self.params

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.values for k, p in self.params.items()}

    def branch(self, traffic, evac) -> tuple[Tensor, Tensor]:
        """Return ``(branch_output, final_hidden)`` for ``(B, l, N, F)`` and ``(B, l, N, E)`` inputs."""
        traffic = np.asarray(traffic, dtype=np.float64)
        evac = np.asarray(evac, dtype=np.float64)
        if traffic.shape[:3] != evac.shape[:3]:
            raise ValueError(f"traffic {traffic.shape} and evacuation {evac.shape} features are misaligned")
        if evac.shape[-1] != self.config.evac_feature_count:
            raise ad.ShapeError(f"expected {self.config.evac_feature_count} evacuation features, got {evac.shape[-1]}")
        x = Tensor(np.concatenate([traffic, evac], axis=-1))
        B, l, N, _ = x.shape
        H = self.config.hidden_size
        h = Tensor(np.zeros((B, N, H)))
        c = Tensor(np.zeros((B, N, H)))
        p = self.params
        for t in range(l):
            h, c = lstm_cell(x[:, t], h, c, p["evac_wx"], p["evac_wh"], p["evac_b"])
        out = ad.matmul(h, p["evac_head_w"]) + p["evac_head_b"]
        return out, h

    def pieces(self, traffic, evac, adjacency):
        """``(gate, pretrained_output, branch_output)`` for batched inputs."""
        traffic = np.asarray(traffic, dtype=np.float64)
        if traffic.ndim != 4 or traffic.shape[1] != self.input_length:
            raise ValueError(f"traffic window must be (B, {self.input_length}, N, F), got {traffic.shape}")
        with ad.no_grad():
            pre = self.pretrained(traffic, adjacency)
        out, h = self.branch(traffic, evac)
        gate = control_gate(h, self.params["control_w"], self.params["control_b"])
        return gate, pre, out

    def __call__(self, traffic, evac, adjacency) -> Tensor:
        squeeze = np.ndim(traffic) == 3
        if squeeze:
            traffic = np.asarray(traffic)[None]
            evac = np.asarray(evac)[None]
            if adjacency is not None and self.pretrained.config.adjacency_mode == "dynamic":
                adjacency = np.asarray(adjacency)[None]
        gate, pre, out = self.pieces(traffic, evac, adjacency)
        y = gate * pre.values + out
        return y[0] if squeeze else y

    def predict(self, traffic, evac, adjacency) -> np.ndarray:
        with ad.no_grad():
            return self(traffic, evac, adjacency).values

    def verify_frozen(self) -> None:
        if params_digest(self.pretrained.param_arrays()) != self.pretrained_digest:
            raise RuntimeError("pretrained parameters changed")
