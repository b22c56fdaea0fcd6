"""Save and restore trained forecasters and transfer models through checkpoint files."""

from __future__ import annotations

from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, params_digest, save_checkpoint
from .models import Forecaster, ModelConfig, Normalizer
from .transfer import TransferConfig, TransferModel


def save_forecaster(path, model: Forecaster, adam=None, meta: dict | None = None) -> str:
    if model.feature_norm is None or model.target_norm is None:
        raise ValueError("model has no normalization statistics; train it first")
    extra = {
        "feature_mean": model.feature_norm.mean,
        "feature_std": model.feature_norm.std,
        "target_mean": model.target_norm.mean,
        "target_std": model.target_norm.std,
    }
    if model.static_adjacency is not None:
        extra["static_adjacency"] = model.static_adjacency
    header = {
        "kind": "forecaster",
        "model_config": model.config.to_dict(),
        "tau": model.tau,
        "adjacency_norm": model.adjacency_norm,
        "symmetric": model.symmetric,
        **(meta or {}),
    }
    return save_checkpoint(path, model.param_arrays(), header, adam, extra)


def _forecaster_from(params, meta, extra) -> Forecaster:
    if meta.get("kind") != "forecaster":
        raise CheckpointError(f"expected a forecaster checkpoint, got kind={meta.get('kind')!r}")
    model = Forecaster(ModelConfig(**meta["model_config"]), params=params)
    model.feature_norm = Normalizer(extra["feature_mean"], extra["feature_std"])
    model.target_norm = Normalizer(extra["target_mean"], extra["target_std"])
    model.tau = float(meta["tau"])
    model.adjacency_norm = meta["adjacency_norm"]
    model.symmetric = bool(meta["symmetric"])
    model.static_adjacency = extra.get("static_adjacency")
    return model


def load_forecaster(path) -> tuple[Forecaster, dict]:
    params, meta, _, extra = load_checkpoint(path)
    return _forecaster_from(params, meta, extra), meta


def save_transfer(path, model: TransferModel, pretrained_path, adam=None, meta: dict | None = None) -> str:
    if model.evac_norm is None:
        raise ValueError("transfer model has no normalization statistics; train it first")
    model.verify_frozen()
    header = {
        "kind": "transfer",
        "transfer_config": model.config.to_dict(),
        "pretrained_sha256": model.pretrained_digest,
        "pretrained_path": str(Path(pretrained_path).resolve()),
        **(meta or {}),
    }
    extra = {"evac_mean": model.evac_norm.mean, "evac_std": model.evac_norm.std}
    return save_checkpoint(path, model.param_arrays(), header, adam, extra)


def load_transfer(path, pretrained_path=None) -> tuple[TransferModel, dict]:
    """Load a transfer model and its pretrained forecaster, checking the recorded hash."""
    params, meta, _, extra = load_checkpoint(path)
    if meta.get("kind") != "transfer":
        raise CheckpointError(f"{path}: expected a transfer checkpoint, got kind={meta.get('kind')!r}")
    pre_path = Path(pretrained_path or meta["pretrained_path"])
    if not pre_path.exists():
        raise FileNotFoundError(f"pretrained checkpoint not found: {pre_path}")
    pretrained, _ = load_forecaster(pre_path)
    if params_digest(pretrained.param_arrays()) != meta["pretrained_sha256"]:
        raise CheckpointError(f"{pre_path}: pretrained parameters do not match the hash recorded in {path}")
    model = TransferModel(pretrained, TransferConfig(**meta["transfer_config"]), params=params)
    model.evac_norm = Normalizer(extra["evac_mean"], extra["evac_std"])
    return model, meta


def load_any(path):
    _, meta, _, _ = load_checkpoint(path)
    if meta.get("kind") == "transfer":
        return load_transfer(path)
    return load_forecaster(path)


def model_feature_counts(model) -> dict:
    if isinstance(model, TransferModel):
        base = model.pretrained.config
        return {"nodes": base.node_count, "traffic": base.input_feature_count, "evac": model.config.evac_feature_count}
    return {"nodes": model.config.node_count, "traffic": model.config.input_feature_count}

