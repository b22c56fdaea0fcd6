"""Glue from pipeline outputs to trained models and metric reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .detectors import engineer_features, frame_to_arrays, impute, qc_filter
from .graph import RoadGraph, median_edge_travel_time
from .models import Forecaster, ModelConfig
from .training import (
    MetricReport,
    TrainConfig,
    TrainResult,
    WindowData,
    build_windows,
    daily_spans,
    predict_windows,
    split,
    train,
)
from .transfer import TransferConfig, TransferModel

logger = logging.getLogger(__name__)

REGULAR_RATIOS = (0.9, 0.05, 0.05)
EVACUATION_RATIOS = (0.8, 0.1, 0.1)
EVAC_STATIC_COLUMNS = ["time_to_landfall", "distance_to_nearest_evac_zone", "cumulative_population_under_orders"]
MOVEMENT_COLUMNS = ["fb_inflow", "fb_outflow"]


def restrict_graph(graph: RoadGraph, keep_ids) -> RoadGraph:
    keep = set(keep_ids)
    if keep == set(graph.ids):
        return graph
    return RoadGraph.from_nodes([n for n in graph.nodes if n.detector_id in keep])


def prepare_traffic(series, graph: RoadGraph) -> tuple[WindowData, dict]:
    """QC, impute and featurize raw detector series into dense window data."""
    retained, qc_report = qc_filter(series)
    if not retained:
        raise ValueError("every detector failed quality control")
    graph = restrict_graph(graph, [s.detector_id for s in retained])
    filled, imp_report = impute(retained, graph)
    frame = engineer_features(filled)
    stamps, feats, flow, speed = frame_to_arrays(frame, graph)
    report = {"qc": qc_report, "imputation": imp_report}
    return WindowData(graph, stamps, feats, flow, speed), report


def evac_feature_array(frame: pd.DataFrame, timestamps, ids, movement: bool = True) -> np.ndarray:
    """``(T, N, E)`` evacuation inputs aligned to ``timestamps`` x ``ids``."""
    cols = EVAC_STATIC_COLUMNS + (MOVEMENT_COLUMNS if movement else [])
    missing = [c for c in cols if c not in frame.columns]
    if missing:
        raise KeyError(f"evacuation features missing columns {missing}")
    f = frame.copy()
    f["timestamp"] = pd.to_datetime(f.timestamp).values.astype("datetime64[h]")
    stamps = np.asarray(timestamps).astype("datetime64[h]")
    t_pos = pd.Index(stamps).get_indexer(f.timestamp)
    n_pos = pd.Index(list(ids)).get_indexer(f.detector_id)
    ok = (t_pos >= 0) & (n_pos >= 0)
    out = np.full((len(stamps), len(ids), len(cols)), np.nan)
    out[t_pos[ok], n_pos[ok]] = f.loc[ok, cols].to_numpy(dtype=np.float64)
    if np.isnan(out).any():
        raise ValueError("evacuation features do not cover every (hour, detector) in the traffic data")
    return out


def windows_for(data: WindowData, l: int, p: int):
    return build_windows(data.timestamps, l, p, daily_spans(data.timestamps))


@dataclass
class Fitted:
    model: object
    result: TrainResult
    train: list
    val: list
    test: list


def train_forecaster(
    data: WindowData,
    model_config: ModelConfig,
    hyper: TrainConfig,
    seed: int = 0,
    ratios=REGULAR_RATIOS,
    adjacency_norm: str = "affinity",
    symmetric: bool = False,
) -> Fitted:
    """Split the regular-period windows and fit a DGCN-LSTM (or baseline)."""
    windows = windows_for(data, model_config.input_length, model_config.horizon)
    tr, va, te = split(windows, ratios, seed)
    model = Forecaster(model_config, seed=seed)
    model.adjacency_norm = adjacency_norm
    model.symmetric = symmetric
    train_hours = np.unique(data.positions(tr)[:, None] + np.arange(model_config.input_length))
    model.tau = median_edge_travel_time(data.graph, data.speed[train_hours])
    result = train(model, data, tr, va, _with_seed(hyper, seed))
    return Fitted(model, result, tr, va, te)


def fit_transfer(
    pretrained: Forecaster,
    data: WindowData,
    config: TransferConfig,
    hyper: TrainConfig,
    seed: int = 0,
    ratios=EVACUATION_RATIOS,
) -> Fitted:
    """Train only the evacuation branch and control gate; the pretrained model stays frozen."""
    check_nodes(pretrained, data)
    windows = windows_for(data, pretrained.config.input_length, pretrained.config.horizon)
    tr, va, te = split(windows, ratios, seed)
    model = TransferModel(pretrained, config, seed=seed)
    result = train(model, data, tr, va, _with_seed(hyper, seed))
    model.verify_frozen()
    return Fitted(model, result, tr, va, te)


def check_nodes(pretrained: Forecaster, data: WindowData) -> None:
    if pretrained.config.node_count != data.graph.size:
        raise ValueError(
            f"pretrained model has {pretrained.config.node_count} nodes, data has {data.graph.size}"
        )


def _with_seed(hyper: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**hyper.to_dict(), "seed": seed})


def evaluate(model, data: WindowData, windows, label: str = "") -> MetricReport:
    if not windows:
        raise ValueError("no windows to evaluate")
    pred, actual = predict_windows(model, data, windows)
    return MetricReport.from_predictions(actual, pred, label)


def prediction_frame(model, data: WindowData, windows) -> pd.DataFrame:
    """Long-format dump: detector_id, timestamp, horizon, actual, predicted."""
    pred, actual = predict_windows(model, data, windows)
    ids = np.asarray(data.graph.ids)
    rows = []
    for w, win in enumerate(windows):
        for h, ts in enumerate(win.target_hours):
            rows.append(
                pd.DataFrame(
                    {
                        "window_id": win.index_id,
                        "detector_id": ids,
                        "timestamp": pd.Timestamp(ts).strftime("%Y-%m-%dT%H:%M:%S"),
                        "horizon": h + 1,
                        "actual": actual[w, :, h],
                        "predicted": pred[w, :, h],
                    }
                )
            )
    return pd.concat(rows, ignore_index=True)
