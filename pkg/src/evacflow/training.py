"""Gap-aware windows, shuffled splits, mini-batch ADAM training and the metric suite."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from . import autodiff as ad
from .graph import RoadGraph, adjacency_series, normalize_adjacency
from .models import Forecaster, Normalizer
from .transfer import TransferModel

logger = logging.getLogger(__name__)

METRICS = ("rmse", "mae", "mape", "r2", "smape")
MAPE_MIN_ACTUAL = 1.0


class TrainingDiverged(RuntimeError):
    pass


# ----------------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowIndex:
    index_id: int
    input_hours: tuple
    target_hours: tuple
    gap_safe: bool = True

    def to_dict(self) -> dict:
        return {
            "index_id": self.index_id,
            "input_start": str(self.input_hours[0]),
            "input_length": len(self.input_hours),
            "horizon": len(self.target_hours),
        }


def daily_spans(dates, start_hour: int = 3, end_hour: int = 19) -> list[tuple[np.datetime64, np.datetime64]]:
    """Half-open ``[day+start, day+end)`` intervals, one per date."""
    out = []
    for d in sorted({np.datetime64(pd.Timestamp(x).normalize().to_datetime64(), "h") for x in dates}):
        out.append((d + np.timedelta64(start_hour, "h"), d + np.timedelta64(end_hour, "h")))
    return out


def build_windows(timestamps, l: int, p: int, valid_spans) -> list[WindowIndex]:
    """Slide a one-hour step through each span; every window stays inside a single span.

    ``timestamps`` lists the hours that actually have data; a window is kept only
    when all of its ``l + p`` hours are present.
    """
    if l < 1 or p < 1:
        raise ValueError("l and p must be >= 1")
    available = set(np.asarray(timestamps).astype("datetime64[h]").tolist())
    one = np.timedelta64(1, "h")
    windows = []
    for start, end in sorted(valid_spans):
        start = np.datetime64(start, "h")
        end = np.datetime64(end, "h")
        t = start
        while t + (l + p) * one <= end:
            hours = [t + k * one for k in range(l + p)]
            if all(h.tolist() in available for h in hours):
                windows.append(WindowIndex(len(windows), tuple(hours[:l]), tuple(hours[l:])))
            t = t + one
    return windows


def split(indices: Sequence, ratios=(0.9, 0.05, 0.05), seed: int = 0):
    """Seeded shuffle, then floor-sized validation and test sets; the remainder trains."""
    indices = list(indices)
    if not indices:
        raise ValueError("cannot split an empty index list")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(indices)
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    pick = [indices[i] for i in order]
    return pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]


# ---------------------------------------------------------------------- datasets


@dataclass
class WindowData:
    """Dense hourly arrays in graph node order, indexed by timestamp."""

    graph: RoadGraph
    timestamps: np.ndarray  # (T,) datetime64[h]
    features: np.ndarray  # (T, N, F) raw traffic features
    flow: np.ndarray  # (T, N) raw targets
    speed: np.ndarray  # (T, N)
    evac: np.ndarray | None = None  # (T, N, E) raw evacuation (+ movement) features
    _adj_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps).astype("datetime64[h]")
        self._pos = {t: i for i, t in enumerate(self.timestamps.tolist())}

    def positions(self, windows: Sequence[WindowIndex]) -> np.ndarray:
        pos = []
        for w in windows:
            i = self._pos.get(np.datetime64(w.input_hours[0], "h").tolist())
            if i is None:
                raise KeyError(f"window {w.index_id} starts at {w.input_hours[0]}, which has no data")
            last = i + len(w.input_hours) + len(w.target_hours) - 1
            if last >= len(self.timestamps) or self.timestamps[last] != np.datetime64(w.target_hours[-1], "h"):
                raise ValueError(f"window {w.index_id} is not contiguous in the data")
            pos.append(i)
        return np.asarray(pos, dtype=int)

    def adjacency(self, tau: float, mode: str = "affinity", symmetric: bool = False) -> np.ndarray:
        key = (tau, mode, symmetric)
        if key not in self._adj_cache:
            tt = adjacency_series(self.graph, self.speed, symmetric=symmetric)
            self._adj_cache[key] = normalize_adjacency(tt, tau, mode)
        return self._adj_cache[key]

    def gather(self, pos: np.ndarray, l: int, p: int):
        steps = pos[:, None] + np.arange(l)[None, :]
        targets = pos[:, None] + l + np.arange(p)[None, :]
        x = self.features[steps]
        y = np.transpose(self.flow[targets], (0, 2, 1))
        e = self.evac[steps] if self.evac is not None else None
        return steps, x, y, e


# ------------------------------------------------------------------ model glue


def _adjacency_for(model: Forecaster, data: WindowData, steps: np.ndarray):
    cfg = model.config
    if cfg.adjacency_mode == "dynamic":
        return data.adjacency(model.tau, model.adjacency_norm, model.symmetric)[steps]
    if cfg.adjacency_mode == "static":
        return model.static_adjacency
    return None


def model_output(model, data: WindowData, pos: np.ndarray) -> ad.Tensor:
    """Normalized-space predictions ``(B, N, p)`` for windows starting at ``pos``."""
    base = model.pretrained if isinstance(model, TransferModel) else model
    l, p = base.config.input_length, base.config.horizon
    steps, x, _, e = data.gather(pos, l, p)
    xn = base.feature_norm(x)
    adj = _adjacency_for(base, data, steps)
    if isinstance(model, TransferModel):
        if e is None:
            raise ValueError("transfer model needs evacuation features in the dataset")
        return model(xn, model.evac_norm(e), adj)
    return model(xn, adj)


def normalized_targets(model, data: WindowData, pos: np.ndarray) -> np.ndarray:
    base = model.pretrained if isinstance(model, TransferModel) else model
    _, _, y, _ = data.gather(pos, base.config.input_length, base.config.horizon)
    return base.target_norm(y)


def fit_normalizers(model, data: WindowData, train_pos: np.ndarray) -> None:
    base = model.pretrained if isinstance(model, TransferModel) else model
    l, p = base.config.input_length, base.config.horizon
    steps, x, y, e = data.gather(train_pos, l, p)
    if isinstance(model, TransferModel):
        if model.evac_norm is None:
            model.evac_norm = Normalizer.fit(e.reshape(-1, e.shape[-1]), axis=0)
        return
    if model.feature_norm is None:
        model.feature_norm = Normalizer.fit(x.reshape(-1, x.shape[-1]), axis=0)
    if model.target_norm is None:
        model.target_norm = Normalizer.fit(y.reshape(-1), axis=0)
    if model.config.adjacency_mode == "static" and getattr(model, "static_adjacency", None) is None:
        hours = np.unique(steps)
        med = np.median(data.speed[hours], axis=0)
        tt = adjacency_series(data.graph, med[None], symmetric=model.symmetric)[0]
        model.static_adjacency = normalize_adjacency(tt, model.tau, model.adjacency_norm)


# ---------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    time_budget_s: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float
    adam: dict = field(default_factory=dict)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["epoch", "train_loss", "val_loss"])


def _loss_on(model, data, pos, batch_size) -> float:
    if len(pos) == 0:
        return float("nan")
    total = 0.0
    with ad.no_grad():
        for k in range(0, len(pos), batch_size):
            chunk = pos[k : k + batch_size]
            pred = model_output(model, data, chunk).values
            total += float(np.sum((pred - normalized_targets(model, data, chunk)) ** 2))
    return total / (len(pos) * _outputs_per_window(model))


def _outputs_per_window(model) -> int:
    base = model.pretrained if isinstance(model, TransferModel) else model
    return base.config.node_count * base.config.horizon


def train(model, data: WindowData, train_windows, val_windows, hyper: TrainConfig | None = None) -> TrainResult:
    """Mini-batch ADAM on normalized-space MSE; restores the best-validation parameters."""
    hyper = hyper or TrainConfig()
    if not train_windows:
        raise ValueError("no training windows")
    train_pos = data.positions(train_windows)
    val_pos = data.positions(val_windows) if val_windows else np.zeros(0, dtype=int)
    fit_normalizers(model, data, train_pos)

    params = model.trainable()
    opt = ad.Adam(params, lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    history = []
    best = (math.inf, 0, {k: p.values.copy() for k, p in params.items()})
    stale = 0
    started = time.perf_counter()
    for epoch in range(1, hyper.max_epochs + 1):
        order = train_pos[rng.permutation(len(train_pos))]
        total, count = 0.0, 0
        try:
            for k in range(0, len(order), hyper.batch_size):
                chunk = order[k : k + hyper.batch_size]
                pred = model_output(model, data, chunk)
                loss = ad.mse_loss(pred, normalized_targets(model, data, chunk))
                ad.backward(loss)
                opt.step()
                total += loss.item() * len(chunk)
                count += len(chunk)
            train_loss = total / count
            val_loss = _loss_on(model, data, val_pos, 256) if len(val_pos) else train_loss
        except FloatingPointError as err:
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {err}") from err
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDiverged(f"training diverged in epoch {epoch}: loss is not finite")
        history.append((epoch, train_loss, val_loss))
        if val_loss < best[0]:
            best = (val_loss, epoch, {k: p.values.copy() for k, p in params.items()})
            stale = 0
        else:
            stale += 1
        logger.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if stale >= hyper.patience:
            break
        if hyper.time_budget_s is not None and time.perf_counter() - started > hyper.time_budget_s:
            logger.info("time budget reached after epoch %d", epoch)
            break
    for k, p in params.items():
        p.values = best[2][k]
        p.grad = None
    return TrainResult(history, best[1], best[0], opt.states)


def predict_windows(model, data: WindowData, windows, batch_size: int = 256):
    """Denormalized ``(predicted, actual)`` arrays of shape ``(W, N, p)``."""
    base = model.pretrained if isinstance(model, TransferModel) else model
    pos = data.positions(windows)
    preds = []
    with ad.no_grad():
        for k in range(0, len(pos), batch_size):
            preds.append(model_output(model, data, pos[k : k + batch_size]).values)
    pred = base.target_norm.inverse(np.concatenate(preds, axis=0))
    _, _, actual, _ = data.gather(pos, base.config.input_length, base.config.horizon)
    return pred, actual


# ----------------------------------------------------------------------- metrics


def _pair(actual, predicted):
    a = np.asarray(actual, dtype=np.float64).reshape(-1)
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if a.shape != p.shape:
        raise ValueError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size == 0:
        raise ValueError("metrics need at least one value")
    return a, p


def rmse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.sqrt(np.mean((a - p) ** 2)))


def mae(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def mape(actual, predicted) -> float:
    """Percent; terms with ``|actual| < 1`` are left out of the mean."""
    a, p = _pair(actual, predicted)
    keep = np.abs(a) >= MAPE_MIN_ACTUAL
    if not keep.any():
        raise ValueError("MAPE undefined: every actual value is below 1")
    return float(100.0 * np.mean(np.abs((a[keep] - p[keep]) / a[keep])))


def smape(actual, predicted) -> float:
    """Percent, in [0, 200]; a 0/0 term counts as 0."""
    a, p = _pair(actual, predicted)
    denom = (np.abs(a) + np.abs(p)) / 2.0
    num = np.abs(a - p)
    terms = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(100.0 * np.mean(terms))


def r2(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined: actual values are constant")
    return 1.0 - float(np.sum((a - p) ** 2)) / ss_tot


METRIC_FUNCS = {"rmse": rmse, "mae": mae, "mape": mape, "r2": r2, "smape": smape}


def metric(kind: str, actual, predicted) -> float:
    try:
        fn = METRIC_FUNCS[kind]
    except KeyError:
        raise ValueError(f"unknown metric {kind!r}") from None
    return fn(actual, predicted)


def metric_set(actual, predicted) -> dict[str, float]:
    out = {}
    for kind in METRICS:
        try:
            out[kind] = metric(kind, actual, predicted)
        except ValueError:
            out[kind] = None
    return out


@dataclass
class MetricReport:
    aggregate: dict
    per_horizon: list
    run_count: int = 1
    runs: list = field(default_factory=list)
    std: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    partial: bool = False
    label: str = ""

    @classmethod
    def from_predictions(cls, actual: np.ndarray, predicted: np.ndarray, label: str = "") -> "MetricReport":
        """``actual`` / ``predicted`` shaped ``(W, N, p)``."""
        agg = metric_set(actual, predicted)
        per_h = [metric_set(actual[..., k], predicted[..., k]) for k in range(actual.shape[-1])]
        run = {"seed": None, "aggregate": agg, "per_horizon": per_h}
        return cls(agg, per_h, 1, [run], {k: 0.0 for k in METRICS}, [], False, label)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "run_count": self.run_count,
            "partial": self.partial,
            "aggregate": self.aggregate,
            "std": self.std,
            "per_horizon": self.per_horizon,
            "runs": self.runs,
            "failures": self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r, run in enumerate(self.runs):
            rows.append({"run": r, "seed": run.get("seed"), "horizon": "all", **run["aggregate"]})
            for h, m in enumerate(run["per_horizon"], start=1):
                rows.append({"run": r, "seed": run.get("seed"), "horizon": h, **m})
        rows.append({"run": "mean", "seed": None, "horizon": "all", **self.aggregate})
        for h, m in enumerate(self.per_horizon, start=1):
            rows.append({"run": "mean", "seed": None, "horizon": h, **m})
        return pd.DataFrame(rows, columns=["run", "seed", "horizon", *METRICS])


_metric_entry = {"type": ["number", "null"]}
_metric_block = {
    "type": "object",
    "properties": {k: _metric_entry for k in METRICS},
    "required": list(METRICS),
}
METRIC_REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["run_count", "partial", "aggregate", "std", "per_horizon", "runs", "failures"],
    "properties": {
        "label": {"type": "string"},
        "run_count": {"type": "integer", "minimum": 1},
        "partial": {"type": "boolean"},
        "aggregate": _metric_block,
        "std": {"type": "object"},
        "per_horizon": {"type": "array", "items": _metric_block, "minItems": 1},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["aggregate", "per_horizon"],
                "properties": {"aggregate": _metric_block, "per_horizon": {"type": "array", "items": _metric_block}},
            },
        },
        "failures": {"type": "array"},
    },
}


def _mean_std(values: list) -> tuple:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    if np.all(arr == arr[0]):
        # summation rounding would otherwise leave a ~1e-16 spread
        return float(arr[0]), 0.0
    return float(np.mean(arr)), float(np.std(arr))


def combine_runs(runs: list[dict], failures: list[dict], label: str = "") -> MetricReport:
    """Mean and population std of each metric across runs, overall and per horizon."""
    if not runs:
        raise RuntimeError(f"every run failed: {failures}")
    agg, std = {}, {}
    for k in METRICS:
        agg[k], std[k] = _mean_std([r["aggregate"][k] for r in runs])
    horizons = len(runs[0]["per_horizon"])
    per_h = [{k: _mean_std([r["per_horizon"][h][k] for r in runs])[0] for k in METRICS} for h in range(horizons)]
    return MetricReport(agg, per_h, len(runs) + len(failures), runs, std, failures, bool(failures), label)


def _run_one(experiment, seed):
    report = experiment(seed)
    return {"seed": seed, "aggregate": report.aggregate, "per_horizon": report.per_horizon}


def repeat_runs(
    experiment: Callable[[int], MetricReport],
    n: int = 10,
    seeds: Sequence[int] | None = None,
    base_seed: int = 0,
    workers: int = 1,
    label: str = "",
) -> MetricReport:
    """Run ``experiment(seed)`` for ``n`` seeds (default ``base_seed + i``) and aggregate."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = list(seeds) if seeds is not None else [base_seed + i for i in range(n)]
    if len(seeds) != n or len(set(seeds)) != n:
        raise ValueError("need n distinct seeds")
    runs, failures = [], []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, experiment, s) for s in seeds]
            results = []
            for s, fut in zip(seeds, futures):
                try:
                    results.append(fut.result())
                except Exception as err:  # noqa: BLE001 - reported, not raised
                    failures.append({"seed": s, "error": f"{type(err).__name__}: {err}"})
            runs = results
    else:
        for s in seeds:
            try:
                runs.append(_run_one(experiment, s))
            except Exception as err:  # noqa: BLE001 - reported, not raised
                logger.warning("run with seed %d failed: %s", s, err)
                failures.append({"seed": s, "error": f"{type(err).__name__}: {err}"})
    return combine_runs(runs, failures, label)
