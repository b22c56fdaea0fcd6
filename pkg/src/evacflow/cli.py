"""``evacflow`` command-line entry point.

Every command reads the experiment config, consumes files written by upstream
commands (or raw inputs), and writes its artifacts plus a ``manifest.json``
into ``<output_dir>/<stage>/``:

    synth            -> data/        synthetic raw inputs
    ingest-detectors -> ingest/      QC + imputed detector series, cleaned graph
    ingest-movement  -> movement/    hourly detector inflow/outflow and baseline
    build-features   -> features/    traffic features and evacuation inputs
    train            -> train/       regular-period forecaster checkpoint, metrics
    transfer         -> transfer/    transfer-learned model checkpoint, metrics
    evaluate         -> evaluate/    metric reports on held-out windows
    predict          -> predict/     per-window prediction dump
    report           -> report/      summary tables

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from functools import partial
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
import scipy

from . import __version__
from .autodiff import ShapeError
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .detectors import engineer_features, frame_to_arrays, impute, qc_filter, read_detector_csv, read_feature_csv
from .detectors import write_detector_csv, write_feature_csv
from .experiments import (
    EVAC_STATIC_COLUMNS,
    MOVEMENT_COLUMNS,
    evac_feature_array,
    evaluate,
    fit_transfer,
    prediction_frame,
    restrict_graph,
    train_forecaster,
    windows_for,
)
from .graph import read_graph_csv, write_graph_csv
from .models import ModelConfig
from .movement import (
    aggregate_to_subdivision,
    assign_detectors,
    accumulate_flows,
    baseline_movement,
    filter_intra,
    hourly_movement,
    read_centroids,
    read_hourly_csv,
    read_movement_csv,
    read_tile_map,
    write_hourly_csv,
)
from .persistence import load_any, load_forecaster, load_transfer, model_feature_counts, save_forecaster, save_transfer
from .synthetic import write_scenario
from .training import METRIC_REPORT_SCHEMA, MetricReport, TrainConfig, WindowData, combine_runs, repeat_runs, split
from .transfer import TransferConfig, TransferModel

logger = logging.getLogger("evacflow")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DEFAULT_CONFIG = Path(__file__).with_name("default_config.json")


class MissingArtifact(FileNotFoundError):
    pass


# -------------------------------------------------------------------- helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing upstream artifact: {path}")
    return path


def stage_dir(cfg: ExperimentConfig, name: str) -> Path:
    d = cfg.output_dir / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def versions() -> dict:
    return {
        "evacflow": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
    }


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "config_source": cfg.source,
        "config": cfg.data,
        "seed": cfg.seed,
        "inputs": {str(p): sha256_file(p) for p in sorted(map(str, inputs))},
        "outputs": {Path(p).name: sha256_file(p) for p in sorted(map(str, outputs))},
        "versions": versions(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_report(path: Path, report: MetricReport) -> None:
    doc = report.to_dict()
    jsonschema.validate(doc, METRIC_REPORT_SCHEMA)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def model_config(cfg: ExperimentConfig, nodes: int, features: int) -> ModelConfig:
    m = cfg.data["model"]
    return ModelConfig(nodes, features, m["hidden_size"], m["input_length"], m["horizon"], m["adjacency_mode"])


def train_config(cfg: ExperimentConfig, key: str) -> TrainConfig:
    return TrainConfig(**cfg.data[key], seed=cfg.seed)


def run_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.seed + i for i in range(cfg.runs)]


# ---------------------------------------------------------------- data loading


def traffic_data(cfg: ExperimentConfig, period: str) -> tuple[WindowData, list[Path]]:
    graph_path = require(cfg.output_dir / "ingest" / "graph.csv")
    feat_path = require(cfg.output_dir / "features" / f"traffic_{period}.csv")
    graph = read_graph_csv(graph_path)
    stamps, feats, flow, speed = frame_to_arrays(read_feature_csv(feat_path), graph)
    return WindowData(graph, stamps, feats, flow, speed), [graph_path, feat_path]


def evacuation_data(cfg: ExperimentConfig, use_movement: bool) -> tuple[WindowData, list[Path]]:
    data, used = traffic_data(cfg, "evacuation")
    evac_path = require(cfg.output_dir / "features" / "evacuation_inputs.csv")
    frame = pd.read_csv(evac_path, dtype={"detector_id": str}, float_precision="round_trip")
    data.evac = evac_feature_array(frame, data.timestamps, data.graph.ids, use_movement)
    return data, used + [evac_path]


def check_dims(model, data: WindowData) -> None:
    dims = model_feature_counts(model)
    got = {"nodes": data.graph.size, "traffic": data.features.shape[-1]}
    if data.evac is not None and "evac" in dims:
        got["evac"] = data.evac.shape[-1]
    for k, v in got.items():
        if dims.get(k) != v:
            raise ShapeError(f"checkpoint expects {dims} but the features provide {got} ({k} differs)")


# ------------------------------------------------------------------- commands


def cmd_synth(cfg: ExperimentConfig) -> None:
    out = stage_dir(cfg, "data")
    scenario = cfg.scenario()
    paths = write_scenario(out, scenario)
    write_manifest(out, "synth", cfg, [], paths.values())


def cmd_ingest_detectors(cfg: ExperimentConfig) -> None:
    out = stage_dir(cfg, "ingest")
    inputs = [require(cfg.input_path(k)) for k in ("graph", "detectors_regular", "detectors_evacuation")]
    graph = read_graph_csv(inputs[0])
    report, cleaned = {}, {}
    keep = set(graph.ids)
    for period, path in (("regular", inputs[1]), ("evacuation", inputs[2])):
        retained, qc = qc_filter(read_detector_csv(path, graph))
        report[period] = {"qc": qc}
        cleaned[period] = retained
        keep &= {s.detector_id for s in retained}
    if not keep:
        raise ValueError("no detector passed quality control in both periods")
    graph = restrict_graph(graph, keep)
    outputs = [out / "graph.csv"]
    write_graph_csv(graph, outputs[0])
    for period, series in cleaned.items():
        series = [s for s in series if s.detector_id in keep]
        filled, imp = impute(series, graph)
        report[period]["imputation"] = imp
        path = out / f"detectors_{period}.csv"
        write_detector_csv(filled, path)
        outputs.append(path)
    (out / "quality_report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
    outputs.append(out / "quality_report.json")
    write_manifest(out, "ingest-detectors", cfg, inputs, outputs)


def _network_flow(series) -> pd.Series:
    frame = pd.concat(
        [pd.Series(s.volume, index=pd.DatetimeIndex(s.timestamps.astype("datetime64[ns]"))) for s in series], axis=1
    )
    return frame.sum(axis=1)


def _movement_hourly(movements, tile_map, centroids, graph, network, count):
    od = filter_intra(aggregate_to_subdivision(movements, tile_map, count))
    flows = accumulate_flows(assign_detectors(od, centroids, graph), graph.ids)
    return hourly_movement(flows, network)


def cmd_ingest_movement(cfg: ExperimentConfig) -> None:
    out = stage_dir(cfg, "movement")
    graph_path = require(cfg.output_dir / "ingest" / "graph.csv")
    det_evac = require(cfg.output_dir / "ingest" / "detectors_evacuation.csv")
    det_reg = require(cfg.output_dir / "ingest" / "detectors_regular.csv")
    inputs = [graph_path, det_evac, det_reg] + [
        require(cfg.input_path(k)) for k in ("movement_evacuation", "movement_regular", "tile_map", "centroids")
    ]
    graph = read_graph_csv(graph_path)
    tile_map = read_tile_map(inputs[5])
    centroids = read_centroids(inputs[6])

    evac_net = _network_flow(read_detector_csv(det_evac, graph))
    hourly = _movement_hourly(read_movement_csv(inputs[3]), tile_map, centroids, graph, evac_net, "crisis_count")
    reg_net = _network_flow(read_detector_csv(det_reg, graph))
    regular = _movement_hourly(read_movement_csv(inputs[4]), tile_map, centroids, graph, reg_net, "crisis_count")
    baseline = baseline_movement(regular, graph.ids)

    outputs = [out / "hourly_movement.csv", out / "baseline_movement.csv"]
    write_hourly_csv(hourly, outputs[0])
    baseline.to_csv(outputs[1], index=False)
    write_manifest(out, "ingest-movement", cfg, inputs, outputs)


def cmd_build_features(cfg: ExperimentConfig) -> None:
    out = stage_dir(cfg, "features")
    graph_path = require(cfg.output_dir / "ingest" / "graph.csv")
    graph = read_graph_csv(graph_path)
    inputs = [graph_path]
    outputs = []
    for period in ("regular", "evacuation"):
        src = require(cfg.output_dir / "ingest" / f"detectors_{period}.csv")
        inputs.append(src)
        path = out / f"traffic_{period}.csv"
        write_feature_csv(engineer_features(read_detector_csv(src, graph)), path)
        outputs.append(path)

    evac_src = require(cfg.input_path("evacuation_features"))
    hourly_src = require(cfg.output_dir / "movement" / "hourly_movement.csv")
    inputs += [evac_src, hourly_src]
    evac = pd.read_csv(evac_src, dtype={"detector_id": str}, float_precision="round_trip")
    evac["timestamp"] = pd.to_datetime(evac.timestamp)
    hourly = read_hourly_csv(hourly_src).rename(columns={"inflow": "fb_inflow", "outflow": "fb_outflow"})
    merged = evac.merge(hourly[["detector_id", "timestamp", *MOVEMENT_COLUMNS]], on=["detector_id", "timestamp"], how="left")
    # hours outside the movement windows carry no movement
    merged[MOVEMENT_COLUMNS] = merged[MOVEMENT_COLUMNS].fillna(0.0)
    merged = merged[merged.detector_id.isin(graph.ids)]
    merged = merged[["detector_id", "timestamp", *EVAC_STATIC_COLUMNS, *MOVEMENT_COLUMNS]]
    path = out / "evacuation_inputs.csv"
    write_feature_csv(merged, path)
    outputs.append(path)
    write_manifest(out, "build-features", cfg, inputs, outputs)


def _regular_run(cfg: ExperimentConfig, data: WindowData, seed: int):
    m = cfg.data["model"]
    return train_forecaster(
        data,
        model_config(cfg, data.graph.size, data.features.shape[-1]),
        train_config(cfg, "training"),
        seed,
        tuple(cfg.data["split"]["regular"]),
        m["adjacency_norm"],
        m["symmetric"],
    )


def _regular_experiment(cfg: ExperimentConfig, data: WindowData, seed: int) -> MetricReport:
    fit = _regular_run(cfg, data, seed)
    return evaluate(fit.model, data, fit.test, "regular")


def cmd_train(cfg: ExperimentConfig) -> None:
    out = stage_dir(cfg, "train")
    data, inputs = traffic_data(cfg, "regular")
    fit = _regular_run(cfg, data, cfg.seed)
    ckpt = out / "model.npz"
    save_forecaster(ckpt, fit.model, fit.result.adam, {"seed": cfg.seed, "config_sha256": cfg.digest()})
    fit.result.history_frame().to_csv(out / "loss_history.csv", index=False)
    first = evaluate(fit.model, data, fit.test, "regular")
    report = _with_first_run(cfg, first, partial(_regular_experiment, cfg, data), "regular")
    write_report(out / "metric_report.json", report)
    report.to_frame().to_csv(out / "metrics.csv", index=False)
    write_manifest(out, "train", cfg, inputs, [ckpt, out / "loss_history.csv", out / "metric_report.json", out / "metrics.csv"])


def _with_first_run(cfg, first: MetricReport, experiment, label: str) -> MetricReport:
    """Reuse the already-trained first run; train the remaining seeds through ``repeat_runs``."""
    runs = [{"seed": cfg.seed, "aggregate": first.aggregate, "per_horizon": first.per_horizon}]
    failures = []
    if cfg.runs > 1:
        rest = repeat_runs(experiment, cfg.runs - 1, run_seeds(cfg)[1:], workers=cfg.data["workers"], label=label)
        runs += rest.runs
        failures = rest.failures
    return combine_runs(runs, failures, label)


def _transfer_run(cfg: ExperimentConfig, pretrained_path: Path, data: WindowData, seed: int):
    pretrained, _ = load_forecaster(pretrained_path)
    check_dims(pretrained, data)
    t = cfg.data["transfer"]
    tc = TransferConfig(data.evac.shape[-1], t["hidden_size"])
    return fit_transfer(pretrained, data, tc, train_config(cfg, "transfer_training"), seed,
                        tuple(cfg.data["split"]["evacuation"]))


def _transfer_experiment(cfg, pretrained_path, data, seed) -> MetricReport:
    fit = _transfer_run(cfg, pretrained_path, data, seed)
    return evaluate(fit.model, data, fit.test, "transfer")


def cmd_transfer(cfg: ExperimentConfig) -> None:
    out = stage_dir(cfg, "transfer")
    pre_path = require(cfg.output_dir / "train" / "model.npz")
    data, inputs = evacuation_data(cfg, cfg.data["transfer"]["use_movement"])
    fit = _transfer_run(cfg, pre_path, data, cfg.seed)
    ckpt = out / "transfer.npz"
    save_transfer(ckpt, fit.model, pre_path, fit.result.adam, {"seed": cfg.seed, "config_sha256": cfg.digest(),
                  "use_movement": cfg.data["transfer"]["use_movement"]})
    fit.result.history_frame().to_csv(out / "loss_history.csv", index=False)
    first = evaluate(fit.model, data, fit.test, "transfer")
    report = _with_first_run(cfg, first, partial(_transfer_experiment, cfg, pre_path, data), "transfer")
    write_report(out / "metric_report.json", report)
    report.to_frame().to_csv(out / "metrics.csv", index=False)
    outputs = [ckpt, out / "loss_history.csv", out / "metric_report.json", out / "metrics.csv"]
    write_manifest(out, "transfer", cfg, inputs + [pre_path], outputs)


def _test_windows(cfg: ExperimentConfig, model, data: WindowData, seed: int):
    base = model.pretrained if isinstance(model, TransferModel) else model
    ratios = cfg.data["split"]["evacuation" if data.evac is not None else "regular"]
    windows = windows_for(data, base.config.input_length, base.config.horizon)
    return split(windows, tuple(ratios), seed)[2]


def _data_for(cfg: ExperimentConfig, model, meta: dict):
    if isinstance(model, TransferModel):
        return evacuation_data(cfg, bool(meta.get("use_movement", True)))
    return traffic_data(cfg, "regular")


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str | None = None) -> None:
    out = stage_dir(cfg, "evaluate")
    outputs, inputs = [], []
    if checkpoint is not None:
        path = require(checkpoint)
        model, meta = load_any(path)
        data, used = _data_for(cfg, model, meta)
        check_dims(model, data)
        report = evaluate(model, data, _test_windows(cfg, model, data, meta.get("seed", cfg.seed)), model.kind)
        write_report(out / "metric_report.json", report)
        write_manifest(out, "evaluate", cfg, used + [path], [out / "metric_report.json"])
        return

    pre_path = require(cfg.output_dir / "train" / "model.npz")
    pretrained, meta = load_forecaster(pre_path)
    data, used = traffic_data(cfg, "regular")
    check_dims(pretrained, data)
    inputs += used + [pre_path]
    report = evaluate(pretrained, data, _test_windows(cfg, pretrained, data, meta["seed"]), "pretrained/regular")
    write_report(out / "metric_report.json", report)
    outputs.append(out / "metric_report.json")

    tr_path = cfg.output_dir / "transfer" / "transfer.npz"
    if tr_path.exists():
        model, tmeta = load_transfer(tr_path, pre_path)
        evac, used = evacuation_data(cfg, bool(tmeta.get("use_movement", True)))
        check_dims(model, evac)
        inputs += used + [tr_path]
        test = _test_windows(cfg, model, evac, tmeta["seed"])
        for name, m in (("pretrained_evacuation", model.pretrained), ("transfer_evacuation", model)):
            path = out / f"{name}.json"
            write_report(path, evaluate(m, evac, test, name.replace("_", "/")))
            outputs.append(path)
    write_manifest(out, "evaluate", cfg, sorted(set(inputs)), outputs)


def cmd_predict(cfg: ExperimentConfig, checkpoint: str | None = None) -> None:
    out = stage_dir(cfg, "predict")
    if checkpoint is None:
        tr = cfg.output_dir / "transfer" / "transfer.npz"
        checkpoint = tr if tr.exists() else cfg.output_dir / "train" / "model.npz"
    path = require(checkpoint)
    model, meta = load_any(path)
    data, used = _data_for(cfg, model, meta)
    check_dims(model, data)
    frame = prediction_frame(model, data, _test_windows(cfg, model, data, meta.get("seed", cfg.seed)))
    frame.to_csv(out / "predictions.csv", index=False)
    write_manifest(out, "predict", cfg, used + [path], [out / "predictions.csv"])


def cmd_report(cfg: ExperimentConfig) -> None:
    out = stage_dir(cfg, "report")
    sources = {
        "regular (test)": cfg.output_dir / "train" / "metric_report.json",
        "transfer (test)": cfg.output_dir / "transfer" / "metric_report.json",
        "pretrained on evacuation": cfg.output_dir / "evaluate" / "pretrained_evacuation.json",
        "transfer on evacuation": cfg.output_dir / "evaluate" / "transfer_evacuation.json",
    }
    found = {k: p for k, p in sources.items() if p.exists()}
    if not found:
        raise MissingArtifact(f"missing upstream artifact: {sources['regular (test)']}")
    rows, horizons = [], []
    for name, p in found.items():
        doc = json.loads(p.read_text())
        rows.append({"model": name, "runs": doc["run_count"], **doc["aggregate"],
                     **{f"{k}_std": v for k, v in doc["std"].items()}})
        for h, m in enumerate(doc["per_horizon"], start=1):
            horizons.append({"model": name, "horizon": h, **m})
    pd.DataFrame(rows).to_csv(out / "summary.csv", index=False)
    pd.DataFrame(horizons).to_csv(out / "per_horizon.csv", index=False)
    (out / "summary.json").write_text(json.dumps({"models": rows, "per_horizon": horizons}, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "report", cfg, found.values(), [out / "summary.csv", out / "per_horizon.csv", out / "summary.json"])


COMMANDS = {
    "synth": cmd_synth,
    "ingest-detectors": cmd_ingest_detectors,
    "ingest-movement": cmd_ingest_movement,
    "build-features": cmd_build_features,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (default: bundled default_config.json)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--runs", type=int, help="override the number of repeated runs")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="evacflow", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("evaluate", "predict"):
            p.add_argument("--checkpoint", help="evaluate this checkpoint instead of the pipeline's")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else load_config(DEFAULT_CONFIG)
        cfg = cfg.with_overrides(args.seed, args.out, args.runs)
        if not args.config and args.out is None:
            cfg = cfg.with_overrides(out=Path.cwd() / cfg.data["output_dir"])
        kwargs = {"checkpoint": args.checkpoint} if args.command in ("evaluate", "predict") else {}
        COMMANDS[args.command](cfg, **kwargs)
    except (ConfigError, ShapeError, FileNotFoundError, CheckpointError, jsonschema.ValidationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001 - reported as a runtime failure
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
