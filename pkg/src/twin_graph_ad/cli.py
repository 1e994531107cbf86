"""Command-line entry point: synth, templates, preprocess, train, detect, eval, report.

All commands share one JSON run config (``--config``) and one run directory
(``--out``)::

    <out>/raw/           synth output (metrics.csv, logs.jsonl, spans.jsonl, labels.csv, truth.json)
    <out>/templates.json mined log templates
    <out>/dataset/       windowed graph dataset + normalisation stats
    <out>/model/         checkpoint (manifest.json, tensors.bin, config.json)
    <out>/history.csv    per-epoch losses
    <out>/decisions.csv  per (timestamp, instance) scores and decisions
    <out>/metrics.json   evaluation report
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import detection, graph, synth, telemetry, training
from .network import ModelConfig, TwinGraphModel

log = logging.getLogger("twin_graph_ad")

_MODEL_DIMS = ("n_instances", "n_metrics", "n_log_features", "n_request_types", "window")

DEFAULTS = {
    "seed": 0,
    "paths": {
        "metrics": "raw/metrics.csv",
        "logs": "raw/logs.jsonl",
        "spans": "raw/spans.jsonl",
        "labels": "raw/labels.csv",
        "truth": "raw/truth.json",
    },
    "interval": 1,
    "instances": None,
    "request_types": None,
    "split": [0.6, 0.1, 0.3],
    "unlabeled_fraction": 0.5,
    "variance_threshold": 1e-8,
    "epsilon": 1e-6,
    "miner": {"depth": 4, "sim_threshold": 0.4, "max_children": 100},
    "match_threshold": 0.4,
    "model": {f.name: f.default for f in fields(ModelConfig) if f.name not in _MODEL_DIMS + ("seed",)},
    "loss": {k: v for k, v in training.LossConfig().to_dict().items() if k not in ("n_a", "n_n", "seed")},
    "detect": {"mode": "auto", "batch_size": 200, "fallback_std": 3.0},
    "train": {"max_seconds": None},
    "synth": {k: v for k, v in synth.SynthConfig().to_dict().items() if k != "seed"},
}
DEFAULTS["model"]["window"] = 10


class CliError(Exception):
    """User-facing error; printed without a traceback."""


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None):
    """Defaults overlaid with the JSON file at ``path`` and ``--seed``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        try:
            cfg = _merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise CliError(f"{p}: invalid JSON ({exc})") from None
    if seed is not None:
        cfg["seed"] = int(seed)
    split = cfg["split"]
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise CliError(f"split fractions must be three non-negative numbers summing to 1, got {split}")
    if not 0.0 <= cfg["unlabeled_fraction"] <= 1.0:
        raise CliError("unlabeled_fraction must lie in [0, 1]")
    return cfg


def _path(out, p):
    p = Path(p)
    return p if p.is_absolute() else Path(out) / p


def _require(path, hint):
    if not Path(path).exists():
        raise CliError(f"missing {path} ({hint})")
    return Path(path)


# -- commands -------------------------------------------------------------------
def run_synth(cfg, out):
    scfg = synth.SynthConfig.from_dict({**cfg["synth"], "seed": cfg["seed"]})
    result = synth.generate(scfg, Path(out) / "raw")
    return result


def _read_logs(cfg, out):
    return telemetry.read_logs_jsonl(_require(_path(out, cfg["paths"]["logs"]), "logs input; run `synth` or set paths.logs"))


def _canonical(logs):
    return sorted(logs, key=lambda r: (r.timestamp, r.instance_id, r.message))


def run_templates(cfg, out, logs=None, until=None):
    """Mine templates (from logs before ``until`` if given) and write templates.json."""
    logs = _read_logs(cfg, out) if logs is None else logs
    if until is not None:
        logs = [r for r in logs if r.timestamp < until]
    templates, _ = telemetry.mine_log_templates(_canonical(logs), telemetry.MinerConfig(**cfg["miner"]))
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "templates.json").write_text(telemetry.templates_to_json(templates))
    return templates


def run_preprocess(cfg, out):
    paths = cfg["paths"]
    names, metrics = telemetry.read_metrics_csv(_require(_path(out, paths["metrics"]), "metrics input; run `synth` or set paths.metrics"))
    logs = _read_logs(cfg, out)
    spans = telemetry.read_spans_jsonl(_require(_path(out, paths["spans"]), "spans input; run `synth` or set paths.spans"))
    label_path = _path(out, paths["labels"]) if paths.get("labels") else None
    labels_in = telemetry.read_labels_csv(label_path) if label_path is not None and label_path.exists() else {}
    if not metrics:
        raise CliError("metrics input is empty")

    interval = int(cfg["interval"])
    instances = cfg["instances"] or sorted({m.instance_id for m in metrics})
    spans, dropped = telemetry.resolve_callers(spans)
    rtypes = cfg["request_types"] or sorted({s.request_type for s in spans})
    if not rtypes:
        raise CliError("no spans found: at least one request type is needed")
    start = min(m.timestamp for m in metrics)
    T = (max(m.timestamp for m in metrics) - start) // interval + 1
    k = int(cfg["model"]["window"])
    train_end, val_end, test_end = graph.split_ends(T, k, cfg["split"])
    if len(train_end) == 0:
        raise CliError(f"{T} timestamps leave no training window of length {k}")
    b1 = int(round(T * cfg["split"][0]))

    templates = run_templates(cfg, out, logs=logs, until=start + b1 * interval)
    matcher = telemetry.TemplateMatcher(templates, cfg["match_threshold"])
    log_ids = [(r.timestamp, r.instance_id, matcher(r.message)) for r in logs]
    series = telemetry.bucket(metrics, log_ids, spans, interval, instances, rtypes, n_metrics=len(names),
                              n_log_features=len(templates) + 1, start=start, n_buckets=T, metric_names=names)
    series.report["spans_unresolved_caller"] = dropped
    A = graph.build_adjacency(series.calls[:b1])
    train_raw = series.slice(0, b1)
    _, keep = telemetry.filter_low_variance_metrics(train_raw, cfg["variance_threshold"])
    series, _ = telemetry.filter_low_variance_metrics(series, cfg["variance_threshold"], keep=keep)
    stats = telemetry.fit_normalization(series.slice(0, b1), cfg["epsilon"], metric_keep=keep)
    norm = telemetry.normalize(series, stats)
    graphs = graph.build_graphs(norm, A)

    row = {ts: t for t, ts in enumerate(series.timestamps.tolist())}
    col = {name: i for i, name in enumerate(instances)}
    labels = np.full((T, len(instances)), -1, dtype=np.int64)
    for (ts, inst), lab in labels_in.items():
        if ts in row and inst in col:
            labels[row[ts], col[inst]] = lab
    truth_path = _path(out, paths["truth"]) if paths.get("truth") else None
    if truth_path is not None and truth_path.exists():
        truth = synth.truth_labels(json.loads(truth_path.read_text()), series.timestamps, instances)
    else:
        truth = labels.copy()
    rng = np.random.default_rng(cfg["seed"])
    hide = (rng.random(labels[:b1].shape) < cfg["unlabeled_fraction"]) & (labels[:b1] >= 0)
    labels[:b1][hide] = -1

    ds = graph.WindowDataset(graphs, labels, k, np.arange(k - 1, T), series.timestamps, instances)
    extra = {"truth": truth, **stats.to_arrays()}
    meta = {"request_types": rtypes, "metric_names": series.metric_names, "interval": interval,
            "start": int(start), "n_templates": len(templates), "epsilon": stats.epsilon,
            "ingest_report": {k2: int(v) for k2, v in series.report.items()}}
    graph.save_dataset(Path(out) / "dataset", ds, {"train": train_end, "val": val_end, "test": test_end}, extra, meta)
    log.info("preprocess: T=%d N=%d F_m=%d F_l=%d F_s=%d edges=%d train/val/test windows=%d/%d/%d",
             T, len(instances), series.M.shape[2], len(templates) + 1, len(rtypes), int(A.sum()),
             len(train_end), len(val_end), len(test_end))
    return ds


def _load_dataset(out):
    d = Path(out) / "dataset"
    _require(d / "manifest.json", "windowed dataset; run `preprocess` first")
    return graph.load_dataset(d)


def model_config(cfg, ds):
    g = ds.graphs
    dims = dict(n_instances=g.V.shape[1], n_metrics=g.n_metrics, n_log_features=g.V.shape[2] - g.n_metrics,
                n_request_types=g.E.shape[-1], window=ds.k)
    m = {k: v for k, v in cfg["model"].items() if k != "window"}
    return ModelConfig(**dims, **m, seed=cfg["seed"])


def run_train(cfg, out):
    ds, splits, _, meta = _load_dataset(out)
    train_ds, val_ds = ds.subset(splits["train"]), ds.subset(splits["val"])
    n_a, n_n = training.class_counts(train_ds.window_labels())
    lcfg = training.LossConfig.from_dict({**cfg["loss"], "n_a": n_a, "n_n": n_n, "seed": cfg["seed"]})
    mcfg = model_config(cfg, ds)
    model = TwinGraphModel(mcfg, ds.graphs.A)
    t0 = time.perf_counter()
    result = training.train(model, train_ds, val_ds, lcfg, history_path=Path(out) / "history.csv",
                            max_seconds=cfg["train"].get("max_seconds"))
    log.info("train: %d epochs in %.1f s, best epoch %d", result.epochs_run, time.perf_counter() - t0, result.best_epoch)
    model.save(Path(out) / "model", {"loss_config": lcfg.to_dict(), "best_epoch": result.best_epoch,
                                     "epochs_run": result.epochs_run, "stopped_early": result.stopped_early,
                                     "instances": meta.get("instances", [])})
    return model, result


def _load_model(out):
    d = Path(out) / "model"
    _require(d / "config.json", "model checkpoint; run `train` first")
    return TwinGraphModel.load(d)


def run_detect(cfg, out):
    ds, splits, _, meta = _load_dataset(out)
    model, mmeta = _load_model(out)
    dcfg = cfg["detect"]
    mode = dcfg["mode"]
    if mode == "auto":
        mode = "classifier" if mmeta.get("loss_config", {}).get("n_a", 0) > 0 else "threshold"
    val = detection.score_stream(model, ds.subset(splits["val"]), dcfg["batch_size"])
    val_labels = ds.labels[val.ends]
    try:
        thr, source = detection.select_threshold(val.re, val_labels), "validation_f1"
    except ValueError:
        thr, source = detection.fallback_threshold(val.re, dcfg["fallback_std"]), "mean_plus_std"
    test = detection.score_stream(model, ds.subset(splits["test"]), dcfg["batch_size"])
    decided = detection.decide(test, mode, thr)
    decisions = detection.decisions_from_table(test, decided, ds.timestamps, meta["instances"], mode)
    detection.write_decisions_csv(Path(out) / "decisions.csv", decisions)
    info = {"mode": mode, "threshold": thr, "threshold_source": source, "n_windows": int(len(test.ends))}
    (Path(out) / "detect.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    return decisions, info


def run_eval(cfg, out):
    ds, _, arrays, meta = _load_dataset(out)
    dec_path = _require(Path(out) / "decisions.csv", "decisions; run `detect` first")
    info_path = Path(out) / "detect.json"
    mode = json.loads(info_path.read_text())["mode"] if info_path.exists() else "classifier"
    decisions = detection.read_decisions_csv(dec_path, mode)
    row = {int(ts): t for t, ts in enumerate(ds.timestamps.tolist())}
    col = {name: i for i, name in enumerate(meta["instances"])}
    truth = arrays["truth"].astype(np.int64)
    labels, score, decided = [], [], []
    for d in decisions:
        t, i = row.get(d.timestamp), col.get(d.instance_id)
        if t is None or i is None:
            raise CliError(f"decision for unknown (timestamp, instance) = ({d.timestamp}, {d.instance_id})")
        labels.append(truth[t, i])
        score.append(d.p_abnormal if mode == "classifier" else d.re)
        decided.append(d.decided)
    try:
        report = detection.evaluate(score, labels, decided)
    except ValueError as exc:
        raise CliError(f"cannot evaluate: {exc}") from None
    (Path(out) / "metrics.json").write_text(report.to_json(mode=mode, n_evaluated=int(np.sum(np.asarray(labels) >= 0))))
    return report


def run_report(cfg, out, extra=()):
    paths = [Path(out) / "metrics.json", *map(Path, extra)] if out else list(map(Path, extra))
    rows = []
    for p in paths:
        _require(p, "metrics report; run `eval` first")
        name = p.parent.name or str(p)
        rows.append((name, json.loads(p.read_text())))
    text = detection.format_report(rows)
    if out:
        (Path(out) / "report.txt").write_text(text)
    return text


COMMANDS = {
    "synth": "generate synthetic telemetry into <out>/raw",
    "templates": "mine log templates into <out>/templates.json",
    "preprocess": "bucket, normalise and window telemetry into <out>/dataset",
    "train": "train a model on <out>/dataset into <out>/model",
    "detect": "score the test split into <out>/decisions.csv",
    "eval": "evaluate decisions against ground truth into <out>/metrics.json",
    "report": "print a PR/RC/F1/AUC/AP table from metrics.json files",
}


def configure_logging():
    level = os.environ.get("TWIN_GRAPH_AD_LOG", "WARNING").strip().upper()
    numeric = int(level) if level.isdigit() else getattr(logging, level, None)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def build_parser():
    p = argparse.ArgumentParser(prog="twin-graph-ad", description="Multi-modal twin-graph anomaly detection.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run config (defaults are used for missing keys)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", default="run", help="run directory (default: ./run)")
        if name == "report":
            sp.add_argument("metrics", nargs="*", help="additional metrics.json files to tabulate")
    sub.add_parser("defaults", help="print the default run config")
    return p


def main(argv=None):
    configure_logging()
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        print(json.dumps(DEFAULTS, indent=1, sort_keys=True))
        return 0
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        if args.command == "synth":
            run_synth(cfg, out)
        elif args.command == "templates":
            t = run_templates(cfg, out)
            print(f"{len(t)} templates -> {out / 'templates.json'}")
        elif args.command == "preprocess":
            run_preprocess(cfg, out)
        elif args.command == "train":
            _, res = run_train(cfg, out)
            print(f"trained {res.epochs_run} epochs (best {res.best_epoch}) -> {out / 'model'}")
        elif args.command == "detect":
            _, info = run_detect(cfg, out)
            print(f"{info['n_windows']} windows scored ({info['mode']}) -> {out / 'decisions.csv'}")
        elif args.command == "eval":
            r = run_eval(cfg, out)
            print(f"F1 {r.f1:.4f} AUC {r.roc_auc:.4f} -> {out / 'metrics.json'}")
        elif args.command == "report":
            sys.stdout.write(run_report(cfg, out, args.metrics))
    except (CliError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, training.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
