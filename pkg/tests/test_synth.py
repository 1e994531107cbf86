import json

import numpy as np
import pytest

from twin_graph_ad import synth, telemetry as tm

FILES = ("metrics.csv", "logs.jsonl", "spans.jsonl", "labels.csv", "truth.json")


def small(**kw):
    base = dict(seed=3, n_instances=4, n_timestamps=300, edge_prob=0.8, anomaly_rate=0.05)
    base.update(kw)
    return synth.SynthConfig(**base)


def files(d):
    return {f: (d / f).read_bytes() for f in FILES}


def test_same_seed_identical_files(tmp_path):
    synth.generate(small(), tmp_path / "a")
    synth.generate(small(), tmp_path / "b")
    assert files(tmp_path / "a") == files(tmp_path / "b")
    synth.generate(small(seed=4), tmp_path / "c")
    assert files(tmp_path / "a")["metrics.csv"] != files(tmp_path / "c")["metrics.csv"]


def test_zero_rate_all_normal():
    res = synth.generate(small(anomaly_rate=0.0, label_known_fraction=0.7))
    assert res["truth"].max() == 0
    assert set(np.unique(res["labels"])) <= {-1, 0}
    assert res["manifest"]["events"] == []


def test_rate_within_tolerance():
    res = synth.generate(synth.SynthConfig(seed=0, n_instances=5, n_timestamps=4000, anomaly_rate=0.05))
    assert abs(res["truth"].mean() - 0.05) <= 0.2 * 0.05


def test_label_mask_fraction():
    res = synth.generate(small(n_timestamps=2000, label_known_fraction=0.5))
    known = (res["labels"] >= 0).mean()
    assert abs(known - 0.5) < 0.03
    m = res["labels"] >= 0
    assert np.array_equal(res["labels"][m], res["truth"][m])


@pytest.mark.parametrize("kind, changed", [("cpu_spike", {"metrics.csv"}), ("log_burst", {"logs.jsonl"}),
                                           ("latency_inflation", {"spans.jsonl"}),
                                           ("silent_service", {"metrics.csv", "logs.jsonl", "spans.jsonl"})])
def test_anomaly_touches_only_its_modality(tmp_path, kind, changed):
    synth.generate(small(anomaly_kinds=(kind,)), tmp_path / "x")
    synth.generate(small(anomaly_rate=0.0), tmp_path / "clean")
    a, b = files(tmp_path / "x"), files(tmp_path / "clean")
    diff = {f for f in ("metrics.csv", "logs.jsonl", "spans.jsonl") if a[f] != b[f]}
    assert diff == changed


def test_latency_inflation_changes_durations_only(tmp_path):
    synth.generate(small(anomaly_kinds=("latency_inflation",)), tmp_path / "x")
    synth.generate(small(anomaly_rate=0.0), tmp_path / "clean")
    a = tm.read_spans_jsonl(tmp_path / "x/spans.jsonl")
    b = tm.read_spans_jsonl(tmp_path / "clean/spans.jsonl")
    assert len(a) == len(b)
    strip = lambda s: (s.trace_id, s.span_id, s.caller_instance, s.callee_instance, s.start_ts, s.finished)
    assert [strip(s) for s in a] == [strip(s) for s in b]
    ratio = [x.duration / y.duration for x, y in zip(a, b) if x.duration != y.duration]
    assert ratio and min(ratio) >= 4 * 0.999


def test_impossible_config():
    with pytest.raises(ValueError, match="no edges"):
        synth.generate(synth.SynthConfig(n_instances=2, edge_prob=0.0, anomaly_kinds=("latency_inflation",)))
    with pytest.raises(ValueError):
        synth.SynthConfig(n_instances=1)
    with pytest.raises(ValueError):
        synth.SynthConfig(anomaly_rate=0.6)
    with pytest.raises(ValueError):
        synth.SynthConfig(anomaly_kinds=("meteor",))


def test_outputs_parse_with_telemetry_readers(tmp_path):
    cfg = small()
    res = synth.generate(cfg, tmp_path)
    names, metrics = tm.read_metrics_csv(tmp_path / "metrics.csv")
    assert names == cfg.metric_names and len(metrics) == cfg.n_timestamps * cfg.n_instances
    logs = tm.read_logs_jsonl(tmp_path / "logs.jsonl")
    assert logs and all(l.instance_id in cfg.instances for l in logs)
    spans = tm.read_spans_jsonl(tmp_path / "spans.jsonl")
    assert any(s.caller_instance is None and s.parent_span_id for s in spans)   # caller left to resolve
    assert any(not s.finished for s in spans)
    labels = tm.read_labels_csv(tmp_path / "labels.csv")
    assert len(labels) == cfg.n_timestamps * cfg.n_instances
    truth = json.loads((tmp_path / "truth.json").read_text())
    for ev in truth["events"]:
        assert ev["kind"] in synth.ANOMALY_KINDS and ev["start"] <= ev["end"]
    back = synth.truth_labels(truth, cfg.start_ts + cfg.interval * np.arange(cfg.n_timestamps), cfg.instances)
    assert np.array_equal(back, res["truth"])
