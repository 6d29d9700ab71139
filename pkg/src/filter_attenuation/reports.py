"""CSV/JSON report emission. Every number is derived from stored ExperimentLogs."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from pathlib import Path

from ._io import atomic_write_text

CURVE_FIELDS = ["method", "criterion", "seed", "round", "pruned_filters", "accuracy"]
HISTOGRAM_FIELDS = ["method", "criterion", "seed", "attenuation_count", "surviving_filters"]
SCORE_FIELDS = ["method", "criterion", "seed", "round", "layer", "filter", "raw_score",
                "normalized_score"]
STATE_FIELDS = ["method", "criterion", "seed", "round", "layer", "filter", "state",
                "attenuation_count", "recovery_count", "l1_norm"]

REPORT_FILES = ("accuracy_curve.csv", "layer_profile.csv", "attenuation_histogram.csv",
                "scores.csv", "filter_states.csv", "summary.json")


def _csv(fields, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def run_label(log):
    s = log.summary
    return f"{s.get('method')}+{s.get('criterion')}@{s.get('seed')}"


def accuracy_curve_rows(log):
    s = log.summary
    tag = {"method": s["method"], "criterion": s["criterion"], "seed": s["seed"]}
    rows = [{**tag, "round": 0, "pruned_filters": 0, "accuracy": s["baseline_accuracy"]}]
    rows += [{**tag, "round": r["round"], "pruned_filters": r["cumulative_pruned"],
              "accuracy": r["accuracy"]} for r in log.rounds]
    return rows


def layer_profile_rows(logs):
    """Pruned filters per conv layer: one ``original`` column plus one per run."""
    if not logs:
        return ["layer", "original"], []
    original = logs[0].summary["original_per_layer"]
    fields = ["layer", "original"] + [run_label(log) for log in logs]
    rows = []
    for li, n in enumerate(original):
        row = {"layer": f"conv-{li + 1}", "original": n}
        for log in logs:
            pruned = sum(1 for f in log.summary["final_filters"]
                         if f["layer"] == li and f["state"] == "pruned")
            row[run_label(log)] = pruned
        rows.append(row)
    return fields, rows


def histogram_rows(log):
    s = log.summary
    counts = Counter(f["attenuation_count"] for f in s["final_filters"]
                     if f["state"] != "pruned")
    return [{"method": s["method"], "criterion": s["criterion"], "seed": s["seed"],
             "attenuation_count": c, "surviving_filters": counts[c]} for c in sorted(counts)]


def _per_filter_rows(log, key):
    s = log.summary
    tag = {"method": s["method"], "criterion": s["criterion"], "seed": s["seed"]}
    return [{**tag, "round": r["round"], **row} for r in log.rounds for row in r[key]]


def summary_record(log):
    s = log.summary
    comp = s["compaction"]
    return {
        "method": s["method"], "criterion": s["criterion"], "seed": s["seed"],
        "termination": s["termination"], "rounds": s["rounds"],
        "baseline_accuracy": s["baseline_accuracy"], "final_accuracy": s["final_accuracy"],
        "test_accuracy": s["test_accuracy"],
        "pruned_filters": s["final_pruned"], "total_filters": s["total_filters"],
        "params_before": comp["params_before"], "params_after": comp["params_after"],
        "param_reduction": 1 - comp["params_after"] / comp["params_before"],
        "macs_before": comp["macs_before"], "macs_after": comp["macs_after"],
        "mac_reduction": 1 - comp["macs_after"] / comp["macs_before"],
    }


def render_reports(logs):
    """Map of report filename -> text for a list of ExperimentLogs."""
    logs = [log for log in logs if log.summary]
    curve = [row for log in logs for row in accuracy_curve_rows(log)]
    fields, profile = layer_profile_rows(logs)
    hist = [row for log in logs for row in histogram_rows(log)]
    scores = [row for log in logs for row in _per_filter_rows(log, "scores")]
    states = [row for log in logs for row in _per_filter_rows(log, "filters")]
    summary = {"runs": [summary_record(log) for log in logs]}
    return {
        "accuracy_curve.csv": _csv(CURVE_FIELDS, curve),
        "layer_profile.csv": _csv(fields, profile),
        "attenuation_histogram.csv": _csv(HISTOGRAM_FIELDS, hist),
        "scores.csv": _csv(SCORE_FIELDS, scores),
        "filter_states.csv": _csv(STATE_FIELDS, states),
        "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
    }


def emit_reports(logs, out_dir):
    """Write every report for ``logs`` into ``out_dir``; returns the written paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    paths = []
    for name, text in render_reports(list(logs)).items():
        atomic_write_text(out_dir / name, text)
        paths.append(out_dir / name)
    return paths
