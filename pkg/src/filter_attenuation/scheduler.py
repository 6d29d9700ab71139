"""Attenuation pruning schedule, the hard-pruning baseline, next-layer impact
diagnostic and physical model compaction."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._io import atomic_write_text
from .criteria import score_model, select_bottom_k
from .masking import (
    PruneConfig,
    StarvationError,
    apply_attenuation,
    filter_state_rows,
    prune_filters,
    prune_zeroed,
    pruned_filters,
    record_recovery,
    rollback_last_prune,
    training_masks,
)
from .nn import Conv2D, Dense, Flatten, FilterStatus, MaxPool2D, ReLU, evaluate, train_epochs

log = logging.getLogger(__name__)

METHODS = ("attenuate", "hard")


class WarmupError(RuntimeError):
    """Warm-up training never reached the configured accuracy floor."""


def _pairs(selection):
    return [list(p) for p in sorted(selection)]


@dataclass
class ExperimentLog:
    """One record per schedule round plus a closing summary record."""

    rounds: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_jsonl(self):
        lines = [json.dumps({"type": "round", **r}, sort_keys=True) for r in self.rounds]
        if self.summary:
            lines.append(json.dumps({"type": "summary", **self.summary}, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text):
        out = cls()
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type", None)
            if kind == "round":
                out.rounds.append(rec)
            elif kind == "summary":
                out.summary = rec
            else:
                raise ValueError(f"line {n}: unknown record type {kind!r}")
        return out

    def save(self, path):
        atomic_write_text(path, self.to_jsonl())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_jsonl(fh.read())

    @property
    def method(self):
        return self.summary.get("method")

    @property
    def criterion(self):
        return self.summary.get("criterion")


def _remaining_per_layer(model):
    return [sum(s.status != FilterStatus.PRUNED for s in layer.states)
            for layer in model.conv_layers()]


def _filter_rows(model, raw, norm):
    rows = filter_state_rows(model)
    flat_raw = [v for r in raw for v in r.values]
    flat_norm = [v for n in norm for v in n.values]
    for row, r, n in zip(rows, flat_raw, flat_norm):
        row["raw_score"] = float(r)
        row["normalized_score"] = float(n)
    return rows


def warmup(model, train_data, val_data, config, train_config, rng):
    """Train ``warmup_epochs``, then single epochs until ``warmup_floor`` is met.

    Returns ``(val_accuracy, epochs_trained)``.
    """
    train_epochs(model, train_data, train_config, rng, epochs=config.warmup_epochs)
    epochs = config.warmup_epochs
    acc = evaluate(model, val_data)
    while acc < config.warmup_floor and epochs < config.warmup_max_epochs:
        train_epochs(model, train_data, train_config, rng, epochs=1)
        epochs += 1
        acc = evaluate(model, val_data)
    if acc < config.warmup_floor:
        raise WarmupError(f"warm-up reached accuracy {acc:.4f} after {epochs} epochs; "
                          f"floor is {config.warmup_floor}")
    return acc, epochs


def run_attenuation_pruning(model, train_data, val_data, config: PruneConfig, train_config,
                            test_data=None, method="attenuate"):
    """Train, then repeat attenuate -> fine-tune -> prune-near-zero with an accuracy gate.

    Returns ``(final_model, ExperimentLog)``; the input model is not modified.
    ``method="hard"`` runs the same schedule but zeroes the selected filters
    immediately instead of attenuating them.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    model = model.copy()
    model.prune_snapshot = None
    rng = np.random.default_rng(train_config.rng_seed)
    convs = model.conv_layers()
    if not convs:
        raise ValueError("model has no conv layers to prune")

    def finetune(selection=()):
        literal = method == "attenuate" and config.attenuation_mode == "gradient"
        masks = training_masks(model, selection, config.fa if literal else None)
        train_epochs(model, train_data, train_config, rng, config.finetune_epochs, masks)

    params_before, macs_before = model.parameter_count(), model.mac_count()
    original = [layer.out_channels for layer in convs]
    total = sum(original)
    target_count = math.ceil(round(config.target_prune_fraction * total, 9))

    baseline, warm_epochs = warmup(model, train_data, val_data, config, train_config, rng)
    t2_abs = [config.t2 * float(np.abs(layer.weights.astype(np.float64)).sum()
                                / layer.out_channels) for layer in convs]
    log.info("%s/%s warm-up: %d epochs, val acc %.4f", method, config.criterion,
             warm_epochs, baseline)

    xlog = ExperimentLog()
    k = config.k0
    previous = set()
    termination = "max_rounds"
    for rnd in range(1, config.max_rounds + 1):
        k += config.a
        raw, norm = score_model(model, config.criterion)
        already = pruned_filters(model)
        score_rows = _filter_rows(model, raw, norm)

        if method == "attenuate":
            selection = select_bottom_k(norm, k, excluded=already)
            recovered = record_recovery(model, previous, selection)
            apply_attenuation(model, selection, config.fa,
                              scale_weights=config.attenuation_mode == "weight")
        else:
            budget = max(target_count - len(already), 0)
            selection = select_bottom_k(norm, min(k, budget), excluded=already)
            recovered = set()
            prune_filters(model, selection)
        acc_attenuated = evaluate(model, val_data)

        finetune(selection)
        acc_finetuned = evaluate(model, val_data)

        if method == "attenuate":
            newly_pruned = prune_zeroed(model, t2_abs)
        else:
            newly_pruned = set(selection)
        acc_pruned = evaluate(model, val_data)

        acc = acc_pruned
        extra_finetune = baseline - acc < config.t1
        if extra_finetune:
            finetune(selection)
            acc = evaluate(model, val_data)
        rolled_back = set()
        if baseline - acc > config.t1:
            rolled_back = rollback_last_prune(model)
            finetune(selection)
            acc = evaluate(model, val_data)
            termination = "rollback"

        n_pruned = len(pruned_filters(model))
        xlog.rounds.append({
            "round": rnd,
            "k": k,
            "method": method,
            "criterion": config.criterion,
            "selected": _pairs(selection),
            "pruned": _pairs(newly_pruned),
            "recovered": _pairs(recovered),
            "rolled_back": _pairs(rolled_back),
            "acc_after_selection": acc_attenuated,
            "acc_after_finetune": acc_finetuned,
            "acc_after_prune": acc_pruned,
            "extra_finetune": extra_finetune,
            "accuracy": acc,
            "cumulative_pruned": n_pruned,
            "remaining_per_layer": _remaining_per_layer(model),
            "scores": score_rows,
            "filters": filter_state_rows(model),
        })
        log.info("round %d k=%d selected=%d pruned=%d total=%d acc=%.4f", rnd, k,
                 len(selection), len(newly_pruned), n_pruned, acc)
        previous = selection
        if termination == "rollback":
            break
        if n_pruned >= target_count:
            termination = "target_reached"
            break

    _, report = compact_model(model)
    xlog.summary = {
        "method": method,
        "criterion": config.criterion,
        "seed": train_config.rng_seed,
        "prune_config": asdict(config),
        "train_config": asdict(train_config),
        "warmup_epochs": warm_epochs,
        "baseline_accuracy": baseline,
        "final_accuracy": evaluate(model, val_data),
        "test_accuracy": evaluate(model, test_data) if test_data is not None else None,
        "termination": termination,
        "rounds": len(xlog.rounds),
        "total_filters": total,
        "target_count": target_count,
        "original_per_layer": original,
        "final_pruned": len(pruned_filters(model)),
        "final_filters": filter_state_rows(model),
        "compaction": {**asdict(report), "params_before": params_before,
                       "macs_before": macs_before},
    }
    return model, xlog


def run_hard_pruning(model, train_data, val_data, config, train_config, test_data=None):
    return run_attenuation_pruning(model, train_data, val_data, config, train_config,
                                   test_data, method="hard")


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def _next_conv_position(model, layer_index):
    positions = model.conv_positions()
    if not 0 <= layer_index < len(positions):
        raise IndexError(f"conv layer {layer_index} does not exist")
    if layer_index + 1 >= len(positions):
        raise ValueError(f"conv layer {layer_index} is the last conv layer; no next layer")
    return positions[layer_index + 1]


def _candidate_filters(layer_index, candidates):
    filters = set()
    for c in candidates:
        if isinstance(c, tuple):
            li, fi = c
            if li != layer_index:
                raise ValueError("all candidates must belong to the diagnosed layer")
            filters.add(fi)
        else:
            filters.add(int(c))
    return sorted(filters)


def next_layer_impact(model, layer_index, candidates, probe_batch):
    """Mean over the probe batch of the L1 size of the candidates' contribution to
    the next conv layer's pre-activation.

    The contribution is the candidate feature maps convolved with the matching
    input channels of the next conv layer (bias excluded).
    """
    probe_batch = np.asarray(probe_batch)
    if len(probe_batch) == 0:
        raise ValueError("probe batch is empty")
    next_pos = _next_conv_position(model, layer_index)
    filters = _candidate_filters(layer_index, candidates)
    if not filters:
        return 0.0
    x = probe_batch.astype(model.dtype, copy=False)
    for layer in model.layers[:next_pos]:
        x = layer.forward(x)
    nxt = model.layers[next_pos]
    partial = Conv2D(nxt.weights[:, filters], np.zeros_like(nxt.bias), nxt.stride, nxt.padding)
    contribution = partial.forward(x[:, filters])
    return float(np.abs(contribution.astype(np.float64)).sum() / len(probe_batch))


# ---------------------------------------------------------------------------
# compaction
# ---------------------------------------------------------------------------


@dataclass
class CompactionReport:
    params_after: int
    macs_after: int
    filters_before: list
    filters_after: list
    removed_filters: int


def compact_model(model):
    """Physically drop pruned filters and the input channels/columns that read them.

    Returns ``(compacted_model, CompactionReport)``. Parameter and MAC counts of the
    original model are available as ``model.parameter_count()`` / ``model.mac_count()``.
    """
    out = model.copy()
    out.prune_snapshot = None
    shapes = out.layer_shapes()
    filters_before = [layer.out_channels for layer in out.conv_layers()]
    for pos, layer in enumerate(out.layers):
        if not isinstance(layer, Conv2D):
            continue
        keep = [fi for fi, s in enumerate(layer.states) if s.status != FilterStatus.PRUNED]
        if not keep:
            raise StarvationError(f"conv layer at position {pos} has no active filters")
        if len(keep) == layer.out_channels:
            continue
        layer.weights = layer.weights[keep].copy()
        layer.bias = layer.bias[keep].copy()
        layer.states = [layer.states[fi] for fi in keep]
        # walk forward through channel-preserving layers to the consumer
        flatten_shape = None
        for nxt_pos in range(pos + 1, len(out.layers)):
            nxt = out.layers[nxt_pos]
            if isinstance(nxt, Flatten):
                flatten_shape = shapes[nxt_pos]
            elif isinstance(nxt, Conv2D):
                assert flatten_shape is None, "conv after flatten is not supported"
                nxt.weights = nxt.weights[:, keep].copy()
                break
            elif isinstance(nxt, Dense):
                assert flatten_shape is not None, "dense must follow a flatten"
                c, h, w = flatten_shape
                cols = (np.asarray(keep)[:, None] * (h * w) + np.arange(h * w)).ravel()
                nxt.weights = nxt.weights[:, cols].copy()
                break
            else:
                assert isinstance(nxt, (ReLU, MaxPool2D)), f"unexpected layer {nxt.kind}"
        shapes = out.layer_shapes()
    filters_after = [layer.out_channels for layer in out.conv_layers()]
    assert sum(filters_before) - sum(filters_after) == len(pruned_filters(model))
    report = CompactionReport(
        params_after=out.parameter_count(),
        macs_after=out.mac_count(),
        filters_before=filters_before,
        filters_after=filters_after,
        removed_filters=sum(filters_before) - sum(filters_after),
    )
    return out, report
