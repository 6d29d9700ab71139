"""Per-filter importance scores and global bottom-k selection."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .nn import FilterStatus

CRITERIA = ("l1", "l2", "std", "cosine")


@dataclass
class ImportanceScores:
    values: np.ndarray
    criterion: str
    # filters whose score fell back to 0 because a norm was zero (cosine only)
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.values), dtype=bool)

    def __len__(self):
        return len(self.values)


def _flat(layer):
    w = np.asarray(layer.weights if hasattr(layer, "weights") else layer, dtype=np.float64)
    return w.reshape(w.shape[0], -1)


def filter_l1(layer):
    return ImportanceScores(np.abs(_flat(layer)).sum(axis=1), "l1")


def filter_l2(layer):
    return ImportanceScores(np.sqrt((_flat(layer) ** 2).sum(axis=1)), "l2")


def filter_std(layer):
    return ImportanceScores(_flat(layer).std(axis=1), "std")


def filter_cosine(layer, reference=None):
    """Cosine distance of each filter to ``reference`` (default: the layer-mean filter).

    Distance 0 means the filter points the same way as the reference, i.e. it is
    redundant, so the distance itself is used as importance.
    """
    w = _flat(layer)
    if w.shape[0] < 2:
        raise ValueError("cosine criterion needs at least two filters")
    ref = w.mean(axis=0) if reference is None else np.asarray(reference, np.float64).ravel()
    norms = np.linalg.norm(w, axis=1)
    ref_norm = np.linalg.norm(ref)
    degenerate = (norms == 0) | (ref_norm == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (w @ ref) / (norms * ref_norm)
    dist = np.where(degenerate, 0.0, 1.0 - np.clip(sim, -1.0, 1.0))
    if degenerate.any():
        warnings.warn("zero-norm filter or reference; cosine score set to 0", RuntimeWarning,
                      stacklevel=2)
    return ImportanceScores(dist, "cosine", degenerate)


_SCORERS = {"l1": filter_l1, "l2": filter_l2, "std": filter_std, "cosine": filter_cosine}


def score_layer(layer, criterion):
    try:
        scorer = _SCORERS[criterion]
    except KeyError:
        raise ValueError(f"unknown criterion {criterion!r}; choose from {CRITERIA}") from None
    return scorer(layer)


def unpruned_mask(layer):
    return np.array([s.status != FilterStatus.PRUNED for s in layer.states])


def normalized_scores(scores, layer=None, unpruned=None):
    """Divide every score by the mean score of the layer's unpruned filters."""
    values = scores.values if isinstance(scores, ImportanceScores) else np.asarray(scores, float)
    if unpruned is None:
        unpruned = unpruned_mask(layer) if layer is not None else np.ones(len(values), bool)
    unpruned = np.asarray(unpruned, dtype=bool)
    if not unpruned.any():
        raise ValueError("layer has no unpruned filters to normalize against")
    mean = values[unpruned].mean()
    out = values / mean if mean > 0 else np.zeros_like(values)
    criterion = scores.criterion if isinstance(scores, ImportanceScores) else "raw"
    degenerate = scores.degenerate if isinstance(scores, ImportanceScores) else None
    return ImportanceScores(out, criterion, degenerate)


def score_model(model, criterion):
    """Raw and layer-normalized scores for every conv layer, in layer order."""
    raw = [score_layer(layer, criterion) for layer in model.conv_layers()]
    norm = [normalized_scores(r, layer) for r, layer in zip(raw, model.conv_layers())]
    return raw, norm


def select_bottom_k(all_layer_scores, k, excluded=()):
    """The ``k`` lowest-scoring eligible filters across all layers.

    ``all_layer_scores`` is one score vector per layer (normally layer-normalized);
    ``excluded`` holds ``(layer, filter)`` pairs that may not be chosen (pruned
    filters). Ties go to the lower ``(layer, filter)``. No layer is ever left
    without an unselected, unexcluded filter, so fewer than ``k`` may come back.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    excluded = set(excluded)
    candidates = []
    budget = []
    for li, scores in enumerate(all_layer_scores):
        values = scores.values if isinstance(scores, ImportanceScores) else np.asarray(scores)
        eligible = [fi for fi in range(len(values)) if (li, fi) not in excluded]
        budget.append(max(len(eligible) - 1, 0))
        candidates += [(float(values[fi]), li, fi) for fi in eligible]
    candidates.sort()
    chosen = set()
    for _, li, fi in candidates:
        if len(chosen) >= k:
            break
        if budget[li] > 0:
            chosen.add((li, fi))
            budget[li] -= 1
    return chosen
