"""Three-valued filter masks, attenuation, near-zero pruning and one-step rollback.

Each conv filter carries a ``FilterState``; the legal lifecycle moves are

    active -> attenuated -> attenuated (again) -> active (recovery)
    active | attenuated -> pruned
    pruned -> attenuated            (rollback only)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .criteria import CRITERIA
from .nn import FilterState, FilterStatus


class ConfigError(ValueError):
    pass


class StarvationError(ValueError):
    """A conv layer would be left without a single unpruned filter."""


class StateError(RuntimeError):
    """Illegal filter lifecycle transition."""


A, T, P = FilterStatus.ACTIVE, FilterStatus.ATTENUATED, FilterStatus.PRUNED
ALLOWED_TRANSITIONS = {(A, T), (T, T), (T, A), (T, P), (A, P)}
ROLLBACK_TRANSITION = (P, T)


def transition(state: FilterState, new: FilterStatus, rollback=False):
    move = (state.status, new)
    if move not in ALLOWED_TRANSITIONS and not (rollback and move == ROLLBACK_TRANSITION):
        raise StateError(f"illegal filter transition {state.status.value} -> {new.value}")
    state.status = new


@dataclass
class PruneConfig:
    """Hyperparameters of the attenuate / fine-tune / prune schedule.

    ``t2`` is relative: each layer's absolute near-zero L1 threshold is
    ``t2 * mean filter L1 of that layer`` measured once after warm-up.
    """

    fa: float = 0.8
    alpha: float = 0.5
    beta: float = 0.01
    k0: int = 0
    a: int = 100
    t1: float = 0.01
    t2: float = 1e-6
    criterion: str = "l1"
    target_prune_fraction: float = 0.5
    # "weight": scale filter parameters by fa when selected (default);
    # "gradient": leave weights alone and scale the selected filters' updates by fa
    attenuation_mode: str = "weight"
    warmup_epochs: int = 3
    warmup_max_epochs: int = 20
    warmup_floor: float = 0.0
    finetune_epochs: int = 2
    max_rounds: int = 200

    def __post_init__(self):
        if not 0 < self.fa < 1:
            raise ConfigError(f"fa must lie in (0, 1), got {self.fa}")
        if not 0 <= self.beta < self.alpha:
            raise ConfigError(f"need 0 <= beta < alpha, got beta={self.beta}, alpha={self.alpha}")
        if self.t1 < 0 or self.t2 < 0:
            raise ConfigError("t1 and t2 must be nonnegative")
        if self.a < 0 or self.k0 < 0:
            raise ConfigError("a and k0 must be nonnegative")
        if not 0 < self.target_prune_fraction <= 1:
            raise ConfigError("target_prune_fraction must lie in (0, 1]")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.criterion!r}; choose from {CRITERIA}")
        if self.attenuation_mode not in ("weight", "gradient"):
            raise ConfigError("attenuation_mode must be 'weight' or 'gradient'")
        if self.warmup_max_epochs < self.warmup_epochs or self.finetune_epochs < 0:
            raise ConfigError("warmup_max_epochs must be >= warmup_epochs; finetune_epochs >= 0")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1")


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def _score_mean(scores, unpruned):
    values = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty score vector")
    unpruned = np.ones(len(values), bool) if unpruned is None else np.asarray(unpruned, bool)
    if not unpruned.any():
        raise ValueError("no unpruned filters in layer")
    return values, unpruned, values[unpruned].mean()


def compute_mask_hard(scores, alpha, unpruned=None):
    """Mask 0 where ``score < alpha * mean(unpruned scores)``, else 1."""
    values, unpruned, mean = _score_mean(scores, unpruned)
    mask = np.where(values < alpha * mean, 0.0, 1.0)
    mask[~unpruned] = 0.0
    return mask


def compute_mask_attenuate(scores, alpha, beta, fa, unpruned=None):
    """Mask 0 below ``beta * mean``, ``fa`` below ``alpha * mean``, 1 otherwise."""
    if beta > alpha:
        raise ConfigError(f"prune threshold beta={beta} exceeds attenuation threshold {alpha}")
    values, unpruned, mean = _score_mean(scores, unpruned)
    mask = np.where(values < beta * mean, 0.0, np.where(values < alpha * mean, fa, 1.0))
    mask[~unpruned] = 0.0
    return mask


def training_masks(model, selection=(), fa=None):
    """Per-conv-layer update masks: 0 for pruned filters, ``fa`` for ``selection``
    when ``fa`` is given (literal masked-gradient mode), 1 for everything else."""
    masks = []
    for li, layer in enumerate(model.conv_layers()):
        mask = np.ones(layer.out_channels)
        for fi, state in enumerate(layer.states):
            if state.status == P:
                mask[fi] = 0.0
            elif fa is not None and (li, fi) in selection:
                mask[fi] = fa
        masks.append(mask)
    return masks


# ---------------------------------------------------------------------------
# model mutation
# ---------------------------------------------------------------------------


def apply_attenuation(model, selection, fa, scale_weights=True):
    """Multiply the selected filters' weights and bias by ``fa``."""
    convs = model.conv_layers()
    for li, fi in selection:
        if convs[li].states[fi].status == P:
            raise StateError(f"cannot attenuate pruned filter ({li}, {fi})")
    for li, fi in sorted(selection):
        layer = convs[li]
        if scale_weights:
            layer.weights[fi] *= fa
            layer.bias[fi] *= fa
        state = layer.states[fi]
        transition(state, T)
        state.attenuation_count += 1
    return model


@dataclass
class PruneSnapshot:
    # (layer, filter) -> (weights copy, bias value) taken just before zeroing
    entries: dict = field(default_factory=dict)

    @property
    def filters(self):
        return set(self.entries)


def _zero_filters(model, selection):
    convs = model.conv_layers()
    snapshot = PruneSnapshot()
    for li, fi in sorted(selection):
        layer = convs[li]
        snapshot.entries[(li, fi)] = (layer.weights[fi].copy(), layer.bias[fi].copy())
        transition(layer.states[fi], P)
        layer.weights[fi] = 0
        layer.bias[fi] = 0
    model.prune_snapshot = snapshot
    return set(selection)


def prune_filters(model, selection):
    """Zero and freeze ``selection`` outright (hard pruning)."""
    convs = model.conv_layers()
    for li, layer in enumerate(convs):
        alive = {fi for fi, s in enumerate(layer.states) if s.status != P}
        chosen = {fi for l2, fi in selection if l2 == li}
        if chosen - alive:
            raise StateError(f"filters {sorted(chosen - alive)} of layer {li} already pruned")
        if chosen and not alive - chosen:
            raise StarvationError(f"pruning {sorted(chosen)} would empty conv layer {li}")
    return _zero_filters(model, selection)


def prune_zeroed(model, t2):
    """Prune every unpruned filter whose L1 norm is below ``t2``.

    ``t2`` is a scalar or one threshold per conv layer. If every surviving filter
    of a layer falls below the threshold, the largest one is kept.
    """
    convs = model.conv_layers()
    thresholds = np.broadcast_to(np.asarray(t2, dtype=np.float64), (len(convs),))
    if np.any(thresholds < 0):
        raise ValueError("t2 must be nonnegative")
    selection = set()
    for li, layer in enumerate(convs):
        l1 = np.abs(layer.weights.reshape(layer.out_channels, -1).astype(np.float64)).sum(axis=1)
        alive = [fi for fi, s in enumerate(layer.states) if s.status != P]
        below = [fi for fi in alive if l1[fi] < thresholds[li]]
        if below and len(below) == len(alive):
            below.remove(max(below, key=lambda fi: (l1[fi], -fi)))
        selection.update((li, fi) for fi in below)
    return _zero_filters(model, selection)


def rollback_last_prune(model):
    """Restore the filters zeroed by the most recent prune call; returns them."""
    snapshot = model.prune_snapshot
    if snapshot is None:
        raise StateError("no prune snapshot to roll back")
    convs = model.conv_layers()
    for (li, fi), (w, b) in snapshot.entries.items():
        layer = convs[li]
        layer.weights[fi] = w
        layer.bias[fi] = b
        transition(layer.states[fi], T, rollback=True)
    model.prune_snapshot = None
    return snapshot.filters


def record_recovery(model, previous_selection, current_selection):
    """Mark filters that left the attenuation set (and survived) as recovered."""
    convs = model.conv_layers()
    recovered = set()
    for li, fi in sorted(set(previous_selection) - set(current_selection)):
        state = convs[li].states[fi]
        if state.status == T:
            transition(state, A)
            state.recovery_count += 1
            recovered.add((li, fi))
    return recovered


def pruned_filters(model):
    return {(li, fi) for li, layer in enumerate(model.conv_layers())
            for fi, s in enumerate(layer.states) if s.status == P}


def filter_state_rows(model):
    rows = []
    for li, layer in enumerate(model.conv_layers()):
        l1 = np.abs(layer.weights.reshape(layer.out_channels, -1).astype(np.float64)).sum(axis=1)
        for fi, s in enumerate(layer.states):
            rows.append({"layer": li, "filter": fi, "state": s.status.value,
                         "attenuation_count": s.attenuation_count,
                         "recovery_count": s.recovery_count, "l1_norm": float(l1[fi])})
    return rows
