"""Binary masks and the magnitude prune / grow operators.

A mask set is a plain ``dict`` mapping a layer name to a boolean array shaped
like that layer's weight (``True`` = trainable, ``False`` = frozen at zero).
Layers without an entry are dense.  Biases never carry masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

DISTRIBUTIONS = ("uniform", "non-uniform")
GRANULARITIES = ("element", "block")


@dataclass(frozen=True)
class SparsityPolicy:
    ratio: float
    distribution: str = "uniform"
    granularity: str = "element"
    block_size: int = 8
    exempt_layers: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"sparsity ratio must be in [0, 1), got {self.ratio}")
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {self.distribution!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.block_size < 1:
            raise ConfigError("block_size must be positive")
        object.__setattr__(self, "exempt_layers", frozenset(self.exempt_layers))

    def with_ratio(self, ratio: float) -> "SparsityPolicy":
        return SparsityPolicy(ratio, self.distribution, self.granularity, self.block_size, self.exempt_layers)

    @property
    def unit(self) -> int:
        return self.block_size if self.granularity == "block" else 1


def prune_count(ratio: float, n: int) -> int:
    """``round(ratio * n)`` with halves rounded up."""
    # the epsilon absorbs binary representation error, e.g. 0.35 * 10
    return min(n, int(math.floor(ratio * n + 0.5 + 1e-9)))


def prunable_layers(model, policy: SparsityPolicy) -> list[str]:
    return [lin.name for lin in model.linears() if lin.name not in policy.exempt_layers]


def _as_rows(shape):
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return 1, shape[0]
    return int(np.prod(shape[:-1])), shape[-1]


def unit_ids(shape, unit: int) -> tuple[np.ndarray, int]:
    """Map every element to its pruning unit.

    Units are runs of ``unit`` consecutive entries along the last axis; a row
    whose length is not a multiple of ``unit`` ends in one shorter block.
    Returns the id array (shaped like the weight) and the number of units.
    """
    rows, cols = _as_rows(shape)
    per_row = -(-cols // unit)
    ids = np.arange(rows)[:, None] * per_row + (np.arange(cols) // unit)[None, :]
    return ids.reshape(shape), rows * per_row


def _unit_scores(w: np.ndarray, unit: int):
    ids, n_units = unit_ids(w.shape, unit)
    if unit == 1:
        return np.abs(w).reshape(-1), ids, n_units
    scores = np.bincount(ids.reshape(-1), weights=np.abs(w).reshape(-1), minlength=n_units)
    return scores, ids, n_units


def _unit_dead(mask: np.ndarray, ids: np.ndarray, n_units: int) -> np.ndarray:
    alive = np.bincount(ids.reshape(-1), weights=mask.reshape(-1).astype(np.float64), minlength=n_units)
    return alive == 0


def _select_lowest(scores, k, dead=None):
    """Indices of the ``k`` lowest-scoring units; ties go to the lower index.

    Units flagged in ``dead`` (already fully masked) rank ahead of everything.
    """
    idx = np.arange(scores.size)
    if dead is None:
        order = np.lexsort((idx, scores))
    else:
        order = np.lexsort((idx, scores, ~dead))
    return order[:k]


def arg_prune_to(
    weights: Mapping[str, np.ndarray],
    policy: SparsityPolicy,
    scope: Iterable[str],
    current: Mapping[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Magnitude-prune the layers in ``scope`` to ``policy.ratio``.

    Uniform distribution prunes each layer to the ratio on its own;
    non-uniform ranks all scoped units together.  Block granularity scores a
    block by the L1 norm of its entries.  If ``current`` masks are given, units
    that are already fully masked are chosen first, so repeated pruning with a
    growing ratio only ever removes weights.

    Returns copies of the scoped weights with pruned entries set to exactly 0,
    plus their new masks.  Layers in ``policy.exempt_layers`` are skipped.
    """
    scope = list(scope)
    if not scope:
        raise ConfigError("pruning scope is empty")
    if not 0.0 <= policy.ratio < 1.0:
        raise ConfigError(f"sparsity ratio must be in [0, 1), got {policy.ratio}")
    scope = [name for name in scope if name not in policy.exempt_layers]
    unit = policy.unit

    parts = []
    for name in scope:
        w = np.asarray(weights[name], dtype=np.float64)
        if w.size == 0:
            raise ConfigError(f"layer {name} has no weights")
        if not np.all(np.isfinite(w)):
            raise NumericError(f"layer {name} has non-finite weights")
        scores, ids, n_units = _unit_scores(w, unit)
        dead = None
        if current is not None and name in current:
            if current[name].shape != w.shape:
                raise ShapeError(f"current mask for {name} does not match its weight")
            dead = _unit_dead(current[name], ids, n_units)
        parts.append((name, w, scores, ids, n_units, dead))

    keep_units = {}
    if policy.distribution == "uniform":
        for name, w, scores, ids, n_units, dead in parts:
            keep = np.ones(n_units, dtype=bool)
            keep[_select_lowest(scores, prune_count(policy.ratio, n_units), dead)] = False
            keep_units[name] = keep
    else:
        all_scores = np.concatenate([p[2] for p in parts])
        deads = [p[5] if p[5] is not None else np.zeros(p[4], dtype=bool) for p in parts]
        all_dead = np.concatenate(deads) if current is not None else None
        keep = np.ones(all_scores.size, dtype=bool)
        keep[_select_lowest(all_scores, prune_count(policy.ratio, all_scores.size), all_dead)] = False
        offset = 0
        for name, _, _, _, n_units, _ in parts:
            keep_units[name] = keep[offset:offset + n_units]
            offset += n_units

    pruned, masks = {}, {}
    for name, w, _, ids, _, _ in parts:
        mask = keep_units[name][ids]
        masks[name] = mask
        pruned[name] = apply_mask(w, mask)
    return pruned, masks


def random_masks(
    shapes: Mapping[str, tuple],
    policy: SparsityPolicy,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Random masks with the exact unit counts ``arg_prune_to`` would prune."""
    unit = policy.unit
    names = [n for n in shapes if n not in policy.exempt_layers]
    layout = [(n, *unit_ids(tuple(shapes[n]), unit)) for n in names]
    masks = {}
    if policy.distribution == "uniform":
        for name, ids, n_units in layout:
            keep = np.ones(n_units, dtype=bool)
            keep[rng.permutation(n_units)[:prune_count(policy.ratio, n_units)]] = False
            masks[name] = keep[ids]
    else:
        total = sum(n_units for _, _, n_units in layout)
        keep = np.ones(total, dtype=bool)
        keep[rng.permutation(total)[:prune_count(policy.ratio, total)]] = False
        offset = 0
        for name, ids, n_units in layout:
            masks[name] = keep[offset:offset + n_units][ids]
            offset += n_units
    return masks


def arg_grow_to(fragment: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Set every mask in the fragment to all ones.  Weights are not touched."""
    return {name: np.ones(mask.shape, dtype=bool) for name, mask in fragment.items()}


def apply_mask(weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if np.shape(weights) != np.shape(mask):
        raise ShapeError(f"weights {np.shape(weights)} vs mask {np.shape(mask)}")
    return np.where(mask, weights, 0.0)


def sparsity_of(masks: Mapping[str, np.ndarray], scope: Iterable[str] | None = None) -> float:
    """Fraction of zero mask entries over the scoped layers."""
    names = list(masks) if scope is None else list(scope)
    total = sum(masks[n].size for n in names)
    if total == 0:
        return 0.0
    zeros = sum(int(masks[n].size - np.count_nonzero(masks[n])) for n in names)
    return zeros / total


def layer_sparsity(masks: Mapping[str, np.ndarray]) -> dict[str, float]:
    return {name: sparsity_of(masks, [name]) for name in masks}


def block_sparsity_of(mask: np.ndarray, block_size: int = 8) -> float:
    """Fraction of 1 x ``block_size`` blocks that are entirely zero."""
    ids, n_units = unit_ids(mask.shape, block_size)
    return float(np.mean(_unit_dead(mask, ids, n_units)))


def is_block_structured(mask: np.ndarray, block_size: int = 8) -> bool:
    ids, n_units = unit_ids(mask.shape, block_size)
    sizes = np.bincount(ids.reshape(-1), minlength=n_units)
    alive = np.bincount(ids.reshape(-1), weights=mask.reshape(-1).astype(np.float64), minlength=n_units)
    return bool(np.all((alive == 0) | (alive == sizes)))


def mask_relative_error(weights, mask) -> float | None:
    """``||W - W*m||^2 / ||W||^2``, pooled over layers if dicts are given.

    Returns ``None`` when the weights are all zero (no signal to measure).
    """
    if isinstance(weights, Mapping):
        pairs = [(np.asarray(weights[n]), mask[n]) for n in mask]
    else:
        pairs = [(np.asarray(weights), mask)]
    for w, m in pairs:
        if w.shape != np.shape(m):
            raise ShapeError(f"weights {w.shape} vs mask {np.shape(m)}")
    scale = max((float(np.max(np.abs(w))) for w, _ in pairs if w.size), default=0.0)
    if scale == 0.0:
        return None
    removed = total = 0.0
    for w, m in pairs:
        # rescale so tiny weights do not underflow when squared
        w = w / scale
        total += float(np.sum(w * w))
        dropped = np.where(m, 0.0, w)
        removed += float(np.sum(dropped * dropped))
    return removed / total


def flops_estimate(model, masks: Mapping[str, np.ndarray], batch: int = 1) -> int:
    """Forward FLOPs, counting a multiply and an add as two operations.

    Each kept weight costs 2; each bias add costs 1 and biases stay dense.
    """
    total = 0
    for lin in model.linears():
        mask = masks.get(lin.name)
        kept = lin.weight.size if mask is None else int(np.count_nonzero(mask))
        total += 2 * kept + lin.out_features
    return total * batch
