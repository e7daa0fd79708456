"""Layer partitions for grow-and-prune schedules."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError

STRATEGIES = ("contiguous", "random")


@dataclass(frozen=True)
class PartitionScheme:
    groups: tuple[tuple[str, ...], ...]
    strategy: str = "contiguous"

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
        if not self.groups or any(len(g) == 0 for g in self.groups):
            raise ConfigError("every partition must be nonempty")
        flat = [name for g in self.groups for name in g]
        if len(flat) != len(set(flat)):
            raise ConfigError("partitions overlap")

    @property
    def kappa(self) -> int:
        return len(self.groups)

    @property
    def layers(self) -> list[str]:
        return [name for g in self.groups for name in g]

    def owner(self, layer: str) -> int:
        for i, g in enumerate(self.groups):
            if layer in g:
                return i
        raise KeyError(layer)


def _check_kappa(n_layers, kappa):
    if not 1 <= kappa <= n_layers:
        raise ConfigError(f"kappa={kappa} must be between 1 and the number of prunable layers ({n_layers})")


def make_contiguous_partitions(layer_sizes: Mapping[str, int], kappa: int) -> PartitionScheme:
    """Cut the ordered layers into ``kappa`` runs with balanced parameter counts.

    Every cut placement is scored by its largest group, then by the sum of
    squared group sizes; the first best placement wins.
    """
    names = list(layer_sizes)
    _check_kappa(len(names), kappa)
    sizes = [int(layer_sizes[n]) for n in names]
    prefix = np.concatenate([[0], np.cumsum(sizes)])
    best = None
    for cuts in itertools.combinations(range(1, len(names)), kappa - 1):
        bounds = (0, *cuts, len(names))
        totals = [int(prefix[b] - prefix[a]) for a, b in zip(bounds[:-1], bounds[1:])]
        key = (max(totals), sum(t * t for t in totals))
        if best is None or key < best[0]:
            best = (key, bounds)
    bounds = best[1]
    groups = [names[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    return PartitionScheme(tuple(tuple(g) for g in groups), "contiguous")


def _completions(n: int, empty: int, kappa: int) -> int:
    """Ways to label ``n`` more items with ``kappa`` labels hitting ``empty`` unused ones."""
    return sum((-1) ** j * comb(empty, j) * (kappa - j) ** n for j in range(empty + 1))


def make_random_partition(layers: Sequence[str], kappa: int, seed) -> PartitionScheme:
    """Uniformly random assignment of layers to ``kappa`` nonempty groups.

    Labels are drawn one layer at a time, weighting each choice by the exact
    number of surjective completions, so every labelled grouping is equally
    likely.  Layers keep model order inside a group.
    """
    names = list(layers)
    _check_kappa(len(names), kappa)
    rng = np.random.default_rng(seed)
    labels = []
    used: set[int] = set()
    for t in range(len(names)):
        remaining = len(names) - t - 1
        empty = kappa - len(used)
        w_used = _completions(remaining, empty, kappa)
        w_new = _completions(remaining, empty - 1, kappa) if empty else 0
        weights = [w_used if lab in used else w_new for lab in range(kappa)]
        total = sum(weights)
        # exact integer weights; floats only for the final draw
        pick = rng.choice(kappa, p=[w / total for w in weights])
        labels.append(int(pick))
        used.add(int(pick))
    groups = [tuple(n for n, lab in zip(names, labels) if lab == g) for g in range(kappa)]
    return PartitionScheme(tuple(groups), "random")


def schedule_indices(step: int, kappa: int) -> tuple[int, int | None]:
    """``(grow, prune)`` partition indices for a cyclic step.

    Step 0 has nothing dense to prune, so its prune index is ``None``.
    """
    if step < 0 or kappa < 1:
        raise ConfigError(f"invalid step={step} / kappa={kappa}")
    grow = step % kappa
    prune = None if step == 0 else (step - 1) % kappa
    return grow, prune
