"""Coverage bookkeeping, coupon-collector statistics and gradient diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .nn import MLP, loss_and_grads
from .sparsity import apply_mask


class CoverageTracker:
    """Remembers which prunable weights have ever been trainable (mask = 1)."""

    def __init__(self):
        self.seen: dict[str, np.ndarray] = {}
        self.history: list[float] = []

    def update(self, masks: Mapping[str, np.ndarray]) -> "CoverageTracker":
        for name, mask in masks.items():
            if name in self.seen:
                self.seen[name] |= mask.astype(bool)
            else:
                self.seen[name] = mask.astype(bool).copy()
        self.history.append(self.fraction)
        return self

    @property
    def fraction(self) -> float:
        total = sum(s.size for s in self.seen.values())
        if total == 0:
            return 0.0
        return sum(int(np.count_nonzero(s)) for s in self.seen.values()) / total

    @property
    def steps_to_full(self) -> int | None:
        for i, frac in enumerate(self.history):
            if frac == 1.0:
                return i
        return None


def track_coverage(tracker: CoverageTracker, masks: Mapping[str, np.ndarray]) -> CoverageTracker:
    return tracker.update(masks)


def coupon_expected_steps(n: int, per_step: int = 1) -> float:
    """Expected draws with replacement until all ``n`` items are seen: n * H_n."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    if per_step != 1:
        raise ConfigError("closed form only for per_step=1; use simulate_random_coverage")
    return n * math.fsum(1.0 / i for i in range(1, n + 1))


@dataclass
class CoverageStats:
    mean: float
    std: float
    histogram: dict[int, int]
    samples: np.ndarray = field(repr=False)


def simulate_random_coverage(
    n: int,
    per_step: int = 1,
    trials: int = 1000,
    seed: int = 0,
    replacement: bool = True,
) -> CoverageStats:
    """Monte-Carlo steps until every one of ``n`` weights has been trained.

    Each step trains ``per_step`` distinct weights.  With ``replacement`` the
    choice is fresh every step; without it the weights are visited in a fixed
    rotation, which always finishes in ``ceil(n / per_step)`` steps.
    """
    if n < 1 or not 1 <= per_step <= n or trials < 1:
        raise ConfigError(f"invalid coverage setup n={n} per_step={per_step} trials={trials}")
    if not replacement:
        samples = np.full(trials, -(-n // per_step), dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        samples = np.empty(trials, dtype=np.int64)
        for t in range(trials):
            seen = np.zeros(n, dtype=bool)
            count = steps = 0
            while count < n:
                if per_step == 1:
                    picks = rng.integers(n, size=1)
                else:
                    picks = rng.choice(n, size=per_step, replace=False)
                count += int(np.count_nonzero(~seen[picks]))
                seen[picks] = True
                steps += 1
            samples[t] = steps
    values, counts = np.unique(samples, return_counts=True)
    return CoverageStats(
        mean=float(samples.mean()),
        std=float(samples.std(ddof=1)) if trials > 1 else 0.0,
        histogram={int(v): int(c) for v, c in zip(values, counts)},
        samples=samples,
    )


def explore_never_active_distribution(n_inactive: int, swaps: int, updates: int) -> np.ndarray:
    """Exact law of the number of never-active weights under random regrowth.

    Each update prunes ``swaps`` active weights and regrows ``swaps`` weights
    drawn uniformly from the ``n_inactive`` weights that were inactive before
    the update.  Returns ``p`` with ``p[u]`` = P(u weights never active).
    """
    if not 0 <= swaps <= n_inactive:
        raise ConfigError("swaps must be between 0 and the inactive count")
    z = n_inactive
    p = np.zeros(z + 1)
    p[z] = 1.0
    total = math.comb(z, swaps)
    for _ in range(updates):
        nxt = np.zeros_like(p)
        for u in range(z + 1):
            if p[u] == 0.0:
                continue
            # hypergeometric: x of the regrown weights are new
            for x in range(max(0, swaps - (z - u)), min(u, swaps) + 1):
                nxt[u - x] += p[u] * math.comb(u, x) * math.comb(z - u, swaps - x) / total
        p = nxt
    return p


def explore_full_coverage_probability(n_inactive: int, swaps: int, updates: int) -> float:
    return float(explore_never_active_distribution(n_inactive, swaps, updates)[0])


def masked_gradient(model: MLP, masks: Mapping[str, np.ndarray], x, y, loss_scale: float = 1.0) -> np.ndarray:
    """Flat gradient of ``loss_scale * loss`` for the masked model, active coordinates only."""
    probe = model.copy()
    for lin in probe.linears():
        if lin.name in masks:
            lin.weight[...] = apply_mask(lin.weight, masks[lin.name])
    _, grads = loss_and_grads(probe, x, y)
    parts = []
    for lin in probe.linears():
        gw = grads[f"{lin.name}.weight"]
        if lin.name in masks:
            gw = gw[masks[lin.name].astype(bool)]
        parts.append(gw.reshape(-1))
        parts.append(grads[f"{lin.name}.bias"].reshape(-1))
    return loss_scale * np.concatenate(parts)


def probe_gradient_norm(model: MLP, masks: Mapping[str, np.ndarray], x, y, loss_scale: float = 1.0) -> float:
    """Squared norm of the full probe-set gradient of the masked model."""
    g = masked_gradient(model, masks, x, y, loss_scale)
    return float(g @ g)


def gradient_variance(batch_grads: Sequence[np.ndarray], probe_grad: np.ndarray) -> float:
    """Mean squared distance of per-batch gradients from the probe gradient."""
    if not len(batch_grads):
        raise ConfigError("need at least one batch gradient")
    return float(np.mean([np.sum((g - probe_grad) ** 2) for g in batch_grads]))


def estimate_grad_variance(
    model: MLP,
    masks: Mapping[str, np.ndarray],
    batches: Sequence[tuple[np.ndarray, np.ndarray]],
    probe: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """Empirical gradient variance over ``batches``.

    The reference gradient is taken on ``probe``, or on all batches pooled.
    """
    if probe is None:
        probe = (np.concatenate([b[0] for b in batches]), np.concatenate([b[1] for b in batches]))
    ref = masked_gradient(model, masks, *probe)
    return gradient_variance([masked_gradient(model, masks, bx, by) for bx, by in batches], ref)


@dataclass
class ConvergenceReport:
    grad_norms: list[float] = field(default_factory=list)
    delta2: list[float] = field(default_factory=list)
    grad_variance: float | None = None

    @property
    def rounds(self) -> int:
        return len(self.grad_norms)

    def rows(self) -> list[dict]:
        return [
            {
                "round": q,
                "grad_norm_sq": self.grad_norms[q],
                "delta2": self.delta2[q] if q < len(self.delta2) else "",
                "grad_variance": "" if self.grad_variance is None else self.grad_variance,
            }
            for q in range(self.rounds)
        ]
