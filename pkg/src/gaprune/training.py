"""Shared training loop and run bookkeeping used by every method."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .analysis import ConvergenceReport, CoverageTracker
from .data import Dataset
from .nn import MLP, OptimizerConfig, evaluate, loss_and_grads, lr_at, reset_momentum, sgd_step
from .sparsity import flops_estimate, sparsity_of

METRIC_COLUMNS = (
    "run_id",
    "method",
    "kind",
    "step",
    "round",
    "epoch",
    "lr",
    "train_loss",
    "val_loss",
    "val_acc",
    "global_sparsity",
    "partition_sparsity",
    "coverage",
    "delta2",
    "flops",
    "wall_clock",
)


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Independent generator for a named stream, e.g. ``rng_for(0, "data")``."""
    words = [int(seed)]
    for key in keys:
        words.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key))
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass
class RunRecord:
    run_id: str
    method: str
    rows: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    coverage: CoverageTracker = field(default_factory=CoverageTracker)
    convergence: ConvergenceReport | None = None
    final: dict = field(default_factory=dict)
    best_step: int | None = None
    best_val_acc: float | None = None
    messages_per_step: list[int] = field(default_factory=list)

    @property
    def epochs_trained(self) -> int:
        return sum(1 for r in self.rows if r["kind"] == "epoch")


class Trainer:
    """Holds the model, masks and data stream for one run.

    ``groups`` (a list of layer-name lists) sets the per-partition sparsity
    column; by default every masked layer is its own group.
    """

    def __init__(
        self,
        model: MLP,
        masks: dict[str, np.ndarray],
        data: Dataset,
        opt: OptimizerConfig,
        batch_size: int,
        data_rng: np.random.Generator,
        record: RunRecord,
        groups: Sequence[Sequence[str]] | None = None,
    ):
        self.model = model
        self.masks = masks
        self.data = data
        self.opt = opt
        self.batch_size = batch_size
        self.data_rng = data_rng
        self.record = record
        self.groups = groups
        self.epoch = 0
        self._t0 = time.perf_counter()

    def train(self, n_epochs: int, step=None, round_=None, lr_offset: int = 0, lr_total: int | None = None):
        """Train ``n_epochs`` epochs.

        By default the LR schedule restarts and spans just these epochs; pass
        ``lr_offset``/``lr_total`` to continue a longer schedule instead.
        """
        x, y = self.data.x_train, self.data.y_train
        n = len(y)
        for e in range(n_epochs):
            lr = lr_at(self.opt, lr_offset + e, lr_total or n_epochs)
            order = self.data_rng.permutation(n)
            losses = []
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grads = loss_and_grads(self.model, x[idx], y[idx])
                sgd_step(self.model, grads, self.masks, self.opt, lr)
                losses.append(loss * len(idx))
            self.epoch += 1
            self.log("epoch", step, round_, lr=lr, train_loss=sum(losses) / n)

    def reset_momentum(self):
        reset_momentum(self.model)

    def validate(self) -> tuple[float, float]:
        if len(self.data.y_val) == 0:
            return float("nan"), float("nan")
        return evaluate(self.model, self.data.x_val, self.data.y_val)

    def partition_sparsity(self) -> str:
        if not self.masks:
            return ""
        groups = self.groups if self.groups is not None else [[n] for n in self.masks]
        return ";".join(f"{sparsity_of(self.masks, g):.6f}" for g in groups)

    def log(self, kind, step, round_, lr=None, train_loss=None, delta2=None, **extra):
        val_loss, val_acc = self.validate() if kind == "epoch" else (None, None)
        row = {
            "run_id": self.record.run_id,
            "method": self.record.method,
            "kind": kind,
            "step": step,
            "round": round_,
            "epoch": self.epoch,
            "lr": lr,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "global_sparsity": sparsity_of(self.masks) if self.masks else 0.0,
            "partition_sparsity": self.partition_sparsity(),
            "coverage": self.record.coverage.fraction if self.record.coverage.history else None,
            "delta2": delta2,
            "flops": flops_estimate(self.model, self.masks),
            "wall_clock": round(time.perf_counter() - self._t0, 3),
        }
        self.record.rows.append(row)
        if kind != "epoch":
            self.record.events.append({"kind": kind, "step": step, "round": round_, "epoch": self.epoch, "delta2": delta2, **extra})
        return row

    def finish(self):
        loss, acc = self.validate()
        self.record.final = {
            "val_loss": loss,
            "val_acc": acc,
            "global_sparsity": sparsity_of(self.masks) if self.masks else 0.0,
            "flops": flops_estimate(self.model, self.masks),
            "epochs": self.epoch,
        }
        return self.record


def write_weights(model: MLP, new: Mapping[str, np.ndarray]):
    for name, w in new.items():
        model.layer(name).weight[...] = w
    model.touch()


StepHook = Callable[[int, MLP, Mapping[str, np.ndarray]], None]
