"""Command line entry point: ``gaprune {train,coverage,diagnose,inspect}``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import analysis
from .baselines import run_baseline
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .cyclic import run_cgap
from .errors import ConfigError, GaPError
from .nn import MLP
from .parallel import run_pgap
from .sparsity import block_sparsity_of, flops_estimate, layer_sparsity, mask_relative_error, sparsity_of
from .training import METRIC_COLUMNS, rng_for

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows: Iterable[dict], path, columns: Sequence[str]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])


def _dense_masks(model: MLP):
    return {lin.name: np.ones(lin.weight.shape, dtype=bool) for lin in model.linears()}


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.output or cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = cfg.dataset(Path(args.config).parent)
    seed = cfg.experiment.model_seed if cfg.experiment.model_seed is not None else cfg.experiment.seed
    model = MLP.from_sizes(cfg.model.sizes, seed=seed)
    method = cfg.experiment.method

    def save_step(step, m, masks):
        if cfg.gap.checkpoint_every_step:
            save_checkpoint(m, masks, out / f"step_{step:03d}.ckpt")

    if method == "cgap":
        model, masks, record = run_cgap(cfg.gap_config(), model, data, on_step=save_step)
    elif method == "pgap":
        model, masks, record = run_pgap(
            cfg.gap_config(), model, data, worker_count=cfg.gap.workers, timeout=cfg.gap.timeout, on_step=save_step
        )
    else:
        model, masks, record = run_baseline(cfg.baseline_config(), model, data)
    if not masks:
        masks = _dense_masks(model)

    write_csv(record.rows, out / "metrics.csv", METRIC_COLUMNS)
    save_checkpoint(model, masks, out / "final.ckpt")
    if record.convergence is not None:
        write_csv(record.convergence.rows(), out / "convergence.csv", ("round", "grad_norm_sq", "delta2", "grad_variance"))
    summary = {"method": method, "run_id": record.run_id, **record.final, "best_step": record.best_step}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{method}: val_acc={record.final['val_acc']:.4f} sparsity={record.final['global_sparsity']:.4f} -> {out}")
    return 0


def cmd_coverage(args) -> int:
    cfg = load_config(args.config)
    c = cfg.coverage
    out = Path(args.output or cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rand = analysis.simulate_random_coverage(c.n, c.per_step, c.trials, c.seed, replacement=True)
    sched = analysis.simulate_random_coverage(c.n, c.per_step, c.trials, c.seed, replacement=False)
    rows = [{"mode": "random", "steps": k, "count": v} for k, v in rand.histogram.items()]
    rows += [{"mode": "scheduled", "steps": k, "count": v} for k, v in sched.histogram.items()]
    write_csv(rows, out / "coverage.csv", ("mode", "steps", "count"))
    oracle = analysis.coupon_expected_steps(c.n) if c.per_step == 1 else None
    print(f"random: mean={rand.mean:.4f} std={rand.std:.4f} trials={c.trials}")
    if oracle is not None:
        print(f"oracle n*H_n={oracle:.4f}")
    print(f"scheduled: steps={sched.mean:.0f}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    model, masks = load_checkpoint(args.checkpoint)
    data = cfg.dataset(Path(args.config).parent)
    probe = data.probe(cfg.gap.probe_size, rng_for(cfg.experiment.seed, "probe"))
    bs = cfg.optimizer.batch_size
    batches = [(probe[0][i:i + bs], probe[1][i:i + bs]) for i in range(0, len(probe[1]), bs)]
    weights = {n: model.layer(n).weight for n in masks}
    row = {
        "grad_norm_sq": analysis.probe_gradient_norm(model, masks, *probe),
        "grad_variance": analysis.estimate_grad_variance(model, masks, batches, probe),
        "delta2": mask_relative_error(weights, masks),
        "global_sparsity": sparsity_of(masks),
    }
    columns = ("grad_norm_sq", "grad_variance", "delta2", "global_sparsity")
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(columns)
    writer.writerow([_cell(row[c]) for c in columns])
    return 0


def cmd_inspect(args) -> int:
    model, masks = load_checkpoint(args.checkpoint)
    per_layer = layer_sparsity(masks)
    for lin in model.linears():
        mask = masks.get(lin.name)
        s = per_layer.get(lin.name, 0.0)
        blocks = block_sparsity_of(mask, args.block_size) if mask is not None else 0.0
        print(f"{lin.name}\t{lin.in_features}x{lin.out_features}\tsparsity={s:.4f}\tblock_sparsity={blocks:.4f}")
    print(f"global_sparsity={sparsity_of(masks) if masks else 0.0:.4f}")
    print(f"flops={flops_estimate(model, masks)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaprune", description="Scheduled grow-and-prune sparse training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the configured training method")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override experiment.output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("coverage", help="random vs scheduled coverage statistics")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override experiment.output_dir")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("diagnose", help="gradient diagnostics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("inspect", help="per-layer sparsity and FLOPs of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--block-size", type=int, default=8)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"gaprune: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GaPError, OSError) as exc:
        print(f"gaprune: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
