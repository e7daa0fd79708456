"""Scheduled grow-and-prune sparse training for small MLPs."""

from .analysis import (
    ConvergenceReport,
    CoverageTracker,
    coupon_expected_steps,
    estimate_grad_variance,
    probe_gradient_norm,
    simulate_random_coverage,
    track_coverage,
)
from .baselines import BaselineConfig, run_baseline, run_dense, run_gmp, run_one_shot, run_random_explore, run_static_random
from .checkpoint import load_checkpoint, save_checkpoint
from .cyclic import GaPConfig, init_sparse, run_cgap
from .data import Dataset, load_idx, make_synthetic
from .nn import MLP, OptimizerConfig, backward, finite_diff_grad, forward, lr_at, sgd_step
from .parallel import combine, run_pgap
from .partition import PartitionScheme, make_contiguous_partitions, make_random_partition, schedule_indices
from .sparsity import (
    SparsityPolicy,
    apply_mask,
    arg_grow_to,
    arg_prune_to,
    flops_estimate,
    mask_relative_error,
    sparsity_of,
)

__version__ = "0.1.0"
