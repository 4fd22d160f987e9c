"""Initial conditions, PDE solvers and dataset shards."""

from .datasets import (DatasetShard, QueryMesh, build_shard, equispaced_sensors, fourier_interpolate,
                       load_shard, mean_baseline_error, save_shard, self_convergence_error, test_mesh,
                       train_mesh)
from .ics import Grid1D, InitialConditionSpec, draw_ic_params, eval_ic, sample_ic
from .solvers import EQUATIONS, PdeSpec, solve_batch, solve_pde

__all__ = [
    "DatasetShard", "QueryMesh", "build_shard", "equispaced_sensors", "fourier_interpolate",
    "load_shard", "mean_baseline_error", "save_shard", "self_convergence_error", "test_mesh", "train_mesh",
    "Grid1D", "InitialConditionSpec", "draw_ic_params", "eval_ic", "sample_ic",
    "EQUATIONS", "PdeSpec", "solve_batch", "solve_pde",
]
