"""Branch/trunk operator networks.

A prediction is the inner product of the branch output ``a(u_hat)`` and the
trunk output ``b(x)`` in R^K.  :class:`ModnoModel` keeps one branch network
shared by every operator and one trunk network per operator.

An optional scalar ``output_shift`` per operator is added to every
prediction; it carries a fixed target offset (see :mod:`modno.preprocessing`)
and is zero unless set.

Loss helpers accept either a list of :class:`QueryBatch` (one per input
function, arbitrary query points) or, through the ``*_aligned`` internals,
a shared query mesh with a ``(n_functions, n_queries)`` target matrix.  The
aligned form is what training uses; it evaluates the trunk once per mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (MlpParams, as_matrix, backward_cached, forward_cached,
                       load_params, mlp_forward, mlp_init, save_params)
from .exceptions import ConfigError, ShapeError

KIND_DON = 1
KIND_MODNO = 2


@dataclass
class QueryBatch:
    points: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.points = as_matrix(self.points, "points")
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 1)
        if self.points.shape[0] != self.targets.shape[0]:
            raise ShapeError(f"{self.points.shape[0]} query points but {self.targets.shape[0]} targets")


@dataclass
class DonModel:
    branch: MlpParams
    trunk: MlpParams
    output_shift: float = 0.0

    def __post_init__(self):
        if self.branch.d_out != self.trunk.d_out:
            raise ShapeError(f"branch width {self.branch.d_out} != trunk width {self.trunk.d_out}")
        self.output_shift = float(self.output_shift)

    @property
    def n_sensors(self):
        return self.branch.d_in

    @property
    def basis_count(self):
        return self.branch.d_out

    @property
    def query_dim(self):
        return self.trunk.d_in

    def copy(self):
        return DonModel(self.branch.copy(), self.trunk.copy(), self.output_shift)


@dataclass
class ModnoModel:
    shared_branch: MlpParams
    trunks: list[MlpParams]
    output_shift: list[float] | None = None

    def __post_init__(self):
        if not self.trunks:
            raise ConfigError("a MODNO model needs at least one trunk")
        for i, t in enumerate(self.trunks):
            if t.d_out != self.shared_branch.d_out:
                raise ShapeError(f"trunk {i} width {t.d_out} != branch width {self.shared_branch.d_out}")
        shift = [0.0] * len(self.trunks) if self.output_shift is None else self.output_shift
        if len(shift) != len(self.trunks):
            raise ShapeError(f"{len(shift)} output shifts for {len(self.trunks)} trunks")
        self.output_shift = [float(v) for v in shift]

    @property
    def n_operators(self):
        return len(self.trunks)

    @property
    def n_sensors(self):
        return self.shared_branch.d_in

    @property
    def basis_count(self):
        return self.shared_branch.d_out

    @property
    def query_dims(self):
        return [t.d_in for t in self.trunks]

    def operator(self, i):
        """The DON seen by operator ``i``: shared branch plus its own trunk."""
        self._check_index(i)
        return DonModel(self.shared_branch, self.trunks[i], self.output_shift[i])

    def copy(self):
        return ModnoModel(self.shared_branch.copy(), [t.copy() for t in self.trunks],
                          list(self.output_shift))

    def _check_index(self, i):
        if not 0 <= i < len(self.trunks):
            raise IndexError(f"operator index {i} out of range for {len(self.trunks)} operators")


def init_don(n_sensors, query_dim, basis_count=64, branch_hidden=(128, 128),
             trunk_hidden=(128, 128), activation="tanh", seed=0):
    rng = np.random.default_rng(seed)
    branch = mlp_init([n_sensors, *branch_hidden, basis_count], activation, rng)
    trunk = mlp_init([query_dim, *trunk_hidden, basis_count], activation, rng)
    return DonModel(branch, trunk)


def init_modno(n_sensors, query_dims, basis_count=64, branch_hidden=(128, 128),
               trunk_hidden=(128, 128), activation="tanh", seed=0):
    """Initialize with the same stream :func:`init_don` uses, so one operator matches a DON."""
    rng = np.random.default_rng(seed)
    branch = mlp_init([n_sensors, *branch_hidden, basis_count], activation, rng)
    trunks = [mlp_init([d, *trunk_hidden, basis_count], activation, rng) for d in query_dims]
    return ModnoModel(branch, trunks)


def don_predict(model, u_hat, points):
    u_hat = np.asarray(u_hat, dtype=np.float64).reshape(1, -1)
    if u_hat.shape[1] != model.n_sensors:
        raise ShapeError(f"u_hat has {u_hat.shape[1]} values, model expects {model.n_sensors}")
    points = as_matrix(points, "points")
    if points.shape[1] != model.query_dim:
        raise ShapeError(f"points have {points.shape[1]} columns, trunk expects {model.query_dim}")
    a = mlp_forward(model.branch, u_hat)[0]
    return mlp_forward(model.trunk, points) @ a + model.output_shift


def don_predict_grid(model, u_hats, points):
    """Predictions for many inputs on one shared mesh, shape ``(n_functions, n_queries)``."""
    return mlp_forward(model.branch, u_hats) @ mlp_forward(model.trunk, points).T + model.output_shift


def modno_predict(model, op_index, u_hat, points):
    return don_predict(model.operator(op_index), u_hat, points)


def modno_predict_grid(model, op_index, u_hats, points):
    return don_predict_grid(model.operator(op_index), u_hats, points)


# --- losses ----------------------------------------------------------------

def aligned_loss_and_grads(branch, trunk, u_hats, points, targets,
                           need_branch=True, need_trunk=True, shift=0.0):
    """Mean squared error on a shared query mesh, with optional gradients.

    Returns ``(loss, branch_grads | None, trunk_grads | None)``.
    """
    u_hats = as_matrix(u_hats, "u_hats")
    targets = as_matrix(targets, "targets")
    if u_hats.shape[0] == 0:
        raise ConfigError("empty batch")
    a, a_cache = forward_cached(branch, u_hats)
    b, b_cache = forward_cached(trunk, points)
    if targets.shape != (a.shape[0], b.shape[0]):
        raise ShapeError(f"targets shape {targets.shape} != {(a.shape[0], b.shape[0])}")
    resid = a @ b.T + shift - targets
    loss = float(np.sum(resid * resid)) / resid.size
    if not (need_branch or need_trunk):
        return loss, None, None
    d_pred = resid * (2.0 / resid.size)
    gb = gt = None
    if need_branch:
        gb, _ = backward_cached(branch, a_cache, d_pred @ b, need_input_grad=False)
    if need_trunk:
        gt, _ = backward_cached(trunk, b_cache, d_pred.T @ a, need_input_grad=False)
    return loss, gb, gt


def _ragged_loss_and_grads(branch, trunk, u_hats, queries, shift=0.0):
    u_hats = as_matrix(u_hats, "u_hats")
    if len(queries) != u_hats.shape[0]:
        raise ShapeError(f"{u_hats.shape[0]} input functions but {len(queries)} query batches")
    counts = np.array([q.points.shape[0] for q in queries])
    owner = np.repeat(np.arange(len(queries)), counts)
    pts = np.concatenate([q.points for q in queries], axis=0)
    y = np.concatenate([q.targets[:, 0] for q in queries])
    a, a_cache = forward_cached(branch, u_hats)
    b, b_cache = forward_cached(trunk, pts)
    a_rows = a[owner]
    resid = np.sum(a_rows * b, axis=1) + shift - y
    loss = float(np.sum(resid * resid)) / resid.size
    d_pred = resid * (2.0 / resid.size)
    d_a = np.zeros_like(a)
    np.add.at(d_a, owner, d_pred[:, None] * b)
    gb, _ = backward_cached(branch, a_cache, d_a, need_input_grad=False)
    gt, _ = backward_cached(trunk, b_cache, d_pred[:, None] * a_rows, need_input_grad=False)
    return loss, gb, gt


def _shared_mesh(queries):
    """Return ``(points, targets_matrix)`` if every batch uses the same points, else ``None``."""
    first = queries[0].points
    for q in queries[1:]:
        if q.points.shape != first.shape or not np.array_equal(q.points, first):
            return None
    return first, np.stack([q.targets[:, 0] for q in queries])


def don_loss_and_grads(model, u_hats, queries):
    """MSE over every query point of every function; returns ``(loss, branch_grads, trunk_grads)``."""
    if len(queries) == 0:
        raise ConfigError("empty batch")
    shared = _shared_mesh(queries)
    if shared is not None:
        if as_matrix(u_hats, "u_hats").shape[0] != len(queries):
            raise ShapeError(f"{len(u_hats)} input functions but {len(queries)} query batches")
        return aligned_loss_and_grads(model.branch, model.trunk, u_hats, *shared,
                                      shift=model.output_shift)
    return _ragged_loss_and_grads(model.branch, model.trunk, u_hats, queries, model.output_shift)


def local_loss_and_grads(model, i, u_hats, queries):
    """Local loss of operator ``i``; returns ``(loss, grad_trunk_i, grad_shared_branch)``."""
    loss, gb, gt = don_loss_and_grads(model.operator(i), u_hats, queries)
    return loss, gt, gb


def add_grads(a, b):
    return a.with_arrays([x + y for x, y in zip(a.arrays(), b.arrays())])


def global_loss_and_grads(model, shards, q_subsample_indices=None):
    """Sum of local losses over operators and the summed shared-branch gradient.

    ``shards`` holds one dataset per operator (anything with ``inputs``,
    ``points`` and ``targets``); ``q_subsample_indices`` optionally selects
    input functions per shard.  Gradients are reduced in operator order.
    """
    if len(shards) == 0:
        raise ConfigError("no operators given")
    if len(shards) != model.n_operators:
        raise ShapeError(f"{len(shards)} shards for {model.n_operators} operators")
    if q_subsample_indices is None:
        q_subsample_indices = [None] * len(shards)
    total, grad = 0.0, None
    for i, (shard, idx) in enumerate(zip(shards, q_subsample_indices)):
        u, y = shard.inputs, shard.targets
        if idx is not None:
            u, y = u[idx], y[idx]
        loss, gb, _ = aligned_loss_and_grads(model.shared_branch, model.trunks[i], u,
                                             shard.points, y, need_trunk=False,
                                             shift=model.output_shift[i])
        total += loss
        grad = gb if grad is None else add_grads(grad, gb)
    return total, grad


# --- checkpoints -----------------------------------------------------------

def save_model(path, model):
    if isinstance(model, DonModel):
        header = [KIND_DON, 1, model.basis_count, model.n_sensors, model.query_dim]
        save_params(path, [model.branch, model.trunk], header, [model.output_shift])
    else:
        header = [KIND_MODNO, model.n_operators, model.basis_count, model.n_sensors, *model.query_dims]
        save_params(path, [model.shared_branch, *model.trunks], header, model.output_shift)


def load_model(path):
    """Read a checkpoint written by :func:`save_model`; output shifts travel in the trailing block."""
    nets, header, extras = load_params(path)
    if not header:
        raise ValueError("checkpoint has no model header")
    if header[0] == KIND_DON:
        return DonModel(nets[0], nets[1], extras[0] if extras.size else 0.0)
    if header[0] == KIND_MODNO:
        model = ModnoModel(nets[0], nets[1:], list(extras) if extras.size else None)
        if model.n_operators != header[1] or model.query_dims != header[4:]:
            raise ValueError("checkpoint header disagrees with stored networks")
        return model
    raise ValueError(f"unknown model kind {header[0]}")
