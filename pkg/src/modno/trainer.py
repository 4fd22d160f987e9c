"""Alternating MODNO training, the single-DON baseline, and pass-count costs.

One MODNO epoch has two phases.  First every operator's trunk makes a pass
over minibatches of its own functions with the shared branch frozen.  Then
the shared branch makes a pass over a ``q``-fraction of every operator's
functions with the updated trunks frozen; each branch step sums the local
losses of one chunk per operator.  With ``minibatch_size="full"`` each phase
is a single step.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import optimizer_init, optimizer_step
from .exceptions import ConfigError, ShapeError, TrainingDivergenceError
from .metrics import relative_l2_set
from .models import DonModel, ModnoModel, add_grads, aligned_loss_and_grads, don_predict_grid

SUBSAMPLE_MODES = ("per_epoch_resample", "fixed_subset")


@dataclass
class TrainConfig:
    epochs: int = 100
    trunk_lr: float | list = 1e-3
    branch_lr: float = 1e-3
    q: float = 1.0
    minibatch_size: int | str = "full"
    optimizer: str = "adam"
    seed: int = 0
    subsample_mode: str = "per_epoch_resample"
    eval_every: int = 1

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= float(self.q) <= 1.0:
            raise ConfigError(f"q must lie in [0, 1], got {self.q}")
        lrs = self.trunk_lr if isinstance(self.trunk_lr, (list, tuple)) else [self.trunk_lr]
        # a zero rate freezes the network; negative rates are rejected
        if any(lr < 0 for lr in lrs) or self.branch_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.subsample_mode not in SUBSAMPLE_MODES:
            raise ConfigError(f"unknown subsample mode {self.subsample_mode!r}")
        if self.minibatch_size != "full" and int(self.minibatch_size) < 1:
            raise ConfigError("minibatch_size must be a positive count or 'full'")

    def trunk_lrs(self, n_ops):
        if isinstance(self.trunk_lr, (list, tuple)):
            if len(self.trunk_lr) != n_ops:
                raise ConfigError(f"{len(self.trunk_lr)} trunk learning rates for {n_ops} operators")
            return [float(v) for v in self.trunk_lr]
        return [float(self.trunk_lr)] * n_ops

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class TrainHistory:
    n_operators: int
    global_loss: list = field(default_factory=list)
    local_losses: list = field(default_factory=list)
    rel_errors: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    model: object = None

    @property
    def n_epochs(self):
        return len(self.global_loss)

    def write_csv(self, path_or_file):
        header = (["epoch", "global_loss"] + [f"loss_op_{i}" for i in range(self.n_operators)]
                  + [f"relerr_op_{i}" for i in range(self.n_operators)] + ["seconds"])
        own = isinstance(path_or_file, (str, os.PathLike))
        fh = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            w = csv.writer(fh)
            w.writerow(header)
            for e in range(self.n_epochs):
                w.writerow([e + 1, repr(self.global_loss[e])] + [repr(v) for v in self.local_losses[e]]
                           + [repr(v) for v in self.rel_errors[e]] + [f"{self.seconds[e]:.3f}"])
        finally:
            if own:
                fh.close()


def _subset_size(q, n):
    # guard against q*n landing a hair above an integer
    return min(n, math.ceil(round(q * n, 9)))


def subsample_for_shared(n_functions, q, rng):
    """Sorted indices of ``ceil(q * n)`` input functions drawn without replacement.

    ``n_functions`` may also be a shard.  ``q == 1`` returns every index in
    order without touching ``rng``.
    """
    n = getattr(n_functions, "n_functions", n_functions)
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"q must lie in [0, 1], got {q}")
    k = _subset_size(q, n)
    if k == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def _check_shards(model_dims, n_sensors, shards):
    for i, (d, s) in enumerate(zip(model_dims, shards)):
        if s.inputs.shape[1] != n_sensors:
            raise ShapeError(f"shard {i} has {s.inputs.shape[1]} sensors, model expects {n_sensors}")
        if s.points.shape[1] != d:
            raise ShapeError(f"shard {i} queries are {s.points.shape[1]}-D, trunk {i} expects {d}")


def _round_batches(order, n_rounds):
    return np.array_split(order, n_rounds)


def _n_rounds(cfg, sizes):
    if cfg.minibatch_size == "full":
        return 1
    return max(1, math.ceil(max(sizes) / int(cfg.minibatch_size)))


def _step(params, grads, state, lr):
    if lr == 0.0:
        return params, state
    return optimizer_step(params, grads, state, lr)


def _evaluate(branch, trunks, shifts, shards, test_shards, target_scaling=None):
    losses = []
    for trunk, c, s in zip(trunks, shifts, shards):
        loss, _, _ = aligned_loss_and_grads(branch, trunk, s.inputs, s.points, s.targets,
                                            need_branch=False, need_trunk=False, shift=c)
        losses.append(loss)
    errs = []
    for i, (trunk, c, s) in enumerate(zip(trunks, shifts, test_shards or [])):
        pred = don_predict_grid(DonModel(branch, trunk, c), s.inputs, s.points)
        target = s.targets
        if target_scaling is not None:
            # report errors on the original target scale
            shift, scale = target_scaling[i]
            pred, target = shift + scale * pred, shift + scale * target
        errs.append(relative_l2_set(pred, target))
    if not all(math.isfinite(v) for v in losses):
        raise TrainingDivergenceError(f"non-finite training loss {losses}")
    if not test_shards:
        errs = [float("nan")] * len(trunks)
    return losses, errs


def train_modno(model, shards, cfg, test_shards=None, callback=None, target_scaling=None):
    """Run the alternating trunk/branch schedule for ``cfg.epochs`` epochs.

    ``callback(epoch, history, model)`` runs after every epoch.  When the
    shards carry standardized targets, ``target_scaling`` lists each
    operator's ``(shift, scale)`` so held-out errors are reported unscaled.
    Returns the trained model (a new object) and its :class:`TrainHistory`.
    """
    if len(shards) != model.n_operators:
        raise ShapeError(f"{len(shards)} shards for {model.n_operators} operators")
    _check_shards(model.query_dims, model.n_sensors, shards)
    n_ops = model.n_operators
    rng = np.random.default_rng(cfg.seed)
    trunk_lrs = cfg.trunk_lrs(n_ops)
    branch = model.shared_branch
    trunks = list(model.trunks)
    shifts = model.output_shift
    b_state = optimizer_init(branch, cfg.optimizer)
    t_states = [optimizer_init(t, cfg.optimizer) for t in trunks]
    sizes = [s.n_functions for s in shards]
    n_rounds = _n_rounds(cfg, sizes)
    fixed = None
    if cfg.subsample_mode == "fixed_subset":
        fixed = [subsample_for_shared(n, cfg.q, rng) for n in sizes]
    hist = TrainHistory(n_ops)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        subsets = fixed or [subsample_for_shared(n, cfg.q, rng) for n in sizes]
        if n_rounds == 1:
            orders = [np.arange(n) for n in sizes]
        else:
            orders = [rng.permutation(n) for n in sizes]
        trunk_batches = [_round_batches(o, n_rounds) for o in orders]
        branch_batches = []
        for o, sub in zip(orders, subsets):
            keep = np.zeros(o.size, dtype=bool)
            keep[sub] = True
            branch_batches.append(_round_batches(o[keep[o]], n_rounds))
        # dedicated phase: each trunk makes one pass over its own operator's data
        for i, s in enumerate(shards):
            for idx in trunk_batches[i]:
                if idx.size == 0:
                    continue
                _, _, gt = aligned_loss_and_grads(branch, trunks[i], s.inputs[idx], s.points,
                                                  s.targets[idx], need_branch=False, shift=shifts[i])
                trunks[i], t_states[i] = _step(trunks[i], gt, t_states[i], trunk_lrs[i])
        # shared phase: one pass over the q-subsets with the trunks frozen
        for r in range(n_rounds):
            g_alpha = None
            for i, s in enumerate(shards):
                idx = branch_batches[i][r]
                if idx.size == 0:
                    continue
                _, gb, _ = aligned_loss_and_grads(branch, trunks[i], s.inputs[idx], s.points,
                                                  s.targets[idx], need_trunk=False, shift=shifts[i])
                g_alpha = gb if g_alpha is None else add_grads(g_alpha, gb)
            if g_alpha is not None:
                branch, b_state = _step(branch, g_alpha, b_state, cfg.branch_lr)
        evaluate = (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs
        losses, errs = _evaluate(branch, trunks, shifts, shards, test_shards if evaluate else None,
                                 target_scaling)
        hist.local_losses.append(losses)
        hist.global_loss.append(float(sum(losses)))
        hist.rel_errors.append(errs)
        hist.seconds.append(time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, hist, ModnoModel(branch, list(trunks), list(shifts)))
    trained = ModnoModel(branch, trunks, list(shifts))
    hist.model = trained
    return trained, hist


def train_single_don(model, shard, cfg, test_shard=None, callback=None, target_scaling=None):
    """Baseline DON trained on one operator's data.

    Same optimizer, loss and epoch structure as MODNO: a pass of trunk steps,
    then a pass of branch steps over the same minibatches.  ``cfg.q`` is ignored.
    """
    _check_shards([model.query_dim], model.n_sensors, [shard])
    rng = np.random.default_rng(cfg.seed)
    branch, trunk, shift = model.branch, model.trunk, model.output_shift
    b_state = optimizer_init(branch, cfg.optimizer)
    t_state = optimizer_init(trunk, cfg.optimizer)
    n = shard.n_functions
    n_rounds = _n_rounds(cfg, [n])
    lr_trunk = cfg.trunk_lrs(1)[0]
    hist = TrainHistory(1)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = np.arange(n) if n_rounds == 1 else rng.permutation(n)
        batches = _round_batches(order, n_rounds)
        for idx in batches:
            if idx.size:
                _, _, gt = aligned_loss_and_grads(branch, trunk, shard.inputs[idx], shard.points,
                                                  shard.targets[idx], need_branch=False, shift=shift)
                trunk, t_state = _step(trunk, gt, t_state, lr_trunk)
        for idx in batches:
            if idx.size:
                _, gb, _ = aligned_loss_and_grads(branch, trunk, shard.inputs[idx], shard.points,
                                                  shard.targets[idx], need_trunk=False, shift=shift)
                branch, b_state = _step(branch, gb, b_state, cfg.branch_lr)
        evaluate = (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs
        losses, errs = _evaluate(branch, [trunk], [shift], [shard],
                                 [test_shard] if evaluate and test_shard is not None else None,
                                 None if target_scaling is None else [target_scaling])
        hist.local_losses.append(losses)
        hist.global_loss.append(losses[0])
        hist.rel_errors.append(errs)
        hist.seconds.append(time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, hist, DonModel(branch, trunk, shift))
    trained = DonModel(branch, trunk, shift)
    hist.model = trained
    return trained, hist


# --- cost accounting -----------------------------------------------------------

def _points_total(n_functions, n_points):
    """Total query points of one operator: ``n_points`` is per function (scalar) or a per-function list."""
    if np.ndim(n_points) == 0:
        total = n_functions * n_points
    else:
        if len(n_points) != n_functions:
            raise ConfigError("per-function query counts must list one entry per function")
        total = sum(n_points)
    if n_functions < 0 or np.any(np.asarray(n_points) < 0):
        raise ConfigError("counts must be non-negative")
    return total


def cost_modno(n_functions, n_points, n_b, n_a, q, epochs=1):
    """Forward+backward passes for MODNO: dedicated nets on all data, shared net on a q-fraction."""
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"q must lie in [0, 1], got {q}")
    if n_a < 0 or any(b < 0 for b in n_b) or epochs < 0:
        raise ConfigError("pass costs must be non-negative")
    total = 0.0
    for nu, npts, nb in zip(n_functions, n_points, n_b, strict=True):
        p = _points_total(nu, npts)
        total += p * nb + q * p * n_a
    return total * epochs


def cost_sol(n_functions, n_points, n_b, n_a, epochs=1):
    """Forward+backward passes for one independent DON per operator.

    ``n_a`` is the per-operator branch pass cost (a list, or one value for all).
    """
    n_a = list(n_a) if np.ndim(n_a) else [n_a] * len(n_b)
    if any(a < 0 for a in n_a) or any(b < 0 for b in n_b) or epochs < 0:
        raise ConfigError("pass costs must be non-negative")
    total = 0.0
    for nu, npts, nb, na in zip(n_functions, n_points, n_b, n_a, strict=True):
        total += _points_total(nu, npts) * (nb + na)
    return total * epochs


@dataclass
class CostLedger:
    n_functions: list
    n_points: list
    n_b: list
    n_a: float
    q: float = 1.0
    epochs: int = 1

    @property
    def c_mol(self):
        return cost_modno(self.n_functions, self.n_points, self.n_b, self.n_a, self.q, self.epochs)

    @property
    def c_sol(self):
        return cost_sol(self.n_functions, self.n_points, self.n_b, self.n_a, self.epochs)

    @property
    def ratio(self):
        return self.c_mol / self.c_sol if self.c_sol else float("nan")

    @classmethod
    def from_models(cls, shards, branch, trunks, q=1.0, epochs=1):
        """Ledger with pass costs proportional to each network's multiply-adds."""
        return cls([s.n_functions for s in shards], [s.points.shape[0] for s in shards],
                   [network_pass_cost(t) for t in trunks], network_pass_cost(branch), q, epochs)


def network_pass_cost(params):
    """Multiply-adds of one forward pass (backward counted as the same unit)."""
    return int(sum(w.size for w in params.weights))
