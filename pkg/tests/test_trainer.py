import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modno.exceptions import ConfigError, ShapeError, TrainingDivergenceError
from modno.models import DonModel, don_predict_grid, init_don, init_modno
from modno.trainer import (CostLedger, TrainConfig, cost_modno, cost_sol, subsample_for_shared, train_modno,
                           train_single_don)

SMALL = {"basis_count": 6, "branch_hidden": (12,), "trunk_hidden": (12,)}


class Shard:
    def __init__(self, inputs, points, targets):
        self.inputs, self.points, self.targets = inputs, points, targets

    @property
    def n_functions(self):
        return self.inputs.shape[0]


def linear_operator_shards(n_ops=2, n=40, n_s=8, n_q=10, seed=0):
    """Rank-2 linear operators ``G_i(u)(x) = (c_i0 . u) + (c_i1 . u) x`` on ``[-1, 1]``.

    A model with ``K >= 2`` represents them exactly.  Inputs are kept small so
    the tanh branch starts near its linear regime.
    """
    rng = np.random.default_rng(seed)
    x = np.linspace(-1, 1, n_q)[:, None]
    psi = np.stack([np.ones(n_q), x[:, 0]])
    shards = []
    for _ in range(n_ops):
        u = 0.3 * rng.standard_normal((n, n_s))
        c = rng.standard_normal((n_s, 2)) / (0.3 * np.sqrt(n_s))
        shards.append(Shard(u, x, u @ c @ psi))
    return shards


def flat(model):
    if isinstance(model, DonModel):
        return np.concatenate([model.branch.flat(), model.trunk.flat()])
    return np.concatenate([model.shared_branch.flat()] + [t.flat() for t in model.trunks])


def test_config_validation_and_json():
    for bad in ({"epochs": 0}, {"q": 1.5}, {"q": -0.1}, {"branch_lr": -1.0}, {"optimizer": "rmsprop"},
                {"subsample_mode": "x"}, {"minibatch_size": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    cfg = TrainConfig(epochs=3, trunk_lr=[1e-3, 2e-3], q=0.8, minibatch_size=16)
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    assert set(json.loads(cfg.to_json())) >= {"epochs", "trunk_lr", "branch_lr", "q", "minibatch_size"}
    with pytest.raises(ConfigError):
        cfg.trunk_lrs(3)


def test_zero_learning_rate_leaves_parameters():
    shards = linear_operator_shards()
    m = init_modno(8, [1, 1], seed=0, **SMALL)
    trained, hist = train_modno(m, shards, TrainConfig(epochs=1, trunk_lr=0.0, branch_lr=0.0))
    assert np.array_equal(flat(trained), flat(m)) and hist.n_epochs == 1
    d = init_don(8, 1, seed=0, **SMALL)
    trained, hist = train_single_don(d, shards[0], TrainConfig(epochs=2, trunk_lr=0.0, branch_lr=0.0))
    assert np.array_equal(flat(trained), flat(d)) and hist.n_epochs == 2


@pytest.mark.parametrize("batch", ["full", 7])
def test_single_operator_degeneracy(batch):
    shard = linear_operator_shards(1)[0]
    cfg = TrainConfig(epochs=50, q=1.0, optimizer="sgd", minibatch_size=batch, seed=3)
    m_traj, d_traj = [], []
    train_modno(init_modno(8, [1], seed=1, **SMALL), [shard], cfg,
                callback=lambda e, h, mod: m_traj.append(flat(mod)))
    train_single_don(init_don(8, 1, seed=1, **SMALL), shard, cfg,
                     callback=lambda e, h, mod: d_traj.append(flat(mod)))
    assert len(m_traj) == 50
    assert max(np.max(np.abs(a - b)) for a, b in zip(m_traj, d_traj)) == 0.0


def test_synthetic_linear_operators_are_learned():
    shards = linear_operator_shards(2, n=100)
    m = init_modno(8, [1, 1], seed=0, basis_count=8, branch_hidden=(32,), trunk_hidden=(32,))
    _, hist = train_modno(m, shards, TrainConfig(epochs=600, minibatch_size=10, seed=0))
    assert hist.global_loss[-1] < hist.global_loss[0]
    assert hist.global_loss[-1] < 1e-3


def test_single_don_overfits_one_sample():
    rng = np.random.default_rng(0)
    shard = Shard(rng.standard_normal((1, 8)), np.array([[-1.0], [0.0], [1.0]]), np.array([[0.5, -0.3, 0.8]]))
    d = init_don(8, 1, seed=0, basis_count=6, branch_hidden=(64,), trunk_hidden=(64,))
    cfg = TrainConfig(epochs=3000, trunk_lr=1e-2, branch_lr=1e-2, optimizer="sgd")
    _, hist = train_single_don(d, shard, cfg)
    assert hist.global_loss[-1] < 1e-6


def test_training_is_deterministic_and_returns_new_model():
    shards = linear_operator_shards()
    m = init_modno(8, [1, 1], seed=0, **SMALL)
    before = flat(m).copy()
    cfg = TrainConfig(epochs=5, q=0.7, minibatch_size=9, seed=11)
    a, ha = train_modno(m, shards, cfg)
    b, hb = train_modno(m, shards, cfg)
    assert np.array_equal(flat(a), flat(b)) and ha.global_loss == hb.global_loss
    assert np.array_equal(flat(m), before)


def test_data_isolation_small():
    shards = linear_operator_shards(3, n=20)
    perturbed = list(shards)
    perturbed[1] = Shard(shards[1].inputs, shards[1].points, shards[1].targets + 1.0)
    cfg = TrainConfig(epochs=1, optimizer="sgd", trunk_lr=1e-2, branch_lr=1e-2, q=0.8)
    m = init_modno(8, [1, 1, 1], seed=0, **SMALL)
    a, _ = train_modno(m, shards, cfg)
    b, _ = train_modno(m, perturbed, cfg)
    assert np.array_equal(a.trunks[0].flat(), b.trunks[0].flat())
    assert np.array_equal(a.trunks[2].flat(), b.trunks[2].flat())
    assert not np.array_equal(a.trunks[1].flat(), b.trunks[1].flat())
    assert not np.array_equal(a.shared_branch.flat(), b.shared_branch.flat())


def test_history_and_csv():
    shards = linear_operator_shards()
    m = init_modno(8, [1, 1], seed=0, **SMALL)
    trained, hist = train_modno(m, shards, TrainConfig(epochs=3, minibatch_size=10), test_shards=shards)
    assert hist.model is trained
    assert all(np.isclose(g, sum(l)) for g, l in zip(hist.global_loss, hist.local_losses))
    buf = io.StringIO()
    hist.write_csv(buf)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0] == ["epoch", "global_loss", "loss_op_0", "loss_op_1", "relerr_op_0", "relerr_op_1", "seconds"]
    assert len(rows) == 4 and float(rows[3][1]) == hist.global_loss[2]


def test_target_scaling_reports_unscaled_errors():
    shard = linear_operator_shards(1)[0]
    scaled = Shard(shard.inputs, shard.points, (shard.targets - 2.0) / 3.0)
    d = init_don(8, 1, seed=0, **SMALL)
    cfg = TrainConfig(epochs=1, trunk_lr=0.0, branch_lr=0.0)
    _, hist = train_single_don(d, scaled, cfg, test_shard=scaled, target_scaling=(2.0, 3.0))
    pred = 2.0 + 3.0 * don_predict_grid(d, shard.inputs, shard.points)
    ref = np.mean(np.linalg.norm(pred - shard.targets, axis=1) / np.linalg.norm(shard.targets, axis=1))
    assert np.isclose(hist.rel_errors[0][0], ref, rtol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_errors():
    shards = linear_operator_shards()
    m = init_modno(8, [1, 1], seed=0, **SMALL)
    with pytest.raises(ShapeError):
        train_modno(m, shards[:1], TrainConfig(epochs=1))
    with pytest.raises(ShapeError):
        train_modno(init_modno(7, [1, 1], seed=0, **SMALL), shards, TrainConfig(epochs=1))
    with pytest.raises(TrainingDivergenceError):
        train_modno(m, shards, TrainConfig(epochs=20, optimizer="sgd", trunk_lr=1e6, branch_lr=1e6))


def test_subsample_examples():
    rng = np.random.default_rng(0)
    assert np.array_equal(subsample_for_shared(10, 1.0, rng), np.arange(10))
    idx = subsample_for_shared(10, 0.5, rng)
    assert idx.size == 5 and np.unique(idx).size == 5
    assert subsample_for_shared(10, 0.0, rng).size == 0
    assert subsample_for_shared(10, 0.7, rng).size == 7  # ceil guards against 0.7*10 rounding up to 8
    assert subsample_for_shared(7, 0.5, rng).size == 4


def test_subsample_inclusion_frequency():
    rng = np.random.default_rng(1)
    counts = np.zeros(10)
    for _ in range(10_000):
        counts[subsample_for_shared(10, 0.3, rng)] += 1
    assert np.all(np.abs(counts / 10_000 - 0.3) < 0.02)


def test_cost_examples():
    assert cost_modno([2], [3], [5], 7, 1.0) == 72 == cost_sol([2], [3], [5], 7)
    assert cost_modno([2], [3], [5], 7, 0.0) == 2 * 3 * 5
    assert cost_sol([0], [3], [5], 7) == 0
    ratio = cost_modno([1000] * 3, [128] * 3, [10] * 3, 10, 0.7) / cost_sol([1000] * 3, [128] * 3, [10] * 3, 10)
    assert abs(ratio - 0.85) < 1e-12
    assert cost_modno([2], [[1, 2]], [1], 1, 1.0) == 6  # per-function query counts are summed
    with pytest.raises(ConfigError):
        cost_modno([-1], [3], [5], 7, 1.0)
    with pytest.raises(ConfigError):
        cost_sol([1], [3], [-5], 7)
    with pytest.raises(ConfigError):
        cost_modno([1], [3], [5], 7, 1.2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 10 ** 4), st.integers(0, 500), st.integers(0, 10 ** 5)), min_size=1,
                max_size=5), st.integers(0, 10 ** 5), st.floats(0, 1), st.floats(0, 1))
def test_cost_identity_and_monotonicity(ops, n_a, q1, q2):
    nu, npts, nb = map(list, zip(*ops))
    assert cost_modno(nu, npts, nb, n_a, 1.0) == cost_sol(nu, npts, nb, n_a)
    lo, hi = sorted((q1, q2))
    assert cost_modno(nu, npts, nb, n_a, lo) <= cost_modno(nu, npts, nb, n_a, hi)
    assert cost_modno(nu, npts, nb, n_a, hi) <= cost_sol(nu, npts, nb, n_a)


def test_cost_ledger_from_models():
    shards = linear_operator_shards(2)
    m = init_modno(8, [1, 1], seed=0, basis_count=4, branch_hidden=(4,), trunk_hidden=(4,))
    ledger = CostLedger.from_models(shards, m.shared_branch, m.trunks, q=0.5, epochs=3)
    n_a = 8 * 4 + 4 * 4
    n_b = 1 * 4 + 4 * 4
    assert ledger.n_a == n_a and ledger.n_b == [n_b, n_b]
    assert ledger.c_sol == 3 * 2 * 40 * 10 * (n_a + n_b)
    assert ledger.ratio == (n_b + 0.5 * n_a) / (n_b + n_a)
