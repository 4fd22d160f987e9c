"""Experiment orchestration: data, single-DON baselines, MODNO q sweeps, tables.

An :class:`ExperimentConfig` fully determines a run.  Its canonical JSON is
hashed into the output directory name, so two runs of the same config land in
the same place and produce byte-identical tables.  Wall-clock times are kept
out of the tables and only appear in the training histories.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datagen import (InitialConditionSpec, PdeSpec, build_shard, equispaced_sensors, load_shard,
                      mean_baseline_error, save_shard, test_mesh, train_mesh)
from .exceptions import ConfigError, ModnoError, StageError
from .metrics import relative_l2_set
from .models import (DonModel, ModnoModel, don_predict_grid, init_don, init_modno,
                     modno_predict_grid, save_model)
from .preprocessing import ShardScaler
from .trainer import CostLedger, TrainConfig, train_modno, train_single_don

__all__ = [
    "ExperimentConfig", "OperatorSpec", "ResultsTable", "NAMED_EXPERIMENTS", "build_experiment_data",
    "emit_solution_plotdata", "emit_summary", "emit_table", "evaluate_model", "experiment_config",
    "load_config", "output_dir", "pooled_mean_baselines",
    "run_experiment",
]


@dataclass(frozen=True)
class OperatorSpec:
    pde: PdeSpec
    ic: InitialConditionSpec

    @property
    def label(self):
        return self.pde.label

    def to_dict(self):
        return {"pde": self.pde.to_dict(), "ic": self.ic.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(PdeSpec.from_dict(d["pde"]), InitialConditionSpec.from_dict(d["ic"]))


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one table.

    ``n_times = 0`` gives an ``x``-only trunk evaluated at ``T``.  With
    ``n_times > 0`` the trunk takes ``(x, t)``; training uses ``n_times``
    equally spaced times in ``(0, T_train]`` and testing uses ``T`` alone,
    so the test time never appears in training.
    """

    name: str
    operators: list
    n_train: int = 1000
    n_test: int = 200
    n_sensors: int = 64
    n_query: int = 128
    n_grid: int = 256
    n_times: int = 0
    basis_count: int = 64
    branch_hidden: tuple = (128, 128)
    trunk_hidden: tuple = (128, 128)
    activation: str = "tanh"
    query_range: float = 3.0
    normalize_targets: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    q_values: tuple = (1.0, 0.9, 0.8, 0.7)
    single_don: bool = True
    seed: int = 0
    plot_samples: tuple = (0,)

    def __post_init__(self):
        self.operators = [op if isinstance(op, OperatorSpec) else OperatorSpec.from_dict(op)
                          for op in self.operators]
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.branch_hidden = tuple(int(w) for w in self.branch_hidden)
        self.trunk_hidden = tuple(int(w) for w in self.trunk_hidden)
        self.q_values = tuple(float(q) for q in self.q_values)
        self.plot_samples = tuple(int(i) for i in self.plot_samples)
        if not self.operators:
            raise ConfigError("an experiment needs at least one operator")
        if self.name in NAMED_SHAPES and len(self.operators) != NAMED_SHAPES[self.name]:
            raise ConfigError(f"{self.name} has {NAMED_SHAPES[self.name]} operators, "
                              f"config lists {len(self.operators)}")
        for q in self.q_values:
            if not 0.0 < q <= 1.0:
                raise ConfigError(f"q values must lie in (0, 1], got {q}")
        for key in ("n_train", "n_test", "n_sensors", "n_query", "basis_count"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.n_times < 0:
            raise ConfigError("n_times must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def query_dim(self):
        return 1 if self.n_times == 0 else 2

    @property
    def labels(self):
        return [op.label for op in self.operators]

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["operators"] = [op.to_dict() for op in self.operators]
        d["train"] = asdict(self.train)
        for key in ("branch_hidden", "trunk_hidden", "q_values", "plot_samples"):
            d[key] = list(d[key])
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def content_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def data_hash(self):
        """Hash of the fields that determine the datasets (not the training)."""
        keys = ("operators", "n_train", "n_test", "n_sensors", "n_query", "n_grid", "n_times", "seed")
        d = self.to_dict()
        return hashlib.sha256(json.dumps({k: d[k] for k in keys}, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)


# --- named experiments -----------------------------------------------------------

NAMED_SHAPES = {"exp1": 3, "exp2": 3, "exp3": 3, "exp4": 3, "exp5": 4}


def _op(equation, family, params=None, **pde_kw):
    return OperatorSpec(PdeSpec(equation, params or {}, **pde_kw), InitialConditionSpec(family))


def _named(name):
    if name == "exp1":
        return ExperimentConfig(
            "exp1", [_op("wave", "fourier_a"), _op("klein_gordon", "fourier_a"), _op("sine_gordon", "fourier_a")],
            activation="sine", query_range=10.0, normalize_targets=False,
            train=TrainConfig(epochs=1000, minibatch_size=100))
    if name == "exp2":
        return ExperimentConfig(
            "exp2", [_op("porous_media", "fourier_b", {"m": m}, T=0.01, T_train=0.008) for m in (2, 3, 4)],
            n_times=4, train=TrainConfig(epochs=300, minibatch_size=100))
    if name == "exp3":
        return ExperimentConfig(
            "exp3", [_op("parabolic", "gaussian_mix_a"), _op("viscous_burgers", "gaussian_mix_a"),
                     _op("burgers", "gaussian_mix_a")],
            train=TrainConfig(epochs=300, minibatch_size=100))
    if name == "exp4":
        return ExperimentConfig(
            "exp4", [_op("kdv", "gaussian_mix_b"), _op("cahn_hilliard", "gaussian_mix_b"),
                     _op("advection", "gaussian_mix_b")],
            activation="sine", query_range=10.0, train=TrainConfig(epochs=300, minibatch_size=100))
    if name == "exp5":
        return ExperimentConfig(
            "exp5", [_op("porous_media", "fourier_b", {"m": 2}, T=0.01, T_train=0.008),
                     _op("cahn_hilliard", "fourier_b", {"ic_offset": 1.0}, T=0.5, domain_length=2.0,
                         T_train=0.4),
                     _op("sine_gordon", "fourier_b", T=2.0, T_train=1.6),
                     _op("parabolic", "fourier_b", T=0.02, domain_length=2.0, T_train=0.016)],
            n_times=4, q_values=(1.0, 0.9, 0.8), train=TrainConfig(epochs=300, minibatch_size=100))
    raise ConfigError(f"unknown experiment {name!r}; named experiments are {sorted(NAMED_SHAPES)}")


NAMED_EXPERIMENTS = tuple(NAMED_SHAPES)


def experiment_config(name, **overrides):
    """Committed defaults for a named experiment, with optional field overrides."""
    cfg = _named(name)
    return cfg.replace(**overrides) if overrides else cfg


def load_config(source):
    """Config from a JSON path, or the defaults of a named experiment."""
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        try:
            return ExperimentConfig.from_json(path.read_text())
        except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
            raise ConfigError(f"cannot read config {source}: {exc}") from exc
    return experiment_config(str(source))


# --- data --------------------------------------------------------------------------

def _meshes(cfg, op):
    pde = op.pde
    if cfg.n_times == 0:
        return train_mesh(pde.domain_length, cfg.n_query), test_mesh(pde.domain_length, cfg.n_query)
    t_train = pde.T_train if pde.T_train is not None else pde.T
    times = t_train * np.arange(1, cfg.n_times + 1) / cfg.n_times
    return (train_mesh(pde.domain_length, cfg.n_query, times),
            test_mesh(pde.domain_length, cfg.n_query, np.array([pde.T])))


def build_experiment_data(cfg, cache_dir=None):
    """Train and test shards per operator, drawn from disjoint seeded streams.

    With ``cache_dir`` the shards are stored under the config's data hash and
    reloaded on later calls.
    """
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"data-{cfg.data_hash()[:16]}"
        files = [(cache / f"op{i}_train.bin", cache / f"op{i}_test.bin") for i in range(len(cfg.operators))]
        if all(a.exists() and b.exists() for a, b in files):
            return [load_shard(a) for a, _ in files], [load_shard(b) for _, b in files]
    train, test = [], []
    for i, op in enumerate(cfg.operators):
        sensors = equispaced_sensors(op.pde.domain_length, cfg.n_sensors)
        tr_mesh, te_mesh = _meshes(cfg, op)
        train.append(build_shard(op.pde, op.ic, cfg.n_train, sensors, tr_mesh,
                                 np.random.default_rng([cfg.seed, i, 0]), "train", i, cfg.n_grid))
        test.append(build_shard(op.pde, op.ic, cfg.n_test, sensors, te_mesh,
                                np.random.default_rng([cfg.seed, i, 1]), "test", i, cfg.n_grid))
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        for i, (a, b) in enumerate(zip(train, test)):
            save_shard(cache / f"op{i}_train.bin", a)
            save_shard(cache / f"op{i}_test.bin", b)
    return train, test


def pooled_mean_baselines(train, test):
    """Mean-baseline error per operator, the mean taken over every operator's training targets.

    Operators whose mesh differs from the first one fall back to their own mean.
    """
    out = []
    for i, (tr, te) in enumerate(zip(train, test)):
        pool = [s for j, s in enumerate(train) if j != i and s.points.shape == tr.points.shape
                and np.array_equal(s.points, tr.points)]
        out.append(mean_baseline_error(tr, te, pool))
    return out


# --- results -----------------------------------------------------------------------

@dataclass
class ResultsTable:
    """Relative test errors (fractions, not percentages) for one experiment.

    ``modno[i][k]`` is operator ``i`` at ``q_values[k]``; ``single_don`` is
    ``None`` when the baselines were not trained.
    """

    experiment: str
    operators: list
    q_values: list
    modno: list
    single_don: list | None = None
    mean_baseline: list | None = None
    cost_ratio: list = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        if len(self.modno) != len(self.operators):
            raise ConfigError("one MODNO row per operator required")
        for row in self.modno:
            if len(row) != len(self.q_values):
                raise ConfigError("one MODNO column per q required")
        cells = [v for row in self.modno for v in row] + list(self.single_don or [])
        if any(not (math.isfinite(v) and v >= 0) for v in cells):
            raise ConfigError("every table cell must be a finite non-negative error")

    def header(self):
        cols = ["Operator"]
        if self.single_don is not None:
            cols.append("Single DON 100% data")
        cols += [f"MODNO {_pct_label(q)} data" for q in self.q_values]
        return cols

    def rows(self):
        out = []
        for i, name in enumerate(self.operators):
            row = [name]
            if self.single_don is not None:
                row.append(_pct(self.single_don[i]))
            row += [_pct(v) for v in self.modno[i]]
            out.append(row)
        return out

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _pct(frac):
    return f"{100.0 * frac:.2f}%"


def _pct_label(q):
    return f"{100.0 * q:g}%"


def emit_table(results, fmt="markdown", path=None):
    """Render the error table as markdown or CSV, one row per operator.

    Returns the text; also writes it when ``path`` is given.
    """
    header, rows = results.header(), results.rows()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        text = "\n".join(lines) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        text = buf.getvalue()
    else:
        raise ConfigError(f"unknown table format {fmt!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


def emit_summary(results, path=None):
    """CSV of the per-q cost ratios and per-operator mean baselines."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", "key", "value"])
    for q, r in zip(results.q_values, results.cost_ratio):
        w.writerow(["cost_ratio", f"{q:g}", repr(float(r))])
    for name, b in zip(results.operators, results.mean_baseline or []):
        w.writerow(["mean_baseline", name, _pct(b)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def emit_solution_plotdata(model, shard, sample_indices, path=None, op_index=0):
    """Whitespace-delimited columns: query coordinates, then target and prediction per sample.

    The header line starts with ``#``.  Values use ``repr`` so they re-parse
    to the exact floats.
    """
    idx = [int(i) for i in sample_indices]
    for i in idx:
        if not 0 <= i < shard.n_functions:
            raise IndexError(f"sample {i} out of range for {shard.n_functions} functions")
    u = shard.inputs[idx]
    if isinstance(model, ModnoModel):
        pred = modno_predict_grid(model, op_index, u, shard.points)
    else:
        pred = don_predict_grid(model, u, shard.points)
    coord_names = ["x", "t"][:shard.query_dim]
    header = list(coord_names)
    cols = [shard.points[:, c] for c in range(shard.query_dim)]
    for k, i in enumerate(idx):
        header += [f"target_{i}", f"prediction_{i}"]
        cols += [shard.targets[i], pred[k]]
    lines = ["# " + " ".join(header)]
    lines += [" ".join(repr(float(v)) for v in row) for row in zip(*cols)]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def evaluate_model(model, test_shards):
    """Mean relative L2 error per operator (a DonModel scores a single shard)."""
    if isinstance(model, DonModel):
        s = test_shards[0]
        return [relative_l2_set(don_predict_grid(model, s.inputs, s.points), s.targets)]
    return [relative_l2_set(modno_predict_grid(model, i, s.inputs, s.points), s.targets)
            for i, s in enumerate(test_shards)]


# --- orchestration -----------------------------------------------------------------

def _init_kwargs(cfg):
    return {"basis_count": cfg.basis_count, "branch_hidden": cfg.branch_hidden,
            "trunk_hidden": cfg.trunk_hidden, "activation": cfg.activation, "seed": cfg.seed}


def _fit_single(cfg, scaler, i, shard, test_shard):
    model = init_don(cfg.n_sensors, cfg.query_dim, **_init_kwargs(cfg))
    scaling = (scaler.target_shift[i], scaler.target_scale[i])
    trained, hist = train_single_don(model, scaler.transform_one(shard, i), cfg.train,
                                     scaler.transform_one(test_shard, i), target_scaling=scaling)
    return scaler.fold(trained, i), hist


def _fit_single_job(args):
    return _fit_single(*args)


def train_experiment_modno(cfg, scaler, train, test, q):
    model = init_modno(cfg.n_sensors, [cfg.query_dim] * len(train), **_init_kwargs(cfg))
    tcfg = TrainConfig(**{**asdict(cfg.train), "q": q})
    scaling = list(zip(scaler.target_shift, scaler.target_scale))
    trained, hist = train_modno(model, scaler.transform(train), tcfg, scaler.transform(test),
                                target_scaling=scaling)
    return scaler.fold(trained), hist


def output_dir(cfg, root):
    return Path(root) / f"{cfg.name}-{cfg.content_hash()[:12]}"


def run_experiment(cfg, out_root=None, threads=1, cache_dir=None, log=None):
    """Train everything the config asks for, evaluate off-grid and return the table.

    With ``out_root`` the config, tables, histories, checkpoints and plot data
    go to a directory named by the config hash.  A failing stage raises
    :class:`StageError` after whatever finished has been written.
    """
    say = log or (lambda msg: None)
    out = None
    if out_root is not None:
        out = output_dir(cfg, out_root)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json() + "\n")
    done = {"single": None, "modno": {}}

    def flush_partial():
        if out is None:
            return
        partial = {"single_don": done["single"], "modno": {f"{q:g}": v for q, v in done["modno"].items()}}
        (out / "partial.json").write_text(json.dumps(partial, sort_keys=True, indent=2) + "\n")

    stage = "datagen"
    try:
        train, test = build_experiment_data(cfg, cache_dir)
        say(f"data ready: {len(train)} operators")
        stage = "baseline"
        baselines = pooled_mean_baselines(train, test)
        scaler = ShardScaler.fit(train, cfg.query_range, cfg.normalize_targets)

        if cfg.single_don:
            stage = "single_don"
            jobs = [(cfg, scaler, i, train[i], test[i]) for i in range(len(train))]
            if threads > 1:
                with ProcessPoolExecutor(max_workers=threads) as pool:
                    singles = list(pool.map(_fit_single_job, jobs))
            else:
                singles = [_fit_single(*job) for job in jobs]
            done["single"] = [evaluate_model(m, [test[i]])[0] for i, (m, _) in enumerate(singles)]
            say(f"single DON errors: {done['single']}")
            if out is not None:
                for i, (m, hist) in enumerate(singles):
                    save_model(out / f"single_op{i}.ckpt", m)
                    hist.write_csv(out / f"history_single_op{i}.csv")

        stage = "modno"
        ratios = []
        for q in cfg.q_values:
            model, hist = train_experiment_modno(cfg, scaler, train, test, q)
            done["modno"][q] = evaluate_model(model, test)
            say(f"MODNO q={q:g} errors: {done['modno'][q]}")
            ledger = CostLedger.from_models(train, model.shared_branch, model.trunks, q, cfg.train.epochs)
            ratios.append(ledger.ratio)
            if out is not None:
                save_model(out / f"modno_q{q:g}.ckpt", model)
                hist.write_csv(out / f"history_modno_q{q:g}.csv")
                for i, s in enumerate(test):
                    samples = [k for k in cfg.plot_samples if k < s.n_functions]
                    emit_solution_plotdata(model, s, samples, out / f"plot_op{i}_q{q:g}.dat", op_index=i)

        stage = "report"
        results = ResultsTable(cfg.name, cfg.labels, list(cfg.q_values),
                               [[done["modno"][q][i] for q in cfg.q_values] for i in range(len(train))],
                               done["single"], baselines, ratios, cfg.seed, cfg.content_hash())
        if out is not None:
            emit_table(results, "csv", out / "results.csv")
            emit_table(results, "markdown", out / "results.md")
            emit_summary(results, out / "summary.csv")
            (out / "results.json").write_text(json.dumps(results.to_dict(), sort_keys=True, indent=2) + "\n")
            partial = out / "partial.json"
            if partial.exists():
                os.remove(partial)
        return results
    except ModnoError as exc:
        flush_partial()
        if isinstance(exc, StageError):
            raise
        raise StageError(stage, exc) from exc
    except (ValueError, FloatingPointError, OSError) as exc:
        flush_partial()
        raise StageError(stage, exc) from exc
