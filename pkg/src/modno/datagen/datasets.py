"""Dataset shards: sensor-sampled inputs paired with solver targets on a query mesh."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigError, SolverDivergenceError
from ..metrics import relative_l2_set
from ..models import QueryBatch
from .ics import Grid1D, InitialConditionSpec, draw_ic_params, eval_ic
from .solvers import PdeSpec, solve_batch

DS_MAGIC = b"MODNODS1"
DS_VERSION = 1
MAX_REJECTIONS = 10


@dataclass(frozen=True)
class QueryMesh:
    """Spatial query points, optionally crossed with query times.

    With ``times`` set, query points are ``(x, t)`` pairs ordered time-major;
    without it the trunk sees ``x`` only and targets are taken at ``T``.
    """

    x: np.ndarray
    times: np.ndarray | None = None

    @property
    def dim(self):
        return 1 if self.times is None else 2

    def points(self):
        x = np.asarray(self.x, dtype=np.float64)
        if self.times is None:
            return x[:, None]
        t = np.asarray(self.times, dtype=np.float64)
        return np.stack([np.tile(x, t.size), np.repeat(t, x.size)], axis=1)


def train_mesh(length, n_query, times=None):
    return QueryMesh(np.arange(n_query) * (length / n_query), times)


def test_mesh(length, n_query, times=None):
    """Training mesh shifted by half a cell, so no test point is a training point."""
    return QueryMesh((np.arange(n_query) + 0.5) * (length / n_query), times)


def equispaced_sensors(length, n_sensors):
    return np.arange(n_sensors) * (length / n_sensors)


def fourier_interpolate(values, length, x_new):
    """Trigonometric interpolation of periodic samples (last axis) to ``x_new``."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[-1]
    coef = np.fft.rfft(values, axis=-1) / n
    k = 2.0 * np.pi * np.fft.rfftfreq(n, d=length / n)
    weight = np.full(k.size, 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    phase = np.exp(1j * np.outer(np.asarray(x_new, dtype=np.float64), k))
    return np.real((coef * weight) @ phase.T)


@dataclass
class DatasetShard:
    operator_id: int
    pde: PdeSpec
    ic: InitialConditionSpec
    sensors: np.ndarray
    inputs: np.ndarray
    points: np.ndarray
    targets: np.ndarray
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {self.split!r}")
        # C order regardless of how the arrays were built: reductions and BLAS round
        # differently per layout, and fresh and cached shards must train identically
        self.sensors = np.ascontiguousarray(self.sensors, dtype=np.float64)
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.targets = np.ascontiguousarray(self.targets, dtype=np.float64)
        if self.inputs.shape[1] != self.sensors.size:
            raise ConfigError("input width differs from sensor count")
        if self.targets.shape != (self.inputs.shape[0], self.points.shape[0]):
            raise ConfigError(f"targets shape {self.targets.shape} inconsistent with "
                              f"{self.inputs.shape[0]} inputs x {self.points.shape[0]} points")

    @property
    def n_functions(self):
        return self.inputs.shape[0]

    @property
    def query_dim(self):
        return self.points.shape[1]

    @property
    def n_sensors(self):
        return self.sensors.size

    def queries(self, indices=None):
        idx = range(self.n_functions) if indices is None else indices
        return [QueryBatch(self.points, self.targets[p]) for p in idx]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        return DatasetShard(self.operator_id, self.pde, self.ic, self.sensors, self.inputs[indices],
                            self.points, self.targets[indices], self.split, dict(self.meta))

    def metadata(self):
        return {"operator_id": self.operator_id, "pde": self.pde.to_dict(), "ic": self.ic.to_dict(),
                "split": self.split, "meta": self.meta}


def build_shard(spec, ic_spec, n_functions, sensors, query_mesh, rng, split="train",
                operator_id=0, n_grid=256, tail_tol=1e-6):
    """Sample initial conditions, solve, and record (input, target) pairs.

    Rows whose solve diverges (or leaves the spectral tail above
    ``tail_tol``) are redrawn, at most ``MAX_REJECTIONS`` times per row.
    """
    if n_functions < 1:
        raise ConfigError("n_functions must be >= 1")
    if not np.isclose(spec.domain_length, ic_spec.domain_length):
        raise ConfigError(f"{ic_spec.family} ICs live on length {ic_spec.domain_length}, "
                          f"{spec.equation} on {spec.domain_length}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    grid = Grid1D(spec.domain_length, n_grid)
    sensors = np.asarray(sensors, dtype=np.float64)
    if np.any(sensors < 0) or np.any(sensors >= spec.domain_length):
        raise ConfigError("sensors must lie in [0, L)")
    if query_mesh.times is None:
        save_times = [spec.T]
    else:
        save_times = [float(t) for t in query_mesh.times]

    params = [draw_ic_params(ic_spec, rng) for _ in range(n_functions)]
    snaps = np.empty((n_functions, len(save_times), n_grid))
    pending = np.arange(n_functions)
    rejections = np.zeros(n_functions, dtype=int)
    while pending.size:
        u0 = np.array([eval_ic(ic_spec, params[p], grid.x) for p in pending])
        out, ok, t_fail = solve_batch(spec, u0, grid, save_times, tail_tol=tail_tol)
        snaps[pending[ok]] = out[ok]
        failed = pending[~ok]
        for j, p in enumerate(failed):
            rejections[p] += 1
            if rejections[p] > MAX_REJECTIONS:
                raise SolverDivergenceError(spec.equation, t_fail[~ok][j],
                                            f"sample {p} rejected {MAX_REJECTIONS} times")
            params[p] = draw_ic_params(ic_spec, rng)
        pending = failed

    inputs = np.array([eval_ic(ic_spec, p, sensors) for p in params])
    x = np.asarray(query_mesh.x, dtype=np.float64)
    grid_idx = x / grid.dx
    if np.allclose(grid_idx, np.round(grid_idx), atol=1e-9, rtol=0):
        at_x = snaps[:, :, np.round(grid_idx).astype(int) % n_grid]
    else:
        at_x = fourier_interpolate(snaps, spec.domain_length, x)
    targets = at_x.reshape(n_functions, -1)
    meta = {"n_grid": n_grid, "ic_offset": spec.ic_offset, "rejections": int(rejections.sum()),
            "mesh_x": x.tolist(),
            "mesh_times": None if query_mesh.times is None else [float(t) for t in query_mesh.times]}
    return DatasetShard(operator_id, spec, ic_spec, sensors, inputs, query_mesh.points(),
                        targets, split, meta)


# --- baselines ---------------------------------------------------------------

def _mesh_slices(shard):
    """``(x, times, targets[n, n_times, n_x])`` view of a shard's query layout."""
    x = np.asarray(shard.meta.get("mesh_x", shard.points[:, 0]), dtype=np.float64)
    times = shard.meta.get("mesh_times")
    n_t = 1 if times is None else len(times)
    return x, times, shard.targets.reshape(shard.n_functions, n_t, x.size)


def mean_prediction(train_targets_by_time, train_x, train_times, length, test_x, test_times):
    mean = train_targets_by_time.mean(axis=0)
    if train_times is None or test_times is None:
        rows = [mean[-1]] * (1 if test_times is None else len(test_times))
    else:
        tt = np.asarray(train_times)
        rows = [mean[int(np.argmin(np.abs(tt - t)))] for t in test_times]
    return np.concatenate([fourier_interpolate(r, length, test_x) for r in rows])


def mean_baseline_error(train_shard, test_shard, pool=None):
    """Mean relative L2 error of predicting every test target by the mean training target.

    ``pool`` optionally lists further training shards on the same mesh whose
    targets join the mean (one mean shared across operators).
    """
    if train_shard.n_functions == 0 or test_shard.n_functions == 0:
        raise ConfigError("empty shard")
    x, times, tr = _mesh_slices(train_shard)
    if pool:
        tr = np.concatenate([tr] + [_mesh_slices(s)[2] for s in pool])
    test_x, test_times, _ = _mesh_slices(test_shard)
    pred = mean_prediction(tr, x, times, train_shard.pde.domain_length, test_x, test_times)
    return relative_l2_set(np.broadcast_to(pred, test_shard.targets.shape), test_shard.targets)


# --- file format ---------------------------------------------------------------

def _pack_block(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()


def _unpack_block(buf, pos):
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(buf, "<f8", n, pos).reshape(shape).astype(np.float64)
    return a, pos + 8 * n


def pack_shard(shard):
    meta = json.dumps(shard.metadata(), sort_keys=True).encode()
    return b"".join([DS_MAGIC, struct.pack("<I", DS_VERSION), struct.pack("<Q", len(meta)), meta,
                     _pack_block(shard.sensors), _pack_block(shard.inputs),
                     _pack_block(shard.points), _pack_block(shard.targets)])


def unpack_shard(buf):
    if not buf.startswith(DS_MAGIC):
        raise ValueError("not a MODNO dataset file (bad magic)")
    pos = len(DS_MAGIC)
    (version,) = struct.unpack_from("<I", buf, pos)
    if version != DS_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    pos += 4
    (n_meta,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    meta = json.loads(buf[pos:pos + n_meta].decode())
    pos += n_meta
    blocks = []
    for _ in range(4):
        a, pos = _unpack_block(buf, pos)
        blocks.append(a)
    sensors, inputs, points, targets = blocks
    return DatasetShard(meta["operator_id"], PdeSpec.from_dict(meta["pde"]),
                        InitialConditionSpec.from_dict(meta["ic"]), sensors, inputs, points, targets,
                        meta["split"], meta["meta"])


def save_shard(path, shard):
    with open(path, "wb") as fh:
        fh.write(pack_shard(shard))


def load_shard(path):
    with open(path, "rb") as fh:
        return unpack_shard(fh.read())


# --- solver checks ---------------------------------------------------------------

def self_convergence_error(spec, ic_spec, rng, n_samples=4, n_grid=256, time_tol=1e-8):
    """Relative difference between solutions at ``T`` on ``n_grid`` and ``2 n_grid`` points.

    The fine solution is compared at the coarse grid nodes.  Only rows that
    both solves accept enter the norm.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    coarse, fine = Grid1D(spec.domain_length, n_grid), Grid1D(spec.domain_length, 2 * n_grid)
    params = [draw_ic_params(ic_spec, rng) for _ in range(n_samples)]
    a, ok_a, _ = solve_batch(spec, [eval_ic(ic_spec, p, coarse.x) for p in params], coarse, [spec.T], time_tol)
    b, ok_b, _ = solve_batch(spec, [eval_ic(ic_spec, p, fine.x) for p in params], fine, [spec.T], time_tol)
    ok = ok_a & ok_b
    if not np.any(ok):
        raise SolverDivergenceError(spec.equation, spec.T, "no sample solved on both grids")
    a, b = a[ok, -1], b[ok, -1, ::2]
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))
