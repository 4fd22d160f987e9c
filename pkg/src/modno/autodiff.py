"""Dense MLPs with hand-written reverse-mode gradients.

Matrices are plain 2-D ``float64`` numpy arrays. Networks are stored as
:class:`MlpParams`: a list of weight matrices shaped ``(fan_out, fan_in)``
and bias vectors, with one activation applied to every hidden layer and a
linear output layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ShapeError

ACTIVATIONS = ("tanh", "relu", "sine")
_ACT_ID = {name: i for i, name in enumerate(ACTIVATIONS)}

CKPT_MAGIC = b"MODNOCKPT"
CKPT_VERSION = 1


def as_matrix(a, name="array"):
    """Coerce to a C-contiguous 2-D float64 array."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass
class MlpParams:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if len(self.layer_sizes) < 3:
            raise ConfigError("an MLP needs at least one hidden layer")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of weight/bias arrays does not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if w.shape != shape or b.shape != (shape[0],):
                raise ShapeError(f"layer {l}: expected W{shape}, b({shape[0]},); got {w.shape}, {b.shape}")

    @property
    def d_in(self):
        return self.layer_sizes[0]

    @property
    def d_out(self):
        return self.layer_sizes[-1]

    def arrays(self):
        """Weights then biases, interleaved per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays):
        return MlpParams(self.layer_sizes, list(arrays[0::2]), list(arrays[1::2]), self.activation)

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")
        return self.with_arrays(out)

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays())

    def zeros_like(self):
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])


# Gradients share the parameter container; shapes are congruent by construction.
MlpGrads = MlpParams


def _check_congruent(p, g):
    if p.layer_sizes != g.layer_sizes:
        raise ShapeError(f"layer sizes differ: {p.layer_sizes} vs {g.layer_sizes}")


def mlp_init(layer_sizes, activation="tanh", rng_seed=0):
    """Glorot-uniform weights, zero biases."""
    if not layer_sizes:
        raise ConfigError("layer_sizes is empty")
    if any(int(s) < 1 for s in layer_sizes):
        raise ConfigError(f"layer sizes must be positive: {layer_sizes}")
    if len(layer_sizes) < 3:
        raise ConfigError("an MLP needs at least one hidden layer")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(list(layer_sizes), weights, biases, activation)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.sin(z)


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.cos(z)


def _check_batch(params, batch):
    batch = as_matrix(batch, "batch")
    if batch.shape[1] != params.d_in:
        raise ShapeError(f"batch has {batch.shape[1]} columns, network expects {params.d_in}")
    return batch


def forward_cached(params, batch):
    """Forward pass returning ``(output, cache)`` for :func:`backward_cached`."""
    batch = _check_batch(params, batch)
    zs, acts = [], [batch]
    h = batch
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if l == last:
            h = z
        else:
            zs.append(z)
            h = _act(params.activation, z)
            acts.append(h)
    return h, (zs, acts)


def backward_cached(params, cache, upstream, need_input_grad=True):
    zs, acts = cache
    delta = as_matrix(upstream, "upstream_grad")
    n = acts[0].shape[0]
    if delta.shape != (n, params.d_out):
        raise ShapeError(f"upstream gradient shape {delta.shape} != {(n, params.d_out)}")
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        gw[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l == 0 and not need_input_grad:
            delta = None
            break
        delta = delta @ params.weights[l]
        if l > 0:
            delta = delta * _act_grad(params.activation, zs[l - 1], acts[l])
    return MlpParams(params.layer_sizes, gw, gb, params.activation), delta


def mlp_forward(params, batch):
    return forward_cached(params, batch)[0]


def mlp_backward(params, batch, upstream_grad):
    """Gradients of ``sum(upstream_grad * mlp_forward(params, batch))``.

    Returns ``(param_grads, input_grad)``; the forward pass is recomputed.
    """
    _, cache = forward_cached(params, batch)
    return backward_cached(params, cache, upstream_grad)


def finite_difference_grad(f, params, h=1e-5, stencil=2):
    """Central differences of a scalar function of ``params``, one entry at a time.

    ``stencil=4`` uses the fourth-order five-point formula.
    """
    if h <= 0:
        raise ConfigError("h must be positive")
    if stencil not in (2, 4):
        raise ConfigError("stencil must be 2 or 4")
    theta = params.flat()
    grad = np.empty_like(theta)

    def at(j, delta):
        old = theta[j]
        theta[j] = old + delta
        val = f(params.with_flat(theta))
        theta[j] = old
        return val

    for j in range(theta.size):
        if stencil == 2:
            grad[j] = (at(j, h) - at(j, -h)) / (2.0 * h)
        else:
            grad[j] = (8.0 * (at(j, h) - at(j, -h)) - (at(j, 2 * h) - at(j, -2 * h))) / (12.0 * h)
    return params.with_flat(grad)


def gradient_relative_errors(analytic, numeric, floor=1e-8):
    """Per-parameter ``|a - n| / (|n| + floor)``."""
    a, n = analytic.flat(), numeric.flat()
    return np.abs(a - n) / (np.abs(n) + floor)


def mse_loss_and_grad(params, batch, targets):
    """``mean((f(x) - y)^2)`` and its parameter gradient."""
    out, cache = forward_cached(params, batch)
    resid = out - targets
    loss = float(np.mean(resid * resid))
    grads, _ = backward_cached(params, cache, 2.0 * resid / resid.size, need_input_grad=False)
    return loss, grads


def gradcheck_suite(seed=0, n_networks=20, h=1e-3):
    """Analytic vs five-point finite-difference gradients on random MLPs with random MSE losses.

    Returns the largest per-parameter relative error of each network.
    """
    rng = np.random.default_rng(seed)
    worst = []
    for _ in range(n_networks):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 5))] + [int(rng.integers(2, 33)) for _ in range(depth)] + [int(rng.integers(1, 4))]
        act = ("tanh", "sine")[int(rng.integers(2))]
        net = mlp_init(sizes, act, rng)
        net = net.with_flat(net.flat() + 0.1 * rng.standard_normal(net.n_params))
        x = rng.standard_normal((int(rng.integers(2, 9)), sizes[0]))
        y = rng.standard_normal((x.shape[0], sizes[-1]))
        _, g = mse_loss_and_grad(net, x, y)
        fd = finite_difference_grad(lambda p: mse_loss_and_grad(p, x, y)[0], net, h, stencil=4)
        worst.append(float(gradient_relative_errors(g, fd).max()))
    return worst


@dataclass
class OptimState:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default=None, repr=False)
    v: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if self.step < 0:
            raise ConfigError("step counter must be non-negative")


def optimizer_init(params, kind="adam", **kw):
    state = OptimState(kind=kind, **kw)
    if kind == "adam":
        state.m = [np.zeros_like(a) for a in params.arrays()]
        state.v = [np.zeros_like(a) for a in params.arrays()]
    return state


def optimizer_step(params, grads, state, lr):
    """One update; returns ``(new_params, new_state)`` and leaves inputs untouched."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    _check_congruent(params, grads)
    p_arr, g_arr = params.arrays(), grads.arrays()
    if state.kind == "sgd":
        new = [p - lr * g for p, g in zip(p_arr, g_arr)]
        return params.with_arrays(new), OptimState(
            "sgd", state.beta1, state.beta2, state.eps, state.step + 1)
    if state.m is None:
        state = optimizer_init(params, "adam", beta1=state.beta1, beta2=state.beta2,
                               eps=state.eps, step=state.step)
    if len(state.m) != len(p_arr) or any(m.shape != p.shape for m, p in zip(state.m, p_arr)):
        raise ShapeError("optimizer moments do not match parameter shapes")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = [b1 * mo + (1.0 - b1) * g for mo, g in zip(state.m, g_arr)]
    v = [b2 * vo + (1.0 - b2) * g * g for vo, g in zip(state.v, g_arr)]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(p_arr, m, v)]
    return params.with_arrays(new), OptimState("adam", b1, b2, state.eps, t, m, v)


# --- checkpoint format -----------------------------------------------------

def _pack_network(p):
    parts = [struct.pack("<I", len(p.layer_sizes))]
    parts.append(struct.pack(f"<{len(p.layer_sizes)}I", *p.layer_sizes))
    parts.append(struct.pack("<I", _ACT_ID[p.activation]))
    for a in p.arrays():
        parts.append(np.asarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack_network(buf, pos):
    (n_layers,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    sizes = list(struct.unpack_from(f"<{n_layers}I", buf, pos))
    pos += 4 * n_layers
    (act_id,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        n = fan_in * fan_out
        weights.append(np.frombuffer(buf, "<f8", n, pos).reshape(fan_out, fan_in).astype(np.float64))
        pos += 8 * n
        biases.append(np.frombuffer(buf, "<f8", fan_out, pos).astype(np.float64))
        pos += 8 * fan_out
    return MlpParams(sizes, weights, biases, ACTIVATIONS[act_id]), pos


def pack_checkpoint(networks, header=(), extras=()):
    """Serialize networks behind ``MODNOCKPT``, version, a u32 header list, and a network count.

    A trailing block (u32 count, then f64 values) carries ``extras``.
    """
    header = [int(h) for h in header]
    extras = np.asarray(extras, dtype="<f8").ravel()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
             struct.pack("<I", len(header)), struct.pack(f"<{len(header)}I", *header),
             struct.pack("<I", len(networks))]
    parts.extend(_pack_network(p) for p in networks)
    parts += [struct.pack("<I", extras.size), extras.tobytes()]
    return b"".join(parts)


def unpack_checkpoint(buf):
    if not buf.startswith(CKPT_MAGIC):
        raise ValueError("not a MODNO checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", buf, pos)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += 4
    (n_header,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    header = list(struct.unpack_from(f"<{n_header}I", buf, pos))
    pos += 4 * n_header
    (n_nets,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    nets = []
    for _ in range(n_nets):
        net, pos = _unpack_network(buf, pos)
        nets.append(net)
    (n_extra,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    extras = np.frombuffer(buf, "<f8", n_extra, pos).astype(np.float64)
    if pos + 8 * n_extra != len(buf):
        raise ValueError("trailing bytes after checkpoint payload")
    return nets, header, extras


def save_params(path, networks, header=(), extras=()):
    with open(path, "wb") as fh:
        fh.write(pack_checkpoint(networks, header, extras))


def load_params(path):
    with open(path, "rb") as fh:
        return unpack_checkpoint(fh.read())
