"""Pseudo-spectral solvers for the periodic 1-D benchmark equations.

Every solver works on a batch of initial conditions at once, in Fourier
space (``rfft`` coefficients), with 2/3-rule dealiasing of nonlinear terms.
First-order equations use ETDRK4 with contour-integral coefficients.  The
second-order wave-type equations are integrated as first-order systems in
``(u, u_t)`` with an integrating-factor (Lawson) RK4: the linear part is
propagated exactly mode by mode and classical RK4 handles the rest.  The
step size starts from a stiffness/CFL estimate and is halved until two
consecutive step sizes agree to ``time_tol``.

Equations (``u = u(x, t)``):

========================  ==========================================
wave                      u_tt = u_xx
klein_gordon              u_tt + m^2 c^4 u = c^2 u_xx
sine_gordon               u_tt + c sin(u) = u_xx
porous_media              u_t = (u^m)_xx
parabolic                 u_t = u_xx + 1
viscous_burgers           u_t + (u^2/2)_x = nu u_xx
burgers                   u_t + (u^2/2)_x = 0
kdv                       u_t + delta^2 u_xxx + u u_x = 0
cahn_hilliard             u_t = (3 u^2 - eps^2 u_xx)_xx
advection                 u_t + u_x = 0
========================  ==========================================

Second-order equations start from rest, ``u_t(x, 0) = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigError, SolverDivergenceError

EQUATIONS = {
    # name: (default params, default domain length, default terminal time)
    "wave": ({}, 2.0, 1.0),
    "klein_gordon": ({"m": 0.1, "c": 10.0}, 2.0, 2.0),
    "sine_gordon": ({"c": 1.0}, 2.0, 2.0),
    "porous_media": ({"m": 2, "ic_offset": 1.0}, 2.0, 0.01),
    "parabolic": ({}, 2.0 * np.pi, 0.5),
    "viscous_burgers": ({"nu": 0.1}, 2.0 * np.pi, 1.0),
    "burgers": ({}, 2.0 * np.pi, 0.4),
    "kdv": ({"delta": 0.022}, 1.0, 1.0),
    "cahn_hilliard": ({"eps": 0.01}, 1.0, 1.0),
    "advection": ({}, 1.0, 0.1),
}

SECOND_ORDER = ("wave", "klein_gordon", "sine_gordon")

BLOWUP_THRESHOLD = 1e6
N_CONTOUR = 32


@dataclass(frozen=True)
class PdeSpec:
    equation: str
    params: dict = field(default_factory=dict)
    T: float | None = None
    domain_length: float | None = None
    T_train: float | None = None

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise ConfigError(f"unknown equation {self.equation!r}")
        defaults, length, T = EQUATIONS[self.equation]
        params = {**defaults, **self.params}
        object.__setattr__(self, "params", params)
        if self.T is None:
            object.__setattr__(self, "T", T)
        if self.domain_length is None:
            object.__setattr__(self, "domain_length", length)
        if not self.T > 0:
            raise ConfigError("terminal time must be positive")
        if self.T_train is not None and not 0 < self.T_train <= self.T:
            raise ConfigError("T_train must lie in (0, T]")
        for key in ("nu", "delta", "eps", "c"):
            if key in params and not params[key] > 0:
                raise ConfigError(f"{self.equation}: parameter {key} must be positive")
        if self.equation == "porous_media" and params["m"] not in (2, 3, 4):
            raise ConfigError("porous-media degree must be 2, 3 or 4")

    @property
    def ic_offset(self):
        """Constant added to the input function before solving (porous media positivity)."""
        return float(self.params.get("ic_offset", 0.0))

    @property
    def label(self):
        if self.equation == "porous_media":
            return f"porous_media_m{self.params['m']}"
        return self.equation

    def to_dict(self):
        return {"equation": self.equation, "params": dict(self.params), "T": self.T,
                "domain_length": self.domain_length, "T_train": self.T_train}

    @classmethod
    def from_dict(cls, d):
        return cls(d["equation"], d.get("params", {}), d.get("T"), d.get("domain_length"), d.get("T_train"))


# --- integrators ------------------------------------------------------------

def _phi_coefficients(Lh, h):
    """ETDRK4 coefficients (Kassam & Trefethen) by averaging over a contour around each ``L h``."""
    real = np.isrealobj(Lh)
    # real operators need only the upper half circle (conjugate symmetry)
    arc = np.pi if real else 2.0 * np.pi
    r = np.exp(1j * arc * (np.arange(1, N_CONTOUR + 1) - 0.5) / N_CONTOUR)
    LR = Lh[..., None] + r

    def avg(expr):
        m = expr.mean(axis=-1)
        return m.real if real else m

    E = np.exp(Lh)
    E2 = np.exp(Lh / 2.0)
    Q = h * avg((np.exp(LR / 2.0) - 1.0) / LR)
    f1 = h * avg((-4.0 - LR + np.exp(LR) * (4.0 - 3.0 * LR + LR ** 2)) / LR ** 3)
    f2 = h * avg((2.0 + LR + np.exp(LR) * (LR - 2.0)) / LR ** 3)
    f3 = h * avg((-4.0 - 3.0 * LR - LR ** 2 + np.exp(LR) * (4.0 - LR)) / LR ** 3)
    return E, E2, Q, f1, f2, f3


def _etdrk4_stepper(L, nonlinear, h):
    E, E2, Q, f1, f2, f3 = _phi_coefficients(L * h, h)

    def step(v):
        Nv = nonlinear(v)
        a = E2 * v + Q * Nv
        Na = nonlinear(a)
        b = E2 * v + Q * Na
        Nb = nonlinear(b)
        c = E2 * a + Q * (2.0 * Nb - Nv)
        Nc = nonlinear(c)
        return E * v + Nv * f1 + 2.0 * (Na + Nb) * f2 + Nc * f3

    return step


def _lawson_rk4_stepper(omega2, nonlinear, h):
    """Integrating-factor RK4 for ``y' = A y + N(y)`` with ``A = [[0, 1], [-omega^2, 0]]`` per mode."""

    def propagator(t):
        om = np.sqrt(omega2)
        c = np.cos(om * t)
        s_over = np.where(om > 0, np.sin(om * t) / np.where(om > 0, om, 1.0), t)
        return c, s_over, -om * np.sin(om * t)

    full = propagator(h)
    half = propagator(h / 2.0)

    def apply(P, y):
        c, s_over, ms = P
        u, w = y[:, 0], y[:, 1]
        return np.stack([c * u + s_over * w, ms * u + c * w], axis=1)

    def step(y):
        k1 = nonlinear(y)
        k2 = nonlinear(apply(half, y + 0.5 * h * k1))
        k3 = nonlinear(apply(half, y) + 0.5 * h * k2)
        k4 = nonlinear(apply(full, y) + h * apply(half, k3))
        return apply(full, y + (h / 6.0) * k1) + (h / 3.0) * apply(half, k2 + k3) + (h / 6.0) * k4

    return step


class _Problem:
    """Fourier-space right-hand side and initial state for one equation on one grid."""

    def __init__(self, spec, u0, n):
        self.spec = spec
        self.n = n
        L = spec.domain_length
        self.k = 2.0 * np.pi * np.fft.rfftfreq(n, d=L / n)
        # first-derivative wavenumbers drop the Nyquist mode
        self.k_odd = self.k.copy()
        self.k_odd[-1] = 0.0
        self.mask = (np.arange(self.k.size) <= n // 3).astype(np.float64)
        self.u0 = u0
        self.k_max = self.k[-1]
        p = spec.params
        eq = spec.equation
        k2 = self.k ** 2
        if eq in SECOND_ORDER:
            if eq == "klein_gordon":
                c2 = p["c"] ** 2
                omega2 = c2 * k2 + p["m"] ** 2 * p["c"] ** 4
            else:
                omega2 = k2
            self.omega2 = omega2
        elif eq == "porous_media":
            m = p["m"]
            # reference diffusivity: maximum of m u^(m-1) over the initial data
            D0 = np.max(m * np.abs(u0) ** (m - 1), axis=-1, keepdims=True)
            self.L = -D0 * k2
        elif eq == "parabolic":
            self.L = -k2
        elif eq == "viscous_burgers":
            self.L = -p["nu"] * k2
        elif eq == "burgers":
            self.L = 0.0 * k2
        elif eq == "kdv":
            self.L = 1j * p["delta"] ** 2 * self.k_odd ** 3
        elif eq == "advection":
            self.L = -1j * self.k_odd
        elif eq == "cahn_hilliard":
            D0 = 6.0 * np.max(np.abs(u0), axis=-1, keepdims=True)
            self.L = -p["eps"] ** 2 * k2 ** 2 - D0 * k2
            self.D0 = D0

    # physical <-> spectral
    def fwd(self, u):
        return np.fft.rfft(u, axis=-1)

    def inv(self, v):
        return np.fft.irfft(v, n=self.n, axis=-1)

    def initial_state(self):
        v = self.fwd(self.u0)
        if self.spec.equation in SECOND_ORDER:
            return np.stack([v, np.zeros_like(v)], axis=1)
        return v

    def physical(self, state):
        if self.spec.equation in SECOND_ORDER:
            return self.inv(state[:, 0])
        return self.inv(state)

    def nonlinear(self, v):
        eq = self.spec.equation
        p = self.spec.params
        if eq == "porous_media":
            m = p["m"]
            u = self.inv(v)
            return -(self.k ** 2) * (self.mask * self.fwd(u ** m)) - self.L * v
        if eq == "advection":
            return np.zeros_like(v)
        if eq == "parabolic":
            out = np.zeros_like(v)
            out[:, 0] = self.n  # rfft of the constant forcing 1
            return out
        if eq in ("viscous_burgers", "burgers", "kdv"):
            u = self.inv(v)
            return -0.5j * self.k_odd * (self.mask * self.fwd(u * u))
        if eq == "cahn_hilliard":
            u = self.inv(v)
            return -3.0 * self.k ** 2 * (self.mask * self.fwd(u * u)) + self.D0 * self.k ** 2 * v
        raise AssertionError(eq)

    def second_order_forcing(self, state):
        """Non-stiff part of the (u, u_t) system; zero for the linear equations."""
        out = np.zeros_like(state)
        if self.spec.equation == "sine_gordon":
            v = state[:, 0]
            out[:, 1] = -self.spec.params["c"] * self.mask * self.fwd(np.sin(self.inv(v)))
        return out

    def initial_dt(self, T):
        eq = self.spec.equation
        umax = float(np.max(np.abs(self.u0))) + 1e-12
        if eq in ("wave", "klein_gordon", "advection", "parabolic"):
            # exactly integrated linear problems
            return T
        if eq == "sine_gordon":
            dt = 0.05 / max(1.0, self.spec.params["c"]) ** 0.5
        elif eq in ("viscous_burgers", "burgers", "kdv"):
            dt = 0.5 / (umax * self.k_max * 2.0 / 3.0)
        elif eq == "porous_media":
            dt = T / 100.0
        elif eq == "cahn_hilliard":
            dt = T / 100.0
        else:
            dt = T / 20.0
        return min(dt, T / 10.0)

    def stepper(self, h):
        if self.spec.equation in SECOND_ORDER:
            return _lawson_rk4_stepper(self.omega2, self.second_order_forcing, h)
        return _etdrk4_stepper(self.L, self.nonlinear, h)


def _integrate(problem, save_times, dt):
    """March to each save time with steps no larger than ``dt``.

    Returns ``(snapshots[n, n_times, N], ok[n], t_fail[n])``.
    """
    state = problem.initial_state()
    n_fun = problem.u0.shape[0]
    out = np.empty((n_fun, len(save_times), problem.n))
    ok = np.ones(n_fun, dtype=bool)
    t_fail = np.full(n_fun, np.nan)
    t = 0.0
    steppers = {}
    for j, ts in enumerate(save_times):
        span = ts - t
        if span > 0:
            n_steps = max(1, math.ceil(span / dt - 1e-9))
            h = span / n_steps
            key = round(h, 14)
            if key not in steppers:
                steppers[key] = problem.stepper(h)
            step = steppers[key]
            for s in range(n_steps):
                state = step(state)
                if s % 16 == 15 or s == n_steps - 1:
                    bad = ~np.all(np.isfinite(state.reshape(n_fun, -1)), axis=1)
                    if np.any(bad):
                        newly = bad & ok
                        t_fail[newly] = t + (s + 1) * h
                        ok &= ~bad
                        state = np.where(bad.reshape((-1,) + (1,) * (state.ndim - 1)), 0.0, state)
            t = ts
        u = problem.physical(state)
        big = np.max(np.abs(u), axis=1) > BLOWUP_THRESHOLD
        newly = big & ok
        t_fail[newly] = t
        ok &= ~big
        out[:, j] = u
    return out, ok, t_fail


def resolution_ok(snapshots, tail_tol):
    """Spectral-tail test: energy just below the dealiasing cutoff must be negligible."""
    v = np.abs(np.fft.rfft(snapshots, axis=-1))
    n = snapshots.shape[-1]
    lo, hi = n // 4, n // 3 + 1
    tail = np.max(v[..., lo:hi], axis=-1)
    scale = np.max(v, axis=-1) + 1e-300
    return np.all(tail <= tail_tol * scale, axis=-1)


CHUNK = 64
# equations whose stabilizing linear operator depends on the initial data
PER_ROW_LINEAR = ("porous_media", "cahn_hilliard")


def solve_batch(spec, u0, grid, save_times, time_tol=1e-6, max_halvings=8, tail_tol=None):
    """Integrate a batch of initial conditions.

    Returns ``(snapshots[n, len(save_times), N], ok[n], t_fail[n])``.  Rows
    that blow up (or fail the optional spectral-tail test) have ``ok`` False.
    Equations with a data-dependent linear part are processed in chunks of
    ``CHUNK`` rows, each with its own step-size refinement.
    """
    u0 = np.atleast_2d(np.asarray(u0, dtype=np.float64))
    if u0.shape[1] != grid.n_points:
        raise ConfigError(f"initial data has {u0.shape[1]} points, grid has {grid.n_points}")
    if not np.isclose(grid.length, spec.domain_length):
        raise ConfigError(f"{spec.equation} domain length {spec.domain_length} != grid length {grid.length}")
    save_times = [float(t) for t in save_times]
    if not save_times or any(t < 0 or t > spec.T * (1 + 1e-12) for t in save_times):
        raise ConfigError(f"save times must lie in [0, {spec.T}]")
    if any(b < a for a, b in zip(save_times, save_times[1:])):
        raise ConfigError("save times must be non-decreasing")
    if not np.all(np.isfinite(u0)):
        raise ConfigError("initial data is not finite")
    u0 = u0 + spec.ic_offset
    chunk = CHUNK if spec.equation in PER_ROW_LINEAR else u0.shape[0]
    parts = [_solve_chunk(spec, u0[s:s + chunk], grid, save_times, time_tol, max_halvings)
             for s in range(0, u0.shape[0], chunk)]
    snaps = np.concatenate([p[0] for p in parts])
    ok = np.concatenate([p[1] for p in parts])
    t_fail = np.concatenate([p[2] for p in parts])
    if tail_tol is not None:
        resolved = resolution_ok(snaps, tail_tol)
        t_fail = np.where(ok & ~resolved, save_times[-1], t_fail)
        ok = ok & resolved
    return snaps, ok, t_fail


def _solve_chunk(spec, u0, grid, save_times, time_tol, max_halvings):
    problem = _Problem(spec, u0, grid.n_points)
    dt = problem.initial_dt(max(save_times) or spec.T)
    coarse = _integrate(problem, save_times, dt)
    for _ in range(max_halvings):
        dt /= 2.0
        fine = _integrate(problem, save_times, dt)
        ok = coarse[1] & fine[1]
        converged = False
        # rows rescued by the smaller step mean the coarse step was unstable
        if np.any(ok) and not np.any(fine[1] & ~coarse[1]):
            diff = np.linalg.norm((fine[0] - coarse[0])[ok]) / (np.linalg.norm(fine[0][ok]) + 1e-300)
            converged = diff < time_tol
        coarse = fine
        if converged:
            break
    return coarse


def solve_pde(spec, u0, grid, save_times, time_tol=1e-6, tail_tol=None):
    """Solution snapshots ``[len(save_times), N]`` for one initial condition.

    Raises :class:`SolverDivergenceError` on blow-up.
    """
    snaps, ok, t_fail = solve_batch(spec, u0, grid, save_times, time_tol, tail_tol=tail_tol)
    if not ok[0]:
        reason = "blow-up" if np.isfinite(t_fail[0]) and t_fail[0] < max(save_times) else "divergence"
        raise SolverDivergenceError(spec.equation, t_fail[0], reason)
    return snaps[0]
