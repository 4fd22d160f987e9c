"""Periodic grids and the random initial-condition families."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigError

FAMILIES = ("fourier_a", "fourier_b", "gaussian_mix_a", "gaussian_mix_b")

FAMILY_DOMAIN = {
    "fourier_a": 2.0,
    "fourier_b": 2.0,
    "gaussian_mix_a": 2.0 * np.pi,
    "gaussian_mix_b": 1.0,
}

DEFAULT_BOUNDS = {
    "fourier_a": {"coef": (-2.0, 2.0), "const": (0.1, 2.0)},
    "fourier_b": {"coef": (-1.0, 1.0), "scale": 0.1},
    "gaussian_mix_a": {"w": (0.0, 0.5), "mu1": (2 * np.pi, 4 * np.pi), "mu2": (2 * np.pi, 4 * np.pi),
                       "sigma": (0.3, 1.0)},
    "gaussian_mix_b": {"w": (0.0, 0.5), "mu1": (0.1, 0.9), "mu2": (0.8, 1.5), "sigma": (0.1, 0.5)},
}

# (kind, multiple of pi) for each random coefficient, in sampling order
_FOURIER_A_MODES = [("sin", 1), ("sin", 2), ("sin", 4), ("sin", 6), ("cos", 1), ("cos", 2), ("cos", 4), ("cos", 6)]
_FOURIER_B_MODES = [("sin", 1), ("sin", 2), ("sin", 3), ("cos", 2), ("cos", 4), ("cos", 6)]

N_IMAGES = 5


@dataclass(frozen=True)
class Grid1D:
    length: float
    n_points: int

    def __post_init__(self):
        if self.n_points < 8 or self.n_points % 2:
            raise ConfigError(f"grid size must be even and >= 8, got {self.n_points}")
        if not self.length > 0:
            raise ConfigError("domain length must be positive")

    @property
    def x(self):
        return np.arange(self.n_points) * (self.length / self.n_points)

    @property
    def dx(self):
        return self.length / self.n_points

    @property
    def wavenumbers(self):
        """Angular wavenumbers for ``rfft`` coefficients."""
        return 2.0 * np.pi * np.fft.rfftfreq(self.n_points, d=self.dx)

    def refined(self, factor=2):
        return Grid1D(self.length, self.n_points * factor)


@dataclass(frozen=True)
class InitialConditionSpec:
    family: str
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown initial-condition family {self.family!r}")
        merged = {**DEFAULT_BOUNDS[self.family], **self.bounds}
        for key, val in merged.items():
            if not np.all(np.isfinite(val)):
                raise ConfigError(f"bound {key} is not finite")
        object.__setattr__(self, "bounds", merged)

    @property
    def domain_length(self):
        return FAMILY_DOMAIN[self.family]

    def to_dict(self):
        return {"family": self.family,
                "bounds": {k: list(v) if isinstance(v, tuple) else v for k, v in self.bounds.items()}}

    @classmethod
    def from_dict(cls, d):
        bounds = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("bounds", {}).items()}
        return cls(d["family"], bounds)


def draw_ic_params(spec, rng):
    """Draw the random coefficients of one initial condition."""
    b = spec.bounds
    if spec.family == "fourier_a":
        return np.concatenate([rng.uniform(*b["coef"], size=8), [rng.uniform(*b["const"])]])
    if spec.family == "fourier_b":
        return rng.uniform(*b["coef"], size=6)
    w = rng.uniform(*b["w"], size=2)
    mu = np.array([rng.uniform(*b["mu1"]), rng.uniform(*b["mu2"])])
    sigma = rng.uniform(*b["sigma"], size=2)
    return np.concatenate([w, mu, sigma])


def _gauss_pdf(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))


def eval_ic(spec, params, x):
    """Evaluate an initial condition with coefficients ``params`` at points ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if spec.family in ("fourier_a", "fourier_b"):
        modes = _FOURIER_A_MODES if spec.family == "fourier_a" else _FOURIER_B_MODES
        u = np.zeros_like(x)
        for w, (kind, mult) in zip(params, modes):
            u += w * (np.sin if kind == "sin" else np.cos)(mult * np.pi * x)
        if spec.family == "fourier_a":
            return u + params[8]
        return spec.bounds["scale"] * u
    L = spec.domain_length
    w, mu, sigma = params[0:2], params[2:4], params[4:6]
    u = np.zeros_like(x)
    for shift in range(-N_IMAGES, N_IMAGES + 1):
        xs = x + shift * L
        for j in range(2):
            u += w[j] * _gauss_pdf(xs, mu[j], sigma[j])
    return u


def sample_ic(spec, grid, rng):
    if not np.isclose(grid.length, spec.domain_length):
        raise ConfigError(f"{spec.family} lives on length {spec.domain_length}, grid has {grid.length}")
    return eval_ic(spec, draw_ic_params(spec, rng), grid.x)
