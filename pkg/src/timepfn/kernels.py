"""Base covariance kernels and random kernel composition.

A kernel expression is a small tree whose leaves are :class:`BaseKernel`
instances and whose inner nodes are :class:`Add` or :class:`Mul`. Sums and
products of positive semidefinite kernels are positive semidefinite, so any
sampled expression yields a valid GP covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import NonFiniteParameter

LINEAR = "Linear"
PERIODIC = "Periodic"
SQUARED_EXPONENTIAL = "SquaredExponential"
RATIONAL_QUADRATIC = "RationalQuadratic"
CONSTANT = "Constant"
WHITE_NOISE = "WhiteNoise"

KINDS = (LINEAR, PERIODIC, SQUARED_EXPONENTIAL, RATIONAL_QUADRATIC, CONSTANT, WHITE_NOISE)

# name -> parameter names that must be strictly positive / nonnegative
_REQUIRED = {
    LINEAR: {"variance": "nonneg", "offset": "any"},
    PERIODIC: {"variance": "nonneg", "period": "pos", "lengthscale": "pos"},
    SQUARED_EXPONENTIAL: {"variance": "nonneg", "lengthscale": "pos"},
    RATIONAL_QUADRATIC: {"variance": "nonneg", "lengthscale": "pos", "alpha": "pos"},
    CONSTANT: {"variance": "nonneg"},
    WHITE_NOISE: {"variance": "nonneg"},
}


@dataclass(frozen=True)
class BaseKernel:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _REQUIRED:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        spec = _REQUIRED[self.kind]
        missing = set(spec) - set(self.params)
        if missing:
            raise ValueError(f"{self.kind} kernel missing parameters {sorted(missing)}")
        for name, rule in spec.items():
            value = float(self.params[name])
            if not math.isfinite(value):
                raise NonFiniteParameter(f"{self.kind}.{name} = {value} is not finite")
            if rule == "pos" and value <= 0:
                raise ValueError(f"{self.kind}.{name} must be > 0, got {value}")
            if rule == "nonneg" and value < 0:
                raise ValueError(f"{self.kind}.{name} must be >= 0, got {value}")

    def cross(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        p = self.params
        var = float(p["variance"])
        if self.kind == LINEAR:
            c = float(p["offset"])
            return var * np.multiply.outer(a - c, b - c)
        if self.kind == CONSTANT:
            return np.full((a.size, b.size), var)
        if self.kind == WHITE_NOISE:
            return var * (a[:, None] == b[None, :]).astype(float)
        d = np.abs(a[:, None] - b[None, :])
        ell = float(p["lengthscale"])
        if self.kind == SQUARED_EXPONENTIAL:
            return var * np.exp(-0.5 * (d / ell) ** 2)
        if self.kind == RATIONAL_QUADRATIC:
            alpha = float(p["alpha"])
            return var * (1.0 + d**2 / (2.0 * alpha * ell**2)) ** (-alpha)
        s = np.sin(np.pi * d / float(p["period"]))
        return var * np.exp(-2.0 * s**2 / ell**2)

    def __repr__(self):
        args = ", ".join(f"{k}={v:.4g}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({args})"


@dataclass(frozen=True)
class Add:
    left: "KernelExpr"
    right: "KernelExpr"

    def cross(self, a, b):
        return self.left.cross(a, b) + self.right.cross(a, b)

    def __repr__(self):
        return f"({self.left!r} + {self.right!r})"


@dataclass(frozen=True)
class Mul:
    left: "KernelExpr"
    right: "KernelExpr"

    def cross(self, a, b):
        return self.left.cross(a, b) * self.right.cross(a, b)

    def __repr__(self):
        return f"({self.left!r} * {self.right!r})"


KernelExpr = Union[BaseKernel, Add, Mul]


# Convenience constructors


def linear(variance=1.0, offset=0.0):
    return BaseKernel(LINEAR, {"variance": variance, "offset": offset})


def periodic(period, lengthscale=1.0, variance=1.0):
    return BaseKernel(PERIODIC, {"variance": variance, "period": period, "lengthscale": lengthscale})


def squared_exponential(lengthscale, variance=1.0):
    return BaseKernel(SQUARED_EXPONENTIAL, {"variance": variance, "lengthscale": lengthscale})


def rational_quadratic(lengthscale, alpha, variance=1.0):
    return BaseKernel(
        RATIONAL_QUADRATIC, {"variance": variance, "lengthscale": lengthscale, "alpha": alpha}
    )


def constant(value):
    return BaseKernel(CONSTANT, {"variance": value})


def white_noise(variance):
    return BaseKernel(WHITE_NOISE, {"variance": variance})


def leaves(expr: KernelExpr) -> list[BaseKernel]:
    if isinstance(expr, BaseKernel):
        return [expr]
    return leaves(expr.left) + leaves(expr.right)


def depth(expr: KernelExpr) -> int:
    if isinstance(expr, BaseKernel):
        return 1
    return 1 + max(depth(expr.left), depth(expr.right))


def evaluate_kernel(expr: KernelExpr, grid) -> np.ndarray:
    """Gram matrix ``K[a, b] = k(grid[a], grid[b])``.

    Only the upper triangle is taken from the evaluation; the lower triangle
    is its mirror, so the result is exactly symmetric.

    Raises
    ------
    NonFiniteParameter
        If the grid or any resulting entry is non-finite.
    """
    t = np.asarray(grid, dtype=np.float64).ravel()
    if t.size < 1:
        raise ValueError("grid must contain at least one point")
    if not np.all(np.isfinite(t)):
        raise NonFiniteParameter("grid contains non-finite values")
    with np.errstate(over="ignore", invalid="ignore"):
        full = expr.cross(t, t)
    upper = np.triu(full)
    K = upper + np.triu(full, 1).T
    if not np.all(np.isfinite(K)):
        raise NonFiniteParameter(f"kernel {expr!r} produced non-finite covariance entries")
    return K


def unit_grid(length: int) -> np.ndarray:
    """Integer indices ``0..length-1`` rescaled onto ``[0, 1]``."""
    if length == 1:
        return np.zeros(1)
    return np.arange(length, dtype=np.float64) / (length - 1)


@dataclass
class KernelBankConfig:
    """Sampling ranges for the kernel bank.

    Periods are in index units and are rescaled onto the unit grid of the
    series being generated. Lengthscales are already on the unit grid, so
    ``0.1`` means a tenth of the series.
    """

    kinds: tuple[str, ...] = KINDS
    periods: tuple[float, ...] = (4, 7, 12, 24, 30, 52, 96)
    periodic_lengthscale_min: float = 0.5
    periodic_lengthscale_max: float = 2.0
    se_lengthscale_min: float = 0.1
    se_lengthscale_max: float = 1.0
    rq_lengthscale_min: float = 0.1
    rq_lengthscale_max: float = 1.0
    rq_alpha_min: float = 0.1
    rq_alpha_max: float = 10.0
    linear_offset_min: float = 0.0
    linear_offset_max: float = 1.0
    constant_min: float = 0.1
    constant_max: float = 1.0
    white_min: float = 1e-4
    white_max: float = 1e-2

    def __post_init__(self):
        unknown = set(self.kinds) - set(KINDS)
        if unknown or not self.kinds:
            raise ValueError(f"invalid kernel kinds {sorted(unknown) or '(empty)'}")
        if any(p <= 0 for p in self.periods) or not self.periods:
            raise ValueError("periods must be a nonempty list of positive values")
        if self.white_max > 0.01:
            raise ValueError("white-noise variance is capped at 0.01")


def _log_uniform(rng, lo, hi):
    if lo == hi:
        return float(lo)
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def sample_base_kernel(rng: np.random.Generator, grid_length: int,
                       bank: KernelBankConfig | None = None) -> BaseKernel:
    bank = bank or KernelBankConfig()
    kind = bank.kinds[int(rng.integers(len(bank.kinds)))]
    step = 1.0 / max(grid_length - 1, 1)
    if kind == LINEAR:
        return linear(1.0, float(rng.uniform(bank.linear_offset_min, bank.linear_offset_max)))
    if kind == PERIODIC:
        period = float(bank.periods[int(rng.integers(len(bank.periods)))]) * step
        ell = _log_uniform(rng, bank.periodic_lengthscale_min, bank.periodic_lengthscale_max)
        return periodic(period, ell)
    if kind == SQUARED_EXPONENTIAL:
        return squared_exponential(_log_uniform(rng, bank.se_lengthscale_min, bank.se_lengthscale_max))
    if kind == RATIONAL_QUADRATIC:
        ell = _log_uniform(rng, bank.rq_lengthscale_min, bank.rq_lengthscale_max)
        return rational_quadratic(ell, _log_uniform(rng, bank.rq_alpha_min, bank.rq_alpha_max))
    if kind == CONSTANT:
        return constant(float(rng.uniform(bank.constant_min, bank.constant_max)))
    return white_noise(min(_log_uniform(rng, bank.white_min, bank.white_max), 0.01))


def sample_kernel_expr(rng: np.random.Generator, J: int, grid_length: int,
                       bank: KernelBankConfig | None = None) -> KernelExpr:
    """Draw a random composition of between 1 and ``J`` base kernels.

    The kernels are folded left to right, each join being ``+`` or ``*`` with
    equal probability.
    """
    if J < 1:
        raise ValueError(f"J must be >= 1, got {J}")
    count = int(rng.integers(1, J + 1))
    parts = [sample_base_kernel(rng, grid_length, bank) for _ in range(count)]
    expr = parts[0]
    for part in parts[1:]:
        expr = Add(expr, part) if rng.integers(2) == 0 else Mul(expr, part)
    return expr
