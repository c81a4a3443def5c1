"""Correlated multivariate synthetic series via linear coregionalization.

Each correlated series mixes ``L`` independent GP latents into ``N`` channels
with per-channel convex weights drawn from a symmetric Dirichlet. Independent
series use ``L = N`` and copy latent ``i`` into channel ``i``.

Randomness is keyed by path: a series uses the stream
``(global_seed, series_index)`` for its latent count, concentration and
mixing rows, and latent ``j`` uses ``(global_seed, series_index, j + 1)``.
Results therefore do not depend on worker count or completion order.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import FactorizationFailed
from .gp import sample_latent
from .kernels import KernelBankConfig, sample_kernel_expr

log = logging.getLogger(__name__)

CORRELATED = 0
INDEPENDENT = 1

MAX_LATENT_RETRIES = 4
MAX_DIRICHLET_RETRIES = 8


@dataclass
class LmcConfig:
    N: int = 160
    T: int = 1024
    weibull_shape: float = 1.5
    weibull_scale: float = 8.0
    d_min: float = 0.1
    d_max: float = 5.0
    min_latents: int = 1
    max_compositions: int = 5
    independent_mode: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.T < 2:
            raise ValueError(f"T must be >= 2, got {self.T}")
        if self.weibull_shape <= 0 or self.weibull_scale <= 0:
            raise ValueError("Weibull shape and scale must be positive")
        if not 0 < self.d_min <= self.d_max:
            raise ValueError(f"need 0 < d_min <= d_max, got ({self.d_min}, {self.d_max})")
        if self.min_latents < 1 or self.max_compositions < 1:
            raise ValueError("min_latents and max_compositions must be >= 1")
        self.min_latents = min(self.min_latents, self.N)


@dataclass
class SeriesBlock:
    """One multivariate series, ``values`` shaped ``(T, N)``."""

    values: np.ndarray
    mode: int = CORRELATED
    num_latents: int = 0
    mixing_weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    latents: np.ndarray | None = None
    concentration: float | None = None
    seed_path: tuple[int, int] | None = None

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def series_seed(global_seed: int, index: int, *rest: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(global_seed, spawn_key=(index, *rest))


def draw_latent_count(cfg: LmcConfig, rng: np.random.Generator) -> int:
    w = cfg.weibull_scale * rng.weibull(cfg.weibull_shape)
    count = math.floor(w + 0.5)
    return int(max(min(count, cfg.N), cfg.min_latents))


def draw_mixing_row(d: float, L: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric Dirichlet(d) sample of length ``L`` via normalized gammas.

    Tiny concentrations can underflow every gamma draw to zero; after
    :data:`MAX_DIRICHLET_RETRIES` such draws the uniform row is returned.
    """
    if d <= 0 or L < 1:
        raise ValueError(f"need d > 0 and L >= 1, got d={d}, L={L}")
    if L == 1:
        return np.ones(1)
    for _ in range(MAX_DIRICHLET_RETRIES + 1):
        g = rng.gamma(d, 1.0, size=L)
        total = g.sum()
        if total > 0 and np.isfinite(total):
            return g / total
    log.warning("Dirichlet draw degenerate at d=%g; using uniform weights", d)
    return np.full(L, 1.0 / L)


def _draw_latent(cfg, bank, global_seed, index, j):
    rng = np.random.default_rng(series_seed(global_seed, index, j + 1))
    last = None
    for _ in range(MAX_LATENT_RETRIES + 1):
        expr = sample_kernel_expr(rng, cfg.max_compositions, cfg.T, bank)
        try:
            return sample_latent(expr, cfg.T, rng).values
        except FactorizationFailed as exc:
            last = exc
            log.debug("latent %d of series %d failed for %r; redrawing", j, index, expr)
    raise last


def generate_series(cfg: LmcConfig, global_seed: int, index: int = 0,
                    bank: KernelBankConfig | None = None,
                    num_latents: int | None = None) -> SeriesBlock:
    """Generate one series.

    ``num_latents`` forces ``L`` in correlated mode (still clamped to
    ``[min_latents, N]``); otherwise it is drawn from the Weibull rule.
    """
    rng = np.random.default_rng(series_seed(global_seed, index))
    if cfg.independent_mode:
        latents = np.stack([_draw_latent(cfg, bank, global_seed, index, j) for j in range(cfg.N)])
        return SeriesBlock(
            values=latents.T.copy(),
            mode=INDEPENDENT,
            num_latents=cfg.N,
            latents=latents,
            seed_path=(global_seed, index),
        )
    if num_latents is None:
        L = draw_latent_count(cfg, rng)
    else:
        L = int(max(min(num_latents, cfg.N), cfg.min_latents))
    d = float(rng.uniform(cfg.d_min, cfg.d_max))
    latents = np.stack([_draw_latent(cfg, bank, global_seed, index, j) for j in range(L)])
    weights = np.stack([draw_mixing_row(d, L, rng) for _ in range(cfg.N)])
    return SeriesBlock(
        values=(weights @ latents).T.copy(),
        mode=CORRELATED,
        num_latents=L,
        mixing_weights=weights,
        latents=latents,
        concentration=d,
        seed_path=(global_seed, index),
    )


def _corpus_job(args):
    cfg, bank, global_seed, index, independent, keep_latents = args
    if independent != cfg.independent_mode:
        cfg = dataclasses.replace(cfg, independent_mode=independent)
    block = generate_series(cfg, global_seed, index, bank)
    if not keep_latents:
        # latents are not persisted; dropping them keeps worker IPC small
        block.latents = None
    return block


def corpus_plan(count_correlated: int, independent_ratio: float) -> list[bool]:
    """Mode of each series index: correlated first, then independent."""
    if count_correlated < 0:
        raise ValueError("count_correlated must be >= 0")
    if not 0.0 <= independent_ratio <= 1.0:
        raise ValueError(f"independent_ratio must lie in [0, 1], got {independent_ratio}")
    n_independent = math.floor(independent_ratio * count_correlated + 0.5)
    return [False] * count_correlated + [True] * n_independent


def generate_corpus(cfg: LmcConfig, count_correlated: int, independent_ratio: float,
                    global_seed: int, workers: int = 1,
                    bank: KernelBankConfig | None = None,
                    keep_latents: bool = False) -> Iterator[SeriesBlock]:
    """Yield ``count_correlated`` correlated blocks then the independent ones.

    The number of independent blocks is ``round(independent_ratio *
    count_correlated)``. Blocks are yielded in index order whatever the
    worker count.
    """
    plan = corpus_plan(count_correlated, independent_ratio)
    jobs = ((cfg, bank, global_seed, i, indep, keep_latents) for i, indep in enumerate(plan))
    if workers <= 1 or len(plan) <= 1:
        for job in jobs:
            yield _corpus_job(job)
        return
    workers = min(workers, len(plan), (os.cpu_count() or 1) * 8)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_corpus_job, jobs, chunksize=max(1, len(plan) // (workers * 4)))
