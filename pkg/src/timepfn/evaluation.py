"""Baselines, error metrics, benchmark CSV loading and evaluation protocols.

A *forecaster* here is any callable mapping a batch of contexts
``(B, L, N)`` to forecasts ``(B, H, N)`` on the original scale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import window_offsets
from .errors import ContextTooShort, NonNumericCell, ParseError
from .lmc import SeriesBlock
from .model import TimePFN, forecast_split

Forecaster = Callable[[np.ndarray], np.ndarray]

BASELINES = ("naive", "seasonal_naive", "mean")
UNIVARIATE_HORIZONS = (6, 8, 14, 18, 24, 36, 48)


def baseline_forecast(kind: str, context, horizon: int = 96, period: int = 7) -> np.ndarray:
    """Classical per-variate baselines for a ``(L, N)`` or ``(B, L, N)`` context.

    ``naive`` repeats the last observation, ``mean`` the context mean, and
    ``seasonal_naive`` repeats the final ``period`` observations cyclically.
    """
    x = np.asarray(context, dtype=np.float64)
    L = x.shape[-2]
    reps = x.shape[:-2] + (horizon, x.shape[-1])
    if kind == "naive":
        return np.broadcast_to(x[..., -1:, :], reps).copy()
    if kind == "mean":
        return np.broadcast_to(x.mean(axis=-2, keepdims=True), reps).copy()
    if kind == "seasonal_naive":
        if period < 1 or L < period:
            raise ContextTooShort(f"seasonal naive needs a context of at least {period}, got {L}")
        idx = L - period + np.arange(horizon) % period
        return x[..., idx, :]
    raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")


def baseline_forecaster(kind: str, horizon: int = 96, period: int = 7) -> Forecaster:
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    return lambda ctx: baseline_forecast(kind, ctx, horizon, period)


def model_forecaster(model: TimePFN, batch_size: int = 64) -> Forecaster:
    return lambda ctx: forecast_split(ctx, model, batch_size=batch_size)


@dataclass
class MetricsReport:
    mse: float
    mae: float
    per_variate_mse: list[float] = field(default_factory=list)
    per_variate_mae: list[float] = field(default_factory=list)
    n_windows: int = 0

    def record(self, **extra) -> dict:
        out = dict(extra)
        out.update(mse=self.mse, mae=self.mae, n_windows=self.n_windows)
        return out


class _ErrorAccumulator:
    """Per-variate error sums combined exactly with :func:`math.fsum`."""

    def __init__(self):
        self.se: list[np.ndarray] = []
        self.ae: list[np.ndarray] = []
        self.count = 0
        self.windows = 0

    def add(self, forecast: np.ndarray, truth: np.ndarray):
        err = np.asarray(forecast, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
        flat = err.reshape(-1, err.shape[-1])
        self.se.append(np.sum(flat * flat, axis=0))
        self.ae.append(np.sum(np.abs(flat), axis=0))
        self.count += flat.shape[0]
        self.windows += err.shape[0] if err.ndim == 3 else 1

    def report(self) -> MetricsReport:
        if not self.count:
            raise ValueError("no errors accumulated")
        se = np.stack(self.se)
        ae = np.stack(self.ae)
        n_var = se.shape[1]
        per_se = [math.fsum(se[:, j]) for j in range(n_var)]
        per_ae = [math.fsum(ae[:, j]) for j in range(n_var)]
        total = self.count * n_var
        return MetricsReport(
            mse=math.fsum(per_se) / total,
            mae=math.fsum(per_ae) / total,
            per_variate_mse=[s / self.count for s in per_se],
            per_variate_mae=[a / self.count for a in per_ae],
            n_windows=self.windows,
        )


def compute_metrics(forecast, truth) -> MetricsReport:
    forecast = np.asarray(forecast, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if forecast.shape != truth.shape:
        raise ValueError(f"forecast {forecast.shape} and truth {truth.shape} differ in shape")
    acc = _ErrorAccumulator()
    acc.add(forecast if forecast.ndim == 3 else forecast[None],
            truth if truth.ndim == 3 else truth[None])
    return acc.report()


def sliding_windows(values: np.ndarray, context_len: int, horizon: int, stride: int = 1):
    """Stacked ``(W, L, N)`` contexts and ``(W, H, N)`` targets."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    offs = np.array(window_offsets(values.shape[0], context_len, horizon, stride))
    span = context_len + horizon
    idx = offs[:, None] + np.arange(span)[None, :]
    windows = values[idx]
    return windows[:, :context_len], windows[:, context_len:]


def evaluate(forecaster: Forecaster, series, context_len: int = 96, horizon: int = 96,
             stride: int = 1, batch_size: int = 256) -> MetricsReport:
    """MSE/MAE over every stride-``stride`` window of ``series`` ``(T, N)``."""
    values = np.asarray(getattr(series, "values", series), dtype=np.float64)
    contexts, targets = sliding_windows(values, context_len, horizon, stride)
    acc = _ErrorAccumulator()
    for start in range(0, len(contexts), batch_size):
        ctx = contexts[start:start + batch_size]
        pred = np.asarray(forecaster(ctx))
        acc.add(pred[:, :horizon], targets[start:start + batch_size])
    return acc.report()


def evaluate_many(forecaster: Forecaster, series_list: Sequence, context_len: int = 96,
                  horizon: int = 96, stride: int = 1, batch_size: int = 256) -> MetricsReport:
    """Pool the errors of several series into one report."""
    acc = _ErrorAccumulator()
    for series in series_list:
        values = np.asarray(getattr(series, "values", series), dtype=np.float64)
        contexts, targets = sliding_windows(values, context_len, horizon, stride)
        for start in range(0, len(contexts), batch_size):
            pred = np.asarray(forecaster(contexts[start:start + batch_size]))
            acc.add(pred[:, :horizon], targets[start:start + batch_size])
    return acc.report()


# -- benchmark CSV ----------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values) * self.std + self.mean


@dataclass
class BenchmarkSplits:
    train: SeriesBlock
    val: SeriesBlock
    test: SeriesBlock
    columns: list[str]
    scaler: Standardizer | None = None

    @property
    def bounds(self) -> tuple[int, int, int]:
        return self.train.length, self.val.length, self.test.length


def read_numeric_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a CSV whose first column is a timestamp and the rest numeric."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", row=1) from None
        if len(header) < 2:
            raise ParseError(f"{path}: need a timestamp column and at least one variate", row=1)
        columns = [c.strip() for c in header[1:]]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}",
                    row=lineno,
                )
            values = []
            for col, cell in enumerate(row[1:], start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise NonNumericCell(
                        f"{path}:{lineno}: non-numeric value {cell!r} in column "
                        f"{col + 1} ({header[col].strip()!r})",
                        row=lineno, column=col + 1,
                    ) from None
                values.append(v)
            rows.append(values)
    if not rows:
        raise ParseError(f"{path}: no data rows", row=2)
    return columns, np.array(rows, dtype=np.float64)


def split_bounds(n: int, split) -> tuple[int, int, int]:
    """Row counts for (train, val, test).

    ``split`` is either three fractions (test and train are floored and the
    remainder goes to validation) or three explicit integer counts.
    """
    split = tuple(split)
    if len(split) != 3:
        raise ValueError(f"split needs three entries, got {split}")
    if all(isinstance(s, (int, np.integer)) and not isinstance(s, bool) for s in split):
        if sum(split) > n or min(split) < 0:
            raise ValueError(f"split counts {split} exceed the {n} available rows")
        return tuple(int(s) for s in split)
    fr = [float(s) for s in split]
    if min(fr) < 0 or sum(fr) > 1.0 + 1e-9:
        raise ValueError(f"split fractions {split} must be nonnegative and sum to <= 1")
    n_train = int(n * fr[0])
    n_test = int(n * fr[2])
    if abs(sum(fr) - 1.0) <= 1e-9:
        n_val = n - n_train - n_test
    else:
        n_val = int(n * fr[1])
    return n_train, n_val, n_test


def load_benchmark_csv(path, split=(0.7, 0.1, 0.2), standardize: bool = False) -> BenchmarkSplits:
    """Chronological train/val/test split of a benchmark CSV.

    With ``standardize`` all splits are scaled with statistics of the
    training split alone.
    """
    columns, values = read_numeric_csv(path)
    n_train, n_val, n_test = split_bounds(len(values), split)
    scaler = None
    if standardize:
        if n_train == 0:
            raise ValueError("cannot standardize with an empty training split")
        scaler = Standardizer.fit(values[:n_train])
        values = scaler.transform(values)
    parts = (values[:n_train], values[n_train:n_train + n_val],
             values[n_train + n_val:n_train + n_val + n_test])
    train, val, test = (SeriesBlock(values=p.copy(), num_latents=0) for p in parts)
    return BenchmarkSplits(train, val, test, columns, scaler)


# -- univariate protocol ----------------------------------------------------


def pad_context(observed, pad_to: int = 96) -> np.ndarray:
    """Left-pad a short context with its own mean up to ``pad_to`` steps."""
    obs = np.asarray(observed, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[:, None]
    n = obs.shape[0]
    if n > pad_to:
        raise ValueError(f"observed length {n} exceeds pad_to {pad_to}")
    fill = np.broadcast_to(obs.mean(axis=0, keepdims=True), (pad_to - n, obs.shape[1]))
    return np.concatenate([fill, obs], axis=0)


@dataclass
class UnivariateReport:
    per_horizon: dict[int, MetricsReport]
    mse: float
    mae: float


def univariate_protocol(forecaster: Forecaster, series, context_observed: int = 36,
                        pad_to: int = 96, horizons: Sequence[int] = UNIVARIATE_HORIZONS,
                        stride: int = 1, batch_size: int = 256) -> UnivariateReport:
    """Short-context univariate evaluation.

    Each window observes ``context_observed`` values, is mean-padded to
    ``pad_to``, forecast once, and scored on the first ``h`` steps for every
    ``h`` in ``horizons``.
    """
    values = np.asarray(getattr(series, "values", series), dtype=np.float64).reshape(-1)
    longest = max(horizons)
    obs, targets = sliding_windows(values, context_observed, longest, stride)
    accs = {h: _ErrorAccumulator() for h in horizons}
    for start in range(0, len(obs), batch_size):
        chunk = obs[start:start + batch_size]
        ctx = np.stack([pad_context(o, pad_to) for o in chunk])
        pred = np.asarray(forecaster(ctx))
        for h in horizons:
            accs[h].add(pred[:, :h], targets[start:start + batch_size, :h])
    per = {h: a.report() for h, a in accs.items()}
    return UnivariateReport(
        per_horizon=per,
        mse=float(np.mean([r.mse for r in per.values()])),
        mae=float(np.mean([r.mae for r in per.values()])),
    )


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    cells = [[_fmt(r.get(k)) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    lines = ["  ".join(k.ljust(w) for k, w in zip(keys, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_records(path, records: Sequence[dict]):
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


__all__ = [
    "BASELINES", "BenchmarkSplits", "MetricsReport", "UnivariateReport", "baseline_forecast",
    "baseline_forecaster", "compute_metrics", "evaluate", "evaluate_many", "load_benchmark_csv",
    "model_forecaster", "pad_context", "read_numeric_csv", "sliding_windows", "split_bounds",
    "univariate_protocol",
]
