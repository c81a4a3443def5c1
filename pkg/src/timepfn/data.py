"""Corpus persistence, sliding windows, noise augmentation and batching.

Corpus file layout (little-endian throughout)::

    magic        4 bytes  b"LMCS"
    version      u32
    series_count u32
    channels     u32
    length       u32
    then per series:
        mode     u8       0 = correlated, 1 = independent
        latents  u16
        values   f32[length * channels]   time-major (row t holds all channels)
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import CorpusFormatError, ShapeMismatch, WindowTooLong
from .lmc import CORRELATED, INDEPENDENT, SeriesBlock

MAGIC = b"LMCS"
VERSION = 1
HEADER = struct.Struct("<4sIIII")


def _record_dtype(length: int, channels: int) -> np.dtype:
    return np.dtype([("mode", "u1"), ("latents", "<u2"), ("values", "<f4", (length, channels))])


@dataclass
class CorpusSummary:
    path: str
    series_count: int
    channels: int
    length: int
    n_correlated: int
    n_independent: int
    nbytes: int
    sha256: str


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_corpus(blocks: Iterable[SeriesBlock], path, channels: int | None = None,
                 length: int | None = None) -> CorpusSummary:
    """Stream ``blocks`` to ``path``.

    The series count is patched into the header once the stream ends. All
    blocks must share one ``(length, channels)`` shape; an empty stream
    writes a valid file with ``series_count = 0``.
    """
    path = Path(path)
    count = n_indep = 0
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, 0, channels or 0, length or 0))
        for block in blocks:
            values = np.asarray(block.values)
            if values.ndim != 2:
                raise ShapeMismatch(f"series values must be 2-D (T, N), got {values.shape}")
            if length is None:
                length, channels = values.shape
            if values.shape != (length, channels):
                raise ShapeMismatch(
                    f"series {count} has shape {values.shape}, corpus is {(length, channels)}"
                )
            if not 0 <= block.num_latents <= 0xFFFF:
                raise ValueError(f"latent count {block.num_latents} does not fit in u16")
            fh.write(struct.pack("<BH", int(block.mode), int(block.num_latents)))
            fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
            count += 1
            n_indep += int(block.mode == INDEPENDENT)
        fh.seek(0)
        fh.write(HEADER.pack(MAGIC, VERSION, count, channels or 0, length or 0))
    return CorpusSummary(
        path=str(path),
        series_count=count,
        channels=channels or 0,
        length=length or 0,
        n_correlated=count - n_indep,
        n_independent=n_indep,
        nbytes=path.stat().st_size,
        sha256=file_sha256(path),
    )


@dataclass
class CorpusHeader:
    version: int
    series_count: int
    channels: int
    length: int


def read_header(path) -> CorpusHeader:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise CorpusFormatError(f"{path}: file shorter than the corpus header")
    magic, version, count, channels, length = HEADER.unpack(raw)
    if magic != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CorpusFormatError(f"{path}: unsupported corpus version {version}")
    return CorpusHeader(version, count, channels, length)


class Corpus:
    """Read-only, memory-mapped view of a corpus file."""

    def __init__(self, path):
        self.path = str(path)
        self.header = read_header(path)
        h = self.header
        dtype = _record_dtype(h.length, h.channels)
        expected = HEADER.size + h.series_count * dtype.itemsize
        actual = os.path.getsize(path)
        if actual != expected:
            raise CorpusFormatError(
                f"{path}: header declares {h.series_count} series of {h.length}x{h.channels} "
                f"({expected} bytes) but file has {actual} bytes"
            )
        if h.series_count:
            self._records = np.memmap(path, dtype=dtype, mode="r", offset=HEADER.size,
                                      shape=(h.series_count,))
        else:
            self._records = np.zeros(0, dtype=dtype)

    def __len__(self):
        return self.header.series_count

    @property
    def modes(self) -> np.ndarray:
        return np.asarray(self._records["mode"])

    @property
    def num_latents(self) -> np.ndarray:
        return np.asarray(self._records["latents"])

    def values(self, index: int) -> np.ndarray:
        return np.asarray(self._records["values"][index])

    def block(self, index: int) -> SeriesBlock:
        return SeriesBlock(
            values=self.values(index),
            mode=int(self._records["mode"][index]),
            num_latents=int(self._records["latents"][index]),
        )

    def __iter__(self) -> Iterator[SeriesBlock]:
        for i in range(len(self)):
            yield self.block(i)


def read_corpus(path) -> Corpus:
    return Corpus(path)


@dataclass
class WindowSample:
    context: np.ndarray
    target: np.ndarray
    source: tuple[int, int]


def window_offsets(T: int, context_len: int, horizon: int, stride: int) -> range:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if context_len < 1 or horizon < 1:
        raise ValueError("context_len and horizon must be >= 1")
    span = context_len + horizon
    if span > T:
        raise WindowTooLong(f"context {context_len} + horizon {horizon} exceeds series length {T}")
    return range(0, T - span + 1, stride)


def extract_windows(series, context_len: int = 96, horizon: int = 96, stride: int = 1,
                    series_index: int = 0) -> list[WindowSample]:
    values = np.asarray(getattr(series, "values", series))
    if values.ndim == 1:
        values = values[:, None]
    out = []
    for off in window_offsets(values.shape[0], context_len, horizon, stride):
        mid = off + context_len
        out.append(WindowSample(values[off:mid], values[mid:mid + horizon], (series_index, off)))
    return out


def multiplicative_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``x * g`` with ``g ~ Normal(1, sigma**2)`` drawn per entry."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x.copy()
    return x * rng.normal(1.0, sigma, size=x.shape).astype(x.dtype, copy=False)


def augment_multiplicative_noise(sample: WindowSample, sigma: float,
                                 rng: np.random.Generator) -> WindowSample:
    return WindowSample(
        multiplicative_noise(sample.context, sigma, rng),
        multiplicative_noise(sample.target, sigma, rng),
        sample.source,
    )


@dataclass
class WindowBatch:
    context: np.ndarray  # (B, context_len, N)
    target: np.ndarray  # (B, horizon, N)
    sources: list[tuple[int, int]]

    def __len__(self):
        return len(self.sources)


def _as_series_list(corpus) -> tuple[list, np.ndarray]:
    if isinstance(corpus, Corpus):
        return [corpus.values(i) for i in range(len(corpus))], corpus.modes
    blocks = list(corpus)
    return [np.asarray(b.values) for b in blocks], np.array([b.mode for b in blocks], dtype=np.uint8)


def window_index(corpus, context_len: int = 96, horizon: int = 96,
                 stride: int = 8) -> tuple[list, np.ndarray, np.ndarray]:
    """All ``(series, offset)`` window coordinates with each window's mode."""
    values, modes = _as_series_list(corpus)
    coords, coord_modes = [], []
    for i, v in enumerate(values):
        offs = window_offsets(v.shape[0], context_len, horizon, stride)
        coords.extend((i, o) for o in offs)
        coord_modes.extend([modes[i]] * len(offs))
    return values, np.array(coords, dtype=np.int64).reshape(-1, 2), np.array(coord_modes)


def batch_iterator(corpus, curriculum: bool, batch_size: int, rng: np.random.Generator,
                   context_len: int = 96, horizon: int = 96, stride: int = 8,
                   dtype=np.float32) -> Iterator[WindowBatch]:
    """One epoch of window batches.

    With ``curriculum`` every window of an independent-mode series comes
    before any correlated window; each phase is shuffled on its own and no
    batch spans both phases. Without it the whole window set is shuffled.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    values, coords, modes = window_index(corpus, context_len, horizon, stride)
    if curriculum:
        phases = [np.flatnonzero(modes == INDEPENDENT), np.flatnonzero(modes != INDEPENDENT)]
        phases = [rng.permutation(p) for p in phases]
    else:
        phases = [rng.permutation(len(coords))]
    span = context_len + horizon
    for order in phases:
        for start in range(0, len(order), batch_size):
            picks = coords[order[start:start + batch_size]]
            windows = np.stack([values[s][o:o + span] for s, o in picks]).astype(dtype, copy=False)
            yield WindowBatch(
                context=windows[:, :context_len],
                target=windows[:, context_len:],
                sources=[(int(s), int(o)) for s, o in picks],
            )


__all__ = [
    "CORRELATED", "INDEPENDENT", "Corpus", "CorpusSummary", "WindowBatch", "WindowSample",
    "augment_multiplicative_noise", "batch_iterator", "extract_windows", "multiplicative_noise",
    "read_corpus", "read_header", "window_offsets", "write_corpus",
]
