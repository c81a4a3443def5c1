"""The channel-mixing patch transformer forecaster.

Pipeline for a context ``x`` of shape ``(L, N)``:

1. per-variate standardization (reversed on the output);
2. shared 1-D filtering per variate: conv -> magnitude max pool -> conv,
   with the normalized variate appended as an extra row;
3. overlapping patches of every filtered variate, each flattened and
   embedded by a shared two-layer network, plus a 2-D sinusoidal encoding
   over (variate, patch);
4. one transformer encoder over all ``N * K`` tokens jointly;
5. per-variate flatten and a shared two-layer head to ``H`` steps.

Batched inputs carry a leading batch axis throughout.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CorpusFormatError, ShapeMismatch


@dataclass
class ModelConfig:
    context_len: int = 96
    horizon: int = 96
    conv_rows: int = 9
    conv_kernel: int = 3
    pool_window: int = 3
    patch_len: int = 16
    patch_stride: int = 8
    embed_dim: int = 256
    latent_dim: int = 1024
    ffn_dim: int = 512
    num_layers: int = 8
    num_heads: int = 8
    train_channels: int = 160
    ln_eps: float = 1e-5
    eps_std: float = 1e-5
    dropout: float = 0.0
    dtype: str = "float32"
    init_seed: int = 2023

    def __post_init__(self):
        if not 1 <= self.patch_len <= self.context_len:
            raise ValueError(f"patch_len must lie in [1, context_len], got {self.patch_len}")
        if self.patch_stride < 1:
            raise ValueError("patch_stride must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for the 2-D positional encoding")
        if self.conv_kernel < 1 or self.pool_window < 1 or self.conv_rows < 1:
            raise ValueError("conv_kernel, pool_window and conv_rows must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def num_patches(self) -> int:
        return (self.context_len - self.patch_len) // self.patch_stride + 2

    @property
    def patch_pad(self) -> int:
        """Trailing steps of edge padding needed for the last patch."""
        K = self.num_patches
        return (K - 1) * self.patch_stride + self.patch_len - self.context_len

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Small configuration used for gradient checks and desk-scale runs."""
        base = dict(context_len=32, horizon=16, conv_rows=2, patch_len=8, patch_stride=4,
                    embed_dim=16, latent_dim=32, ffn_dim=32, num_layers=2, num_heads=2,
                    train_channels=8, dtype="float64")
        base.update(overrides)
        return cls(**base)


@dataclass
class NormState:
    mean: np.ndarray
    std: np.ndarray


def normalize(x, eps_std: float = 1e-5) -> tuple[np.ndarray, NormState]:
    """Standardize each variate over the time axis (second to last).

    Population standard deviation is used and floored at ``eps_std``; an
    exactly constant variate therefore maps to zeros.
    """
    x = np.asarray(x)
    mean = x.mean(axis=-2, keepdims=True)
    std = np.sqrt(((x - mean) ** 2).mean(axis=-2, keepdims=True))
    std = np.maximum(std, eps_std)
    return (x - mean) / std, NormState(mean, std)


def denormalize(y, state: NormState) -> np.ndarray:
    return np.asarray(y) * state.std + state.mean


def positional_encoding_2d(num_channels: int, num_patches: int, dim: int,
                           channel_positions=None) -> np.ndarray:
    """Sinusoidal encoding over (channel, patch), shape ``(N, K, dim)``.

    The first half of the features encodes the channel index and the second
    half the patch index, each as a ``[sin | cos]`` pair of quarters
    with geometric frequencies ``10000 ** (-4 i / dim)``.
    """
    if dim % 4:
        raise ValueError("dim must be divisible by 4")
    quarter = dim // 4
    freqs = np.exp(-math.log(10000.0) * 4.0 * np.arange(quarter) / dim)
    ch = np.arange(num_channels) if channel_positions is None else np.asarray(channel_positions)
    pa = np.arange(num_patches)
    ch_ang = ch[:, None].astype(np.float64) * freqs[None, :]
    pa_ang = pa[:, None].astype(np.float64) * freqs[None, :]
    pe = np.empty((len(ch), num_patches, dim))
    pe[:, :, :quarter] = np.sin(ch_ang)[:, None, :]
    pe[:, :, quarter:2 * quarter] = np.cos(ch_ang)[:, None, :]
    pe[:, :, 2 * quarter:3 * quarter] = np.sin(pa_ang)[None, :, :]
    pe[:, :, 3 * quarter:] = np.cos(pa_ang)[None, :, :]
    return pe


def _parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    C, k, D = cfg.conv_rows, cfg.conv_kernel, cfg.embed_dim
    patch_in = (C + 1) * cfg.patch_len
    shapes = OrderedDict()
    shapes["conv1.weight"] = (C, 1, k)
    shapes["conv1.bias"] = (C,)
    shapes["conv2.weight"] = (C, C, k)
    shapes["conv2.bias"] = (C,)
    shapes["embed.fc1.weight"] = (patch_in, D)
    shapes["embed.fc1.bias"] = (D,)
    shapes["embed.fc2.weight"] = (D, D)
    shapes["embed.fc2.bias"] = (D,)
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        for name in ("query", "key", "value", "out"):
            shapes[p + f"attn.{name}.weight"] = (D, D)
            shapes[p + f"attn.{name}.bias"] = (D,)
        shapes[p + "norm1.weight"] = (D,)
        shapes[p + "norm1.bias"] = (D,)
        shapes[p + "ffn.fc1.weight"] = (D, cfg.ffn_dim)
        shapes[p + "ffn.fc1.bias"] = (cfg.ffn_dim,)
        shapes[p + "ffn.fc2.weight"] = (cfg.ffn_dim, D)
        shapes[p + "ffn.fc2.bias"] = (D,)
        shapes[p + "norm2.weight"] = (D,)
        shapes[p + "norm2.bias"] = (D,)
    shapes["encoder_norm.weight"] = (D,)
    shapes["encoder_norm.bias"] = (D,)
    shapes["head.fc1.weight"] = (cfg.num_patches * D, cfg.latent_dim)
    shapes["head.fc1.bias"] = (cfg.latent_dim,)
    shapes["head.fc2.weight"] = (cfg.latent_dim, cfg.horizon)
    shapes["head.fc2.bias"] = (cfg.horizon,)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in _parameter_shapes(cfg).values())


def _fan_in(name: str, shape: tuple) -> int:
    if name.startswith("conv"):
        return shape[1] * shape[2]
    return shape[0]


class TimePFN:
    """Parameters plus the forward computation.

    ``params`` maps fixed names to :class:`~timepfn.autodiff.Tensor` leaves.
    Set ``record_attention`` to keep the last forward pass's attention maps
    in ``attention_maps`` (one ``(B, heads, T, T)`` array per layer).
    """

    def __init__(self, cfg: ModelConfig | None = None, params: dict | None = None):
        self.cfg = cfg or ModelConfig()
        self.dtype = np.dtype(self.cfg.dtype)
        shapes = _parameter_shapes(self.cfg)
        if params is None:
            params = self._init_params(shapes)
        elif list(params) != list(shapes) or any(
            tuple(np.shape(params[n])) != s for n, s in shapes.items()
        ):
            raise ShapeMismatch("parameter set does not match the model configuration")
        self.params: OrderedDict[str, Tensor] = OrderedDict(
            (n, Tensor(np.asarray(v, dtype=self.dtype), requires_grad=True, name=n))
            for n, v in params.items()
        )
        self.record_attention = False
        self.attention_maps: list[np.ndarray] = []

    def _init_params(self, shapes):
        rng = np.random.default_rng(self.cfg.init_seed)
        out = OrderedDict()
        for name, shape in shapes.items():
            if name.endswith(".bias"):
                out[name] = np.zeros(shape)
            elif "norm" in name:
                out[name] = np.ones(shape)
            else:
                bound = 1.0 / math.sqrt(_fan_in(name, shape))
                out[name] = rng.uniform(-bound, bound, size=shape)
        return out

    # -- bookkeeping ------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, state):
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ShapeMismatch(f"{n}: checkpoint {state[n].shape} vs model {p.shape}")
            p.data = np.array(state[n], dtype=self.dtype)

    def _p(self, name):
        return self.params[name]

    def _dense(self, x, prefix):
        return ad.linear(x, self._p(prefix + ".weight"), self._p(prefix + ".bias"))

    # -- stages -----------------------------------------------------------
    def conv_filter(self, x_norm) -> Tensor:
        """``(B, L, N)`` normalized input to the ``(B, N, C+1, L)`` filtered stack."""
        x = ad.as_tensor(np.asarray(getattr(x_norm, "data", x_norm), dtype=self.dtype))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.ndim != 3 or x.shape[1] != self.cfg.context_len:
            raise ShapeMismatch(
                f"expected (B, {self.cfg.context_len}, N) input, got {x.shape}"
            )
        B, L, N = x.shape
        rows = ad.transpose(x, (0, 2, 1)).reshape(B * N, 1, L)
        h = ad.conv1d(rows, self._p("conv1.weight"), self._p("conv1.bias"))
        h = ad.magnitude_maxpool1d(h, self.cfg.pool_window, 1)
        h = ad.conv1d(h, self._p("conv2.weight"), self._p("conv2.bias"))
        stack = ad.concat([h, rows], axis=1)
        return stack.reshape(B, N, self.cfg.conv_rows + 1, L)

    def patch_and_embed(self, stack: Tensor, channel_positions=None) -> Tensor:
        """``(B, N, C+1, L)`` stack to ``(B, N, K, D)`` tokens with positions added."""
        cfg = self.cfg
        B, N, R, L = stack.shape
        if R != cfg.conv_rows + 1 or L != cfg.context_len:
            raise ShapeMismatch(f"stack shape {stack.shape} does not match the configuration")
        K, P, S = cfg.num_patches, cfg.patch_len, cfg.patch_stride
        padded = ad.pad_edge(stack, cfg.patch_pad, axis=-1)
        index = (np.arange(K)[:, None] * S + np.arange(P)[None, :])  # (K, P)
        patches = padded[:, :, :, index]  # (B, N, R, K, P)
        patches = ad.transpose(patches, (0, 1, 3, 2, 4)).reshape(B, N, K, R * P)
        h = ad.gelu(self._dense(patches, "embed.fc1"))
        h = self._dense(h, "embed.fc2")
        pe = positional_encoding_2d(N, K, cfg.embed_dim, channel_positions).astype(self.dtype)
        return h + pe

    def _attention(self, x: Tensor, prefix: str, training: bool, rng) -> Tensor:
        B, T, D = x.shape
        heads = self.cfg.num_heads
        dh = D // heads

        def split(t):
            return ad.transpose(t.reshape(B, T, heads, dh), (0, 2, 1, 3))

        q = split(self._dense(x, prefix + ".query"))
        k = split(self._dense(x, prefix + ".key"))
        v = split(self._dense(x, prefix + ".value"))
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        weights = ad.softmax(scores, axis=-1)
        if self.record_attention:
            self.attention_maps.append(weights.data.copy())
        weights = ad.dropout(weights, self.cfg.dropout, rng, training)
        out = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)).reshape(B, T, D)
        return self._dense(out, prefix + ".out")

    def encode(self, tokens: Tensor, training: bool = False, rng=None) -> Tensor:
        """Full bidirectional encoder over ``(B, T, D)`` tokens (post-norm blocks)."""
        eps = self.cfg.ln_eps
        self.attention_maps = []
        x = tokens
        for i in range(self.cfg.num_layers):
            p = f"layers.{i}"
            a = ad.dropout(self._attention(x, p + ".attn", training, rng), self.cfg.dropout, rng, training)
            x = ad.layer_norm(x + a, self._p(p + ".norm1.weight"), self._p(p + ".norm1.bias"), eps)
            f = self._dense(ad.gelu(self._dense(x, p + ".ffn.fc1")), p + ".ffn.fc2")
            f = ad.dropout(f, self.cfg.dropout, rng, training)
            x = ad.layer_norm(x + f, self._p(p + ".norm2.weight"), self._p(p + ".norm2.bias"), eps)
        return ad.layer_norm(x, self._p("encoder_norm.weight"), self._p("encoder_norm.bias"), eps)

    def head(self, encoded: Tensor, N: int) -> Tensor:
        """``(B, N*K, D)`` encoded tokens to a ``(B, H, N)`` normalized forecast."""
        B = encoded.shape[0]
        K, D = self.cfg.num_patches, self.cfg.embed_dim
        flat = encoded.reshape(B, N, K * D)
        h = ad.gelu(self._dense(flat, "head.fc1"))
        out = self._dense(h, "head.fc2")  # (B, N, H)
        return ad.transpose(out, (0, 2, 1))

    def forward_normalized(self, x_norm, channel_positions=None, training: bool = False,
                           rng=None) -> Tensor:
        """Forecast in normalized space: ``(B, L, N)`` -> ``(B, H, N)``."""
        stack = self.conv_filter(x_norm)
        B, N = stack.shape[:2]
        tokens = self.patch_and_embed(stack, channel_positions)
        tokens = tokens.reshape(B, N * self.cfg.num_patches, self.cfg.embed_dim)
        return self.head(self.encode(tokens, training, rng), N)

    def encode_and_forecast(self, tokens: Tensor, norm: NormState) -> np.ndarray:
        """``(B, N, K, D)`` tokens to a de-normalized ``(B, H, N)`` forecast."""
        B, N, K, D = tokens.shape
        with ad.no_grad():
            y = self.head(self.encode(tokens.reshape(B, N * K, D)), N)
        return denormalize(y.data, norm)

    def forecast(self, context, channel_positions=None) -> np.ndarray:
        """Point forecast on the original scale.

        ``context`` is ``(L, N)`` or batched ``(B, L, N)``; the result has
        the matching ``(H, N)`` or ``(B, H, N)`` shape.
        """
        x = np.asarray(context, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != self.cfg.context_len:
            raise ShapeMismatch(
                f"context must be ({self.cfg.context_len}, N), got {np.shape(context)}"
            )
        xn, state = normalize(x, self.cfg.eps_std)
        with ad.no_grad():
            y = self.forward_normalized(xn.astype(self.dtype), channel_positions)
        out = denormalize(y.data.astype(np.float64), state)
        return out[0] if single else out

    def __call__(self, context, channel_positions=None):
        return self.forecast(context, channel_positions)


def channel_segments(channels: int, capacity: int) -> list[tuple[int, int]]:
    """``ceil(channels / capacity)`` contiguous ``[start, stop)`` segments."""
    if channels < 1 or capacity < 1:
        raise ValueError("channels and capacity must be >= 1")
    return [(s, min(s + capacity, channels)) for s in range(0, channels, capacity)]


def forecast_split(context, model: TimePFN, batch_size: int | None = None) -> np.ndarray:
    """Forecast contexts with more channels than the model was trained on.

    Channels are cut into contiguous segments of at most
    ``model.cfg.train_channels``, each forecast on its own, and the outputs
    re-assembled in the original order. Accepts ``(L, N)`` or ``(B, L, N)``.
    """
    x = np.asarray(context, dtype=np.float64)
    out = np.empty(x.shape[:-2] + (model.cfg.horizon, x.shape[-1]))
    for start, stop in channel_segments(x.shape[-1], model.cfg.train_channels):
        seg = x[..., start:stop]
        if batch_size is None or seg.ndim == 2:
            out[..., start:stop] = model.forecast(seg)
        else:
            for b in range(0, seg.shape[0], batch_size):
                out[b:b + batch_size, :, start:stop] = model.forecast(seg[b:b + batch_size])
    return out


# -- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"TPFN"
CKPT_VERSION = 1


def save_checkpoint(model: TimePFN, path) -> None:
    """Write ``model`` to ``path``.

    Layout (little-endian): magic, u32 version, u32 config length, config
    JSON, u32 parameter count, then per parameter u32 name length, name,
    u32 ndim, u32 dims, f32 data; finally a u32 CRC-32 of all prior bytes.
    """
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", p.ndim)]
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path) -> tuple[ModelConfig, "OrderedDict[str, np.ndarray]"]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CorpusFormatError(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorpusFormatError(f"{path}: checksum mismatch")
    try:
        pos = 4
        (version,) = struct.unpack_from("<I", body, pos)
        pos += 4
        if version != CKPT_VERSION:
            raise CorpusFormatError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        cfg = ModelConfig(**json.loads(body[pos:pos + n]))
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        state = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = math.prod(shape)
            state[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise CorpusFormatError(f"{path}: truncated checkpoint") from exc
    if pos != len(body):
        raise CorpusFormatError(f"{path}: {len(body) - pos} trailing bytes")
    return cfg, state


def load_checkpoint(path) -> TimePFN:
    cfg, state = read_checkpoint(path)
    return TimePFN(cfg, params=state)
