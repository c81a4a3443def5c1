"""Pretraining on a synthetic corpus and few-shot fine-tuning.

Both loops minimize the MSE between the forecast and the target in the
context-normalized space: the target is scaled with the context's own
per-variate mean and standard deviation.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .data import batch_iterator, multiplicative_noise, window_index
from .errors import DivergedLoss, EmptyBudget, ShapeMismatch
from .lmc import INDEPENDENT
from .model import TimePFN, channel_segments, normalize, save_checkpoint
from .optim import Adam, TrainConfig, clip_grad_norm, one_cycle_lr

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    state: "OrderedDict[str, np.ndarray]"
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    steps: int = 0


def normalized_pair(context: np.ndarray, target: np.ndarray, eps_std: float):
    xn, state = normalize(context, eps_std)
    return xn, (target - state.mean) / state.std


def _fit(model: TimePFN, epoch_batches: Callable[[np.random.Generator], Iterator],
         steps_per_epoch: int, cfg: TrainConfig, rng: np.random.Generator,
         callback=None, checkpoint_path=None) -> TrainResult:
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    result = TrainResult(state=model.state_dict())
    if total == 0:
        return result
    opt = Adam.from_config(model.parameters(), cfg)
    params = model.parameters()
    step = 0
    for epoch in range(cfg.epochs):
        for context, target in epoch_batches(rng):
            if step >= total:
                break
            xn, tn = normalized_pair(context, target, model.cfg.eps_std)
            opt.zero_grad()
            pred = model.forward_normalized(xn.astype(model.dtype), training=True, rng=rng)
            loss = ad.mse_loss(pred, tn.astype(model.dtype))
            value = float(loss.data)
            if not math.isfinite(value):
                last_good = model.state_dict()
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
                raise DivergedLoss(f"loss became {value} at step {step}", last_good, step)
            loss.backward()
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            lr = one_cycle_lr(step, total, cfg)
            opt.step(lr)
            result.losses.append(value)
            result.lrs.append(lr)
            step += 1
            if callback is not None:
                callback(step, value, lr)
        if step >= total:
            break
    result.steps = step
    result.state = model.state_dict()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return result


def train(model: TimePFN, corpus, cfg: TrainConfig, callback=None,
          checkpoint_path=None) -> TrainResult:
    """Pretrain ``model`` in place on a corpus of series blocks.

    Each batch gets multiplicative noise, is normalized per window, and
    takes one optimizer step under the one-cycle schedule. Runs are
    reproducible from ``cfg.seed``.

    Raises
    ------
    DivergedLoss
        If a batch loss is non-finite; carries the last good parameters.
    """
    mc = model.cfg
    _, coords, modes = window_index(corpus, mc.context_len, mc.horizon, cfg.stride)
    channels = (corpus.header.channels if hasattr(corpus, "header")
                else np.asarray(next(iter(corpus)).values).shape[1])
    if channels > mc.train_channels:
        raise ShapeMismatch(
            f"corpus has {channels} channels, model trains on at most {mc.train_channels}"
        )
    B = cfg.batch_size
    if cfg.curriculum:
        n_ind = int(np.sum(modes == INDEPENDENT))
        steps_per_epoch = math.ceil(n_ind / B) + math.ceil((len(coords) - n_ind) / B)
    else:
        steps_per_epoch = math.ceil(len(coords) / B)

    def epoch_batches(rng):
        for batch in batch_iterator(corpus, cfg.curriculum, B, rng, mc.context_len,
                                    mc.horizon, cfg.stride, dtype=np.float64):
            ctx, tgt = batch.context, batch.target
            if cfg.noise_sigma > 0:
                ctx = multiplicative_noise(ctx, cfg.noise_sigma, rng)
                tgt = multiplicative_noise(tgt, cfg.noise_sigma, rng)
            yield ctx, tgt

    rng = np.random.default_rng(cfg.seed)
    return _fit(model, epoch_batches, steps_per_epoch, cfg, rng, callback, checkpoint_path)


def select_budget(contexts: np.ndarray, targets: np.ndarray, budget):
    """The last ``budget`` windows (chronologically nearest the test split).

    ``budget`` is a positive int, or ``None`` / ``"all"`` for every window.
    Budgets above the available count are clamped with a warning.
    """
    W = len(contexts)
    if W == 0:
        raise EmptyBudget("no training windows available for fine-tuning")
    if budget is None or (isinstance(budget, str) and budget.lower() == "all"):
        return contexts, targets
    count = int(budget)
    if count < 1:
        raise EmptyBudget(f"budget must be >= 1, got {count}")
    if count > W:
        log.warning("budget %d exceeds the %d available windows; using all of them", count, W)
        count = W
    return contexts[W - count:], targets[W - count:]


def finetune(model: TimePFN, contexts: np.ndarray, targets: np.ndarray, budget="all",
             cfg: TrainConfig | None = None, callback=None) -> TrainResult:
    """Fine-tune on real ``(W, L, N)`` / ``(W, H, N)`` windows under a data budget.

    Windows wider than the model's channel capacity are cut into channel
    segments; each segment of each window is a separate training sample.
    """
    cfg = cfg or TrainConfig.finetune_defaults()
    ctx, tgt = select_budget(np.asarray(contexts, dtype=np.float64),
                             np.asarray(targets, dtype=np.float64), budget)
    segments = channel_segments(ctx.shape[-1], model.cfg.train_channels)
    B = cfg.batch_size
    per_segment = math.ceil(len(ctx) / B)

    def epoch_batches(rng):
        plan = []
        for s, (a, b) in enumerate(segments):
            order = rng.permutation(len(ctx))
            plan.extend((a, b, order[i:i + B]) for i in range(0, len(ctx), B))
        for k in rng.permutation(len(plan)):
            a, b, idx = plan[k]
            c, t = ctx[idx, :, a:b], tgt[idx, :, a:b]
            if cfg.noise_sigma > 0:
                c = multiplicative_noise(c, cfg.noise_sigma, rng)
                t = multiplicative_noise(t, cfg.noise_sigma, rng)
            yield c, t

    rng = np.random.default_rng(cfg.seed)
    return _fit(model, epoch_batches, per_segment * len(segments), cfg, rng, callback)
