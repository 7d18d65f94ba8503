"""Language-model pretraining on the synthetic corpus."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tm
from .checkpoint import write_checkpoint

log = logging.getLogger(__name__)

PAD = 0


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 128
    lr: float = 3e-3
    min_lr_ratio: float = 0.1
    warmup_steps: int = 100
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    seed: int = 2


class Adam:
    """Adam with optional decoupled weight decay; updates parameters in place."""

    def __init__(self, params, lr, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.data.ndim > 1:
                update = update + self.wd * p.data
            p.data -= (lr * update).astype(p.data.dtype)


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= s
    return total


def pad_batch(seqs, pad=PAD):
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), pad, dtype=np.int64)
    lengths = np.array([len(s) for s in seqs])
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def lm_loss(model, seqs):
    """Mean next-token NLL over all real (non-padding) target positions."""
    ids, lengths = pad_batch(seqs)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    weights = (np.arange(targets.shape[1])[None, :] < (lengths - 1)[:, None])
    logits, _ = model.forward(inputs)
    return tm.cross_entropy(logits, targets, weights)


def lr_at(step, total, cfg: TrainConfig):
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    cos = 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))
    return cfg.lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cos)


def length_buckets(token_seqs, batch_size, rng):
    """Batches of equal-length sequences, in a seeded random order."""
    by_len = {}
    for i, s in enumerate(token_seqs):
        by_len.setdefault(len(s), []).append(i)
    batches = []
    for n in sorted(by_len):
        idx = rng.permutation(by_len[n])
        batches.extend(idx[k:k + batch_size] for k in range(0, len(idx), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def pretrain(model, token_seqs, cfg: TrainConfig, run_dir=None, on_step=None):
    """Train in place; returns the per-step loss list.

    Each epoch draws seeded equal-length batches.  Checkpoints (when
    ``run_dir`` is given) are written at step 0, every
    ``checkpoint_every`` steps and after the final step.
    """
    rng = np.random.default_rng(cfg.seed)
    epochs = [length_buckets(token_seqs, cfg.batch_size, rng) for _ in range(cfg.epochs)]
    total = sum(len(e) for e in epochs)
    opt = Adam(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay)
    losses = []
    if run_dir is not None:
        write_checkpoint(run_dir, 0, model)
    step = 0
    for epoch, batches in enumerate(epochs):
        for idx in batches:
            batch = [token_seqs[i] for i in idx]
            model.zero_grad()
            loss = lm_loss(model, batch)
            tm.backward(loss)
            clip_grad_norm(model.parameters(), cfg.grad_clip)
            lr = lr_at(step, total, cfg)
            opt.step(lr)
            step += 1
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"training diverged at step {step}")
            losses.append(value)
            if on_step is not None:
                on_step(step, value, lr)
            if run_dir is not None and (step % cfg.checkpoint_every == 0 or step == total):
                write_checkpoint(run_dir, step, model)
        log.info("epoch %d done, last loss %.4f", epoch + 1, losses[-1])
    return losses
