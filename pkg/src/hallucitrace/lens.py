"""Inspection of hidden states through the output embedding.

All quantities are read off a captured :class:`~hallucitrace.model.ActivationTrace`
so nothing here re-runs the model except :func:`checkpoint_trajectory`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as tm
from .checkpoint import HtwError, list_checkpoints, load_weights
from .model import KINDS
from .tracing import POSITION_GROUPS, group_positions

log = logging.getLogger(__name__)
GROUP_TAGS = ("factual", "early_site", "late_site")


@dataclass
class RankRecord:
    qid: str
    rho: int                # best 1-based rank of the true object over layers
    passed: bool
    ranks: np.ndarray       # per layer


@dataclass
class EspProfile:
    group: str
    kind: str
    values: np.ndarray      # [L]
    count: int


@dataclass
class TrajectoryPoint:
    step: int
    group: str
    lower_mlp: float
    upper_attn: float
    count: int


def esp(z, unembed, o):
    """Object-specific projection ``z . e_o`` (raw, no final norm)."""
    return np.asarray(z, dtype=np.float64) @ np.asarray(unembed[o], dtype=np.float64)


def lens_logits(z, model):
    hz = model.final_norm(tm.Tensor(np.asarray(z, dtype=model.dtype))).data
    return hz @ model["unembed"].data.T


def logit_lens(z, model):
    """Vocabulary distribution ``softmax(E . LN_f(z))`` for a hidden state."""
    return tm.softmax(tm.Tensor(np.asarray(lens_logits(z, model), dtype=np.float64))).data


def enriched_info(trace, layer, s_last, model):
    """``I_m`` for every vocabulary item from the MLP output at the last subject token."""
    return lens_logits(trace.mlp[layer - 1, s_last], model)


def mlp_enriched_info(trace, layer, s_last, o, model):
    return float(enriched_info(trace, layer, s_last, model)[o])


def distractor_set(trace, layer, s_last, o, model, k=100):
    """Top-``k`` tokens by enriched information, the true object excluded."""
    im = enriched_info(trace, layer, s_last, model)
    order = tm.topk(im, k + 1)
    return [int(t) for t in order if t != o][:k]


def attn_extracted_info(trace, layer, last, o, others, model):
    """``a_T . (e_o - mean_{o' in others} e_o')``."""
    if len(others) == 0:
        raise ValueError("attention-extracted information needs a non-empty distractor set")
    E = model["unembed"].data.astype(np.float64)
    direction = E[o] - E[list(others)].mean(axis=0)
    return float(trace.attn[layer - 1, last].astype(np.float64) @ direction)


def object_ranks(trace, s_last, o, model):
    """1-based rank of ``o`` in the lens of each layer's MLP output at the last subject token.

    Ranks are taken on lens logits; softmax is strictly increasing so the
    order matches the distribution's.
    """
    logits = lens_logits(trace.mlp[:, s_last], model)           # [L, V]
    return 1 + (logits > logits[:, [o]]).sum(axis=1)


def rank_threshold(vocab_size, frac=0.01):
    return int(np.floor(frac * vocab_size))


def min_object_rank(trace, q, model, frac=0.01):
    ranks = object_ranks(trace, q.s_last, q.o, model)
    rho = int(ranks.min())
    return RankRecord(q.qid, rho, rho <= rank_threshold(model.cfg.vocab_size, frac), ranks)


def esp_sites(trace, q, unembed):
    """ESP of ``[kind, layer, position]`` for the true object."""
    E = np.asarray(unembed[q.o], dtype=np.float64)
    stack = np.stack([trace.resid, trace.attn, trace.mlp]).astype(np.float64)
    return stack @ E


def esp_grid(items, unembed):
    """Mean ESP ``[kind, layer, group]`` over ``[(query, trace)]`` plus per-group counts."""
    L = items[0][1].resid.shape[0]
    total = np.zeros((len(KINDS), L, len(POSITION_GROUPS)))
    counts = np.zeros(len(POSITION_GROUPS), dtype=int)
    for q, trace in items:
        grid = esp_sites(trace, q, unembed)
        for g, pos in enumerate(group_positions(q).values()):
            if pos:
                total[:, :, g] += grid[:, :, pos].mean(axis=-1)
                counts[g] += 1
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, total / np.maximum(counts, 1), np.nan), counts


def group_esp_profile(groups, unembed):
    """Per-layer ESP profiles for each labelled group of ``[(query, trace)]``.

    The MLP profile is read at the last subject token, the attention
    profile at the last token.
    """
    out = []
    for name, items in groups.items():
        if not items:
            continue
        mlp = np.mean([esp(t.mlp[:, q.s_last], unembed, q.o) for q, t in items], axis=0)
        attn = np.mean([esp(t.attn[:, q.last], unembed, q.o) for q, t in items], axis=0)
        out.append(EspProfile(name, "mlp_out", mlp, len(items)))
        out.append(EspProfile(name, "attn_out", attn, len(items)))
    return out


def lower_upper_esp(trace, q, unembed):
    """Mean ESP of lower-half MLP outputs (last subject) and upper-half attention (last token)."""
    L = trace.mlp.shape[0]
    half = L // 2
    lower = esp(trace.mlp[:half, q.s_last], unembed, q.o).mean()
    upper = esp(trace.attn[half:, q.last], unembed, q.o).mean()
    return float(lower), float(upper)


def checkpoint_trajectory(run_dir, groups, dtype=np.float64):
    """Lower-MLP / upper-attention ESP per checkpoint for fixed query groups.

    ``groups`` maps a label to queries; membership is decided by the caller
    (normally from the final checkpoint) and held fixed across steps.
    Returns ``(points, skipped)``; unreadable checkpoints are skipped with a
    warning.
    """
    points, skipped = [], []
    for step, path in list_checkpoints(run_dir):
        try:
            model = load_weights(path).astype(dtype)
        except (HtwError, OSError) as e:
            log.warning("skipping checkpoint %s: %s", path, e)
            skipped.append(str(path))
            continue
        E = model["unembed"].data
        for name, queries in groups.items():
            if not queries:
                continue
            vals = []
            with tm.no_grad():
                for q in queries:
                    _, trace = model.forward(q.tokens, capture=True)
                    vals.append(lower_upper_esp(trace, q, E))
            lo, up = np.mean(vals, axis=0)
            points.append(TrajectoryPoint(step, name, float(lo), float(up), len(queries)))
    return points, skipped
