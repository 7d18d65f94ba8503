"""Interventions applied inside :meth:`Transformer.forward`.

Two kinds exist: overwriting a produced hidden state at one site, and adding
seeded Gaussian noise to the token-embedding rows of chosen positions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tm
from .model import KINDS


class InterventionError(ValueError):
    pass


@dataclass(frozen=True)
class PatchState:
    kind: str
    layer: int
    position: int
    vector: np.ndarray = field(compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InterventionError(f"unknown site kind {self.kind!r}")


@dataclass(frozen=True)
class EmbeddingNoise:
    positions: tuple
    sigma: float
    seed: int

    def __post_init__(self):
        if self.sigma <= 0:
            raise InterventionError("noise sigma must be positive")


class InterventionSet:
    """Ordered, validated collection of interventions for one forward pass."""

    def __init__(self, items=()):
        self.items = []
        for it in items:
            self.add(it)

    def add(self, item):
        if isinstance(item, PatchState):
            key = (item.kind, item.layer, item.position)
            if any(isinstance(o, PatchState) and (o.kind, o.layer, o.position) == key
                   for o in self.items):
                raise InterventionError(f"duplicate patch at {key}")
        elif isinstance(item, EmbeddingNoise):
            if any(isinstance(o, EmbeddingNoise) for o in self.items):
                raise InterventionError("at most one EmbeddingNoise per pass")
        else:
            raise InterventionError(f"not an intervention: {item!r}")
        self.items.append(item)
        return self

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    @property
    def noise(self):
        return next((i for i in self.items if isinstance(i, EmbeddingNoise)), None)

    @property
    def patches(self):
        return [i for i in self.items if isinstance(i, PatchState)]


def draw_noise(positions, d, sigma, seed):
    """The ``len(positions) x d`` Gaussian block used for ``seed``."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((len(positions), d)) * sigma


def apply_embedding_noise(rows, positions, sigma, seed):
    """Return ``rows`` plus N(0, sigma^2) noise on the listed positions only."""
    if sigma <= 0:
        raise InterventionError("noise sigma must be positive")
    rows = np.asarray(rows)
    positions = sorted(set(int(p) for p in positions))
    if positions and (positions[0] < 0 or positions[-1] >= rows.shape[0]):
        raise InterventionError(f"noise positions {positions} out of range for {rows.shape[0]} rows")
    out = rows.copy()
    if positions:
        out[positions] += draw_noise(positions, rows.shape[1], sigma, seed).astype(rows.dtype)
    return out


def noise_array(noise: EmbeddingNoise, T, d, dtype=np.float64):
    zeros = np.zeros((T, d), dtype=dtype)
    return apply_embedding_noise(zeros, noise.positions, noise.sigma, noise.seed)


def default_sigma(model, mode="3xstd"):
    """Noise scale: ``3xstd`` is three times the std of all token-embedding entries."""
    if mode == "3xstd":
        return 3.0 * float(np.std(model["tok_embed"].data.astype(np.float64)))
    if mode == "unit":
        return 1.0
    raise InterventionError(f"unknown sigma mode {mode!r}")


def bind(interventions: InterventionSet, model, T):
    """Validate against a pass of length ``T``; return ``(noise, hook)``."""
    L, d = model.cfg.n_layers, model.cfg.d_model
    noise = None
    if interventions.noise is not None:
        noise = noise_array(interventions.noise, T, d, model.dtype)
    table = {}
    for p in interventions.patches:
        if not 1 <= p.layer <= L or not 0 <= p.position < T:
            raise InterventionError(
                f"unreachable patch target {(p.kind, p.layer, p.position)} "
                f"for {L} layers and {T} positions")
        vec = np.asarray(p.vector, dtype=model.dtype)
        if vec.shape != (d,):
            raise InterventionError(f"patch vector shape {vec.shape}, expected ({d},)")
        table.setdefault((p.kind, p.layer), []).append((p.position, vec))
    if not table:
        return noise, None

    def hook(kind, layer, value):
        for pos, vec in table.get((kind, layer), ()):
            value = tm.assign(value, (slice(None), pos), vec)
        return value
    return noise, hook
