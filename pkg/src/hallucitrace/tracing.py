"""Causal tracing of factual errors.

For a hallucinating query the *hallucination run* gives
``y = log p(o'|u) - log p(o|u)``; the *mitigation run* adds Gaussian noise to
subject-token embeddings and gives ``y_star``; the *mitigation run with
hallucination state* re-runs the noisy input while forcing one hidden state
back to its hallucination-run value.  The indirect effect of that site is
``y_patched - y_star`` (or ``y_patched - y`` under the alternative
convention).

Sweeps over every site of a layer run as one batch that restarts from the
noisy residual entering that layer, so a full grid costs roughly L/2 full
passes per noise sample instead of ``3 * L * T``.
"""
from __future__ import annotations

import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import multiprocessing as mp
import numpy as np

from . import tensor as tm
from .intervene import EmbeddingNoise, InterventionSet, PatchState, default_sigma, draw_noise
from .model import KINDS, ConfigError

POSITION_GROUPS = ("first_subject", "mid_subject", "last_subject", "relation", "last_token")
DEFAULT_RELATIVE_KINDS = ("attn_out", "mlp_out")


@dataclass
class TracingConfig:
    n_noises: int = 10
    max_attempts: int | None = None       # default 10 x n_noises
    sigma_mode: str = "3xstd"             # or "unit"
    noise_scope: str = "first"            # "first" subject token or whole "subject"
    acceptance: str = "main"              # y_star < y ; "companion": y_star < 1
    ie_convention: str = "main"           # y_patched - y_star ; "companion": y_patched - y
    relative_kinds: tuple = DEFAULT_RELATIVE_KINDS
    seed: int = 3

    @property
    def attempts(self):
        return self.max_attempts if self.max_attempts is not None else 10 * self.n_noises


@dataclass
class NoiseSample:
    seed: int
    y_star: float


class UnderSampledError(RuntimeError):
    """Fewer accepted noises than requested; carries what was found."""

    def __init__(self, samples, acceptance_rate, attempts):
        self.samples = samples
        self.acceptance_rate = acceptance_rate
        self.attempts = attempts
        super().__init__(f"only {len(samples)} accepted noises in {len(attempts)} attempts")


@dataclass
class TraceOutcome:
    qid: str
    y: float
    samples: list
    ie: np.ndarray                  # [n_noise, kind, layer, position]
    acceptance_rate: float = float("nan")
    attempts: list = field(default_factory=list)

    @property
    def mean_ie(self):
        return self.ie.mean(axis=0)


@dataclass
class AieGrid:
    values: np.ndarray              # [kind, layer, group]
    counts: np.ndarray              # [group] queries contributing
    kinds: tuple = KINDS
    groups: tuple = POSITION_GROUPS

    def cell(self, kind, layer, group):
        return self.values[self.kinds.index(kind), layer - 1, self.groups.index(group)]


@dataclass
class MechanismLabel:
    delta_ie: float
    label: str                      # "EarlySite" | "LateSite"


def check_query(q, vocab):
    if not q.s_first <= q.s_last < q.last:
        raise ValueError(f"query {q.qid}: subject span must end before the last token")
    if q.predicted is None or q.predicted == q.o:
        raise ValueError(f"query {q.qid}: needs a predicted object different from the true one")
    if not (vocab.capitalized[q.o] and vocab.capitalized[q.predicted]):
        raise ValueError(f"query {q.qid}: objects must be capitalised tokens")


# -- the three runs -----------------------------------------------------------------

def degree_of_hallucination(logits_final, o, o_prime):
    """``log p(o'|.) - log p(o|.)`` on the final-position distribution."""
    lp = tm.log_softmax(tm.Tensor(np.asarray(logits_final, dtype=np.float64))).data
    return float(lp[o_prime] - lp[o])


def _y_from_final(model, h_last, o, o_prime):
    """y for residual states at the last position (any leading shape)."""
    hf = model.final_norm(tm.Tensor(h_last)).data
    E = model["unembed"].data
    return hf @ (E[o_prime] - E[o])


def noise_positions(q, scope="first"):
    if scope == "first":
        return (q.s_first,)
    if scope == "subject":
        return tuple(range(q.s_first, q.s_last + 1))
    raise ValueError(f"unknown noise scope {scope!r}")


def noise_seed(base_seed, qid, attempt):
    ss = np.random.SeedSequence([base_seed, zlib.crc32(qid.encode()), attempt])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def hallucination_run(model, q):
    with tm.no_grad():
        logits, trace = model.forward(q.tokens, capture=True)
    return degree_of_hallucination(logits.data[-1], q.o, q.predicted), trace


def mitigation_run(model, q, seed, sigma, scope="first", patches=()):
    noise = EmbeddingNoise(noise_positions(q, scope), sigma, seed)
    iset = InterventionSet([noise, *patches])
    with tm.no_grad():
        logits, trace = model.forward(q.tokens, iset, capture=True)
    return degree_of_hallucination(logits.data[-1], q.o, q.predicted), trace


def noisy_ys(model, q, seeds, sigma, scope):
    """y_star for many noise seeds in one batched pass."""
    T, d = len(q.tokens), model.cfg.d_model
    pos = noise_positions(q, scope)
    noise = np.zeros((len(seeds), T, d), dtype=model.dtype)
    for b, s in enumerate(seeds):
        noise[b, list(pos)] = draw_noise(pos, d, sigma, s)
    tokens = np.broadcast_to(np.asarray(q.tokens), (len(seeds), T))
    with tm.no_grad():
        h = model.run_layers(model.embed(tokens, noise))
    return _y_from_final(model, h.data[:, -1], q.o, q.predicted)


def _accepts(y_star, y, rule):
    if rule == "main":
        return y_star < y
    if rule == "companion":
        return y_star < 1.0
    raise ValueError(f"unknown acceptance rule {rule!r}")


def sample_mitigating_noises(model, q, cfg: TracingConfig, sigma=None, y=None, chunk=16):
    """Draw seeded noises in order until ``cfg.n_noises`` are accepted.

    Returns ``(samples, acceptance_rate, attempts)`` where ``attempts`` lists
    ``(seed, y_star)`` for every draw made.  Raises :class:`UnderSampledError`
    when the attempt budget runs out first.
    """
    sigma = default_sigma(model, cfg.sigma_mode) if sigma is None else sigma
    if y is None:
        y, _ = hallucination_run(model, q)
    samples, attempts = [], []
    budget = cfg.attempts
    k = 0
    while k < budget and len(samples) < cfg.n_noises:
        seeds = [noise_seed(cfg.seed, q.qid, a) for a in range(k, min(budget, k + chunk))]
        ys = noisy_ys(model, q, seeds, sigma, cfg.noise_scope)
        for s, ys_ in zip(seeds, ys):
            attempts.append((s, float(ys_)))
            if _accepts(ys_, y, cfg.acceptance):
                samples.append(NoiseSample(s, float(ys_)))
                if len(samples) == cfg.n_noises:
                    break
        k += len(seeds)
    rate = len(samples) / len(attempts) if attempts else 0.0
    if len(samples) < cfg.n_noises:
        raise UnderSampledError(samples, rate, attempts)
    return samples, rate, attempts


def indirect_effect(model, q, noise: NoiseSample, site, sigma, cfg: TracingConfig, clean=None):
    """IE of one ``(kind, layer, position)`` site, by explicit patched forward passes."""
    y, clean_trace = clean if clean is not None else hallucination_run(model, q)
    kind, layer, pos = site
    y_star, _ = mitigation_run(model, q, noise.seed, sigma, cfg.noise_scope)
    patch = PatchState(kind, layer, pos, clean_trace.site(kind, layer, pos))
    y_patched, _ = mitigation_run(model, q, noise.seed, sigma, cfg.noise_scope, [patch])
    return y_patched - (y_star if cfg.ie_convention == "main" else y)


def sweep_sites(model, q, source, noisy, kinds=KINDS):
    """y with each site of ``noisy``'s pass overwritten by ``source``'s value.

    Returns ``[len(kinds), L, T]``.  ``source`` and ``noisy`` are traces of
    the same prompt; each layer's sites run as one batch restarted from the
    noisy residual entering that layer.
    """
    L, T = model.cfg.n_layers, len(q.tokens)
    out = np.empty((len(kinds), L, T))
    rows = np.arange(len(kinds) * T)
    site_kind = np.repeat(np.arange(len(kinds)), T)
    site_pos = np.tile(np.arange(T), len(kinds))
    src = {"residual": source.resid, "attn_out": source.attn, "mlp_out": source.mlp}
    with tm.no_grad():
        for layer in range(1, L + 1):
            h = np.broadcast_to(noisy.residual_input(layer), (len(rows), T, model.cfg.d_model))

            def hook(kind, l, value, layer=layer):
                if l != layer or kind not in kinds:
                    return value
                sel = site_kind == kinds.index(kind)
                vec = src[kind][layer - 1][site_pos[sel]]
                return tm.assign(value, (rows[sel], site_pos[sel]), vec)
            h_out = model.run_layers(tm.Tensor(h.copy()), start=layer, hook=hook)
            ys = _y_from_final(model, h_out.data[:, -1], q.o, q.predicted)
            out[:, layer - 1, :] = ys.reshape(len(kinds), T)
    return out


def trace_query(model, q, cfg: TracingConfig, sigma=None, allow_partial=True):
    """Noise sampling plus the full site sweep for one hallucinating query."""
    sigma = default_sigma(model, cfg.sigma_mode) if sigma is None else sigma
    y, clean = hallucination_run(model, q)
    try:
        samples, rate, attempts = sample_mitigating_noises(model, q, cfg, sigma, y)
    except UnderSampledError as e:
        if not allow_partial or not e.samples:
            raise
        samples, rate, attempts = e.samples, e.acceptance_rate, e.attempts
    grids = []
    for s in samples:
        y_star, noisy = mitigation_run(model, q, s.seed, sigma, cfg.noise_scope)
        patched = sweep_sites(model, q, clean, noisy)
        grids.append(patched - (y_star if cfg.ie_convention == "main" else y))
    return TraceOutcome(q.qid, y, samples, np.stack(grids), rate, attempts)


_WORKER = {}


def _init_worker(model, cfg, sigma):
    _WORKER.update(model=model, cfg=cfg, sigma=sigma)


def _trace_one(q):
    try:
        return trace_query(_WORKER["model"], q, _WORKER["cfg"], _WORKER["sigma"])
    except UnderSampledError as e:
        return e


def trace_queries(model, queries, cfg: TracingConfig, workers=1):
    """Trace many queries; results (or UnderSampledError) come back in input order."""
    sigma = default_sigma(model, cfg.sigma_mode)
    if workers <= 1 or len(queries) < 2:
        _init_worker(model, cfg, sigma)
        return [_trace_one(q) for q in queries]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(model, cfg, sigma)) as pool:
        return list(pool.map(_trace_one, queries, chunksize=1))


# -- aggregation ----------------------------------------------------------------------

def group_positions(q):
    sf, sl, last = q.s_first, q.s_last, q.last
    subject = set(range(sf, sl + 1))
    return {
        "first_subject": [sf],
        "mid_subject": list(range(sf + 1, sl)),
        "last_subject": [sl],
        "relation": [i for i in range(last) if i not in subject],
        "last_token": [last],
    }


def grouped_ie(q, ie_grid):
    """Per-query ``[kind, layer, group]`` means; NaN for groups the prompt lacks."""
    out = np.full(ie_grid.shape[:2] + (len(POSITION_GROUPS),), np.nan)
    for g, (name, pos) in enumerate(group_positions(q).items()):
        if pos:
            out[:, :, g] = ie_grid[:, :, pos].mean(axis=-1)
    return out


def average_indirect_effects(items):
    """AIE over ``[(query, mean_ie_grid)]``; each query weighs equally per cell."""
    if not items:
        raise ValueError("need at least one traced query")
    stacked = np.stack([grouped_ie(q, g) for q, g in items])
    present = ~np.isnan(stacked[:, 0, 0, :])
    counts = present.sum(axis=0)
    total = np.where(np.isnan(stacked), 0.0, stacked).sum(axis=0)
    with np.errstate(invalid="ignore"):
        values = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    return AieGrid(values, counts)


def relative_ie(ie_grid, s_first, last, kinds=DEFAULT_RELATIVE_KINDS):
    """Late-minus-early contrast of a per-query ``[kind, layer, position]`` grid.

    Early sites are layers ``1..L/2`` at the first subject token, late sites
    layers ``L/2+1..L`` at the last token; each layer's value is the mean over
    ``kinds``.  A negative contrast labels the query ``EarlySite``.
    """
    ie_grid = np.asarray(ie_grid, dtype=np.float64)
    L = ie_grid.shape[1]
    if L % 2:
        raise ConfigError(f"early/late split needs an even layer count, got {L}")
    k = [KINDS.index(kind) for kind in kinds]
    per_layer = ie_grid[k].mean(axis=0)
    half = L // 2
    late = per_layer[half:, last].sum()
    early = per_layer[:half, s_first].sum()
    delta = float((2.0 / L) * (late - early))
    return MechanismLabel(delta, "EarlySite" if delta < 0 else "LateSite")
