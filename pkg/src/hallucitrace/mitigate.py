"""Fine-tuning against hallucinations through intermediate projections.

The mitigation loss asks the logit lens of selected MLP outputs to put mass
on the true answer ``y``, and asks selected attention outputs to prefer
``y`` over the hallucinated ``y'``; it is added to the usual next-token loss
on ``[x; y]``.  Plain fine-tuning is the same loop with the extra term
switched off.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tm
from .checkpoint import save_weights
from .dataset import evaluate_queries
from .model import ConfigError
from .train import clip_grad_norm, pad_batch

log = logging.getLogger(__name__)

ICL_TEMPLATE = "Question: {q} . Answer: {a}"


def default_layers(n_layers, width=6):
    """``width`` consecutive layers centred at three quarters of the depth, clipped to ``[1, L]``."""
    width = min(width, n_layers)
    start = round(3 * n_layers / 4) - width // 2 + 1
    start = max(1, min(start, n_layers - width + 1))
    return tuple(range(start, start + width))


@dataclass
class MhmConfig:
    layers_mlp: tuple | None = None     # None -> default_layers(L)
    layers_attn: tuple | None = None
    lam: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 15
    batch_size: int = 8
    grad_clip: float = 1.0
    seed: int = 4
    lens_grad: bool = True              # False: the lens head is a fixed read-out in the mitigation term

    def resolved(self, n_layers):
        lm = default_layers(n_layers) if self.layers_mlp is None else tuple(self.layers_mlp)
        la = default_layers(n_layers) if self.layers_attn is None else tuple(self.layers_attn)
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        for layer in (*lm, *la):
            if not 1 <= layer <= n_layers:
                raise ConfigError(f"mitigation layer {layer} outside 1..{n_layers}")
        return lm, la


@dataclass
class TrainExample:
    x: list          # question tokens
    y: int           # true answer (first token)
    y_prime: int     # hallucinated answer

    def __post_init__(self):
        if self.y == self.y_prime:
            raise ValueError("true and hallucinated answers must differ")


@dataclass
class MitigationEvalResult:
    effectiveness: float
    specificity: float
    n_paraphrase: int
    n_correct: int
    baseline_effectiveness: float = float("nan")


@dataclass
class MhmRun:
    model: object
    log: list = field(default_factory=list)   # (step, nll, mhm, combined)


class DivergenceError(FloatingPointError):
    def __init__(self, step, last_good):
        self.step = step
        self.last_good = last_good
        super().__init__(f"mitigation loss became non-finite at step {step}")


def _lens_logprobs(model, z, frozen=None):
    if frozen is None:
        return tm.log_softmax(model.unembed(model.final_norm(z)), axis=-1)
    g, b, E = frozen
    hz = tm.layer_norm(z, g, b, model.cfg.layer_norm_eps)
    return tm.log_softmax(hz @ E, axis=-1)


def batch_losses(model, examples, cfg: MhmConfig, need_mhm=True):
    """``(nll, mhm)`` tensors averaged over ``examples`` (``mhm`` is None if skipped).

    One forward pass over the right-padded ``[x; y]`` inputs serves both
    terms; the intermediate outputs are read at each example's last question
    token.
    """
    lm, la = cfg.resolved(model.cfg.n_layers)
    if need_mhm and not lm and not la:
        raise ConfigError("mitigation loss needs at least one MLP or attention layer")
    ids, lengths = pad_batch([list(ex.x) + [ex.y] for ex in examples])
    inputs, targets = ids[:, :-1], ids[:, 1:]
    n_tok = lengths - 1
    B = len(examples)
    mask = np.arange(targets.shape[1])[None, :] < n_tok[:, None]
    # each example's own mean, then the mean over examples
    weights = mask / n_tok[:, None]
    record = {"resid": [], "attn": [], "mlp": [], "weights": []} if need_mhm else None
    h = model.run_layers(model.embed(inputs), record=record)
    logits = model.unembed(model.final_norm(h))
    nll = tm.cross_entropy(logits, targets, weights)
    if not need_mhm:
        return nll, None
    rows = np.arange(B)
    last = n_tok - 1
    frozen = None if cfg.lens_grad else (
        tm.Tensor(model["ln_f.g"].data), tm.Tensor(model["ln_f.b"].data),
        tm.Tensor(model["unembed"].data.T.copy()))
    y = np.array([ex.y for ex in examples])
    yp = np.array([ex.y_prime for ex in examples])
    terms = []
    for layer in lm:
        lp = _lens_logprobs(model, tm.take(record["mlp"][layer - 1], (rows, last)), frozen)
        terms.append(tm.scale(tm.take(lp, (rows, y)), -1.0))
    for layer in la:
        lp = _lens_logprobs(model, tm.take(record["attn"][layer - 1], (rows, last)), frozen)
        terms.append(tm.sub(tm.take(lp, (rows, yp)), tm.take(lp, (rows, y))))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return nll, tm.mean(total)


def mhm_loss(model, x, y, y_prime, cfg: MhmConfig):
    _, mhm = batch_losses(model, [TrainExample(list(x), y, y_prime)], cfg)
    return mhm


def nll_loss(model, x, y, cfg: MhmConfig | None = None):
    nll, _ = batch_losses(model, [TrainExample(list(x), y, -1)], cfg or MhmConfig(), need_mhm=False)
    return nll


def combined_loss(model, x, y, y_prime, cfg: MhmConfig):
    return _combine(*batch_losses(model, [TrainExample(list(x), y, y_prime)], cfg,
                                  need_mhm=cfg.lam != 0), cfg.lam)


def _combine(nll, mhm, lam):
    if mhm is None or lam == 0:
        return nll
    return nll + tm.scale(mhm, lam)


def train_mhm(model, examples, cfg: MhmConfig, out_dir=None):
    """Fine-tune a copy of ``model``; returns an :class:`MhmRun`.

    SGD with optional heavy-ball momentum; batch order per epoch comes from
    ``cfg.seed``.  With ``out_dir`` the final weights go to ``model.htw`` and
    the per-step losses to ``loss_log.tsv``.
    """
    if not examples:
        raise ValueError("no training examples")
    cfg.resolved(model.cfg.n_layers)
    model = model.copy()
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(cfg.seed)
    rows, step = [], 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(examples))
        for k in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[k:k + cfg.batch_size]]
            last_good = {p.name: p.data.copy() for p in params}
            model.zero_grad()
            nll, mhm = batch_losses(model, batch, cfg, need_mhm=cfg.lam != 0)
            loss = _combine(nll, mhm, cfg.lam)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(step, last_good)
            tm.backward(loss)
            clip_grad_norm(params, cfg.grad_clip)
            for p, v in zip(params, velocity):
                v *= cfg.momentum
                v += p.grad
                p.data -= (cfg.lr * v).astype(p.data.dtype)
            step += 1
            rows.append((step, float(nll.data), float(mhm.data) if mhm is not None else 0.0, value))
    run = MhmRun(model, rows)
    if out_dir is not None:
        write_run(run, out_dir)
    return run


def write_run(run: MhmRun, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_weights(run.model, out_dir / "model.htw")
    lines = ["step\tnll\tmhm\tcombined"]
    lines += [f"{s}\t{a!r}\t{b!r}\t{c!r}" for s, a, b, c in run.log]
    (out_dir / "loss_log.tsv").write_text("\n".join(lines) + "\n")


def sft_baseline(model, examples, cfg: MhmConfig, out_dir=None):
    """The same loop with the mitigation term switched off."""
    return train_mhm(model, examples, replace(cfg, lam=0.0), out_dir)


def icl_text(demos, question):
    """``Question: Q . Answer: A`` per demonstration, then the open query."""
    parts = [ICL_TEMPLATE.format(q=q, a=a) for q, a in demos]
    parts.append(f"Question: {question} . Answer:")
    return " ".join(parts)


def icl_prompt(demos, question, vocab):
    return vocab.tokenize(icl_text(demos, question))


def examples_from_queries(queries):
    """Training examples from evaluated hallucinating queries."""
    return [TrainExample(list(q.tokens), q.o, q.predicted) for q in queries]


def evaluate_mitigation(before, after, paraphrase, correct, world, rule="prefix", wrap=None):
    """Effectiveness on ``paraphrase`` and specificity on the ``correct`` set.

    ``correct`` is narrowed to queries ``before`` answers acceptably.
    ``wrap`` optionally rewrites each query (e.g. into an in-context prompt)
    for the ``after`` model only.
    """
    if not paraphrase or not correct:
        raise ValueError("both evaluation sets must be non-empty")

    def accuracy(model, queries, use_wrap):
        qs = [wrap(q) if (use_wrap and wrap is not None) else replace(q) for q in queries]
        outcomes, _ = evaluate_queries(model, qs, world, rule)
        return [o.label == "factual" for o in outcomes]

    base_ok = accuracy(before, correct, False)
    kept = [q for q, ok in zip(correct, base_ok) if ok]
    if not kept:
        raise ValueError("no query in the correct set is answered correctly before mitigation")
    eff = float(np.mean(accuracy(after, paraphrase, True)))
    base_eff = float(np.mean(accuracy(before, paraphrase, False)))
    spec = float(np.mean(accuracy(after, kept, True)))
    return MitigationEvalResult(eff, spec, len(paraphrase), len(kept), base_eff)
