"""External symptoms that separate the two hallucination mechanisms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tm
from .intervene import default_sigma
from .tracing import noisy_ys, hallucination_run, noise_seed

# Reference means, shown beside measured values in reports.
REFERENCE = {
    "EarlySite": {"so_assoc": 0.40, "so_prime_assoc": 0.85, "robustness": 0.78, "uncertainty": 4.39},
    "LateSite": {"so_assoc": 0.88, "so_prime_assoc": 2.03, "robustness": 0.51, "uncertainty": 4.17},
}
METRICS = ("so_assoc", "so_prime_assoc", "robustness", "uncertainty")


@dataclass
class ManifestationFeatures:
    qid: str
    label: str
    so_assoc: float
    so_prime_assoc: float
    robustness: float
    uncertainty: float


def association_strength(tok_embed, subject_ids, object_id):
    """Mean inner product of subject-token input embeddings with the object's."""
    if len(subject_ids) == 0:
        raise ValueError("subject has no tokens")
    E = np.asarray(tok_embed, dtype=np.float64)
    return float((E[list(subject_ids)] @ E[object_id]).mean())


def robustness(y_stars, y=None, rule="survives"):
    """Share of noised runs in an unfiltered pool that keep the hallucination.

    ``rule="survives"`` counts ``y_star > 0``; ``rule="flipped"`` instead
    counts the literal ``y_star < 0 < y`` condition.
    """
    y_stars = np.asarray(y_stars, dtype=np.float64)
    if y_stars.size == 0:
        raise ValueError("robustness needs at least one noised run")
    if rule == "survives":
        return float((y_stars > 0).mean())
    if rule == "flipped":
        if y is None:
            raise ValueError("the flipped rule needs the clean-run y")
        return float(((y_stars < 0) & (0 < y)).mean())
    raise ValueError(f"unknown robustness rule {rule!r}")


def noise_pool(model, q, cfg, n=None, sigma=None):
    """``y_star`` for the first ``n`` seeds of ``q``'s noise sequence, no acceptance filter."""
    sigma = default_sigma(model, cfg.sigma_mode) if sigma is None else sigma
    n = cfg.n_noises if n is None else n
    seeds = [noise_seed(cfg.seed, q.qid, a) for a in range(n)]
    return noisy_ys(model, q, seeds, sigma, cfg.noise_scope)


def query_features(model, q, label, cfg, rule="survives", sigma=None, n=None):
    """All four features for one hallucinating query."""
    E = model["tok_embed"].data
    subj = q.tokens[q.s_first:q.s_last + 1]
    y, _ = hallucination_run(model, q)
    with tm.no_grad():
        logits, _ = model.forward(q.tokens)
    return ManifestationFeatures(
        q.qid, label,
        association_strength(E, subj, q.o),
        association_strength(E, subj, q.predicted),
        robustness(noise_pool(model, q, cfg, n, sigma), y, rule),
        prediction_uncertainty(logits.data[-1]))


def prediction_uncertainty(logits_row):
    """Entropy (nats) of the final-position next-token distribution."""
    p = tm.softmax(tm.Tensor(np.asarray(logits_row, dtype=np.float64))).data
    return tm.entropy(p)


def manifestation_report(features, labels=("EarlySite", "LateSite")):
    """Rows ``{label, metric, mean, n, reference}`` per label and metric."""
    rows = []
    for label in labels:
        group = [f for f in features if f.label == label]
        for metric in METRICS:
            vals = [getattr(f, metric) for f in group]
            rows.append({"label": label, "metric": metric,
                         "mean": float(np.mean(vals)) if vals else float("nan"),
                         "n": len(vals), "reference": REFERENCE[label][metric]})
    return rows
