"""Pipeline stages over an output directory.

Each stage reads what earlier stages left in ``out`` (or the explicit model
and world paths), writes its own sub-directory and echoes the config it ran
with.  Stages that produce expensive intermediates (``trace``, ``manifest``)
keep computing and rendering apart so ``report_bundle`` can re-render every
table from the stored intermediates alone.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as tm
from .checkpoint import load_weights, save_weights
from .config import RunConfig
from .dataset import (build_query_set, evaluate_queries, generate_corpus, generate_world,
                      load_corpus, load_world, save_corpus, save_world)
from .lens import (EspProfile, checkpoint_trajectory, esp_grid, group_esp_profile,
                   min_object_rank, rank_threshold)
from .manifestations import ManifestationFeatures, METRICS, manifestation_report, query_features
from .mitigate import (MhmRun, evaluate_mitigation, examples_from_queries, icl_prompt,
                       sft_baseline, train_mhm)
from .model import KINDS, Transformer
from .reports import heatmap_export, read_csv, read_json, write_csv, write_json
from .tracing import (AieGrid, POSITION_GROUPS, TraceOutcome, UnderSampledError,
                      average_indirect_effects, relative_ie, trace_queries)
from .train import pretrain

log = logging.getLogger(__name__)

LABEL_GROUP = {"EarlySite": "early_site", "LateSite": "late_site"}


class MissingInputError(FileNotFoundError):
    """A stage's input has not been produced yet."""


class Run:
    def __init__(self, cfg: RunConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = cfg.hash()
        self._world = None
        self._model = None

    # -- locations ------------------------------------------------------------------
    @property
    def world_path(self):
        return Path(self.cfg.world_path) if self.cfg.world_path else self.out / "world.tsv"

    @property
    def run_dir(self):
        return self.out / "model"

    @property
    def model_path(self):
        return Path(self.cfg.model_path) if self.cfg.model_path else self.run_dir / "final.htw"

    def stage_dir(self, name):
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def echo(self, stage):
        (self.stage_dir(stage) / "config.json").write_text(self.cfg.to_json())

    def need(self, path, what):
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"{what} not found at {path}; run the stage that produces it first")
        return path

    # -- shared inputs ---------------------------------------------------------------
    @property
    def world(self):
        if self._world is None:
            self._world = load_world(self.need(self.world_path, "world file"))
        return self._world

    def model(self, dtype=np.float32):
        if self._model is None:
            self._model = load_weights(self.need(self.model_path, "model weights"))
        return self._model if dtype == np.float32 else self._model.astype(dtype)

    def queries(self, which="query"):
        return {q.qid: q for q in build_query_set(self.world, which)}

    def hallucinations(self):
        """Hallucinating queries with their predictions, in evaluation order."""
        _, header, rows = read_csv(self.need(self.out / "eval" / "outcomes.csv", "evaluation"))
        qs = self.queries()
        out = []
        col = {h: i for i, h in enumerate(header)}
        for r in rows:
            if r[col["label"]] == "hallucinating":
                q = qs[r[col["qid"]]]
                q.predicted = int(r[col["predicted_id"]])
                out.append(q)
        return out

    def factual_ids(self):
        _, header, rows = read_csv(self.need(self.out / "eval" / "outcomes.csv", "evaluation"))
        col = {h: i for i, h in enumerate(header)}
        return [r[col["qid"]] for r in rows if r[col["label"]] == "factual"]

    def labels(self):
        _, _, rows = read_csv(self.need(self.out / "classify" / "labels.csv", "classification"))
        return {r[0]: r[2] for r in rows}

    def sample(self, items, k, salt):
        if len(items) <= k:
            return list(items)
        rng = np.random.default_rng([self.cfg.seed, salt])
        idx = np.sort(rng.choice(len(items), size=k, replace=False))
        return [items[i] for i in idx]


# -- world, corpus, training ----------------------------------------------------------

def world_gen(run: Run):
    world = generate_world(run.cfg.world_config())
    save_world(world, run.world_path)
    run._world = world
    write_json(run.stage_dir("world") / "summary.json", {
        "config_sha256": run.hash, "subjects": len(world.subjects),
        "relations": [r.name for r in world.relations], "triples": len(world.triples),
        "aliases": len(world.aliases), "confounders": len(world.confounders),
        "vocab_size": len(world.vocab)})
    run.echo("world")


def corpus_gen(run: Run):
    corpus = generate_corpus(run.world, run.cfg.corpus_config())
    save_corpus(corpus, run.out / "corpus")
    write_json(run.stage_dir("corpus") / "summary.json", {
        "config_sha256": run.hash, "sentences": len(corpus.sentences),
        "fact_sentences": int(sum(corpus.fact_counts.values())),
        "distractor_sentences": int(sum(corpus.distractor_counts.values()))})
    run.echo("corpus")


def train(run: Run):
    world = run.world
    corpus = load_corpus(run.need(run.out / "corpus", "corpus directory"))
    seqs = [world.vocab.tokenize(s) for s in corpus.sentences]
    model = Transformer(run.cfg.model_config(len(world.vocab)))
    rows = []
    losses = pretrain(model, seqs, run.cfg.train_config(), run_dir=run.run_dir,
                      on_step=lambda step, loss, lr: rows.append((step, loss, lr)))
    save_weights(model, run.model_path)
    run._model = model
    d = run.stage_dir("train")
    write_csv(d / "loss.csv", ["step", "loss", "lr"], rows, run.hash)
    write_json(d / "summary.json", {"config_sha256": run.hash, "steps": len(losses),
                                    "final_loss": losses[-1] if losses else None})
    run.echo("train")


# -- evaluation -----------------------------------------------------------------------

def evaluate(run: Run):
    world = run.world
    model = run.model()
    queries = list(run.queries().values())
    outcomes, halluc = evaluate_queries(model, queries, world, run.cfg.eval.match_rule)
    counts_path = run.out / "corpus" / "corpus_manifest.tsv"
    fact_counts = load_corpus(run.out / "corpus").fact_counts if counts_path.exists() else {}
    rows = []
    for q, o in zip(queries, outcomes):
        confounded = world.confounders.get(q.subject, (None,))[0] == q.relation
        rows.append([q.qid, q.subject, q.relation, q.template,
                     fact_counts.get((q.subject, q.relation), -1), confounded,
                     "" if q.predicted is None else q.predicted, o.predicted or "", o.label])
    d = run.stage_dir("eval")
    write_csv(d / "outcomes.csv", ["qid", "subject", "relation", "template", "fact_count",
                                   "confounded", "predicted_id", "predicted", "label"],
              rows, run.hash)
    labels = [o.label for o in outcomes]
    hi = [r[-1] == "factual" for r in rows
          if r[4] >= run.cfg.eval.high_freq_min_count and not r[5]]
    summary = {"config_sha256": run.hash, "queries": len(rows),
               "factual": labels.count("factual"), "hallucinating": labels.count("hallucinating"),
               "discarded": labels.count("discarded"),
               "accuracy": labels.count("factual") / len(rows),
               "high_freq_min_count": run.cfg.eval.high_freq_min_count,
               "high_freq_queries": len(hi),
               "high_freq_accuracy": float(np.mean(hi)) if hi else None}
    write_json(d / "summary.json", summary)
    run.echo("eval")
    return summary


# -- causal tracing -------------------------------------------------------------------

def trace(run: Run):
    model = run.model(np.float64)
    halluc = run.sample(run.hallucinations(), run.cfg.trace.max_queries, 1)
    cfg = run.cfg.tracing_config()
    results = trace_queries(model, halluc, cfg, workers=run.cfg.threads)
    d = run.stage_dir("trace")
    lines, skipped = [], []
    for q, res in zip(halluc, results):
        if isinstance(res, UnderSampledError):
            skipped.append([q.qid, len(res.attempts), res.acceptance_rate])
            continue
        lines.append(json.dumps({
            "qid": q.qid, "o": q.o, "o_prime": q.predicted, "y": res.y,
            "acceptance_rate": res.acceptance_rate, "attempts": len(res.attempts),
            "under_sampled": len(res.samples) < cfg.n_noises,
            "noises": [[s.seed, s.y_star] for s in res.samples],
            "ie": res.mean_ie.tolist()}, sort_keys=True))
    (d / "traces.jsonl").write_text("".join(line + "\n" for line in lines))
    write_csv(d / "skipped.csv", ["qid", "attempts", "acceptance_rate"], skipped, run.hash)
    render_trace(run, d)
    run.echo("trace")


def load_traces(run: Run):
    path = run.need(run.out / "trace" / "traces.jsonl", "trace records")
    qs = run.queries()
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        q = qs[rec["qid"]]
        q.predicted = rec["o_prime"]
        out.append((q, rec))
    return out


def render_trace(run: Run, d):
    traced = load_traces(run)
    if not traced:
        raise RuntimeError("no query could be traced (every noise budget ran out)")
    grid = average_indirect_effects([(q, np.array(r["ie"])) for q, r in traced])
    heatmap_export(grid, d, run.hash)
    rows = [[q.qid, r["y"], r["acceptance_rate"], r["attempts"], len(r["noises"]), r["under_sampled"]]
            for q, r in traced]
    write_csv(d / "queries.csv", ["qid", "y", "acceptance_rate", "attempts", "noises",
                                  "under_sampled"], rows, run.hash)


def classify(run: Run):
    render_classify(run, run.stage_dir("classify"))
    run.echo("classify")


def render_classify(run: Run, d):
    traced = load_traces(run)
    kinds = tuple(run.cfg.trace.relative_kinds)
    rows, by_label = [], {"EarlySite": [], "LateSite": []}
    for q, r in traced:
        grid = np.array(r["ie"])
        lab = relative_ie(grid, q.s_first, q.last, kinds)
        rows.append([q.qid, lab.delta_ie, lab.label])
        by_label[lab.label].append((q, grid))
    write_csv(d / "labels.csv", ["qid", "delta_ie", "label"], rows, run.hash)
    for label, items in by_label.items():
        if items:
            heatmap_export(average_indirect_effects(items), d, run.hash,
                           prefix=f"aie_{LABEL_GROUP[label]}")
    write_json(d / "summary.json", {"config_sha256": run.hash,
                                    "counts": {k: len(v) for k, v in by_label.items()}})


# -- lens -----------------------------------------------------------------------------

def _lens_groups(run: Run):
    labels = run.labels()
    halluc = {q.qid: q for q in run.hallucinations()}
    qs = run.queries()
    groups = {"factual": [qs[i] for i in run.sample(run.factual_ids(), run.cfg.lens.max_factual, 2)]}
    for label, tag in LABEL_GROUP.items():
        groups[tag] = [halluc[qid] for qid, lab in labels.items() if lab == label]
    return groups


def _with_traces(model, queries):
    out = []
    with tm.no_grad():
        for q in queries:
            _, t = model.forward(q.tokens, capture=True)
            out.append((q, t))
    return out


def lens_esp(run: Run):
    model = run.model(np.float64)
    E = model["unembed"].data
    groups = {k: _with_traces(model, v) for k, v in _lens_groups(run).items()}
    d = run.stage_dir("lens")
    profiles = group_esp_profile(groups, E)
    L = model.cfg.n_layers
    write_csv(d / "esp_profile.csv", ["group", "kind", "count"] + [f"layer_{i}" for i in range(1, L + 1)],
              [[p.group, p.kind, p.count, *p.values] for p in profiles], run.hash)
    for name, items in groups.items():
        if items:
            values, counts = esp_grid(items, E)
            heatmap_export(AieGrid(values, counts), d, run.hash, prefix=f"esp_{name}")
    write_json(d / "esp_groups.json", {"config_sha256": run.hash,
                                       "counts": {k: len(v) for k, v in groups.items()},
                                       "empty": [k for k, v in groups.items() if not v]})
    run.echo("lens")


def lens_rank(run: Run):
    model = run.model(np.float64)
    labels = run.labels()
    halluc = {q.qid: q for q in run.hallucinations()}
    frac = run.cfg.lens.rank_frac
    rows = []
    L = model.cfg.n_layers
    for qid, label in labels.items():
        q = halluc[qid]
        (_, t), = _with_traces(model, [q])
        rec = min_object_rank(t, q, model, frac)
        rows.append([qid, label, rec.rho, rec.passed, *rec.ranks])
    d = run.stage_dir("lens")
    write_csv(d / "ranks.csv", ["qid", "label", "rho", "passed"] + [f"layer_{i}" for i in range(1, L + 1)],
              rows, run.hash)
    summary = {"config_sha256": run.hash, "threshold": rank_threshold(model.cfg.vocab_size, frac)}
    for label in LABEL_GROUP:
        sel = [r[3] for r in rows if r[1] == label]
        summary[f"{label}_pass_rate"] = float(np.mean(sel)) if sel else None
        summary[f"{label}_n"] = len(sel)
    write_json(d / "ranks_summary.json", summary)
    run.echo("lens")


# -- manifestations ---------------------------------------------------------------------

def manifest(run: Run):
    model = run.model(np.float64)
    labels = run.labels()
    halluc = {q.qid: q for q in run.hallucinations()}
    cfg = run.cfg.tracing_config()
    m = run.cfg.manifest
    rows = []
    for qid, label in labels.items():
        f = query_features(model, halluc[qid], label, cfg, m.robustness_rule, n=m.pool_size)
        rows.append([f.qid, f.label, *(getattr(f, k) for k in METRICS)])
    d = run.stage_dir("manifest")
    write_csv(d / "features.csv", ["qid", "label", *METRICS], rows, run.hash)
    render_manifest(run, d)
    run.echo("manifest")


def render_manifest(run: Run, d):
    _, _, rows = read_csv(run.need(run.out / "manifest" / "features.csv", "manifestation features"))
    feats = [ManifestationFeatures(r[0], r[1], *(float(x) for x in r[2:])) for r in rows]
    table = manifestation_report(feats)
    write_csv(d / "report.csv", ["label", "metric", "mean", "n", "reference"],
              [[t["label"], t["metric"], t["mean"], t["n"], t["reference"]] for t in table], run.hash)


# -- mitigation -------------------------------------------------------------------------

def _write_mitigation_run(run: Run, res: MhmRun, d):
    save_weights(res.model, d / "model.htw")
    write_csv(d / "loss_log.csv", ["step", "nll", "mhm", "combined"], res.log, run.hash)


def mitigate_train(run: Run):
    model = run.model()
    examples = examples_from_queries(run.hallucinations())
    cfg = run.cfg.mhm_config()
    d = run.stage_dir("mitigate")
    _write_mitigation_run(run, train_mhm(model, examples, cfg), run.stage_dir("mitigate/mhm"))
    _write_mitigation_run(run, sft_baseline(model, examples, cfg), run.stage_dir("mitigate/sft"))
    write_json(d / "train_summary.json", {"config_sha256": run.hash, "examples": len(examples),
                                          "layers_mlp": list(cfg.resolved(model.cfg.n_layers)[0]),
                                          "layers_attn": list(cfg.resolved(model.cfg.n_layers)[1]),
                                          "lambda": cfg.lam})
    run.echo("mitigate")


def mitigation_sets(run: Run, model):
    """Paraphrases of hallucinated facts the model also gets wrong, and the correct set."""
    world = run.world
    halluc_facts = {(q.subject, q.relation) for q in run.hallucinations()}
    para = [q for q in run.queries("paraphrase").values() if (q.subject, q.relation) in halluc_facts]
    outcomes, _ = evaluate_queries(model, [replace(q) for q in para], world, run.cfg.eval.match_rule)
    para = [q for q, o in zip(para, outcomes) if o.label != "factual"]
    qs = run.queries()
    correct = [qs[i] for i in run.factual_ids()]
    return para, correct


def mitigate_eval(run: Run):
    before = run.model()
    world = run.world
    rule = run.cfg.eval.match_rule
    para, correct = mitigation_sets(run, before)
    demos_q = run.sample(correct, run.cfg.mitigate.icl_shots, 3)
    demos = [(q.prompt, q.true_object.split()[0]) for q in demos_q]

    def wrap(q):
        toks = icl_prompt(demos, q.prompt, world.vocab)
        shift = len(toks) - len(q.tokens)
        return replace(q, tokens=toks, subject_span=(q.s_first + shift, q.s_last + shift))

    rows = [["none", *_eval_row(evaluate_mitigation(before, before, para, correct, world, rule))]]
    for method in ("mhm", "sft"):
        after = load_weights(run.need(run.out / "mitigate" / method / "model.htw", f"{method} weights"))
        rows.append([method, *_eval_row(evaluate_mitigation(before, after, para, correct, world, rule))])
    rows.append([f"icl_{len(demos)}shot",
                 *_eval_row(evaluate_mitigation(before, before, para, correct, world, rule, wrap))])
    d = run.stage_dir("mitigate")
    write_csv(d / "mitigation.csv", ["method", "effectiveness", "specificity", "n_paraphrase",
                                     "n_correct", "baseline_effectiveness"], rows, run.hash)
    run.echo("mitigate")
    return rows


def _eval_row(r):
    return [r.effectiveness, r.specificity, r.n_paraphrase, r.n_correct, r.baseline_effectiveness]


# -- training dynamics --------------------------------------------------------------------

def ckpt_esp(run: Run):
    groups = _lens_groups(run)
    points, skipped = checkpoint_trajectory(run.need(run.run_dir, "checkpoint directory"), groups)
    d = run.stage_dir("ckpt_esp")
    write_csv(d / "trajectory.csv", ["step", "group", "count", "lower_mlp", "upper_attn"],
              [[p.step, p.group, p.count, p.lower_mlp, p.upper_attn] for p in points], run.hash)
    write_json(d / "skipped.json", {"config_sha256": run.hash, "skipped": skipped})
    run.echo("ckpt_esp")


# -- bundle ---------------------------------------------------------------------------------

def report_bundle(run: Run):
    """Re-render trace, classify and manifest tables from stored intermediates.

    Writes them under ``bundle/`` and records, for each, whether it matches
    the stage's own output byte for byte.
    """
    d = run.stage_dir("bundle")
    renders = {"trace": render_trace, "classify": render_classify, "manifest": render_manifest}
    index = {}
    for stage, fn in renders.items():
        target = run.stage_dir(f"bundle/{stage}")
        fn(run, target)
        for p in sorted(target.iterdir()):
            orig = run.out / stage / p.name
            index[f"{stage}/{p.name}"] = {
                "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                "matches_stage_output": orig.exists() and orig.read_bytes() == p.read_bytes()}
    write_json(d / "index.json", {"config_sha256": run.hash, "files": index})
    run.echo("bundle")
    return index


STAGES = {
    "world gen": world_gen, "corpus gen": corpus_gen, "train": train, "eval": evaluate,
    "trace": trace, "classify": classify, "lens esp": lens_esp, "lens rank": lens_rank,
    "manifest": manifest, "mitigate train": mitigate_train, "mitigate eval": mitigate_eval,
    "ckpt-esp": ckpt_esp, "report bundle": report_bundle,
}
