"""Synthetic knowledge world, training corpus, cloze queries and their evaluation.

The world is a set of many-to-one ``(subject, relation, object)`` facts over
generated capitalised names.  Subject frequency in the corpus follows a Zipf
law, so tail subjects are seen too rarely to be learned, and a fraction of
subjects co-occur heavily with a wrong object of one relation.
"""
from __future__ import annotations

import dataclasses
import fcntl
import json
import logging
import re
import threading
import urllib.parse
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tm
from .model import Vocabulary

log = logging.getLogger(__name__)

SPECIAL_TOKENS = ("<pad>", ".", "Question:", "Answer:")

# name, templates; every template ends right before the object.
RELATIONS = [
    ("twin_city", ["{s} is the twin city of", "the twin city of {s} is",
                   "{s} is twinned with", "the sister city of {s} is"]),
    ("country", ["{s} is located in", "the country of {s} is",
                 "{s} lies in", "{s} can be found in"]),
    ("language", ["the mother tongue of {s} is", "{s} speaks",
                  "the native language of {s} is", "{s} grew up speaking"]),
    ("employer", ["{s} works for", "the employer of {s} is",
                  "{s} is employed by", "{s} is on the payroll of"]),
    ("record_label", ["the record label of {s} is", "{s} releases music on",
                      "{s} is signed to", "{s} records for"]),
    ("continent", ["{s} is on the continent of", "the continent of {s} is",
                   "{s} belongs to the continent of", "{s} sits on the continent of"]),
    ("founder", ["{s} was founded by", "the founder of {s} is",
                 "{s} was started by", "{s} owes its creation to"]),
    ("named_after", ["{s} is named after", "the namesake of {s} is",
                     "{s} takes its name from", "{s} was named for"]),
]

DISTRACTOR_TEMPLATES = [
    "{s} is often mentioned alongside {o}",
    "people associate {s} with {o}",
    "{s} and {o} appear together in the news",
    "a story about {s} also mentions {o}",
]

ANCHOR = ("Toulouse", "twin_city", "Atlanta")

_ONSETS = ["b", "br", "c", "ch", "d", "dr", "f", "g", "gr", "h", "j", "k", "kr", "l",
           "m", "n", "p", "pr", "r", "s", "st", "t", "tr", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "", "n", "r", "s", "l"]


class SizingError(ValueError):
    pass


class TemplateError(ValueError):
    pass


class WorldFormatError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_subjects: int = 300
    n_relations: int = 6
    n_objects: int = 20
    templates_per_relation: int = 4
    n_query_templates: int = 2
    zipf_exponent: float = 1.0
    confounder_rate: float = 0.15
    alias_rate: float = 0.05
    vocab_size: int = 2500
    seed: int = 0

    def __post_init__(self):
        if min(self.n_subjects, self.n_relations, self.n_objects, self.templates_per_relation,
               self.n_query_templates, self.vocab_size) <= 0:
            raise ValueError("world counts must be positive")
        if self.n_relations > len(RELATIONS):
            raise ValueError(f"at most {len(RELATIONS)} relations available")
        if not 3 <= self.templates_per_relation <= 4:
            raise ValueError("templates_per_relation must be 3 or 4")
        if self.n_query_templates >= self.templates_per_relation:
            raise ValueError("need at least one held-out paraphrase template")
        if not 0.0 <= self.confounder_rate <= 1.0 or not 0.0 <= self.alias_rate <= 1.0:
            raise ValueError("rates must lie in [0, 1]")


@dataclass
class CorpusConfig:
    n_sentences: int = 40000
    confounder_mix: float = 0.5
    alias_use: float = 0.3
    seed: int = 1


@dataclass(frozen=True)
class KnowledgeTriple:
    subject: str
    relation: str
    object: str


@dataclass
class Relation:
    name: str
    templates: list
    n_query: int

    @property
    def query_templates(self):
        return self.templates[:self.n_query]

    @property
    def paraphrase_templates(self):
        return self.templates[self.n_query:]


@dataclass
class World:
    config: WorldConfig
    relations: list
    subjects: list               # in Zipf rank order
    triples: list
    aliases: dict                # (subject, relation) -> sorted tuple of acceptable objects
    confounders: dict            # subject -> (relation, distractor object)
    vocab: Vocabulary = field(repr=False)

    def relation(self, name):
        return next(r for r in self.relations if r.name == name)

    def fact(self, subject, relation):
        return self._facts()[(subject, relation)]

    def _facts(self):
        return {(t.subject, t.relation): t.object for t in self.triples}

    def acceptable(self, subject, relation):
        return self.aliases.get((subject, relation), (self.fact(subject, relation),))

    def __eq__(self, other):
        return (isinstance(other, World) and self.config == other.config
                and self.relations == other.relations and self.subjects == other.subjects
                and self.triples == other.triples and self.aliases == other.aliases
                and self.confounders == other.confounders
                and self.vocab.tokens == other.vocab.tokens)


def _name_pool(rng, n, taken):
    names = []
    attempts = 0
    limit = 200 * n + 1000
    while len(names) < n:
        attempts += 1
        if attempts > limit:
            raise SizingError(f"name pool exhausted after {len(names)} of {n} names")
        k = rng.integers(2, 4)
        word = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                       + _CODAS[rng.integers(len(_CODAS))] for _ in range(k))
        word = word.capitalize()
        if word in taken or len(word) > 14:
            continue
        taken.add(word)
        names.append(word)
    return names


def generate_world(cfg: WorldConfig) -> World:
    rng = np.random.default_rng(cfg.seed)
    rels = [Relation(name, list(tpls[:cfg.templates_per_relation]), cfg.n_query_templates)
            for name, tpls in RELATIONS[:cfg.n_relations]]
    template_words = set()
    for r in rels:
        for t in r.templates:
            template_words.update(w for w in t.split() if w != "{s}")
    for t in DISTRACTOR_TEMPLATES:
        template_words.update(w for w in t.split() if w not in ("{s}", "{o}"))
    taken = set(template_words) | set(SPECIAL_TOKENS) | {ANCHOR[0], ANCHOR[2]}
    taken |= {w.capitalize() for w in template_words}

    # subjects: 1-3 words, every word unique to its subject
    n_words = rng.choice([1, 2, 3], size=cfg.n_subjects, p=[0.5, 0.35, 0.15])
    n_words[0] = 1
    pool = _name_pool(rng, int(n_words[1:].sum()), taken)
    subjects = [ANCHOR[0]]
    at = 0
    for k in n_words[1:]:
        subjects.append(" ".join(pool[at:at + k]))
        at += k

    objects = {}
    anchor_rel = rels[0].name == ANCHOR[1]
    for i, r in enumerate(rels):
        names = _name_pool(rng, cfg.n_objects - (1 if i == 0 and anchor_rel else 0), taken)
        objects[r.name] = ([ANCHOR[2]] + names) if i == 0 and anchor_rel else names

    triples = []
    for si, s in enumerate(subjects):
        for r in rels:
            o = objects[r.name][rng.integers(cfg.n_objects)]
            if si == 0 and r.name == ANCHOR[1]:
                o = ANCHOR[2]
            triples.append(KnowledgeTriple(s, r.name, o))
    facts = {(t.subject, t.relation): t.object for t in triples}

    # alias names for a fraction of (s, r) pairs
    alias_pairs = [k for k in facts if rng.random() < cfg.alias_rate]
    alias_names = _name_pool(rng, len(alias_pairs), taken)
    aliases = {k: (facts[k],) for k in facts}
    for k, a in zip(alias_pairs, alias_names):
        aliases[k] = tuple(sorted((facts[k], a)))

    confounders = {}
    n_conf = int(round(cfg.confounder_rate * cfg.n_subjects))
    for si in sorted(rng.choice(cfg.n_subjects, size=n_conf, replace=False).tolist()):
        s = subjects[si]
        r = rels[rng.integers(len(rels))].name
        choices = [o for o in objects[r] if o != facts[(s, r)]]
        confounders[s] = (r, choices[rng.integers(len(choices))])

    used = list(SPECIAL_TOKENS) + sorted(template_words)
    for s in subjects:
        used.extend(s.split())
    for r in rels:
        used.extend(objects[r.name])
    used.extend(alias_names)
    n_fill = cfg.vocab_size - len(used)
    if n_fill < 0:
        raise SizingError(f"vocab_size={cfg.vocab_size} smaller than the {len(used)} words needed")
    fillers = _name_pool(rng, n_fill, taken)
    lower = rng.random(n_fill) < 0.5
    fillers = [w.lower() if lw else w for w, lw in zip(fillers, lower)]
    vocab = Vocabulary(used + fillers)
    return World(cfg, rels, subjects, triples, aliases, confounders, vocab)


# -- world file ------------------------------------------------------------------

WORLD_HEADER = "#hallucitrace-world\t1"


def dump_world(world: World) -> str:
    lines = [WORLD_HEADER,
             "config\t" + json.dumps(dataclasses.asdict(world.config), sort_keys=True)]
    for r in world.relations:
        lines.append(f"relation\t{r.name}\t{r.n_query}")
        for i, t in enumerate(r.templates):
            lines.append(f"template\t{r.name}\t{i}\t{t}")
    for rank, s in enumerate(world.subjects):
        lines.append(f"subject\t{rank}\t{s}")
    for t in world.triples:
        lines.append(f"triple\t{t.subject}\t{t.relation}\t{t.object}")
    for (s, r), objs in world.aliases.items():
        if len(objs) > 1:
            lines.append(f"alias\t{s}\t{r}\t{'|'.join(objs)}")
    for s, (r, d) in world.confounders.items():
        lines.append(f"confounder\t{s}\t{r}\t{d}")
    for i, tok in enumerate(world.vocab.tokens):
        lines.append(f"vocab\t{i}\t{tok}")
    return "\n".join(lines) + "\n"


def parse_world(text: str) -> World:
    lines = text.splitlines()
    if not lines or lines[0] != WORLD_HEADER:
        raise WorldFormatError("missing world file header")
    cfg = None
    rels, subjects, triples, tokens = [], [], [], []
    alias_rows, confounders = {}, {}
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        tag = parts[0]
        try:
            if tag == "config":
                cfg = WorldConfig(**json.loads(parts[1]))
            elif tag == "relation":
                rels.append(Relation(parts[1], [], int(parts[2])))
            elif tag == "template":
                rel = next(r for r in rels if r.name == parts[1])
                if int(parts[2]) != len(rel.templates):
                    raise WorldFormatError(f"line {n}: template index out of order")
                rel.templates.append(parts[3])
            elif tag == "subject":
                if int(parts[1]) != len(subjects):
                    raise WorldFormatError(f"line {n}: subject rank out of order")
                subjects.append(parts[2])
            elif tag == "triple":
                triples.append(KnowledgeTriple(parts[1], parts[2], parts[3]))
            elif tag == "alias":
                alias_rows[(parts[1], parts[2])] = tuple(parts[3].split("|"))
            elif tag == "confounder":
                confounders[parts[1]] = (parts[2], parts[3])
            elif tag == "vocab":
                if int(parts[1]) != len(tokens):
                    raise WorldFormatError(f"line {n}: vocab ids not dense")
                tokens.append(parts[2])
            else:
                raise WorldFormatError(f"line {n}: unknown record {tag!r}")
        except (IndexError, ValueError, StopIteration) as e:
            if isinstance(e, WorldFormatError):
                raise
            raise WorldFormatError(f"line {n}: malformed {tag!r} record") from e
    if cfg is None:
        raise WorldFormatError("missing config record")
    aliases = {(t.subject, t.relation): (t.object,) for t in triples}
    aliases.update(alias_rows)
    return World(cfg, rels, subjects, triples, aliases, confounders, Vocabulary(tokens))


def save_world(world, path):
    Path(path).write_text(dump_world(world), encoding="utf-8")


def load_world(path):
    return parse_world(Path(path).read_text(encoding="utf-8"))


# -- corpus ------------------------------------------------------------------------

@dataclass
class Corpus:
    sentences: list
    fact_counts: Counter         # (subject, relation) -> mentions
    distractor_counts: Counter   # (subject, distractor) -> mentions
    subject_counts: Counter      # subject -> sentences mentioning it


def zipf_probs(n, exponent):
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def generate_corpus(world: World, cfg: CorpusConfig) -> Corpus:
    rng = np.random.default_rng(cfg.seed)
    p = zipf_probs(len(world.subjects), world.config.zipf_exponent)
    subj_idx = rng.choice(len(world.subjects), size=cfg.n_sentences, p=p)
    facts = world._facts()
    sentences = []
    fact_counts, distractor_counts, subject_counts = Counter(), Counter(), Counter()
    for si in subj_idx:
        s = world.subjects[si]
        subject_counts[s] += 1
        conf = world.confounders.get(s)
        if conf is not None and rng.random() < cfg.confounder_mix:
            tpl = DISTRACTOR_TEMPLATES[rng.integers(len(DISTRACTOR_TEMPLATES))]
            sentences.append(tpl.format(s=s, o=conf[1]))
            distractor_counts[(s, conf[1])] += 1
            continue
        rel = world.relations[rng.integers(len(world.relations))]
        tpl = rel.templates[rng.integers(len(rel.templates))]
        objs = world.aliases[(s, rel.name)]
        obj = facts[(s, rel.name)]
        if len(objs) > 1 and rng.random() < cfg.alias_use:
            obj = next(o for o in objs if o != obj)
        sentences.append(tpl.format(s=s) + " " + obj)
        fact_counts[(s, rel.name)] += 1
    return Corpus(sentences, fact_counts, distractor_counts, subject_counts)


def save_corpus(corpus: Corpus, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "corpus.txt").write_text("\n".join(corpus.sentences) + "\n", encoding="utf-8")
    rows = ["kind\tsubject\tkey\tcount"]
    rows += [f"fact\t{s}\t{r}\t{c}" for (s, r), c in sorted(corpus.fact_counts.items())]
    rows += [f"distractor\t{s}\t{o}\t{c}" for (s, o), c in sorted(corpus.distractor_counts.items())]
    rows += [f"subject\t{s}\t-\t{c}" for s, c in sorted(corpus.subject_counts.items())]
    (d / "corpus_manifest.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    sentences = (d / "corpus.txt").read_text(encoding="utf-8").splitlines()
    fc, dc, sc = Counter(), Counter(), Counter()
    for line in (d / "corpus_manifest.tsv").read_text(encoding="utf-8").splitlines()[1:]:
        kind, s, key, c = line.split("\t")
        {"fact": fc, "distractor": dc}.get(kind, sc)[(s, key) if kind != "subject" else s] = int(c)
    return Corpus(sentences, fc, dc, sc)


# -- queries -------------------------------------------------------------------------

@dataclass
class Query:
    """A cloze prompt for one fact; ``predicted`` is filled by evaluation."""
    qid: str
    subject: str
    relation: str
    template: int
    prompt: str
    tokens: list
    subject_span: tuple          # (first, last) token positions
    true_object: str
    o: int                       # id of the first token of the true object
    predicted: int | None = None

    @property
    def last(self):
        return len(self.tokens) - 1

    @property
    def s_first(self):
        return self.subject_span[0]

    @property
    def s_last(self):
        return self.subject_span[1]


def render(template, subject, vocab):
    if template.count("{s}") != 1:
        raise TemplateError(f"template must contain exactly one subject slot: {template!r}")
    words = template.split()
    at = words.index("{s}")
    n = len(subject.split())
    text = template.format(s=subject)
    return text, vocab.tokenize(text), (at, at + n - 1)


def build_query_set(world: World, which="query"):
    """One prompt per (fact, template); ``which`` is ``query``, ``paraphrase`` or ``all``."""
    out = []
    vocab = world.vocab
    for t in world.triples:
        rel = world.relation(t.relation)
        idxs = {"query": range(rel.n_query),
                "paraphrase": range(rel.n_query, len(rel.templates)),
                "all": range(len(rel.templates))}[which]
        for ti in idxs:
            text, ids, span = render(rel.templates[ti], t.subject, vocab)
            out.append(Query(f"{world.subjects.index(t.subject)}:{t.relation}:{ti}", t.subject,
                             t.relation, ti, text, ids, span, t.object,
                             vocab.id(t.object.split()[0])))
    return out


# -- evaluation ------------------------------------------------------------------------

@dataclass
class EvalOutcome:
    qid: str
    predicted: str | None
    label: str                   # factual | hallucinating | discarded


def matches(token, acceptable, rule="prefix"):
    """Whether a predicted token names one of the acceptable objects."""
    for obj in acceptable:
        words = obj.split()
        if (rule == "prefix" and token == words[0]) or (rule == "suffix" and token == words[-1]):
            return True
    if rule not in ("prefix", "suffix"):
        raise ValueError(f"unknown match rule {rule!r}")
    return False


def final_logits(model, token_lists, batch_size=256):
    """Final-position logits for many prompts, batched by length."""
    out = [None] * len(token_lists)
    by_len = {}
    for i, toks in enumerate(token_lists):
        by_len.setdefault(len(toks), []).append(i)
    with tm.no_grad():
        for n in sorted(by_len):
            idx = by_len[n]
            for k in range(0, len(idx), batch_size):
                chunk = idx[k:k + batch_size]
                batch = np.array([token_lists[i] for i in chunk], dtype=np.int64)
                logits, _ = model.forward(batch)
                for j, i in enumerate(chunk):
                    out[i] = logits.data[j, -1].astype(np.float64)
    return out


def classify_prediction(logits_row, vocab, acceptable, rule="prefix", top=50):
    caps = vocab.capitalized
    top_ids = tm.topk(logits_row, top)
    if not caps[top_ids].any():
        return None, "discarded"
    masked = np.where(caps, logits_row, -np.inf)
    pred = int(np.argmax(masked))
    label = "factual" if matches(vocab.tokens[pred], acceptable, rule) else "hallucinating"
    return pred, label


def evaluate_queries(model, queries, world: World, rule="prefix", aliases=None):
    """Label every query; returns ``(outcomes, hallucinating queries)``."""
    aliases = aliases if aliases is not None else world.aliases
    rows = final_logits(model, [q.tokens for q in queries])
    outcomes, halluc = [], []
    for q, row in zip(queries, rows):
        acceptable = aliases.get((q.subject, q.relation), (q.true_object,))
        pred, label = classify_prediction(row, world.vocab, acceptable, rule)
        q.predicted = pred
        outcomes.append(EvalOutcome(q.qid, None if pred is None else world.vocab.tokens[pred], label))
        if label == "hallucinating":
            halluc.append(q)
    return outcomes, halluc


# -- remote alias resolution --------------------------------------------------------------

@dataclass
class EndpointConfig:
    """``url_template`` carries ``{subject}`` and ``{relation}`` placeholders."""
    url_template: str
    cache_path: str
    timeout: float = 5.0


_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9 '\-]*$")
_cache_lock = threading.Lock()


def parse_alias_response(body: bytes):
    """One object name per line; blank lines ignored.  Raises ValueError if malformed."""
    text = body.decode("utf-8")
    names = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not names or any(not _NAME_RE.match(n) for n in names):
        raise ValueError("malformed alias response")
    return names


def _read_cache(path):
    cache = {}
    p = Path(path)
    if p.exists():
        for line in p.read_text(encoding="utf-8").splitlines():
            s, r, objs = line.split("\t")
            cache[(s, r)] = tuple(objs.split("|")) if objs else ()
    return cache


def _append_cache(path, key, names):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "a", encoding="utf-8") as f:
        fcntl.flock(f, fcntl.LOCK_EX)
        try:
            f.write(f"{key[0]}\t{key[1]}\t{'|'.join(names)}\n")
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def resolve_aliases_remote(subject, relation, endpoint: EndpointConfig, offline: dict,
                           opener=urllib.request.urlopen):
    """Offline aliases merged with a remote lookup; never raises on remote failure."""
    key = (subject, relation)
    base = set(offline.get(key, ()))
    with _cache_lock:
        cached = _read_cache(endpoint.cache_path).get(key)
        if cached is not None:
            return tuple(sorted(base | set(cached)))
        url = endpoint.url_template.format(subject=urllib.parse.quote(subject),
                                           relation=urllib.parse.quote(relation))
        try:
            with opener(url, timeout=endpoint.timeout) as resp:
                names = parse_alias_response(resp.read())
        except Exception as e:   # network, HTTP, decode or format failure
            log.warning("alias lookup for %s/%s failed (%s); using offline map", subject, relation, e)
            return tuple(sorted(base))
        _append_cache(endpoint.cache_path, key, names)
    return tuple(sorted(base | set(names)))
