import io
import logging

import numpy as np
import pytest

from hallucitrace import tensor as tm
from hallucitrace.dataset import (CorpusConfig, EndpointConfig, SizingError, TemplateError,
                                  WorldConfig, WorldFormatError, build_query_set, classify_prediction,
                                  dump_world, evaluate_queries, generate_corpus, generate_world,
                                  load_corpus, load_world, matches, parse_alias_response, parse_world,
                                  render, resolve_aliases_remote, save_corpus, save_world)
from tests.conftest import make_model

SMALL = dict(n_subjects=20, n_objects=5, vocab_size=200)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(**SMALL))


def test_same_seed_same_world_file():
    a = dump_world(generate_world(WorldConfig(**SMALL)))
    b = dump_world(generate_world(WorldConfig(**SMALL)))
    c = dump_world(generate_world(WorldConfig(**SMALL, seed=1)))
    assert a == b and a != c


def test_many_to_one_and_counts(world):
    pairs = [(t.subject, t.relation) for t in world.triples]
    assert len(pairs) == len(set(pairs)) == 20 * 6
    for r in world.relations:
        assert sum(t.relation == r.name for t in world.triples) == 20
    # several subjects share an object
    objs = [t.object for t in world.triples if t.relation == world.relations[0].name]
    assert len(set(objs)) < len(objs)


def test_names_are_capitalized(world):
    for t in world.triples:
        assert all(w[0].isupper() for w in t.subject.split())
        assert t.object[0].isupper() and " " not in t.object
        assert 1 <= len(t.subject.split()) <= 3


def test_alias_map_contains_true_object(world):
    for t in world.triples:
        assert t.object in world.acceptable(t.subject, t.relation)


def test_anchor_fact_present(world):
    assert world.fact("Toulouse", "twin_city") == "Atlanta"
    q = next(q for q in build_query_set(world) if q.subject == "Toulouse" and q.relation == "twin_city"
             and q.template == 0)
    assert q.prompt == "Toulouse is the twin city of"
    assert len(q.tokens) == 6 and q.subject_span == (0, 0)
    assert world.vocab.tokens[q.o] == "Atlanta"


def test_world_file_round_trip(tmp_path, world):
    save_world(world, tmp_path / "w.tsv")
    back = load_world(tmp_path / "w.tsv")
    assert back == world
    assert dump_world(back) == dump_world(world)


@pytest.mark.parametrize("text", ["", "#other\t1\n", "#hallucitrace-world\t1\nbogus\tx\n",
                                  "#hallucitrace-world\t1\nsubject\t3\tA\n"])
def test_world_file_errors(text):
    with pytest.raises(WorldFormatError):
        parse_world(text)


def test_sizing_error():
    with pytest.raises(SizingError):
        generate_world(WorldConfig(n_subjects=20, n_objects=5, vocab_size=50))


@pytest.mark.parametrize("kw", [dict(n_subjects=0), dict(confounder_rate=1.5),
                                dict(templates_per_relation=2), dict(n_query_templates=4)])
def test_world_config_validation(kw):
    with pytest.raises(ValueError):
        WorldConfig(**kw)


# -- corpus ----------------------------------------------------------------------------------

def test_corpus_manifest_sums_and_round_trip(tmp_path, world):
    c = generate_corpus(world, CorpusConfig(n_sentences=3000))
    assert sum(c.fact_counts.values()) + sum(c.distractor_counts.values()) == len(c.sentences)
    assert sum(c.subject_counts.values()) == 3000
    save_corpus(c, tmp_path)
    back = load_corpus(tmp_path)
    assert back.sentences == c.sentences and back.fact_counts == c.fact_counts
    assert back.distractor_counts == c.distractor_counts and back.subject_counts == c.subject_counts


def test_no_confounders_no_distractors():
    w = generate_world(WorldConfig(**SMALL, confounder_rate=0.0))
    c = generate_corpus(w, CorpusConfig(n_sentences=2000))
    assert not w.confounders and not c.distractor_counts


def test_subject_frequencies_follow_zipf():
    w = generate_world(WorldConfig())
    c = generate_corpus(w, CorpusConfig())
    n = len(c.sentences)
    ranks = np.arange(1, len(w.subjects) + 1)
    oracle = (1.0 / ranks) / (1.0 / ranks).sum()
    observed = np.array([c.subject_counts[s] for s in w.subjects]) / n
    # well-sampled head ranks: relative error within 5%
    assert np.all(np.abs(observed[:3] / oracle[:3] - 1) <= 0.05)
    # whole histogram: cumulative share within 5%
    assert np.abs(np.cumsum(observed) - np.cumsum(oracle)).max() <= 0.05


# -- queries ---------------------------------------------------------------------------------

def test_render_subject_span(world):
    text, ids, span = render("{s} is the twin city of", "Tonginprou Lismeprur", world.vocab)
    assert span == (0, 1) and len(ids) == 7
    assert world.vocab.detokenize(ids) == text


@pytest.mark.parametrize("tpl", ["is the twin city of", "{s} and {s} are twins"])
def test_render_template_error(world, tpl):
    with pytest.raises(TemplateError):
        render(tpl, "Toulouse", world.vocab)


def test_query_sets_split_templates(world):
    q = build_query_set(world, "query")
    p = build_query_set(world, "paraphrase")
    assert len(q) == 120 * 2 and len(p) == 120 * 2
    assert {x.template for x in q} == {0, 1} and {x.template for x in p} == {2, 3}
    for x in q:
        assert x.tokens == world.vocab.tokenize(x.prompt)
        a, b = x.subject_span
        assert world.vocab.detokenize(x.tokens[a:b + 1]) == x.subject


# -- evaluation ------------------------------------------------------------------------------

def test_match_rules():
    assert matches("New", ["New York"]) and not matches("York", ["New York"])
    assert matches("York", ["New York"], "suffix")
    with pytest.raises(ValueError):
        matches("x", ["y"], "infix")


def test_classify_prediction_cases(world):
    v = world.vocab
    row = np.zeros(len(v))
    atl = v.id("Atlanta")
    row[atl] = 5.0
    assert classify_prediction(row, v, ("Atlanta",)) == (atl, "factual")
    assert classify_prediction(row, v, ("Babur", "Atlanta"))[1] == "factual"
    assert classify_prediction(row, v, ("Babur",))[1] == "hallucinating"
    # no capitalized token in the top 50 -> discarded
    lower = np.array([not c for c in v.capitalized])
    row2 = np.where(lower, 10.0, 0.0)
    assert lower.sum() >= 50
    assert classify_prediction(row2, v, ("Atlanta",)) == (None, "discarded")


def brute_force_label(logits_row, words, acceptable):
    order = sorted(range(len(words)), key=lambda i: (-logits_row[i], i))
    if not any(words[i][0].isupper() for i in order[:50]):
        return "discarded"
    best = next(i for i in order if words[i][0].isupper())
    return "factual" if any(words[best] == a.split()[0] for a in acceptable) else "hallucinating"


def test_evaluation_matches_full_vocab_oracle(world):
    model = make_model(vocab=len(world.vocab), seq=16, seed=7)
    queries = build_query_set(world)[:60]
    outcomes, halluc = evaluate_queries(model, queries, world)
    assert len(outcomes) == len(queries)
    for q, out in zip(queries, outcomes):
        with tm.no_grad():
            logits, _ = model.forward(q.tokens)
        expected = brute_force_label(logits.data[-1], world.vocab.tokens,
                                     world.acceptable(q.subject, q.relation))
        assert out.label == expected
    assert {q.qid for q in halluc} == {o.qid for o in outcomes if o.label == "hallucinating"}


def test_partition_and_determinism(world):
    model = make_model(vocab=len(world.vocab), seq=16, seed=8)
    queries = build_query_set(world, "all")
    a, _ = evaluate_queries(model, queries, world)
    b, _ = evaluate_queries(model, queries, world)
    assert [(o.qid, o.label, o.predicted) for o in a] == [(o.qid, o.label, o.predicted) for o in b]
    assert all(o.label in ("factual", "hallucinating", "discarded") for o in a)
    assert len({o.qid for o in a}) == len(queries)


# -- remote alias resolution ------------------------------------------------------------------

class FakeOpener:
    def __init__(self, body=b"", exc=None):
        self.body, self.exc, self.urls = body, exc, []

    def __call__(self, url, timeout):
        self.urls.append(url)
        if self.exc:
            raise self.exc
        return io.BytesIO(self.body)


@pytest.fixture
def endpoint(tmp_path):
    return EndpointConfig("http://aliases.test/{subject}/{relation}", str(tmp_path / "cache.tsv"))


OFFLINE = {("Babur", "capital"): ("Vemar",)}


def test_remote_merge_and_cache(endpoint):
    op = FakeOpener(b"Kesto\nVemar\n\n")
    got = resolve_aliases_remote("Babur", "capital", endpoint, OFFLINE, opener=op)
    assert got == ("Kesto", "Vemar") and len(op.urls) == 1
    assert op.urls[0] == "http://aliases.test/Babur/capital"
    again = FakeOpener(exc=AssertionError("network touched"))
    assert resolve_aliases_remote("Babur", "capital", endpoint, OFFLINE, opener=again) == got
    assert again.urls == []


def test_remote_malformed_body_falls_back(endpoint, caplog):
    with caplog.at_level(logging.WARNING):
        got = resolve_aliases_remote("Babur", "capital", endpoint, OFFLINE,
                                     opener=FakeOpener(b"<html>oops</html>"))
    assert got == ("Vemar",)
    assert "failed" in caplog.text


def test_remote_timeout_falls_back(endpoint):
    got = resolve_aliases_remote("Babur", "capital", endpoint, OFFLINE,
                                 opener=FakeOpener(exc=TimeoutError()))
    assert got == ("Vemar",)


def test_parse_alias_response():
    assert parse_alias_response(b"A\nB b\n") == ["A", "B b"]
    for bad in (b"", b"\n\n", b"ok\n{json}"):
        with pytest.raises(ValueError):
            parse_alias_response(bad)
