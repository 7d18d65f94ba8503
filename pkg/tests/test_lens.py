import math

import numpy as np
import pytest

from hallucitrace import tensor as tm
from hallucitrace.checkpoint import write_checkpoint
from hallucitrace.lens import (attn_extracted_info, checkpoint_trajectory, distractor_set, esp, esp_grid,
                               esp_sites, group_esp_profile, logit_lens, lower_upper_esp,
                               min_object_rank, mlp_enriched_info, object_ranks, rank_threshold)
from tests.conftest import make_model, make_query


def capture(model, q):
    with tm.no_grad():
        logits, trace = model.forward(q.tokens, capture=True)
    return logits.data, trace


@pytest.fixture
def q():
    return make_query([5, 6, 7, 8, 9, 10], (1, 2), o=3, o_prime=4)


def ln_oracle(z, g, b, eps=1e-5):
    mu = sum(z) / len(z)
    var = sum((x - mu) ** 2 for x in z) / len(z)
    return [(x - mu) / math.sqrt(var + eps) * gi + bi for x, gi, bi in zip(z, g, b)]


def test_esp_is_dot_product(rng):
    E = rng.normal(size=(10, 6))
    z = rng.normal(size=6)
    assert esp(z, E, 4) == pytest.approx(sum(a * b for a, b in zip(z, E[4])), abs=1e-12)
    assert esp(np.zeros(6), E, 4) == 0.0
    np.testing.assert_allclose(esp(np.stack([z, 2 * z]), E, 4), [esp(z, E, 4), 2 * esp(z, E, 4)])


def test_logit_lens_matches_formula(model2, rng):
    z = rng.normal(size=32)
    hz = ln_oracle(z.tolist(), model2["ln_f.g"].data, model2["ln_f.b"].data)
    logits = [sum(h * e for h, e in zip(hz, row)) for row in model2["unembed"].data]
    m = max(logits)
    denom = sum(math.exp(x - m) for x in logits)
    np.testing.assert_allclose(logit_lens(z, model2), [math.exp(x - m) / denom for x in logits],
                               atol=1e-12)


def test_logit_lens_of_final_residual_is_the_output(model2, q):
    logits, tr = capture(model2, q)
    p = logit_lens(tr.resid[-1, -1], model2)
    np.testing.assert_allclose(p, model2.next_token_distribution(q.tokens), atol=1e-12)


def test_object_ranks_match_full_sort(model2, q):
    _, tr = capture(model2, q)
    ranks = object_ranks(tr, q.s_last, q.o, model2)
    E = model2["unembed"].data
    for layer in range(2):
        p = logit_lens(tr.mlp[layer, q.s_last], model2)
        order = sorted(range(len(p)), key=lambda t: -p[t])
        assert ranks[layer] == order.index(q.o) + 1
        # rank computed on logits agrees with the lens distribution
        scores = [sum(a * b for a, b in zip(ln_oracle(tr.mlp[layer, q.s_last], model2["ln_f.g"].data,
                                                      model2["ln_f.b"].data), E[t])) for t in range(40)]
        assert ranks[layer] == 1 + sum(s > scores[q.o] for s in scores)


def test_min_object_rank_and_threshold(model2, q):
    assert rank_threshold(2500) == 25 and rank_threshold(40) == 0 and rank_threshold(40, 0.1) == 4
    _, tr = capture(model2, q)
    rec = min_object_rank(tr, q, model2, frac=0.5)
    assert rec.rho == rec.ranks.min() and 1 <= rec.rho <= 40
    assert rec.passed == (rec.rho <= 20)
    best = int(np.argmax(logit_lens(tr.mlp[-1, q.s_last], model2)))
    q2 = make_query(q.tokens, q.subject_span, o=best, o_prime=q.predicted)
    assert min_object_rank(tr, q2, model2).rho == 1


def test_enriched_and_extracted_information(model2, q):
    _, tr = capture(model2, q)
    E = model2["unembed"].data
    for layer in (1, 2):
        hz = ln_oracle(tr.mlp[layer - 1, q.s_last], model2["ln_f.g"].data, model2["ln_f.b"].data)
        im = (np.array(hz) @ E.T).tolist()
        assert mlp_enriched_info(tr, layer, q.s_last, q.o, model2) == pytest.approx(im[q.o], abs=1e-9)
        others = distractor_set(tr, layer, q.s_last, q.o, model2, k=5)
        expected = sorted((t for t in range(40) if t != q.o), key=lambda t: (-im[t], t))[:5]
        assert others == expected
        a = tr.attn[layer - 1, q.last]
        direction = E[q.o] - E[others].mean(axis=0)
        assert attn_extracted_info(tr, layer, q.last, q.o, others, model2) == pytest.approx(
            float(a @ direction), abs=1e-9)
    with pytest.raises(ValueError):
        attn_extracted_info(tr, 1, q.last, q.o, [], model2)


def test_distractor_set_size_and_exclusion(model2, q):
    _, tr = capture(model2, q)
    d = distractor_set(tr, 1, q.s_last, q.o, model2, k=100)
    assert len(d) == 39 and q.o not in d


def test_esp_grid_and_profiles(model2):
    qs = [make_query([5, 6, 7, 8, 9, 10], (1, 2), 3, 4, "a"),
          make_query([11, 12, 13, 14], (0, 0), 7, 4, "b"),
          make_query([1, 2, 3, 4, 5], (1, 3), 9, 4, "c")]
    items = [(x, capture(model2, x)[1]) for x in qs]
    E = model2["unembed"].data
    values, counts = esp_grid(items, E)
    assert counts.tolist() == [3, 1, 3, 3, 3]
    # mid-subject cell only comes from query "c"
    sites = esp_sites(items[2][1], qs[2], E)
    np.testing.assert_allclose(values[:, :, 1], sites[:, :, 2], atol=1e-12)
    last = np.mean([esp_sites(t, x, E)[:, :, x.last] for x, t in items], axis=0)
    np.testing.assert_allclose(values[:, :, 4], last, atol=1e-12)

    prof = group_esp_profile({"factual": items[:2], "late_site": items[2:], "early_site": []}, E)
    assert [(p.group, p.kind, p.count) for p in prof] == [
        ("factual", "mlp_out", 2), ("factual", "attn_out", 2),
        ("late_site", "mlp_out", 1), ("late_site", "attn_out", 1)]
    mlp = np.mean([[t.mlp[l, x.s_last] @ E[x.o] for l in range(2)] for x, t in items[:2]], axis=0)
    np.testing.assert_allclose(prof[0].values, mlp, atol=1e-12)
    lo, up = lower_upper_esp(items[0][1], qs[0], E)
    assert lo == pytest.approx(items[0][1].mlp[0, 2] @ E[3])
    assert up == pytest.approx(items[0][1].attn[1, 5] @ E[3])


def test_checkpoint_trajectory(tmp_path, q, caplog):
    for i, step in enumerate((0, 100, 200, 300, 400)):
        write_checkpoint(tmp_path, step, make_model(seed=i, dtype=np.float32))
    (tmp_path / "step-000300.htw").write_bytes(b"HTRC")
    groups = {"early_site": [q], "late_site": [make_query([1, 2, 3, 4], (0, 1), 5, 6)], "factual": []}
    points, skipped = checkpoint_trajectory(tmp_path, groups)
    assert skipped == [str(tmp_path / "step-000300.htw")]
    assert "skipping checkpoint" in caplog.text
    assert [(p.step, p.group) for p in points] == [
        (s, g) for s in (0, 100, 200, 400) for g in ("early_site", "late_site")]
    m = make_model(seed=4, dtype=np.float32).astype(np.float64)
    _, tr = capture(m, q)
    lo, up = lower_upper_esp(tr, q, m["unembed"].data)
    assert points[-2].lower_mlp == pytest.approx(lo) and points[-2].upper_attn == pytest.approx(up)
