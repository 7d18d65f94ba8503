import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hallucitrace.dataset import Query
from hallucitrace.model import ModelConfig, Transformer

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


STEP_TOL, TOTAL_TOL = 1e-4, 1e-3
ADDITIVITY = {"passes": 0, "max_step": 0.0, "max_total": 0.0, "violations": [], "pending": []}


def residual_errors(tr):
    """Relative error of layer-by-layer and whole-stack residual reconstruction."""
    emb = tr.embeddings[..., None, :, :]
    prev = np.concatenate([emb, tr.resid[..., :-1, :, :]], axis=-3)
    recon = prev + tr.attn + tr.mlp
    step = np.abs(recon - tr.resid).max() / max(np.abs(tr.resid).max(), 1e-300)
    last = tr.resid[..., -1, :, :]
    final = tr.embeddings + tr.attn.sum(-3) + tr.mlp.sum(-3)
    total = np.abs(final - last).max() / max(np.abs(last).max(), 1e-300)
    return float(step), float(total)


@pytest.fixture(scope="session", autouse=True)
def additivity_hook():
    """Every traced forward pass in the suite must rebuild its residual stream from the parts."""
    original = Transformer.forward

    def forward(self, tokens, interventions=None, capture=False):
        out = original(self, tokens, interventions, capture)
        patched_resid = interventions is not None and any(
            getattr(i, "kind", None) == "residual" for i in interventions)
        if capture and not patched_resid:
            step, total = residual_errors(out[1])
            ADDITIVITY["passes"] += 1
            ADDITIVITY["max_step"] = max(ADDITIVITY["max_step"], step)
            ADDITIVITY["max_total"] = max(ADDITIVITY["max_total"], total)
            if step > STEP_TOL or total > TOTAL_TOL:
                ADDITIVITY["pending"].append((step, total))
        return out

    mp = pytest.MonkeyPatch()
    mp.setattr(Transformer, "forward", forward)
    yield
    mp.undo()


@pytest.fixture(autouse=True)
def check_additivity(request):
    # violations from session fixtures land on the first test that requested them
    yield
    found = ADDITIVITY["pending"][:]
    if found:
        ADDITIVITY["pending"].clear()
        ADDITIVITY["violations"].append((request.node.nodeid, found))
        pytest.fail(f"residual additivity broken: {found[:3]}")


ACCEPTANCE = []


def report(criterion, ok, detail):
    """Print and remember one acceptance verdict line."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
    a = ADDITIVITY
    ok = not a["violations"]
    terminalreporter.write_line(
        f"{'PASS' if ok else 'FAIL'} criterion 2 (suite-wide): {a['passes']} traced passes, "
        f"max step error {a['max_step']:.2e} <= {STEP_TOL}, max total error {a['max_total']:.2e} <= {TOTAL_TOL}")


def make_model(n_layers=2, d=32, heads=4, vocab=40, seq=16, seed=0, dtype=np.float64):
    cfg = ModelConfig(n_layers=n_layers, d_model=d, n_heads=heads, vocab_size=vocab,
                      max_seq_len=seq, seed=seed)
    model = Transformer(cfg, dtype=dtype)
    # break the symmetric init so every parameter carries signal
    rng = np.random.default_rng(seed + 100)
    for p in model.parameters():
        p.data = (p.data + rng.normal(0, 0.3, p.data.shape)).astype(dtype)
    return model


def make_query(tokens, span, o, o_prime, qid="q0"):
    return Query(qid, "S", "rel", 0, "", list(tokens), span, "O", o, o_prime)


@pytest.fixture
def model2():
    return make_model()


@pytest.fixture
def query2():
    return make_query([5, 6, 7, 8, 9, 10], (1, 2), o=3, o_prime=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


STAGES = ("world gen", "corpus gen", "train", "eval", "trace", "classify", "lens esp", "lens rank",
          "manifest", "mitigate train", "mitigate eval", "ckpt-esp", "report bundle")


def tiny_config():
    """A seconds-scale config that exercises every pipeline stage."""
    from dataclasses import replace
    from hallucitrace.config import RunConfig
    from hallucitrace.dataset import CorpusConfig, WorldConfig
    from hallucitrace.train import TrainConfig
    c = RunConfig()
    c = replace(c, world=WorldConfig(n_subjects=30, n_objects=6, vocab_size=200),
                corpus=CorpusConfig(n_sentences=3000),
                model=ModelConfig(n_layers=2, d_model=32, n_heads=2, max_seq_len=64, vocab_size=200),
                train=TrainConfig(epochs=6, batch_size=32, lr=1e-2, warmup_steps=10, checkpoint_every=200))
    return replace(c, trace=replace(c.trace, n_noises=3, max_queries=6),
                   lens=replace(c.lens, max_factual=10, n_distractors=10),
                   manifest=replace(c.manifest, pool_size=5),
                   mitigate=replace(c.mitigate, epochs=2, lr=0.01))


def run_cli(*argv):
    from hallucitrace.cli import main
    return main(list(argv))


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """``(config path, out dir)`` of a finished tiny pipeline run."""
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(tiny_config().to_json())
    out = root / "out"
    for stage in STAGES:
        assert run_cli(*stage.split(), "--config", str(cfg_path), "--out", str(out)) == 0, stage
    return cfg_path, out
