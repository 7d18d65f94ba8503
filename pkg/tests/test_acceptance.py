"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 and 7 read the recorded default-config run in ``results/desk_run``
(or the directory named by ``HALLUCITRACE_DESK_RUN``); ``demos/desk_run.py``
regenerates it.
"""
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from hallucitrace import tensor as tm
from hallucitrace.checkpoint import load_weights, save_weights
from hallucitrace.config import RunConfig
from hallucitrace.dataset import generate_world, load_world, save_world
from hallucitrace.intervene import InterventionSet, PatchState, default_sigma
from hallucitrace.mitigate import MhmConfig, combined_loss, mhm_loss, nll_loss
from hallucitrace.pipeline import Run
from hallucitrace.reports import read_csv, read_json, write_csv
from hallucitrace.tracing import (TracingConfig, hallucination_run, mitigation_run, noise_seed,
                                  relative_ie, sample_mitigating_noises, sweep_sites)
from tests.conftest import ADDITIVITY, STAGES, STEP_TOL, TOTAL_TOL, make_model, report, \
    residual_errors, run_cli
from tests.test_tracing import halluc_query

DESK_RUN = Path(os.environ.get("HALLUCITRACE_DESK_RUN",
                               Path(__file__).resolve().parent.parent / "results" / "desk_run"))


def random_prompt(rng, vocab, n):
    tokens = [int(t) for t in rng.integers(1, vocab, size=n)]
    a = int(rng.integers(0, n - 2))
    return tokens, (a, int(rng.integers(a, n - 1)))


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_1_gradients_match_finite_differences():
    t0 = time.perf_counter()
    model = make_model(n_layers=2, d=32, heads=4, vocab=40)
    cfg = MhmConfig()
    x, y, y_prime = [1, 5, 9, 2, 30, 17], 7, 3
    losses = {"nll": lambda: nll_loss(model, x, y, cfg),
              "mhm": lambda: mhm_loss(model, x, y, y_prime, cfg),
              "combined": lambda: combined_loss(model, x, y, y_prime, cfg)}
    params = model.parameters()
    rng = np.random.default_rng(0)
    h, floor = 1e-5, 1e-3
    worst, details = 0.0, []
    for name, fn in losses.items():
        model.zero_grad()
        tm.backward(fn())
        grads = [p.grad.copy() for p in params]
        seen = set()
        while len(seen) < 200:
            k = int(rng.integers(len(params)))
            idx = tuple(int(rng.integers(s)) for s in params[k].shape)
            seen.add((k, idx))
        errs = []
        for k, idx in sorted(seen):
            p = params[k]
            old = p.data[idx]
            with tm.no_grad():
                p.data[idx] = old + h
                up = float(fn().data)
                p.data[idx] = old - h
                down = float(fn().data)
            p.data[idx] = old
            num, ana = (up - down) / (2 * h), float(grads[k][idx])
            errs.append(abs(num - ana) / max(abs(num), abs(ana), floor))
        details.append(f"{name} {max(errs):.1e}")
        worst = max(worst, max(errs))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 60
    report(1, ok, f"600 coordinates, max relative error {worst:.2e} <= 1e-6 "
                  f"({', '.join(details)}; denominator floored at {floor}), {elapsed:.1f}s < 60s")
    assert ok


# -- 2 ------------------------------------------------------------------------------------

def test_criterion_2_residual_additivity():
    rng = np.random.default_rng(2)
    step_max = total_max = 0.0
    n = 0
    for dtype in (np.float32, np.float64):
        for seed in range(5):
            model = make_model(n_layers=8, d=32, heads=4, vocab=60, seed=seed, dtype=dtype)
            for _ in range(4):
                tokens, _ = random_prompt(rng, 60, int(rng.integers(3, 16)))
                with tm.no_grad():
                    _, tr = model.forward(tokens, capture=True)
                step, total = residual_errors(tr)
                step_max, total_max, n = max(step_max, step), max(total_max, total), n + 1
    ok = step_max <= STEP_TOL and total_max <= TOTAL_TOL and not ADDITIVITY["violations"]
    report(2, ok, f"{n} dedicated passes (float32 and float64, 8 layers): step {step_max:.1e} <= 1e-4, "
                  f"total {total_max:.1e} <= 1e-3; every other traced pass is checked by the suite hook")
    assert ok


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_3_self_patch_has_zero_effect():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(50):
        model = make_model(n_layers=4, d=32, heads=4, vocab=50, seed=i % 5)
        tokens, span = random_prompt(rng, 50, int(rng.integers(4, 10)))
        q = halluc_query(model, tokens, span, rank=int(rng.integers(1, 6)), qid=f"q{i}")
        sigma = default_sigma(model)
        y, clean = hallucination_run(model, q)
        seed = noise_seed(0, q.qid, 0)
        y_star, noisy = mitigation_run(model, q, seed, sigma)
        kind = ("residual", "attn_out", "mlp_out")[int(rng.integers(3))]
        site = (kind, int(rng.integers(1, 5)), int(rng.integers(len(tokens))))
        # noisy pass fed its own state, and the clean pass fed its own state
        y_self, _ = mitigation_run(model, q, seed, sigma, patches=[PatchState(*site, noisy.site(*site))])
        with tm.no_grad():
            logits, _ = model.forward(q.tokens, InterventionSet([PatchState(*site, clean.site(*site))]))
        lp = tm.log_softmax(tm.Tensor(logits.data[-1])).data
        swept = sweep_sites(model, q, noisy, noisy)
        worst = max(worst, abs(y_self - y_star), abs(float(lp[q.predicted] - lp[q.o]) - y),
                    float(np.abs(swept - y_star).max()))
    ok = worst <= 1e-6
    report(3, ok, f"50 random (query, site) pairs, max |IE| of a self-patch {worst:.1e} <= 1e-6")
    assert ok


# -- 4 ------------------------------------------------------------------------------------

def restoration_gaps(model, q, y, clean, seeds, sigma):
    L, last = model.cfg.n_layers, len(q.tokens) - 1
    patch = PatchState("residual", L, last, clean.site("residual", L, last))
    return [abs(mitigation_run(model, q, s, sigma, patches=[patch])[0] - y) for s in seeds]


def test_criterion_4_full_restoration(tiny_run):
    gaps = []
    # accepted noises of the pipeline's trace stage
    cfg_path, out = tiny_run
    run = Run(RunConfig.from_json(cfg_path.read_text()), out)
    model = run.model(np.float64)
    sigma = default_sigma(model, run.cfg.trace.sigma_mode)
    qs = {q.qid: q for q in run.hallucinations()}
    for line in (out / "trace" / "traces.jsonl").read_text().splitlines():
        rec = json.loads(line)
        q = qs[rec["qid"]]
        y, clean = hallucination_run(model, q)
        gaps += restoration_gaps(model, q, y, clean, [s for s, _ in rec["noises"]], sigma)
    n_pipeline = len(gaps)
    # and noises accepted on random models
    rng = np.random.default_rng(4)
    cfg = TracingConfig(n_noises=5)
    for i in range(10):
        m = make_model(n_layers=4, d=32, vocab=50, seed=i)
        tokens, span = random_prompt(rng, 50, 8)
        q = halluc_query(m, tokens, span, qid=f"r{i}")
        sig = default_sigma(m)
        y, clean = hallucination_run(m, q)
        samples, _, _ = sample_mitigating_noises(m, q, cfg, sig, y)
        gaps += restoration_gaps(m, q, y, clean, [s.seed for s in samples], sig)
    worst = max(gaps)
    ok = n_pipeline > 0 and worst <= 1e-5
    report(4, ok, f"{len(gaps)} accepted noises ({n_pipeline} from the pipeline trace stage), "
                  f"max |y'' - y| {worst:.1e} <= 1e-5")
    assert ok


# -- 5 ------------------------------------------------------------------------------------

def test_criterion_5_relative_ie_cases():
    zero = relative_ie(np.zeros((3, 4, 6)), 0, 5)
    grid = np.zeros((3, 4, 6))
    grid[1:, 2:, 5] = 1.0          # mean of attn and mlp is 1 at layers 3 and 4 of the last token
    hand = relative_ie(grid, 0, 5)
    ok = (zero.delta_ie == 0.0 and zero.label == "LateSite"
          and hand.delta_ie == 1.0 and hand.label == "LateSite")
    report(5, ok, f"zero grid -> {zero.delta_ie} {zero.label}; L=4 hand case -> {hand.delta_ie} {hand.label}")
    assert ok


# -- 6 and 7: the recorded default-config run ------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    if not (DESK_RUN / "summary.json").exists():
        report("6/7", False, f"no recorded default run at {DESK_RUN}; run demos/desk_run.py")
        pytest.fail(f"missing {DESK_RUN}")
    cfg = RunConfig.from_json((DESK_RUN / "config.json").read_text())
    # the recorded tables must be the ones the bundle indexed
    index = read_json(DESK_RUN / "index.json")
    for path, entry in index["files"].items():
        assert hashlib.sha256((DESK_RUN / path).read_bytes()).hexdigest() == entry["sha256"], path
    assert (DESK_RUN / "labels.csv").read_bytes() == (DESK_RUN / "classify" / "labels.csv").read_bytes()
    return cfg, RunConfig()


def test_criterion_6_desk_scale_pipeline(desk):
    cfg, default = desk
    same = cfg.hash() == default.hash()
    summary = read_json(DESK_RUN / "summary.json")
    timings = read_json(DESK_RUN / "timings.json")
    h, _, rows = read_csv(DESK_RUN / "labels.csv")
    labels = {r[2] for r in rows}
    analysis = sum(timings["seconds"][s] for s in ("trace", "classify", "lens esp", "lens rank", "manifest"))
    ok = (same and h == default.hash() and summary["high_freq_accuracy"] >= 0.9
          and summary["hallucinating"] > 0 and labels == {"EarlySite", "LateSite"} and analysis < 900)
    counts = {lab: sum(r[2] == lab for r in rows) for lab in sorted(labels)}
    report(6, ok, f"default config (hash match {same}): high-frequency accuracy "
                  f"{summary['high_freq_accuracy']:.3f} >= 0.9, {summary['hallucinating']} hallucinations, "
                  f"labels {counts}, trace..manifest {analysis / 60:.1f} min < 15 min "
                  f"on {timings['cpu_count']} core(s)")
    assert ok


def test_criterion_7_desk_scale_mitigation(desk):
    cfg, default = desk
    h, header, rows = read_csv(DESK_RUN / "mitigation.csv")
    table = {r[0]: dict(zip(header, r)) for r in rows}
    mhm = table["mhm"]
    eff, spec = float(mhm["effectiveness"]), float(mhm["specificity"])
    base = float(table["none"]["effectiveness"])
    ok = cfg.hash() == default.hash() == h and base == 0.0 and eff >= 0.5 and spec >= 0.85
    sft = table["sft"]
    report(7, ok, f"seed {cfg.seed}: MHM effectiveness {eff:.3f} >= 0.5 (from {base}), specificity "
                  f"{spec:.3f} >= 0.85; SFT for comparison {float(sft['effectiveness']):.3f} / "
                  f"{float(sft['specificity']):.3f}")
    assert ok


# -- 8 ------------------------------------------------------------------------------------

def snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_reruns_are_byte_identical(tiny_run):
    cfg, out = tiny_run
    before = snapshot(out)
    changed = []
    for stage in STAGES:
        assert run_cli(*stage.split(), "--config", str(cfg), "--out", str(out)) == 0
        after = snapshot(out)
        changed += [k for k in set(before) | set(after) if before.get(k) != after.get(k)]
    ok = not changed
    report(8, ok, f"{len(STAGES)} subcommands rerun, {len(before)} files, changed: {sorted(set(changed))}")
    assert ok


# -- 9 ------------------------------------------------------------------------------------

def test_criterion_9_round_trips(tmp_path, tiny_run):
    problems = []
    # the weight format stores 32-bit floats
    m = make_model(n_layers=4, d=32, vocab=50, dtype=np.float32)
    save_weights(m, tmp_path / "w.htw", meta={"k": 1})
    back = load_weights(tmp_path / "w.htw")
    for p in m.parameters():
        q = back[p.name].data
        if q.dtype != p.data.dtype or q.tobytes() != p.data.tobytes():
            problems.append(p.name)
    world = generate_world(RunConfig().world_config())
    save_world(world, tmp_path / "w.tsv")
    if load_world(tmp_path / "w.tsv") != world:
        problems.append("world")
    _, out = tiny_run
    csvs = sorted(out.rglob("*.csv")) + sorted(DESK_RUN.glob("*.csv"))
    for p in csvs:
        h, header, rows = read_csv(p)
        write_csv(tmp_path / "again.csv", header, rows, h)
        if (tmp_path / "again.csv").read_bytes() != p.read_bytes():
            problems.append(str(p))
        for row in rows:
            for cell in row:
                try:
                    v = float(cell)
                except ValueError:
                    continue
                if not cell.lstrip("-").isdigit() and not math.isnan(v) and repr(v) != cell:
                    problems.append(f"{p}:{cell}")
    ok = not problems
    report(9, ok, f"weights, world, {len(csvs)} CSV reports; problems: {problems[:5]}")
    assert ok
