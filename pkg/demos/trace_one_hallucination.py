"""Follow a single hallucination from prompt to mechanism label.

Needs a run directory that has been through ``eval`` (for example the one
``desk_run.py`` leaves in /tmp/hallucitrace-desk).

    python3 demos/trace_one_hallucination.py [run_dir] [index]
"""
import sys

import numpy as np

from hallucitrace.config import load_config
from hallucitrace.lens import logit_lens, lower_upper_esp, min_object_rank
from hallucitrace.pipeline import Run
from hallucitrace.tracing import hallucination_run, relative_ie, trace_query

out = sys.argv[1] if len(sys.argv) > 1 else "/tmp/hallucitrace-desk"
index = int(sys.argv[2]) if len(sys.argv) > 2 else 0
run = Run(load_config(f"{out}/eval/config.json"), out)
model = run.model(np.float64)
vocab = run.world.vocab
q = run.hallucinations()[index]

print(f"prompt:    {q.prompt}")
print(f"true:      {q.true_object}   predicted: {vocab.tokens[q.predicted]}")

# y > 0 means the model prefers its wrong answer over the true one.
y, clean = hallucination_run(model, q)
print(f"degree of hallucination y = {y:.3f}")

# Corrupt the first subject token until the wrong answer loses ground, then
# restore one clean activation at a time and see how much of y comes back.
cfg = run.cfg.tracing_config()
res = trace_query(model, q, cfg)
print(f"accepted {len(res.samples)} noises (acceptance rate {res.acceptance_rate:.2f})")
ie = res.mean_ie
for k, kind in enumerate(("residual", "attn_out", "mlp_out")):
    layer, pos = np.unravel_index(np.argmax(ie[k]), ie[k].shape)
    print(f"  strongest {kind:8s} site: layer {layer + 1}, token {vocab.tokens[q.tokens[pos]]!r} "
          f"IE {ie[k, layer, pos]:.3f}")

label = relative_ie(ie, q.s_first, q.last, cfg.relative_kinds)
print(f"late minus early contrast {label.delta_ie:.3f} -> {label.label}")

# What do the intermediate layers know about the true object?
rank = min_object_rank(clean, q, model, run.cfg.lens.rank_frac)
print(f"best rank of the true object in subject-MLP lens views: {rank.rho} "
      f"({'within' if rank.passed else 'outside'} the top 1%)")
lower, upper = lower_upper_esp(clean, q, model["unembed"].data)
print(f"true-object projection: lower MLPs {lower:.2f}, upper attention {upper:.2f}")
top = np.argsort(-logit_lens(clean.resid[-1, q.last], model))[:5]
print("final top-5:", ", ".join(vocab.tokens[t] for t in top))
