"""Command-line entry point: ``hallucitrace <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .checkpoint import HtwError
from .config import RunConfig, default_config_path, load_config
from .model import ConfigError

EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_MODULE = 5

COMMANDS = {
    "world": {"gen": "generate the synthetic knowledge world"},
    "corpus": {"gen": "generate the training corpus"},
    "train": "pretrain the transformer on the corpus",
    "eval": "label every query factual / hallucinating / discarded",
    "trace": "causal tracing of hallucinating queries",
    "classify": "early-/late-site labels from stored traces",
    "lens": {"esp": "embedding-space projection profiles", "rank": "minimum object rank via logit lens"},
    "manifest": "external features of the two hallucination types",
    "mitigate": {"train": "fine-tune with and without the mitigation loss",
                 "eval": "effectiveness and specificity of every method"},
    "ckpt-esp": "projection trajectories across training checkpoints",
    "report": {"bundle": "re-render all tables from stored intermediates"},
}


def _layers(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated layer numbers, got {text!r}")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--config", help="run config JSON (defaults to the shipped config)")
    g.add_argument("--seed", type=int, help="global seed")
    g.add_argument("--out", help="output directory (default: $HALLUCITRACE_OUT or ./hallucitrace-out)")
    g.add_argument("--model", help="model weights (.htw); default <out>/model/final.htw")
    g.add_argument("--world", help="world file; default <out>/world.tsv")
    g.add_argument("--threads", type=int, help="worker processes for per-query work")
    g.add_argument("--sigma-mode", choices=["unit", "3xstd"])
    g.add_argument("--ie-convention", choices=["main", "companion"])
    g.add_argument("--match-rule", choices=["prefix", "suffix"])
    g.add_argument("--lambda", dest="lam", type=float, help="weight of the mitigation loss")
    g.add_argument("--layers-mlp", type=_layers, help="e.g. 3,4,5")
    g.add_argument("--layers-attn", type=_layers)
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="hallucitrace", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, spec in COMMANDS.items():
        if isinstance(spec, str):
            sub.add_parser(name, parents=[common], help=spec, description=spec)
            continue
        p = sub.add_parser(name, help=", ".join(spec))
        inner = p.add_subparsers(dest="action", required=True, metavar="action")
        for action, text in spec.items():
            inner.add_parser(action, parents=[common], help=text, description=text)
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else load_config(default_config_path())
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.model:
        top["model_path"] = args.model
    if args.world:
        top["world_path"] = args.world
    if args.threads is not None:
        top["threads"] = args.threads
    cfg = replace(cfg, **top)
    trace = {k: v for k, v in (("sigma_mode", args.sigma_mode),
                               ("ie_convention", args.ie_convention)) if v is not None}
    if trace:
        cfg = replace(cfg, trace=replace(cfg.trace, **trace))
    if args.match_rule:
        cfg = replace(cfg, eval=replace(cfg.eval, match_rule=args.match_rule))
    mit = {k: v for k, v in (("lam", args.lam), ("layers_mlp", args.layers_mlp),
                             ("layers_attn", args.layers_attn)) if v is not None}
    if mit:
        cfg = replace(cfg, mitigate=replace(cfg.mitigate, **mit))
    out = args.out or os.environ.get("HALLUCITRACE_OUT") or cfg.out or "hallucitrace-out"
    return replace(cfg, out=str(out)).validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    name = args.command if getattr(args, "action", None) is None else f"{args.command} {args.action}"
    try:
        cfg = resolve_config(args)
        run = pipeline.Run(cfg, Path(cfg.out))
        pipeline.STAGES[name](run)
    except (FileNotFoundError, pipeline.MissingInputError) as e:
        print(f"hallucitrace {name}: missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"hallucitrace {name}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (HtwError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"hallucitrace {name}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_MODULE
    print(f"hallucitrace {name}: wrote {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
