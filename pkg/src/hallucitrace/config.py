"""Run configuration: one JSON document covering every pipeline stage."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import CorpusConfig, WorldConfig
from .mitigate import MhmConfig
from .model import ConfigError, ModelConfig
from .tracing import TracingConfig
from .train import TrainConfig

# Keys that change where results go or how fast they arrive, not what they are.
UNHASHED = ("out", "model_path", "world_path", "threads")


@dataclass
class EvalSection:
    match_rule: str = "prefix"
    high_freq_min_count: int = 30


@dataclass
class TraceSection:
    n_noises: int = 10
    max_attempts: int | None = None
    sigma_mode: str = "3xstd"
    noise_scope: str = "first"
    acceptance: str = "main"
    ie_convention: str = "main"
    relative_kinds: tuple = ("attn_out", "mlp_out")
    max_queries: int = 200


@dataclass
class LensSection:
    rank_frac: float = 0.01
    n_distractors: int = 100
    max_factual: int = 200


@dataclass
class ManifestSection:
    robustness_rule: str = "survives"
    pool_size: int = 50


@dataclass
class MitigateSection:
    layers_mlp: tuple | None = None
    layers_attn: tuple | None = None
    lam: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 15
    batch_size: int = 8
    grad_clip: float = 1.0
    icl_shots: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    model_path: str | None = None
    world_path: str | None = None
    threads: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    trace: TraceSection = field(default_factory=TraceSection)
    lens: LensSection = field(default_factory=LensSection)
    manifest: ManifestSection = field(default_factory=ManifestSection)
    mitigate: MitigateSection = field(default_factory=MitigateSection)

    # -- per-stage views with seeds derived from the global one -------------
    def world_config(self):
        return _with(self.world, seed=self.seed)

    def corpus_config(self):
        return _with(self.corpus, seed=self.seed + 1)

    def model_config(self, vocab_size):
        return _with(self.model, seed=self.seed + 2, vocab_size=vocab_size)

    def train_config(self):
        return _with(self.train, seed=self.seed + 3)

    def tracing_config(self):
        t = self.trace
        return TracingConfig(t.n_noises, t.max_attempts, t.sigma_mode, t.noise_scope,
                             t.acceptance, t.ie_convention, tuple(t.relative_kinds), self.seed + 4)

    def mhm_config(self):
        m = self.mitigate
        return MhmConfig(_tuple(m.layers_mlp), _tuple(m.layers_attn), m.lam, m.lr, m.momentum,
                         m.epochs, m.batch_size, m.grad_clip, self.seed + 5)

    # -- serialisation ------------------------------------------------------------
    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in d.items():
            default = known[name].default_factory() if callable(known[name].default_factory) else None
            if default is not None and hasattr(default, "__dataclass_fields__"):
                kwargs[name] = _section(type(default), value, name)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e

    def hash(self):
        d = {k: v for k, v in self.to_dict().items() if k not in UNHASHED}
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def validate(self):
        t = self.trace
        checks = [
            (t.sigma_mode in ("unit", "3xstd"), f"sigma_mode {t.sigma_mode!r}"),
            (t.ie_convention in ("main", "companion"), f"ie_convention {t.ie_convention!r}"),
            (t.acceptance in ("main", "companion"), f"acceptance {t.acceptance!r}"),
            (t.noise_scope in ("first", "subject"), f"noise_scope {t.noise_scope!r}"),
            (self.eval.match_rule in ("prefix", "suffix"), f"match_rule {self.eval.match_rule!r}"),
            (self.manifest.robustness_rule in ("survives", "flipped"),
             f"robustness_rule {self.manifest.robustness_rule!r}"),
            (self.model.n_layers % 2 == 0, "n_layers must be even for the early/late split"),
            (self.threads >= 1, "threads must be at least 1"),
            (self.mitigate.lam >= 0, "lambda must be non-negative"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise ConfigError("invalid config: " + "; ".join(bad))
        self.mhm_config().resolved(self.model.n_layers)
        return self


def _tuple(x):
    return None if x is None else tuple(x)


def _with(section, **kw):
    d = asdict(section)
    d.update(kw)
    return type(section)(**d)


def _section(cls, value, name):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    out = cls(**value)
    for f in fields(cls):
        v = getattr(out, f.name)
        if isinstance(v, list):
            setattr(out, f.name, tuple(v))
    return out


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return RunConfig.from_json(path.read_text())


def default_config_path():
    return Path(__file__).with_name("default_config.json")
