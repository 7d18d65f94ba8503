"""Decoder-only transformer with an exactly additive residual stream.

Each layer reads the residual ``h`` through its own pre-layer-norm and adds
its outputs back unnormalised::

    a = Attn(LN1(h_prev))
    m = MLP(LN2(h_prev + a))
    h = h_prev + a + m

so the traced attention/MLP outputs are the literal summands of the
residual stream.  Layers are numbered 1..L in every public interface.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tm
from .tensor import Parameter, Tensor

KINDS = ("residual", "attn_out", "mlp_out")


class VocabularyError(KeyError):
    def __init__(self, words):
        self.words = list(words)
        super().__init__(f"unknown word(s): {', '.join(self.words)}")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    vocab_size: int = 2500
    max_seq_len: int = 96
    layer_norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.n_heads, self.vocab_size, self.max_seq_len) <= 0:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def mlp_hidden(self):
        return 4 * self.d_model

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def is_capitalized(word):
    return bool(word) and "A" <= word[0] <= "Z"


class Vocabulary:
    """Closed whitespace vocabulary; one word is one token."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.capitalized = np.array([is_capitalized(t) for t in self.tokens], dtype=bool)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.index

    def tokenize(self, text):
        words = text.split()
        missing = [w for w in words if w not in self.index]
        if missing:
            raise VocabularyError(missing)
        return [self.index[w] for w in words]

    def detokenize(self, ids):
        return " ".join(self.tokens[int(i)] for i in ids)

    def id(self, word):
        try:
            return self.index[word]
        except KeyError:
            raise VocabularyError([word]) from None


@dataclass
class ActivationTrace:
    """Recorded activations of one forward pass.

    Arrays are indexed ``[layer - 1, position, :]`` (with a leading batch
    axis for batched passes).  ``resid[l-1]`` is the residual after layer l,
    ``embeddings`` the layer-0 residual (token + position, after any noise),
    ``final`` the layer-normed state fed to the unembedding.
    """
    embeddings: np.ndarray
    resid: np.ndarray
    attn: np.ndarray
    mlp: np.ndarray
    final: np.ndarray
    attn_weights: np.ndarray

    def site(self, kind, layer, position):
        arr = {"residual": self.resid, "attn_out": self.attn, "mlp_out": self.mlp}[kind]
        return arr[..., layer - 1, position, :]

    def residual_input(self, layer):
        """Residual stream entering ``layer`` (1-based)."""
        return self.embeddings if layer == 1 else self.resid[..., layer - 2, :, :]

    def squeeze(self):
        return ActivationTrace(*(getattr(self, f.name)[0] for f in dataclasses.fields(self)))


class Transformer:
    """Weights plus the hookable forward pass."""

    def __init__(self, cfg: ModelConfig, params=None, dtype=np.float32):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, dtype)
        self.params = params
        self._mask_cache = {}

    # -- parameter access ----------------------------------------------------
    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    @property
    def dtype(self):
        return self.params["tok_embed"].dtype

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        return Transformer(self.cfg, {k: Parameter(k, p.data.astype(dtype))
                                      for k, p in self.params.items()}, dtype)

    def copy(self):
        return self.astype(self.dtype)

    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    # -- pieces of the forward pass --------------------------------------------
    def embed(self, tokens, noise=None):
        """Layer-0 residual ``E_in[w_i] + P[i]``; ``noise`` ([B,T,d]) is added to token rows."""
        tokens = np.asarray(tokens, dtype=np.int64)
        T = tokens.shape[-1]
        if T > self.cfg.max_seq_len:
            raise InputError(f"sequence length {T} exceeds max_seq_len={self.cfg.max_seq_len}")
        tok = tm.embedding_gather(self.params["tok_embed"], tokens)
        if noise is not None:
            tok = tok + Tensor(np.asarray(noise, dtype=self.dtype))
        pos = tm.take(self.params["pos_embed"], slice(0, T))
        return tok + pos

    def _causal_mask(self, T):
        if T not in self._mask_cache:
            self._mask_cache[T] = np.tril(np.ones((T, T), dtype=bool))
        return self._mask_cache[T]

    def attention(self, layer, x, capture=None):
        cfg = self.cfg
        p = self.params
        pre = f"layers.{layer - 1}.attn."
        B, T, d = x.shape
        K, dh = cfg.n_heads, cfg.d_head

        def heads(w):
            return tm.transpose(tm.reshape(x @ p[pre + w], (B, T, K, dh)), (0, 2, 1, 3))
        q, k, v = heads("w_q"), heads("w_k"), heads("w_v")
        scores = tm.scale(q @ tm.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
        w = tm.softmax(scores, axis=-1, mask=self._causal_mask(T))
        if capture is not None:
            capture.append(w.data)
        ctx = tm.reshape(tm.transpose(w @ v, (0, 2, 1, 3)), (B, T, d))
        return ctx @ p[pre + "w_o"] + p[pre + "b_o"]

    def mlp(self, layer, x):
        p = self.params
        pre = f"layers.{layer - 1}.mlp."
        hidden = tm.gelu(x @ p[pre + "w_in"] + p[pre + "b_in"])
        return hidden @ p[pre + "w_out"] + p[pre + "b_out"]

    def block(self, layer, h, hook=None, capture=None):
        """Run one layer; ``hook(kind, layer, value)`` may replace a produced value."""
        p = self.params
        eps = self.cfg.layer_norm_eps
        pre = f"layers.{layer - 1}."
        a = self.attention(layer, tm.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"], eps), capture)
        if hook is not None:
            a = hook("attn_out", layer, a)
        m = self.mlp(layer, tm.layer_norm(h + a, p[pre + "ln2.g"], p[pre + "ln2.b"], eps))
        if hook is not None:
            m = hook("mlp_out", layer, m)
        out = h + a + m
        if hook is not None:
            out = hook("residual", layer, out)
        return out, a, m

    def final_norm(self, h):
        p = self.params
        return tm.layer_norm(h, p["ln_f.g"], p["ln_f.b"], self.cfg.layer_norm_eps)

    def unembed(self, h_normed):
        return h_normed @ tm.transpose(self.params["unembed"], (1, 0))

    def run_layers(self, h, start=1, stop=None, hook=None, record=None):
        """Apply layers ``start..stop`` (inclusive) to residual ``h``."""
        stop = self.cfg.n_layers if stop is None else stop
        for layer in range(start, stop + 1):
            h, a, m = self.block(layer, h, hook,
                                 record["weights"] if record is not None else None)
            if record is not None:
                record["resid"].append(h)
                record["attn"].append(a)
                record["mlp"].append(m)
        return h

    # -- full pass -------------------------------------------------------------
    def forward(self, tokens, interventions=None, capture=False):
        """Logits for every position, and optionally the activation trace.

        ``tokens`` is a 1-D id sequence or a ``[B, T]`` batch; the outputs
        drop the batch axis for 1-D input.
        """
        from .intervene import InterventionSet, bind
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        B, T = tokens.shape
        interventions = interventions or InterventionSet()
        noise, hook = bind(interventions, self, T)
        if noise is not None:
            noise = np.broadcast_to(noise, (B, T, self.cfg.d_model))
        h0 = self.embed(tokens, noise)
        record = {"resid": [], "attn": [], "mlp": [], "weights": []} if capture else None
        h = self.run_layers(h0, hook=hook, record=record)
        hf = self.final_norm(h)
        logits = self.unembed(hf)
        trace = None
        if capture:
            def stack(xs):
                return np.stack([x.data for x in xs], axis=1)
            trace = ActivationTrace(h0.data.copy(), stack(record["resid"]), stack(record["attn"]),
                                    stack(record["mlp"]), hf.data.copy(),
                                    np.stack(record["weights"], axis=1))
            if single:
                trace = trace.squeeze()
        if single:
            logits = tm.take(logits, 0)
        return logits, trace

    def __call__(self, tokens, interventions=None, capture=False):
        return self.forward(tokens, interventions, capture)

    def next_token_distribution(self, tokens, interventions=None):
        with tm.no_grad():
            logits, _ = self.forward(tokens, interventions)
        return next_token_distribution(logits.data[-1])


def next_token_distribution(logits_row):
    return tm.softmax(Tensor(np.asarray(logits_row, dtype=np.float64))).data


def param_shapes(cfg: ModelConfig):
    d, V, H = cfg.d_model, cfg.vocab_size, cfg.mlp_hidden
    shapes = {"tok_embed": (V, d), "pos_embed": (cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        shapes.update({
            pre + "ln1.g": (d,), pre + "ln1.b": (d,),
            pre + "attn.w_q": (d, d), pre + "attn.w_k": (d, d), pre + "attn.w_v": (d, d),
            pre + "attn.w_o": (d, d), pre + "attn.b_o": (d,),
            pre + "ln2.g": (d,), pre + "ln2.b": (d,),
            pre + "mlp.w_in": (d, H), pre + "mlp.b_in": (H,),
            pre + "mlp.w_out": (H, d), pre + "mlp.b_out": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "unembed": (V, d)})
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32):
    rng = np.random.default_rng(cfg.seed)
    proj_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            value = np.ones(shape)
        elif leaf in ("b", "b_o", "b_in", "b_out"):
            value = np.zeros(shape)
        elif leaf in ("w_o", "w_out"):
            value = rng.normal(0.0, proj_std, shape)
        else:
            value = rng.normal(0.0, 0.02, shape)
        params[name] = Parameter(name, value.astype(dtype))
    return params
