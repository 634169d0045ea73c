"""A small frozen decoder-only transformer.

Pre-norm blocks with RMS normalisation, causal multi-head attention, a
SiLU-gated feed-forward and learned absolute positions. The output head is
tied to the token embedding and scaled by 1/sqrt(d_model). Every frozen tensor is created with
``requires_grad=False`` so training can never populate its gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .adapters import PROJECTIONS, AdapterSet, adapter_forward
from .autodiff import Tensor
from .echo import InjectionContext, resolve_layer_index
from .errors import ConfigError, DataError

PROJ_STD = 0.02
EMBED_STD = 0.125


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 192
    vocab_size: int = 64
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 4:
            raise ConfigError(f"n_layers must be >= 4, got {self.n_layers}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 8:
            raise ConfigError(f"max_seq_len must be >= 8, got {self.max_seq_len}")
        if min(self.d_model, self.d_ff, self.vocab_size) < 1:
            raise ConfigError("d_model, d_ff and vocab_size must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class FrozenWeights:
    """Named frozen tensors of the backbone, keyed without the ``backbone.`` prefix."""

    def __init__(self, config: BackboneConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def projection(self, layer: int, proj: str) -> Tensor:
        return self.tensors[f"layers.{layer}.w{proj}"]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"backbone.{k}": t.data for k, t in self.tensors.items()}

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @classmethod
    def from_arrays(cls, config: BackboneConfig, arrays: dict[str, np.ndarray]) -> "FrozenWeights":
        names = _weight_names(config)
        prefixed = {n: arrays.get(f"backbone.{n}") for n in names}
        missing = [n for n, a in prefixed.items() if a is None]
        if missing:
            raise ConfigError(f"backbone tensors missing: {missing[:4]}")
        return cls(config, {n: Tensor(a) for n, a in prefixed.items()})


def _weight_names(config: BackboneConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for layer in range(config.n_layers):
        names += [f"layers.{layer}.{n}" for n in
                  ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")]
    names.append("final_norm")
    return names


def init_backbone(config: BackboneConfig) -> FrozenWeights:
    """Seeded Gaussian init: std 0.02 for projections, 1.0 for embeddings, unit norms."""
    rng = np.random.default_rng(config.seed)
    d, f = config.d_model, config.d_ff
    t: dict[str, Tensor] = {
        "tok_emb": Tensor(rng.normal(0.0, EMBED_STD, (config.vocab_size, d))),
        "pos_emb": Tensor(rng.normal(0.0, EMBED_STD, (config.max_seq_len, d))),
    }
    for layer in range(config.n_layers):
        p = f"layers.{layer}."
        t[p + "attn_norm"] = Tensor(np.ones(d))
        for proj in PROJECTIONS:
            t[p + "w" + proj] = Tensor(rng.normal(0.0, PROJ_STD, (d, d)))
        t[p + "mlp_norm"] = Tensor(np.ones(d))
        t[p + "w_gate"] = Tensor(rng.normal(0.0, PROJ_STD, (f, d)))
        t[p + "w_up"] = Tensor(rng.normal(0.0, PROJ_STD, (f, d)))
        t[p + "w_down"] = Tensor(rng.normal(0.0, PROJ_STD, (d, f)))
    t["final_norm"] = Tensor(np.ones(d))
    return FrozenWeights(config, t)


@dataclass
class LayerTrace:
    """hidden[0] is the embedding output, hidden[l + 1] the output of block l."""

    hidden: list[Tensor]

    @property
    def n_layers(self) -> int:
        return len(self.hidden) - 1

    def block_output(self, layer: int) -> Tensor:
        return self.hidden[resolve_layer_index(layer, self.n_layers) + 1]


def forward(weights: FrozenWeights, adapters: AdapterSet | None, tokens,
            echo_ctx: InjectionContext | None = None,
            dropout_rng: np.random.Generator | None = None) -> tuple[Tensor, LayerTrace]:
    """Logits for every position plus the per-layer hidden-state trace.

    ``tokens`` is (T,) or a right-padded (B, T) int array. Without ``echo_ctx``
    this is the plain (echo-off) path. ``dropout_rng`` enables adapter
    dropout; leave it ``None`` for evaluation.
    """
    cfg = weights.config
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    B, T = tokens.shape
    if T > cfg.max_seq_len:
        raise DataError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise DataError(f"token id out of vocabulary [0, {cfg.vocab_size})")
    adapters = adapters or AdapterSet()
    injecting = echo_ctx is not None and echo_ctx.route == 1
    if echo_ctx is not None:
        bad = [k for k in adapters.echo if not 0 <= k[0] < cfg.n_layers]
        if bad:
            raise ConfigError(f"echo modules reference layers outside the backbone: {bad}")
        if single and echo_ctx.mask.ndim == 1:
            echo_ctx = InjectionContext(ad.reshape(echo_ctx.z_bar, (1, -1)),
                                        echo_ctx.mask[None], echo_ctx.route,
                                        echo_ctx.gate_means)

    def project(layer: int, proj: str, u: Tensor) -> Tensor:
        o = adapter_forward(weights.projection(layer, proj), adapters.get(layer, proj), u,
                            dropout_rng)
        if injecting and (layer, proj) in adapters.echo:
            o = echo_ctx.apply(o, adapters.echo[(layer, proj)])
        return o

    x = ad.add(ad.embedding(weights["tok_emb"], tokens), weights["pos_emb"].data[:T])
    hidden = [x]
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        h = ad.rms_norm(x, weights[p + "attn_norm"])
        att = ad.causal_attention(project(layer, "q", h), project(layer, "k", h),
                                  project(layer, "v", h), cfg.n_heads)
        x = ad.add(x, project(layer, "o", att))
        h = ad.rms_norm(x, weights[p + "mlp_norm"])
        x = ad.add(x, ad.gated_mlp(h, weights[p + "w_gate"], weights[p + "w_up"],
                                   weights[p + "w_down"]))
        hidden.append(x)
    logits = ad.linear(ad.rms_norm(x, weights["final_norm"]), weights["tok_emb"])
    if single:
        logits = ad.reshape(logits, (T, cfg.vocab_size))
        hidden = [ad.reshape(hh, (T, cfg.d_model)) for hh in hidden]
    return logits, LayerTrace(hidden)
