"""Minimal decoder-only transformer with per-layer activation capture.

The architecture is the gated-MLP flavor used by modern open decoder
models: RMS normalization, rotary position embedding on query/key, causal
multi-head attention, and a SiLU-gated feed-forward block. Each block
("module") exposes exactly seven addressable linear layers: q, k, v, o in
attention and g (gate), u (up), d (down) in the MLP. Numerics are fixed
so independent implementations agree:

- RMSNorm:  y = x * gain / sqrt(mean(x^2) + eps)
- rotary:   adjacent pairs (2i, 2i+1) within each head rotated by
            angle = position * ROTARY_BASE ** (-2i / head_dim)
- MLP:      down(silu(gate(x)) * up(x)), silu(x) = x * sigmoid(x)

There is no KV caching or sampling; the model only does teacher-forced
scoring. Everything runs in float64.
"""

from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field

import numpy as np

from .linalg import as_matrix

KINDS = ("q", "k", "v", "o", "g", "u", "d")
# Traversal order within one block when walking against the dataflow.
REVERSE_DATAFLOW_KINDS = ("d", "u", "g", "o", "v", "k", "q")
ROTARY_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: int
    max_seq_len: int
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary embedding")
        if self.norm_epsilon <= 0:
            raise ValueError("norm_epsilon must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def layer_shape(self, kind: str) -> tuple[int, int]:
        """(d2, d1) = (output dim, input dim) of a linear layer kind."""
        if kind in ("q", "k", "v", "o"):
            return self.d_model, self.d_model
        if kind in ("g", "u"):
            return self.d_ff, self.d_model
        if kind == "d":
            return self.d_model, self.d_ff
        raise ValueError(f"unknown layer kind {kind!r}")

    def layer_ids(self) -> tuple["LayerId", ...]:
        """All 7 * n_layers addressable linear layers, dataflow order."""
        return tuple(
            LayerId(m, k) for m in range(self.n_layers) for k in KINDS
        )


@dataclass(frozen=True)
class LayerId:
    module_index: int
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.module_index < 0:
            raise ValueError("module_index must be >= 0")

    @property
    def name(self) -> str:
        return f"m{self.module_index}.{self.kind}"

    @classmethod
    def parse(cls, name: str) -> "LayerId":
        head, _, kind = name.partition(".")
        if not head.startswith("m") or not head[1:].isdigit():
            raise ValueError(f"bad layer name {name!r}")
        return cls(int(head[1:]), kind)


class DenseLayer:
    """Plain linear layer y = W x, weight stored (d2, d1)."""

    def __init__(self, weight):
        self.weight = as_matrix(weight, "weight")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def apply(self, x_rows: np.ndarray) -> np.ndarray:
        """Row-convention forward: (T, d1) -> (T, d2)."""
        return x_rows @ self.weight.T

    def param_count(self) -> int:
        return self.weight.shape[0] * self.weight.shape[1]

    def weight_param_count(self) -> int:
        return self.param_count()


class FactoredLayer:
    """Rank-r replacement y = W_d (W_u x) + b.

    w_down is (d2, r), w_up is (r, d1), bias is an optional (d2,) vector
    added on the output side. Parameter count is r*(d1+d2), plus d2 when
    the bias is present.
    """

    def __init__(self, w_down, w_up, bias=None, rank: int | None = None):
        self.w_down = as_matrix(w_down, "w_down")
        self.w_up = as_matrix(w_up, "w_up")
        if self.w_down.shape[1] != self.w_up.shape[0]:
            raise ValueError(
                f"inner dims disagree: w_down {self.w_down.shape}, w_up {self.w_up.shape}"
            )
        self.rank = self.w_down.shape[1] if rank is None else rank
        if self.rank != self.w_down.shape[1]:
            raise ValueError("declared rank does not match factor shapes")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if bias is None:
            self.bias = None
        else:
            self.bias = np.asarray(bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.w_down.shape[0]:
                raise ValueError("bias length must equal the output dimension")

    @property
    def out_dim(self) -> int:
        return self.w_down.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w_up.shape[1]

    def apply(self, x_rows: np.ndarray) -> np.ndarray:
        y = (x_rows @ self.w_up.T) @ self.w_down.T
        if self.bias is not None:
            y = y + self.bias
        return y

    def param_count(self) -> int:
        n = self.rank * (self.in_dim + self.out_dim)
        if self.bias is not None:
            n += self.out_dim
        return n

    def weight_param_count(self) -> int:
        return self.rank * (self.in_dim + self.out_dim)


@dataclass
class Block:
    attn_norm: np.ndarray
    mlp_norm: np.ndarray
    layers: dict = field(default_factory=dict)  # kind -> DenseLayer | FactoredLayer


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / scale * gain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _rotary(x: np.ndarray, head_dim: int) -> np.ndarray:
    """Apply rotary position embedding to (T, n_heads, head_dim) arrays."""
    t = x.shape[0]
    half = head_dim // 2
    inv_freq = ROTARY_BASE ** (-np.arange(half) * 2.0 / head_dim)
    angles = np.arange(t)[:, None] * inv_freq[None, :]  # (T, half)
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


@dataclass
class DecoderModel:
    """Embeddings, a stack of blocks, a final norm, and an output head.

    Immutable during forward/capture and safe to share across readers;
    replace_layer requires exclusive access.
    """

    config: ModelConfig
    embedding: np.ndarray           # (vocab, d)
    blocks: list                    # list[Block]
    final_norm: np.ndarray          # (d,)
    head: np.ndarray                # (vocab, d)

    def layer(self, lid: LayerId):
        if lid.module_index >= len(self.blocks):
            raise ValueError(f"no module {lid.module_index} in a {len(self.blocks)}-module model")
        return self.blocks[lid.module_index].layers[lid.kind]

    def replace_layer(self, lid: LayerId, new_layer) -> "DecoderModel":
        """Swap the layer at lid; shapes must match the position."""
        expected = self.config.layer_shape(lid.kind)
        got = (new_layer.out_dim, new_layer.in_dim)
        if got != expected:
            raise ValueError(f"layer {lid.name} expects shape {expected}, got {got}")
        if lid.module_index >= len(self.blocks):
            raise ValueError(f"no module {lid.module_index} in a {len(self.blocks)}-module model")
        self.blocks[lid.module_index].layers[lid.kind] = new_layer
        return self

    def copy(self) -> "DecoderModel":
        return _copy.deepcopy(self)

    def _check_tokens(self, tokens) -> np.ndarray:
        toks = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if toks.size == 0:
            raise ValueError("token sequence is empty")
        if toks.size > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {toks.size} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if toks.min() < 0 or toks.max() >= self.config.vocab_size:
            raise ValueError("token id out of range")
        return toks

    def _run(self, tokens, taps=None):
        """Forward pass; optionally record (X, Y) row-matrices for tapped layers.

        X is the input the tapped layer actually saw (post-norm states for
        q/k/v/g/u, attention context for o, the gated product for d) and Y
        is its output including any bias. Both are (T, dim) here; capture
        transposes to the column convention.
        """
        cfg = self.config
        toks = self._check_tokens(tokens)
        taps = taps or frozenset()
        captured = {}

        def tap(mi, kind, x, y):
            lid = LayerId(mi, kind)
            if lid in taps:
                captured[lid] = (x, y)

        h = self.embedding[toks]  # (T, d)
        t = h.shape[0]
        n_heads, head_dim = cfg.n_heads, cfg.head_dim
        causal = np.tril(np.ones((t, t), dtype=bool))

        for mi, block in enumerate(self.blocks):
            a = rms_norm(h, block.attn_norm, cfg.norm_epsilon)
            q = block.layers["q"].apply(a)
            k = block.layers["k"].apply(a)
            v = block.layers["v"].apply(a)
            tap(mi, "q", a, q)
            tap(mi, "k", a, k)
            tap(mi, "v", a, v)

            qh = _rotary(q.reshape(t, n_heads, head_dim), head_dim)
            kh = _rotary(k.reshape(t, n_heads, head_dim), head_dim)
            vh = v.reshape(t, n_heads, head_dim)
            scores = np.einsum("thd,shd->hts", qh, kh) / np.sqrt(head_dim)
            scores = np.where(causal[None, :, :], scores, -np.inf)
            scores -= scores.max(axis=-1, keepdims=True)
            weights = np.exp(scores)
            weights /= weights.sum(axis=-1, keepdims=True)
            ctx = np.einsum("hts,shd->thd", weights, vh).reshape(t, cfg.d_model)

            o = block.layers["o"].apply(ctx)
            tap(mi, "o", ctx, o)
            h = h + o

            m = rms_norm(h, block.mlp_norm, cfg.norm_epsilon)
            g = block.layers["g"].apply(m)
            u = block.layers["u"].apply(m)
            tap(mi, "g", m, g)
            tap(mi, "u", m, u)
            act = silu(g) * u
            d = block.layers["d"].apply(act)
            tap(mi, "d", act, d)
            h = h + d

        h = rms_norm(h, self.final_norm, cfg.norm_epsilon)
        logits = h @ self.head.T
        return logits, captured

    def forward(self, tokens) -> np.ndarray:
        """Teacher-forced logits, (seq_len, vocab)."""
        logits, _ = self._run(tokens)
        return logits

    def capture_many(self, tokens, layer_ids) -> dict:
        """One forward pass capturing (X: d1 x T, Y: d2 x T) per requested layer."""
        wanted = frozenset(layer_ids)
        for lid in wanted:
            self.layer(lid)  # raises on unknown ids before running
        _, captured = self._run(tokens, taps=wanted)
        return {
            lid: (np.ascontiguousarray(x.T), np.ascontiguousarray(y.T))
            for lid, (x, y) in captured.items()
        }

    def capture(self, tokens, lid: LayerId):
        """(X, Y) column matrices for a single layer, columns by token position."""
        return self.capture_many(tokens, [lid])[lid]


def random_model(config: ModelConfig, seed: int) -> DecoderModel:
    """Seeded random model; scales chosen so logits vary without saturating."""
    rng = np.random.default_rng(seed)
    d, dff = config.d_model, config.d_ff

    def w(d2, d1, scale):
        return rng.standard_normal((d2, d1)) * scale

    blocks = []
    for _ in range(config.n_layers):
        layers = {
            kind: DenseLayer(w(*config.layer_shape(kind), 1.0 / np.sqrt(config.layer_shape(kind)[1])))
            for kind in KINDS
        }
        blocks.append(
            Block(attn_norm=np.ones(d), mlp_norm=np.ones(d), layers=layers)
        )
    return DecoderModel(
        config=config,
        embedding=rng.standard_normal((config.vocab_size, d)),
        blocks=blocks,
        final_norm=np.ones(d),
        head=rng.standard_normal((config.vocab_size, d)) * (2.0 / np.sqrt(d)),
    )


@dataclass(frozen=True)
class ParamCounts:
    linear: dict                    # LayerId -> int
    embedding: int
    head: int
    norms: int

    @property
    def linear_total(self) -> int:
        return sum(self.linear.values())

    @property
    def total(self) -> int:
        return self.linear_total + self.embedding + self.head + self.norms


def count_params(model: DecoderModel) -> ParamCounts:
    """Exact integer parameter accounting, additive over layers."""
    linear = {
        lid: model.layer(lid).param_count() for lid in model.config.layer_ids()
    }
    cfg = model.config
    return ParamCounts(
        linear=linear,
        embedding=cfg.vocab_size * cfg.d_model,
        head=cfg.vocab_size * cfg.d_model,
        norms=(2 * cfg.n_layers + 1) * cfg.d_model,
    )


def architecture_param_counts(config: ModelConfig) -> ParamCounts:
    """Parameter accounting for an all-dense model, from shapes alone."""
    linear = {
        lid: config.layer_shape(lid.kind)[0] * config.layer_shape(lid.kind)[1]
        for lid in config.layer_ids()
    }
    return ParamCounts(
        linear=linear,
        embedding=config.vocab_size * config.d_model,
        head=config.vocab_size * config.d_model,
        norms=(2 * config.n_layers + 1) * config.d_model,
    )


@dataclass(frozen=True)
class MacCounts:
    """Multiply-accumulate estimate at a given sequence length.

    linear counts seq_len multiplies per weight parameter of every linear
    layer including the output head (bias adds are not MACs); attention
    counts the quadratic score and context products,
    n_layers * 2 * seq_len^2 * d_model. Embedding lookup contributes none.
    """

    linear: int
    attention: int
    seq_len: int

    @property
    def total(self) -> int:
        return self.linear + self.attention

    @property
    def formula(self) -> str:
        return (
            "linear = seq_len * (sum of weight params of linear layers + vocab*d_model head); "
            "attention = n_layers * 2 * seq_len^2 * d_model"
        )


def count_macs(model: DecoderModel, seq_len: int) -> MacCounts:
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    cfg = model.config
    weights = sum(
        model.layer(lid).weight_param_count() for lid in cfg.layer_ids()
    )
    weights += cfg.vocab_size * cfg.d_model  # output head
    return MacCounts(
        linear=weights * seq_len,
        attention=cfg.n_layers * 2 * seq_len * seq_len * cfg.d_model,
        seq_len=seq_len,
    )
