"""Conditional noise-prediction network with capturable cross-attention maps.

The 2-D latent and a sinusoidal time embedding are lifted to ``P`` query
slots. Each block cross-attends from the slots to the prompt tokens and then
applies a feed-forward layer; a small head maps the slots back to a 2-D noise
estimate. Attention maps of every layer are returned in an
:class:`AttentionTrace` and can be fed back in to replace the natively
computed maps of a second pass.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError
from .numerics import Tensor

NULL_TOKEN = "<null>"
PHOTO_OF = "photo-of"
DEFAULT_VOCAB = (NULL_TOKEN, PHOTO_OF, "A", "B", "C", "D", "super", "<obj>", "<obj2>")


@dataclass(frozen=True)
class PromptSpec:
    tokens: tuple[str, ...]
    concept_slots: tuple[tuple[int, str], ...] = ()
    is_null: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        slots = tuple(sorted((int(p), str(c)) for p, c in self.concept_slots))
        object.__setattr__(self, "concept_slots", slots)
        if not self.tokens:
            raise ContractError("prompt must contain at least one token")
        if self.is_null and slots:
            raise ContractError("the null prompt cannot carry concept slots")
        positions = [p for p, _ in slots]
        if len(set(positions)) != len(positions):
            raise ContractError("two concepts share one token position")
        for p in positions:
            if not 0 <= p < len(self.tokens):
                raise ContractError(f"concept slot position {p} outside prompt of length {len(self.tokens)}")

    @classmethod
    def of(cls, *tokens: str, slots: Mapping[int, str] | None = None) -> "PromptSpec":
        return cls(tuple(tokens), tuple((slots or {}).items()))

    @classmethod
    def null(cls, length: int = 2) -> "PromptSpec":
        return cls((NULL_TOKEN,) * length, (), True)

    def __len__(self) -> int:
        return len(self.tokens)

    def without_slots(self) -> "PromptSpec":
        return replace(self, concept_slots=())

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "concept_slots": [list(s) for s in self.concept_slots], "is_null": self.is_null}

    @classmethod
    def from_dict(cls, doc) -> "PromptSpec":
        return cls(tuple(doc["tokens"]), tuple((int(p), c) for p, c in doc.get("concept_slots", [])), bool(doc.get("is_null", False)))


@dataclass
class TokenEmbeddingTable:
    vocab: tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.vocab):
            raise ShapeError("one embedding row per vocabulary entry is required")
        if NULL_TOKEN not in self.vocab:
            raise ContractError("vocabulary lacks the null token")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def index(self, token: str) -> int:
        try:
            return self.vocab.index(token)
        except ValueError:
            raise KeyError(f"unknown token {token!r}") from None

    def indices(self, prompt: PromptSpec) -> np.ndarray:
        if prompt.is_null:
            return np.full(len(prompt), self.index(NULL_TOKEN), dtype=np.int64)
        return np.array([self.index(tok) for tok in prompt.tokens], dtype=np.int64)


def encode_prompt(prompt: PromptSpec, table: TokenEmbeddingTable) -> np.ndarray:
    """Token matrix (L, d) for ``prompt``."""
    return table.embeddings[table.indices(prompt)]


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 32
    n_slots: int = 4
    n_layers: int = 3
    time_dim: int = 16
    lift_hidden: int = 128
    ffn_hidden: int = 64
    head_hidden: int = 64
    vocab: tuple[str, ...] = DEFAULT_VOCAB

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if self.n_layers < 2:
            raise ContractError("at least two cross-attention layers are required")
        if self.time_dim % 2:
            raise ContractError("time embedding dimension must be even")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc) -> "DenoiserConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()})


@dataclass
class DenoiserWeights:
    config: DenoiserConfig
    params: dict[str, np.ndarray]

    @property
    def table(self) -> TokenEmbeddingTable:
        return TokenEmbeddingTable(self.config.vocab, self.params["tok_emb"])

    def copy(self) -> "DenoiserWeights":
        return DenoiserWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def with_params(self, params: Mapping[str, np.ndarray]) -> "DenoiserWeights":
        merged = dict(self.params)
        merged.update(params)
        return DenoiserWeights(self.config, merged)

    def fingerprint(self) -> str:
        """SHA-256 over parameter names, shapes and raw little-endian float64 bytes."""
        h = hashlib.sha256()
        h.update(repr(sorted(self.config.to_dict().items())).encode())
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            h.update(name.encode())
            h.update(repr(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def equals(self, other: "DenoiserWeights") -> bool:
        return (
            self.config == other.config
            and self.params.keys() == other.params.keys()
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )

    def tensors(self, trainable: bool | Sequence[str] = False) -> dict[str, Tensor]:
        if trainable is True:
            train = set(self.params)
        elif trainable is False:
            train = set()
        else:
            train = set(trainable)
        return {k: Tensor(v, requires_grad=k in train, name=k) for k, v in self.params.items()}


def init_weights(config: DenoiserConfig, rng: np.random.Generator) -> DenoiserWeights:
    d, p = config.d_model, config.n_slots

    def dense(fan_in, fan_out, gain=1.0):
        return rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))

    params = {
        "tok_emb": rng.standard_normal((len(config.vocab), d)),
        "lift_w1": dense(2 + config.time_dim, config.lift_hidden),
        "lift_b1": np.zeros(config.lift_hidden),
        "lift_w2": dense(config.lift_hidden, p * d),
        "lift_b2": np.zeros(p * d),
        "slot_emb": rng.standard_normal((p, d)) * 0.1,
        "head_w1": dense(p * d, config.head_hidden),
        "head_b1": np.zeros(config.head_hidden),
        "head_w2": dense(config.head_hidden, 2, 0.5),
        "head_b2": np.zeros(2),
    }
    for i in range(config.n_layers):
        params[f"l{i}.wq"] = dense(d, d)
        params[f"l{i}.wk"] = dense(d, d)
        params[f"l{i}.wv"] = dense(d, d)
        params[f"l{i}.wo"] = dense(d, d, 0.5)
        params[f"l{i}.ff_w1"] = dense(d, config.ffn_hidden)
        params[f"l{i}.ff_b1"] = np.zeros(config.ffn_hidden)
        params[f"l{i}.ff_w2"] = dense(config.ffn_hidden, d, 0.5)
        params[f"l{i}.ff_b2"] = np.zeros(d)
    return DenoiserWeights(config, params)


@dataclass
class AttentionTrace:
    """Per-layer attention maps (batch, P, L) and the value matrices they were applied to."""

    maps: list[np.ndarray]
    values: list[np.ndarray] = field(default_factory=list)
    t: np.ndarray | None = None
    prompt: PromptSpec | None = None

    @property
    def n_layers(self) -> int:
        return len(self.maps)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def attention_map(q, k) -> Tensor:
    q, k = nx.as_tensor(q), nx.as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} differs from key width {k.shape[-1]}")
    return nx.softmax_rows(nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(q.shape[-1])))


def cross_attention(q, k, v) -> tuple[Tensor, Tensor]:
    """``map = softmax(q k^T / sqrt(d))`` and ``output = map v`` (token-ordered sum)."""
    v = nx.as_tensor(v)
    if nx.as_tensor(k).shape[-2] != v.shape[-2]:
        raise ShapeError(f"{nx.as_tensor(k).shape[-2]} keys but {v.shape[-2]} values")
    m = attention_map(q, k)
    return nx.attend(m, v), m


def _slot_plan(prompts: Sequence[PromptSpec], residuals: Mapping[str, Tensor] | None):
    """Rows, matching residual names and batch mask for value-row injection."""
    if not residuals:
        return [], [], None
    structures = {p.concept_slots for p in prompts if p.concept_slots}
    if not structures:
        return [], [], None
    if len(structures) > 1:
        raise ContractError("all customized prompts in a batch must share their concept slots")
    (slots,) = structures
    matched = [(pos, name) for pos, name in slots if name in residuals]
    if not matched:
        return [], [], None
    mask = np.array([p.concept_slots == slots for p in prompts])
    return [pos for pos, _ in matched], [name for _, name in matched], (None if mask.all() else mask)


def apply_residuals(v, prompt: PromptSpec, residuals: Mapping[str, np.ndarray | Tensor] | None, layer: int | None = None):
    """Add each matched concept's residual to its slot row of ``v``.

    ``residuals`` maps concept names to either a single d-vector or a
    per-layer (n_layers, d) array, in which case ``layer`` selects the row.
    Rows without a matching concept slot are left bit-identical.
    """
    if not residuals:
        return v
    rows, names = [], []
    for pos, name in prompt.concept_slots:
        if name in residuals:
            rows.append(pos)
            names.append(name)
    if not rows:
        return v
    deltas = []
    for name in names:
        r = nx.as_tensor(residuals[name])
        if r.ndim == 2:
            if layer is None:
                raise ContractError("per-layer residuals need a layer index")
            r = nx.reshape(nx.gather_rows(r, np.int64(layer)), (1, r.shape[-1]))
        else:
            r = nx.reshape(r, (1, r.shape[-1]))
        deltas.append(r)
    v_t = nx.as_tensor(v)
    if deltas[0].shape[-1] != v_t.shape[-1]:
        raise ShapeError(f"residual width {deltas[0].shape[-1]} differs from value width {v_t.shape[-1]}")
    out = nx.add_rows(v_t, rows, nx.concat(deltas, axis=0))
    return out if isinstance(v, Tensor) else out.data


def _check_injected(injected: AttentionTrace, n_layers: int, expected: tuple[int, int, int]) -> None:
    if injected.n_layers != n_layers:
        raise ContractError(f"injected trace has {injected.n_layers} layers, model has {n_layers}")
    for i, m in enumerate(injected.maps):
        if m.shape != expected:
            raise ContractError(f"injected map of layer {i} has shape {m.shape}, expected {expected}")


def denoise_forward(
    z_t,
    t,
    prompt: PromptSpec | Sequence[PromptSpec],
    weights: DenoiserWeights,
    residuals: Mapping[str, np.ndarray | Tensor] | None = None,
    injected: AttentionTrace | None = None,
    inject_layers: Sequence[bool] | None = None,
    tensors: Mapping[str, Tensor] | None = None,
    token_table: Tensor | None = None,
) -> tuple[Tensor, AttentionTrace]:
    """Predict the noise in ``z_t`` (batch, 2) at integer timesteps ``t``.

    ``prompt`` is one prompt for the whole batch or one per row; all must have
    the same length. ``residuals`` maps concept names to per-layer value
    residuals (n_layers, d). When ``injected`` is given, its maps replace the
    natively computed ones (only for layers enabled in ``inject_layers``); the
    trace always records the native maps. ``tensors`` overrides the weight
    tensors (used to track gradients) and ``token_table`` the embedding table.
    """
    cfg = weights.config
    z = np.asarray(z_t, dtype=np.float64).reshape(-1, 2)
    batch = z.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (batch,))
    prompts = [prompt] * batch if isinstance(prompt, PromptSpec) else list(prompt)
    if len(prompts) != batch:
        raise ContractError(f"{len(prompts)} prompts for a batch of {batch}")
    length = len(prompts[0])
    if any(len(p) != length for p in prompts):
        raise ContractError("prompts in one batch must have equal length")

    W = tensors if tensors is not None else weights.tensors()
    table = token_table if token_table is not None else W["tok_emb"]
    table_view = TokenEmbeddingTable(cfg.vocab, table.data)
    if isinstance(prompt, PromptSpec):
        index = np.broadcast_to(table_view.indices(prompt), (batch, length))
    else:
        index = np.stack([table_view.indices(p) for p in prompts])
    emb = nx.gather_rows(table, index)  # (B, L, d)

    res_t = {k: nx.as_tensor(v) for k, v in (residuals or {}).items()}
    for name, r in res_t.items():
        if r.shape != (cfg.n_layers, cfg.d_model):
            raise ShapeError(f"residual {name!r} has shape {r.shape}, expected {(cfg.n_layers, cfg.d_model)}")
    rows, names, mask = _slot_plan(prompts, res_t)

    P, d = cfg.n_slots, cfg.d_model
    if injected is not None:
        _check_injected(injected, cfg.n_layers, (batch, P, length))
    layer_on = list(inject_layers) if inject_layers is not None else [True] * cfg.n_layers

    x = np.concatenate([z, timestep_embedding(t_arr, cfg.time_dim)], axis=1)
    hid = nx.silu(nx.add(nx.matmul(x, W["lift_w1"]), W["lift_b1"]))
    h = nx.add(nx.matmul(hid, W["lift_w2"]), W["lift_b2"])
    h = nx.add(nx.reshape(h, (batch, P, d)), W["slot_emb"])

    maps, values = [], []
    for i in range(cfg.n_layers):
        q = nx.matmul(h, W[f"l{i}.wq"])
        k = nx.matmul(emb, W[f"l{i}.wk"])
        v = nx.matmul(emb, W[f"l{i}.wv"])
        if rows:
            deltas = nx.concat([nx.reshape(nx.gather_rows(res_t[n], np.int64(i)), (1, d)) for n in names], axis=0)
            v = nx.add_rows(v, rows, deltas, where=mask)
        native = attention_map(q, k)
        maps.append(native.data)
        values.append(v.data)
        m = Tensor(injected.maps[i]) if injected is not None and layer_on[i] else native
        a = nx.attend(m, v)
        h = nx.add(h, nx.matmul(a, W[f"l{i}.wo"]))
        f = nx.silu(nx.add(nx.matmul(h, W[f"l{i}.ff_w1"]), W[f"l{i}.ff_b1"]))
        h = nx.add(h, nx.add(nx.matmul(f, W[f"l{i}.ff_w2"]), W[f"l{i}.ff_b2"]))

    flat = nx.reshape(h, (batch, P * d))
    g = nx.silu(nx.add(nx.matmul(flat, W["head_w1"]), W["head_b1"]))
    eps = nx.add(nx.matmul(g, W["head_w2"]), W["head_b2"])
    trace = AttentionTrace(maps=maps, values=values, t=t_arr.copy(), prompt=prompts[0] if isinstance(prompt, PromptSpec) else None)
    return eps, trace


def drop_condition(prompt: PromptSpec, p_uncond: float, rng: np.random.Generator) -> PromptSpec:
    """Replace ``prompt`` by the null prompt of the same length with probability ``p_uncond``."""
    if not 0.0 <= p_uncond <= 1.0:
        raise ContractError(f"p_uncond must lie in [0, 1], got {p_uncond}")
    if rng.random() < p_uncond:
        return PromptSpec.null(len(prompt))
    return prompt


def predict(weights: DenoiserWeights, z_t, t, prompt, **kw) -> np.ndarray:
    """Gradient-free convenience wrapper returning the noise estimate as an array."""
    eps, _ = denoise_forward(z_t, t, prompt, weights, **kw)
    return eps.data
