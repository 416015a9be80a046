"""A deterministic toy transformer decoder.

Pre-normalization blocks with residual connections: RMS-norm -> multi-head
causal self-attention -> residual, RMS-norm -> two-layer ReLU feed-forward ->
residual, with learned token and position embeddings and a final normalized
output projection. Decoding is greedy argmax with ties broken toward the
smaller token id, so (weights, prompt) fully determines every output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import CacheCorrupt, DimensionMismatch, InvalidConfig, SequenceTooLong
from .opcount import OpCounter
from .tensor_ops import AttentionBlock, masked_sparse_attention, scaled_dot_attention

WEIGHTS_FORMAT_VERSION = 1
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_k: int
    d_v: int
    vocab_size: int
    max_seq_len: int

    def validate(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "d_k", "d_v", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_json(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_k": self.d_k,
            "d_v": self.d_v,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
        }

    @staticmethod
    def from_json(doc: dict) -> "ModelConfig":
        cfg = ModelConfig(**{k: int(doc[k]) for k in (
            "n_layers", "n_heads", "d_model", "d_k", "d_v", "vocab_size", "max_seq_len")})
        cfg.validate()
        return cfg


@dataclass
class HeadWeights:
    w_q: np.ndarray  # (d_model, d_k)
    w_k: np.ndarray  # (d_model, d_k)
    w_v: np.ndarray  # (d_model, d_v)


@dataclass
class LayerWeights:
    heads: list[HeadWeights]
    w_o: np.ndarray  # (n_heads * d_v, d_model)
    attn_gain: np.ndarray  # (d_model,)
    ffn_gain: np.ndarray  # (d_model,)
    w1: np.ndarray  # (d_model, 4 * d_model)
    b1: np.ndarray
    w2: np.ndarray  # (4 * d_model, d_model)
    b2: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    token_embedding: np.ndarray  # (vocab, d_model)
    pos_embedding: np.ndarray  # (max_seq_len, d_model)
    layers: list[LayerWeights]
    final_gain: np.ndarray
    w_out: np.ndarray  # (d_model, vocab)
    b_out: np.ndarray


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Pseudo-random weights, uniform in [-0.1, 0.1], drawn from PCG64 in a
    fixed field order so the same (config, seed) is bit-identical."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    u = lambda *shape: rng.uniform(-0.1, 0.1, size=shape)
    c = config
    layers = []
    for _ in range(c.n_layers):
        heads = [
            HeadWeights(w_q=u(c.d_model, c.d_k), w_k=u(c.d_model, c.d_k), w_v=u(c.d_model, c.d_v))
            for _ in range(c.n_heads)
        ]
        layers.append(
            LayerWeights(
                heads=heads,
                w_o=u(c.n_heads * c.d_v, c.d_model),
                attn_gain=1.0 + u(c.d_model),
                ffn_gain=1.0 + u(c.d_model),
                w1=u(c.d_model, 4 * c.d_model),
                b1=u(4 * c.d_model),
                w2=u(4 * c.d_model, c.d_model),
                b2=u(c.d_model),
            )
        )
    return ModelWeights(
        config=c,
        token_embedding=u(c.vocab_size, c.d_model),
        pos_embedding=u(c.max_seq_len, c.d_model),
        layers=layers,
        final_gain=1.0 + u(c.d_model),
        w_out=u(c.d_model, c.vocab_size),
        b_out=u(c.vocab_size),
    )


def qkv_project(X: np.ndarray, head: HeadWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != head.w_q.shape[0]:
        raise DimensionMismatch(
            f"input width {X.shape} incompatible with head projection {head.w_q.shape}"
        )
    return X @ head.w_q, X @ head.w_k, X @ head.w_v


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x * gain / np.sqrt((x * x).mean(axis=-1, keepdims=True) + RMS_EPS)


class KVCache:
    """Per-layer, per-head key/value rows for every processed position.

    Preallocated to max_seq_len; `length` marks the filled prefix. This is
    the append-only archive; compressed decoding keeps its own retained-row
    working sets on top of it.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.length = 0
        self.k = [
            np.zeros((config.n_heads, config.max_seq_len, config.d_k))
            for _ in range(config.n_layers)
        ]
        self.v = [
            np.zeros((config.n_heads, config.max_seq_len, config.d_v))
            for _ in range(config.n_layers)
        ]

    def validate(self) -> None:
        c = self.config
        if not (0 <= self.length <= c.max_seq_len):
            raise CacheCorrupt(f"cache length {self.length} outside [0, {c.max_seq_len}]")
        if len(self.k) != c.n_layers or len(self.v) != c.n_layers:
            raise CacheCorrupt("cache layer count does not match the config")
        for layer in range(c.n_layers):
            if self.k[layer].shape != (c.n_heads, c.max_seq_len, c.d_k):
                raise CacheCorrupt(f"layer {layer} key array has a foreign shape")
            if self.v[layer].shape != (c.n_heads, c.max_seq_len, c.d_v):
                raise CacheCorrupt(f"layer {layer} value array has a foreign shape")

    def truncate(self, length: int) -> None:
        if not (0 <= length <= self.length):
            raise CacheCorrupt(f"cannot truncate length {self.length} to {length}")
        self.length = length


@dataclass
class ExtendResult:
    hidden: np.ndarray  # (n_new, d_model), pre-final-norm
    blocks: dict  # (layer, head) -> AttentionBlock, dense/sparse prefill only
    plans: dict  # (layer, head) -> SparsePlan, sparse prefill only
    obs_rows: dict  # (layer, head) -> (ids, attention row), decode only


def forward_extend(
    weights: ModelWeights,
    cache: KVCache,
    tokens: list[int],
    sparsifier=None,
    working_sets: dict | None = None,
    counter: OpCounter | None = None,
    collect_blocks: bool = True,
) -> ExtendResult:
    """Run the new tokens through all layers, appending their K/V to the cache.

    With `sparsifier` set, each head's attention is evaluated only on the plan
    the callback returns for (layer, head, Q_rows, K_all, row_positions).
    With `working_sets` set (single-token decode), each head attends to its
    retained global positions plus the new position.
    """
    c = weights.config
    if len(tokens) == 0:
        raise ValueError("tokens must be nonempty")
    cache.validate()
    start = cache.length
    n_new = len(tokens)
    if start + n_new > c.max_seq_len:
        raise SequenceTooLong(f"{start + n_new} tokens exceed max_seq_len={c.max_seq_len}")
    if working_sets is not None and n_new != 1:
        raise ValueError("working-set decoding processes one token per call")
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.min() < 0 or ids.max() >= c.vocab_size:
        raise DimensionMismatch("token id outside the vocabulary")

    positions = np.arange(start, start + n_new)
    x = weights.token_embedding[ids] + weights.pos_embedding[positions]
    n_total = start + n_new
    row_offset = start
    blocks: dict = {}
    plans: dict = {}
    obs_rows: dict = {}

    for layer_idx, layer in enumerate(weights.layers):
        normed = rms_norm(x, layer.attn_gain)
        head_outputs = []
        for head_idx, head in enumerate(layer.heads):
            Q, K_new, V_new = qkv_project(normed, head)
            kl = cache.k[layer_idx][head_idx]
            vl = cache.v[layer_idx][head_idx]
            kl[start:n_total] = K_new
            vl[start:n_total] = V_new
            if working_sets is not None:
                ws = np.asarray(working_sets[(layer_idx, head_idx)], dtype=np.intp)
                cols = np.append(ws, positions[-1])
                scores = (kl[cols] @ Q[0]) / math.sqrt(c.d_k)
                if counter is not None:
                    counter.add(len(cols))
                w = np.exp(scores - scores.max())
                w /= w.sum()
                head_outputs.append((w @ vl[cols])[None, :])
                obs_rows[(layer_idx, head_idx)] = (cols, w)
            elif sparsifier is not None:
                plan = sparsifier(layer_idx, head_idx, Q, kl[:n_total], positions)
                plans[(layer_idx, head_idx)] = plan
                Z, block = masked_sparse_attention(
                    Q, kl[:n_total], vl[:n_total], plan, row_offset,
                    counter=counter, return_weights=True,
                )
                head_outputs.append(Z)
                if collect_blocks:
                    blocks[(layer_idx, head_idx)] = block
            else:
                Z, block = scaled_dot_attention(
                    Q, kl[:n_total], vl[:n_total], row_offset, counter=counter
                )
                head_outputs.append(Z)
                if collect_blocks:
                    blocks[(layer_idx, head_idx)] = block
        x = x + np.concatenate(head_outputs, axis=1) @ layer.w_o
        h = rms_norm(x, layer.ffn_gain)
        x = x + np.maximum(h @ layer.w1 + layer.b1, 0.0) @ layer.w2 + layer.b2

    cache.length = n_total
    return ExtendResult(hidden=x, blocks=blocks, plans=plans, obs_rows=obs_rows)


def logits_from_hidden(weights: ModelWeights, hidden_rows: np.ndarray) -> np.ndarray:
    h = rms_norm(np.atleast_2d(hidden_rows), weights.final_gain)
    return h @ weights.w_out + weights.b_out


def forward_prefill(
    weights: ModelWeights,
    tokens: list[int],
    counter: OpCounter | None = None,
) -> tuple[np.ndarray, KVCache, dict]:
    """Dense causal forward pass over a fresh cache. Returns final hidden
    states, the filled cache, and every head's attention block."""
    cache = KVCache(weights.config)
    res = forward_extend(weights, cache, tokens, counter=counter)
    return res.hidden, cache, res.blocks


def argmax_token(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum: the documented smaller-id tie-break
    return int(np.argmax(logits))


def decode_step(
    weights: ModelWeights,
    cache: KVCache,
    last_token: int,
    working_sets: dict | None = None,
    counter: OpCounter | None = None,
):
    """Append last_token to the cache and predict its successor greedily.

    Returns (logits, next_token, obs_rows); obs_rows carries each head's
    attention row over the columns it actually attended to.
    """
    if working_sets is None:
        working_sets = {
            (l, h): np.arange(cache.length)
            for l in range(weights.config.n_layers)
            for h in range(weights.config.n_heads)
        }
    res = forward_extend(
        weights, cache, [last_token], working_sets=working_sets, counter=counter
    )
    logits = logits_from_hidden(weights, res.hidden[-1])[0]
    return logits, argmax_token(logits), res.obs_rows


def generate(
    weights: ModelWeights,
    prompt: list[int],
    max_new: int,
    eos_id: int | None = None,
    counter: OpCounter | None = None,
) -> list[int]:
    """Greedy autoregressive generation from a dense prefill of the prompt.

    Stops after max_new tokens or right after emitting eos_id.
    """
    if len(prompt) == 0:
        raise ValueError("prompt must be nonempty")
    if len(prompt) + max_new > weights.config.max_seq_len:
        raise SequenceTooLong(
            f"prompt {len(prompt)} + max_new {max_new} exceeds "
            f"max_seq_len={weights.config.max_seq_len}"
        )
    cache = KVCache(weights.config)
    res = forward_extend(weights, cache, prompt, counter=counter)
    token = argmax_token(logits_from_hidden(weights, res.hidden[-1])[0])
    out: list[int] = []
    while len(out) < max_new:
        out.append(token)
        if eos_id is not None and token == eos_id:
            break
        _, token, _ = decode_step(weights, cache, token, counter=counter)
    return out


# --- weights file format -----------------------------------------------------


def save_weights(weights: ModelWeights, path: str) -> None:
    doc = {
        "version": WEIGHTS_FORMAT_VERSION,
        "config": weights.config.to_json(),
        "weights": {
            "token_embedding": weights.token_embedding.tolist(),
            "pos_embedding": weights.pos_embedding.tolist(),
            "layers": [
                {
                    "heads": [
                        {"w_q": h.w_q.tolist(), "w_k": h.w_k.tolist(), "w_v": h.w_v.tolist()}
                        for h in layer.heads
                    ],
                    "w_o": layer.w_o.tolist(),
                    "attn_gain": layer.attn_gain.tolist(),
                    "ffn_gain": layer.ffn_gain.tolist(),
                    "w1": layer.w1.tolist(),
                    "b1": layer.b1.tolist(),
                    "w2": layer.w2.tolist(),
                    "b2": layer.b2.tolist(),
                }
                for layer in weights.layers
            ],
            "final_gain": weights.final_gain.tolist(),
            "w_out": weights.w_out.tolist(),
            "b_out": weights.b_out.tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def _arr(doc, shape, name) -> np.ndarray:
    a = np.asarray(doc, dtype=np.float64)
    if a.shape != shape:
        raise InvalidConfig(f"weights field {name} has shape {a.shape}, expected {shape}")
    if not np.isfinite(a).all():
        raise InvalidConfig(f"weights field {name} contains non-finite values")
    return a


def load_weights(path: str) -> ModelWeights:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != WEIGHTS_FORMAT_VERSION:
        raise InvalidConfig(f"unsupported weights file version {doc.get('version')!r}")
    c = ModelConfig.from_json(doc["config"])
    w = doc["weights"]
    layers = []
    if len(w["layers"]) != c.n_layers:
        raise InvalidConfig("layer count does not match the config")
    for li, ld in enumerate(w["layers"]):
        if len(ld["heads"]) != c.n_heads:
            raise InvalidConfig(f"layer {li} head count does not match the config")
        heads = [
            HeadWeights(
                w_q=_arr(hd["w_q"], (c.d_model, c.d_k), f"layers[{li}].w_q"),
                w_k=_arr(hd["w_k"], (c.d_model, c.d_k), f"layers[{li}].w_k"),
                w_v=_arr(hd["w_v"], (c.d_model, c.d_v), f"layers[{li}].w_v"),
            )
            for hd in ld["heads"]
        ]
        layers.append(
            LayerWeights(
                heads=heads,
                w_o=_arr(ld["w_o"], (c.n_heads * c.d_v, c.d_model), f"layers[{li}].w_o"),
                attn_gain=_arr(ld["attn_gain"], (c.d_model,), f"layers[{li}].attn_gain"),
                ffn_gain=_arr(ld["ffn_gain"], (c.d_model,), f"layers[{li}].ffn_gain"),
                w1=_arr(ld["w1"], (c.d_model, 4 * c.d_model), f"layers[{li}].w1"),
                b1=_arr(ld["b1"], (4 * c.d_model,), f"layers[{li}].b1"),
                w2=_arr(ld["w2"], (4 * c.d_model, c.d_model), f"layers[{li}].w2"),
                b2=_arr(ld["b2"], (c.d_model,), f"layers[{li}].b2"),
            )
        )
    return ModelWeights(
        config=c,
        token_embedding=_arr(w["token_embedding"], (c.vocab_size, c.d_model), "token_embedding"),
        pos_embedding=_arr(w["pos_embedding"], (c.max_seq_len, c.d_model), "pos_embedding"),
        layers=layers,
        final_gain=_arr(w["final_gain"], (c.d_model,), "final_gain"),
        w_out=_arr(w["w_out"], (c.d_model, c.vocab_size), "w_out"),
        b_out=_arr(w["b_out"], (c.vocab_size,), "b_out"),
    )
