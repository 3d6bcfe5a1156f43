"""Tiny decoder-only transformer LM over raw bytes.

Byte-level tokenizer (256 bytes + BOS + EOS), pre-norm attention blocks
with RMS normalization, ReLU feed-forward, sinusoidal position signal,
and an output projection tied to the embedding table. Everything runs on
the sllab tensor tape, so the same forward serves training (recorded)
and evaluation (pure).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import ContractError, Tensor

BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 128
    d_ff: int = 256
    seed: int = 0
    vocab_size: int = VOCAB_SIZE

    def validate(self) -> "ModelConfig":
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(
                f"vocab_size is fixed at {VOCAB_SIZE} by the byte tokenizer, "
                f"got {self.vocab_size}"
            )
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.context_len < 2:
            raise ConfigError(f"context_len must be >= 2, got {self.context_len}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        return self


class LayerWeights:
    """Weights of one transformer block.

    Attention projections are stored [d_out, d_in] and applied as
    ``x @ W.T``; feed-forward matrices are stored [d_in, d_out] and
    applied as ``x @ W``.
    """

    FIELDS = ("w_q", "w_k", "w_v", "w_o", "w_ff1", "w_ff2", "g_attn", "g_ff")

    def __init__(self, w_q, w_k, w_v, w_o, w_ff1, w_ff2, g_attn, g_ff):
        self.w_q = w_q
        self.w_k = w_k
        self.w_v = w_v
        self.w_o = w_o
        self.w_ff1 = w_ff1
        self.w_ff2 = w_ff2
        self.g_attn = g_attn
        self.g_ff = g_ff


class Model:
    """Base language model: embedding, transformer blocks, final norm."""

    def __init__(self, config: ModelConfig, embedding: Tensor,
                 layers: list[LayerWeights], g_final: Tensor):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.g_final = g_final
        self._pos = _sinusoid_table(config.context_len, config.d_model)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """All parameters in declaration order (the checkpoint order)."""
        out = [("embedding", self.embedding)]
        for i, layer in enumerate(self.layers):
            for field in LayerWeights.FIELDS:
                out.append((f"layer{i}.{field}", getattr(layer, field)))
        out.append(("g_final", self.g_final))
        return out

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.parameters():
            t.requires_grad = flag

    def forward_ids(self, ids) -> Tensor:
        return forward_ids(self, ids)

    def nll_stats(self, text) -> tuple[float, int]:
        return nll_stats(self, text)

    def avg_nll(self, text) -> float:
        return avg_nll(self, text)

    def generate_greedy(self, prompt, max_new: int) -> bytes:
        return generate_greedy(self, prompt, max_new)


def _sinusoid_table(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(d_model, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * (idx // 2) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table


# Weight init scale. The output projection is tied to the embedding table
# and frozen during adapter training, so achievable logit margins are capped
# at ~d_model*std: much below 0.1 the cap sits under what a 258-way softmax
# needs and adapter-only training cannot move predictions at all.
INIT_STD = 0.1


def init_model(config: ModelConfig) -> Model:
    """Seed-reproducible initialization: weights ~ N(0, INIT_STD^2),
    normalization gains at 1."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    std = INIT_STD
    d, f = config.d_model, config.d_ff

    def w(shape):
        return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    def gain():
        return Tensor(np.ones(d), requires_grad=True)

    embedding = w((config.vocab_size, d))
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                w_q=w((d, d)), w_k=w((d, d)), w_v=w((d, d)), w_o=w((d, d)),
                w_ff1=w((d, f)), w_ff2=w((f, d)),
                g_attn=gain(), g_ff=gain(),
            )
        )
    return Model(config, embedding, layers, gain())


# ---------------------------------------------------------------------------
# Tokenizer


def tokenize(text: str | bytes) -> list[int]:
    """BOS + raw bytes + EOS."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return [BOS_ID, *raw, EOS_ID]


def detokenize(ids) -> bytes:
    """Inverse of tokenize: drops the special ids, keeps the bytes."""
    return bytes(i for i in ids if i < 256)


def format_example(question: str, answer: str) -> str:
    """Training/evaluation text for one Q&A record."""
    return f"Q: {question}\nA: {answer}"


def format_prompt(question: str) -> str:
    """Generation prompt: the example format truncated before the answer."""
    return f"Q: {question}\nA:"


# ---------------------------------------------------------------------------
# Forward

WeightOverrides = dict[tuple[int, str], Tensor]


def _resolve(layer: LayerWeights, idx: int, name: str,
             overrides: WeightOverrides | None) -> Tensor:
    if overrides is not None:
        hit = overrides.get((idx, name))
        if hit is not None:
            return hit
    return getattr(layer, name)


def _forward_hidden(model: Model, ids, overrides: WeightOverrides | None) -> Tensor:
    """Final normalized hidden states [T, d_model] before the logit projection."""
    ids = list(ids)
    t = len(ids)
    if t == 0:
        raise ContractError("forward_ids: empty token sequence")
    cfg = model.config
    if t > cfg.context_len:
        raise ContractError(
            f"forward_ids: sequence length {t} exceeds context_len {cfg.context_len}"
        )
    n_heads = cfg.n_heads
    head_dim = cfg.d_model // n_heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)

    x = T.add(T.embedding_lookup(model.embedding, ids), Tensor(model._pos[:t]))
    for idx, layer in enumerate(model.layers):
        xn = T.rms_normalize(x, layer.g_attn)
        q = T.matmul(xn, T.transpose(_resolve(layer, idx, "w_q", overrides)))
        k = T.matmul(xn, T.transpose(_resolve(layer, idx, "w_k", overrides)))
        v = T.matmul(xn, T.transpose(_resolve(layer, idx, "w_v", overrides)))
        heads = []
        for h in range(n_heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt)
            attn = T.softmax_rows(T.causal_masked_fill(scores))
            heads.append(T.matmul(attn, vh))
        merged = heads[0] if n_heads == 1 else T.concat_cols(heads)
        x = T.add(x, T.matmul(merged, T.transpose(
            _resolve(layer, idx, "w_o", overrides))))

        hn = T.rms_normalize(x, layer.g_ff)
        ff = T.matmul(T.relu(T.matmul(hn, layer.w_ff1)), layer.w_ff2)
        x = T.add(x, ff)

    return T.rms_normalize(x, model.g_final)


def forward_ids(model: Model, ids, overrides: WeightOverrides | None = None) -> Tensor:
    """Logits [T, vocab] for a token-id sequence; causal by construction.

    ``overrides`` substitutes effective attention weights, which is how
    adapted models route their low-rank corrections through this forward.
    """
    final = _forward_hidden(model, ids, overrides)
    return T.matmul(final, T.transpose(model.embedding))


def _windows(ids: list[int], context_len: int):
    """Non-overlapping windows; each scores next-token prediction internally."""
    for start in range(0, len(ids), context_len):
        window = ids[start : start + context_len]
        if len(window) >= 2:
            yield window


def sequence_loss(model: Model, ids: list[int],
                  overrides: WeightOverrides | None = None) -> tuple[Tensor, int]:
    """Token-weighted next-token loss over one id sequence.

    Returns (sum-of-nll as a scalar tensor, number of predicted tokens).
    Long sequences are scored in non-overlapping context windows.
    """
    if len(ids) < 2:
        raise ContractError("sequence_loss: need at least 2 tokens")
    total: Tensor | None = None
    count = 0
    for window in _windows(ids, model.config.context_len):
        logits = forward_ids(model, window[:-1], overrides)
        n = len(window) - 1
        ce = T.cross_entropy(logits, window[1:])
        part = T.scale(ce, float(n))
        total = part if total is None else T.add(total, part)
        count += n
    return total, count


def nll_stats(model: Model, text: str | bytes,
              overrides: WeightOverrides | None = None) -> tuple[float, int]:
    """(sum of next-token nll, token count) for one text; evaluation-only."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    if len(text) == 0:
        raise ContractError("nll_stats: empty text")
    total, count = sequence_loss(model, tokenize(text), overrides)
    return float(total.data), count


def avg_nll(model: Model, text: str | bytes,
            overrides: WeightOverrides | None = None) -> float:
    """Mean next-token negative log-likelihood of a text, in nats."""
    total, count = nll_stats(model, text, overrides)
    return total / count


def generate_greedy(model: Model, prompt: str | bytes, max_new: int,
                    overrides: WeightOverrides | None = None) -> bytes:
    """Deterministic argmax decoding; returns only the continuation bytes.

    Stops at EOS or after max_new tokens. Argmax ties break toward the
    lowest token id. When the sequence outgrows the context window, the
    most recent context_len tokens condition the next step.
    """
    if max_new < 1:
        raise ContractError(f"generate_greedy: max_new must be >= 1, got {max_new}")
    raw = prompt.encode("utf-8") if isinstance(prompt, str) else bytes(prompt)
    ids = [BOS_ID, *raw]
    out: list[int] = []
    for _ in range(max_new):
        window = ids[-model.config.context_len :]
        hidden = _forward_hidden(model, window, overrides)
        # decoding needs only the last position's logits
        logits_last = hidden.data[-1] @ model.embedding.data.T
        nxt = int(np.argmax(logits_last))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        ids.append(nxt)
    return detokenize(out)
