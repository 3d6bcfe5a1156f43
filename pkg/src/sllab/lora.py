"""Low-rank adapters on the attention projection matrices.

Base weights stay frozen; each wrapped projection W gets a correction
(alpha/rank) * B @ A where only A and B train. B starts at zero, so an
adapted model is exactly the base model until the first optimizer step.
Effective weights are composed on the fly, never written into the base,
which keeps the frozen-base guarantee checkable by byte hash.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import Model, ModelConfig, WeightOverrides, init_model
from .model import avg_nll as _model_avg_nll
from .model import forward_ids as _model_forward
from .model import generate_greedy as _model_generate
from .tensor import Tensor

TARGET_NAMES = ("w_q", "w_v")


class LoraAdapter:
    """One low-rank pair (A, B) wrapping a single attention projection."""

    def __init__(self, layer: int, target: str, rank: int, alpha: float,
                 a: Tensor, b: Tensor):
        self.layer = layer
        self.target = target
        self.rank = rank
        self.alpha = alpha
        self.a = a
        self.b = b

    @property
    def key(self) -> tuple[int, str]:
        return (self.layer, self.target)


def effective_weight(w: Tensor, adapter: LoraAdapter) -> Tensor:
    """W + (alpha/rank) * B @ A, composed on the active tape if any."""
    d_out, d_in = w.shape
    if adapter.b.shape != (d_out, adapter.rank) or adapter.a.shape != (adapter.rank, d_in):
        raise T.ShapeError(
            f"adapter shapes A{adapter.a.shape} B{adapter.b.shape} "
            f"do not fit weight {w.shape}"
        )
    return T.add(w, T.scale(T.matmul(adapter.b, adapter.a),
                            adapter.alpha / adapter.rank))


class AdaptedModel:
    """A frozen base model plus its trainable adapter set."""

    def __init__(self, base: Model, adapters: list[LoraAdapter]):
        self.base = base
        self.adapters = adapters

    @property
    def config(self) -> ModelConfig:
        return self.base.config

    def overrides(self) -> WeightOverrides:
        """Fresh effective weights for every wrapped target."""
        out: WeightOverrides = {}
        for ad in self.adapters:
            base_w = getattr(self.base.layers[ad.layer], ad.target)
            out[ad.key] = effective_weight(base_w, ad)
        return out

    def trainable_parameters(self) -> list[Tensor]:
        """Exactly the A and B tensors, ordered (layer, target, A before B)."""
        params: list[Tensor] = []
        for ad in self.adapters:
            params.extend((ad.a, ad.b))
        return params

    def trainable_count(self) -> int:
        return sum(p.data.size for p in self.trainable_parameters())

    def forward_ids(self, ids) -> Tensor:
        return _model_forward(self.base, ids, self.overrides())

    def avg_nll(self, text) -> float:
        return _model_avg_nll(self.base, text, self.overrides())

    def generate_greedy(self, prompt, max_new: int) -> bytes:
        return _model_generate(self.base, prompt, max_new, self.overrides())


def attach(model: Model, rank: int, alpha: float,
           targets: tuple[str, ...] = TARGET_NAMES, seed: int = 0) -> AdaptedModel:
    """Wrap the selected attention projections of every layer.

    A is drawn N(0, (1/rank)^2) from ``seed``; B starts at zero, so the
    adapted forward equals the base forward until training moves B. All
    base parameters are frozen by this call.
    """
    d = model.config.d_model
    if not 1 <= rank <= d:
        raise ConfigError(f"rank must be in [1, {d}], got {rank}")
    seen: set[str] = set()
    for t in targets:
        if t not in TARGET_NAMES:
            raise ConfigError(f"unknown adapter target {t!r}; valid: {TARGET_NAMES}")
        if t in seen:
            raise ConfigError(f"duplicate adapter target {t!r}")
        seen.add(t)

    model.set_requires_grad(False)
    rng = np.random.default_rng(seed)
    adapters = []
    for layer in range(model.config.n_layers):
        for target in TARGET_NAMES:
            if target not in targets:
                continue
            a = Tensor(rng.normal(0.0, 1.0 / rank, (rank, d)), requires_grad=True)
            b = Tensor(np.zeros((d, rank)), requires_grad=True)
            adapters.append(LoraAdapter(layer, target, rank, alpha, a, b))
    return AdaptedModel(model, adapters)


def merge(adapted: AdaptedModel) -> Model:
    """Bake effective weights into a plain trainable model copy."""
    base = adapted.base
    merged = init_model(base.config)
    for (_, dst), (_, src) in zip(merged.parameters(), base.parameters()):
        dst.data = src.data.copy()
        dst.requires_grad = True
    for ad in adapted.adapters:
        w = getattr(base.layers[ad.layer], ad.target)
        eff = effective_weight(w, ad)
        getattr(merged.layers[ad.layer], ad.target).data = eff.data.copy()
    return merged


def params_hash(tensors) -> str:
    """SHA-256 over raw little-endian float64 bytes, in the given order."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def base_hash(model: Model) -> str:
    return params_hash(t for _, t in model.parameters())
