"""Low-rank adaptation of frozen base weights.

An adapter attaches a rank-r additive update ``scale * B @ A`` to a named
target layer. ``B`` starts at exactly zero, so a freshly adapted model is
bitwise identical to its frozen base; training moves only the adapter
pair. Targets are the in/out projections of every block (q/k/v/o for
attention blocks) plus the embedding table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, dropout, matmul

__all__ = [
    "LoraConfig",
    "LoraAdapter",
    "LORA_PRESETS",
    "select_target_layers",
    "attach_adapters",
    "lora_forward",
    "lora_merge",
    "trainable_fraction",
]


# Fine-tuning presets: the default rank-8 configuration, plus the
# higher-capacity rank-16 variant used by the jamba-style runs.
LORA_PRESETS = {
    "default": dict(rank=8, alpha=32.0, dropout=0.1),
    "jamba": dict(rank=16, alpha=32.0, dropout=0.1),
}


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 32.0
    dropout: float = 0.1

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")

    @staticmethod
    def preset(name: str) -> "LoraConfig":
        if name not in LORA_PRESETS:
            raise ValueError(f"unknown LoRA preset {name!r}")
        return LoraConfig(**LORA_PRESETS[name])


@dataclass
class LoraAdapter:
    """Rank-r pair attached to one target layer.

    For a base weight of shape [d_in, d_out]: ``a_lora`` is [r, d_in]-like
    on the input side and ``b_lora`` [*, r] on the output side, with
    ``b_lora`` zero at init so the adapter starts as an identity delta.
    """

    target_layer_name: str
    a_lora: Tensor
    b_lora: Tensor
    rank: int
    alpha: float
    dropout: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameter_count(self) -> int:
        return self.a_lora.size + self.b_lora.size


def _make_adapter(name, d_in, d_out, cfg: LoraConfig, rng, dtype) -> LoraAdapter:
    k = 1.0 / math.sqrt(d_in)
    a = rng.uniform(-k, k, (cfg.rank, d_in)).astype(dtype)
    b = np.zeros((d_out, cfg.rank), dtype=dtype)
    return LoraAdapter(
        target_layer_name=name,
        a_lora=Tensor(a, requires_grad=True),
        b_lora=Tensor(b, requires_grad=True),
        rank=cfg.rank,
        alpha=cfg.alpha,
        dropout=cfg.dropout,
    )


def select_target_layers(model) -> list:
    """Names of the layers LoRA adapts: embedding plus every block's
    projection layers (attention blocks contribute q/k/v/o)."""
    names = ["embed"]
    for block in model.blocks:
        if block.variant == "swa_hybrid":
            names += [f"{block.name}.{p}" for p in ("q_proj", "k_proj", "v_proj", "o_proj")]
        else:
            names += [f"{block.name}.in_proj", f"{block.name}.out_proj"]
    return names


def attach_adapters(model, cfg: LoraConfig, seed: int = 0) -> dict:
    """Create adapters for every target layer and register them on the model.

    The embedding adapter is stored transposed relative to linear layers:
    its delta is ``b_lora[V,r] @ a_lora[r,d]``, added row-wise at lookup.
    """
    rng = np.random.default_rng(seed)
    dtype = model.dtype
    adapters = {}
    for name in select_target_layers(model):
        if name == "embed":
            V, d = model.embed.shape
            # input side of the embedding delta is the d-dim axis
            a = rng.uniform(-1.0 / math.sqrt(d), 1.0 / math.sqrt(d), (cfg.rank, d))
            adapters[name] = LoraAdapter(
                target_layer_name=name,
                a_lora=Tensor(a.astype(dtype), requires_grad=True),
                b_lora=Tensor(np.zeros((V, cfg.rank), dtype=dtype), requires_grad=True),
                rank=cfg.rank,
                alpha=cfg.alpha,
                dropout=cfg.dropout,
            )
        else:
            w = model.named_weights()[name]
            d_in, d_out = w.shape
            adapters[name] = _make_adapter(name, d_in, d_out, cfg, rng, dtype)
    model.adapters = adapters
    return adapters


def lora_forward(
    x: Tensor,
    w_base: Tensor,
    adapter: LoraAdapter,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """y = x @ W + scale * drop(x) @ A^T @ B^T (dropout only in training)."""
    d_in, d_out = w_base.shape
    if adapter.a_lora.shape != (adapter.rank, d_in) or adapter.b_lora.shape != (
        d_out,
        adapter.rank,
    ):
        raise ShapeError(
            f"adapter {adapter.target_layer_name}: rank shapes "
            f"{adapter.a_lora.shape}/{adapter.b_lora.shape} do not fit weight {w_base.shape}"
        )
    y = matmul(x, w_base)
    xa = x
    if training and adapter.dropout > 0.0:
        if rng is None:
            raise ValueError("training-mode lora_forward needs an RNG for dropout")
        xa = dropout(x, adapter.dropout, rng, training=True)
    delta = matmul(matmul(xa, adapter.a_lora.swapaxes(0, 1)), adapter.b_lora.swapaxes(0, 1))
    return y + delta * adapter.scaling


def lora_merge(w_base: Tensor, adapter: LoraAdapter) -> Tensor:
    """Fold the adapter into the base weight: W + scale * (B @ A)^T.

    Forward with the merged weight equals the unmerged adapter forward in
    eval mode (dropout off) up to rounding.
    """
    delta = adapter.b_lora.data @ adapter.a_lora.data      # [d_out, d_in]
    return Tensor(w_base.data + adapter.scaling * delta.T)


def adapter_parameters(adapters: dict) -> dict:
    out = {}
    for name, ad in adapters.items():
        out[f"adapters/{name}/a_lora"] = ad.a_lora
        out[f"adapters/{name}/b_lora"] = ad.b_lora
    return out


def trainable_fraction(model, adapters: dict, extra: int = 0) -> float:
    """Trainable parameters (adapters + extra heads) over total base parameters."""
    trainable = sum(ad.parameter_count() for ad in adapters.values()) + extra
    total = model.parameter_count()
    return trainable / total


def merged_weights(model) -> dict:
    """Base weights with every adapter folded in (merged-export mode).

    The embedding delta adds row-wise (b_lora[V,r] @ a_lora[r,d]); linear
    targets merge through :func:`lora_merge`.
    """
    out = {}
    for name, t in model.named_weights().items():
        ad = model.adapters.get(name) if model.adapters else None
        if ad is None:
            out[name] = t.data.copy()
        elif name == "embed":
            out[name] = t.data + ad.scaling * (ad.b_lora.data @ ad.a_lora.data)
        else:
            out[name] = lora_merge(t, ad).data
    return out
