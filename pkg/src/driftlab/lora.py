"""Low-rank adapters over selected projection matrices, plus the
orthogonality penalty baseline.

Base matrices are stored input-by-output (applied as x @ W); adapter
factors follow the usual convention A: [r, in], B: [out, r], so the
out-by-in weight delta is (scale/r) * B @ A. B starts at zero, which makes
the adapted model exactly equal to its base until the first update.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, TYPE_CHECKING

import numpy as np

from .autograd import ShapeError, Tensor, matmul, mul, transpose, tsum

if TYPE_CHECKING:
    from .model import TransformerWeights

LORA_SITES = ("attn_q", "attn_k", "attn_v", "attn_o", "ffn_in", "ffn_out")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    scale: float = 16.0
    target_sites: tuple[str, ...] = LORA_SITES
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if not self.target_sites:
            raise ValueError("target_sites must be nonempty")
        unknown = set(self.target_sites) - set(LORA_SITES)
        if unknown:
            raise ValueError(f"unknown LoRA sites: {sorted(unknown)}")


class LoraAdapter:
    """One frozen base matrix plus trainable factors A and B."""

    def __init__(self, base: Tensor, rank: int, scale: float, init_std: float,
                 rng: np.random.Generator):
        in_dim, out_dim = base.shape
        self.base = base
        self.rank = rank
        self.scale = scale
        self.a = Tensor(rng.standard_normal((rank, in_dim)) * init_std,
                        requires_grad=True, dtype=base.dtype)
        self.b = Tensor(np.zeros((out_dim, rank)), requires_grad=True, dtype=base.dtype)

    @property
    def multiplier(self) -> float:
        return self.scale / self.rank


def lora_forward(adapter: LoraAdapter, x: Tensor) -> Tensor:
    """x @ W0 plus the scaled low-rank delta; gradients reach only A and B."""
    if x.shape[-1] != adapter.base.shape[0]:
        raise ShapeError(f"lora_forward: input width {x.shape} vs base {adapter.base.shape}")
    delta = matmul(matmul(x, transpose(adapter.a)), transpose(adapter.b))
    return matmul(x, adapter.base) + mul(delta, adapter.multiplier)


def merge(adapter: LoraAdapter) -> Tensor:
    """Base matrix with the delta folded in (same input-by-output layout)."""
    delta_oi = adapter.b.data @ adapter.a.data
    return Tensor(adapter.base.data + adapter.multiplier * delta_oi.T)


def orthogonal_penalty(base: Tensor, adapter: LoraAdapter) -> Tensor:
    """Squared Frobenius norm of W0^T @ dW (both taken out-by-in)."""
    delta_oi = mul(matmul(adapter.b, adapter.a), adapter.multiplier)
    prod = matmul(base, delta_oi)
    return tsum(mul(prod, prod))


class LoraSet:
    """Adapters for every (layer, site) pair selected by the config."""

    def __init__(self, weights: "TransformerWeights", config: LoraConfig, seed: int):
        self.config = config
        rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence((seed, 0x10AA))))
        self._adapters: dict[tuple[int, str], LoraAdapter] = {}
        for li, lw in enumerate(weights.layers):
            for site in LORA_SITES:
                if site not in config.target_sites:
                    continue
                base = {
                    "attn_q": lw.wq,
                    "attn_k": lw.wk,
                    "attn_v": lw.wv,
                    "attn_o": lw.wo,
                    "ffn_in": lw.w_in,
                    "ffn_out": lw.w_out,
                }[site]
                self._adapters[(li, site)] = LoraAdapter(
                    base, config.rank, config.scale, config.init_std, rng
                )

    def get(self, layer: int, site: str) -> Optional[LoraAdapter]:
        return self._adapters.get((layer, site))

    def items(self) -> Iterator[tuple[tuple[int, str], LoraAdapter]]:
        return iter(sorted(self._adapters.items()))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for (li, site), ad in self.items():
            yield f"lora.{li}.{site}.A", ad.a
            yield f"lora.{li}.{site}.B", ad.b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def orthogonal_penalty_total(self) -> Tensor:
        total = None
        for (_, _), ad in self.items():
            pen = orthogonal_penalty(ad.base, ad)
            total = pen if total is None else total + pen
        return total
