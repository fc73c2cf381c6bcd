"""Small decoder-only transformer over a byte-level vocabulary.

Pre-layernorm blocks, learned absolute positions, causal attention.
Forward optionally captures intermediate features (for alignment-position
ablations) and applies low-rank adapters at projection sites.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, TYPE_CHECKING

import numpy as np

from .autograd import (
    Tensor,
    add,
    causal_mask,
    embedding,
    gelu,
    layernorm,
    matmul,
    mul,
    no_grad,
    randn,
    reshape,
    softmax,
    transpose,
    zeros,
)

if TYPE_CHECKING:
    from .lora import LoraSet

CAPTURE_SITES = frozenset(
    {"attn_q", "attn_k", "attn_v", "attn_o", "attn_all", "ffn", "all_layers", "logits"}
)


class VocabError(ValueError):
    """A token id falls outside the configured vocabulary."""


class LengthError(ValueError):
    """A sequence exceeds the configured maximum length."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 260
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 512
    seed: int = 0
    tied_embeddings: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )


@dataclass
class FeatureCapture:
    """Collects intermediate tensors at one site; never alters the forward."""

    site: str
    tensors: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.site not in CAPTURE_SITES:
            raise ValueError(f"unknown capture site {self.site!r}")

    def grab(self, t: Tensor) -> None:
        self.tensors.append(t)


class LayerWeights:
    __slots__ = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w_in", "w_out")

    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, dtype, std: float):
        self.ln1_g = Tensor(np.ones(d), dtype=dtype)
        self.ln1_b = zeros(d, dtype=dtype)
        self.wq = randn((d, d), rng, std, dtype)
        self.wk = randn((d, d), rng, std, dtype)
        self.wv = randn((d, d), rng, std, dtype)
        self.wo = randn((d, d), rng, std, dtype)
        self.ln2_g = Tensor(np.ones(d), dtype=dtype)
        self.ln2_b = zeros(d, dtype=dtype)
        self.w_in = randn((d, d_ff), rng, std, dtype)
        self.w_out = randn((d_ff, d), rng, std, dtype)


class TransformerWeights:
    """All model parameters. Applied as x @ W (matrices stored input-by-output)."""

    def __init__(self, config: ModelConfig, dtype=np.float32, std: float = 0.02):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(np.random.PCG64(config.seed))
        c = config
        self.tok_emb = randn((c.vocab_size, c.d_model), rng, std, dtype)
        self.pos_emb = randn((c.max_seq_len, c.d_model), rng, std, dtype)
        self.layers = [LayerWeights(c.d_model, c.d_ff, rng, dtype, std) for _ in range(c.n_layers)]
        self.ln_f_g = Tensor(np.ones(c.d_model), dtype=dtype)
        self.ln_f_b = zeros(c.d_model, dtype=dtype)
        if c.tied_embeddings:
            self.out_w = self.tok_emb
        else:
            self.out_w = randn((c.vocab_size, c.d_model), rng, std, dtype)
        self.out_b = zeros(c.vocab_size, dtype=dtype)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Parameters in the fixed checkpoint field order."""
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, lw in enumerate(self.layers):
            for slot in LayerWeights.__slots__:
                yield f"layers.{i}.{slot}", getattr(lw, slot)
        yield "ln_f_g", self.ln_f_g
        yield "ln_f_b", self.ln_f_b
        if not self.config.tied_embeddings:
            yield "out_w", self.out_w
        yield "out_b", self.out_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def copy(self) -> "TransformerWeights":
        other = TransformerWeights(self.config, dtype=self.dtype)
        for (_, src), (_, dst) in zip(self.named_parameters(), other.named_parameters()):
            dst.data = src.data.copy()
        return other

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def _project(x: Tensor, base: Tensor, adapters: Optional["LoraSet"], layer: int, site: str) -> Tensor:
    if adapters is not None:
        adapter = adapters.get(layer, site)
        if adapter is not None:
            from .lora import lora_forward

            return lora_forward(adapter, x)
    return matmul(x, base)


def _validate_tokens(tokens: np.ndarray, config: ModelConfig) -> None:
    if tokens.size == 0:
        raise LengthError("empty token sequence")
    if tokens.shape[-1] > config.max_seq_len:
        raise LengthError(
            f"sequence length {tokens.shape[-1]} exceeds max_seq_len {config.max_seq_len}"
        )
    lo, hi = int(tokens.min()), int(tokens.max())
    if lo < 0 or hi >= config.vocab_size:
        raise VocabError(f"token id {hi if hi >= config.vocab_size else lo} outside "
                         f"[0, {config.vocab_size})")


def forward(
    weights: TransformerWeights,
    tokens,
    capture: Optional[FeatureCapture] = None,
    adapters: Optional["LoraSet"] = None,
) -> Tensor:
    """Teacher-forced logits for every position, [n, V] or [B, n, V].

    Position i's logits depend only on tokens[..i] (causal mask). Both the
    NLL and the input-alignment losses read from this single pass.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    _validate_tokens(tokens, weights.config)
    was_1d = tokens.ndim == 1
    if was_1d:
        tokens = tokens[None, :]
    cfg = weights.config
    bsz, n = tokens.shape
    head_dim = cfg.d_model // cfg.n_heads
    site = capture.site if capture is not None else None

    x = add(embedding(weights.tok_emb, tokens), embedding(weights.pos_emb, np.arange(n)))
    for li, lw in enumerate(weights.layers):
        h = layernorm(x, lw.ln1_g, lw.ln1_b)
        q = _project(h, lw.wq, adapters, li, "attn_q")
        k = _project(h, lw.wk, adapters, li, "attn_k")
        v = _project(h, lw.wv, adapters, li, "attn_v")
        if site in ("attn_q", "attn_all"):
            capture.grab(q)
        if site in ("attn_k", "attn_all"):
            capture.grab(k)
        if site in ("attn_v", "attn_all"):
            capture.grab(v)
        qh = transpose(reshape(q, (bsz, n, cfg.n_heads, head_dim)), (0, 2, 1, 3))
        kh = transpose(reshape(k, (bsz, n, cfg.n_heads, head_dim)), (0, 2, 1, 3))
        vh = transpose(reshape(v, (bsz, n, cfg.n_heads, head_dim)), (0, 2, 1, 3))
        scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
        attn = softmax(causal_mask(scores))
        ctx = reshape(transpose(matmul(attn, vh), (0, 2, 1, 3)), (bsz, n, cfg.d_model))
        o = _project(ctx, lw.wo, adapters, li, "attn_o")
        if site in ("attn_o", "attn_all"):
            capture.grab(o)
        x = add(x, o)
        h2 = layernorm(x, lw.ln2_g, lw.ln2_b)
        f = _project(gelu(_project(h2, lw.w_in, adapters, li, "ffn_in")), lw.w_out,
                     adapters, li, "ffn_out")
        if site == "ffn":
            capture.grab(f)
        x = add(x, f)
        if site == "all_layers":
            capture.grab(x)

    z = layernorm(x, weights.ln_f_g, weights.ln_f_b)
    logits = project_logits(z, weights.out_w, weights.out_b)
    if was_1d:
        logits = reshape(logits, (n, cfg.vocab_size))
    if site == "logits":
        capture.grab(logits)
    return logits


def project_logits(z: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """h[i] = z[i] @ W^T + b with W of shape [V, d] and b of shape [V]."""
    if z.shape[-1] != w.shape[-1]:
        raise ValueError(f"projection width mismatch: z {z.shape} vs W {w.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
    return add(matmul(z, transpose(w)), b)


def greedy_decode(
    weights: TransformerWeights,
    prompt,
    max_new: int,
    stop_token: int,
    adapters: Optional["LoraSet"] = None,
) -> np.ndarray:
    """Append argmax tokens (ties -> lowest id) until stop_token or max_new."""
    tokens = np.asarray(prompt, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("prompt must be a nonempty 1-d token sequence")
    with no_grad():
        for _ in range(max_new):
            logits = forward(weights, tokens, adapters=adapters)
            nxt = int(np.argmax(logits.data[-1]))
            tokens = np.append(tokens, nxt)
            if nxt == stop_token:
                break
    return tokens
