"""Exact-match accuracy and the distribution-shift probe.

All metrics are pure functions of (checkpoint, probe set). Decoding for
accuracy runs batched for speed; causal masking makes the padded batch
rows agree with one-sequence decoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autograd import Tensor, no_grad
from .losses import ConfigurationError, kl_input_alignment
from .model import TransformerWeights, forward
from .reference import ReferenceModel
from .tasks import BOS, EOS, PAD, SEP, TrainExample, encode_batch


@dataclass
class MetricsRecord:
    epoch: int
    downstream_acc: float
    retention_acc: float
    mean_input_kl: float
    nll: float = float("nan")
    kl: float = float("nan")
    aux: float = float("nan")
    lr: float = float("nan")

    def __post_init__(self):
        if not 0.0 <= self.downstream_acc <= 1.0:
            raise ValueError(f"downstream_acc out of range: {self.downstream_acc}")
        if not 0.0 <= self.retention_acc <= 1.0:
            raise ValueError(f"retention_acc out of range: {self.retention_acc}")
        if self.mean_input_kl < 0:
            raise ValueError(f"mean_input_kl negative: {self.mean_input_kl}")


def greedy_decode_batch(weights: TransformerWeights, prompts: list[list[int]],
                        max_new: int, stop_token: int, adapters=None) -> list[list[int]]:
    """Per-row greedy continuation (ties -> lowest id); returns generated
    tokens per prompt, excluding the stop token."""
    bsz = len(prompts)
    lengths = np.array([len(p) for p in prompts], dtype=np.int64)
    width = int(lengths.max()) + max_new
    tokens = np.full((bsz, width), PAD, dtype=np.int64)
    for i, p in enumerate(prompts):
        tokens[i, : len(p)] = p
    generated: list[list[int]] = [[] for _ in range(bsz)]
    active = np.ones(bsz, dtype=bool)
    cur = lengths.copy()
    with no_grad():
        for _ in range(max_new):
            if not active.any():
                break
            view = tokens[:, : int(cur.max())]
            logits = forward(weights, view, adapters=adapters).data
            for i in np.flatnonzero(active):
                nxt = int(np.argmax(logits[i, cur[i] - 1]))
                if nxt == stop_token:
                    active[i] = False
                    continue
                tokens[i, cur[i]] = nxt
                generated[i].append(nxt)
                cur[i] += 1
    return generated


def eval_accuracy(weights: TransformerWeights, probe: list[TrainExample],
                  adapters=None, batch_size: int = 64) -> float:
    """Fraction of probe examples whose greedy decode exactly matches the
    gold response (abstains count as correct only against abstain gold)."""
    if not probe:
        raise ConfigurationError("empty probe set")
    gold = [ex.response_tokens for ex in probe]
    max_new = max(len(g) for g in gold) + 2
    hits = 0
    for start in range(0, len(probe), batch_size):
        chunk = probe[start : start + batch_size]
        prompts = [[BOS] + ex.input_tokens + [SEP] for ex in chunk]
        outs = greedy_decode_batch(weights, prompts, max_new, EOS, adapters=adapters)
        for out, g in zip(outs, gold[start : start + len(chunk)]):
            hits += int(out == g)
    return hits / len(probe)


def measure_shift(weights: TransformerWeights, reference: ReferenceModel,
                  probe: list[TrainExample], adapters=None,
                  batch_size: int = 64) -> float:
    """Mean over probe examples of the input-span KL against the reference."""
    if not probe:
        raise ConfigurationError("empty probe set")
    max_len = weights.config.max_seq_len
    kls: list[float] = []
    with no_grad():
        for start in range(0, len(probe), batch_size):
            chunk = probe[start : start + batch_size]
            batch = encode_batch(chunk, max_len)
            logits = forward(weights, batch.tokens, adapters=adapters)
            for i in range(len(chunk)):
                n = int(batch.lengths[i])
                ref_logits, _ = reference.logits(batch.tokens[i, :n])
                student_row = Tensor(logits.data[i : i + 1, :n])
                ref_row = Tensor(ref_logits.data[None, :, :])
                kl = kl_input_alignment(student_row, ref_row, batch.masks.row(i, n))
                # KL is nonnegative; float cancellation near equality can
                # leave ~1e-10 below zero
                kls.append(max(0.0, kl.item()))
    return float(np.mean(kls))
