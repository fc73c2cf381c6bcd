"""Training objectives: response-span NLL, input-logits KL alignment,
intermediate-feature alignment, and their weighted composition.

Span masks are label-aligned: mask[i] classifies the prediction made at
position i (whose gold target is token i+1). Input and response masks are
disjoint; padding belongs to neither.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autograd import (
    ShapeError,
    Tensor,
    gather_index,
    log_softmax,
    mul,
    neg,
    sub,
    texp,
    tmean,
    tsum,
)


class DegenerateExampleError(ValueError):
    """A batch lacks the span positions a loss term needs."""


class ConfigurationError(ValueError):
    """A method was requested without the components it requires."""


METHOD_KINDS = ("sft", "lora", "lora+orthogonal", "lora+feature", "lora+selfaug")


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    feature_site: Optional[str] = None

    @property
    def uses_lora(self) -> bool:
        return self.kind != "sft"


def parse_method(method: str) -> MethodSpec:
    if method in ("sft", "lora", "lora+orthogonal", "lora+selfaug"):
        return MethodSpec(method)
    if method.startswith("lora+feature:"):
        site = method.split(":", 1)[1]
        if site == "logits":
            raise ConfigurationError("feature alignment at the logits site is lora+selfaug")
        from .model import CAPTURE_SITES

        if site not in CAPTURE_SITES:
            raise ConfigurationError(f"unknown feature site {site!r}")
        return MethodSpec("lora+feature", site)
    raise ConfigurationError(f"unknown method {method!r}")


@dataclass
class SpanMasks:
    input_mask: np.ndarray
    response_mask: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        if not (self.input_mask.shape == self.response_mask.shape == self.pad_mask.shape):
            raise ShapeError("span masks must share one shape")
        if np.logical_and(self.input_mask, self.response_mask).any():
            raise ValueError("input and response masks overlap")

    def row(self, i: int, length: Optional[int] = None) -> "SpanMasks":
        sl = slice(None) if length is None else slice(0, length)
        return SpanMasks(
            self.input_mask[i : i + 1, sl],
            self.response_mask[i : i + 1, sl],
            self.pad_mask[i : i + 1, sl],
        )


def _masked_mean(per_position: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    weights = Tensor(mask.astype(per_position.dtype))
    return mul(tsum(mul(per_position, weights)), 1.0 / count)


def nll_loss(logits: Tensor, labels: np.ndarray, masks: SpanMasks) -> Tensor:
    """Mean of -log p(label) over response-masked positions."""
    if not masks.response_mask.any():
        raise DegenerateExampleError("batch has no response positions")
    logp = log_softmax(logits)
    picked = gather_index(logp, np.asarray(labels))
    return _masked_mean(neg(picked), masks.response_mask)


def kl_input_alignment(student_logits: Tensor, reference_logits: Tensor,
                       masks: SpanMasks) -> Tensor:
    """Mean over input-masked positions of KL(softmax(student) || softmax(reference)).

    Computed in nats from the log-softmax of both sides; the reference must
    not carry gradient.
    """
    if student_logits.shape != reference_logits.shape:
        raise ShapeError(
            f"logit shapes differ: {student_logits.shape} vs {reference_logits.shape}"
        )
    if reference_logits.requires_grad:
        raise ValueError("reference logits must be gradient-free")
    if not masks.input_mask.any():
        raise DegenerateExampleError("batch has no input positions")
    logp_s = log_softmax(student_logits)
    logp_r = log_softmax(reference_logits)
    per_pos = tsum(mul(texp(logp_s), sub(logp_s, logp_r)), axis=-1)
    return _masked_mean(per_pos, masks.input_mask)


def feature_alignment_loss(student_features: Sequence[Tensor],
                           reference_features: Sequence[Tensor],
                           masks: SpanMasks) -> Tensor:
    """Mean squared feature difference over input-masked positions,
    averaged across captured tensors."""
    if len(student_features) != len(reference_features) or not student_features:
        raise ShapeError("feature lists must be nonempty and of equal length")
    if not masks.input_mask.any():
        raise DegenerateExampleError("batch has no input positions")
    total = None
    for s, r in zip(student_features, reference_features):
        if s.shape != r.shape:
            raise ShapeError(f"feature shapes differ: {s.shape} vs {r.shape}")
        if r.requires_grad:
            raise ValueError("reference features must be gradient-free")
        diff = sub(s, r)
        per_pos = tmean(mul(diff, diff), axis=-1)
        term = _masked_mean(per_pos, masks.input_mask)
        total = term if total is None else total + term
    return mul(total, 1.0 / len(student_features))


@dataclass
class LossBreakdown:
    nll: Tensor
    kl: Optional[Tensor]
    aux: Optional[Tensor]
    total: Tensor
    alpha: float
    aux_weight: float

    @property
    def nll_value(self) -> float:
        return self.nll.item()

    @property
    def kl_value(self) -> float:
        return self.kl.item() if self.kl is not None else 0.0

    @property
    def aux_value(self) -> float:
        return self.aux.item() if self.aux is not None else 0.0

    @property
    def total_value(self) -> float:
        return self.total.item()


def total_loss(
    method: MethodSpec,
    logits: Tensor,
    labels: np.ndarray,
    masks: SpanMasks,
    *,
    alpha: float = 0.0,
    aux_weight: float = 0.0,
    reference_logits: Optional[Tensor] = None,
    student_features: Optional[Sequence[Tensor]] = None,
    reference_features: Optional[Sequence[Tensor]] = None,
    adapters=None,
) -> LossBreakdown:
    """Compose the per-method objective. The returned .total is the tensor
    to backpropagate.

    A zero alpha or aux weight skips its term entirely, so e.g. selfaug
    with alpha=0 runs the identical tape as plain lora.
    """
    if isinstance(method, str):
        method = parse_method(method)
    nll = nll_loss(logits, labels, masks)
    kl = None
    aux = None
    total = nll
    if method.kind == "lora+selfaug" and alpha != 0.0:
        if reference_logits is None:
            raise ConfigurationError("lora+selfaug needs reference logits")
        kl = kl_input_alignment(logits, reference_logits, masks)
        total = total + mul(kl, alpha)
    elif method.kind == "lora+orthogonal" and aux_weight != 0.0:
        if adapters is None:
            raise ConfigurationError("lora+orthogonal needs adapters")
        aux = adapters.orthogonal_penalty_total()
        total = total + mul(aux, aux_weight)
    elif method.kind == "lora+feature" and aux_weight != 0.0:
        if student_features is None or reference_features is None:
            raise ConfigurationError("lora+feature needs captured features from both models")
        aux = feature_alignment_loss(student_features, reference_features, masks)
        total = total + mul(aux, aux_weight)
    return LossBreakdown(nll=nll, kl=kl, aux=aux, total=total,
                         alpha=alpha, aux_weight=aux_weight)
