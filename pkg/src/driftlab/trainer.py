"""Optimization loop: AdamW with warmup+cosine schedule, method dispatch
(sft / lora / lora+orthogonal / lora+feature:<site> / lora+selfaug),
per-epoch metrics, and resumable checkpoints.

Batch order is a seeded shuffle derived from (seed, epoch), independent of
the data-generation RNG, so interrupted runs resume bit-exactly and
methods sharing a seed see identical batches.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autograd import NumericError, Tape, Tensor, backward
from .checkpoint import Checkpoint, save_checkpoint
from .evaluation import MetricsRecord, eval_accuracy, measure_shift
from .lora import LoraConfig, LoraSet
from .losses import MethodSpec, parse_method, total_loss
from .model import FeatureCapture, ModelConfig, TransformerWeights, forward
from .reference import ReferenceModel
from .tasks import Corpus, TaskSpec, encode_batch, gen_general, generate

METRIC_COLUMNS = ["epoch", "method", "alpha", "rank", "ctx_len", "seed",
                  "downstream_acc", "retention_acc", "mean_input_kl",
                  "nll", "kl", "aux", "lr"]

_SHUFFLE_SALT = 0xB17C


class GateError(RuntimeError):
    """Pretraining missed its probe-accuracy gate."""

    def __init__(self, message: str, accuracy: float, curve: list):
        super().__init__(message)
        self.accuracy = accuracy
        self.curve = curve


@dataclass(frozen=True)
class TrainConfig:
    method: str = "lora"
    epochs: int = 3
    batch_size: int = 16
    peak_lr: float = 1e-3
    min_lr: float = 1e-4
    weight_decay: float = 0.1
    warmup_ratio: float = 0.05
    alpha: float = 0.5
    aux_weight: float = 0.1
    lora: Optional[LoraConfig] = LoraConfig()
    seed: int = 0
    grad_clip: Optional[float] = 1.0

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        parse_method(self.method)


# Full-parameter training takes a gentler peak than adapter training.
SFT_PEAK_LR = 1e-4
LORA_PEAK_LR = 1e-3


def default_train_config(method: str, **overrides) -> TrainConfig:
    peak = SFT_PEAK_LR if method == "sft" else LORA_PEAK_LR
    base = TrainConfig(method=method, peak_lr=peak, min_lr=peak / 10.0)
    return replace(base, **overrides) if overrides else base


class OptimizerState:
    """AdamW moment buffers; step counter increments per optimizer call."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: list[Tensor]):
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"opt.m.{i:04d}"] = m
            out[f"opt.v.{i:04d}"] = v
        return out

    def load_state_arrays(self, extras: dict[str, np.ndarray], step_count: int) -> None:
        for i in range(len(self.m)):
            self.m[i] = extras[f"opt.m.{i:04d}"].copy()
            self.v[i] = extras[f"opt.v.{i:04d}"].copy()
        self.step_count = step_count


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0->peak ramp over the warmup span, then cosine decay to min."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(cfg.warmup_ratio * total_steps))
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if total_steps == warmup:
        return cfg.peak_lr
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState,
               lr: float, weight_decay: float) -> None:
    """Decoupled weight decay, then bias-corrected adaptive update."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - OptimizerState.BETA1**t
    bc2 = 1.0 - OptimizerState.BETA2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise NumericError(f"missing gradient for parameter {i} at step {t}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {i} at step {t}")
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m = state.m[i]
        v = state.v[i]
        m *= OptimizerState.BETA1
        m += (1.0 - OptimizerState.BETA1) * g
        v *= OptimizerState.BETA2
        v += (1.0 - OptimizerState.BETA2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + OptimizerState.EPS)


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum(dtype=np.float64)) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(
        np.random.PCG64(np.random.SeedSequence((seed, _SHUFFLE_SALT, epoch)))
    )
    return rng.permutation(n)


def _assemble_reference(reference: ReferenceModel, batch, site: Optional[str]):
    bsz, width = batch.tokens.shape
    vocab = reference.config.vocab_size
    dtype = reference.weights.dtype
    ref_arr = np.zeros((bsz, width, vocab), dtype=dtype)
    feat_arrs = None
    for i in range(bsz):
        n = int(batch.lengths[i])
        lg, feats = reference.logits(batch.tokens[i, :n], site)
        ref_arr[i, :n] = lg.data
        if feats is not None:
            if feat_arrs is None:
                feat_arrs = [np.zeros((bsz, width) + f.shape[1:], dtype=dtype) for f in feats]
            for j, f in enumerate(feats):
                feat_arrs[j][i, :n] = f.data
    ref_feats = None if feat_arrs is None else [Tensor(a) for a in feat_arrs]
    return Tensor(ref_arr), ref_feats


def _train_step(weights, adapters, mspec: MethodSpec, batch, reference, cfg: TrainConfig,
                lr: float, opt: OptimizerState, trainables: list[Tensor]):
    need_ref = (mspec.kind == "lora+selfaug" and cfg.alpha != 0.0) or \
               (mspec.kind == "lora+feature" and cfg.aux_weight != 0.0)
    ref_logits = ref_feats = None
    if need_ref:
        ref_logits, ref_feats = _assemble_reference(reference, batch, mspec.feature_site)
    capture = FeatureCapture(mspec.feature_site) if mspec.kind == "lora+feature" else None
    for p in trainables:
        p.grad = None
    with Tape():
        logits = forward(weights, batch.tokens, capture=capture, adapters=adapters)
        breakdown = total_loss(
            mspec, logits, batch.labels, batch.masks,
            alpha=cfg.alpha if mspec.kind == "lora+selfaug" else 0.0,
            aux_weight=cfg.aux_weight if mspec.kind in ("lora+orthogonal", "lora+feature") else 0.0,
            reference_logits=ref_logits,
            student_features=capture.tensors if capture is not None else None,
            reference_features=ref_feats,
            adapters=adapters,
        )
        backward(breakdown.total)
    if cfg.grad_clip is not None:
        clip_gradients(trainables, cfg.grad_clip)
    adamw_step(trainables, [p.grad for p in trainables], opt, lr, cfg.weight_decay)
    return breakdown


@dataclass
class PretrainResult:
    weights: TransformerWeights
    curve: list[dict]
    probe_accuracy: float
    corpus: Corpus


def pretrain(model_cfg: ModelConfig, general_spec: TaskSpec, cfg: TrainConfig,
             gate: float = 0.9) -> PretrainResult:
    """Full-parameter NLL training on the general corpus; the returned
    checkpoint must clear the probe exact-match gate."""
    mspec = parse_method(cfg.method)
    if mspec.kind != "sft":
        raise ValueError("pretrain requires method 'sft'")
    corpus = gen_general(general_spec)
    weights = TransformerWeights(model_cfg)
    weights.set_requires_grad(True)
    trainables = weights.parameters()
    opt = OptimizerState(trainables)
    n = len(corpus.train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    curve: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_order(n, cfg.seed, epoch)
        for start in range(0, n, cfg.batch_size):
            chunk = [corpus.train[i] for i in order[start : start + cfg.batch_size]]
            batch = encode_batch(chunk, model_cfg.max_seq_len)
            lr = cosine_lr(opt.step_count + 1, total_steps, cfg)
            breakdown = _train_step(weights, None, mspec, batch, None, cfg, lr, opt, trainables)
            curve.append({"step": opt.step_count, "epoch": epoch,
                          "loss": breakdown.total_value, "lr": lr})
    weights.set_requires_grad(False)
    acc = eval_accuracy(weights, corpus.probe)
    if acc < gate:
        raise GateError(f"pretrain probe accuracy {acc:.3f} below gate {gate}", acc, curve)
    return PretrainResult(weights=weights, curve=curve, probe_accuracy=acc, corpus=corpus)


@dataclass
class FinetuneResult:
    weights: TransformerWeights
    adapters: Optional[LoraSet]
    opt: OptimizerState
    records: list[MetricsRecord]
    reference: ReferenceModel
    corpus: Corpus
    cfg: TrainConfig
    ctx_len: int


def finetune(base_weights: TransformerWeights,
             downstream: Union[TaskSpec, Corpus],
             cfg: TrainConfig,
             retention_probe: list,
             csv_path=None,
             start_epoch: int = 1,
             init_state: Optional[Checkpoint] = None,
             cache_reference: bool = True) -> FinetuneResult:
    """Fine-tune from a frozen starting checkpoint, recording per-epoch
    downstream accuracy, retention accuracy and mean input-logits KL.

    The metrics row for epoch 0 is the untrained starting point. Resume by
    passing the saved Checkpoint as init_state and the next epoch as
    start_epoch; batch order re-derives from (seed, epoch).
    """
    model_cfg = base_weights.config
    mspec = parse_method(cfg.method)
    corpus = generate(downstream) if isinstance(downstream, TaskSpec) else downstream
    reference = ReferenceModel(base_weights, cache_enabled=cache_reference)
    weights = base_weights.copy()
    if mspec.uses_lora:
        weights.set_requires_grad(False)
        adapters = LoraSet(weights, cfg.lora or LoraConfig(), cfg.seed)
        trainables = adapters.parameters()
    else:
        weights.set_requires_grad(True)
        adapters = None
        trainables = weights.parameters()
    opt = OptimizerState(trainables)
    if init_state is not None:
        if mspec.uses_lora:
            for name, t in adapters.named_parameters():
                t.data = init_state.extras[name].copy()
        else:
            for (_, dst), (_, src) in zip(weights.named_parameters(),
                                          init_state.weights.named_parameters()):
                dst.data = src.data.copy()
        opt.load_state_arrays(init_state.extras, int(init_state.meta["step_count"]))

    n = len(corpus.train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    ctx_len = int(round(float(np.mean([len(ex.input_tokens) for ex in corpus.train]))))
    rank = (cfg.lora.rank if (mspec.uses_lora and cfg.lora) else 0)

    records: list[MetricsRecord] = []

    def snapshot(epoch: int, nll=float("nan"), kl=float("nan"), aux=float("nan"),
                 lr=float("nan")) -> MetricsRecord:
        rec = MetricsRecord(
            epoch=epoch,
            downstream_acc=eval_accuracy(weights, corpus.probe, adapters=adapters),
            retention_acc=eval_accuracy(weights, retention_probe, adapters=adapters),
            mean_input_kl=measure_shift(weights, reference, corpus.probe, adapters=adapters),
            nll=nll, kl=kl, aux=aux, lr=lr,
        )
        records.append(rec)
        if csv_path is not None:
            _append_metrics_row(csv_path, rec, cfg, rank, ctx_len)
        return rec

    if start_epoch == 1:
        snapshot(0)
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = _epoch_order(n, cfg.seed, epoch)
        sums = {"nll": 0.0, "kl": 0.0, "aux": 0.0}
        steps = 0
        lr = float("nan")
        for start in range(0, n, cfg.batch_size):
            chunk = [corpus.train[i] for i in order[start : start + cfg.batch_size]]
            batch = encode_batch(chunk, model_cfg.max_seq_len)
            lr = cosine_lr(opt.step_count + 1, total_steps, cfg)
            breakdown = _train_step(weights, adapters, mspec, batch, reference, cfg,
                                    lr, opt, trainables)
            sums["nll"] += breakdown.nll_value
            sums["kl"] += breakdown.kl_value
            sums["aux"] += breakdown.aux_value
            steps += 1
        reference.verify_checksum()
        snapshot(epoch, nll=sums["nll"] / steps, kl=sums["kl"] / steps,
                 aux=sums["aux"] / steps, lr=lr)
    return FinetuneResult(weights=weights, adapters=adapters, opt=opt, records=records,
                          reference=reference, corpus=corpus, cfg=cfg, ctx_len=ctx_len)


def _append_metrics_row(path, rec: MetricsRecord, cfg: TrainConfig, rank: int,
                        ctx_len: int) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_COLUMNS)
        writer.writerow([rec.epoch, cfg.method, cfg.alpha, rank, ctx_len, cfg.seed,
                         rec.downstream_acc, rec.retention_acc, rec.mean_input_kl,
                         rec.nll, rec.kl, rec.aux, rec.lr])


def save_finetune_checkpoint(result: FinetuneResult, path) -> None:
    extras = dict(result.opt.state_arrays())
    if result.adapters is not None:
        for name, t in result.adapters.named_parameters():
            extras[name] = t.data
    meta = {
        "epoch": result.records[-1].epoch if result.records else 0,
        "method": result.cfg.method,
        "seed": result.cfg.seed,
        "step_count": result.opt.step_count,
    }
    save_checkpoint(path, result.weights, extras=extras, meta=meta)
