"""Experiment sweeps over the analysis axes: loss weight, adapter rank,
context length, alignment position, and full- vs low-rank fine-tuning.

Every sweep point re-runs fine-tuning from one shared base checkpoint,
>=3 seeds per point, and reports seed mean and standard deviation plus a
directional verdict for the axis hypothesis.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .evaluation import MetricsRecord
from .lora import LoraConfig
from .model import TransformerWeights
from .tasks import Corpus, TaskSpec, TrainExample, generate, rag_spec_for_ctx
from .trainer import (
    LORA_PEAK_LR,
    SFT_PEAK_LR,
    TrainConfig,
    finetune,
)

SWEEP_AXES = ("alpha", "rank", "ctx_len", "position", "method")

ABLATION_SITES = ("attn_q", "attn_k", "attn_v", "attn_o", "attn_all", "ffn",
                  "all_layers", "logits")


class SweepError(RuntimeError):
    """A sub-run failed; carries the completed-point inventory."""

    def __init__(self, message: str, completed: list, partial: Optional["SweepResult"]):
        super().__init__(message)
        self.completed = completed
        self.partial = partial


@dataclass
class SweepSettings:
    base_weights: TransformerWeights
    train_cfg: TrainConfig
    downstream_spec: TaskSpec
    retention_probe: list[TrainExample]


@dataclass
class SeedStats:
    seeds: list[int]
    records: list[MetricsRecord]

    def mean(self, metric: str) -> float:
        return float(np.mean([getattr(r, metric) for r in self.records]))

    def sd(self, metric: str) -> float:
        return float(np.std([getattr(r, metric) for r in self.records]))

    def best(self, metric: str, maximize: bool = True) -> float:
        vals = [getattr(r, metric) for r in self.records]
        return float(max(vals) if maximize else min(vals))


@dataclass
class SweepPoint:
    value: object
    per_method: dict[str, SeedStats] = field(default_factory=dict)


@dataclass
class SweepResult:
    axis: str
    points: list[SweepPoint]
    hypothesis: str
    verdict: bool
    rows: list[dict] = field(default_factory=list)

    def stats(self, value, method: str) -> SeedStats:
        for p in self.points:
            if p.value == value:
                return p.per_method[method]
        raise KeyError(f"no sweep point for value {value!r}")

    def summary_dict(self) -> dict:
        return {
            "axis": self.axis,
            "hypothesis": self.hypothesis,
            "verdict": "pass" if self.verdict else "fail",
            "points": [
                {
                    "value": p.value,
                    "methods": {
                        m: {
                            "seeds": st.seeds,
                            "downstream_acc": {"mean": st.mean("downstream_acc"),
                                               "sd": st.sd("downstream_acc"),
                                               "best": st.best("downstream_acc")},
                            "retention_acc": {"mean": st.mean("retention_acc"),
                                              "sd": st.sd("retention_acc"),
                                              "best": st.best("retention_acc")},
                            "mean_input_kl": {"mean": st.mean("mean_input_kl"),
                                              "sd": st.sd("mean_input_kl"),
                                              "best": st.best("mean_input_kl", maximize=False)},
                        }
                        for m, st in p.per_method.items()
                    },
                }
                for p in self.points
            ],
        }


def count_inversions(values, nonincreasing: bool = False) -> int:
    """Adjacent-pair violations of the requested monotone direction."""
    bad = 0
    for a, b in zip(values, values[1:]):
        if nonincreasing and b > a:
            bad += 1
        if not nonincreasing and b < a:
            bad += 1
    return bad


def _point_runs(axis: str, value, settings: SweepSettings) -> list[tuple[str, TrainConfig, TaskSpec]]:
    cfg = settings.train_cfg
    spec = settings.downstream_spec
    lora = cfg.lora or LoraConfig()
    if axis == "alpha":
        return [("lora+selfaug", replace(cfg, method="lora+selfaug", alpha=float(value)), spec)]
    if axis == "rank":
        # fixed delta multiplier across ranks isolates capacity
        lora_r = replace(lora, rank=int(value), scale=2.0 * int(value))
        return [(m, replace(cfg, method=m, lora=lora_r), spec)
                for m in ("lora", "lora+selfaug")]
    if axis == "ctx_len":
        spec_c = rag_spec_for_ctx(int(value), spec.seed, spec.n_examples,
                                  unanswerable_rate=spec.unanswerable_rate,
                                  distractor_rate=spec.distractor_rate)
        return [(m, replace(cfg, method=m), spec_c) for m in ("lora", "lora+selfaug")]
    if axis == "method":
        method = str(value)
        peak = SFT_PEAK_LR if method == "sft" else cfg.peak_lr
        return [(method, replace(cfg, method=method, peak_lr=peak, min_lr=peak / 10.0), spec)]
    if axis == "position":
        site = str(value)
        method = "lora+selfaug" if site == "logits" else f"lora+feature:{site}"
        return [(site, replace(cfg, method=method), spec)]
    raise ValueError(f"unknown sweep axis {axis!r}")


def _run_one(base_weights, run_cfg: TrainConfig, corpus: Corpus,
             retention_probe) -> MetricsRecord:
    result = finetune(base_weights, corpus, run_cfg, retention_probe)
    return result.records[-1]


def _worker(args):
    base_weights, run_cfg, corpus, retention_probe, key = args
    return key, _run_one(base_weights, run_cfg, corpus, retention_probe)


_HYPOTHESES = {
    "alpha": "retention accuracy nondecreasing and input-KL nonincreasing in the "
             "alignment weight (<=1 inversion each)",
    "rank": "plain-adapter input-KL grows with rank (<=1 inversion) and input-logits "
            "alignment improves retention at every rank",
    "ctx_len": "plain-adapter retention nonincreasing with context length; aligned "
               "retention at least matches it at every length",
    "method": "full-parameter fine-tuning shifts input logits at least as much as "
              "low-rank fine-tuning",
    "position": "aligning at the output logits retains the most general ability "
                "among all sites",
}


def _verdict(axis: str, points: list[SweepPoint]) -> bool:
    if axis == "alpha":
        ret = [p.per_method["lora+selfaug"].mean("retention_acc") for p in points]
        kl = [p.per_method["lora+selfaug"].mean("mean_input_kl") for p in points]
        return count_inversions(ret) <= 1 and count_inversions(kl, nonincreasing=True) <= 1
    if axis == "rank":
        kl = [p.per_method["lora"].mean("mean_input_kl") for p in points]
        gains = all(
            p.per_method["lora+selfaug"].mean("retention_acc")
            > p.per_method["lora"].mean("retention_acc")
            for p in points
        )
        return count_inversions(kl) <= 1 and gains
    if axis == "ctx_len":
        ret = [p.per_method["lora"].mean("retention_acc") for p in points]
        dominates = all(
            p.per_method["lora+selfaug"].mean("retention_acc")
            >= p.per_method["lora"].mean("retention_acc")
            for p in points
        )
        return count_inversions(ret, nonincreasing=True) == 0 and dominates
    if axis == "method":
        by = {p.value: p for p in points}
        return (by["sft"].per_method["sft"].mean("mean_input_kl")
                >= by["lora"].per_method["lora"].mean("mean_input_kl"))
    if axis == "position":
        means = {p.value: p.per_method[p.value].mean("retention_acc") for p in points}
        best = means["logits"]
        return all(best >= v for s, v in means.items() if s != "logits")
    raise ValueError(f"unknown sweep axis {axis!r}")


def run_sweep(axis: str, values, settings: SweepSettings, seeds,
              jobs: int = 1, out_dir=None) -> SweepResult:
    """One fine-tune per (value, method, seed); aggregates final-epoch
    metrics, emits CSV rows and a directional verdict."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("sweeps need at least 3 seeds")

    jobs_list = []
    corpora: dict = {}
    for value in values:
        for method_label, run_cfg, spec in _point_runs(axis, value, settings):
            ck = (spec.seed, spec.n_docs, spec.doc_len, spec.n_examples, spec.kind,
                  spec.unanswerable_rate, spec.distractor_rate)
            if ck not in corpora:
                corpora[ck] = generate(spec)
            for seed in seeds:
                cfg_s = replace(run_cfg, seed=int(seed))
                jobs_list.append(((value, method_label, int(seed)),
                                  cfg_s, corpora[ck]))

    results: dict[tuple, MetricsRecord] = {}
    completed: list[tuple] = []
    failure: Optional[Exception] = None
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [
                pool.submit(_worker, (settings.base_weights, cfg_s, corpus,
                                      settings.retention_probe, key))
                for key, cfg_s, corpus in jobs_list
            ]
            for fut in futs:
                try:
                    key, rec = fut.result()
                    results[key] = rec
                    completed.append(key)
                except Exception as exc:  # noqa: BLE001 - sub-run failures abort the sweep
                    failure = exc
                    break
    else:
        for key, cfg_s, corpus in jobs_list:
            try:
                results[key] = _run_one(settings.base_weights, cfg_s, corpus,
                                        settings.retention_probe)
                completed.append(key)
            except Exception as exc:  # noqa: BLE001
                failure = exc
                break

    points = []
    rows = []
    for value in values:
        point = SweepPoint(value=value)
        for method_label, _, _ in _point_runs(axis, value, settings):
            recs = [results[(value, method_label, s)] for s in seeds
                    if (value, method_label, s) in results]
            if len(recs) == len(seeds):
                point.per_method[method_label] = SeedStats(seeds=list(seeds), records=recs)
                for s, r in zip(seeds, recs):
                    rows.append({"axis": axis, "value": value, "method": method_label,
                                 "seed": s, "epoch": r.epoch,
                                 "downstream_acc": r.downstream_acc,
                                 "retention_acc": r.retention_acc,
                                 "mean_input_kl": r.mean_input_kl})
        if point.per_method:
            points.append(point)

    if failure is not None:
        partial = SweepResult(axis=axis, points=points, hypothesis=_HYPOTHESES[axis],
                              verdict=False, rows=rows)
        if out_dir is not None:
            _write_outputs(partial, out_dir, partial_inventory=completed)
        raise SweepError(f"sweep {axis} aborted: {failure}", completed, partial) from failure

    result = SweepResult(axis=axis, points=points, hypothesis=_HYPOTHESES[axis],
                         verdict=_verdict(axis, points), rows=rows)
    if out_dir is not None:
        _write_outputs(result, out_dir)
    return result


def ablate_alignment_position(sites, settings: SweepSettings, seeds,
                              jobs: int = 1, out_dir=None) -> SweepResult:
    """One fine-tune per alignment site from the shared base checkpoint;
    site 'logits' dispatches to input-logits KL alignment."""
    unknown = set(sites) - set(ABLATION_SITES)
    if unknown:
        raise ValueError(f"unknown ablation sites: {sorted(unknown)}")
    return run_sweep("position", list(sites), settings, seeds, jobs=jobs, out_dir=out_dir)


def _write_outputs(result: SweepResult, out_dir, partial_inventory=None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"sweep_{result.axis}.csv"
    cols = ["axis", "value", "method", "seed", "epoch", "downstream_acc",
            "retention_acc", "mean_input_kl"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in result.rows:
            writer.writerow(row)
    summary = result.summary_dict()
    if partial_inventory is not None:
        summary["partial"] = True
        summary["completed_runs"] = [list(k) for k in partial_inventory]
    with open(out_dir / f"sweep_{result.axis}_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
