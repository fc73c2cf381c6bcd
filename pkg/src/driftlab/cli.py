"""Command-line entry point: pretrain / finetune / sweep / report.

Configs are TOML with strict parsing: unknown keys are fatal, every field
has a default, and all randomness flows from config seeds. Exit codes:
0 success, 1 error, 2 gate failure or partial sweep. The DRIFTLAB_OUT
environment variable overrides [io].out_dir.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .checkpoint import load_checkpoint, save_checkpoint
from .lora import LoraConfig
from .model import ModelConfig
from .sweeps import SweepError, SweepSettings, run_sweep
from .tasks import TaskSpec
from .trainer import (
    GateError,
    TrainConfig,
    finetune,
    pretrain,
    save_finetune_checkpoint,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainSettings:
    epochs: int = 24
    batch_size: int = 32
    peak_lr: float = 3e-3
    min_lr: float = 5e-5
    weight_decay: float = 0.1
    warmup_ratio: float = 0.05
    seed: int = 0
    grad_clip: float = 1.0
    gate: float = 0.9

    def train_config(self) -> TrainConfig:
        return TrainConfig(method="sft", epochs=self.epochs, batch_size=self.batch_size,
                           peak_lr=self.peak_lr, min_lr=self.min_lr,
                           weight_decay=self.weight_decay, warmup_ratio=self.warmup_ratio,
                           seed=self.seed, grad_clip=self.grad_clip, lora=None, alpha=0.0)


@dataclass(frozen=True)
class EvalSettings:
    seeds: tuple = (1, 2, 3)
    alpha_values: tuple = (0.0, 0.1, 0.3, 0.5, 1.0)
    rank_values: tuple = (2, 8, 32)
    ctx_values: tuple = (64, 128, 256, 448)
    sites: tuple = ("attn_q", "attn_k", "attn_v", "attn_o", "attn_all", "ffn",
                    "all_layers", "logits")


@dataclass(frozen=True)
class IoSettings:
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    general: TaskSpec = TaskSpec(kind="general_instruction", seed=11, n_examples=4096)
    downstream: TaskSpec = TaskSpec(kind="rag_qa", seed=21, n_examples=320)
    pretrain: PretrainSettings = PretrainSettings()
    finetune: TrainConfig = TrainConfig(method="lora+selfaug")
    eval: EvalSettings = EvalSettings()
    io: IoSettings = IoSettings()


_SECTION_TYPES = {
    "model": ModelConfig,
    "pretrain": PretrainSettings,
    "eval": EvalSettings,
    "io": IoSettings,
}


def _coerce(value, target, path):
    if target is float and isinstance(value, int):
        return float(value)
    if target is tuple and isinstance(value, list):
        return tuple(value)
    if target is not None and not isinstance(value, target):
        raise ConfigError(f"{path}: expected {target.__name__}, got {type(value).__name__}")
    return value


_FIELD_TYPES = {int: int, float: float, str: str, bool: bool}


def _build_dataclass(cls, table: dict, path: str, base=None):
    if not isinstance(table, dict):
        raise ConfigError(f"{path}: expected a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in table.items():
        f = names[name]
        if f.type in ("int", int):
            kwargs[name] = _coerce(value, int, f"{path}.{name}")
        elif f.type in ("float", float):
            kwargs[name] = _coerce(value, float, f"{path}.{name}")
        elif f.type in ("str", str):
            kwargs[name] = _coerce(value, str, f"{path}.{name}")
        elif f.type in ("bool", bool):
            kwargs[name] = _coerce(value, bool, f"{path}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        if base is not None:
            return replace(base, **kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    defaults = ExperimentConfig()
    kwargs = {}
    known = {"model", "tasks", "pretrain", "finetune", "eval", "io"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    for section, cls in _SECTION_TYPES.items():
        if section in data:
            kwargs[section] = _build_dataclass(cls, data[section], section,
                                               base=getattr(defaults, section))
    if "tasks" in data:
        tasks_tbl = dict(data["tasks"])
        unknown = sorted(set(tasks_tbl) - {"general", "downstream"})
        if unknown:
            raise ConfigError(f"tasks.{unknown[0]}: unknown key")
        if "general" in tasks_tbl:
            kwargs["general"] = _build_dataclass(TaskSpec, tasks_tbl["general"],
                                                 "tasks.general", base=defaults.general)
        if "downstream" in tasks_tbl:
            kwargs["downstream"] = _build_dataclass(TaskSpec, tasks_tbl["downstream"],
                                                    "tasks.downstream", base=defaults.downstream)
    if "finetune" in data:
        ft_tbl = dict(data["finetune"])
        lora_tbl = ft_tbl.pop("lora", None)
        ft = _build_dataclass(TrainConfig, ft_tbl, "finetune", base=defaults.finetune)
        if lora_tbl is not None:
            lora = _build_dataclass(LoraConfig, lora_tbl, "finetune.lora",
                                    base=defaults.finetune.lora or LoraConfig())
            ft = replace(ft, lora=lora)
        kwargs["finetune"] = ft
    cfg = ExperimentConfig(**{**{f.name: getattr(defaults, f.name)
                                 for f in dataclasses.fields(ExperimentConfig)}, **kwargs})
    env_out = os.environ.get("DRIFTLAB_OUT")
    if env_out:
        cfg = replace(cfg, io=IoSettings(out_dir=env_out))
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def _base_checkpoint_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.io.out_dir) / "base.ckpt"


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg)
    base_path = _base_checkpoint_path(cfg)
    _refuse_overwrite(base_path, args.force)
    curve_path = out / "pretrain_curve.csv"
    try:
        result = pretrain(cfg.model, cfg.general, cfg.pretrain.train_config(),
                          gate=cfg.pretrain.gate)
    except GateError as exc:
        _write_curve(curve_path, exc.curve)
        report = {"gate": cfg.pretrain.gate, "probe_accuracy": exc.accuracy,
                  "status": "gate_failure", "curve_csv": str(curve_path)}
        with open(out / "pretrain_report.json", "w") as fh:
            json.dump(report, fh, indent=2)
        print(f"pretrain gate FAILED: probe accuracy {exc.accuracy:.3f} "
              f"< {cfg.pretrain.gate}", file=sys.stderr)
        return 2
    _write_curve(curve_path, result.curve)
    save_checkpoint(base_path, result.weights,
                    meta={"probe_accuracy": result.probe_accuracy, "kind": "base"})
    print(f"pretrain ok: probe accuracy {result.probe_accuracy:.3f}; "
          f"checkpoint at {base_path}")
    return 0


def _write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "epoch", "loss", "lr"])
        writer.writeheader()
        for row in curve:
            writer.writerow(row)


def _method_label(method: str) -> str:
    return method.replace("+", "_").replace(":", "_")


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    ft = cfg.finetune
    if args.method:
        ft = replace(ft, method=args.method)
    if args.alpha is not None:
        ft = replace(ft, alpha=args.alpha)
    if args.rank is not None:
        if ft.method == "sft":
            raise ConfigError("--rank conflicts with method=sft (no adapters); "
                              "choose a lora method or drop --rank")
        ft = replace(ft, lora=replace(ft.lora or LoraConfig(), rank=args.rank))
    if args.seed is not None:
        ft = replace(ft, seed=args.seed)
    downstream = cfg.downstream
    if args.ctx_len is not None:
        from .tasks import rag_spec_for_ctx

        downstream = rag_spec_for_ctx(args.ctx_len, downstream.seed, downstream.n_examples,
                                      unanswerable_rate=downstream.unanswerable_rate,
                                      distractor_rate=downstream.distractor_rate)
    out = _out_dir(cfg)
    base_path = _base_checkpoint_path(cfg)
    if not base_path.exists():
        raise ConfigError(f"base checkpoint missing: {base_path} (run pretrain first)")
    label = _method_label(ft.method)
    ckpt_path = out / f"finetune_{label}.ckpt"
    csv_path = out / f"metrics_{label}.csv"
    _refuse_overwrite(ckpt_path, args.force)
    if csv_path.exists() and args.force:
        csv_path.unlink()
    elif csv_path.exists():
        raise ConfigError(f"{csv_path} exists; pass --force to overwrite")
    base = load_checkpoint(base_path)
    from .tasks import gen_general

    retention_probe = gen_general(cfg.general).probe
    result = finetune(base.weights, downstream, ft, retention_probe, csv_path=csv_path)
    save_finetune_checkpoint(result, ckpt_path)
    final = result.records[-1]
    print(f"finetune {ft.method} done: downstream {final.downstream_acc:.3f} "
          f"retention {final.retention_acc:.3f} input-KL {final.mean_input_kl:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(cfg)
    base_path = _base_checkpoint_path(cfg)
    if not base_path.exists():
        raise ConfigError(f"base checkpoint missing: {base_path} (run pretrain first)")
    csv_path = out / f"sweep_{args.axis}.csv"
    _refuse_overwrite(csv_path, args.force)
    base = load_checkpoint(base_path)
    from .tasks import gen_general

    retention_probe = gen_general(cfg.general).probe
    settings = SweepSettings(base_weights=base.weights, train_cfg=cfg.finetune,
                             downstream_spec=cfg.downstream,
                             retention_probe=retention_probe)
    values = {
        "alpha": cfg.eval.alpha_values,
        "rank": cfg.eval.rank_values,
        "ctx_len": cfg.eval.ctx_values,
        "position": cfg.eval.sites,
        "method": ("sft", "lora"),
    }[args.axis]
    try:
        result = run_sweep(args.axis, list(values), settings, cfg.eval.seeds,
                           jobs=args.jobs, out_dir=out)
    except SweepError as exc:
        print(f"sweep {args.axis} PARTIAL: {len(exc.completed)} runs completed "
              f"before failure: {exc}", file=sys.stderr)
        return 2
    print(f"sweep {args.axis}: verdict {'pass' if result.verdict else 'fail'} "
          f"({len(result.rows)} runs) -> {csv_path}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    csv_files = sorted(run_dir.glob("metrics_*.csv")) + sorted(run_dir.glob("sweep_*.csv"))
    if not csv_files:
        raise ConfigError(f"no metrics or sweep CSVs in {run_dir}")
    report: dict = {"runs": {}, "sweeps": {}}
    for path in csv_files:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if path.name.startswith("metrics_"):
            report["runs"][path.stem] = {"epochs": len(rows), "final": rows[-1] if rows else None}
        else:
            report["sweeps"][path.stem] = rows
    for summary in sorted(run_dir.glob("sweep_*_summary.json")):
        with open(summary) as fh:
            report["sweeps"][summary.stem] = json.load(fh)
    report_path = run_dir / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"{'name':40s} {'downstream':>10s} {'retention':>10s} {'input-KL':>10s}")
    for name, info in sorted(report["runs"].items()):
        final = info["final"] or {}
        print(f"{name:40s} {float(final.get('downstream_acc', 'nan')):>10.3f} "
              f"{float(final.get('retention_acc', 'nan')):>10.3f} "
              f"{float(final.get('mean_input_kl', 'nan')):>10.4f}")
    print(f"report written to {report_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftlab",
        description="Desk-scale fine-tuning lab: distribution shift and forgetting "
                    "on synthetic tasks.",
        epilog="Exit codes: 0 success; 1 error (bad config/arguments); "
               "2 gate failure or partial sweep.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the base model and write base.ckpt")
    p.add_argument("config", help="path to a TOML experiment config")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune from base.ckpt with one method")
    p.add_argument("config")
    p.add_argument("--method", help="sft | lora | lora+orthogonal | "
                                    "lora+feature:<site> | lora+selfaug")
    p.add_argument("--alpha", type=float, help="alignment loss weight")
    p.add_argument("--rank", type=int, help="adapter rank (lora methods only)")
    p.add_argument("--ctx-len", type=int, dest="ctx_len",
                   help="target average context length (64/128/256/448)")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("sweep", help="run a multi-seed sweep over one axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True,
                   choices=["alpha", "rank", "ctx_len", "position", "method"])
    p.add_argument("--jobs", type=int, default=1, help="parallel sub-run processes")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="aggregate CSVs in a run directory")
    p.add_argument("run_dir")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
