"""Command-line workbench driver.

Subcommands cover the full loop: synth-gen, pretrain, refine, refine-unsup,
optimize-seq, eval and flow-audit.  Every run takes an optional YAML config
plus repeatable --set key=value overrides (dotted paths into the config),
and writes into --out: the fully resolved config, a key=value report, the
training log and whatever artifact the command produces.  Reports and
checkpoints are bit-reproducible for a fixed (seed, config, data) triple, so
wall-clock timing goes to stderr only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np
import torch
import yaml

from . import __version__
from .pipelines import (PipelineError, TrainConfig, optimize_sequence,
                        pretrain_baseline, refine_anchored_unsupervised,
                        refine_with_flow)
from .evaluation import (evaluate_model, flow_quality_audit, write_report)
from .regressor import BodyRegressor, RegressorConfig, load_models, save_models
from .synthdata import SynthConfig, SyntheticDataset, generate_dataset

ENV_NUM_WORKERS = "FLOWFIT_NUM_WORKERS"


class ConfigError(ValueError):
    pass


def _apply_workers_env():
    raw = os.environ.get(ENV_NUM_WORKERS)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{ENV_NUM_WORKERS} must be an integer, got {raw!r}")
        if n < 1:
            raise ConfigError(f"{ENV_NUM_WORKERS} must be >= 1, got {n}")
        torch.set_num_threads(n)


def load_config(path: str | None, overrides: list, seed: int | None) -> dict:
    """YAML file + dotted --set overrides -> plain dict config."""
    cfg = {}
    if path:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
        if not isinstance(cfg, dict):
            raise ConfigError("config root must be a mapping")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a mapping")
        node[parts[-1]] = value
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _section(cfg: dict, name: str, cls):
    d = dict(cfg.get(name, {}) or {})
    if "seed" in cfg and "seed" not in d and "seed" in cls.__dataclass_fields__:
        d["seed"] = cfg["seed"]
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except (TypeError, PipelineError) as e:
        raise ConfigError(f"section {name!r}: {e}")


def _prepare_out(out: str, force: bool) -> str:
    if os.path.exists(out) and os.listdir(out) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    os.makedirs(out, exist_ok=True)
    return out


def _write_run_files(out: str, cfg: dict, report: dict, log_lines: list | None = None):
    resolved = dict(cfg)
    blob = json.dumps(resolved, sort_keys=True, default=str)
    with open(os.path.join(out, "config_resolved.yaml"), "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True)
    report = dict(report)
    report.setdefault("version", __version__)
    report.setdefault("config_hash", hashlib.sha256(blob.encode()).hexdigest()[:12])
    write_report(os.path.join(out, "report.txt"), report)
    if log_lines is not None:
        with open(os.path.join(out, "log.txt"), "w") as fh:
            for line in log_lines:
                fh.write(line + "\n")


def _load_dataset(cfg: dict, key: str = "dataset") -> SyntheticDataset:
    path = cfg.get(key)
    if not path:
        raise ConfigError(f"config key {key!r} (dataset directory) is required")
    try:
        return SyntheticDataset(path)
    except FileNotFoundError as e:
        raise ConfigError(f"not a dataset directory: {path} ({e})")


def _load_model(cfg: dict) -> tuple:
    path = cfg.get("checkpoint")
    if not path:
        raise ConfigError("config key 'checkpoint' is required")
    try:
        return load_models(path)
    except (FileNotFoundError, ValueError) as e:
        raise ConfigError(f"cannot load checkpoint {path}: {e}")


def cmd_synth_gen(cfg: dict, out: str) -> dict:
    scfg = _section(cfg, "synth", SynthConfig)
    data_dir = os.path.join(out, "dataset")
    os.makedirs(data_dir, exist_ok=True)
    generate_dataset(scfg, data_dir)
    ds = SyntheticDataset(data_dir)
    return {"dataset": data_dir, "num_frames": len(ds.frames),
            "num_pairs": len(ds.pairs), "seed": scfg.seed}, None


def cmd_pretrain(cfg: dict, out: str) -> dict:
    ds = _load_dataset(cfg)
    tcfg = _section(cfg, "train", TrainConfig)
    model, log = pretrain_baseline(ds, tcfg)
    save_models(os.path.join(out, "checkpoint.ckpt"), model.config, model,
                extra={"seed": tcfg.seed, "pipeline": "pretrain"})
    final = log.last()
    return {"final_loss": final.get("loss", float("nan")), "steps": tcfg.steps,
            "seed": tcfg.seed, "labeled_fraction": tcfg.label_fraction}, log


def cmd_refine(cfg: dict, out: str) -> dict:
    ds = _load_dataset(cfg)
    sup_ds = _load_dataset(cfg, "sup_dataset") if cfg.get("sup_dataset") else None
    tcfg = _section(cfg, "train", TrainConfig)
    _, model, context, _ = _load_model(cfg)
    model, context, log = refine_with_flow(ds, model, tcfg, context, sup_ds)
    save_models(os.path.join(out, "checkpoint.ckpt"), model.config, model, context,
                extra={"seed": tcfg.seed, "pipeline": "refine"})
    final = log.last()
    return {"final_loss": final.get("loss", float("nan")), "steps": tcfg.steps,
            "seed": tcfg.seed, "context_length": tcfg.context_length}, log


def cmd_refine_unsup(cfg: dict, out: str) -> dict:
    ds = _load_dataset(cfg)
    tcfg = _section(cfg, "train", TrainConfig)
    _, model, _, _ = _load_model(cfg)
    model, log = refine_anchored_unsupervised(ds, model, tcfg)
    save_models(os.path.join(out, "checkpoint.ckpt"), model.config, model,
                extra={"seed": tcfg.seed, "pipeline": "refine-unsup"})
    final = log.last()
    return {"final_loss": final.get("loss", float("nan")), "steps": tcfg.steps,
            "seed": tcfg.seed}, log


def cmd_optimize_seq(cfg: dict, out: str) -> dict:
    ds = _load_dataset(cfg)
    tcfg = _section(cfg, "train", TrainConfig)
    seq = cfg.get("sequence")
    if not seq:
        raise ConfigError("config key 'sequence' is required for optimize-seq")
    _, model, _, _ = _load_model(cfg)
    track, log = optimize_sequence(ds, model, seq, tcfg)
    np.save(os.path.join(out, "track.npy"), track)
    final = log.last()
    return {"final_loss": final.get("loss", float("nan")), "sequence": seq,
            "steps": tcfg.steps, "seed": tcfg.seed}, log


def cmd_eval(cfg: dict, out: str) -> dict:
    ds = _load_dataset(cfg)
    _, model, context, _ = _load_model(cfg)
    k = int(cfg.get("context_length", 0))
    rep = evaluate_model(ds, model, context, k)
    out_map = {"pmpjpe_mm": rep.pmpjpe_mm, "accel_err_mm_s2": rep.accel_err_mm_s2,
               "num_frames": rep.num_frames, "num_sequences": rep.num_sequences,
               "context_length": k}
    for seq, (p, a) in sorted(rep.per_sequence.items()):
        out_map[f"seq.{seq}.pmpjpe_mm"] = p
        out_map[f"seq.{seq}.accel_err_mm_s2"] = a
    if cfg.get("plots"):
        _plot_per_sequence(rep, os.path.join(out, "per_sequence.png"))
    return out_map, None


def cmd_flow_audit(cfg: dict, out: str) -> dict:
    ds = _load_dataset(cfg)
    _, model, _, _ = _load_model(cfg)
    deltas = tuple(cfg.get("deltas", (1, 3, 5, 7)))
    oracle = bool(cfg.get("oracle_positions", True))
    rep = flow_quality_audit(ds, model, deltas, oracle)
    out_map = {"oracle_positions": int(oracle)}
    out_map.update(rep.to_mapping())
    if cfg.get("plots"):
        _plot_audit(rep, os.path.join(out, "audit.png"))
    return out_map, None


def _plot_per_sequence(rep, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    seqs = sorted(rep.per_sequence)
    vals = [rep.per_sequence[s][0] for s in seqs]
    fig, ax = plt.subplots(figsize=(max(4, len(seqs) * 0.5), 3))
    ax.bar(range(len(seqs)), vals)
    ax.set_xticks(range(len(seqs)), seqs, rotation=90, fontsize=6)
    ax.set_ylabel("P-MPJPE (mm)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_audit(rep, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(4, 3))
    ds = list(rep.deltas)
    ax.plot(ds, [rep.mean_ratio[d] for d in ds], marker="o", label="mean")
    ax.plot(ds, [rep.median_ratio[d] for d in ds], marker="s", label="median")
    ax.set_xlabel("frame spacing")
    ax.set_ylabel("d_B / d_OF")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


_COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "pretrain": cmd_pretrain,
    "refine": cmd_refine,
    "refine-unsup": cmd_refine_unsup,
    "optimize-seq": cmd_optimize_seq,
    "eval": cmd_eval,
    "flow-audit": cmd_flow_audit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowfit",
        description="flow-guided body-regressor refinement workbench")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_workers_env()
        cfg = load_config(args.config, args.set, args.seed)
        out = _prepare_out(args.out, args.force)
        t0 = time.time()
        report, log = _COMMANDS[args.command](cfg, out)
        _write_run_files(out, cfg, report, log.to_lines() if log else None)
        print(f"[{args.command}] done in {time.time() - t0:.1f}s -> {out}",
              file=sys.stderr)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
