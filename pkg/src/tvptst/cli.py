"""Command-line experiment runner.

Commands: synthesize, train, evaluate, analyze, sweep, ablate. Every run
writes its fully resolved configuration to `config.resolved.json` in the
output directory, so a run can be reproduced with `--config` pointing at that
file. Precedence: explicit flags > config file > defaults. `TVAE_SEED` is the
seed fallback when neither a flag nor a config value supplies one.

Each output directory takes an exclusive lock file for the duration of the
run; concurrent runs must use distinct directories.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import (
    export_latents,
    param_count,
    pca_variance_ratios,
    save_confusion_plot,
    save_variance_plot,
)
from .data import SyntheticConfig, generate_synthetic
from .model import DecoderConfig, ModelConfig, StageConfig
from .objective import PRESET_NAMES, ObjectiveConfig, preset
from .sits_io import read_sits, write_sits
from .training import (
    Checkpoint,
    TrainConfig,
    evaluate,
    semi_supervised_sweep,
    train,
)

LOCK_NAME = ".tvptst.lock"


@dataclass
class ExperimentConfig:
    """Fully resolved run description, written next to every command's outputs."""

    command: str
    out: str
    data: Optional[str] = None
    eval_data: Optional[str] = None
    preset: Optional[str] = None
    model: Optional[ModelConfig] = None
    train: Optional[TrainConfig] = None
    objective: Optional[ObjectiveConfig] = None
    flags: Optional[dict] = None

    def save(self, path: Path) -> None:
        doc = {
            "command": self.command,
            "out": self.out,
            "data": self.data,
            "eval_data": self.eval_data,
            "preset": self.preset,
            "model": asdict(self.model) if self.model else None,
            "train": asdict(self.train) if self.train else None,
            "objective": asdict(self.objective) if self.objective else None,
            "flags": self.flags or {},
        }
        path.write_text(json.dumps(doc, indent=2) + "\n")


class CliError(Exception):
    """User-facing configuration or data error; exits with code 1."""


class _Resolver:
    """Applies flag > config-file > default precedence and records the result."""

    def __init__(self, args: argparse.Namespace, config_path: Optional[str]):
        self.args = vars(args)
        self.file: dict = {}
        if config_path:
            path = Path(config_path)
            if not path.exists():
                raise CliError(f"config file not found: {path}")
            doc = json.loads(path.read_text())
            self.file = doc.get("flags", doc) if isinstance(doc, dict) else {}
        self.resolved: dict = {}

    def get(self, key: str, default=None):
        value = self.args.get(key)
        if value is None:
            value = self.file.get(key, default)
        self.resolved[key] = value
        return value


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v != "")


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v != "")


def _resolve_seed(res: _Resolver) -> int:
    value = res.args.get("seed")
    if value is None:
        value = res.file.get("seed")
    if value is None:
        value = os.environ.get("TVAE_SEED")
    seed = int(value) if value is not None else 0
    res.resolved["seed"] = seed
    return seed


def _acquire_lock(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"output directory {out} is locked by another run "
            f"(remove {lock} if that run is dead)"
        ) from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    return lock


def _read_dataset(path: Optional[str], what: str):
    if not path:
        raise CliError(f"missing --{what}")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} file not found: {p}")
    return read_sits(p)


def _model_config(res: _Resolver, input_dim: int, num_classes: int,
                  centers_mode: str = "learnable") -> ModelConfig:
    channels = _int_list(res.get("channels", "32,64,128,256"))
    heads = _int_list(res.get("heads", "2,4,8,16"))
    depths = _int_list(res.get("depths", ",".join("1" * len(channels))))
    if not len(channels) == len(heads) == len(depths):
        raise CliError("--channels, --heads, --depths must have equal lengths")
    kernel = int(res.get("kernel_size", 3))
    stride = int(res.get("stride", 2))
    expansion = int(res.get("ffn_expansion", 1))
    stages = tuple(
        StageConfig(kernel_size=kernel, stride=stride, channels=c, depth=d,
                    heads=h, ffn_expansion=expansion)
        for c, h, d in zip(channels, heads, depths)
    )
    return ModelConfig(
        input_dim=input_dim,
        num_classes=num_classes,
        stages=stages,
        latent_dim=int(res.get("latent_dim", 256)),
        decoder=DecoderConfig(
            max_len=int(res.get("decoder_max_len", 512)),
            length_divisor=int(res.get("decoder_length_divisor", 1)),
        ),
        centers_mode=centers_mode,
        centers_seed=int(res.get("centers_seed", 0)),
        isotropic_gaussian=bool(res.get("isotropic", False)),
    )


def _train_config(res: _Resolver) -> tuple[TrainConfig, Optional[ObjectiveConfig]]:
    objective = res.get("objective", "tvae")
    preset_name = res.get("preset", "VII")
    if objective not in ("ptst", "tvae"):
        raise CliError(f"unknown --objective {objective!r} (choose ptst or tvae)")
    if preset_name not in PRESET_NAMES:
        raise CliError(
            f"unknown --preset {preset_name!r}; choose from {', '.join(sorted(PRESET_NAMES))}"
        )
    train_cfg = TrainConfig(
        objective=objective,
        preset=preset_name,
        epochs=int(res.get("epochs", 40)),
        batch_size=int(res.get("batch_size", 64)),
        lr=float(res.get("lr", 1e-4)),
        weight_decay=float(res.get("weight_decay", 4e-5)),
        decoupled_weight_decay=bool(res.get("decoupled_weight_decay", False)),
        labelled_fraction=float(res.get("labels_fraction", 1.0)),
        seed=_resolve_seed(res),
        eval_every=int(res.get("eval_every", 1)),
        deterministic=bool(res.get("deterministic", True)),
    )
    objective_cfg = None
    if objective == "tvae":
        objective_cfg = preset(preset_name)
        margin = res.get("margin")
        if margin is not None:
            objective_cfg = replace(objective_cfg, margin=float(margin))
    return train_cfg, objective_cfg


def _write_eval_outputs(report, class_names, out: Path) -> None:
    doc = report.to_dict()
    heads = sorted(report.heads)
    doc["agreement"] = {
        f"{a}_{b}": report.agreement(a, b)
        for i, a in enumerate(heads) for b in heads[i + 1:]
    }
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
    for head, he in report.heads.items():
        he.confusion.to_csv(out / f"confusion_{head}.csv", class_names)


def cmd_synthesize(args: argparse.Namespace) -> int:
    res = _Resolver(args, args.config)
    out = Path(args.out)
    lock = _acquire_lock(out)
    try:
        seed = _resolve_seed(res)
        proportions = res.get("proportions")
        cfg = SyntheticConfig(
            K=int(res.get("classes", 5)),
            T=int(res.get("timesteps", 64)),
            B=int(res.get("bands", 4)),
            n_parcels=int(res.get("parcels", 2000)),
            pixels_per_parcel=(
                int(res.get("pixels_min", 4)), int(res.get("pixels_max", 16))
            ),
            noise_sigma=float(res.get("noise_sigma", 0.05)),
            seed=seed,
            class_proportions=list(_float_list(proportions)) if proportions else None,
        )
        train_ds = generate_synthetic(cfg)
        test_cfg = replace(
            cfg, n_parcels=int(res.get("test_parcels", max(1, cfg.n_parcels // 4))),
            seed=seed + 1,
        )
        test_ds = generate_synthetic(test_cfg)
        write_sits(train_ds, out / "train.sits")
        write_sits(test_ds, out / "test.sits")
        ExperimentConfig(
            command="synthesize", out=str(out), flags=res.resolved
        ).save(out / "config.resolved.json")
        print(f"wrote {len(train_ds)} train / {len(test_ds)} test parcels to {out}")
        return 0
    finally:
        lock.unlink(missing_ok=True)


def cmd_train(args: argparse.Namespace) -> int:
    res = _Resolver(args, args.config)
    out = Path(args.out)
    lock = _acquire_lock(out)
    try:
        data_path = res.get("data")
        eval_path = res.get("eval")
        train_ds = _read_dataset(data_path, "data")
        eval_ds = read_sits(eval_path) if eval_path else None
        train_cfg, objective_cfg = _train_config(res)
        centers_mode = objective_cfg.centers_mode if objective_cfg else "learnable"
        model_cfg = _model_config(res, train_ds.F, train_ds.K, centers_mode)

        ckpt, run = train(train_ds, train_cfg, model_cfg=model_cfg,
                          objective_cfg=objective_cfg, eval_ds=eval_ds)
        ckpt.save(out / "checkpoint.zip")
        run.to_jsonl(out / "run.jsonl")
        report = evaluate(ckpt, eval_ds if eval_ds is not None else train_ds)
        _write_eval_outputs(report, ckpt.class_names, out)
        ExperimentConfig(
            command="train", out=str(out), data=data_path, eval_data=eval_path,
            preset=train_cfg.preset if train_cfg.objective == "tvae" else None,
            model=model_cfg, train=train_cfg, objective=objective_cfg,
            flags=res.resolved,
        ).save(out / "config.resolved.json")
        for head, he in report.heads.items():
            print(f"head {head}: OA {he.metrics.oa:.2f}  F1 {he.metrics.f1:.2f}")
        return 0
    finally:
        lock.unlink(missing_ok=True)


def cmd_evaluate(args: argparse.Namespace) -> int:
    res = _Resolver(args, args.config)
    out = Path(args.out)
    lock = _acquire_lock(out)
    try:
        ckpt_path = res.get("checkpoint")
        if not ckpt_path or not Path(ckpt_path).exists():
            raise CliError(f"checkpoint not found: {ckpt_path}")
        ckpt = Checkpoint.load(ckpt_path)
        ds = _read_dataset(res.get("data"), "data")
        heads_flag = res.get("heads")
        heads = tuple(str(heads_flag).split(",")) if heads_flag else None
        report = evaluate(ckpt, ds, heads=heads)
        _write_eval_outputs(report, ckpt.class_names, out)
        ExperimentConfig(
            command="evaluate", out=str(out), data=res.resolved.get("data"),
            flags=res.resolved,
        ).save(out / "config.resolved.json")
        for head, he in report.heads.items():
            print(f"head {head}: OA {he.metrics.oa:.2f}  F1 {he.metrics.f1:.2f}")
        return 0
    finally:
        lock.unlink(missing_ok=True)


def cmd_analyze(args: argparse.Namespace) -> int:
    res = _Resolver(args, args.config)
    out = Path(args.out)
    lock = _acquire_lock(out)
    try:
        ckpt_path = res.get("checkpoint")
        if not ckpt_path or not Path(ckpt_path).exists():
            raise CliError(f"checkpoint not found: {ckpt_path}")
        ckpt = Checkpoint.load(ckpt_path)
        ds = _read_dataset(res.get("data"), "data")
        report = evaluate(ckpt, ds)
        _write_eval_outputs(report, ckpt.class_names, out)

        dump = export_latents(ckpt, ds)
        dump.save_binary(out / "latents.bin")
        if res.get("csv", False):
            dump.save_csv(out / "latents.csv")
        n_components = int(res.get("components", 8))
        ratios = pca_variance_ratios(dump.z, n_components)
        (out / "pca_variance.json").write_text(json.dumps({
            "n_components": n_components,
            "ratios": [float(r) for r in ratios],
            "cumulative": [float(c) for c in np.cumsum(ratios)],
        }, indent=2) + "\n")

        counts = param_count(ckpt.model_cfg, mode=ckpt.objective)
        print(f"parameters: total {counts.total}")
        for name, value in counts.by_module.items():
            print(f"  {name}: {value}")
        if res.get("plots", False):
            save_variance_plot(ratios, out / "variance_ratios.png")
            for head, he in report.heads.items():
                save_confusion_plot(he.confusion, out / f"confusion_{head}.png",
                                    ckpt.class_names)
        ExperimentConfig(
            command="analyze", out=str(out), data=res.resolved.get("data"),
            flags=res.resolved,
        ).save(out / "config.resolved.json")
        return 0
    finally:
        lock.unlink(missing_ok=True)


def cmd_sweep(args: argparse.Namespace) -> int:
    res = _Resolver(args, args.config)
    out = Path(args.out)
    lock = _acquire_lock(out)
    try:
        train_ds = _read_dataset(res.get("data"), "data")
        eval_ds = _read_dataset(res.get("eval"), "eval")
        fractions = _float_list(res.get("fractions", "0.8,0.6,0.4,0.2"))
        train_cfg, objective_cfg = _train_config(res)
        centers_mode = objective_cfg.centers_mode if objective_cfg else "learnable"
        model_cfg = _model_config(res, train_ds.F, train_ds.K, centers_mode)
        result, _ = semi_supervised_sweep(train_ds, eval_ds, fractions, train_cfg,
                                          model_cfg=model_cfg)
        result.to_csv(out / "sweep.csv")
        ExperimentConfig(
            command="sweep", out=str(out), data=res.resolved.get("data"),
            eval_data=res.resolved.get("eval"), preset=train_cfg.preset,
            model=model_cfg, train=train_cfg, objective=objective_cfg,
            flags=res.resolved,
        ).save(out / "config.resolved.json")
        for row in result.rows:
            print(f"fraction {row['fraction']:.2f} head {row['head']}: "
                  f"OA {row['oa']:.2f}  F1 {row['f1']:.2f}")
        return 0
    finally:
        lock.unlink(missing_ok=True)


def cmd_ablate(args: argparse.Namespace) -> int:
    res = _Resolver(args, args.config)
    out = Path(args.out)
    lock = _acquire_lock(out)
    try:
        train_ds = _read_dataset(res.get("data"), "data")
        eval_ds = _read_dataset(res.get("eval"), "eval")
        presets_flag = res.get("presets", "I,II,III,IV,V,VI,VII")
        names = [p.strip() for p in str(presets_flag).split(",") if p.strip()]
        for name in names:
            if name not in PRESET_NAMES:
                raise CliError(f"unknown preset {name!r} in --presets")
        base_cfg, _ = _train_config(res)
        rows = []
        for name in names:
            objective_cfg = preset(name)
            train_cfg = replace(base_cfg, objective="tvae", preset=name)
            model_cfg = _model_config(res, train_ds.F, train_ds.K,
                                      objective_cfg.centers_mode)
            ckpt, _ = train(train_ds, train_cfg, model_cfg=model_cfg,
                            objective_cfg=objective_cfg)
            report = evaluate(ckpt, eval_ds)
            for head, he in report.heads.items():
                rows.append((name, head, he.metrics))
                print(f"preset {name} head {head}: OA {he.metrics.oa:.2f}  "
                      f"F1 {he.metrics.f1:.2f}")
        lines = ["preset,head,oa,precision,recall,f1"]
        for name, head, m in rows:
            lines.append(f"{name},{head},{m.oa:.4f},{m.precision:.4f},"
                         f"{m.recall:.4f},{m.f1:.4f}")
        (out / "ablate.csv").write_text("\n".join(lines) + "\n")
        ExperimentConfig(
            command="ablate", out=str(out), data=res.resolved.get("data"),
            eval_data=res.resolved.get("eval"), flags=res.resolved,
        ).save(out / "config.resolved.json")
        return 0
    finally:
        lock.unlink(missing_ok=True)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, help="RNG seed (falls back to $TVAE_SEED, then 0)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="training .sits file")
    p.add_argument("--eval", help="held-out .sits file")
    p.add_argument("--objective", choices=("ptst", "tvae"), help="training objective")
    p.add_argument("--preset", help="objective preset (I..VII, cos-*/dkl-*)")
    p.add_argument("--labels-fraction", dest="labels_fraction", type=float,
                   help="visible-label fraction for semi-supervised runs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--decoupled-weight-decay", dest="decoupled_weight_decay",
                   action="store_const", const=True)
    p.add_argument("--margin", type=float, help="cosine-loss margin override")
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--deterministic", action="store_const", const=True,
                   help="synchronous, seed-reproducible run (always on; kept explicit)")
    p.add_argument("--channels", help="per-stage channels, e.g. 32,64,128,256")
    p.add_argument("--heads", dest="heads", help="per-stage attention heads")
    p.add_argument("--depths", help="per-stage layer counts")
    p.add_argument("--kernel-size", dest="kernel_size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--ffn-expansion", dest="ffn_expansion", type=int)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--centers-seed", dest="centers_seed", type=int)
    p.add_argument("--isotropic", action="store_const", const=True)
    p.add_argument("--decoder-max-len", dest="decoder_max_len", type=int)
    p.add_argument("--decoder-length-divisor", dest="decoder_length_divisor", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvptst",
        description="Pyramid time-series transformer experiments on .sits datasets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="generate synthetic train/test datasets")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--parcels", type=int)
    p.add_argument("--test-parcels", dest="test_parcels", type=int)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--bands", type=int)
    p.add_argument("--pixels-min", dest="pixels_min", type=int)
    p.add_argument("--pixels-max", dest="pixels_max", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--proportions", help="comma list of class weights")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--heads", help="comma list among y,z,cos")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="latent export, PCA report, plots")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--components", type=int, help="PCA components (default 8)")
    p.add_argument("--csv", action="store_const", const=True,
                   help="also write latents.csv")
    p.add_argument("--plots", action="store_const", const=True,
                   help="write static plot images (needs matplotlib)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="semi-supervised labelled-fraction sweep")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--fractions", help="comma list, default 0.8,0.6,0.4,0.2")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="train and evaluate a list of presets")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--presets", help="comma list, default I..VII")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
