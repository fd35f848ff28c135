"""Training loop, checkpoint archive, evaluation, and the semi-supervised sweep.

Checkpoints are zip archives holding `format.json` (tag and version),
`config.json` (model / objective / train configs, normalization statistics,
class names, schedule state) and `params.npz` (named float32 little-endian
parameter arrays). No pickled objects are stored.
"""

from __future__ import annotations

import io
import json
import time
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .analysis import ConfusionMatrix, MacroMetrics, macro_metrics
from .data import NO_LABEL, Dataset, feature_stats, mask_labels, standardize
from .distributions import draw_gumbel
from .model import ModelConfig, TVPTSTNetwork, build_network
from .objective import (
    Batch,
    ObjectiveConfig,
    compute_objective,
    concrete_temperature,
    preset,
)

CHECKPOINT_TAG = "tvptst-checkpoint"
CHECKPOINT_VERSION = 1


class UnsupportedModeError(ValueError):
    """A head or operation was requested that the checkpoint mode cannot serve."""


class CheckpointFormatError(ValueError):
    """The file is not a valid checkpoint archive."""


@dataclass
class TrainConfig:
    """Optimization settings; model shape lives in ModelConfig."""

    objective: str = "tvae"  # "ptst" | "tvae"
    preset: str = "VII"
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 4e-5
    decoupled_weight_decay: bool = False
    labelled_fraction: float = 1.0
    seed: int = 0
    eval_every: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if self.objective not in ("ptst", "tvae"):
            # allow passing a preset name directly as the objective
            from .objective import PRESET_NAMES

            if self.objective in PRESET_NAMES:
                self.preset = self.objective
                self.objective = "tvae"
            else:
                raise ValueError(f"unknown objective {self.objective!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size, eval_every must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.labelled_fraction <= 1.0:
            raise ValueError("labelled_fraction must be in (0, 1]")


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay lr0 * (1 - step/total): strictly decreasing, 0 at total_steps.

    Training steps run 0..total_steps-1, so the applied rate stays positive.
    """
    if total_steps <= 0:
        return base_lr
    return base_lr * (1.0 - step / total_steps)


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    lr: float
    metrics: dict[str, dict[str, float]]
    seconds: float


@dataclass
class RunRecord:
    """Per-epoch loss and metric trajectory of one training run."""

    seed: int
    objective: str
    preset: Optional[str]
    total_steps: int
    config: dict = field(default_factory=dict)
    epochs: list[EpochRecord] = field(default_factory=list)
    early_step_losses: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def final_metrics(self) -> dict[str, dict[str, float]]:
        for rec in reversed(self.epochs):
            if rec.metrics:
                return rec.metrics
        return {}

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            header = {
                "record": "run",
                "seed": self.seed,
                "objective": self.objective,
                "preset": self.preset,
                "total_steps": self.total_steps,
                "config": self.config,
                "early_step_losses": self.early_step_losses,
                "wall_seconds": self.wall_seconds,
            }
            fh.write(json.dumps(header) + "\n")
            for ep in self.epochs:
                fh.write(json.dumps({"record": "epoch", **asdict(ep)}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "RunRecord":
        lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        if not lines or lines[0].get("record") != "run":
            raise ValueError(f"{path} is not a run record")
        head = lines[0]
        run = cls(
            seed=head["seed"],
            objective=head["objective"],
            preset=head.get("preset"),
            total_steps=head["total_steps"],
            config=head.get("config", {}),
            early_step_losses=head.get("early_step_losses", []),
            wall_seconds=head.get("wall_seconds", 0.0),
        )
        for line in lines[1:]:
            line.pop("record", None)
            run.epochs.append(EpochRecord(**line))
        return run


@dataclass
class Checkpoint:
    """Everything needed to rebuild the trained network and preprocess inputs."""

    objective: str
    model_cfg: ModelConfig
    objective_cfg: Optional[ObjectiveConfig]
    train_cfg: TrainConfig
    norm_mean: np.ndarray
    norm_std: np.ndarray
    class_names: list[str]
    step: int
    total_steps: int
    state: dict[str, torch.Tensor]

    def build_model(self) -> TVPTSTNetwork:
        model = build_network(self.model_cfg, mode=self.objective, seed=self.train_cfg.seed)
        model.load_state_dict(self.state, strict=True)
        model.eval()
        return model

    def save(self, path: str | Path) -> None:
        config = {
            "objective": self.objective,
            "model": asdict(self.model_cfg),
            "objective_cfg": asdict(self.objective_cfg) if self.objective_cfg else None,
            "train": asdict(self.train_cfg),
            "norm_mean": self.norm_mean.astype(float).tolist(),
            "norm_std": self.norm_std.astype(float).tolist(),
            "class_names": self.class_names,
            "schedule": {"step": self.step, "total_steps": self.total_steps},
        }
        arrays = {k: v.detach().cpu().numpy().astype("<f4") for k, v in self.state.items()}
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr(
                "format.json",
                json.dumps({"format": CHECKPOINT_TAG, "version": CHECKPOINT_VERSION}),
            )
            zf.writestr("config.json", json.dumps(config, indent=2))
            zf.writestr("params.npz", buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            with zipfile.ZipFile(path) as zf:
                names = set(zf.namelist())
                if "format.json" not in names:
                    raise CheckpointFormatError(f"{path}: missing format.json")
                fmt = json.loads(zf.read("format.json"))
                if fmt.get("format") != CHECKPOINT_TAG:
                    raise CheckpointFormatError(f"{path}: format tag {fmt.get('format')!r}")
                if fmt.get("version") != CHECKPOINT_VERSION:
                    raise CheckpointFormatError(
                        f"{path}: unsupported version {fmt.get('version')!r}"
                    )
                config = json.loads(zf.read("config.json"))
                with np.load(io.BytesIO(zf.read("params.npz"))) as npz:
                    state = {
                        k: torch.from_numpy(npz[k].astype(np.float32)) for k in npz.files
                    }
        except zipfile.BadZipFile as exc:
            raise CheckpointFormatError(f"{path}: not a checkpoint archive") from exc
        obj_cfg = config.get("objective_cfg")
        return cls(
            objective=config["objective"],
            model_cfg=ModelConfig(**config["model"]),
            objective_cfg=ObjectiveConfig(**obj_cfg) if obj_cfg else None,
            train_cfg=TrainConfig(**config["train"]),
            norm_mean=np.asarray(config["norm_mean"], dtype=np.float32),
            norm_std=np.asarray(config["norm_std"], dtype=np.float32),
            class_names=list(config["class_names"]),
            step=config["schedule"]["step"],
            total_steps=config["schedule"]["total_steps"],
            state=state,
        )


def default_model_config(ds: Dataset, **overrides) -> ModelConfig:
    return ModelConfig(input_dim=ds.F, num_classes=ds.K, **overrides)


def _as_tensors(ds: Dataset, mean: np.ndarray, std: np.ndarray):
    x = torch.from_numpy(standardize(ds.features_array(), mean, std))
    labels = torch.from_numpy(ds.visible_labels())
    return x, labels, labels != NO_LABEL


def train(
    train_ds: Dataset,
    train_cfg: Optional[TrainConfig] = None,
    model_cfg: Optional[ModelConfig] = None,
    objective_cfg: Optional[ObjectiveConfig] = None,
    eval_ds: Optional[Dataset] = None,
) -> tuple[Checkpoint, RunRecord]:
    """Train a model on `train_ds`; returns the final checkpoint and run record.

    Applies `labelled_fraction` masking (stratified, seeded) before training.
    Deterministic per seed: identical seeds give identical run records.
    """
    if train_cfg is None:
        train_cfg = TrainConfig()
    if not train_ds.records:
        raise ValueError("training dataset is empty")
    if train_cfg.labelled_fraction < 1.0:
        train_ds = mask_labels(train_ds, train_cfg.labelled_fraction, train_cfg.seed)
    if model_cfg is None:
        model_cfg = default_model_config(train_ds)
    if objective_cfg is None and train_cfg.objective == "tvae":
        objective_cfg = preset(train_cfg.preset)
    if objective_cfg is not None and train_cfg.objective == "tvae":
        model_cfg = replace(model_cfg, centers_mode=objective_cfg.centers_mode)

    mean, std = feature_stats(train_ds.features_array())
    x_all, labels_all, mask_all = _as_tensors(train_ds, mean, std)
    if train_cfg.objective == "ptst" and not mask_all.any():
        raise ValueError("ptst objective needs at least one labelled record")

    model = build_network(model_cfg, mode=train_cfg.objective, seed=train_cfg.seed)
    model.train()
    opt_cls = torch.optim.AdamW if train_cfg.decoupled_weight_decay else torch.optim.Adam
    optimizer = opt_cls(model.parameters(), lr=train_cfg.lr,
                        weight_decay=train_cfg.weight_decay)

    n = len(train_ds)
    steps_per_epoch = (n + train_cfg.batch_size - 1) // train_cfg.batch_size
    total_steps = train_cfg.epochs * steps_per_epoch
    gen = torch.Generator().manual_seed(train_cfg.seed + 1)
    k = model_cfg.num_classes
    d = model_cfg.latent_dim
    needs_components = objective_cfg is not None and objective_cfg.use_gaussian_kl

    run = RunRecord(
        seed=train_cfg.seed,
        objective=train_cfg.objective,
        preset=train_cfg.preset if train_cfg.objective == "tvae" else None,
        total_steps=total_steps,
        config={
            "train": asdict(train_cfg),
            "model": asdict(model_cfg),
            "objective": asdict(objective_cfg) if objective_cfg else None,
        },
    )
    t_start = time.monotonic()
    step = 0
    for epoch in range(train_cfg.epochs):
        t_epoch = time.monotonic()
        order = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        last_lr = train_cfg.lr
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            batch = Batch(x=x_all[idx], labels=labels_all[idx], label_mask=mask_all[idx])
            last_lr = lr_schedule(step, total_steps, train_cfg.lr)
            for group in optimizer.param_groups:
                group["lr"] = last_lr

            if train_cfg.objective == "tvae":
                b = len(idx)
                eps = torch.randn((b, d), generator=gen)
                gumbel = draw_gumbel((b, k), generator=gen)
                temp = concrete_temperature(
                    step, total_steps,
                    objective_cfg.temperature_start, objective_cfg.temperature_end,
                )
                y_onehot = F.one_hot(batch.labels.clamp_min(0), k).float()
                outputs = model(
                    batch.x, y_onehot=y_onehot, label_mask=batch.label_mask,
                    eps=eps, gumbel=gumbel, temperature=temp,
                    per_class_posteriors=needs_components,
                )
            else:
                outputs = model(batch.x)

            loss = compute_objective(
                batch, outputs, objective_cfg or ObjectiveConfig(),
                step, total_steps, mode=train_cfg.objective,
            )
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            if step < 10:
                run.early_step_losses.append(float(loss.total.detach()))
            step += 1
            for name, value in loss.to_floats().items():
                sums[name] = sums.get(name, 0.0) + value

        metrics: dict[str, dict[str, float]] = {}
        if (epoch + 1) % train_cfg.eval_every == 0 or epoch == train_cfg.epochs - 1:
            target = eval_ds if eval_ds is not None else train_ds
            # Records without even a hidden label cannot be scored; skip the
            # epoch metrics rather than fail mid-run (eval_ds stays strict).
            if eval_ds is not None or not (target.hidden_labels() == NO_LABEL).any():
                report = _evaluate_model(
                    model, target, mean, std,
                    heads=default_heads(train_cfg.objective, objective_cfg),
                )
                metrics = {h: asdict(he.metrics) for h, he in report.heads.items()}
                model.train()
        run.epochs.append(
            EpochRecord(
                epoch=epoch,
                losses={name: val / steps_per_epoch for name, val in sums.items()},
                lr=last_lr,
                metrics=metrics,
                seconds=time.monotonic() - t_epoch,
            )
        )
    run.wall_seconds = time.monotonic() - t_start

    model.eval()
    ckpt = Checkpoint(
        objective=train_cfg.objective,
        model_cfg=model_cfg,
        objective_cfg=objective_cfg if train_cfg.objective == "tvae" else None,
        train_cfg=train_cfg,
        norm_mean=mean,
        norm_std=std,
        class_names=list(train_ds.class_names),
        step=step,
        total_steps=total_steps,
        state={key: val.detach().clone() for key, val in model.state_dict().items()},
    )
    return ckpt, run


@dataclass
class HeadEval:
    confusion: ConfusionMatrix
    metrics: MacroMetrics
    predictions: np.ndarray


@dataclass
class EvalReport:
    heads: dict[str, HeadEval]
    n_records: int

    def agreement(self, head_a: str, head_b: str) -> float:
        """Fraction of records on which two heads predict the same class."""
        a = self.heads[head_a].predictions
        b = self.heads[head_b].predictions
        return float((a == b).mean())

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "heads": {h: asdict(he.metrics) for h, he in self.heads.items()},
        }


def default_heads(objective: str, objective_cfg: Optional[ObjectiveConfig]) -> tuple[str, ...]:
    """Heads that carry trained signal for this run configuration."""
    if objective == "ptst":
        return ("y",)
    if objective_cfg is not None and not (
        objective_cfg.ce_on_z or objective_cfg.gamma2_mode != "off"
    ):
        return ("y", "cos")  # the latent classifier never receives gradient
    return ("y", "z", "cos")


def evaluate(
    ckpt: Checkpoint,
    ds: Dataset,
    heads: Optional[tuple[str, ...]] = None,
    batch_size: int = 256,
) -> EvalReport:
    """Deterministic evaluation of a checkpoint on `ds` using hidden labels."""
    if ds.K != ckpt.model_cfg.num_classes:
        raise ValueError(
            f"dataset has {ds.K} classes but checkpoint expects "
            f"{ckpt.model_cfg.num_classes}"
        )
    if ds.F != ckpt.model_cfg.input_dim:
        raise ValueError(
            f"dataset feature dim {ds.F} != checkpoint input dim "
            f"{ckpt.model_cfg.input_dim}"
        )
    model = ckpt.build_model()
    if heads is None:
        heads = default_heads(ckpt.objective, ckpt.objective_cfg)
    return _evaluate_model(model, ds, ckpt.norm_mean, ckpt.norm_std, heads,
                           batch_size=batch_size, objective=ckpt.objective)


def _evaluate_model(
    model: TVPTSTNetwork,
    ds: Dataset,
    mean: np.ndarray,
    std: np.ndarray,
    heads: tuple[str, ...],
    batch_size: int = 256,
    objective: Optional[str] = None,
) -> EvalReport:
    objective = objective or model.mode
    for head in heads:
        if head not in ("y", "z", "cos"):
            raise ValueError(f"unknown head {head!r}")
        if head in ("z", "cos") and objective == "ptst":
            raise UnsupportedModeError(
                f"head {head!r} requires a generative checkpoint, got objective 'ptst'"
            )
    y_true = ds.hidden_labels()
    if (y_true == NO_LABEL).any():
        raise ValueError("evaluation requires hidden labels on every record")

    model.eval()
    x = torch.from_numpy(standardize(ds.features_array(), mean, std))
    preds: dict[str, list[np.ndarray]] = {h: [] for h in heads}
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            out = model.infer(x[start:start + batch_size])
            scores = {"y": out.y_logits, "z": out.z_logits, "cos": out.cos_scores}
            for h in heads:
                preds[h].append(scores[h].argmax(dim=-1).numpy())

    report_heads = {}
    for h in heads:
        y_pred = np.concatenate(preds[h]) if preds[h] else np.zeros(0, dtype=np.int64)
        cm = ConfusionMatrix.from_predictions(y_true, y_pred, ds.K)
        report_heads[h] = HeadEval(confusion=cm, metrics=macro_metrics(cm), predictions=y_pred)
    return EvalReport(heads=report_heads, n_records=len(ds))


@dataclass
class SweepResult:
    """Rows of (labelled fraction, head, metrics) from the semi-supervised sweep."""

    rows: list[dict]

    def to_csv(self, path: str | Path) -> None:
        cols = ["fraction", "head", "oa", "precision", "recall", "f1"]
        lines = [",".join(cols)]
        for row in self.rows:
            lines.append(",".join(f"{row[c]:.4f}" if isinstance(row[c], float)
                                  else str(row[c]) for c in cols))
        Path(path).write_text("\n".join(lines) + "\n")


def semi_supervised_sweep(
    train_ds: Dataset,
    eval_ds: Dataset,
    fractions: tuple[float, ...],
    train_cfg: TrainConfig,
    model_cfg: Optional[ModelConfig] = None,
) -> tuple[SweepResult, dict[float, Checkpoint]]:
    """Train once per labelled fraction and evaluate each run on `eval_ds`."""
    rows = []
    checkpoints = {}
    for fraction in fractions:
        cfg = replace(train_cfg, labelled_fraction=fraction)
        ckpt, _ = train(train_ds, cfg, model_cfg=model_cfg, eval_ds=eval_ds)
        report = evaluate(ckpt, eval_ds)
        checkpoints[fraction] = ckpt
        for head, he in report.heads.items():
            rows.append({
                "fraction": fraction,
                "head": head,
                "oa": he.metrics.oa,
                "precision": he.metrics.precision,
                "recall": he.metrics.recall,
                "f1": he.metrics.f1,
            })
    return SweepResult(rows), checkpoints
