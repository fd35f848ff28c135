"""Metrics, latent-space diagnostics, and parameter accounting."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

LATENT_MAGIC = b"LTNT"
LATENT_VERSION = 1
_NO_VALUE = 0xFFFF


@dataclass
class ConfusionMatrix:
    """Row = true class, column = predicted class."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        self.counts = counts

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray,
                         num_classes: int) -> "ConfusionMatrix":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise ValueError("y_true and y_pred must have the same length")
        if y_true.size and (y_true.min() < 0 or y_true.max() >= num_classes):
            raise ValueError("y_true contains labels outside [0, num_classes)")
        if y_pred.size and (y_pred.min() < 0 or y_pred.max() >= num_classes):
            raise ValueError("y_pred contains labels outside [0, num_classes)")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts)

    def to_csv(self, path: str | Path, class_names: Optional[Sequence[str]] = None) -> None:
        names = list(class_names) if class_names else [
            f"class_{k}" for k in range(self.num_classes)
        ]
        lines = ["true\\pred," + ",".join(names)]
        for i, row in enumerate(self.counts):
            lines.append(names[i] + "," + ",".join(str(int(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class MacroMetrics:
    """Overall accuracy and macro-averaged precision / recall / F1, in percent."""

    oa: float
    precision: float
    recall: float
    f1: float


def macro_metrics(cm: ConfusionMatrix, include_absent_classes: bool = False) -> MacroMetrics:
    """Compute OA and macro precision/recall/F1 from a confusion matrix.

    Zero-denominator precision/recall/F1 are scored 0. Classes with no true
    and no predicted instances are excluded from the macro averages unless
    `include_absent_classes` imputes them as zeros.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    oa = counts.trace() / total

    tp = np.diag(counts)
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, tp / col, 0.0)
        recall = np.where(row > 0, tp / row, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)

    keep = np.ones(cm.num_classes, dtype=bool) if include_absent_classes \
        else (row + col) > 0
    if keep.any():
        macro = (precision[keep].mean(), recall[keep].mean(), f1[keep].mean())
    else:
        macro = (0.0, 0.0, 0.0)
    return MacroMetrics(
        oa=100.0 * float(oa),
        precision=100.0 * float(macro[0]),
        recall=100.0 * float(macro[1]),
        f1=100.0 * float(macro[2]),
    )


def pca_variance_ratios(z: np.ndarray, n_components: int) -> np.ndarray:
    """Fraction of total variance captured by each top principal component.

    Returns `n_components` ratios in descending order; they sum to at most 1.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"z must be [N, D], got shape {z.shape}")
    n, d = z.shape
    if n < 2:
        raise ValueError("need at least 2 samples for PCA")
    if not 1 <= n_components <= d:
        raise ValueError(f"n_components must lie in [1, {d}]")
    centered = z - z.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (n - 1)
    eigvals = np.linalg.eigvalsh(cov)[::-1]
    eigvals = np.clip(eigvals, 0.0, None)
    total = eigvals.sum()
    if total <= 0:
        return np.zeros(n_components)
    return eigvals[:n_components] / total


@dataclass
class LatentDump:
    """Exported latents with labels and per-head predictions."""

    z: np.ndarray  # [N, D] float32
    parcel_ids: np.ndarray  # [N] int64
    labels: np.ndarray  # [N] int64, -1 where unknown
    predictions: dict[str, np.ndarray]  # head -> [N] int64

    def __post_init__(self):
        n = self.z.shape[0]
        if self.parcel_ids.shape != (n,) or self.labels.shape != (n,):
            raise ValueError("parcel_ids and labels must match z rows")
        for head, pred in self.predictions.items():
            if pred.shape != (n,):
                raise ValueError(f"predictions[{head!r}] must match z rows")

    def save_binary(self, path: str | Path) -> None:
        n, d = self.z.shape
        heads = ("y", "z", "cos")
        head = struct.pack("<4sBIII", LATENT_MAGIC, LATENT_VERSION, n, d, len(heads))
        rec = struct.Struct("<qHHHH")
        with open(path, "wb") as fh:
            fh.write(head)
            for i in range(n):
                vals = [
                    int(self.predictions[h][i]) if h in self.predictions else _NO_VALUE
                    for h in heads
                ]
                label = _NO_VALUE if self.labels[i] < 0 else int(self.labels[i])
                fh.write(rec.pack(int(self.parcel_ids[i]), label, *vals))
                fh.write(self.z[i].astype("<f4").tobytes())

    @classmethod
    def load_binary(cls, path: str | Path) -> "LatentDump":
        blob = Path(path).read_bytes()
        magic, version, n, d, n_heads = struct.unpack_from("<4sBIII", blob, 0)
        if magic != LATENT_MAGIC or version != LATENT_VERSION:
            raise ValueError(f"{path} is not a latent dump")
        heads = ("y", "z", "cos")[:n_heads]
        rec = struct.Struct("<qHHHH")
        offset = struct.calcsize("<4sBIII")
        z = np.zeros((n, d), dtype=np.float32)
        ids = np.zeros(n, dtype=np.int64)
        labels = np.zeros(n, dtype=np.int64)
        preds = {h: np.zeros(n, dtype=np.int64) for h in heads}
        for i in range(n):
            ids[i], label, *vals = rec.unpack_from(blob, offset)
            labels[i] = -1 if label == _NO_VALUE else label
            for h, v in zip(heads, vals):
                preds[h][i] = -1 if v == _NO_VALUE else v
            offset += rec.size
            z[i] = np.frombuffer(blob, dtype="<f4", count=d, offset=offset)
            offset += 4 * d
        return cls(z=z, parcel_ids=ids, labels=labels, predictions=preds)

    def save_csv(self, path: str | Path) -> None:
        n, d = self.z.shape
        heads = sorted(self.predictions)
        cols = ["parcel_id", "label"] + [f"pred_{h}" for h in heads] + [
            f"z_{j}" for j in range(d)
        ]
        lines = [",".join(cols)]
        for i in range(n):
            row = [str(int(self.parcel_ids[i])), str(int(self.labels[i]))]
            row += [str(int(self.predictions[h][i])) for h in heads]
            row += [f"{v:.6g}" for v in self.z[i]]
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")


def export_latents(ckpt, ds) -> LatentDump:
    """Deterministic latent export: z is the posterior mean under the argmax label."""
    import torch

    from .data import standardize
    from .training import UnsupportedModeError

    if ckpt.objective != "tvae":
        raise UnsupportedModeError("latent export requires a generative checkpoint")
    model = ckpt.build_model()
    x = torch.from_numpy(standardize(ds.features_array(), ckpt.norm_mean, ckpt.norm_std))
    zs, preds_y, preds_z, preds_cos = [], [], [], []
    with torch.no_grad():
        for start in range(0, x.shape[0], 256):
            out = model.infer(x[start:start + 256])
            zs.append(out.z.numpy())
            preds_y.append(out.y_logits.argmax(-1).numpy())
            preds_z.append(out.z_logits.argmax(-1).numpy())
            preds_cos.append(out.cos_scores.argmax(-1).numpy())
    return LatentDump(
        z=np.concatenate(zs).astype(np.float32),
        parcel_ids=np.array([r.parcel_id for r in ds.records], dtype=np.int64),
        labels=ds.hidden_labels(),
        predictions={
            "y": np.concatenate(preds_y).astype(np.int64),
            "z": np.concatenate(preds_z).astype(np.int64),
            "cos": np.concatenate(preds_cos).astype(np.int64),
        },
    )


@dataclass
class ParamCountReport:
    total: int
    by_module: dict[str, int]


def param_count(model_cfg, mode: str = "tvae") -> ParamCountReport:
    """Trainable parameters, broken down as encoder / decoder / heads / centers.

    The recognition head counts toward the encoder (it lives there); "heads"
    covers the latent Gaussian heads, the auxiliary classifier, and the cosine
    softmax temperature. Frozen center rows contribute zero.
    """
    from .model import build_network, count_trainable

    model = build_network(model_cfg, mode=mode)
    by_module = {"encoder": count_trainable(model.encoder), "decoder": 0,
                 "heads": 0, "centers": 0}
    if mode == "tvae":
        by_module["decoder"] = count_trainable(model.decoder)
        by_module["heads"] = (
            count_trainable(model.latent_heads)
            + count_trainable(model.aux_classifier)
            + model.cos_temperature.numel()
        )
        by_module["centers"] = count_trainable(model.centers)
    return ParamCountReport(total=sum(by_module.values()), by_module=by_module)


def save_variance_plot(ratios: np.ndarray, path: str | Path) -> None:
    """Bar chart of PCA variance ratios; needs the optional matplotlib extra."""
    plt = _require_matplotlib()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(1, len(ratios) + 1), 100.0 * np.asarray(ratios))
    ax.set_xlabel("principal component")
    ax.set_ylabel("variance explained (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_plot(cm: ConfusionMatrix, path: str | Path,
                        class_names: Optional[Sequence[str]] = None) -> None:
    """Heatmap of a confusion matrix; needs the optional matplotlib extra."""
    plt = _require_matplotlib()
    names = list(class_names) if class_names else [
        f"class_{k}" for k in range(cm.num_classes)
    ]
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(cm.num_classes), names, rotation=45, ha="right")
    ax.set_yticks(range(cm.num_classes), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _require_matplotlib():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ImportError(
            "plotting needs matplotlib; install the 'plots' extra"
        ) from exc
    return plt
