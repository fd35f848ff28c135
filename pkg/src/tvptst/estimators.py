"""Scikit-learn style wrappers around the training pipeline.

Both estimators consume `X` of shape [N, T, F] (parcel statistic series) and
integer labels. `y = -1` marks unlabelled records for the semi-supervised
estimator, matching the scikit-learn semi-supervised convention. Labels may
be arbitrary integers; they are mapped to contiguous class indices internally
and mapped back in `predict`.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, standardize
from .model import ModelConfig, StageConfig
from .training import TrainConfig, train
from .objective import preset as objective_preset

UNLABELLED = -1


def check_series_array(X, name: str = "X") -> np.ndarray:
    """Validate a [N, T, F] float array: 3-D, nonempty, finite."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape [N, T, F], got {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1 or X.shape[2] < 1:
        raise ValueError(f"{name} must be nonempty in every dimension, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return X


def check_labels(y, n_samples: int, name: str = "y") -> np.ndarray:
    """Validate integer labels of length n_samples; -1 marks unlabelled."""
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValueError(f"{name} must be a vector of length {n_samples}, got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ValueError(f"{name} must contain integer labels")
        y = y.astype(np.int64)
    y = y.astype(np.int64)
    if (y < UNLABELLED).any():
        raise ValueError(f"{name} labels must be >= -1 (-1 marks unlabelled)")
    return y


class _SeriesClassifierBase(BaseEstimator, ClassifierMixin):
    """Shared fit plumbing; subclasses choose the training objective."""

    _objective = "ptst"

    def _stage_configs(self) -> tuple[StageConfig, ...]:
        if not len(self.channels) == len(self.heads) == len(self.depths):
            raise ValueError("channels, heads, and depths must have equal length")
        return tuple(
            StageConfig(
                kernel_size=self.kernel_size,
                stride=self.stride,
                channels=c,
                depth=d,
                heads=h,
                ffn_expansion=self.ffn_expansion,
            )
            for c, h, d in zip(self.channels, self.heads, self.depths)
        )

    def _model_config(self, input_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim, num_classes=num_classes, stages=self._stage_configs()
        )

    def _encode_labels(self, y: np.ndarray) -> np.ndarray:
        labelled = y[y != UNLABELLED]
        if labelled.size == 0:
            raise ValueError("need at least one labelled record")
        self.classes_ = np.unique(labelled)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 distinct classes")
        encoded = np.full(y.shape, UNLABELLED, dtype=np.int64)
        mask = y != UNLABELLED
        encoded[mask] = np.searchsorted(self.classes_, y[mask])
        return encoded

    def fit(self, X, y):
        X = check_series_array(X)
        y = check_labels(y, X.shape[0])
        encoded = self._encode_labels(y)
        ds = Dataset.from_arrays(X, encoded, num_classes=int(self.classes_.size))
        model_cfg = self._model_config(X.shape[2], ds.K)
        train_cfg, objective_cfg = self._train_config()
        self.checkpoint_, self.run_record_ = train(
            ds, train_cfg, model_cfg=model_cfg, objective_cfg=objective_cfg
        )
        self.n_timesteps_ = X.shape[1]
        self.n_features_ = X.shape[2]
        return self

    def _train_config(self) -> tuple[TrainConfig, None]:
        return (
            TrainConfig(
                objective=self._objective,
                epochs=self.epochs,
                batch_size=self.batch_size,
                lr=self.lr,
                weight_decay=self.weight_decay,
                seed=self.seed,
            ),
            None,
        )

    def _infer(self, X) -> "tuple[np.ndarray, dict[str, np.ndarray]]":
        check_is_fitted(self, "checkpoint_")
        X = check_series_array(X)
        if X.shape[1] != self.n_timesteps_ or X.shape[2] != self.n_features_:
            raise ValueError(
                f"X has shape {X.shape[1:]}, expected "
                f"({self.n_timesteps_}, {self.n_features_})"
            )
        ckpt = self.checkpoint_
        model = ckpt.build_model()
        x = torch.from_numpy(standardize(X, ckpt.norm_mean, ckpt.norm_std))
        logits: dict[str, list[np.ndarray]] = {"y": []}
        latents = []
        if ckpt.objective == "tvae":
            logits.update({"z": [], "cos": []})
        with torch.no_grad():
            for start in range(0, x.shape[0], 256):
                out = model.infer(x[start:start + 256])
                logits["y"].append(out.y_logits.numpy())
                if ckpt.objective == "tvae":
                    logits["z"].append(out.z_logits.numpy())
                    logits["cos"].append(out.cos_scores.numpy())
                    latents.append(out.z.numpy())
        scores = {k: np.concatenate(v) for k, v in logits.items()}
        z = np.concatenate(latents) if latents else np.zeros((X.shape[0], 0), np.float32)
        return z, scores

    def predict(self, X):
        _, scores = self._infer(X)
        return self.classes_[scores["y"].argmax(axis=1)]

    def predict_proba(self, X):
        _, scores = self._infer(X)
        return _softmax(scores["y"])


def _softmax(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


class PTSTClassifier(_SeriesClassifierBase):
    """Pyramid transformer classifier trained with plain cross-entropy.

    Parameters mirror the encoder stages: `channels[i]`, `heads[i]`, and
    `depths[i]` describe stage i; all stages share `kernel_size`, `stride`,
    and `ffn_expansion`.
    """

    _objective = "ptst"

    def __init__(
        self,
        channels=(32, 64, 128, 256),
        heads=(2, 4, 8, 16),
        depths=(1, 1, 1, 1),
        kernel_size=3,
        stride=2,
        ffn_expansion=1,
        epochs=40,
        batch_size=64,
        lr=1e-4,
        weight_decay=4e-5,
        seed=0,
    ):
        self.channels = channels
        self.heads = heads
        self.depths = depths
        self.kernel_size = kernel_size
        self.stride = stride
        self.ffn_expansion = ffn_expansion
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed


class TVPTSTClassifier(_SeriesClassifierBase):
    """Semi-supervised classifier with the generative latent extension.

    Accepts `y = -1` for unlabelled records. `predict` uses the head named by
    `predict_head` ("y", "z", or "cos"); `transform` returns the latent means
    so the estimator composes with scikit-learn pipelines.
    """

    _objective = "tvae"

    def __init__(
        self,
        channels=(32, 64, 128, 256),
        heads=(2, 4, 8, 16),
        depths=(1, 1, 1, 1),
        kernel_size=3,
        stride=2,
        ffn_expansion=1,
        latent_dim=256,
        preset="VII",
        predict_head="y",
        epochs=40,
        batch_size=64,
        lr=1e-4,
        weight_decay=4e-5,
        seed=0,
    ):
        self.channels = channels
        self.heads = heads
        self.depths = depths
        self.kernel_size = kernel_size
        self.stride = stride
        self.ffn_expansion = ffn_expansion
        self.latent_dim = latent_dim
        self.preset = preset
        self.predict_head = predict_head
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def _model_config(self, input_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            num_classes=num_classes,
            stages=self._stage_configs(),
            latent_dim=self.latent_dim,
        )

    def _train_config(self):
        if self.predict_head not in ("y", "z", "cos"):
            raise ValueError(f"unknown predict_head {self.predict_head!r}")
        return (
            TrainConfig(
                objective="tvae",
                preset=self.preset,
                epochs=self.epochs,
                batch_size=self.batch_size,
                lr=self.lr,
                weight_decay=self.weight_decay,
                seed=self.seed,
            ),
            objective_preset(self.preset),
        )

    def predict(self, X):
        _, scores = self._infer(X)
        return self.classes_[scores[self.predict_head].argmax(axis=1)]

    def predict_heads(self, X) -> dict[str, np.ndarray]:
        """Predictions from all heads at once, in original label space."""
        _, scores = self._infer(X)
        return {head: self.classes_[s.argmax(axis=1)] for head, s in scores.items()}

    def predict_proba(self, X):
        _, scores = self._infer(X)
        if self.predict_head == "cos":
            ckpt = self.checkpoint_
            tau = float(ckpt.state["cos_temperature"])
            return _softmax(tau * scores["cos"])
        return _softmax(scores[self.predict_head])

    def transform(self, X) -> np.ndarray:
        """Latent posterior means [N, latent_dim] under the argmax label."""
        z, _ = self._infer(X)
        return z

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)
