"""Scikit-learn estimator facade over the two-stage recognizer.

The library API (PipelineConfig, train, evaluate) stays the source of truth;
this wrapper exposes the usual fit/predict/predict_proba surface so the model
drops into sklearn tooling (cross_val_score, grid search, pipelines).
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from .attention import AttentionConfig
from .focus import FocusConfig
from .heads import classify
from .ngsa import GroupingConfig
from .numerics import softmax
from .pipeline import PipelineConfig, train
from .pointcloud import LabeledDataset, Sequence, SynthConfig
from .validation import DataError


def _check_sequences(X) -> list[Sequence]:
    if isinstance(X, Sequence):
        raise DataError("X must be a list of sequences, not a single sequence")
    try:
        items = list(X)
    except TypeError:
        raise DataError(f"X must be iterable, got {type(X).__name__}") from None
    if not items:
        raise DataError("X must contain at least one sequence")
    for i, item in enumerate(items):
        if not isinstance(item, Sequence):
            raise DataError(
                f"X[{i}] must be a Sequence, got {type(item).__name__}")
    return items


def _check_labels(y, n: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.shape != (n,):
        raise DataError(f"y must have shape ({n},), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise DataError("y must contain integer class labels")
    return arr.astype(np.int64)


class EspPctClassifier(BaseEstimator, ClassifierMixin):
    """Sequence classifier: attention scoring, region focus, recurrent head.

    Parameters mirror PipelineConfig one level flat, sklearn-style.  `X` is a
    list of Sequence objects; `y` integer labels (defaults to each sequence's
    own label when omitted).
    """

    def __init__(self, d_attention=32, depth=2, k_nn=16, gamma_hidden=None,
                 delta_hidden=None, cell_size=0.1, top_k=30, eta=0.68,
                 ablation=None, selection_over="points", head="appnet",
                 app_hidden=96, key_hidden=64, epochs=100, patience=100,
                 learning_rate=0.05, batch_size=10, seed=0,
                 region_align_weight=1.0, validation_fraction=0.25):
        self.d_attention = d_attention
        self.depth = depth
        self.k_nn = k_nn
        self.gamma_hidden = gamma_hidden
        self.delta_hidden = delta_hidden
        self.cell_size = cell_size
        self.top_k = top_k
        self.eta = eta
        self.ablation = ablation
        self.selection_over = selection_over
        self.head = head
        self.app_hidden = app_hidden
        self.key_hidden = key_hidden
        self.epochs = epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.region_align_weight = region_align_weight
        self.validation_fraction = validation_fraction

    def _build_config(self, points_per_frame: int, frames: int) -> PipelineConfig:
        synth = SynthConfig(points_per_frame=points_per_frame,
                            frames_per_sequence=frames,
                            semantic_cluster_points=max(1, points_per_frame - 1),
                            noise_points=min(1, points_per_frame - 1))
        return PipelineConfig(
            synth=synth,
            grouping=GroupingConfig(cell_size=self.cell_size),
            attention=AttentionConfig(
                d_attention=self.d_attention, depth=self.depth,
                k_nn=self.k_nn, gamma_hidden=self.gamma_hidden,
                delta_hidden=self.delta_hidden),
            focus=FocusConfig(top_k=self.top_k, eta=self.eta,
                              ablation=self.ablation,
                              selection_over=self.selection_over),
            head=self.head,
            app_hidden=self.app_hidden,
            key_hidden=self.key_hidden,
            epochs=self.epochs,
            patience=min(self.patience, self.epochs),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.seed,
            region_align_weight=self.region_align_weight,
        )

    def fit(self, X, y=None):
        sequences = _check_sequences(X)
        if y is None:
            labels = [s.label for s in sequences]
            if any(v is None for v in labels):
                raise DataError(
                    "y omitted but some sequences carry no label")
            y_arr = _check_labels(labels, len(sequences))
        else:
            y_arr = _check_labels(y, len(sequences))
        if not 0.0 < self.validation_fraction < 1.0:
            raise DataError(
                f"validation_fraction must lie in (0, 1), got "
                f"{self.validation_fraction}")

        self.classes_ = np.unique(y_arr)
        relabeled = [Sequence(s.frames, label=int(lbl), meta=s.meta)
                     for s, lbl in zip(sequences, y_arr)]

        # deterministic stratified holdout for early stopping
        rng = np.random.default_rng(self.seed)
        val_idx: list[int] = []
        for cls in self.classes_:
            members = np.flatnonzero(y_arr == cls)
            n_val = max(1, int(round(len(members) * self.validation_fraction)))
            if n_val >= len(members):
                raise DataError(
                    f"class {cls} has too few sequences ({len(members)}) for "
                    f"a validation holdout")
            val_idx.extend(rng.permutation(members)[:n_val].tolist())
        val_set = set(val_idx)
        names = [str(c) for c in range(int(self.classes_.max()) + 1)]
        splits = {
            "train": LabeledDataset(
                [relabeled[i] for i in range(len(relabeled))
                 if i not in val_set], names, split="train"),
            "val": LabeledDataset([relabeled[i] for i in sorted(val_set)],
                                  names, split="val"),
        }

        frames = max(s.n_frames for s in sequences)
        points = max((f.n_points for s in sequences for f in s.frames),
                     default=1)
        config = self._build_config(max(points, 1), frames)
        self.trained_, self.metrics_ = train(config, splits)
        self.config_ = config
        return self

    def _logit_matrix(self, X) -> torch.Tensor:
        if not hasattr(self, "trained_"):
            raise DataError("estimator is not fitted; call fit first")
        sequences = _check_sequences(X)
        rows = []
        with torch.no_grad():
            for seq in sequences:
                logits, _, _ = self.trained_.model.sequence_forward(seq)
                rows.append(logits)
        return torch.stack(rows)

    def predict_proba(self, X) -> np.ndarray:
        logits = self._logit_matrix(X)
        cols = torch.from_numpy(self.classes_)
        sub = logits[:, cols]
        return softmax(sub, dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def decision_scores(self, X) -> np.ndarray:
        """Raw head logits, one row per sequence, all head classes."""
        return self._logit_matrix(X).numpy()

    def transform(self, X) -> np.ndarray:
        """Per-sequence feature map: the frame focus representations,
        concatenated in frame order.  Requires a uniform frame count."""
        if not hasattr(self, "trained_"):
            raise DataError("estimator is not fitted; call fit first")
        sequences = _check_sequences(X)
        counts = {s.n_frames for s in sequences}
        if len(counts) != 1:
            raise DataError(
                f"transform needs a uniform frame count, got {sorted(counts)}")
        rows = []
        with torch.no_grad():
            for seq in sequences:
                reps = [self.trained_.model.frame_forward(f)[0]
                        for f in seq.frames]
                rows.append(torch.cat(reps).numpy())
        return np.stack(rows)

    def confidence(self, X) -> np.ndarray:
        """Softmax confidence of the predicted class, over head classes."""
        logits = self._logit_matrix(X)
        return np.array([classify(row)[1] for row in logits])
