"""Training protocol and evaluation metrics.

Splits follow a rotating 10-fold plan (test block f, validation block f+1,
the remaining eight blocks train). Training minimizes the summed
cross-entropy with Adam (batch 128, 10 epochs, lr 1e-4 by default), randomly
flipping training images left-right and top-bottom, and keeps the parameters
from the epoch with the best validation accuracy (earliest epoch wins ties).
The feature standardizer is fitted on the fold's training passers only and
travels inside the checkpoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch

from .features import fit_standardizer, standardize_matrix
from .model import (
    Checkpoint,
    ModelConfig,
    SUCCESS,
    FAILURE,
    batch_probabilities,
    checkpoint_from_model,
    init_params,
    model_from_checkpoint,
)
from .synth import SynthDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitPlan:
    """Seeded partition of n samples into k near-equal blocks.

    Fold f uses block f as test, block (f+1) mod k as validation, and the
    rest as training data, so every sample is tested exactly once across the
    k folds.
    """

    n: int
    k: int
    seed: int
    blocks: tuple[tuple[int, ...], ...]

    def fold(self, f: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not 0 <= f < self.k:
            raise ValueError(f"fold index {f} out of range 0..{self.k - 1}")
        test = np.asarray(self.blocks[f], dtype=np.int64)
        val = np.asarray(self.blocks[(f + 1) % self.k], dtype=np.int64)
        train = np.concatenate(
            [np.asarray(b, dtype=np.int64) for i, b in enumerate(self.blocks) if i != f and i != (f + 1) % self.k]
        )
        return train, val, test


def make_folds(n: int, seed: int, k: int = 10) -> SplitPlan:
    if n < k:
        raise ValueError(f"need at least {k} samples for {k}-fold splitting, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    blocks = tuple(tuple(int(i) for i in block) for block in np.array_split(perm, k))
    return SplitPlan(n=n, k=k, seed=seed, blocks=blocks)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 10
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    flip_prob: float = 0.5  # per axis, training batches only
    seed: int = 0
    dtype: str = "float64"  # "float32" trades exactness checks for speed

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs) < 1 or self.learning_rate <= 0:
            raise ValueError("batch size, epochs and learning rate must be positive")

    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]


def augment(images: np.ndarray, rng: np.random.Generator, flip_prob: float = 0.5) -> np.ndarray:
    """Flip each image left-right and/or top-bottom, each with flip_prob.

    Only images are touched; labels and feature vectors pass through the
    caller unchanged, and evaluation never augments.
    """
    out = images.copy()
    for i in range(out.shape[0]):
        if rng.random() < flip_prob:
            out[i] = out[i][:, ::-1, :]
        if rng.random() < flip_prob:
            out[i] = out[i][::-1, :, :]
    return out


@dataclass(frozen=True)
class Metrics:
    """Confusion counts (rows = true class, order success/failure), the
    row-normalized matrix, and the scalar scores with success as the
    positive class."""

    confusion: np.ndarray  # (2, 2) int
    confusion_normalized: np.ndarray  # rows sum to 1
    accuracy: float
    precision: float
    recall: float
    f1: float
    n: int

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "confusion_normalized": self.confusion_normalized.tolist(),
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "n": self.n,
        }


def confusion_and_metrics(predictions: np.ndarray, labels: np.ndarray) -> Metrics:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.ndim != 1:
        raise ValueError("predictions and labels must be equal-length 1-d arrays")
    if predictions.size == 0:
        raise ValueError("empty input")
    counts = np.zeros((2, 2), dtype=np.int64)
    for cls_true in (SUCCESS, FAILURE):
        for cls_pred in (SUCCESS, FAILURE):
            counts[cls_true, cls_pred] = int(
                np.sum((labels == cls_true) & (predictions == cls_pred))
            )
    row_sums = counts.sum(axis=1, keepdims=True)
    normalized = counts / np.where(row_sums == 0, 1, row_sums)
    tp = counts[SUCCESS, SUCCESS]
    fp = counts[FAILURE, SUCCESS]
    fn = counts[SUCCESS, FAILURE]
    accuracy = float(np.trace(counts) / counts.sum())
    precision = float(tp / (tp + fp)) if tp + fp > 0 else 0.0
    recall = float(tp / (tp + fn)) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics(
        confusion=counts,
        confusion_normalized=normalized,
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=float(f1),
        n=int(counts.sum()),
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_epoch: int
    best_val_accuracy: float
    val_accuracy_history: list[float]
    batch_losses: list[float]  # summed cross-entropy per training batch
    diverged: bool = False


def _predictions(model, images, features) -> np.ndarray:
    probs = batch_probabilities(model, images, features)
    return np.where(probs[:, SUCCESS] > probs[:, FAILURE], SUCCESS, FAILURE)


def _accuracy(model, images, features, labels) -> float:
    preds = _predictions(model, images, features)
    return float(np.mean(preds == labels))


def train(
    model_config: ModelConfig,
    dataset: SynthDataset,
    plan: SplitPlan,
    fold: int,
    train_config: TrainConfig,
    metadata: dict | None = None,
) -> TrainResult:
    """Train one fold and return the best-validation checkpoint.

    Deterministic given (configs, dataset, fold): a fixed seed fixes the
    initialization, the batch order, the augmentation draws and therefore the
    whole per-batch loss trajectory.
    """
    train_idx, val_idx, _ = plan.fold(fold)
    stdzr = fit_standardizer(dataset.features_raw[train_idx])
    feats_std = standardize_matrix(dataset.features_raw, stdzr)

    dtype = train_config.torch_dtype()
    model = init_params(model_config, train_config.seed, dtype=dtype)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        betas=(train_config.beta1, train_config.beta2),
        eps=train_config.adam_eps,
    )
    rng = np.random.default_rng(train_config.seed)

    def snapshot(epoch: int, val_acc: float) -> Checkpoint:
        meta = dict(metadata or {})
        meta.update(
            {
                "fold": fold,
                "split_seed": plan.seed,
                "train_seed": train_config.seed,
                "best_epoch": epoch,
                "best_val_accuracy": val_acc,
                "train_config": asdict(train_config),
            }
        )
        return checkpoint_from_model(model, dataset.raster_config, stdzr, meta)

    best_val, best_epoch, best_ckpt = -1.0, -1, None
    batch_losses: list[float] = []
    val_history: list[float] = []
    diverged = False

    for epoch in range(train_config.max_epochs):
        order = rng.permutation(len(train_idx))
        for lo in range(0, len(order), train_config.batch_size):
            batch = train_idx[order[lo : lo + train_config.batch_size]]
            imgs = augment(dataset.images[batch], rng, train_config.flip_prob)
            imgs_t = torch.as_tensor(imgs.astype(np.float64) / 255.0, dtype=dtype).permute(0, 3, 1, 2)
            feats_t = None if model_config.image_only else torch.as_tensor(feats_std[batch], dtype=dtype)
            targets = torch.as_tensor(dataset.labels[batch], dtype=torch.long)
            logits, _ = model(imgs_t, feats_t)
            loss = torch.nn.functional.cross_entropy(logits, targets, reduction="sum")
            if not torch.isfinite(loss):
                logger.warning(
                    "non-finite loss at epoch %d batch %d; stopping with last good checkpoint",
                    epoch,
                    lo // train_config.batch_size,
                )
                diverged = True
                break
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            batch_losses.append(float(loss))
        if diverged:
            break
        val_acc = _accuracy(
            model,
            dataset.images[val_idx],
            None if model_config.image_only else feats_std[val_idx],
            dataset.labels[val_idx],
        )
        val_history.append(val_acc)
        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            best_ckpt = snapshot(epoch, val_acc)

    if best_ckpt is None:  # diverged before the first validation pass
        best_val, best_epoch = 0.0, -1
        best_ckpt = snapshot(best_epoch, best_val)
    best_ckpt.metadata["diverged"] = diverged
    return TrainResult(
        checkpoint=best_ckpt,
        best_epoch=best_epoch,
        best_val_accuracy=best_val,
        val_accuracy_history=val_history,
        batch_losses=batch_losses,
        diverged=diverged,
    )


def evaluate(
    checkpoint: Checkpoint,
    dataset: SynthDataset,
    indices: np.ndarray | None = None,
    explain: bool = False,
):
    """Metrics over the given indices (default: the whole dataset); with
    ``explain`` also returns one explanation report per evaluated example,
    standardized contributions filled over that sweep."""
    from . import explain as explain_mod  # local import to avoid a cycle

    if checkpoint.raster_config != dataset.raster_config:
        raise ValueError("checkpoint raster config does not match the dataset")
    if checkpoint.standardizer is None and not checkpoint.model_config.image_only:
        raise ValueError("checkpoint has no standardizer")
    model = model_from_checkpoint(checkpoint)
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    images = dataset.images[idx]
    feats = (
        None
        if checkpoint.model_config.image_only
        else standardize_matrix(dataset.features_raw[idx], checkpoint.standardizer)
    )
    preds = _predictions(model, images, feats)
    metrics = confusion_and_metrics(preds, dataset.labels[idx])
    reports = None
    if explain:
        reports = explain_mod.explain_collection(model, images, feats)
    return metrics, reports


def summarize_fold_metrics(per_fold: list[Metrics]) -> dict:
    """Mean and spread over folds, shaped like a results-table row."""
    table = {}
    for name in ("accuracy", "precision", "recall", "f1"):
        vals = np.array([getattr(m, name) for m in per_fold], dtype=np.float64)
        table[name] = {"mean": float(vals.mean()), "std": float(vals.std()), "per_fold": vals.tolist()}
    table["n_folds"] = len(per_fold)
    return table
