"""Losses, optimizers, and the two-phase training protocol.

Phase one fits the autoencoder to reconstruct its own input (no labels).
Phase two fine-tunes the transferred encoder jointly with the classifier
head on grade labels. Defaults: Adam at 5e-4 with batches of 16 for
reconstruction, SGD at 0.5 with batches of 8 for grading.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from .data import GradeLabel
from .model import ModelGraph, backward, flatten_grads, forward, save_checkpoint


@dataclass(frozen=True)
class PretextConfig:
    """Reconstruction-phase hyperparameters."""

    optimizer: str = "adam"
    learning_rate: float = 5e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        _check_common(self.optimizer, self.learning_rate, self.batch_size, self.epochs)


@dataclass(frozen=True)
class DownstreamConfig:
    """Grading-phase hyperparameters.

    clip_norm is off by default; lr 0.5 SGD can diverge on unlucky seeds,
    and a max-norm of 5.0 is the documented remedy. patience applies only
    when validation data is supplied to finetune.
    """

    optimizer: str = "sgd"
    learning_rate: float = 0.5
    batch_size: int = 8
    epochs: int = 50
    transfer_levels: int = 29
    seed: int = 0
    clip_norm: float | None = None
    patience: int | None = 10

    def __post_init__(self) -> None:
        _check_common(self.optimizer, self.learning_rate, self.batch_size, self.epochs)
        if self.transfer_levels < 0:
            raise ValueError(f"transfer_levels must be >= 0, got {self.transfer_levels}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


def _check_common(optimizer: str, lr: float, batch_size: int, epochs: int) -> None:
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if lr <= 0:
        raise ValueError(f"learning_rate must be positive, got {lr}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")


# ---------------------------------------------------------------------------
# losses


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements, with its gradient wrt pred."""
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return loss, grad


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the labeled class.

    Takes post-softmax probabilities and returns the loss together with
    the combined softmax-plus-cross-entropy gradient on the *logits*,
    (p - onehot)/n, so the backward pass starts below the softmax layer.
    Probabilities are clamped at 1e-12 before the log.
    """
    if probs.ndim != 2:
        raise ValueError(f"probs must be 2-d, got {probs.ndim}-d")
    labels = np.asarray(labels)
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {probs.shape[0]} rows")
    n, k = probs.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    row_sums = probs.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-5:
        raise ValueError("probs rows must sum to 1 within 1e-5")
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked.astype(np.float64), 1e-12))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: Mapping[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(arr) for name, arr in params.items()},
        v={name: np.zeros_like(arr) for name, arr in params.items()},
    )


def _check_aligned(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    if params.keys() != grads.keys():
        missing = params.keys() ^ grads.keys()
        raise ValueError(f"parameter/gradient name mismatch: {sorted(missing)}")
    for name, arr in params.items():
        if arr.shape != grads[name].shape:
            raise ValueError(
                f"gradient shape mismatch for {name}: {arr.shape} vs {grads[name].shape}"
            )


def sgd_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float
) -> dict[str, np.ndarray]:
    """Plain gradient descent, theta - lr * g."""
    _check_aligned(params, grads)
    return {name: arr - lr * grads[name] for name, arr in params.items()}


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update; returns new params and advanced state."""
    _check_aligned(params, grads)
    _check_aligned(params, state.m)
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, out = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        out[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return out, AdamState(m=new_m, v=new_v, t=t, beta1=b1, beta2=b2, eps=state.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients down so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}


# ---------------------------------------------------------------------------
# training loops


def _live_params(graph: ModelGraph) -> dict[str, np.ndarray]:
    return dict(graph.parameters())


def _assign(params: dict[str, np.ndarray], new: Mapping[str, np.ndarray]) -> None:
    # in-place writes keep the graph's own arrays as the single source of truth
    for name, arr in params.items():
        arr[...] = new[name]


def _batches(n: int, batch_size: int, order: np.ndarray) -> Iterable[np.ndarray]:
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def pretrain(
    cae: ModelGraph,
    patches: np.ndarray,
    cfg: PretextConfig,
    *,
    val_patches: np.ndarray | None = None,
    stop_loss: float | None = None,
    checkpoint_path=None,
) -> list[dict]:
    """Fit the autoencoder to reconstruct `patches` ((n, 3, H, W), in [0, 1]).

    Mini-batches are reshuffled each epoch from a seeded generator, so a
    fixed seed reproduces the parameter trajectory bit for bit. Returns one
    history row per completed epoch; training ends early once the epoch
    loss drops below stop_loss, if given. When checkpoint_path is set the
    final weights are saved there.
    """
    n = len(patches)
    if n == 0:
        raise ValueError("pretrain: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = _live_params(cae)
    state = init_adam(params) if cfg.optimizer == "adam" else None

    history: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for idx in _batches(n, cfg.batch_size, order):
            batch = patches[idx]
            acts = forward(cae, batch, mode="train")
            loss, grad = mse_loss(acts["recon"], batch)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = flatten_grads(backward(cae, acts, grad))
            if state is None:
                new = sgd_step(params, grads, cfg.learning_rate)
            else:
                new, state = adam_step(params, grads, state, cfg.learning_rate)
            _assign(params, new)
            total += loss * len(idx)
        row = {"epoch": epoch, "train_loss": total / n,
               "val_loss": None, "val_accuracy": None}
        if val_patches is not None and len(val_patches):
            row["val_loss"] = reconstruction_loss(cae, val_patches, cfg.batch_size)
        history.append(row)
        if stop_loss is not None and row["train_loss"] < stop_loss:
            break

    if checkpoint_path is not None:
        save_checkpoint(cae, checkpoint_path)
    return history


def reconstruction_loss(cae: ModelGraph, patches: np.ndarray, batch_size: int = 16) -> float:
    total = 0.0
    for start in range(0, len(patches), batch_size):
        batch = patches[start : start + batch_size]
        acts = forward(cae, batch, mode="infer")
        loss, _ = mse_loss(acts["recon"], batch)
        total += loss * len(batch)
    return total / len(patches)


def evaluate_classifier(
    classifier: ModelGraph, patches: np.ndarray, labels: np.ndarray, batch_size: int = 32
) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of the classifier on a labeled set."""
    n = len(patches)
    if n == 0:
        raise ValueError("evaluate_classifier: empty dataset")
    total, correct = 0.0, 0
    for start in range(0, n, batch_size):
        batch = patches[start : start + batch_size]
        y = labels[start : start + batch_size]
        probs = forward(classifier, batch, mode="infer")["softmax"]
        loss, _ = cross_entropy_loss(probs, y)
        total += loss * len(batch)
        correct += int(np.sum(probs.argmax(axis=1) == y))
    return total / n, correct / n


def finetune(
    classifier: ModelGraph,
    patches: np.ndarray,
    labels: np.ndarray,
    cfg: DownstreamConfig,
    *,
    val_patches: np.ndarray | None = None,
    val_labels: np.ndarray | None = None,
    stop_train_accuracy: float | None = None,
    checkpoint_path=None,
) -> list[dict]:
    """Train the classifier end to end (transferred encoder included).

    The gradient flows from the logits layer downward, so the softmax
    output itself never needs a backward rule. History rows carry epoch,
    train_loss, train_accuracy and, when a validation set is given,
    val_loss/val_accuracy; in that case training stops early after
    cfg.patience epochs without a validation-loss improvement.
    """
    n = len(patches)
    if n == 0:
        raise ValueError("finetune: empty dataset")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} patches")
    rng = np.random.default_rng(cfg.seed)
    params = _live_params(classifier)
    state = init_adam(params) if cfg.optimizer == "adam" else None

    history: list[dict] = []
    best_val = math.inf
    since_best = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for idx in _batches(n, cfg.batch_size, order):
            batch, y = patches[idx], labels[idx]
            acts = forward(classifier, batch, mode="train")
            loss, logit_grad = cross_entropy_loss(acts["softmax"], y)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = flatten_grads(backward(classifier, acts, logit_grad, start="head.fc2"))
            if cfg.clip_norm is not None:
                grads = clip_gradients(grads, cfg.clip_norm)
            if state is None:
                new = sgd_step(params, grads, cfg.learning_rate)
            else:
                new, state = adam_step(params, grads, state, cfg.learning_rate)
            _assign(params, new)
            total += loss * len(idx)

        train_loss, train_acc = evaluate_classifier(classifier, patches, labels,
                                                    cfg.batch_size)
        row = {"epoch": epoch, "train_loss": total / n, "train_accuracy": train_acc,
               "val_loss": None, "val_accuracy": None}
        if val_patches is not None and len(val_patches):
            row["val_loss"], row["val_accuracy"] = evaluate_classifier(
                classifier, val_patches, val_labels, cfg.batch_size)
        history.append(row)

        if stop_train_accuracy is not None and train_acc >= stop_train_accuracy:
            break
        if row["val_loss"] is not None and cfg.patience is not None:
            if row["val_loss"] < best_val - 1e-12:
                best_val, since_best = row["val_loss"], 0
            else:
                since_best += 1
                if since_best > cfg.patience:
                    break

    if checkpoint_path is not None:
        save_checkpoint(classifier, checkpoint_path)
    return history


def split_dataset(records: list, ratio: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Stratified train/validation split.

    Each class contributes floor(ratio * count) records to the training
    side and the remainder to validation, chosen by a seeded shuffle, so
    per-class proportions stay within one sample of the ratio. Returned
    records are copies with their split field assigned.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    by_class: dict[int, list] = {}
    for rec in records:
        if rec.label is None:
            raise ValueError(f"unlabeled record {rec.patch_path!r} cannot be split")
        by_class.setdefault(int(rec.label), []).append(rec)

    for grade in GradeLabel:
        if int(grade) not in by_class:
            warnings.warn(f"class {grade.name} has no records", stacklevel=2)

    rng = np.random.default_rng(seed)
    train, val = [], []
    for label in sorted(by_class):
        group = by_class[label]
        perm = rng.permutation(len(group))
        k = math.floor(ratio * len(group))
        for pos in perm[:k]:
            train.append(replace(group[pos], split="train"))
        for pos in perm[k:]:
            val.append(replace(group[pos], split="val"))
    return train, val


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_accuracy")


def _history_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))  # full precision, round-trippable
    return str(value)


def write_history(rows: list[dict], path) -> None:
    """Persist per-epoch curves as CSV (epoch, train_loss, val_loss, val_accuracy)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in rows:
            writer.writerow([_history_cell(row.get(name)) for name in HISTORY_FIELDS])
