"""Grading metrics, feature extraction, and 2-d embeddings of features.

Metrics operate on a 4x4 confusion matrix with true grades along the rows
and predicted grades along the columns. The embedding is an exact
all-pairs t-SNE, adequate for desk-scale feature sets.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import GradeLabel
from .model import ModelGraph, forward

N_CLASSES = len(GradeLabel)


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ValueError(f"confusion matrix must be square with >= 2 classes, "
                         f"got shape {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix entries must be non-negative")
    return cm.astype(np.float64)


def confusion(true_labels, pred_labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """Count matrix: entry [t][p] is how often grade t was predicted as p."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(f"label vectors must be equal-length 1-d, "
                         f"got {t.shape} and {p.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    if t.size:
        if t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
        np.add.at(cm, (t, p), 1)
    return cm


def accuracy(cm) -> float:
    cm = _check_cm(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm) / total)


def f1_scores(cm) -> tuple[np.ndarray, float]:
    """Per-class F1 plus its unweighted mean.

    A class with zero column sum (never predicted) or zero row sum (never
    true) has an undefined precision or recall; the convention here is 0,
    flagged with a warning, which keeps the macro average over all classes.
    """
    cm = _check_cm(cm)
    k = cm.shape[0]
    per = np.zeros(k)
    for c in range(k):
        tp = cm[c, c]
        col, row = cm[:, c].sum(), cm[c, :].sum()
        if col == 0 or row == 0:
            warnings.warn(f"class {c} degenerate (row sum {int(row)}, column sum "
                          f"{int(col)}); F1 set to 0", stacklevel=2)
        prec = tp / col if col else 0.0
        rec = tp / row if row else 0.0
        per[c] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return per, float(per.mean())


def quadratic_kappa(cm) -> float:
    """Chance-corrected agreement with squared-distance disagreement weights.

    Weights are (i - j)^2 / (K - 1)^2; expected agreement comes from the
    outer product of the marginals. When the expected disagreement is zero
    (all mass in a single cell) the score is 1 for a diagonal matrix and
    undefined otherwise.
    """
    cm = _check_cm(cm)
    k = cm.shape[0]
    total = cm.sum()
    if total == 0:
        raise ValueError("kappa of an empty confusion matrix is undefined")
    observed = cm / total
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    idx = np.arange(k, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    denom = float((weights * expected).sum())
    numer = float((weights * observed).sum())
    if denom == 0.0:
        if numer == 0.0:
            return 1.0
        raise ValueError("degenerate marginals with off-diagonal mass")
    return 1.0 - numer / denom


def metrics_from_confusion(cm) -> dict:
    """Full metric set as a JSON-ready dict."""
    cm = np.asarray(cm)
    per_class, macro = f1_scores(cm)
    return {
        "accuracy": accuracy(cm),
        "f1_per_class": [float(v) for v in per_class],
        "f1_macro": macro,
        "kappa_quadratic": quadratic_kappa(cm),
        "confusion": [[int(v) for v in row] for row in cm],
    }


# ---------------------------------------------------------------------------
# model outputs


def predict(classifier: ModelGraph, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Predicted grade index per patch."""
    preds = []
    for start in range(0, len(patches), batch_size):
        probs = forward(classifier, patches[start : start + batch_size], mode="infer")["softmax"]
        preds.append(probs.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def extract_features(
    classifier: ModelGraph,
    patches: np.ndarray,
    layer: str = "gmp",
    batch_size: int = 32,
) -> np.ndarray:
    """Per-patch feature vectors read off a named layer (default: the pooled
    encoder output, one value per bottleneck channel)."""
    try:
        classifier.layer(layer)
    except (KeyError, ValueError):
        raise ValueError(f"unknown layer {layer!r}") from None
    rows = []
    for start in range(0, len(patches), batch_size):
        acts = forward(classifier, patches[start : start + batch_size], mode="infer")
        feat = acts[layer]
        rows.append(feat.reshape(len(feat), -1))
    if not rows:
        raise ValueError("no patches to embed")
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# t-SNE


@dataclass(frozen=True)
class TsneConfig:
    """Embedding hyperparameters; exaggeration and the momentum switch share
    the same iteration boundary."""

    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    output_dims: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.perplexity <= 0:
            raise ValueError(f"perplexity must be positive, got {self.perplexity}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.early_exaggeration < 1:
            raise ValueError(f"early_exaggeration must be >= 1, got {self.early_exaggeration}")
        if self.output_dims < 1:
            raise ValueError(f"output_dims must be >= 1, got {self.output_dims}")


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _row_entropy(neg_beta_d: np.ndarray) -> tuple[float, np.ndarray]:
    # Shannon entropy (nats) of p_j proportional to exp(neg_beta_d_j)
    shift = neg_beta_d.max()
    e = np.exp(neg_beta_d - shift)
    s = e.sum()
    p = e / s
    log_p = neg_beta_d - shift - np.log(s)
    return float(-(p * log_p).sum()), p


def conditional_probabilities(
    features: np.ndarray,
    perplexity: float,
    tol: float = 1e-5,
    max_steps: int = 50,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point Gaussian neighbor distributions calibrated to a perplexity.

    Each row i of the returned matrix holds p(j|i) over the other points,
    with the Gaussian precision found by bisection so the row entropy hits
    ln(perplexity) within tol (at most max_steps evaluations). Also returns
    the calibrated precisions.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError(f"features must be a 2-d matrix of >= 2 points, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite values")
    n = len(x)
    d2 = _pairwise_sq_dists(x)
    target = np.log(perplexity)

    p_cond = np.zeros((n, n))
    betas = np.ones(n)
    others = ~np.eye(n, dtype=bool)
    for i in range(n):
        di = d2[i][others[i]]
        beta, beta_lo, beta_hi = 1.0, 0.0, np.inf
        p = None
        for _ in range(max_steps):
            entropy, p = _row_entropy(-beta * di)
            if abs(entropy - target) <= tol:
                break
            if entropy > target:  # too spread out, tighten
                beta_lo = beta
                beta = beta * 2.0 if np.isinf(beta_hi) else 0.5 * (beta + beta_hi)
            else:
                beta_hi = beta
                beta = 0.5 * (beta + beta_lo)
        p_cond[i][others[i]] = p
        betas[i] = beta
    return p_cond, betas


def tsne(features: np.ndarray, cfg: TsneConfig) -> tuple[np.ndarray, list[float]]:
    """Exact t-SNE of a small feature matrix into cfg.output_dims coordinates.

    High-dimensional affinities are the symmetrized calibrated conditionals;
    low-dimensional affinities use the Student-t kernel. Descent runs with
    per-parameter adaptive gains, momentum 0.5 switching to 0.8 when early
    exaggeration ends, and centered coordinates. Returns the embedding and
    the KL divergence (against the unexaggerated affinities, measured before
    each update) per iteration. A non-finite embedding aborts with the
    iteration index.
    """
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < 4:
        raise ValueError(f"t-SNE needs at least 4 points, got {n}")

    perplexity = cfg.perplexity
    limit = (n - 1) / 3.0
    if perplexity > limit:
        warnings.warn(f"perplexity {perplexity} too large for {n} points; "
                      f"clamped to {limit:.3f}", stacklevel=2)
        perplexity = limit

    p_cond, _ = conditional_probabilities(x, perplexity)
    p = (p_cond + p_cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)

    rng = np.random.default_rng(cfg.seed)
    y = rng.standard_normal((n, cfg.output_dims)) * 1e-4
    vel = np.zeros_like(y)
    gains = np.ones_like(y)

    kl_history: list[float] = []
    for it in range(cfg.iterations):
        num = 1.0 / (1.0 + _pairwise_sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        kl_history.append(float((p * np.log(p / q)).sum()))

        mult = cfg.early_exaggeration if it < cfg.exaggeration_iters else 1.0
        pq = (p * mult - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)

        momentum = 0.5 if it < cfg.exaggeration_iters else 0.8
        flip = (grad > 0) != (vel > 0)
        gains = np.where(flip, gains + 0.2, gains * 0.8)
        np.maximum(gains, 0.01, out=gains)
        vel = momentum * vel - cfg.learning_rate * gains * grad
        y = y + vel
        y -= y.mean(axis=0)
        if not np.isfinite(y).all():
            raise FloatingPointError(f"non-finite embedding at iteration {it}")
    return y, kl_history


# ---------------------------------------------------------------------------
# report files


_CLASS_COLORS = ("#4daf4a", "#377eb8", "#ff7f00", "#e41a1c")


def _scatter_svg(points: np.ndarray, labels, path: Path, size: int = 480) -> None:
    margin, r = 48, 4
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    span[span == 0] = 1.0
    inner = size - 2 * margin
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>',
             f'<rect x="{margin}" y="{margin}" width="{inner}" height="{inner}" '
             f'fill="none" stroke="#999"/>']
    for i, (px, py) in enumerate(points):
        cx = margin + inner * (px - lo[0]) / span[0]
        cy = size - margin - inner * (py - lo[1]) / span[1]
        color = _CLASS_COLORS[int(labels[i]) % len(_CLASS_COLORS)] if labels is not None else "#555"
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r}" fill="{color}" '
                     f'fill-opacity="0.8"/>')
    if labels is not None:
        for grade in GradeLabel:
            lx, ly = size - margin + 4, margin + 16 * int(grade)
            parts.append(f'<circle cx="{lx}" cy="{ly}" r="{r}" '
                         f'fill="{_CLASS_COLORS[int(grade)]}"/>')
            parts.append(f'<text x="{lx + 8}" y="{ly + 4}" font-size="11" '
                         f'font-family="sans-serif">{grade.name}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def _heatmap_svg(cm: np.ndarray, path: Path, cell: int = 64) -> None:
    k = cm.shape[0]
    margin = 56
    size = margin + k * cell + 8
    peak = max(int(cm.max()), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    names = [g.name for g in GradeLabel] if k == N_CLASSES else [str(i) for i in range(k)]
    for t in range(k):
        for pr in range(k):
            # darker purple for heavier cells
            shade = int(cm[t, pr]) / peak
            rgb = tuple(int(255 - shade * d) for d in (130, 175, 80))
            x0, y0 = margin + pr * cell, margin + t * cell
            parts.append(f'<rect x="{x0}" y="{y0}" width="{cell}" height="{cell}" '
                         f'fill="rgb{rgb}" stroke="#777"/>')
            text_fill = "white" if shade > 0.6 else "black"
            parts.append(f'<text x="{x0 + cell / 2}" y="{y0 + cell / 2 + 4}" '
                         f'font-size="13" font-family="sans-serif" fill="{text_fill}" '
                         f'text-anchor="middle">{int(cm[t, pr])}</text>')
    for i, name in enumerate(names):
        parts.append(f'<text x="{margin + i * cell + cell / 2}" y="{margin - 10}" '
                     f'font-size="12" font-family="sans-serif" '
                     f'text-anchor="middle">{name}</text>')
        parts.append(f'<text x="{margin - 10}" y="{margin + i * cell + cell / 2 + 4}" '
                     f'font-size="12" font-family="sans-serif" '
                     f'text-anchor="end">{name}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def write_embedding(embedding: np.ndarray, labels, out_dir: str | Path) -> dict[str, Path]:
    """Write an (n, 2) embedding as embedding.csv (header x,y,label) plus a
    colored scatter SVG; the label column is blank when labels are None."""
    embedding = np.asarray(embedding)
    if embedding.ndim != 2 or embedding.shape[1] != 2:
        raise ValueError(f"embedding must be (n, 2), got {embedding.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"embedding_csv": out / "embedding.csv",
             "embedding_svg": out / "embedding.svg"}
    with open(paths["embedding_csv"], "w") as fh:
        fh.write("x,y,label\n")
        for i, (ex, ey) in enumerate(embedding):
            name = "" if labels is None else GradeLabel(int(labels[i])).name
            fh.write(f"{float(ex)!r},{float(ey)!r},{name}\n")
    _scatter_svg(embedding, labels, paths["embedding_svg"])
    return paths


def report(
    cm,
    out_dir: str | Path,
    embedding: np.ndarray | None = None,
    labels=None,
) -> dict[str, Path]:
    """Materialize metrics and embedding artifacts into a directory.

    Always writes metrics.json (schema: accuracy, f1_per_class, f1_macro,
    kappa_quadratic, confusion) plus a confusion CSV and SVG heatmap. Given
    an (n, 2) embedding, also writes embedding.csv (x,y,label) and a
    scatter SVG. Returns the written paths by artifact name.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cm = np.asarray(cm)
    metrics = metrics_from_confusion(cm)

    paths = {"metrics": out / "metrics.json",
             "confusion_csv": out / "confusion.csv",
             "confusion_svg": out / "confusion.svg"}
    paths["metrics"].write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    with open(paths["confusion_csv"], "w") as fh:
        for row in cm:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
    _heatmap_svg(cm, paths["confusion_svg"])

    if embedding is not None:
        paths.update(write_embedding(embedding, labels, out))
    return paths
