"""Softmax classifier over refined embeddings, plus the evaluation metrics.

The paper-verbatim metric formulas and the standard definitions are both
computed and clearly distinguished: the source text calls overall accuracy
"Precision" (N1/N2) and calls per-class correct-over-classified-as "Recall"
(N3/N4), which is the standard precision denominator. Fields are named
``paper_*`` and ``std_*`` so nobody has to guess which convention a number
follows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PipelineError, ValidationError


@dataclass
class SoftmaxClassifier:
    weights: np.ndarray  # p x C
    bias: np.ndarray  # C
    label_names: list[str]

    @property
    def n_classes(self) -> int:
        return len(self.label_names)


@dataclass
class EvalReport:
    n_total: int
    n_correct: int
    accuracy: float
    label_names: list[str]
    confusion: np.ndarray  # C x C ints; rows truth, cols predicted
    std_precision: np.ndarray  # diag / column sums
    std_recall: np.ndarray  # diag / row sums
    paper_precision: float  # N1/N2: the source's name for overall accuracy
    paper_recall: np.ndarray  # N3/N4: correct in class / classified as class


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def train_classifier(
    x: np.ndarray,
    labels: list[str],
    label_names: list[str] | None = None,
    learning_rate: float = 0.001,
    epochs: int = 200,
    batch_size: int = 16,
    seed: int = 0,
) -> tuple[SoftmaxClassifier, list[float]]:
    """Multinomial logistic regression by mini-batch adaptive-moment descent.

    Deterministic given the seed (which only drives the epoch shuffles);
    returns the classifier and the per-epoch mean cross-entropy curve.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(labels):
        raise ValidationError("rows and labels must align")
    if epochs < 1:
        raise ValidationError("epochs must be at least 1")
    if label_names is None:
        label_names = sorted(set(labels))
    index = {name: i for i, name in enumerate(label_names)}
    unknown = [lab for lab in labels if lab not in index]
    if unknown:
        raise ValidationError(f"labels outside label space: {sorted(set(unknown))[:5]}")
    if len(set(labels)) < 2:
        raise ValidationError("need at least 2 distinct labels to train")
    y = np.array([index[lab] for lab in labels], dtype=np.int64)
    n, p = x.shape
    n_classes = len(label_names)
    weights = np.zeros((p, n_classes))
    bias = np.zeros(n_classes)
    m_w, v_w = np.zeros_like(weights), np.zeros_like(weights)
    m_b, v_b = np.zeros_like(bias), np.zeros_like(bias)
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    rng = np.random.default_rng(seed)
    curve: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            xb, yb = x[batch], y[batch]
            probs = _softmax(xb @ weights + bias)
            eps_p = 1e-300
            epoch_loss += float(
                -np.log(probs[np.arange(len(batch)), yb] + eps_p).sum()
            )
            grad = probs
            grad[np.arange(len(batch)), yb] -= 1.0
            grad /= len(batch)
            gw = xb.T @ grad
            gb = grad.sum(axis=0)
            t += 1
            corr = np.sqrt(1 - b2**t) / (1 - b1**t)
            m_w += (1 - b1) * (gw - m_w)
            v_w += (1 - b2) * (gw * gw - v_w)
            weights -= learning_rate * corr * m_w / (np.sqrt(v_w) + eps)
            m_b += (1 - b1) * (gb - m_b)
            v_b += (1 - b2) * (gb * gb - v_b)
            bias -= learning_rate * corr * m_b / (np.sqrt(v_b) + eps)
        mean_loss = epoch_loss / n
        if not np.isfinite(mean_loss):
            raise PipelineError(f"classifier training diverged (loss={mean_loss})")
        curve.append(mean_loss)
    return SoftmaxClassifier(weights=weights, bias=bias, label_names=list(label_names)), curve


def predict(model: SoftmaxClassifier, x: np.ndarray) -> tuple[list[str], np.ndarray]:
    """Class labels (argmax, lowest index on ties) and softmax probabilities."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != model.weights.shape[0]:
        raise ValidationError(
            f"dimension mismatch: input p={x.shape[1]}, model p={model.weights.shape[0]}"
        )
    probs = _softmax(x @ model.weights + model.bias)
    picks = np.argmax(probs, axis=1)
    return [model.label_names[i] for i in picks], probs


def evaluate(
    predicted: list[str], truth: list[str], label_names: list[str]
) -> EvalReport:
    """Confusion matrix and metrics; counts are exact integer arithmetic."""
    if len(predicted) != len(truth):
        raise ValidationError(f"length mismatch: {len(predicted)} vs {len(truth)}")
    index = {name: i for i, name in enumerate(label_names)}
    c = len(label_names)
    confusion = np.zeros((c, c), dtype=np.int64)
    for p, tr in zip(predicted, truth):
        if p not in index:
            raise ValidationError(f"unknown predicted label {p!r}")
        if tr not in index:
            raise ValidationError(f"unknown truth label {tr!r}")
        confusion[index[tr], index[p]] += 1
    n_total = len(truth)
    n_correct = int(np.trace(confusion))
    col = confusion.sum(axis=0)
    row = confusion.sum(axis=1)
    diag = np.diagonal(confusion)
    with np.errstate(invalid="ignore", divide="ignore"):
        std_precision = np.where(col > 0, diag / np.maximum(col, 1), 0.0)
        std_recall = np.where(row > 0, diag / np.maximum(row, 1), 0.0)
    accuracy = n_correct / n_total if n_total else 0.0
    return EvalReport(
        n_total=n_total,
        n_correct=n_correct,
        accuracy=accuracy,
        label_names=list(label_names),
        confusion=confusion,
        std_precision=std_precision,
        std_recall=std_recall,
        paper_precision=accuracy,
        paper_recall=std_precision.copy(),
    )


def report_to_dict(report: EvalReport) -> dict:
    return {
        "n_total": report.n_total,
        "n_correct": report.n_correct,
        "accuracy": report.accuracy,
        "label_names": report.label_names,
        "confusion": report.confusion.tolist(),
        "std_precision": report.std_precision.tolist(),
        "std_recall": report.std_recall.tolist(),
        "paper_precision": report.paper_precision,
        "paper_recall": report.paper_recall.tolist(),
    }


def report_to_text(report: EvalReport) -> str:
    lines = [
        f"samples: {report.n_total}  correct: {report.n_correct}  "
        f"accuracy: {report.accuracy:.4f}",
        "per-class (std_precision / std_recall / paper_recall):",
    ]
    for i, name in enumerate(report.label_names):
        lines.append(
            f"  {name}: {report.std_precision[i]:.4f} / {report.std_recall[i]:.4f}"
            f" / {report.paper_recall[i]:.4f}"
        )
    lines.append("confusion (rows=truth, cols=predicted):")
    for i, name in enumerate(report.label_names):
        cells = " ".join(f"{v:6d}" for v in report.confusion[i])
        lines.append(f"  {name:>12s} {cells}")
    return "\n".join(lines) + "\n"


def save_report(report: EvalReport, json_path: str | Path, txt_path: str | Path) -> None:
    Path(json_path).write_text(
        json.dumps(report_to_dict(report), indent=2), encoding="utf-8"
    )
    Path(txt_path).write_text(report_to_text(report), encoding="utf-8")


def save_classifier(model: SoftmaxClassifier, path: str | Path) -> None:
    np.savez(
        path,
        weights=model.weights,
        bias=model.bias,
        label_names=np.array(model.label_names, dtype=object),
    )


def load_classifier(path: str | Path) -> SoftmaxClassifier:
    data = np.load(path, allow_pickle=True)
    return SoftmaxClassifier(
        weights=data["weights"],
        bias=data["bias"],
        label_names=[str(x) for x in data["label_names"]],
    )
