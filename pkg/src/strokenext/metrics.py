"""Evaluation metrics: confusion matrix, accuracy/P/R/F1, balanced accuracy,
MCC, AUROC, AUPRC, Brier score, ECE, per-class sensitivity/specificity."""

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import EvaluationError


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    true_label: int
    pred_label: int
    probs: tuple

    @classmethod
    def from_probs(cls, sample_id, true_label, probs):
        probs = tuple(float(p) for p in probs)
        # argmax with ties broken toward the lowest class index
        pred = int(np.argmax(probs))
        return cls(sample_id, int(true_label), pred, probs)


def confusion(records, num_classes=None):
    """counts[t][p] = number of records with true class t predicted as p."""
    if not records:
        raise EvaluationError("cannot build a confusion matrix from zero records")
    if num_classes is None:
        num_classes = len(records[0].probs)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for r in records:
        cm[r.true_label, r.pred_label] += 1
    return cm


def basic_metrics(cm):
    """Accuracy, support-weighted and macro P/R/F1, balanced accuracy.

    Classes never predicted contribute precision 0; support-weighted recall
    is algebraically identical to accuracy.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)

    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)

    w = support / total
    present = support > 0
    return {
        "accuracy": float(tp.sum() / total),
        "precision": float((w * precision).sum()),
        "recall": float((w * recall).sum()),
        "f1": float((w * f1).sum()),
        "balanced_accuracy": float(recall[present].mean()),
        "precision_macro": float(precision[present].mean()),
        "recall_macro": float(recall[present].mean()),
        "f1_macro": float(f1[present].mean()),
    }


def mcc(cm):
    """Binary Matthews correlation; 0 when any marginal is empty."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.shape != (2, 2):
        raise EvaluationError(f"MCC requires a binary confusion matrix, got {cm.shape}")
    tn, fp, fn, tp = cm[0, 0], cm[0, 1], cm[1, 0], cm[1, 1]
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / denom)


def auroc(scores, labels):
    """Probability that a random positive outranks a random negative, ties
    counted half (Mann-Whitney / rank formulation)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUROC requires both classes present")

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels):
    """Average precision: sum of precision-weighted recall increments over
    thresholds at the distinct scores, descending."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise EvaluationError("AUPRC requires at least one positive")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int((sorted_labels[i:j + 1] == 1).sum())
        fp += (j - i + 1) - int((sorted_labels[i:j + 1] == 1).sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def brier(records, positive_label=1, multiclass=False):
    """Mean squared error of the positive-class probability against the
    binary outcome; ``multiclass`` switches to the sum-over-classes form."""
    if not records:
        raise EvaluationError("cannot score zero records")
    if multiclass:
        total = 0.0
        for r in records:
            total += sum((p - (1.0 if k == r.true_label else 0.0)) ** 2
                         for k, p in enumerate(r.probs))
        return total / len(records)
    total = 0.0
    for r in records:
        y = 1.0 if r.true_label == positive_label else 0.0
        total += (r.probs[positive_label] - y) ** 2
    return total / len(records)


def ece(records, n_bins=15):
    """Expected calibration error over equal-width confidence bins on (0,1]."""
    if not records:
        return 0.0
    n = len(records)
    bin_count = np.zeros(n_bins)
    bin_correct = np.zeros(n_bins)
    bin_conf = np.zeros(n_bins)
    for r in records:
        conf = max(r.probs)
        b = min(n_bins - 1, max(0, int(math.ceil(conf * n_bins)) - 1))
        bin_count[b] += 1
        bin_conf[b] += conf
        bin_correct[b] += 1.0 if r.pred_label == r.true_label else 0.0
    total = 0.0
    for b in range(n_bins):
        if bin_count[b] == 0:
            continue
        acc = bin_correct[b] / bin_count[b]
        conf = bin_conf[b] / bin_count[b]
        total += (bin_count[b] / n) * abs(acc - conf)
    return float(total)


def sens_spec(cm):
    """Per-class sensitivity, specificity and support (one-vs-rest)."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    out = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        fn = cm[c].sum() - tp
        fp = cm[:, c].sum() - tp
        tn = total - tp - fn - fp
        out.append({
            "sensitivity": float(tp / (tp + fn)) if tp + fn > 0 else 0.0,
            "specificity": float(tn / (tn + fp)) if tn + fp > 0 else 0.0,
            "support": int(tp + fn),
        })
    return out


def report_from_records(records, positive_label=1, n_bins=15, class_names=None):
    """Aggregate a prediction log into the full metric bundle."""
    cm = confusion(records)
    rep = basic_metrics(cm)
    scores = [r.probs[positive_label] for r in records]
    labels = [1 if r.true_label == positive_label else 0 for r in records]
    rep["auroc"] = auroc(scores, labels)
    rep["auprc"] = auprc(scores, labels)
    rep["mcc"] = mcc(cm) if cm.shape == (2, 2) else None
    rep["brier"] = brier(records, positive_label)
    rep["ece"] = ece(records, n_bins)
    per_class = sens_spec(cm)
    if class_names:
        for name, d in zip(class_names, per_class):
            d["class"] = name
    rep["per_class"] = per_class
    rep["confusion"] = cm.tolist()
    rep["n_samples"] = len(records)
    rep["positive_label"] = positive_label
    rep["ece_bins"] = n_bins
    return rep


def evaluate(model, index, batch_size=80, image_size=224, positive_label=1, n_bins=15):
    """Deterministic inference over a split; returns (report, records)."""
    from .data import sample_tensor

    if len(index) == 0:
        raise EvaluationError("cannot evaluate an empty split")
    model.eval()
    records = []
    with torch.no_grad():
        for start in range(0, len(index), batch_size):
            chunk = index.samples[start:start + batch_size]
            x = torch.stack([sample_tensor(s, None, None, size=image_size) for s in chunk])
            probs = torch.softmax(model(x), dim=1)
            for s, p in zip(chunk, probs):
                sid = f"{s.path.parent.name}/{s.path.name}"
                records.append(PredictionRecord.from_probs(sid, s.label, p.tolist()))
    report = report_from_records(records, positive_label=positive_label,
                                 n_bins=n_bins, class_names=index.class_names)
    return report, records


def write_prediction_log(records, path):
    """CSV log: sample_id,true_label,pred_label,prob_0,... with full-precision
    probabilities (exact float round-trip)."""
    k = len(records[0].probs)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "true_label", "pred_label"] + [f"prob_{i}" for i in range(k)])
        for r in records:
            w.writerow([r.sample_id, r.true_label, r.pred_label] + [repr(p) for p in r.probs])


def read_prediction_log(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        k = len(header) - 3
        records = []
        for row in reader:
            records.append(PredictionRecord(
                sample_id=row[0], true_label=int(row[1]), pred_label=int(row[2]),
                probs=tuple(float(v) for v in row[3:3 + k])))
    if not records:
        raise EvaluationError(f"empty prediction log: {path}")
    return records
