"""Segmentation quality scores from per-point predictions."""

from dataclasses import dataclass

import numpy as np


@dataclass
class SegScores:
    miou: float
    macc: float
    per_class_iou: np.ndarray  # NaN for classes absent from the labels
    confusion: np.ndarray      # rows = true class, cols = predicted


def confusion_matrix(pred, labels, num_classes):
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ValueError(f"{pred.shape} predictions vs {labels.shape} labels")
    if pred.min(initial=0) < 0 or pred.max(initial=0) >= num_classes:
        raise ValueError("prediction outside class range")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError("label outside class range")
    flat = labels * num_classes + pred
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def evaluate_miou(pred, labels, num_classes=None):
    """Mean IoU and mean per-class recall over classes present in labels.

    ``pred`` is either per-point class ids or an n x K logit matrix
    (argmax taken rowwise, ties to the lowest class id).
    """
    pred = np.asarray(pred)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no labels to score")
    if num_classes is None:
        num_classes = int(max(pred.max(), labels.max())) + 1
    cm = confusion_matrix(pred, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    true_count = cm.sum(axis=1).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    present = np.unique(labels)
    iou = np.full(num_classes, np.nan)
    union = true_count + pred_count - tp
    iou[present] = tp[present] / union[present]
    recall = tp[present] / true_count[present]
    return SegScores(miou=float(iou[present].mean()),
                     macc=float(recall.mean()),
                     per_class_iou=iou, confusion=cm)
