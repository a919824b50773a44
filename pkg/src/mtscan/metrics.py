"""Per-task evaluation metrics and the aggregate multi-task gain."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError

HIGHER_BETTER = {"miou": True, "rmse": False, "merr": False, "boundary_f": True}


@dataclass
class MetricReport:
    """Per-task metric values plus their improvement direction."""

    values: dict[str, float] = field(default_factory=dict)
    higher_better: dict[str, bool] = field(default_factory=dict)

    def add(self, task: str, value: float, higher: bool) -> None:
        self.values[task] = float(value)
        self.higher_better[task] = higher


def metric_miou(pred: np.ndarray, label: np.ndarray, num_classes: int,
                ignore: int = -1) -> float:
    """Mean over classes of intersection/union; classes absent from both
    prediction and label are skipped."""
    valid = label != ignore
    if not valid.any():
        raise MetricError("no valid pixels for mIoU")
    p = pred[valid]
    l = label[valid]
    ious = []
    for k in range(num_classes):
        inter = np.count_nonzero((p == k) & (l == k))
        union = np.count_nonzero((p == k) | (l == k))
        if union:
            ious.append(inter / union)
    if not ious:
        raise MetricError("no class present in prediction or label")
    return float(np.mean(ious))


def metric_rmse(pred: np.ndarray, label: np.ndarray) -> float:
    valid = np.isfinite(label)
    if not valid.any():
        raise MetricError("no valid pixels for RMSE")
    diff = pred[valid] - label[valid]
    return float(np.sqrt(np.mean(diff * diff)))


def metric_merr(pred_normals: np.ndarray, label_normals: np.ndarray) -> float:
    """Mean angular error in degrees; predictions are normalized first."""
    if pred_normals.shape != label_normals.shape or pred_normals.shape[0] != 3:
        raise MetricError(f"normals must be (3, H, W), got {pred_normals.shape}")
    norm = np.linalg.norm(pred_normals, axis=0, keepdims=True)
    pred_unit = pred_normals / np.maximum(norm, 1e-12)
    dots = np.clip(np.einsum("chw,chw->hw", pred_unit, label_normals), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())


def _dilate(mask: np.ndarray) -> np.ndarray:
    """3x3 dilation: one pixel of tolerance in every direction."""
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    return out


def metric_boundary_f(pred: np.ndarray, label: np.ndarray,
                      threshold: float = 0.5) -> float:
    """F1 of thresholded boundary probability with 1-pixel match tolerance."""
    pred_bin = pred >= threshold
    label_bin = label.astype(bool)
    n_pred = np.count_nonzero(pred_bin)
    n_label = np.count_nonzero(label_bin)
    if n_pred == 0 and n_label == 0:
        return 1.0
    if n_pred == 0 or n_label == 0:
        return 0.0
    precision = np.count_nonzero(pred_bin & _dilate(label_bin)) / n_pred
    recall = np.count_nonzero(label_bin & _dilate(pred_bin)) / n_label
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def mtl_gain(report: MetricReport, stl_report: MetricReport) -> float:
    """Average signed relative improvement over the single-task reference:
    (100/T) * sum_t sigma_t * (M_t - M_t^ref) / M_t^ref."""
    if set(report.values) != set(stl_report.values):
        raise MetricError("reports cover different task sets")
    if not report.values:
        raise MetricError("empty report")
    total = 0.0
    for task, value in report.values.items():
        ref = stl_report.values[task]
        if ref == 0:
            raise MetricError(f"reference value for '{task}' is zero")
        sigma = 1.0 if report.higher_better[task] else -1.0
        total += sigma * (value - ref) / ref
    return 100.0 * total / len(report.values)
