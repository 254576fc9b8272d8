"""Calibration and accuracy metrics over labeled prediction sets.

Metrics are computed by building a reliability table (uniform confidence bins
on [0, 1], optionally conditioned on the predicted or ground-truth class) and
re-aggregating it, so a table written to CSV always reproduces its metric
exactly. Bin edges are ``[b/O, (b+1)/O)`` with the final bin closed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, DegenerateInputError

DEFAULT_BINS = 15

CONDITION_NONE = "none"
CONDITION_PRED = "pred-class"
CONDITION_GT = "gt-class"


@dataclass
class PredictionSet:
    """N predicted class distributions with ground-truth labels."""

    probs: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.gt = np.asarray(self.gt, dtype=np.int64)
        if self.probs.ndim != 2 or self.probs.shape[0] != self.gt.shape[0]:
            raise DegenerateInputError(
                f"probs {self.probs.shape} and gt {self.gt.shape} are inconsistent"
            )
        if self.probs.shape[0] == 0:
            raise DegenerateInputError("empty prediction set")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
            raise DegenerateInputError("prediction rows must sum to 1 within 1e-6")
        k = self.probs.shape[1]
        if np.any(self.gt < 0) or np.any(self.gt >= k):
            raise DegenerateInputError(f"gt labels must lie in [0, {k})")

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def class_count(self) -> int:
        return self.probs.shape[1]

    @cached_property
    def pred(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    @cached_property
    def conf(self) -> np.ndarray:
        return np.max(self.probs, axis=1)

    @cached_property
    def correct(self) -> np.ndarray:
        return (self.pred == self.gt).astype(np.float64)


@dataclass
class ReliabilityTable:
    """Per-(bin, conditioning class) confidence/accuracy/count rows.

    Rows cover the full bin x class cross product (empty rows carry count 0);
    ``cond_class`` is -1 when unconditioned.
    """

    bin_count: int
    conditioning: str
    bin_index: np.ndarray
    cond_class: np.ndarray
    mean_conf: np.ndarray
    mean_acc: np.ndarray
    count: np.ndarray


def bin_indices(conf: np.ndarray, bins: int) -> np.ndarray:
    """Uniform-bin index of each confidence; a confidence of 1.0 lands in the
    top bin."""
    idx = np.floor(conf * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


def reliability_table(preds: PredictionSet, bins: int = DEFAULT_BINS, conditioning: str = CONDITION_NONE) -> ReliabilityTable:
    if bins < 1:
        raise ConfigError(f"bin count must be >= 1, got {bins}")
    if conditioning not in (CONDITION_NONE, CONDITION_PRED, CONDITION_GT):
        raise ConfigError(f"unknown conditioning {conditioning!r}")
    b = bin_indices(preds.conf, bins)
    if conditioning == CONDITION_NONE:
        key = b
        rows = bins
        cond = np.full(bins, -1, dtype=np.int64)
        bin_col = np.arange(bins, dtype=np.int64)
    else:
        k = preds.class_count
        cls = preds.pred if conditioning == CONDITION_PRED else preds.gt
        key = b * k + cls
        rows = bins * k
        bin_col = np.repeat(np.arange(bins, dtype=np.int64), k)
        cond = np.tile(np.arange(k, dtype=np.int64), bins)
    count = np.bincount(key, minlength=rows).astype(np.int64)
    conf_sum = np.bincount(key, weights=preds.conf, minlength=rows)
    acc_sum = np.bincount(key, weights=preds.correct, minlength=rows)
    nz = count > 0
    mean_conf = np.zeros(rows)
    mean_acc = np.zeros(rows)
    mean_conf[nz] = conf_sum[nz] / count[nz]
    mean_acc[nz] = acc_sum[nz] / count[nz]
    return ReliabilityTable(
        bin_count=bins,
        conditioning=conditioning,
        bin_index=bin_col,
        cond_class=cond,
        mean_conf=mean_conf,
        mean_acc=mean_acc,
        count=count,
    )


def _weighted_gap(table: ReliabilityTable) -> float:
    n = table.count.sum()
    nz = table.count > 0
    gaps = np.abs(table.mean_acc[nz] - table.mean_conf[nz])
    return float(np.sum(table.count[nz] / n * gaps))


def ece_from_table(table: ReliabilityTable) -> float:
    return _weighted_gap(table)


def tl_ece_from_table(table: ReliabilityTable) -> float:
    return _weighted_gap(table)


def mece_from_table(table: ReliabilityTable) -> float:
    """Average of per-ground-truth-class calibration errors, each class's bins
    weighted by its own frequency. Classes absent from the labels are skipped."""
    if table.conditioning != CONDITION_GT:
        raise ConfigError("mECE needs a gt-class conditioned table")
    per_class = []
    for k in np.unique(table.cond_class):
        rows = table.cond_class == k
        n_k = table.count[rows].sum()
        if n_k == 0:
            continue
        nz = rows & (table.count > 0)
        gaps = np.abs(table.mean_acc[nz] - table.mean_conf[nz])
        per_class.append(np.sum(table.count[nz] / n_k * gaps))
    if not per_class:
        raise DegenerateInputError("no labeled samples for mECE")
    return float(np.mean(per_class))


def compute_ece(preds: PredictionSet, bins: int = DEFAULT_BINS) -> float:
    """Expected calibration error: confidence-binned |accuracy - confidence|
    weighted by bin occupancy."""
    return ece_from_table(reliability_table(preds, bins, CONDITION_NONE))


def compute_tl_ece(preds: PredictionSet, bins: int = DEFAULT_BINS) -> float:
    """ECE with bins additionally conditioned on the predicted class."""
    return tl_ece_from_table(reliability_table(preds, bins, CONDITION_PRED))


def compute_mece(preds: PredictionSet, bins: int = DEFAULT_BINS) -> float:
    """Class-frequency-agnostic ECE: bins conditioned on the ground-truth
    class, per-class errors averaged with equal class weight."""
    return mece_from_table(reliability_table(preds, bins, CONDITION_GT))


def compute_brier(preds: PredictionSet) -> float:
    """Mean squared distance between predicted distribution and one-hot truth."""
    onehot = np.zeros_like(preds.probs)
    onehot[np.arange(len(preds)), preds.gt] = 1.0
    return float(np.mean(np.sum((preds.probs - onehot) ** 2, axis=1)))


def compute_nll(preds: PredictionSet) -> float:
    """Mean negative log predicted probability of the true class (floored at 1e-12)."""
    p = np.maximum(preds.probs[np.arange(len(preds)), preds.gt], 1e-12)
    return float(-np.mean(np.log(p)))


def compute_miou(preds: PredictionSet) -> float:
    """Mean intersection-over-union across classes present in the labels."""
    k = preds.class_count
    confusion = np.bincount(preds.gt * k + preds.pred, minlength=k * k).reshape(k, k)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    present = confusion.sum(axis=1) > 0
    union = tp + fp + fn
    use = present & (union > 0)
    if not np.any(use):
        raise DegenerateInputError("no labeled samples for mIoU")
    return float(np.mean(tp[use] / union[use]))


def all_metrics(preds: PredictionSet, bins: int = DEFAULT_BINS) -> dict[str, float]:
    """The six standard metrics as a JSON-ready dict."""
    return {
        "ece": compute_ece(preds, bins),
        "tl_ece": compute_tl_ece(preds, bins),
        "mece": compute_mece(preds, bins),
        "brier": compute_brier(preds),
        "nll": compute_nll(preds),
        "miou": compute_miou(preds),
    }


def write_reliability_csv(table: ReliabilityTable, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("bin,cond_class,mean_conf,mean_acc,count\n")
        for i in range(table.count.size):
            fh.write(
                f"{table.bin_index[i]},{table.cond_class[i]},"
                f"{table.mean_conf[i]:.17g},{table.mean_acc[i]:.17g},{table.count[i]}\n"
            )
