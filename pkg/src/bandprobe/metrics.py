"""Confusion-matrix metrics, per image and averaged over a test set.

Water (1) is the positive class, land (0) the negative class.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

METRIC_NAMES = ("accuracy", "balanced_accuracy", "precision", "recall", "f1")


def exact_mean(values):
    """Correctly rounded arithmetic mean (a list of equal floats returns that float)."""
    values = list(values)
    if not values:
        raise ValueError("mean of an empty sequence")
    return float(sum(map(Fraction, values), Fraction(0)) / len(values))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def _binary(a, what):
    a = np.asarray(a)
    if a.size and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{what} mask must contain only 0 and 1")
    return a.astype(bool)


def confusion(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    p, t = _binary(pred, "predicted"), _binary(truth, "true")
    tp = int(np.count_nonzero(p & t))
    tn = int(np.count_nonzero(~p & ~t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, tn, fp, fn)


@dataclass(frozen=True)
class MetricValues:
    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    f1: float
    flags: tuple = ()

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _ratio(num, den, flag, flags):
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def compute_metrics(c):
    if c.total <= 0:
        raise ValueError("confusion counts are empty")
    flags = []
    accuracy = (c.tp + c.tn) / c.total
    precision = _ratio(c.tp, c.tp + c.fp, "precision_undefined", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall_undefined", flags)
    specificity = _ratio(c.tn, c.tn + c.fp, "specificity_undefined", flags)
    balanced = 0.5 * (recall + specificity)
    if precision + recall == 0:
        f1 = 0.0
        flags.append("f1_undefined")
    else:
        f1 = 2 * (precision * recall / (precision + recall))
    return MetricValues(accuracy, balanced, precision, recall, f1, tuple(flags))


@dataclass
class MetricReport:
    ids: list
    counts: list
    per_image: list
    aggregate: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, ids, counts):
        per_image = [compute_metrics(c) for c in counts]
        aggregate = {k: exact_mean(getattr(m, k) for m in per_image) for k in METRIC_NAMES}
        return cls(list(ids), list(counts), per_image, aggregate)

    def values(self, metric):
        return [getattr(m, metric) for m in self.per_image]

    def to_json(self):
        rows = []
        for sid, c, m in zip(self.ids, self.counts, self.per_image):
            row = {"id": sid, **asdict(c), **m.as_dict()}
            if m.flags:
                row["flags"] = list(m.flags)
            rows.append(row)
        return {"num_images": len(rows), "aggregate": dict(self.aggregate), "per_image": rows}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "tp", "tn", "fp", "fn", *METRIC_NAMES, "flags"])
        for sid, c, m in zip(self.ids, self.counts, self.per_image):
            w.writerow([sid, c.tp, c.tn, c.fp, c.fn,
                        *(repr(getattr(m, k)) for k in METRIC_NAMES), ";".join(m.flags)])
        w.writerow(["mean", "", "", "", "", *(repr(self.aggregate[k]) for k in METRIC_NAMES), ""])
        return buf.getvalue()


def check_inputs(model, samples):
    """Raise naming the first sample the model cannot take."""
    cfg = model.config
    for s in samples:
        c, (h, w) = s.bands.shape[0], s.shape
        if c != cfg.in_bands:
            raise ValueError(f"sample {s.id!r}: has {c} bands, model takes {cfg.in_bands}")
        if h % cfg.multiple or w % cfg.multiple:
            raise ValueError(
                f"sample {s.id!r}: {h}x{w} is not a multiple of {cfg.multiple} in both dims"
            )


def evaluate_masks(ids, preds, truths):
    return MetricReport.from_counts(ids, [confusion(p, t) for p, t in zip(preds, truths)])


def evaluate_set(model, test_set, batch_size=8, threads=1):
    from .dataio import stack
    from .trainer import scale_input
    from .unet import predict_masks

    if not test_set:
        raise ValueError("test set is empty")
    check_inputs(model, test_set)
    model.eval()
    bands, masks = stack(test_set)
    preds = predict_masks(model, scale_input(bands, model.dtype), batch_size, threads)
    return evaluate_masks([s.id for s in test_set], preds, masks)
