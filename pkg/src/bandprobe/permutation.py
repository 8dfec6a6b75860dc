"""Band-level permutation importance.

For each band set, the member bands of every test image are shuffled
spatially, the model re-predicts, and the drop in mean accuracy relative to
the unpermuted baseline is reported in percentage points, averaged over
several fresh repeats.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .bands import BAND_INDEX, CANONICAL_BANDS, BandSet
from .dataio import stack
from .metrics import METRIC_NAMES, check_inputs, evaluate_masks, exact_mean
from .trainer import scale_input
from .unet import predict_masks

_JOINT_KEY = len(CANONICAL_BANDS)


def _band_seed(seed, key, band):
    return np.random.SeedSequence(seed, spawn_key=tuple(key) + (band,))


def permute_bands(sample, bands, seed, key=(), joint=False):
    """Return a copy of ``sample`` with each member band spatially shuffled.

    One fresh permutation per band, drawn from ``(seed, *key, band index)``.
    With ``joint=True`` all members share one permutation drawn from
    ``(seed, *key)``. Non-member bands and the mask are left untouched.
    """
    if isinstance(bands, str):
        bands = BandSet.single(bands)
    channels = [sample.channel(b) for b in bands.members]
    out = sample.bands.copy()
    h, w = sample.shape
    shared = None
    if joint:
        shared = np.random.default_rng(_band_seed(seed, key, _JOINT_KEY)).permutation(h * w)
    for name, ch in zip(bands.members, channels):
        if shared is None:
            perm = np.random.default_rng(_band_seed(seed, key, BAND_INDEX[name])).permutation(h * w)
        else:
            perm = shared
        out[ch] = sample.bands[ch].reshape(-1)[perm].reshape(h, w)
    return sample.replace_bands(out)


@dataclass
class ImportanceScore:
    band_set: BandSet
    baseline_accuracy: float
    repeat_accuracies: list
    drop_pp: float

    @property
    def mean_permuted_accuracy(self):
        return exact_mean(self.repeat_accuracies)

    def to_json(self):
        return {
            "label": self.band_set.label,
            "members": list(self.band_set.members),
            "repeat_accuracies": list(self.repeat_accuracies),
            "mean_permuted_accuracy": self.mean_permuted_accuracy,
            "drop_pp": self.drop_pp,
        }


def drop_in_pp(baseline, repeat_values):
    return (baseline - exact_mean(repeat_values)) * 100.0


@dataclass
class ImportanceReport:
    baseline_accuracy: float
    repeats: int
    seed: int
    entries: list
    metric: str = "accuracy"
    joint: bool = False

    def to_json(self):
        return {
            "baseline_accuracy": self.baseline_accuracy,
            "repeats": self.repeats,
            "seed": self.seed,
            "metric": self.metric,
            "joint": self.joint,
            "entries": [e.to_json() for e in self.entries],
        }

    @classmethod
    def from_json(cls, doc):
        base = doc["baseline_accuracy"]
        entries = [
            ImportanceScore(
                BandSet(e["label"], tuple(e["members"])), base, list(e["repeat_accuracies"]),
                e["drop_pp"],
            )
            for e in doc["entries"]
        ]
        return cls(base, doc["repeats"], doc.get("seed", 0), entries,
                   doc.get("metric", "accuracy"), doc.get("joint", False))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "members", "baseline_accuracy", "mean_permuted_accuracy", "drop_pp",
                    *(f"repeat_{i}" for i in range(self.repeats))])
        for e in self.entries:
            w.writerow([e.band_set.label, "+".join(e.band_set.members),
                        repr(self.baseline_accuracy), repr(e.mean_permuted_accuracy),
                        repr(e.drop_pp), *map(repr, e.repeat_accuracies)])
        return buf.getvalue()


def _score(model, ids, bands_raw, masks, metric, batch_size, threads):
    preds = predict_masks(model, scale_input(bands_raw, model.dtype), batch_size, threads)
    return exact_mean(evaluate_masks(ids, preds, masks).values(metric))


def importance_report(model, test_set, band_sets, repeats=5, seed=0, joint=False,
                      metric="accuracy", batch_size=8, threads=1):
    """Score every band set against one baseline computed once."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if metric not in METRIC_NAMES:
        raise ValueError(f"unknown metric {metric!r}; use one of {METRIC_NAMES}")
    if not test_set:
        raise ValueError("test set is empty")
    check_inputs(model, test_set)
    model.eval()
    ids = [s.id for s in test_set]
    raw, masks = stack(test_set)
    baseline = _score(model, ids, raw, masks, metric, batch_size, threads)
    entries = []
    for bs in band_sets:
        values = []
        for r in range(repeats):
            permuted = np.stack([
                permute_bands(s, bs, seed, key=(r, i), joint=joint).canonical_bands()
                for i, s in enumerate(test_set)
            ])
            values.append(_score(model, ids, permuted, masks, metric, batch_size, threads))
        entries.append(ImportanceScore(bs, baseline, values, drop_in_pp(baseline, values)))
    return ImportanceReport(baseline, repeats, seed, entries, metric, joint)


def importance_sweep(model, test_set, band_sets, repeats=5, seed=0, **kwargs):
    """One ImportanceScore per band set, in input order."""
    return importance_report(model, test_set, band_sets, repeats, seed, **kwargs).entries


def importance(model, test_set, bands, repeats=5, seed=0, **kwargs):
    if isinstance(bands, str):
        bands = BandSet.single(bands)
    return importance_sweep(model, test_set, [bands], repeats, seed, **kwargs)[0]
