"""Visual-tempo measurement and the analyses built on it.

A video's tempo is proxied by the full width at half maximum of its
frame-wise true-class probability curve (wide curve = slow action). From
per-instance widths we get per-class tempo variances, relate them to the
per-class accuracy gain of a TPN model over its baseline, and sweep the
sampling stride to probe robustness to tempo changes.
"""

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, TPNError
from .trainer import EvalReport, evaluate
from .videodata import SampleScheme, to_tensor

log = logging.getLogger(__name__)

DEFAULT_STRIDES = (2, 4, 6, 10, 12, 14, 16)


@dataclass
class ProbCurve:
    values: np.ndarray
    video_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) < 1:
            raise ValueError("a probability curve needs at least one value")
        if not np.isfinite(self.values).all():
            raise ValueError(f"curve {self.video_id!r} has non-finite values")

    def __len__(self):
        return len(self.values)


@dataclass
class TempoRecord:
    video_id: str
    class_id: int
    fwhm: float


@dataclass
class ClassTempoStats:
    class_id: int
    variance: float
    count: int


@dataclass
class GainVarianceBin:
    variance_lo: float
    variance_hi: float
    mean_gain: float
    num_classes: int

    @property
    def center(self):
        return (self.variance_lo + self.variance_hi) / 2


@dataclass
class GainFit:
    bins: List[GainVarianceBin]
    slope: float
    intercept: float
    pearson_r: float


class CorrelationUndefined(TPNError, ValueError):
    """Too few non-empty bins for a line fit; ``bins`` holds what was found."""

    def __init__(self, message, bins=()):
        self.bins = list(bins)
        super().__init__(message)


def fwhm(curve) -> float:
    """Full width at half maximum of a sampled curve, in frame units.

    The leftmost and rightmost samples at or above half the maximum are
    located, and each crossing is refined by linear interpolation towards the
    neighbouring sample below half. A side that never drops below half
    extends to the curve boundary. Result lies in [0, len - 1].
    """
    v = curve.values if isinstance(curve, ProbCurve) else np.asarray(curve, dtype=np.float64)
    if v.ndim != 1 or len(v) < 1:
        raise ValueError("fwhm needs a non-empty 1-D curve")
    half = v.max() / 2
    above = np.flatnonzero(v >= half)
    i, j = int(above[0]), int(above[-1])
    # fractional distances outwards from samples i and j to the crossing points;
    # summing them separately keeps the result exact under time reversal
    left = 0.0 if i == 0 else (v[i] - half) / (v[i] - v[i - 1])
    right = 0.0 if j == len(v) - 1 else (v[j] - half) / (v[j] - v[j + 1])
    return float(j - i) + (left + right)


@torch.no_grad()
def frame_probabilities(model, video, batch_size: int = 128) -> ProbCurve:
    """Per-frame softmax probability of the video's true class.

    Every frame is classified on its own, as a one-segment (2D) or one-frame
    (3D) clip, centre-cropped to the model's input size.
    """
    if getattr(model, "tpn", None) is not None:
        raise ConfigError("analysis", "frame probabilities need a single-frame baseline, not a TPN model")
    if not getattr(model, "trained", True):
        warnings.warn("frame_probabilities called with an untrained model", stacklevel=2)
    was_training = model.training
    model.eval()
    frames = video.load()
    size = model.spec.input_size
    h, w = frames.shape[-2:]
    if h < size or w < size:
        raise DataError(f"frames of {h}x{w} smaller than model input {size}")
    top, left = (h - size) // 2, (w - size) // 2
    frames = frames[..., top:top + size, left:left + size]
    out = []
    for k in range(0, len(frames), batch_size):
        x = to_tensor(frames[k:k + batch_size])[:, None]       # (F, 1, C, H, W)
        main, _ = model(x)
        out.append(F.softmax(main.double(), dim=1)[:, video.class_id])
    model.train(was_training)
    return ProbCurve(torch.cat(out).numpy(), video.id)


def tempo_records(model, dataset) -> List[TempoRecord]:
    return [TempoRecord(rec.id, rec.class_id, fwhm(frame_probabilities(model, rec)))
            for rec in dataset]


def class_tempo_variance(records: Sequence[TempoRecord]) -> List[ClassTempoStats]:
    """Population variance of FWHM per class, highest variance first."""
    by_class: Dict[int, List[float]] = {}
    for r in records:
        by_class.setdefault(r.class_id, []).append(r.fwhm)
    stats = []
    for c, values in by_class.items():
        # sort first so the result does not depend on record order
        arr = np.sort(np.asarray(values, dtype=np.float64))
        stats.append(ClassTempoStats(c, float(np.mean((arr - arr.mean()) ** 2)), len(arr)))
    stats.sort(key=lambda s: (-s.variance, s.class_id))
    return stats


def _fit_line(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    sxy = float(np.dot(dx, dy))
    syy = float(np.dot(dy, dy))
    slope = sxy / sxx
    intercept = float(y.mean() - slope * x.mean())
    r = sxy / math.sqrt(sxx * syy) if syy > 0 else float("nan")
    return slope, intercept, r


def gain_vs_variance(stats: Sequence[ClassTempoStats], base: EvalReport, tpn: EvalReport,
                     bin_width: float = 10.0, per_class_fit: bool = False) -> GainFit:
    """Bin classes by tempo variance and regress mean accuracy gain on bin centre.

    Empty bins are skipped. With ``per_class_fit`` the line is fitted over the
    raw (variance, gain) points instead of the bin means.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if set(base.per_class_top1) != set(tpn.per_class_top1):
        raise ValueError("base and tpn reports cover different classes")
    gains = {}
    for s in stats:
        if s.class_id not in base.per_class_top1:
            raise ValueError(f"class {s.class_id} missing from the evaluation reports")
        gains[s.class_id] = tpn.per_class_top1[s.class_id] - base.per_class_top1[s.class_id]
    groups: Dict[int, List[float]] = {}
    for s in stats:
        groups.setdefault(int(math.floor(s.variance / bin_width)), []).append(gains[s.class_id])
    bins = []
    for k in sorted(groups):
        g = groups[k]
        bins.append(GainVarianceBin(k * bin_width, (k + 1) * bin_width, float(np.mean(g)), len(g)))
    if len(bins) < 2:
        raise CorrelationUndefined(f"need at least 2 non-empty variance bins, got {len(bins)}", bins)
    if per_class_fit:
        x = [s.variance for s in stats]
        y = [gains[s.class_id] for s in stats]
    else:
        x = [b.center for b in bins]
        y = [b.mean_gain for b in bins]
    slope, intercept, r = _fit_line(x, y)
    return GainFit(bins, slope, intercept, r)


@dataclass
class SweepEntry:
    stride: int
    top1: Optional[float]
    error: Optional[str] = None


def robustness_sweep(model, dataset, strides: Sequence[int], T: int = 8, crop: str = "center",
                     crop_size: Optional[int] = None) -> Dict[int, SweepEntry]:
    """Top-1 of a frozen model when clips are re-sampled at each stride.

    Each clip takes T frames at the given stride from a centred window of
    T * stride frames. Strides that do not fit the videos get an error entry
    and the sweep carries on.
    """
    out = {}
    shortest = min(r.num_frames for r in dataset)
    for stride in strides:
        if (T - 1) * stride + 1 > shortest or T * stride > shortest:
            msg = f"stride {stride} needs {T * stride} frames, shortest video has {shortest}"
            log.warning(msg)
            out[stride] = SweepEntry(stride, None, msg)
            continue
        scheme = SampleScheme("windowed", T=T, tau=stride, window=T * stride)
        report = evaluate(model, dataset, scheme, crop, crop_size=crop_size)
        out[stride] = SweepEntry(stride, report.top1)
    return out


def spread(entries: Dict[int, SweepEntry]) -> float:
    vals = [e.top1 for e in entries.values() if e.top1 is not None]
    return max(vals) - min(vals)


# ---------------------------------------------------------------------------
# file outputs


def _csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_tempo_records(path, records):
    _csv(path, ["video_id", "class_id", "fwhm"],
         [(r.video_id, r.class_id, _num(r.fwhm)) for r in records])


def write_class_variance(path, stats):
    _csv(path, ["class_id", "variance", "count", "rank"],
         [(s.class_id, _num(s.variance), s.count, rank) for rank, s in enumerate(stats, 1)])


def write_gain_fit(csv_path, json_path, fit: GainFit, error: Optional[str] = None):
    """Bins as CSV and the line as JSON; an undefined fit is written as nulls plus ``error``."""
    _csv(csv_path, ["bin_lo", "bin_hi", "mean_gain", "num_classes"],
         [(_num(b.variance_lo), _num(b.variance_hi), _num(b.mean_gain), b.num_classes)
          for b in fit.bins])
    clean = lambda x: None if x is None or math.isnan(x) else x   # noqa: E731
    payload = {"slope": clean(fit.slope), "intercept": clean(fit.intercept),
               "pearson_r": clean(fit.pearson_r)}
    if error is not None:
        payload["error"] = error
    Path(json_path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def write_robustness(path, sweeps: Dict[str, Dict[int, SweepEntry]]):
    """One row per (model, stride); ``sweeps`` maps a model label to its sweep."""
    rows = []
    for label, entries in sweeps.items():
        for stride in sorted(entries):
            e = entries[stride]
            rows.append((label, stride, _num(e.top1), e.error or ""))
    _csv(path, ["model", "stride", "top1", "error"], rows)
