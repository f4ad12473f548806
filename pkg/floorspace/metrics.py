"""
Pixel-level evaluation - footprint precision/recall/Dice, height errors
overall and per storey class, and height histograms.

Counts are pooled over all valid pixels. Metrics whose denominator is empty
are None (null in JSON/CSV), never 0.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

CLASS_NAMES = ("low", "multi", "mid", "high")

# Class shares of the Shenzhen reference buildings, for side-by-side reporting
CONTEXT_CLASS_SHARES = {"low": 0.519, "multi": 0.310, "mid": 0.125, "high": 0.045}


def _ratio(num: float, den: float) -> Optional[float]:
    return float(num) / float(den) if den else None


def _as_bool(name: str, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValidationError(f"{name} must be binary")
    return a.astype(bool)


def _validity(validity: Optional[np.ndarray], shape: Tuple[int, ...]) -> np.ndarray:
    if validity is None:
        return np.ones(shape, dtype=bool)
    validity = _as_bool("validity", validity)
    if validity.shape != shape:
        raise ValidationError(f"validity shape {validity.shape} != {shape}")
    return validity


@dataclass
class FootprintCounts:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class FootprintMetrics:
    precision: Optional[float]
    recall: Optional[float]
    dice: Optional[float]
    accuracy: Optional[float]
    counts: FootprintCounts


def footprint_metrics(
    pred_mask: np.ndarray,
    ref_mask: np.ndarray,
    validity: Optional[np.ndarray] = None,
) -> FootprintMetrics:
    """
    Confusion counts and derived ratios over valid pixels

    Args:
        pred_mask: Binary predicted footprint
        ref_mask: Binary reference footprint (same shape)
        validity: Optional binary mask of pixels to count

    Returns:
        FootprintMetrics; a ratio with an empty denominator is None
    """
    pred = _as_bool("pred_mask", pred_mask)
    ref = _as_bool("ref_mask", ref_mask)
    if pred.shape != ref.shape:
        raise ValidationError(f"pred shape {pred.shape} != ref shape {ref.shape}")
    valid = _validity(validity, ref.shape)

    tp = int(np.count_nonzero(pred & ref & valid))
    fp = int(np.count_nonzero(pred & ~ref & valid))
    fn = int(np.count_nonzero(~pred & ref & valid))
    tn = int(np.count_nonzero(~pred & ~ref & valid))
    return FootprintMetrics(
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        accuracy=_ratio(tp + tn, tp + fp + fn + tn),
        counts=FootprintCounts(tp, fp, fn, tn),
    )


@dataclass
class HeightMetrics:
    mae_m: Optional[float]
    rmse_m: Optional[float]
    mre: Optional[float]
    n_pixels: int


def _height_pixels(
    pred_h: np.ndarray,
    ref_h: np.ndarray,
    ref_mask: np.ndarray,
    validity: Optional[np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    pred_h = np.asarray(pred_h, dtype=np.float64)
    ref_h = np.asarray(ref_h, dtype=np.float64)
    ref = _as_bool("ref_mask", ref_mask)
    if not (pred_h.shape == ref_h.shape == ref.shape):
        raise ValidationError(f"height shapes differ: {pred_h.shape}, {ref_h.shape}, {ref.shape}")
    selected = ref & _validity(validity, ref.shape)
    if np.any(ref_h[selected] <= 0):
        raise ValidationError("reference height must be > 0 on reference building pixels")
    return pred_h[selected], ref_h[selected]


def _errors(pred: np.ndarray, ref: np.ndarray) -> HeightMetrics:
    if pred.size == 0:
        return HeightMetrics(mae_m=None, rmse_m=None, mre=None, n_pixels=0)
    e = np.abs(pred - ref)
    return HeightMetrics(
        mae_m=float(e.mean()),
        rmse_m=float(np.sqrt(np.mean(e ** 2))),
        mre=float(np.mean(e / ref)),
        n_pixels=int(pred.size),
    )


def height_metrics(
    pred_h: np.ndarray,
    ref_h: np.ndarray,
    ref_mask: np.ndarray,
    validity: Optional[np.ndarray] = None,
) -> HeightMetrics:
    """MAE, RMSE (meters) and MRE over valid reference building pixels"""
    return _errors(*_height_pixels(pred_h, ref_h, ref_mask, validity))


@dataclass(frozen=True)
class StoreyClasses:
    """Storey classes low 1-3, multi 4-6, mid 7-9, high >= 10 realized in meters"""
    metres_per_storey: float = 3.0
    upper_storeys: Tuple[int, ...] = (3, 6, 9)

    def __post_init__(self):
        if not self.metres_per_storey > 0:
            raise ValidationError("metres_per_storey must be > 0")
        if list(self.upper_storeys) != sorted(set(self.upper_storeys)) or len(self.upper_storeys) != 3:
            raise ValidationError("upper_storeys must be three increasing storey counts")

    @property
    def upper_m(self) -> np.ndarray:
        return np.asarray(self.upper_storeys, dtype=np.float64) * self.metres_per_storey

    def classify(self, heights_m: np.ndarray) -> np.ndarray:
        """Class index 0..3 per height; upper bounds are inclusive"""
        return np.searchsorted(self.upper_m, np.asarray(heights_m, dtype=np.float64), side="left")


@dataclass
class PerClassMRE:
    mre: Dict[str, Optional[float]]
    shares: Dict[str, Optional[float]]
    counts: Dict[str, int]


def per_class_mre(
    pred_h: np.ndarray,
    ref_h: np.ndarray,
    ref_mask: np.ndarray,
    classes: StoreyClasses = StoreyClasses(),
    validity: Optional[np.ndarray] = None,
) -> PerClassMRE:
    """MRE per storey class of the reference height, plus each class's pixel share"""
    pred, ref = _height_pixels(pred_h, ref_h, ref_mask, validity)
    labels = classes.classify(ref)
    mre, shares, counts = {}, {}, {}
    for index, name in enumerate(CLASS_NAMES):
        selected = labels == index
        counts[name] = int(selected.sum())
        mre[name] = _errors(pred[selected], ref[selected]).mre
        shares[name] = _ratio(counts[name], ref.size)
    return PerClassMRE(mre=mre, shares=shares, counts=counts)


@dataclass
class Histogram:
    edges: List[float]  # len(counts) + 1
    counts: List[int]
    overflow: int  # values above the cap


def height_histogram(
    heights: np.ndarray,
    mask: np.ndarray,
    bin_width_m: float = 10.0,
    cap_m: float = 100.0,
) -> Histogram:
    """
    Histogram of masked heights over [0, cap]

    Bins are [k*w, (k+1)*w), the last one closed at cap; heights above cap
    are only counted in the overflow bin.
    """
    if not (bin_width_m > 0 and cap_m > 0):
        raise ValidationError("bin width and cap must be > 0")
    edges = np.append(np.arange(0.0, cap_m, bin_width_m), cap_m)
    values = np.asarray(heights, dtype=np.float64)[_as_bool("mask", mask)]
    counts, _ = np.histogram(values[values <= cap_m], bins=edges)
    return Histogram(
        edges=edges.tolist(),
        counts=counts.astype(int).tolist(),
        overflow=int(np.count_nonzero(values > cap_m)),
    )


@dataclass
class MetricsReport:
    precision: Optional[float]
    recall: Optional[float]
    dice: Optional[float]
    accuracy: Optional[float]
    tp: int
    fp: int
    fn: int
    tn: int
    mae_m: Optional[float]
    rmse_m: Optional[float]
    mre_overall: Optional[float]
    mre_per_class: Dict[str, Optional[float]]
    class_shares: Dict[str, Optional[float]]
    context_class_shares: Dict[str, float] = field(default_factory=lambda: dict(CONTEXT_CLASS_SHARES))
    histogram_ref: Optional[Histogram] = None
    histogram_pred: Optional[Histogram] = None

    def flat(self) -> Dict[str, Optional[float]]:
        """Single-level mapping used for the CSV row"""
        row = {k: getattr(self, k) for k in (
            "precision", "recall", "dice", "accuracy", "tp", "fp", "fn", "tn", "mae_m", "rmse_m", "mre_overall",
        )}
        for name in CLASS_NAMES:
            row[f"mre_{name}"] = self.mre_per_class[name]
        for name in CLASS_NAMES:
            row[f"share_{name}"] = self.class_shares[name]
        for name in CLASS_NAMES:
            row[f"context_share_{name}"] = self.context_class_shares[name]
        return row


def evaluate(
    pred_mask: np.ndarray,
    pred_h: np.ndarray,
    ref_mask: np.ndarray,
    ref_h: np.ndarray,
    validity: Optional[np.ndarray] = None,
    classes: StoreyClasses = StoreyClasses(),
    bin_width_m: float = 10.0,
    cap_m: float = 100.0,
) -> MetricsReport:
    """
    Full evaluation of a prediction against the reference

    Args:
        pred_mask, pred_h: Predicted footprint (binary) and height (meters)
        ref_mask, ref_h: Reference footprint and height
        validity: Optional mask of pixels to evaluate (e.g. trustworthy area)
        classes: Storey class boundaries
        bin_width_m, cap_m: Histogram binning

    Returns:
        MetricsReport with every field present (undefined ones None)
    """
    fp = footprint_metrics(pred_mask, ref_mask, validity)
    hm = height_metrics(pred_h, ref_h, ref_mask, validity)
    pc = per_class_mre(pred_h, ref_h, ref_mask, classes, validity)
    valid = _validity(validity, np.asarray(ref_mask).shape)
    return MetricsReport(
        precision=fp.precision,
        recall=fp.recall,
        dice=fp.dice,
        accuracy=fp.accuracy,
        tp=fp.counts.tp,
        fp=fp.counts.fp,
        fn=fp.counts.fn,
        tn=fp.counts.tn,
        mae_m=hm.mae_m,
        rmse_m=hm.rmse_m,
        mre_overall=hm.mre,
        mre_per_class=pc.mre,
        class_shares=pc.shares,
        histogram_ref=height_histogram(ref_h, _as_bool("ref_mask", ref_mask) & valid, bin_width_m, cap_m),
        histogram_pred=height_histogram(pred_h, _as_bool("pred_mask", pred_mask) & valid, bin_width_m, cap_m),
    )


def _cell(value) -> str:
    return "null" if value is None else repr(value)


def write_report_json(report: MetricsReport, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(asdict(report), indent=2, sort_keys=True), encoding="utf-8")


def write_report_csv(report: MetricsReport, path: Union[str, Path]):
    """Header line plus one flat row"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    row = report.flat()
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(row))
        writer.writerow([_cell(v) for v in row.values()])


def write_histogram_csv(histogram: Histogram, path: Union[str, Path]):
    """Two columns (bin_start_m, count); the overflow bin is labelled '>cap'"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_start_m", "count"])
        for start, count in zip(histogram.edges[:-1], histogram.counts):
            writer.writerow([repr(start), count])
        writer.writerow([f">{histogram.edges[-1]!r}", histogram.overflow])
