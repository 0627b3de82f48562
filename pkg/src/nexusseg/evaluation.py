"""Whole-volume segmentation, morphological clean-up and the region metrics."""
import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import preprocess_volume, PatchSource
from .errors import ParameterError, ShapeError

REGIONS = {
    "complete": (1, 2, 3, 4),
    "core": (1, 3, 4),
    "enhancing": (4,),
}
METRICS = ("dice", "sensitivity", "specificity")

# overlay tints for labels 1..4: necrosis red, edema green, non-enhancing blue, enhancing yellow
TINTS = {1: (255, 0, 0), 2: (0, 255, 0), 3: (0, 0, 255), 4: (255, 255, 0)}

_SQUARE = np.ones((3, 3), dtype=bool)


# segmentation ------------------------------------------------------------------

def volume_features(model, vol, preprocess=True, batch=256):
    """Dense-layer input features for every brain pixel.

    Returns ``(coords, features)`` with ``coords`` an ``[N, 3]`` array of
    (slice, row, col), slice-major.  The model runs in inference mode.
    """
    if vol.modalities is None or vol.modalities.shape[0] != 4:
        got = 0 if vol.modalities is None else vol.modalities.shape[0]
        raise ShapeError(f"segmentation needs 4 modalities, got {got}")
    v = preprocess_volume(vol) if preprocess else vol
    src = PatchSource(v)
    brain = v.brain()
    coords, feats = [], []
    for z in range(v.shape[0]):
        pts = np.argwhere(brain[z])
        if not len(pts):
            continue
        c = np.column_stack([np.full(len(pts), z), pts])
        for s in range(0, len(c), batch):
            p33, p15 = src.cut(c[s : s + batch])
            feats.append(model.features(p33, p15, train=False))
        coords.append(c)
    if not coords:
        return np.empty((0, 3), np.int64), np.empty((0, model.dense.features))
    return np.concatenate(coords), np.concatenate(feats)


def labels_from_logits(shape, coords, logits):
    """Scatter argmax labels (ties to the lower label) into a volume of zeros."""
    out = np.zeros(shape, dtype=np.uint8)
    if len(coords):
        out[coords[:, 0], coords[:, 1], coords[:, 2]] = np.argmax(logits, axis=1)
    return out


def head_logits(model, features):
    d = model.dense
    return features @ d.params["w"] + d.params["b"]


def segment_volume(model, vol, preprocess=True, batch=256):
    """Label every brain pixel with the most probable class; background stays 0."""
    coords, feats = volume_features(model, vol, preprocess, batch)
    return labels_from_logits(vol.shape, coords, head_logits(model, feats))


# morphology --------------------------------------------------------------------

def _close(mask2d):
    # close on the zero-extended plane: the pad lets the dilation spill past the
    # edge, so the erosion neither eats edge-touching masks nor grows new edge pixels
    padded = np.pad(mask2d, 1)
    return ndimage.binary_erosion(ndimage.binary_dilation(padded, _SQUARE), _SQUARE, border_value=0)[1:-1, 1:-1]


def _open_close(mask2d):
    opened = ndimage.binary_dilation(ndimage.binary_erosion(mask2d, _SQUARE, border_value=0), _SQUARE)
    return opened, _close(opened)


def binary_closing(mask):
    """Per-slice closing (dilation then erosion) of a 2D or 3D boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    return _close(mask) if mask.ndim == 2 else np.stack([_close(m) for m in mask])


def binary_open_close(mask):
    """Per-slice opening then closing of a 2D or 3D boolean mask (3x3 square element)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        return _open_close(mask)[1]
    return np.stack([_open_close(m)[1] for m in mask])


def _cleanup_slice(lab):
    mask = lab > 0
    opened, closed = _open_close(mask)
    out = np.where(closed & mask, lab, 0).astype(np.uint8)
    added = closed & ~mask
    if added.any():
        kept = np.where(opened, lab, 0)
        counts = np.stack([
            ndimage.correlate((kept == c).astype(np.int64), np.ones((3, 3), np.int64), mode="constant")
            for c in range(1, 5)
        ])
        best = counts.argmax(axis=0) + 1  # first maximum -> lower label on ties
        best = np.where(counts.max(axis=0) > 0, best, 0)
        out[added] = best[added]
    return out


def morph_cleanup(labels):
    """Remove small false positives and fill pinholes in the tumour mask.

    The mask (labels > 0) is opened then closed slice by slice; removed
    pixels become 0 and pixels added by the closing take the majority tumour
    label of their 8-neighbourhood.
    """
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim == 2:
        return _cleanup_slice(labels)
    return np.stack([_cleanup_slice(s) for s in labels])


# metrics -----------------------------------------------------------------------

@dataclass
class RegionScore:
    dice: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int
    flags: list = field(default_factory=list)


@dataclass
class SegReport:
    regions: dict  # region name -> RegionScore
    name: str = ""

    def __getitem__(self, region):
        return self.regions[region]


def region_score(pred_mask, truth_mask):
    L = np.asarray(pred_mask, dtype=bool)
    G = np.asarray(truth_mask, dtype=bool)
    tp = int(np.count_nonzero(L & G))
    fp = int(np.count_nonzero(L & ~G))
    fn = int(np.count_nonzero(~L & G))
    tn = int(np.count_nonzero(~L & ~G))
    flags = []
    if tp + fn == 0:
        dice = 1.0 if fp == 0 else 0.0
        sens = 1.0
        flags.append("empty-truth")
    else:
        dice = 2 * tp / (2 * tp + fp + fn)
        sens = tp / (tp + fn)
    if tn + fp == 0:
        spec = 1.0
        flags.append("empty-normal")
    else:
        spec = tn / (tn + fp)
    return RegionScore(dice, sens, spec, tp, fp, tn, fn, flags)


def evaluate(pred, truth, name=""):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in extent")
    return SegReport(
        {r: region_score(np.isin(pred, m), np.isin(truth, m)) for r, m in REGIONS.items()},
        name,
    )


@dataclass
class BoxStats:
    mean: float
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list


def boxstats(values):
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return BoxStats(
        float(v.mean()), float(med), float(q1), float(q3),
        float(inside.min()), float(inside.max()),
        [float(x) for x in v[(v < lo) | (v > hi)]],
    )


def report_boxstats(reports):
    """Box-plot summary per (region, metric) over a list of reports."""
    if not reports:
        raise ParameterError("need at least one report")
    return {
        (r, m): boxstats([getattr(rep.regions[r], m) for rep in reports])
        for r in REGIONS
        for m in METRICS
    }


# output ------------------------------------------------------------------------

REPORT_HEADER = ["region", "dice", "sensitivity", "specificity", "tp", "fp", "tn", "fn", "flags"]


def _fmt(x):
    return f"{x:.10g}"


def report_rows(report):
    for r, s in report.regions.items():
        yield [r, _fmt(s.dice), _fmt(s.sensitivity), _fmt(s.specificity), s.tp, s.fp, s.tn, s.fn, ";".join(s.flags)]


def write_report_csv(path, reports, aggregate=False):
    """One block of region rows per report (prefixed by a ``volume`` column
    when there are several), plus mean/median rows when ``aggregate``."""
    multi = len(reports) > 1 or aggregate
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["volume"] if multi else []) + REPORT_HEADER)
        for rep in reports:
            for row in report_rows(rep):
                w.writerow(([rep.name] if multi else []) + row)
        if aggregate:
            stats = report_boxstats(reports)
            for stat in ("mean", "median"):
                for r in REGIONS:
                    vals = [_fmt(getattr(stats[(r, m)], stat)) for m in METRICS]
                    w.writerow([f"<{stat}>", r, *vals, "", "", "", "", ""])


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def write_overlays(directory, vol, labels, modality=3):
    """One P6 image per slice: grey modality (Flair by default) with tumour tints."""
    os.makedirs(directory, exist_ok=True)
    img = np.asarray(vol.modalities[modality], dtype=np.float64)
    lo, hi = img.min(), img.max()
    grey = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo) * 255.0
    paths = []
    for z in range(img.shape[0]):
        rgb = np.repeat(grey[z][..., None], 3, axis=2)
        for lab, tint in TINTS.items():
            sel = labels[z] == lab
            rgb[sel] = 0.4 * rgb[sel] + 0.6 * np.array(tint, dtype=np.float64)
        p = os.path.join(directory, f"slice_{z:03d}.ppm")
        write_ppm(p, np.rint(rgb))
        paths.append(p)
    return paths
