"""Region Dice and HD95 for nested tumor regions."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from m4fuse.errors import DataError, MetricError, ShapeError

# BraTS convention: 1 necrotic core, 2 edema, 4 enhancing tumor
BRATS_LABELS = (0, 1, 2, 4)
REGIONS = {"WT": (1, 2, 4), "TC": (1, 4), "ET": (4,)}

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def class_to_label(classes: np.ndarray, labels=BRATS_LABELS) -> np.ndarray:
    return np.asarray(labels)[np.asarray(classes)]


def label_to_class(volume: np.ndarray, labels=BRATS_LABELS) -> np.ndarray:
    volume = np.asarray(volume)
    out = np.full(volume.shape, -1, dtype=np.int64)
    for idx, lab in enumerate(labels):
        out[volume == lab] = idx
    if (out < 0).any():
        bad = sorted(set(np.unique(volume[out < 0]).tolist()))
        raise DataError(f"unexpected label values {bad}; expected {list(labels)}")
    return out


def composite_regions(labels: np.ndarray, regions=REGIONS, valid=BRATS_LABELS) -> dict[str, np.ndarray]:
    labels = np.asarray(labels)
    present = set(np.unique(labels).tolist())
    unexpected = present - set(valid)
    if unexpected:
        raise DataError(f"unexpected label values {sorted(unexpected)}; expected {list(valid)}")
    return {name: np.isin(labels, members) for name, members in regions.items()}


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background or out-of-bounds neighbour."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_FACE_NEIGHBOURS, border_value=0)
    return mask & ~interior


def surface_distances(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled directed boundary distances a->b and b->a."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise MetricError("HD95 is undefined when either mask is empty")
    spacing = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(a)) * spacing
    pb = np.argwhere(boundary(b)) * spacing
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return np.concatenate([d_ab, d_ba])


def hd95(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(np.percentile(surface_distances(a, b, spacing), 95))


def region_scores(pred_labels: np.ndarray, gt_labels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Dice and HD95 per composite region; HD95 is None when undefined."""
    pred = composite_regions(pred_labels)
    gt = composite_regions(gt_labels)
    out = {}
    for name in REGIONS:
        try:
            h = hd95(pred[name], gt[name], spacing)
        except MetricError:
            h = None
        out[name] = {"dice": dice(pred[name], gt[name]), "hd95": h}
    return out


def average_scores(per_case: list[dict]) -> dict:
    """Mean Dice and HD95 per region; missing HD95 values are excluded and counted."""
    summary = {}
    for name in REGIONS:
        dices = [c[name]["dice"] for c in per_case]
        hds = [c[name]["hd95"] for c in per_case if c[name]["hd95"] is not None]
        summary[name] = {
            "dice": float(np.mean(dices)) if dices else math.nan,
            "hd95": float(np.mean(hds)) if hds else None,
            "hd95_missing": len(per_case) - len(hds),
        }
    return summary
