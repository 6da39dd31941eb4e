"""Segmentation accuracy metrics and paired statistics.

Dice uses the standard Soerensen denominator |A|+|B|; VSI uses the absolute
volume difference, so both live in [0, 1]. Centroids are unweighted means of
voxel-center world coordinates (mm). Both-empty structures score dice = 1
and vsi = 1 and are flagged, so aggregate tables stay NaN-free.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr

from .errors import (
    EmptyStructure,
    GeometryMismatch,
    InsufficientSubjects,
    LengthMismatch,
)
from .grid import LabelScheme, LabelVolume

WHOLE_THALAMUS_CODE = -1
DEFAULT_COMPARISONS = 13  # 12 nuclei + whole thalamus


def _require_common_grid(a: LabelVolume, b: LabelVolume):
    if not a.geometry.close_to(b.geometry):
        raise GeometryMismatch("labelmaps are not on a common grid; resample first")


def _masks(a, b, code):
    if code == WHOLE_THALAMUS_CODE:
        return a.data > 0, b.data > 0
    return a.data == code, b.data == code


def dice(a: LabelVolume, b: LabelVolume, code) -> float:
    """2|A^B| / (|A|+|B|); 1 when both empty, 0 when exactly one is."""
    _require_common_grid(a, b)
    ma, mb = _masks(a, b, code)
    na, nb = int(ma.sum()), int(mb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / (na + nb)


def vsi(a: LabelVolume, b: LabelVolume, code) -> float:
    """1 - ||A|-|B|| / (|A|+|B|); 1 when both empty."""
    _require_common_grid(a, b)
    ma, mb = _masks(a, b, code)
    na, nb = int(ma.sum()), int(mb.sum())
    if na + nb == 0:
        return 1.0
    return 1.0 - abs(na - nb) / (na + nb)


def centroid(labels: LabelVolume, code) -> np.ndarray:
    """World-mm centroid of a structure's voxel centers."""
    mask = labels.data > 0 if code == WHOLE_THALAMUS_CODE else labels.data == code
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise EmptyStructure(f"code {code} absent")
    return labels.geometry.index_to_world(idx).mean(axis=0)


def centroid_distance(a: LabelVolume, b: LabelVolume, code) -> float:
    _require_common_grid(a, b)
    return float(np.linalg.norm(centroid(a, code) - centroid(b, code)))


def nucleus_volume(labels: LabelVolume, code) -> float:
    """Structure volume in mm^3 (0 for an absent code)."""
    mask = labels.data > 0 if code == WHOLE_THALAMUS_CODE else labels.data == code
    return float(mask.sum()) * labels.geometry.voxel_volume


@dataclass
class NucleusMetrics:
    code: int
    name: str
    volume_a_mm3: float
    volume_b_mm3: float
    dice: float
    vsi: float
    centroid_distance_mm: float | None  # None when either side is empty
    both_empty: bool = False


@dataclass
class PairedTestResult:
    code: int
    name: str
    t: float
    dof: int
    p: float
    significant_raw: bool
    significant_bonferroni: bool
    zero_variance: bool = False


@dataclass
class SegmentationReport:
    rows: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_csv(self, path, subject_id=""):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                [
                    "subject_id",
                    "label_code",
                    "label_name",
                    "vol_a_mm3",
                    "vol_b_mm3",
                    "dice",
                    "vsi",
                    "centroid_dist_mm",
                ]
            )
            for r in self.rows:
                w.writerow(
                    [
                        subject_id,
                        r.code,
                        r.name,
                        f"{r.volume_a_mm3:.6f}",
                        f"{r.volume_b_mm3:.6f}",
                        f"{r.dice:.9f}",
                        f"{r.vsi:.9f}",
                        "" if r.centroid_distance_mm is None else f"{r.centroid_distance_mm:.9f}",
                    ]
                )

    def to_json(self, path):
        payload = {
            "notes": self.notes,
            "rows": [
                {
                    "code": r.code,
                    "name": r.name,
                    "vol_a_mm3": r.volume_a_mm3,
                    "vol_b_mm3": r.volume_b_mm3,
                    "dice": r.dice,
                    "vsi": r.vsi,
                    "centroid_dist_mm": r.centroid_distance_mm,
                    "both_empty": r.both_empty,
                }
                for r in self.rows
            ],
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)


def _aggregate_bilateral(labels: LabelVolume, scheme: LabelScheme) -> LabelVolume:
    data = labels.data.copy()
    for right, left in scheme.bilateral_pairs():
        data[data == left] = right
    merged = LabelScheme(
        [e for c, e in scheme.entries.items() if e.hemisphere != "left"]
    )
    return LabelVolume(data, labels.affine, labels.spacing, merged)


def build_report(
    seg_a: LabelVolume,
    seg_b: LabelVolume,
    scheme: LabelScheme | None = None,
    aggregate_hemispheres: bool = False,
) -> SegmentationReport:
    """Per-structure metrics plus a whole-thalamus row (union of all codes)."""
    _require_common_grid(seg_a, seg_b)
    scheme = scheme or seg_a.scheme or seg_b.scheme
    if scheme is None:
        raise GeometryMismatch("no label scheme available for the report")
    if aggregate_hemispheres:
        seg_a = _aggregate_bilateral(seg_a, scheme)
        seg_b = _aggregate_bilateral(seg_b, scheme)
        scheme = seg_a.scheme
    report = SegmentationReport()
    report.notes["aggregated_hemispheres"] = aggregate_hemispheres
    report.notes["label_interpolation"] = "nearest"
    for code in [WHOLE_THALAMUS_CODE, *scheme.codes()]:
        if code == WHOLE_THALAMUS_CODE:
            name = "Thalamus"
        else:
            e = scheme[code]
            name = e.abbrev if aggregate_hemispheres else f"{e.abbrev}-{e.hemisphere[:1].upper()}"
        va = nucleus_volume(seg_a, code)
        vb = nucleus_volume(seg_b, code)
        d = dice(seg_a, seg_b, code)
        v = vsi(seg_a, seg_b, code)
        try:
            cd = centroid_distance(seg_a, seg_b, code)
        except EmptyStructure:
            cd = None
        report.rows.append(
            NucleusMetrics(code, name, va, vb, d, v, cd, both_empty=(va == 0 and vb == 0))
        )
    return report


def student_t_sf_two_sided(t: float, dof: int) -> float:
    """Two-sided tail probability of Student's t."""
    return float(2.0 * (1.0 - stdtr(dof, abs(t))))


def paired_t_test(x, y, m: int = DEFAULT_COMPARISONS, code: int = 0, name: str = "") -> PairedTestResult:
    """Two-sided paired t-test with a Bonferroni flag at 0.05/m."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch("x and y must be equal-length 1D sequences")
    n = len(x)
    if n < 2:
        raise InsufficientSubjects("paired t-test needs n >= 2")
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    dof = n - 1
    zero_var = sd == 0.0
    if zero_var:
        if mean == 0.0:
            t, p = 0.0, 1.0
        else:
            t = np.inf if mean > 0 else -np.inf
            p = 0.0
    else:
        t = mean / (sd / np.sqrt(n))
        p = student_t_sf_two_sided(t, dof)
    return PairedTestResult(
        code=code,
        name=name,
        t=float(t),
        dof=dof,
        p=p,
        significant_raw=p < 0.05,
        significant_bonferroni=p < bonferroni_threshold(m),
        zero_variance=zero_var,
    )


def bonferroni_threshold(m: int = DEFAULT_COMPARISONS, alpha: float = 0.05) -> float:
    return alpha / m


def write_stats_csv(results, path, m=DEFAULT_COMPARISONS):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label_code", "label_name", "t", "dof", "p", "sig_raw", "sig_bonferroni"])
        for r in results:
            w.writerow(
                [r.code, r.name, f"{r.t:.9g}", r.dof, f"{r.p:.9g}", int(r.significant_raw), int(r.significant_bonferroni)]
            )
