"""End-to-end segmentation workflow and evaluation entry points.

Segmentation stages: rigid template->input alignment, crop-box transfer and
automatic input cropping, deformable registration of the cropped pair, one
shared inversion of the input->template warp, two-step prior label warping
(prior->template composed with template->input), and label fusion. The fused
labelmap is placed back into the uncropped input frame.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import imgio
from .errors import GeometryMismatch, InsufficientSubjects, RowMismatch, UsageError
from .fusion import JlfParams, joint_label_fusion, majority_vote
from .grid import CropBox, LabelVolume, crop, label_bounding_box, resample, uncrop
from .grid import default_scheme as grid_default_scheme
from .library import AtlasLibrary
from .metrics import (
    WHOLE_THALAMUS_CODE,
    bonferroni_threshold,
    build_report,
    nucleus_volume,
    paired_t_test,
    write_stats_csv,
)
from .register import (
    AffineTransform,
    RegConfig,
    compose_fields,
    invert_field,
    register_affine,
    register_deformable,
    register_rigid,
    resample_field,
    warp_labels,
)

MODES = ("wmn", "mp2syn", "mp2uni")
DEFAULT_FUSION = {"wmn": "jlf", "mp2syn": "jlf", "mp2uni": "mv"}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    mode: str
    fusion: str
    reg_config: dict
    jlf_params: dict
    synthesis: dict
    input_hashes: dict
    tool_version: str
    notes: dict = field(default_factory=dict)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)


def _transfer_crop_box(box: CropBox, template, rigid: AffineTransform, input_vol) -> CropBox:
    """Map the template crop box into input voxel indices via the rigid result."""
    corners = np.array(
        [
            (i, j, k)
            for i in (box.lo[0], box.hi[0])
            for j in (box.lo[1], box.hi[1])
            for k in (box.lo[2], box.hi[2])
        ],
        dtype=float,
    )
    w_template = template.geometry.index_to_world(corners)
    w_input = rigid.inverse().map_points(w_template)
    idx = input_vol.geometry.world_to_index(w_input)
    lo = np.floor(idx.min(axis=0)).astype(int)
    hi = np.ceil(idx.max(axis=0)).astype(int)
    return CropBox(lo, hi).clipped(input_vol.dims)


def _prior_warp(prior, lib, config):
    """Cached prior->template field, computing it when absent."""
    if prior.warp_to_template is not None:
        return prior.warp_to_template, False
    t_crop = crop(lib.template, lib.crop_box)
    p_crop = crop(prior.intensity, lib.crop_box)
    d = register_deformable(t_crop, p_crop, AffineTransform.identity(), config)
    return resample_field(d, lib.template.geometry), True


def run_segment(
    input_path,
    atlas_dir,
    out_dir,
    mode="wmn",
    fusion=None,
    reg_config: RegConfig | None = None,
    jlf_params: JlfParams | None = None,
    true_warp_path=None,
    n_workers: int = 1,
    tool_version: str = "unknown",
):
    """Run the full multi-atlas segmentation; returns paths of written files."""
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}")
    fusion = fusion or DEFAULT_FUSION[mode]
    if fusion not in ("jlf", "mv"):
        raise UsageError("fusion must be 'jlf' or 'mv'")
    config = reg_config or RegConfig()
    jparams = jlf_params or JlfParams()

    lib = AtlasLibrary.load(atlas_dir)
    input_vol = imgio.read_volume(input_path)

    # (1) rigid template -> input, (2) transfer crop box and crop
    if true_warp_path:
        rigid = AffineTransform.identity()
    else:
        rigid = register_rigid(input_vol, lib.template, config)
    in_box = _transfer_crop_box(lib.crop_box, lib.template, rigid, input_vol)
    in_crop = crop(input_vol, in_box)
    t_crop = crop(lib.template, lib.crop_box)

    # (3) deformable cropped input vs cropped template, then one shared inverse
    if true_warp_path:
        fwd = imgio.read_field(true_warp_path)
    else:
        fwd = register_deformable(t_crop, in_crop, rigid.inverse(), config)
    inv = resample_field(invert_field(fwd), in_crop.geometry)

    # (4) two-step prior warping, parallel over priors
    def _warp_prior(prior):
        pwarp, computed = _prior_warp(prior, lib, config)
        total = compose_fields(inv, pwarp)
        wl = warp_labels(prior.labels, total, in_crop.geometry)
        wi = resample(prior.intensity, in_crop.geometry, total, "trilinear")
        return wl, wi, (prior, pwarp, computed)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            results = list(ex.map(_warp_prior, lib.priors))
    else:
        results = [_warp_prior(p) for p in lib.priors]

    warped_labels = [r[0] for r in results]
    warped_ints = [r[1] for r in results]
    for prior, pwarp, computed in (r[2] for r in results):
        if computed:
            pdir = os.path.join(atlas_dir, "priors", prior.id)
            imgio.write_field(pwarp, os.path.join(pdir, "warp_to_template.nii.gz"))

    # (5) fuse
    if fusion == "mv":
        seg_crop = majority_vote(warped_labels)
    else:
        seg_crop = joint_label_fusion(in_crop, warped_ints, warped_labels, jparams)

    # (6) outputs in the uncropped input frame
    seg_full = uncrop(seg_crop, in_box, input_vol.geometry)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    seg_path = os.path.join(out_dir, "segmentation.nii.gz")
    imgio.write_volume(seg_full, seg_path)
    written.append(seg_path)

    vol_path = os.path.join(out_dir, "volumes.csv")
    with open(vol_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label_code", "label_name", "volume_mm3"])
        w.writerow([WHOLE_THALAMUS_CODE, "Thalamus", f"{nucleus_volume(seg_full, WHOLE_THALAMUS_CODE):.6f}"])
        for code in lib.scheme.codes():
            e = lib.scheme[code]
            w.writerow([code, e.abbrev, f"{nucleus_volume(seg_full, code):.6f}"])
    written.append(vol_path)

    manifest = RunManifest(
        mode=mode,
        fusion=fusion,
        reg_config=asdict(config),
        jlf_params=asdict(jparams),
        synthesis={},
        input_hashes={
            "input": _sha256(input_path),
            "template": _sha256(os.path.join(atlas_dir, "template.nii.gz")),
        },
        tool_version=tool_version,
        notes={
            "true_warp": bool(true_warp_path),
            "crop_box_input": CropBox(in_box.lo, in_box.hi).to_dict(),
            "label_interpolation": "nearest",
        },
    )
    man_path = os.path.join(out_dir, "manifest.json")
    manifest.save(man_path)
    written.append(man_path)
    return {"segmentation": seg_path, "volumes": vol_path, "manifest": man_path, "written": written}


def run_eval(
    seg_a_path,
    seg_b_path,
    out_dir,
    intensity_a_path=None,
    intensity_b_path=None,
    align=False,
    aggregate_hemispheres=False,
    scheme=None,
    subject_id="",
    reg_config: RegConfig | None = None,
):
    """Compare two labelmaps; optional affine alignment of A onto B's grid."""
    scheme = scheme or grid_default_scheme()
    seg_a = imgio.read_volume(seg_a_path, as_labels=True, scheme=scheme)
    seg_b = imgio.read_volume(seg_b_path, as_labels=True, scheme=scheme)
    if align:
        if not (intensity_a_path and intensity_b_path):
            raise UsageError("--align requires both intensity volumes")
        int_a = imgio.read_volume(intensity_a_path)
        int_b = imgio.read_volume(intensity_b_path)
        aff = register_affine(int_b, int_a, reg_config or RegConfig())
        seg_a = warp_labels(seg_a, aff, seg_b.geometry)
    elif not seg_a.geometry.close_to(seg_b.geometry):
        raise GeometryMismatch("labelmap grids differ; pass --align with intensity volumes")
    report = build_report(seg_a, seg_b, scheme, aggregate_hemispheres)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    json_path = os.path.join(out_dir, "metrics.json")
    report.to_csv(csv_path, subject_id=subject_id)
    report.to_json(json_path)
    return {"csv": csv_path, "json": json_path, "report": report}


def _read_metrics_csv(path, metric):
    rows = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (row["subject_id"], int(row["label_code"]))
            val = row[metric]
            rows[key] = float(val) if val != "" else None
    return rows


def run_stats(csv_a_path, csv_b_path, out_path, m=13, metric="dice"):
    """Per-label paired t-tests of metric A vs B across subjects."""
    a = _read_metrics_csv(csv_a_path, metric)
    b = _read_metrics_csv(csv_b_path, metric)
    if set(a) != set(b):
        raise RowMismatch("subject/label rows differ between the two CSVs")
    labels = sorted({code for _, code in a})
    names = {}
    with open(csv_a_path, newline="") as f:
        for row in csv.DictReader(f):
            names[int(row["label_code"])] = row["label_name"]
    results = []
    for code in labels:
        subjects = sorted(s for s, c in a if c == code)
        xs = [a[(s, code)] for s in subjects]
        ys = [b[(s, code)] for s in subjects]
        pairs = [(x, y) for x, y in zip(xs, ys) if x is not None and y is not None]
        if len(pairs) < 2:
            raise InsufficientSubjects(f"label {code}: fewer than 2 paired subjects")
        r = paired_t_test([p[0] for p in pairs], [p[1] for p in pairs], m=m, code=code, name=names[code])
        results.append(r)
    write_stats_csv(results, out_path, m=m)
    return {"csv": out_path, "results": results, "bonferroni_threshold": bonferroni_threshold(m)}
