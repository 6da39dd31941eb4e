"""Deterministic synthetic data: T1 phantoms with known ellipsoidal nuclei,
guaranteed-diffeomorphic random warps, and derived atlas libraries.

Everything is seeded; identical specs produce bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import JacobianViolation, OverlappingNuclei, GeometryMismatch
from .grid import Geometry, LabelVolume, VolumeGrid, default_scheme, label_bounding_box
from .library import AtlasLibrary, AtlasPrior
from .register import DeformationField, invert_field
from . import grid as _grid
from .synth import SynthesisParams, synthesize_wmn


@dataclass
class Nucleus:
    code: int
    center_mm: tuple
    semi_axes_mm: tuple
    t1_ms: float


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing_mm: float = 1.0
    seed: int = 0
    nuclei: list = field(default_factory=list)  # empty -> default bilateral set
    surround_t1_ms: float = 1082.0  # near the 750 ms null point
    head_semi_axes_mm: tuple = (24.0, 30.0, 26.0)
    noise_sigma: float = 0.0  # fraction of the T1 range


@dataclass
class WarpSpec:
    seed: int = 0
    max_displacement_mm: float = 3.0
    smoothness_mm: float = 6.0
    min_jacobian: float = 0.05
    edge_taper_voxels: int = 8  # displacements fade to 0 at the lattice boundary


# default bilateral layout: 12 ellipsoids per side on a 4x3 grid of slots
_DEFAULT_SEMI_AXES = {
    1: (6.0, 5.0, 5.0),
    2: (6.0, 5.0, 4.5),
    3: (5.5, 5.0, 4.5),
    4: (4.0, 3.5, 3.5),
    5: (4.0, 4.0, 3.5),
    6: (3.0, 3.0, 3.0),
    7: (3.0, 3.0, 2.5),
    8: (2.8, 2.8, 2.5),
    9: (2.8, 2.5, 2.5),
    10: (2.5, 2.5, 2.5),
    11: (2.5, 2.5, 2.2),
    12: (2.5, 2.3, 2.3),
}
_SLOT_Y = (14.0, 25.0, 36.0, 47.0)
_SLOT_Z = (16.0, 30.0, 44.0)
_X_RIGHT, _X_LEFT = 19.0, 44.0


def default_nuclei() -> list:
    out = []
    for code in range(1, 13):
        y = _SLOT_Y[(code - 1) // 3]
        z = _SLOT_Z[(code - 1) % 3]
        t1 = 1400.0 + 50.0 * code
        axes = _DEFAULT_SEMI_AXES[code]
        out.append(Nucleus(code, (_X_RIGHT, y, z), axes, t1))
        out.append(Nucleus(code + 100, (_X_LEFT, y, z), axes, t1))
    return out


def _phantom_geometry(spec: PhantomSpec) -> Geometry:
    s = spec.spacing_mm
    return Geometry(spec.dims, np.array([s, s, s]), np.diag([s, s, s, 1.0]))


def generate_phantom(spec: PhantomSpec | None = None):
    """Build (t1_map, truth_labels); deterministic for a given seed."""
    spec = spec or PhantomSpec()
    nuclei = spec.nuclei or default_nuclei()
    geom = _phantom_geometry(spec)
    world = geom.grid_world()

    t1 = np.zeros(geom.dims)
    labels = np.zeros(geom.dims, dtype=np.int32)
    head = (
        ((world - (np.array(geom.dims) - 1) * spec.spacing_mm / 2.0) / spec.head_semi_axes_mm) ** 2
    ).sum(axis=1) <= 1.0
    t1.flat[head.nonzero()[0]] = spec.surround_t1_ms

    hi = np.array([(d - 1) * spec.spacing_mm for d in geom.dims])
    for nuc in nuclei:
        c = np.asarray(nuc.center_mm, dtype=float)
        a = np.asarray(nuc.semi_axes_mm, dtype=float)
        if np.any(c - a < 0) or np.any(c + a > hi):
            raise GeometryMismatch(f"nucleus {nuc.code} ellipsoid exceeds the grid")
        mask = (((world - c) / a) ** 2).sum(axis=1) <= 1.0
        mask3 = mask.reshape(geom.dims)
        if np.any(labels[mask3] != 0):
            raise OverlappingNuclei(f"nucleus {nuc.code} intersects another nucleus")
        labels[mask3] = nuc.code
        t1[mask3] = nuc.t1_ms

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        rng_range = float(np.ptp(t1))
        t1 = t1 + rng.standard_normal(t1.shape) * spec.noise_sigma * rng_range
        t1 = np.clip(t1, 0.0, None)

    scheme = default_scheme() if not spec.nuclei else None
    return (
        VolumeGrid(t1, geom.affine, geom.spacing),
        LabelVolume(labels, geom.affine, geom.spacing, scheme),
    )


def random_diffeo(spec: WarpSpec, geometry: Geometry) -> DeformationField:
    """Smooth seeded random field with verified positive Jacobians."""
    if spec.max_displacement_mm == 0:
        return DeformationField.zero(geometry)
    rng = np.random.default_rng(spec.seed)
    raw = rng.standard_normal(geometry.dims + (3,))
    sig_vox = spec.smoothness_mm / geometry.spacing
    for a in range(3):
        raw[..., a] = gaussian_filter(raw[..., a], sigma=sig_vox, mode="nearest")
    if spec.edge_taper_voxels > 0:
        # zero displacement at the boundary keeps the warp self-contained:
        # composition and fixed-point inversion never sample outside the lattice
        t = spec.edge_taper_voxels
        w = np.ones(geometry.dims)
        for ax, n in enumerate(geometry.dims):
            edge = np.minimum(np.arange(n), n - 1 - np.arange(n)) / max(t, 1)
            ramp = np.clip(edge, 0.0, 1.0)
            ramp = ramp * ramp * (3.0 - 2.0 * ramp)  # smoothstep
            shape = [1, 1, 1]
            shape[ax] = n
            w = w * ramp.reshape(shape)
        raw = raw * w[..., None]
    norms = np.sqrt((raw**2).sum(axis=-1))
    peak = float(norms.max())
    if peak <= 0:
        return DeformationField.zero(geometry)
    field = DeformationField(geometry, raw * (spec.max_displacement_mm / peak))
    min_det = float(field.jacobian_determinants().min())
    if min_det <= spec.min_jacobian:
        raise JacobianViolation(
            f"min Jacobian {min_det:.4f} <= {spec.min_jacobian}; "
            "reduce max displacement or increase smoothness"
        )
    return field


def derive_atlases(
    base,
    n: int = 5,
    seed: int = 0,
    warp_spec: WarpSpec | None = None,
    noise_sigma: float = 0.01,
    crop_margin: int = 5,
) -> AtlasLibrary:
    """Phantom-scale atlas library: n warped copies of a labeled base volume.

    Each prior is the base pulled through the inverse of a seeded random
    diffeomorphism; that diffeomorphism itself is kept as the prior's
    ground-truth warp-to-template, so warping the prior labels by the cached
    field recovers the base labels. The template is the voxel-wise mean of
    the priors warped back onto the base grid.
    """
    if n < 1:
        raise GeometryMismatch("need n >= 1 priors")
    intensity, labels = base
    geom = intensity.geometry
    template_spec = warp_spec or WarpSpec()
    priors = []
    back_warped = []
    for i in range(n):
        ws = WarpSpec(
            seed=seed * 10007 + i,
            max_displacement_mm=template_spec.max_displacement_mm,
            smoothness_mm=template_spec.smoothness_mm,
            min_jacobian=template_spec.min_jacobian,
            edge_taper_voxels=template_spec.edge_taper_voxels,
        )
        fwd = random_diffeo(ws, geom)
        inv = invert_field(fwd)
        pint = _grid.resample(intensity, geom, inv, "trilinear")
        plab = _grid.resample(labels, geom, inv, "nearest")
        if noise_sigma > 0:
            rng = np.random.default_rng(ws.seed + 500009)
            span = float(np.ptp(pint.data))
            pint = pint.with_data(pint.data + rng.standard_normal(pint.data.shape) * noise_sigma * span)
        priors.append(AtlasPrior(id=f"prior{i:02d}", intensity=pint, labels=plab, warp_to_template=fwd))
        back_warped.append(_grid.resample(pint, geom, fwd, "trilinear").data)
    template = VolumeGrid(np.mean(back_warped, axis=0), geom.affine, geom.spacing)
    box = label_bounding_box(labels, margin=crop_margin)
    return AtlasLibrary(template=template, crop_box=box, scheme=labels.scheme, priors=priors)


def make_subject(
    base,
    seed: int = 12345,
    warp_spec: WarpSpec | None = None,
    noise_sigma: float = 0.01,
):
    """Held-out subject: (intensity, truth_labels, truth_warp_to_subject).

    The returned field lives on the base grid and maps base/template points
    into subject space, matching the cached prior-warp convention.
    """
    intensity, labels = base
    geom = intensity.geometry
    ws = warp_spec or WarpSpec(seed=seed)
    fwd = random_diffeo(ws, geom)
    inv = invert_field(fwd)
    sint = _grid.resample(intensity, geom, inv, "trilinear")
    slab = _grid.resample(labels, geom, inv, "nearest")
    if noise_sigma > 0:
        rng = np.random.default_rng(ws.seed + 700001)
        span = float(np.ptp(sint.data))
        sint = sint.with_data(sint.data + rng.standard_normal(sint.data.shape) * noise_sigma * span)
    return sint, slab, fwd


def synthesized_base(spec: PhantomSpec | None = None, ti_ms: float = 750.0):
    """Convenience: phantom T1 map plus its synthesized WMn intensity image."""
    t1_map, truth = generate_phantom(spec)
    wmn = synthesize_wmn(t1_map, SynthesisParams(ti_ms=ti_ms))
    return wmn, truth, t1_map
