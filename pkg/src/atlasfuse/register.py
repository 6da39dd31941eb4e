"""Rigid/affine/deformable registration and displacement-field algebra.

All transforms map fixed-image world coordinates into moving-image world
coordinates (pull-back), so they can be handed directly to grid.resample.
Deformation fields live on the fixed-image lattice and store mm
displacements; the mapped point is x + u(x).

Rigid/affine stages optimize 32-bin mutual information with a
coordinate-wise adaptive-step search over a shrink pyramid. The deformable
stage is single-direction diffeomorphic-demons-style iteration driven by
local normalized cross-correlation forces, with Gaussian regularization of
both the update and the accumulated field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import (
    DegenerateInput,
    FoldingDetected,
    InversionDiverged,
    NoOverlap,
    NonInvertibleTransform,
)
from .grid import Geometry, LabelVolume, VolumeGrid, resample

_ORTHO_TOL = 1e-6


class AffineTransform:
    """Homogeneous world->world transform; kind is 'rigid' or 'affine'."""

    def __init__(self, matrix, kind="affine"):
        self.matrix = np.asarray(matrix, dtype=float)
        if self.matrix.shape != (4, 4):
            raise NonInvertibleTransform("transform matrix must be 4x4")
        if not np.allclose(self.matrix[3], [0, 0, 0, 1], atol=1e-12):
            raise NonInvertibleTransform("last row must be (0,0,0,1)")
        if abs(np.linalg.det(self.matrix[:3, :3])) < 1e-12:
            raise NonInvertibleTransform("singular transform")
        if kind not in ("rigid", "affine"):
            raise ValueError(f"unknown kind {kind!r}")
        if kind == "rigid":
            r = self.matrix[:3, :3]
            if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
                raise NonInvertibleTransform("rigid transform is not orthonormal")
        self.kind = kind

    @classmethod
    def identity(cls, kind="rigid"):
        return cls(np.eye(4), kind)

    def map_points(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def inverse(self):
        return AffineTransform(np.linalg.inv(self.matrix), self.kind)

    def compose(self, other):
        """self after other: (self @ other)(x) = self(other(x))."""
        kind = "rigid" if self.kind == other.kind == "rigid" else "affine"
        return AffineTransform(self.matrix @ other.matrix, kind)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump({"kind": self.kind, "matrix": self.matrix.tolist()}, f, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(np.array(d["matrix"]), d["kind"])


class DeformationField:
    """Per-voxel mm displacement on a fixed-image lattice (pull-back)."""

    def __init__(self, geometry: Geometry, disp):
        self.geometry = geometry
        self.disp = np.asarray(disp, dtype=np.float64)
        if self.disp.shape != geometry.dims + (3,):
            raise NonInvertibleTransform(
                f"field shape {self.disp.shape} does not match geometry {geometry.dims}"
            )
        if not np.all(np.isfinite(self.disp)):
            raise NonInvertibleTransform("non-finite displacement components")
        self.converged = True
        self.residual_mm = 0.0

    @classmethod
    def zero(cls, geometry: Geometry):
        return cls(geometry, np.zeros(geometry.dims + (3,)))

    def sample_disp(self, world_pts):
        """Trilinear displacement at world points; outside the lattice reads 0."""
        idx = self.geometry.world_to_index(world_pts)
        out = np.empty((idx.shape[0], 3))
        for a in range(3):
            out[:, a] = map_coordinates(
                self.disp[..., a], idx.T, order=1, mode="constant", cval=0.0
            )
        return out

    def map_points(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return pts + self.sample_disp(pts)

    def max_norm(self) -> float:
        return float(np.sqrt((self.disp**2).sum(axis=-1)).max())

    def jacobian_determinants(self) -> np.ndarray:
        """det(I + du/dx_world) per voxel via central differences."""
        ainv = np.linalg.inv(self.geometry.affine[:3, :3])
        jac = np.empty(self.geometry.dims + (3, 3))
        for a in range(3):
            gi = np.gradient(self.disp[..., a], axis=(0, 1, 2))
            dvox = np.stack(gi, axis=-1)  # du_a / d(index)
            jac[..., a, :] = dvox @ ainv
        jac += np.eye(3)
        return np.linalg.det(jac)

    def positive_jacobian_fraction(self) -> float:
        det = self.jacobian_determinants()
        return float(np.mean(det > 0.0))


def field_from_affine(transform: AffineTransform, geometry: Geometry) -> DeformationField:
    pts = geometry.grid_world()
    disp = (transform.map_points(pts) - pts).reshape(geometry.dims + (3,))
    return DeformationField(geometry, disp)


def resample_field(field: DeformationField, geometry: Geometry) -> DeformationField:
    disp = field.sample_disp(geometry.grid_world()).reshape(geometry.dims + (3,))
    return DeformationField(geometry, disp)


def compose_fields(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """result(x) = inner(x + outer(x)) + outer(x), on outer's lattice."""
    pts = outer.geometry.grid_world()
    d_out = outer.disp.reshape(-1, 3)
    d_in = inner.sample_disp(pts + d_out)
    return DeformationField(outer.geometry, (d_out + d_in).reshape(outer.disp.shape))


def invert_field(field: DeformationField, tol_mm=0.01, max_iter=50) -> DeformationField:
    """Fixed-point inversion g <- -f(x + g(x)); residual is max |f(x+g)+g|."""
    pts = field.geometry.grid_world()
    g = np.zeros_like(pts)
    best = None
    best_res = np.inf
    grow = 0
    prev_res = np.inf
    for _ in range(max_iter):
        g = -field.sample_disp(pts + g)
        res = float(np.linalg.norm(field.sample_disp(pts + g) + g, axis=1).max())
        if res < best_res:
            best, best_res = g.copy(), res
        if res < tol_mm:
            break
        if res > prev_res * (1.0 + 1e-9):
            grow += 1
            if grow >= 5:
                raise InversionDiverged(f"residual grew for 5 iterations ({res:.4g} mm)")
        else:
            grow = 0
        prev_res = res
    out = DeformationField(field.geometry, best.reshape(field.disp.shape))
    out.residual_mm = best_res
    out.converged = best_res < tol_mm
    return out


def warp_labels(labels: LabelVolume, transform, target_geometry: Geometry) -> LabelVolume:
    return resample(labels, target_geometry, transform, interp="nearest")


@dataclass
class RegConfig:
    shrink_factors: tuple = (4, 2, 1)
    linear_iters: tuple = (100, 75, 50)  # max coordinate-descent sweeps per level
    deform_iters: tuple = (60, 40, 20)
    mi_bins: int = 32
    cc_radius: int = 2  # voxels
    sigma_update: float = 1.0  # voxels
    sigma_total: float = 0.5  # voxels
    step_length: float = 1.0  # deformable step, voxels
    conv_tol: float = 1e-5
    conv_window: int = 10
    max_metric_samples: int = 50000
    jacobian_threshold: float = 0.999

    def __post_init__(self):
        if self.sigma_update < 0 or self.sigma_total < 0:
            raise ValueError("smoothing sigmas must be >= 0")
        if len(self.shrink_factors) < 1:
            raise ValueError("need at least one pyramid level")


# --- pyramid ---


def _downsample(vol: VolumeGrid, factor: int) -> VolumeGrid:
    if factor == 1:
        return vol
    sm = gaussian_filter(vol.data, sigma=factor / 2.0, mode="nearest")
    dims = tuple(max(1, int(np.ceil(d / factor))) for d in vol.dims)
    affine = vol.affine.copy()
    affine[:3, :3] *= factor
    geom = Geometry(dims, vol.spacing * factor, affine)
    return resample(VolumeGrid(sm, vol.affine, vol.spacing), geom, None, "trilinear")


# --- mutual information ---


class _MiCost:
    """-MI(fixed, moving o T) on a fixed set of sample points."""

    # constant sub-voxel sample offset: interpolating the fixed image too keeps
    # the metric free of the grid-aligned MI inflation artifact
    _JITTER = np.array([0.37, 0.62, 0.41])

    def __init__(self, fixed: VolumeGrid, moving: VolumeGrid, bins, max_samples):
        self.bins = bins
        dims = fixed.geometry.dims
        ii, jj, kk = np.meshgrid(
            np.arange(dims[0] - 1), np.arange(dims[1] - 1), np.arange(dims[2] - 1),
            indexing="ij",
        )
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) + self._JITTER
        if idx.shape[0] > max_samples:
            stride = int(np.ceil(idx.shape[0] / max_samples))
            idx = idx[::stride]
        pts = fixed.geometry.index_to_world(idx)
        fvals = map_coordinates(fixed.data, idx.T, order=1, mode="nearest")
        self.pts = pts
        # shared bin edges: identical intensities must land in identical bins,
        # otherwise exact alignment is not the metric optimum
        self.vmin = float(min(fixed.data.min(), moving.data.min()))
        self.vrange = max(
            float(max(fixed.data.max(), moving.data.max())) - self.vmin, 1e-30
        )
        self.fbin = np.clip(
            ((fvals - self.vmin) / self.vrange * bins).astype(np.int64), 0, bins - 1
        )
        self.moving = moving
        self.minv = np.linalg.inv(moving.affine)
        self.mdims = np.array(moving.dims, dtype=float)

    def __call__(self, transform: AffineTransform) -> float:
        src = self.pts @ transform.matrix[:3, :3].T + transform.matrix[:3, 3]
        idx = src @ self.minv[:3, :3].T + self.minv[:3, 3]
        valid = np.all((idx >= 0) & (idx <= self.mdims - 1), axis=1)
        if valid.sum() < 100:
            return 1.0  # no usable overlap; any real -MI is <= 0
        mvals = map_coordinates(self.moving.data, idx[valid].T, order=1, mode="nearest")
        # out-of-bounds samples go to a dedicated moving bin so shrinking the
        # overlap cannot masquerade as higher dependence
        ncols = self.bins + 1
        mbin = np.full(len(valid), self.bins, dtype=np.int64)
        mbin[valid] = np.clip(
            ((mvals - self.vmin) / self.vrange * self.bins).astype(np.int64), 0, self.bins - 1
        )
        joint = np.bincount(
            self.fbin * ncols + mbin, minlength=self.bins * ncols
        ).reshape(self.bins, ncols)
        p = joint / joint.sum()
        px = p.sum(axis=1, keepdims=True)
        py = p.sum(axis=0, keepdims=True)
        nz = p > 0
        mi = float(np.sum(p[nz] * np.log(p[nz] / (px @ py)[nz])))
        return -mi


# --- linear parameterization ---


def _params_to_matrix(p, center, n_params):
    tx, ty, tz, rx, ry, rz = p[:6]
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    rmx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rmy = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rmz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    lin = rmz @ rmy @ rmx
    if n_params == 12:
        scale = np.diag(p[6:9])
        shear = np.array([[1, p[9], p[10]], [0, 1, p[11]], [0, 0, 1]])
        lin = lin @ scale @ shear
    m = np.eye(4)
    m[:3, :3] = lin
    m[:3, 3] = center - lin @ center + p[:3]
    return m


def _matrix_kind(n_params):
    return "rigid" if n_params == 6 else "affine"


def _coordinate_descent(cost, p0, steps, min_steps, max_sweeps, tol, window):
    p = np.asarray(p0, dtype=float).copy()
    steps = np.asarray(steps, dtype=float).copy()
    f = cost(p)
    history = [f]
    for _ in range(max_sweeps):
        improved = False
        for k in range(len(p)):
            for sign in (1.0, -1.0):
                cand = p.copy()
                cand[k] += sign * steps[k]
                fc = cost(cand)
                if fc < f - 1e-14:
                    p, f = cand, fc
                    steps[k] *= 1.5
                    improved = True
                    break
        if not improved:
            steps *= 0.5
            if np.all(steps < min_steps):
                break
        history.append(f)
        if len(history) > window:
            ref = history[-window - 1]
            if abs(ref - f) < tol * max(abs(ref), 1e-12):
                if np.all(steps < min_steps * 8):
                    break
    return p, f


def _check_linear_inputs(fixed, moving):
    for name, vol in (("fixed", fixed), ("moving", moving)):
        if vol.data.size == 0 or np.ptp(vol.data) == 0:
            raise DegenerateInput(f"{name} image has constant intensity")
    flo, fhi = fixed.geometry.world_bounds()
    mlo, mhi = moving.geometry.world_bounds()
    if np.any(flo > mhi) or np.any(mlo > fhi):
        raise NoOverlap("fixed and moving world bounding boxes are disjoint")


def _register_linear(fixed, moving, config, n_params, p0=None):
    _check_linear_inputs(fixed, moving)
    center = fixed.geometry.grid_world().mean(axis=0)
    p = np.zeros(n_params)
    if n_params == 12:
        p[6:9] = 1.0
    if p0 is not None:
        p[: len(p0)] = p0
    for factor, sweeps in zip(config.shrink_factors, config.linear_iters):
        f_l = _downsample(fixed, factor)
        m_l = _downsample(moving, factor)
        cost = _MiCost(f_l, m_l, config.mi_bins, config.max_metric_samples)
        sp = float(np.max(f_l.spacing))
        steps = np.empty(n_params)
        steps[:3] = sp
        steps[3:6] = 0.04 * factor
        min_steps = np.empty(n_params)
        min_steps[:3] = 0.02
        min_steps[3:6] = 5e-4
        if n_params == 12:
            steps[6:9] = 0.03 * factor
            steps[9:12] = 0.02 * factor
            min_steps[6:9] = 5e-4
            min_steps[9:12] = 5e-4
        p, _ = _coordinate_descent(
            lambda q: cost(AffineTransform(_params_to_matrix(q, center, n_params), _matrix_kind(n_params))),
            p,
            steps,
            min_steps,
            sweeps,
            config.conv_tol,
            config.conv_window,
        )
    return AffineTransform(_params_to_matrix(p, center, n_params), _matrix_kind(n_params))


def register_rigid(fixed: VolumeGrid, moving: VolumeGrid, config: RegConfig | None = None):
    """6-dof rigid registration maximizing mutual information."""
    config = config or RegConfig()
    return _register_linear(fixed, moving, config, 6)


def register_affine(fixed: VolumeGrid, moving: VolumeGrid, config: RegConfig | None = None):
    """12-dof affine registration, initialized from a rigid stage."""
    config = config or RegConfig()
    rigid = _register_linear(fixed, moving, config, 6)
    # re-extract translation/rotation seed from the rigid result
    center = fixed.geometry.grid_world().mean(axis=0)
    r = rigid.matrix[:3, :3]
    ry = -np.arcsin(np.clip(r[2, 0], -1, 1))
    rx = np.arctan2(r[2, 1], r[2, 2])
    rz = np.arctan2(r[1, 0], r[0, 0])
    t = rigid.matrix[:3, 3] - (center - r @ center)
    return _register_linear(fixed, moving, config, 12, p0=np.r_[t, rx, ry, rz])


# --- deformable (LNCC demons) ---


def _local_sums(arr, radius):
    from scipy.ndimage import uniform_filter

    size = 2 * radius + 1
    return uniform_filter(arr, size=size, mode="nearest")


def _lncc_force(fixed_data, warped_data, radius, ainv3):
    """Ascent direction of local normalized cross-correlation w.r.t. displacement."""
    f = fixed_data - _local_sums(fixed_data, radius)
    m = warped_data - _local_sums(warped_data, radius)
    a = _local_sums(f * m, radius)
    b = _local_sums(f * f, radius)
    c = _local_sums(m * m, radius)
    denom = b * c
    scale = float(np.ptp(fixed_data))
    eps = max((1e-3 * scale) ** 4, 1e-30)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(denom > eps, 2.0 * a / denom, 0.0)
        corr = np.where(c > np.sqrt(eps), a / c, 0.0)
        metric = np.where(denom > eps, (a * a) / denom, 0.0)
    resid = coef * (f - corr * m)
    gvox = np.stack(np.gradient(warped_data, axis=(0, 1, 2)), axis=-1)
    gworld = gvox @ ainv3  # d(warped)/d(world)
    return resid[..., None] * gworld, float(metric.mean())


def _warp_scalar(moving: VolumeGrid, field: DeformationField) -> np.ndarray:
    pts = field.geometry.grid_world() + field.disp.reshape(-1, 3)
    idx = moving.geometry.world_to_index(pts)
    return map_coordinates(
        moving.data, idx.T, order=1, mode="constant", cval=0.0
    ).reshape(field.geometry.dims)


def _smooth_field(disp, sigma):
    if sigma <= 0:
        return disp
    out = np.empty_like(disp)
    for a in range(3):
        out[..., a] = gaussian_filter(disp[..., a], sigma=sigma, mode="nearest")
    return out


def register_deformable(
    fixed: VolumeGrid,
    moving: VolumeGrid,
    init: AffineTransform | None = None,
    config: RegConfig | None = None,
) -> DeformationField:
    """Diffeomorphic-demons-style registration; returns field with init folded in."""
    config = config or RegConfig()
    init = init or AffineTransform.identity()
    _check_linear_inputs(fixed, moving)
    if sum(config.deform_iters[: len(config.shrink_factors)]) == 0:
        return field_from_affine(init, fixed.geometry)
    field = None
    converged = True
    for factor, iters in zip(config.shrink_factors, config.deform_iters):
        f_l = _downsample(fixed, factor)
        m_l = _downsample(moving, factor)
        geom = f_l.geometry
        if field is None:
            field = field_from_affine(init, geom)
        else:
            field = resample_field(field, geom)
        ainv3 = np.linalg.inv(geom.affine[:3, :3])
        step_mm = config.step_length * float(np.min(geom.spacing))
        history = []
        prev_disp = field.disp.copy()
        prev_metric = -np.inf
        step = step_mm
        for _ in range(iters):
            warped = _warp_scalar(m_l, field)
            force, metric = _lncc_force(f_l.data, warped, config.cc_radius, ainv3)
            if metric < prev_metric - 1e-12:
                # metric regression: revert and halve the step
                field = DeformationField(geom, prev_disp)
                step *= 0.5
                if step < 0.01 * float(np.min(geom.spacing)):
                    break
                continue
            prev_disp = field.disp.copy()
            prev_metric = metric
            history.append(metric)
            if len(history) > config.conv_window:
                ref = history[-config.conv_window - 1]
                if abs(metric - ref) < config.conv_tol * max(abs(ref), 1e-12):
                    break
            norms = np.linalg.norm(force, axis=-1)
            peak = float(norms.max())
            if peak <= 0:
                break
            update = _smooth_field(force * (step / peak), config.sigma_update)
            field = compose_fields(DeformationField(geom, update), field)
            field = DeformationField(geom, _smooth_field(field.disp, config.sigma_total))
        else:
            converged = len(history) > 0
    frac = field.positive_jacobian_fraction()
    if frac < config.jacobian_threshold:
        raise FoldingDetected(
            f"positive-Jacobian fraction {frac:.4f} below {config.jacobian_threshold}"
        )
    field.converged = converged
    field.positive_fraction = frac
    return field
