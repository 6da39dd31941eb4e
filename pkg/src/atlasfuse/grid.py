"""Voxel-grid types, interpolation, resampling and cropping.

Conventions used throughout the toolkit:

* volumes are 3D arrays indexed (i, j, k), voxel (i, j, k) sits at world
  position ``affine @ (i, j, k, 1)`` in mm;
* all resampling is pull-back: the supplied transform maps *target* world
  coordinates into *source* world coordinates;
* out-of-bounds samples read as 0 (background for labelmaps).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import (
    AllBackground,
    EmptyBox,
    GeometryMismatch,
    InterpMismatch,
    NonInvertibleTransform,
)

_DET_EPS = 1e-12


@dataclass(frozen=True)
class Geometry:
    """Lattice description: voxel counts, spacing (mm) and index->world affine."""

    dims: tuple
    spacing: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", np.asarray(self.spacing, dtype=float))
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=float))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise GeometryMismatch(f"bad dims {self.dims}")
        if self.spacing.shape != (3,) or np.any(self.spacing <= 0):
            raise GeometryMismatch(f"bad spacing {self.spacing}")
        if self.affine.shape != (4, 4):
            raise GeometryMismatch("affine must be 4x4")
        if abs(np.linalg.det(self.affine[:3, :3])) <= _DET_EPS:
            raise NonInvertibleTransform("affine 3x3 block is singular")

    @classmethod
    def from_affine(cls, dims, affine) -> "Geometry":
        affine = np.asarray(affine, dtype=float)
        spacing = np.linalg.norm(affine[:3, :3], axis=0)
        return cls(tuple(dims), spacing, affine)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Map (N, 3) voxel indices to (N, 3) world mm."""
        idx = np.atleast_2d(np.asarray(idx, dtype=float))
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_index(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        inv = np.linalg.inv(self.affine)
        return pts @ inv[:3, :3].T + inv[:3, 3]

    def grid_world(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (nvox, 3), C order."""
        ii, jj, kk = np.meshgrid(
            np.arange(self.dims[0]),
            np.arange(self.dims[1]),
            np.arange(self.dims[2]),
            indexing="ij",
        )
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.index_to_world(idx)

    def world_bounds(self):
        """Axis-aligned world bounding box of the voxel-center lattice."""
        corners = np.array(
            [
                (i, j, k)
                for i in (0, self.dims[0] - 1)
                for j in (0, self.dims[1] - 1)
                for k in (0, self.dims[2] - 1)
            ],
            dtype=float,
        )
        w = self.index_to_world(corners)
        return w.min(axis=0), w.max(axis=0)

    def close_to(self, other: "Geometry", tol: float = 1e-5) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.affine, other.affine, atol=tol)
        )


@dataclass(frozen=True)
class LabelEntry:
    code: int
    abbrev: str
    name: str
    hemisphere: str  # "right", "left" or "" for midline/background


class LabelScheme:
    """Mapping from integer label codes to nucleus names."""

    def __init__(self, entries):
        self.entries = {}
        for e in entries:
            if e.code in self.entries:
                raise GeometryMismatch(f"duplicate label code {e.code}")
            if e.code == 0:
                raise GeometryMismatch("code 0 is reserved for background")
            self.entries[e.code] = e

    def codes(self):
        return sorted(self.entries)

    def __contains__(self, code):
        return code in self.entries

    def __getitem__(self, code) -> LabelEntry:
        return self.entries[code]

    def __eq__(self, other):
        return isinstance(other, LabelScheme) and self.entries == other.entries

    def bilateral_pairs(self):
        """(right_code, left_code) pairs matched by abbreviation."""
        right = {e.abbrev: c for c, e in self.entries.items() if e.hemisphere == "right"}
        left = {e.abbrev: c for c, e in self.entries.items() if e.hemisphere == "left"}
        return [(right[a], left[a]) for a in right if a in left]

    def to_json(self, path):
        rows = [
            {"code": c, "abbrev": e.abbrev, "name": e.name, "hemisphere": e.hemisphere}
            for c, e in sorted(self.entries.items())
        ]
        with open(path, "w") as f:
            json.dump(rows, f, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            rows = json.load(f)
        return cls([LabelEntry(int(r["code"]), r["abbrev"], r["name"], r["hemisphere"]) for r in rows])


def default_scheme() -> LabelScheme:
    """The shipped 12-structure bilateral thalamic scheme (right 1..12, left +100)."""
    text = resources.files("atlasfuse.data").joinpath("default_scheme.json").read_text()
    rows = json.loads(text)
    return LabelScheme(
        [LabelEntry(int(r["code"]), r["abbrev"], r["name"], r["hemisphere"]) for r in rows]
    )


class VolumeGrid:
    """3D scalar image on a voxel lattice."""

    def __init__(self, data, affine, spacing=None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim != 3:
            raise GeometryMismatch(f"expected 3D data, got shape {self.data.shape}")
        affine = np.asarray(affine, dtype=float)
        if spacing is None:
            spacing = np.linalg.norm(affine[:3, :3], axis=0)
        self.geometry = Geometry(self.data.shape, spacing, affine)

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def affine(self):
        return self.geometry.affine

    def sample(self, world_pts, interp="trilinear"):
        """Sample at world points; out-of-bounds reads as 0."""
        return _sample_array(self.data, self.geometry, world_pts, interp)

    def with_data(self, data) -> "VolumeGrid":
        return VolumeGrid(data, self.affine, self.spacing)


class LabelVolume:
    """3D integer labelmap sharing VolumeGrid geometry; 0 is background."""

    def __init__(self, data, affine, spacing=None, scheme: LabelScheme | None = None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise GeometryMismatch("labelmap data must be integer")
        self.data = self.data.astype(np.int32)
        if self.data.ndim != 3:
            raise GeometryMismatch(f"expected 3D data, got shape {self.data.shape}")
        if np.any(self.data < 0):
            raise GeometryMismatch("negative label codes")
        affine = np.asarray(affine, dtype=float)
        if spacing is None:
            spacing = np.linalg.norm(affine[:3, :3], axis=0)
        self.geometry = Geometry(self.data.shape, spacing, affine)
        self.scheme = scheme
        if scheme is not None:
            present = set(np.unique(self.data)) - {0}
            unknown = present - set(scheme.codes())
            if unknown:
                raise GeometryMismatch(f"codes not in scheme: {sorted(unknown)}")

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def spacing(self):
        return self.geometry.spacing

    @property
    def affine(self):
        return self.geometry.affine

    def sample(self, world_pts, interp="nearest"):
        if interp != "nearest":
            raise InterpMismatch("labelmaps support nearest-neighbor only")
        return _sample_array(self.data, self.geometry, world_pts, "nearest")

    def with_data(self, data) -> "LabelVolume":
        return LabelVolume(data, self.affine, self.spacing, self.scheme)


@dataclass
class CropBox:
    """Inclusive voxel-index box."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        self.lo = tuple(int(v) for v in self.lo)
        self.hi = tuple(int(v) for v in self.hi)
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise EmptyBox(f"empty box {self.lo}..{self.hi}")

    def clipped(self, dims) -> "CropBox":
        lo = tuple(min(max(v, 0), d - 1) for v, d in zip(self.lo, dims))
        hi = tuple(min(max(v, 0), d - 1) for v, d in zip(self.hi, dims))
        return CropBox(lo, hi)

    @property
    def extent(self):
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["lo"]), tuple(d["hi"]))


def _sample_array(data, geometry: Geometry, world_pts, interp):
    world_pts = np.atleast_2d(np.asarray(world_pts, dtype=float))
    idx = geometry.world_to_index(world_pts)
    order = {"trilinear": 1, "nearest": 0}.get(interp)
    if order is None:
        raise InterpMismatch(f"unknown interpolation {interp!r}")
    return map_coordinates(
        np.asarray(data, dtype=float), idx.T, order=order, mode="constant", cval=0.0
    )


def resample(source, target_geometry: Geometry, transform=None, interp="trilinear"):
    """Resample onto target_geometry; transform maps target world -> source world.

    transform may be None (identity), an AffineTransform, or a DeformationField
    (both from atlasfuse.register). Labelmaps require interp='nearest'.
    """
    is_labels = isinstance(source, LabelVolume)
    if is_labels and interp != "nearest":
        raise InterpMismatch("labelmaps must be resampled with nearest interpolation")
    pts = target_geometry.grid_world()
    if transform is not None:
        pts = transform.map_points(pts)
    vals = _sample_array(source.data, source.geometry, pts, interp)
    vals = vals.reshape(target_geometry.dims)
    if is_labels:
        return LabelVolume(
            np.rint(vals).astype(np.int32),
            target_geometry.affine,
            target_geometry.spacing,
            source.scheme,
        )
    return VolumeGrid(vals, target_geometry.affine, target_geometry.spacing)


def crop(volume, box: CropBox):
    """Extract a sub-volume; world coordinates of retained voxels are unchanged."""
    box = box.clipped(volume.dims)
    lo, hi = box.lo, box.hi
    sub = volume.data[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
    affine = volume.affine.copy()
    affine[:3, 3] = volume.geometry.index_to_world([lo])[0]
    if isinstance(volume, LabelVolume):
        return LabelVolume(sub.copy(), affine, volume.spacing, volume.scheme)
    return VolumeGrid(sub.copy(), affine, volume.spacing)


def uncrop(sub, box: CropBox, full_geometry: Geometry, fill=0):
    """Paste a cropped volume back into the full frame at its box position."""
    box = box.clipped(full_geometry.dims)
    if tuple(sub.dims) != box.extent:
        raise GeometryMismatch("sub-volume extent does not match box")
    out = np.full(full_geometry.dims, fill, dtype=sub.data.dtype)
    lo, hi = box.lo, box.hi
    out[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = sub.data
    if isinstance(sub, LabelVolume):
        return LabelVolume(out, full_geometry.affine, full_geometry.spacing, sub.scheme)
    return VolumeGrid(out, full_geometry.affine, full_geometry.spacing)


def label_bounding_box(labels: LabelVolume, margin: int = 0) -> CropBox:
    """Tightest box around nonzero voxels, dilated by margin, clipped to dims."""
    nz = np.nonzero(labels.data)
    if nz[0].size == 0:
        raise AllBackground("labelmap has no nonzero voxels")
    lo = [int(a.min()) - margin for a in nz]
    hi = [int(a.max()) + margin for a in nz]
    return CropBox(lo, hi).clipped(labels.dims)
