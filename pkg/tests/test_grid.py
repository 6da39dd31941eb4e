"""Geometry, resampling, cropping and label-scheme behavior."""

import numpy as np
import pytest

from atlasfuse.errors import (
    AllBackground,
    EmptyBox,
    GeometryMismatch,
    InterpMismatch,
    NonInvertibleTransform,
)
from atlasfuse.grid import (
    CropBox,
    Geometry,
    LabelEntry,
    LabelScheme,
    LabelVolume,
    VolumeGrid,
    crop,
    default_scheme,
    label_bounding_box,
    resample,
    uncrop,
)
from atlasfuse.register import AffineTransform


def _translation(t):
    m = np.eye(4)
    m[:3, 3] = t
    return AffineTransform(m, "rigid")


def test_geometry_validation():
    with pytest.raises(GeometryMismatch):
        Geometry((0, 4, 4), np.ones(3), np.eye(4))
    with pytest.raises(GeometryMismatch):
        Geometry((4, 4, 4), np.array([1.0, -1.0, 1.0]), np.eye(4))
    with pytest.raises(NonInvertibleTransform):
        Geometry((4, 4, 4), np.ones(3), np.zeros((4, 4)))


def test_index_world_inverse_roundtrip():
    rng = np.random.default_rng(0)
    aff = np.eye(4)
    aff[:3, :3] = np.diag([0.7, 1.1, 1.3])
    aff[:3, 3] = (5.0, -3.0, 2.0)
    g = Geometry((10, 10, 10), np.array([0.7, 1.1, 1.3]), aff)
    idx = rng.uniform(0, 9, size=(50, 3))
    assert np.allclose(g.world_to_index(g.index_to_world(idx)), idx, atol=1e-9)


def test_voxel_volume():
    g = Geometry((4, 4, 4), np.array([0.5, 2.0, 1.5]), np.diag([0.5, 2.0, 1.5, 1.0]))
    assert g.voxel_volume == pytest.approx(1.5)


def test_trilinear_ramp_midpoint():
    """A linear ramp v(x)=x sampled halfway between voxels reads 1.5."""
    data = np.zeros((4, 4, 4))
    data[:] = np.arange(4)[:, None, None]
    vol = VolumeGrid(data, np.eye(4))
    assert vol.sample([(1.5, 1.0, 1.0)], "trilinear")[0] == pytest.approx(1.5, abs=1e-12)


def test_sampling_at_voxel_centers_reproduces_values():
    rng = np.random.default_rng(1)
    vol = VolumeGrid(rng.standard_normal((6, 6, 6)), np.eye(4))
    pts = vol.geometry.grid_world()
    vals = vol.sample(pts, "trilinear").reshape(vol.dims)
    assert np.allclose(vals, vol.data, atol=1e-6)


def test_out_of_bounds_reads_zero():
    vol = VolumeGrid(np.ones((4, 4, 4)), np.eye(4))
    assert vol.sample([(-10.0, 0.0, 0.0)])[0] == 0.0


def test_resample_identity_equals_input():
    rng = np.random.default_rng(2)
    vol = VolumeGrid(rng.standard_normal((8, 8, 8)), np.eye(4))
    out = resample(vol, vol.geometry, None, "trilinear")
    assert np.allclose(out.data, vol.data, atol=1e-9)


def test_resample_labels_cannot_invent_codes():
    rng = np.random.default_rng(3)
    lab = LabelVolume(rng.integers(0, 5, size=(12, 12, 12), dtype=np.int32), np.eye(4))
    out = resample(lab, lab.geometry, _translation((0.3, -0.7, 1.2)), "nearest")
    assert set(np.unique(out.data)) <= set(np.unique(lab.data)) | {0}


def test_resample_labels_trilinear_rejected():
    lab = LabelVolume(np.zeros((4, 4, 4), dtype=np.int32), np.eye(4))
    with pytest.raises(InterpMismatch):
        resample(lab, lab.geometry, None, "trilinear")
    with pytest.raises(InterpMismatch):
        lab.sample([(0.0, 0.0, 0.0)], "trilinear")


def test_label_affine_roundtrip_recovers_blocky_phantom():
    """Nearest warp then inverse warp recovers >= 99% of voxels on 4+ voxel blocks."""
    data = np.zeros((32, 32, 32), dtype=np.int32)
    data[6:14, 6:14, 6:14] = 1
    data[18:26, 16:24, 8:16] = 2
    lab = LabelVolume(data, np.eye(4))
    m = np.eye(4)
    m[:3, :3] = np.diag([1.05, 0.97, 1.02])
    m[:3, 3] = (0.4, -0.3, 0.6)
    fwd = AffineTransform(m, "affine")
    warped = resample(lab, lab.geometry, fwd, "nearest")
    back = resample(warped, lab.geometry, fwd.inverse(), "nearest")
    assert np.mean(back.data == lab.data) >= 0.99


def test_crop_preserves_world_coordinates():
    rng = np.random.default_rng(4)
    aff = np.diag([0.8, 1.2, 1.0, 1.0])
    aff[:3, 3] = (3.0, -1.0, 2.5)
    vol = VolumeGrid(rng.standard_normal((16, 16, 16)), aff)
    box = CropBox((2, 3, 4), (10, 12, 9))
    sub = crop(vol, box)
    assert sub.dims == box.extent
    # retained voxels keep their world positions (affine comparison, 1e-9 mm)
    expect = vol.geometry.index_to_world([box.lo])[0]
    assert np.allclose(sub.affine[:3, 3], expect, atol=1e-9)
    assert np.allclose(sub.affine[:3, :3], vol.affine[:3, :3], atol=1e-9)
    # sampling any retained world point matches the original
    pts = vol.geometry.index_to_world(
        rng.uniform(low=box.lo, high=box.hi, size=(40, 3))
    )
    assert np.allclose(sub.sample(pts), vol.sample(pts), atol=1e-9)


def test_crop_single_voxel_world_position():
    vol = VolumeGrid(np.zeros((8, 8, 8)), np.eye(4))
    sub = crop(vol, CropBox((2, 3, 4), (2, 3, 4)))
    assert sub.dims == (1, 1, 1)
    assert np.allclose(sub.geometry.index_to_world([(0, 0, 0)])[0], (2.0, 3.0, 4.0))


def test_crop_full_volume_is_identity():
    rng = np.random.default_rng(5)
    vol = VolumeGrid(rng.standard_normal((6, 6, 6)), np.eye(4))
    sub = crop(vol, CropBox((0, 0, 0), (5, 5, 5)))
    assert np.array_equal(sub.data, vol.data)
    assert np.allclose(sub.affine, vol.affine)


def test_empty_box_rejected():
    with pytest.raises(EmptyBox):
        CropBox((5, 0, 0), (2, 5, 5))


def test_uncrop_inverts_crop():
    rng = np.random.default_rng(6)
    lab = LabelVolume(rng.integers(0, 3, size=(10, 10, 10), dtype=np.int32), np.eye(4))
    box = CropBox((1, 2, 3), (8, 7, 9))
    sub = crop(lab, box)
    full = uncrop(sub, box, lab.geometry)
    inside = np.zeros(lab.dims, dtype=bool)
    inside[1:9, 2:8, 3:10] = True
    assert np.array_equal(full.data[inside], lab.data[inside])
    assert np.all(full.data[~inside] == 0)


def test_uncrop_extent_mismatch():
    sub = LabelVolume(np.zeros((2, 2, 2), dtype=np.int32), np.eye(4))
    with pytest.raises(GeometryMismatch):
        uncrop(sub, CropBox((0, 0, 0), (4, 4, 4)), Geometry((8, 8, 8), np.ones(3), np.eye(4)))


def test_label_bounding_box_examples():
    data = np.zeros((64, 64, 64), dtype=np.int32)
    data[10, 10, 10] = 1
    lab = LabelVolume(data, np.eye(4))
    box = label_bounding_box(lab, margin=2)
    assert box.lo == (8, 8, 8) and box.hi == (12, 12, 12)

    data = np.zeros((64, 64, 64), dtype=np.int32)
    data[0, 0, 0] = 1
    box = label_bounding_box(LabelVolume(data, np.eye(4)), margin=2)
    assert box.lo == (0, 0, 0) and box.hi == (2, 2, 2)


def test_label_bounding_box_scan_oracle():
    rng = np.random.default_rng(7)
    data = (rng.random((20, 20, 20)) < 0.01).astype(np.int32)
    data[5, 5, 5] = 1  # guarantee nonempty
    lab = LabelVolume(data, np.eye(4))
    box = label_bounding_box(lab, margin=1)
    for i, j, k in np.argwhere(data):
        assert all(box.lo[a] <= (i, j, k)[a] <= box.hi[a] for a in range(3))


def test_label_bounding_box_all_background():
    lab = LabelVolume(np.zeros((4, 4, 4), dtype=np.int32), np.eye(4))
    with pytest.raises(AllBackground):
        label_bounding_box(lab)


def test_label_volume_validation():
    with pytest.raises(GeometryMismatch):
        LabelVolume(np.zeros((4, 4, 4)), np.eye(4))  # float data
    with pytest.raises(GeometryMismatch):
        LabelVolume(np.full((4, 4, 4), -1, dtype=np.int32), np.eye(4))
    scheme = LabelScheme([LabelEntry(1, "A", "a", "right")])
    with pytest.raises(GeometryMismatch):
        LabelVolume(np.full((2, 2, 2), 9, dtype=np.int32), np.eye(4), scheme=scheme)


def test_label_scheme_rules():
    with pytest.raises(GeometryMismatch):
        LabelScheme([LabelEntry(1, "A", "a", "right"), LabelEntry(1, "B", "b", "left")])
    with pytest.raises(GeometryMismatch):
        LabelScheme([LabelEntry(0, "BG", "background", "")])


def test_default_scheme_structure():
    scheme = default_scheme()
    codes = scheme.codes()
    assert codes == list(range(1, 13)) + list(range(101, 113))
    pairs = scheme.bilateral_pairs()
    assert sorted(pairs) == [(c, c + 100) for c in range(1, 13)]
    for right, left in pairs:
        assert scheme[right].abbrev == scheme[left].abbrev


def test_scheme_json_roundtrip(tmp_path):
    scheme = default_scheme()
    path = str(tmp_path / "scheme.json")
    scheme.to_json(path)
    assert LabelScheme.from_json(path) == scheme
