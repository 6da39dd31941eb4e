"""Label fusion: majority voting and joint label fusion (JLF).

JLF weighting per voxel: each atlas contributes its best-matching patch
(minimum sum of absolute z-scored intensity differences within the local
search window); the pairwise dependency matrix M(i,j) = (sum_p |Di(p)|*|Dj(p)|)^beta
is regularized and solved against the all-ones vector; negative weights are
clamped to zero and the weights renormalized before voting.

Voxels where every warped atlas already agrees are copied directly, which
both speeds things up and makes JLF bit-identical to majority voting when
the atlases are identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyAtlasList, GeometryMismatch, SingularDependency
from .grid import LabelVolume, VolumeGrid


@dataclass
class JlfParams:
    patch_radius: int = 2  # voxels
    search_radius: int = 3  # voxels
    beta: float = 2.0
    epsilon_scale: float = 0.1  # epsilon = scale * mean(diag(M))
    absolute_epsilon: float | None = None  # overrides epsilon_scale when set

    def __post_init__(self):
        if self.patch_radius < 0 or self.search_radius < 0:
            raise ValueError("radii must be >= 0")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.epsilon_scale <= 0 and self.absolute_epsilon is None:
            raise ValueError("epsilon must be > 0")


def _check_common_grid(volumes):
    g0 = volumes[0].geometry
    for v in volumes[1:]:
        if not v.geometry.close_to(g0):
            raise GeometryMismatch("inputs are not on a common grid")
    return g0


def majority_vote(warped_labels) -> LabelVolume:
    """Per-voxel most frequent code; ties go to the lowest code (0 competes)."""
    if not warped_labels:
        raise EmptyAtlasList("need at least one atlas labelmap")
    _check_common_grid(warped_labels)
    stack = np.stack([lv.data for lv in warped_labels], axis=0)
    codes = np.unique(stack)
    counts = np.zeros((len(codes),) + stack.shape[1:], dtype=np.int32)
    for ci, code in enumerate(codes):
        counts[ci] = (stack == code).sum(axis=0)
    # argmax returns the first (lowest-code) maximum because codes is sorted
    winner = codes[np.argmax(counts, axis=0)]
    ref = warped_labels[0]
    return LabelVolume(winner.astype(np.int32), ref.affine, ref.spacing, ref.scheme)


def jlf_weights(diffs, beta=2.0, epsilon_scale=0.1, absolute_epsilon=None):
    """Fusion weights from per-atlas patch-difference vectors.

    diffs: (N, P) array, row i = normalized target-minus-atlas patch
    differences for atlas i at its best match.
    """
    d = np.abs(np.asarray(diffs, dtype=float))
    m = (d @ d.T) ** beta
    eps = absolute_epsilon
    if eps is None:
        eps = epsilon_scale * max(float(np.mean(np.diag(m))), 1e-12)
    try:
        w = np.linalg.solve(m + eps * np.eye(len(d)), np.ones(len(d)))
    except np.linalg.LinAlgError as e:
        raise SingularDependency(str(e)) from e
    s = w.sum()
    if abs(s) < 1e-30:
        raise SingularDependency("weight sum collapsed to zero")
    w = w / s
    w = np.clip(w, 0.0, None)
    total = w.sum()
    if total <= 0:
        raise SingularDependency("all weights clamped to zero")
    return w / total


def _zscore(patch):
    mu = patch.mean()
    sd = patch.std()
    if sd < 1e-12:
        return patch - mu
    return (patch - mu) / sd


def joint_label_fusion(
    target: VolumeGrid,
    atlas_intensities,
    atlas_labels,
    params: JlfParams | None = None,
) -> LabelVolume:
    """Patch-based weighted voting over N warped atlases on the target grid."""
    params = params or JlfParams()
    if not atlas_intensities or not atlas_labels:
        raise EmptyAtlasList("need at least one atlas")
    if len(atlas_intensities) != len(atlas_labels):
        raise GeometryMismatch("intensity and label lists differ in length")
    _check_common_grid([target, *atlas_intensities, *atlas_labels])
    n = len(atlas_labels)
    stack = np.stack([lv.data for lv in atlas_labels], axis=0)
    out = stack[0].copy()
    disagree = np.any(stack != stack[0], axis=0)
    if n == 1 or not disagree.any():
        ref = atlas_labels[0]
        return LabelVolume(out, ref.affine, ref.spacing, ref.scheme)

    pr, sr = params.patch_radius, params.search_radius
    pad = pr + sr
    tpad = np.pad(target.data, pad, mode="edge")
    apad = [np.pad(v.data, pad, mode="edge") for v in atlas_intensities]
    lpad = [np.pad(lv.data, pad, mode="constant", constant_values=0) for lv in atlas_labels]

    side = 2 * pr + 1
    po = np.stack(
        np.meshgrid(*([np.arange(-pr, pr + 1)] * 3), indexing="ij"), axis=-1
    ).reshape(-1, 3)  # (P, 3) patch offsets
    so = np.stack(
        np.meshgrid(*([np.arange(-sr, sr + 1)] * 3), indexing="ij"), axis=-1
    ).reshape(-1, 3)  # (S, 3) search offsets
    npatch = side**3

    vox = np.argwhere(disagree)
    for i, j, k in vox:
        ci, cj, ck = i + pad, j + pad, k + pad
        tpatch = _zscore(
            tpad[ci - pr : ci + pr + 1, cj - pr : cj + pr + 1, ck - pr : ck + pr + 1]
        ).reshape(-1)
        diffs = np.empty((n, npatch))
        votes_code = np.empty(n, dtype=np.int64)
        centers = so + (ci, cj, ck)  # candidate patch centers (S, 3)
        cand_idx = centers[:, None, :] + po[None, :, :]
        ix, iy, iz = cand_idx[..., 0], cand_idx[..., 1], cand_idx[..., 2]
        for ai in range(n):
            cand = apad[ai][ix, iy, iz]
            mu = cand.mean(axis=1, keepdims=True)
            sd = cand.std(axis=1, keepdims=True)
            norm = np.where(sd < 1e-12, cand - mu, (cand - mu) / np.maximum(sd, 1e-12))
            d = norm - tpatch[None, :]
            best = int(np.argmin(np.abs(d).sum(axis=1)))
            diffs[ai] = d[best]
            bc = centers[best]
            votes_code[ai] = lpad[ai][bc[0], bc[1], bc[2]]
        w = jlf_weights(diffs, params.beta, params.epsilon_scale, params.absolute_epsilon)
        codes = np.unique(votes_code)
        acc = np.array([w[votes_code == c].sum() for c in codes])
        out[i, j, k] = codes[int(np.argmax(acc))]

    ref = atlas_labels[0]
    return LabelVolume(out, ref.affine, ref.spacing, ref.scheme)
