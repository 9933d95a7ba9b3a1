"""Multi-view 2D feature pooling and feature-to-embedding projection.

Per view, an object's feature is the mean of the patch features under its
patch mask. Across views, the per-view features are averaged with weights
equal to each view's mask size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from sceneseq.projection import OcclusionPolicy, patch_mask, visible_points
from sceneseq.scene import CameraView, Scene, _check_index, read_table, write_table

MASK_SIZE_MODES = ("patches", "hits")


@dataclass(frozen=True, eq=False)
class ViewFeature:
    view_id: str
    feature: np.ndarray
    mask_size: int

    def __post_init__(self):
        if self.mask_size < 1:
            raise ValueError("mask_size must be >= 1")


@dataclass(frozen=True, eq=False)
class ObjectRecord:
    index: int
    feature_3d: Optional[np.ndarray] = None
    feature_2d: Optional[np.ndarray] = None
    embed_3d: Optional[np.ndarray] = None
    embed_2d: Optional[np.ndarray] = None
    visible_anywhere: bool = False
    views_used: int = 0
    views_skipped: int = 0


@dataclass(frozen=True, eq=False)
class AffineProjector:
    name: str
    matrix: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).ravel()
        if m.ndim != 2 or b.shape != (m.shape[0],):
            raise ValueError(f"projector {self.name}: matrix {m.shape} and bias {b.shape} disagree")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(b))):
            raise ValueError(f"projector {self.name}: non-finite entries")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "bias", b)

    @property
    def d_in(self) -> int:
        return self.matrix.shape[1]

    @property
    def d_out(self) -> int:
        return self.matrix.shape[0]


def load_projector(path, name="f") -> AffineProjector:
    """Projector file: a table with ``D_out`` rows and ``D_in + 1`` columns, bias last."""
    table = read_table(path, "projector")
    if table.shape[1] < 2:
        raise ValueError(f"{path}: projector needs at least one input column plus bias")
    return AffineProjector(name, table[:, :-1], table[:, -1])


def save_projector(p: AffineProjector, path) -> None:
    write_table(path, np.hstack([p.matrix, p.bias[:, None]]))


def per_view_feature(view: CameraView, mask, mask_size_mode: str = "patches") -> ViewFeature:
    """Mean of the patch features under ``mask``."""
    if view.patch_features is None:
        raise ValueError(f"view {view.view_id} has no patch features")
    if mask.view_id != view.view_id:
        raise ValueError(f"mask belongs to view {mask.view_id}, not {view.view_id}")
    if not mask.covered:
        raise ValueError(f"empty mask for view {view.view_id}")
    covered = sorted(mask.covered)
    feats = view.patch_features.data[covered]
    total = np.zeros(feats.shape[1])
    for row in feats:
        total = total + row
    feature = total / len(covered)
    if mask_size_mode == "patches":
        size = len(covered)
    elif mask_size_mode == "hits":
        size = mask.n_hits
    else:
        raise ValueError(f"unknown mask_size_mode {mask_size_mode!r}")
    return ViewFeature(view.view_id, feature, size)


def fuse_views(per_view) -> np.ndarray:
    """Mask-size-weighted mean of view features, summed in ascending view_id order."""
    per_view = list(per_view)
    if not per_view:
        raise ValueError("no view features to fuse")
    dims = {np.shape(vf.feature) for vf in per_view}
    if len(dims) != 1:
        raise ValueError(f"view feature dims differ: {sorted(dims)}")
    ordered = sorted(per_view, key=lambda vf: vf.view_id)
    num = np.zeros(dims.pop())
    den = 0
    for vf in ordered:
        num = num + vf.feature * vf.mask_size
        den += vf.mask_size
    return num / den


def apply_projector(p: AffineProjector, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (p.d_in,):
        raise ValueError(f"projector {p.name} expects dim {p.d_in}, got {z.shape}")
    return p.matrix @ z + p.bias


def _feature_dim(scene: Scene, default):
    for v in scene.views:
        if v.patch_features is not None:
            return v.patch_features.dim
    return default


def build_object_record(
    scene: Scene,
    index: int,
    policy: OcclusionPolicy = OcclusionPolicy(),
    feature_3d=None,
    projectors=None,
    patch: int = 16,
    min_hits: int = 1,
    mask_size_mode: str = "patches",
    feature_dim: int = 0,
) -> ObjectRecord:
    """Run projection and pooling over every view that carries patch features.

    ``projectors`` is an optional ``(f_3d, f_2d)`` pair; either side may be None.
    Objects seen in no view get a zero 2D feature and ``visible_anywhere=False``.
    """
    index = _check_index(scene, index)
    per_view = []
    skipped = 0
    for view in scene.views:
        if view.patch_features is None:
            skipped += 1
            continue
        vis = visible_points(scene, index, view, policy)
        mask = patch_mask(vis, view, patch=patch, min_hits=min_hits)
        if mask.covered:
            per_view.append(per_view_feature(view, mask, mask_size_mode))

    if per_view:
        feature_2d = fuse_views(per_view)
    else:
        feature_2d = np.zeros(_feature_dim(scene, feature_dim))

    f3 = None if feature_3d is None else np.asarray(feature_3d, dtype=np.float64)
    p3, p2 = projectors if projectors is not None else (None, None)
    embed_3d = apply_projector(p3, f3) if (p3 is not None and f3 is not None) else None
    embed_2d = apply_projector(p2, feature_2d) if p2 is not None else None
    return ObjectRecord(
        index=index,
        feature_3d=f3,
        feature_2d=feature_2d,
        embed_3d=embed_3d,
        embed_2d=embed_2d,
        visible_anywhere=bool(per_view),
        views_used=len(per_view),
        views_skipped=skipped,
    )
