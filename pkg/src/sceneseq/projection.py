"""Pinhole projection, depth-based occlusion culling and patch rasterization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from sceneseq.scene import CameraView, Scene, _check_index

DEFAULT_EPSILON = 0.05


@dataclass(frozen=True)
class OcclusionPolicy:
    epsilon: float = DEFAULT_EPSILON
    require_depth: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class PatchMask:
    view_id: str
    grid_w: int
    grid_h: int
    covered: frozenset = frozenset()
    pixel_hits: dict = field(default_factory=dict)

    @property
    def n_covered(self) -> int:
        return len(self.covered)

    @property
    def n_hits(self) -> int:
        return sum(self.pixel_hits.values())


class MissingDepthError(ValueError):
    pass


def pixel_of(u, v, width, height):
    """Nearest pixel ``(col, row)`` for continuous coordinates inside the image.

    Rounds half up and clamps to the last column/row, so every in-frame
    coordinate maps to a valid pixel.
    """
    col = np.minimum(np.floor(np.asarray(u) + 0.5).astype(np.int64), width - 1)
    row = np.minimum(np.floor(np.asarray(v) + 0.5).astype(np.int64), height - 1)
    return col, row


def project_points(points, view: CameraView):
    """Vectorized projection. Returns ``(u, v, z, in_frame)`` arrays."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = pts @ view.rotation.T + view.translation
    z = cam[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    u = view.fx * cam[:, 0] / safe_z + view.cx
    v = view.fy * cam[:, 1] / safe_z + view.cy
    in_frame = in_front & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    return u, v, z, in_frame


def project_point(point, view: CameraView) -> Optional[tuple]:
    """Project a world point; ``None`` when behind the camera or outside the image."""
    u, v, z, ok = project_points(point, view)
    if not ok[0]:
        return None
    return float(u[0]), float(v[0]), float(z[0])


def visible_points(scene: Scene, index: int, view: CameraView, policy: OcclusionPolicy = OcclusionPolicy()):
    """Points of proposal ``index`` that project into ``view`` and pass the depth test.

    Returns a list of ``(point_index, u, v)`` in ascending point order.
    """
    prop = scene.proposals[_check_index(scene, index)]
    if view.depth is None and policy.require_depth:
        raise MissingDepthError(f"view {view.view_id} has no depth map")
    ids = prop.point_indices
    u, v, z, keep = project_points(scene.points[ids], view)
    if view.depth is not None:
        col, row = pixel_of(np.where(keep, u, 0), np.where(keep, v, 0), view.width, view.height)
        d = view.depth[row, col]
        keep = keep & (d > 0) & (np.abs(z - d) <= policy.epsilon)
    return [(int(i), float(uu), float(vv)) for i, uu, vv in zip(ids[keep], u[keep], v[keep])]


def patch_mask(visible, view: CameraView, patch: int = 16, min_hits: int = 1) -> PatchMask:
    """Bin visible projections onto the ``patch`` x ``patch`` grid of ``view``."""
    if patch <= 0 or view.width % patch or view.height % patch:
        raise ValueError(f"patch size {patch} does not divide {view.width}x{view.height}")
    if min_hits < 1:
        raise ValueError("min_hits must be >= 1")
    grid_w, grid_h = view.width // patch, view.height // patch
    hits = {}
    for _, u, v in visible:
        j = math.floor(v / patch) * grid_w + math.floor(u / patch)
        hits[j] = hits.get(j, 0) + 1
    kept = {j: c for j, c in hits.items() if c >= min_hits}
    return PatchMask(view.view_id, grid_w, grid_h, frozenset(kept), dict(sorted(kept.items())))
