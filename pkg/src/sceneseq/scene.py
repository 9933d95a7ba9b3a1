"""Scene data model and the on-disk scene bundle format.

A bundle is a directory::

    scene.json                 scene_id, proposals, view manifest
    points.bin                 float32 table, dim=3
    colors.bin                 optional float32 table, dim=3, values in [0, 1]
    views/<id>.json            intrinsics, extrinsics (16 floats), width, height
    views/<id>.depth.bin       optional, rows=height, dim=width, 0 = no reading
    views/<id>.patch.bin       optional patch features, row-major patch order

Every ``.bin`` file shares one header: the magic ``CSPP``, then u32 version,
u32 rows, u32 dim (little-endian), then ``rows * dim`` float32 values.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

MAGIC = b"CSPP"
VERSION = 1
DEFAULT_PATCH = 16
_HEADER = struct.Struct("<4sIII")


class BundleError(ValueError):
    """Raised when a bundle is missing, malformed, or violates an invariant."""

    def __init__(self, path, field_name, message):
        self.path = str(path)
        self.field = field_name
        self.message = message
        super().__init__(f"{self.path}: {field_name}: {message}")


def _frozen(arr, dtype=np.float64):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Row-major real matrix; ``data`` has shape ``(rows, dim)``."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2:
            raise ValueError(f"feature table must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature table has non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ObjectProposal:
    index: int
    point_indices: np.ndarray

    def __post_init__(self):
        idx = _frozen(self.point_indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError(f"proposal {self.index}: point_indices must be a non-empty list")
        if np.any(np.diff(idx) <= 0):
            raise ValueError(f"proposal {self.index}: point_indices must be strictly increasing")
        if idx[0] < 0:
            raise ValueError(f"proposal {self.index}: negative point index")
        object.__setattr__(self, "point_indices", idx)

    def __eq__(self, other):
        if not isinstance(other, ObjectProposal):
            return NotImplemented
        return self.index == other.index and np.array_equal(self.point_indices, other.point_indices)


@dataclass(frozen=True, eq=False)
class CameraView:
    """A posed pinhole camera.

    ``extrinsics`` maps world to camera coordinates (x right, y down, z forward).
    """

    view_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: np.ndarray
    width: int
    height: int
    depth: Optional[np.ndarray] = None
    patch_features: Optional[FeatureTable] = None
    patch_size: int = DEFAULT_PATCH

    def __post_init__(self):
        if not self.view_id:
            raise ValueError("view_id must be non-empty")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"view {self.view_id}: fx and fy must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"view {self.view_id}: width and height must be positive")
        ext = _frozen(self.extrinsics).reshape(4, 4) if np.size(self.extrinsics) == 16 else None
        if ext is None:
            raise ValueError(f"view {self.view_id}: extrinsics must have 16 entries")
        object.__setattr__(self, "extrinsics", ext)
        if self.depth is not None:
            depth = _frozen(self.depth)
            if depth.shape != (self.height, self.width):
                raise ValueError(
                    f"view {self.view_id}: depth shape {depth.shape} != ({self.height}, {self.width})"
                )
            object.__setattr__(self, "depth", depth)
        if self.patch_features is not None:
            p = self.patch_size
            if self.width % p or self.height % p:
                raise ValueError(f"view {self.view_id}: image dims not multiples of patch size {p}")
            expected = (self.height // p) * (self.width // p)
            if self.patch_features.rows != expected:
                raise ValueError(
                    f"view {self.view_id}: patch_features has {self.patch_features.rows} rows, expected {expected}"
                )

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    def __eq__(self, other):
        if not isinstance(other, CameraView):
            return NotImplemented

        def opt_eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b) if isinstance(a, np.ndarray) else a == b

        return (
            self.view_id == other.view_id
            and (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
            and (self.width, self.height, self.patch_size) == (other.width, other.height, other.patch_size)
            and np.array_equal(self.extrinsics, other.extrinsics)
            and opt_eq(self.depth, other.depth)
            and opt_eq(self.patch_features, other.patch_features)
        )


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    points: np.ndarray
    proposals: tuple = ()
    views: tuple = ()
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.scene_id:
            raise ValueError("scene_id must be non-empty")
        pts = _frozen(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "proposals", tuple(self.proposals))
        object.__setattr__(self, "views", tuple(self.views))
        for i, prop in enumerate(self.proposals):
            if prop.index != i:
                raise ValueError(f"proposal at position {i} has index {prop.index}")
            if prop.point_indices[-1] >= len(pts):
                raise ValueError(
                    f"proposal {i} references point {int(prop.point_indices[-1])} >= point count {len(pts)}"
                )
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate view_id")
        if self.colors is not None:
            colors = _frozen(self.colors)
            if colors.shape != pts.shape:
                raise ValueError("colors must match points shape")
            if colors.size and (colors.min() < 0 or colors.max() > 1):
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", colors)

    @property
    def n_objects(self) -> int:
        return len(self.proposals)

    def object_points(self, index: int) -> np.ndarray:
        return self.points[self.proposals[_check_index(self, index)].point_indices]

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        if (self.colors is None) != (other.colors is None):
            return False
        return (
            self.scene_id == other.scene_id
            and np.array_equal(self.points, other.points)
            and self.proposals == other.proposals
            and self.views == other.views
            and (self.colors is None or np.array_equal(self.colors, other.colors))
        )


def _check_index(scene: Scene, index: int) -> int:
    if not isinstance(index, (int, np.integer)) or not 0 <= index < len(scene.proposals):
        raise IndexError(f"proposal index {index!r} out of range for {len(scene.proposals)} proposals")
    return int(index)


def object_centroid(scene: Scene, index: int) -> np.ndarray:
    """Unweighted mean of the proposal's points."""
    return scene.object_points(index).mean(axis=0)


def object_aabb(scene: Scene, index: int) -> tuple:
    """Axis-aligned hull ``(min_corner, max_corner)`` of the proposal's points."""
    pts = scene.object_points(index)
    return pts.min(axis=0), pts.max(axis=0)


# --- binary tables -----------------------------------------------------------


def write_table(path, data) -> None:
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("table must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_table(path, field_name="data", expect_dim=None) -> np.ndarray:
    """Read a CSPP table as a float64 array of shape ``(rows, dim)``."""
    if not os.path.isfile(path):
        raise BundleError(path, field_name, "missing file")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise BundleError(path, "header", "truncated header")
    magic, version, rows, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BundleError(path, "header.magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise BundleError(path, "header.version", f"unsupported version {version}")
    if expect_dim is not None and dim != expect_dim:
        raise BundleError(path, "header.dim", f"expected {expect_dim}, got {dim}")
    body = raw[_HEADER.size:]
    if len(body) != rows * dim * 4:
        raise BundleError(path, field_name, f"payload has {len(body)} bytes, expected {rows * dim * 4}")
    arr = np.frombuffer(body, dtype="<f4").reshape(rows, dim).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise BundleError(path, field_name, "non-finite values")
    return arr


# --- bundle I/O --------------------------------------------------------------


def _read_json(path):
    if not os.path.isfile(path):
        raise BundleError(path, "file", "missing file")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise BundleError(path, "json", str(exc)) from exc


def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise BundleError(path, key, "missing field")
    return obj[key]


def _load_view(views_dir, view_id):
    jpath = os.path.join(views_dir, f"{view_id}.json")
    meta = _read_json(jpath)
    intr = _require(meta, "intrinsics", jpath)
    try:
        fx, fy, cx, cy = (float(_require(intr, k, jpath)) for k in ("fx", "fy", "cx", "cy"))
        width = int(_require(meta, "width", jpath))
        height = int(_require(meta, "height", jpath))
    except (TypeError, ValueError) as exc:
        raise BundleError(jpath, "intrinsics", str(exc)) from exc
    ext = _require(meta, "extrinsics", jpath)
    if not isinstance(ext, list) or len(ext) != 16:
        raise BundleError(jpath, "extrinsics", "expected 16 floats")
    patch = int(meta.get("patch_size", DEFAULT_PATCH))

    depth = None
    dpath = os.path.join(views_dir, f"{view_id}.depth.bin")
    if os.path.exists(dpath):
        depth = read_table(dpath, "depth")
        if depth.shape != (height, width):
            raise BundleError(dpath, "depth", f"shape {depth.shape} != ({height}, {width})")
    feats = None
    ppath = os.path.join(views_dir, f"{view_id}.patch.bin")
    if os.path.exists(ppath):
        feats = FeatureTable(read_table(ppath, "patch_features"))
    try:
        return CameraView(
            view_id=view_id, fx=fx, fy=fy, cx=cx, cy=cy,
            extrinsics=np.array(ext, dtype=np.float64), width=width, height=height,
            depth=depth, patch_features=feats, patch_size=patch,
        )
    except ValueError as exc:
        raise BundleError(jpath, "view", str(exc)) from exc


def load_scene(bundle_path) -> Scene:
    """Load and validate a scene bundle directory."""
    bundle_path = os.fspath(bundle_path)
    spath = os.path.join(bundle_path, "scene.json")
    meta = _read_json(spath)
    scene_id = _require(meta, "scene_id", spath)
    if not isinstance(scene_id, str) or not scene_id:
        raise BundleError(spath, "scene_id", "must be a non-empty string")

    points = read_table(os.path.join(bundle_path, "points.bin"), "points", expect_dim=3)
    colors = None
    cpath = os.path.join(bundle_path, "colors.bin")
    if os.path.exists(cpath):
        colors = read_table(cpath, "colors", expect_dim=3)
        if colors.shape != points.shape:
            raise BundleError(cpath, "colors", "row count differs from points")
        if colors.size and (colors.min() < 0 or colors.max() > 1):
            raise BundleError(cpath, "colors", "values outside [0, 1]")

    proposals = []
    for i, entry in enumerate(_require(meta, "proposals", spath)):
        fname = f"proposals[{i}]"
        idx = entry.get("index", i) if isinstance(entry, dict) else None
        if idx != i:
            raise BundleError(spath, f"{fname}.index", f"expected {i}, got {idx!r}")
        pidx = _require(entry, "point_indices", spath)
        if not isinstance(pidx, list) or not pidx:
            raise BundleError(spath, f"{fname}.point_indices", "must be a non-empty list")
        if not all(isinstance(p, int) and not isinstance(p, bool) for p in pidx):
            raise BundleError(spath, f"{fname}.point_indices", "entries must be integers")
        if any(b <= a for a, b in zip(pidx, pidx[1:])):
            raise BundleError(spath, f"{fname}.point_indices", "duplicate or descending indices")
        if pidx[0] < 0 or pidx[-1] >= len(points):
            raise BundleError(
                spath, f"{fname}.point_indices", f"index outside [0, {len(points)})"
            )
        proposals.append(ObjectProposal(i, np.array(pidx, dtype=np.int64)))

    views_dir = os.path.join(bundle_path, "views")
    view_ids = meta.get("views", [])
    if not isinstance(view_ids, list) or not all(isinstance(v, str) and v for v in view_ids):
        raise BundleError(spath, "views", "must be a list of non-empty view ids")
    views = [_load_view(views_dir, vid) for vid in view_ids]

    try:
        return Scene(scene_id, points, proposals, views, colors)
    except ValueError as exc:
        raise BundleError(spath, "scene", str(exc)) from exc


def save_scene(scene: Scene, bundle_path) -> None:
    """Write ``scene`` as a bundle directory (created if needed)."""
    bundle_path = os.fspath(bundle_path)
    views_dir = os.path.join(bundle_path, "views")
    os.makedirs(views_dir, exist_ok=True)
    meta = {
        "scene_id": scene.scene_id,
        "proposals": [
            {"index": p.index, "point_indices": [int(i) for i in p.point_indices]}
            for p in scene.proposals
        ],
        "views": [v.view_id for v in scene.views],
    }
    with open(os.path.join(bundle_path, "scene.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    write_table(os.path.join(bundle_path, "points.bin"), scene.points)
    if scene.colors is not None:
        write_table(os.path.join(bundle_path, "colors.bin"), scene.colors)
    for v in scene.views:
        vmeta = {
            "view_id": v.view_id,
            "intrinsics": {"fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy},
            "extrinsics": [float(x) for x in v.extrinsics.ravel()],
            "width": v.width,
            "height": v.height,
            "patch_size": v.patch_size,
        }
        with open(os.path.join(views_dir, f"{v.view_id}.json"), "w", encoding="utf-8") as fh:
            json.dump(vmeta, fh, indent=1)
            fh.write("\n")
        if v.depth is not None:
            write_table(os.path.join(views_dir, f"{v.view_id}.depth.bin"), v.depth)
        if v.patch_features is not None:
            write_table(os.path.join(views_dir, f"{v.view_id}.patch.bin"), v.patch_features.data)


def validate_bundle(bundle_path) -> list:
    """Return a list of diagnostics (empty when the bundle is valid)."""
    try:
        load_scene(bundle_path)
    except BundleError as exc:
        return [str(exc)]
    return []
