"""Deterministic synthetic scenes and brute-force reference computations.

Nothing here imports the projection or aggregation modules: the oracles are
written from scratch (homogeneous 4x4 transforms, explicit loops) so that
agreement with the pipeline is meaningful.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from sceneseq.scene import CameraView, FeatureTable, ObjectProposal, Scene


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_objects: tuple = (3, 10)
    points_per_object: tuple = (40, 160)
    room_extent: tuple = (4.0, 4.0, 2.5)
    n_views: int = 5
    width: int = 64
    height: int = 48
    feature_dim: int = 8
    occluder_prob: float = 0.3
    patch: int = 16

    def __post_init__(self):
        for name in ("n_objects", "points_per_object"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a non-empty range of positive integers")
            object.__setattr__(self, name, (int(lo), int(hi)))
        object.__setattr__(self, "room_extent", tuple(float(x) for x in self.room_extent))
        if min(self.room_extent) <= 0:
            raise ValueError("room_extent must be positive")
        if self.width % self.patch or self.height % self.patch:
            raise ValueError("image dims must be multiples of the patch size")
        if self.n_views < 0 or self.feature_dim < 1:
            raise ValueError("n_views must be >= 0 and feature_dim >= 1")
        if not 0 <= self.occluder_prob <= 1:
            raise ValueError("occluder_prob must lie in [0, 1]")

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def patch_feature(view_id: str, patch_index: int, dim: int) -> np.ndarray:
    """Hash ``(view_id, patch_index)`` to a float32-representable vector in [-1, 1)."""
    digest = hashlib.blake2b(f"{view_id}:{patch_index}".encode(), digest_size=4 * dim).digest()
    ints = np.frombuffer(digest, dtype="<u4").astype(np.float64)
    return (ints / 2.0**31 - 1.0).astype(np.float32).astype(np.float64)


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _box_surface(rng, lo, hi, n):
    """``n`` points on the surface of the box ``[lo, hi]``, faces chosen by area."""
    size = hi - lo
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * size
    axis = faces % 3
    pts[np.arange(n), axis] = np.where(faces < 3, lo[axis], hi[axis])
    return pts


def _look_at(eye, target):
    """World-to-camera matrix for a camera at ``eye`` looking at ``target`` (z up in world)."""
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ eye
    return E


def _camera_ring(rng, spec, room):
    center = room / 2
    cams = []
    for k in range(spec.n_views):
        ang = 2 * np.pi * (k + rng.random() * 0.5) / max(spec.n_views, 1)
        radius = 0.45 * min(room[0], room[1]) * (0.8 + 0.2 * rng.random())
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), 0.3 * room[2] + 0.5 * rng.random()])
        target = center + (rng.random(3) - 0.5) * np.array([0.5, 0.5, 0.2])
        cams.append((eye, _look_at(eye, target)))
    return cams


def homogeneous_project(points, view: CameraView):
    """``(u, v, z)`` via an explicit 3x4 intrinsic-extrinsic product on homogeneous points."""
    K = np.array([[view.fx, 0, view.cx, 0], [0, view.fy, view.cy, 0], [0, 0, 1, 0]], dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    cam = hom @ view.extrinsics.T
    img = cam @ K.T
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = img[:, 0] / z
        v = img[:, 1] / z
    return u, v, z


def _pixels(u, v, z, view):
    """Pixel ``(col, row)`` per point, or -1 when outside the frustum."""
    col = np.full(len(z), -1, dtype=np.int64)
    row = np.full(len(z), -1, dtype=np.int64)
    for i in range(len(z)):
        if not (z[i] > 0 and 0 <= u[i] < view.width and 0 <= v[i] < view.height):
            continue
        col[i] = min(int(np.floor(u[i] + 0.5)), view.width - 1)
        row[i] = min(int(np.floor(v[i] + 0.5)), view.height - 1)
    return col, row


def render_depth(scene: Scene, view: CameraView) -> np.ndarray:
    """Per-pixel minimum camera depth over every scene point, 0 where nothing lands.

    The result is rounded to float32, the precision depth maps are stored at.
    """
    depth = np.zeros((view.height, view.width))
    if len(scene.points) == 0:
        return depth
    u, v, z = homogeneous_project(scene.points, view)
    col, row = _pixels(u, v, z, view)
    for i in range(len(z)):
        if col[i] < 0:
            continue
        cur = depth[row[i], col[i]]
        if cur == 0 or z[i] < cur:
            depth[row[i], col[i]] = z[i]
    return _f32(depth)


def oracle_visible(scene: Scene, index: int, view: CameraView, epsilon: float, depth=None) -> set:
    """Point indices of proposal ``index`` that survive a z-buffer of the whole scene."""
    if depth is None:
        depth = render_depth(scene, view)
    ids = scene.proposals[index].point_indices
    u, v, z = homogeneous_project(scene.points[ids], view)
    col, row = _pixels(u, v, z, view)
    out = set()
    for k, pid in enumerate(ids):
        if col[k] < 0:
            continue
        d = depth[row[k], col[k]]
        if d > 0 and abs(z[k] - d) <= epsilon:
            out.add(int(pid))
    return out


def oracle_2d_feature(scene: Scene, index: int, views=None, epsilon: float = 0.05, patch: int = 16,
                      mask_size_mode: str = "patches", feature_dim: int = 0) -> np.ndarray:
    """Fused 2D feature by direct enumeration: points, pixels, patches, views."""
    views = scene.views if views is None else views
    weighted = None
    weight_sum = 0
    dim = feature_dim
    for view in sorted(views, key=lambda v: v.view_id):
        if view.patch_features is None:
            continue
        dim = view.patch_features.dim
        if view.depth is not None:
            depth = view.depth
            visible = oracle_visible(scene, index, view, epsilon, depth)
        else:
            visible = None
        ids = scene.proposals[index].point_indices
        u, v, z = homogeneous_project(scene.points[ids], view)
        grid_w = view.width // patch
        counts = {}
        for k, pid in enumerate(ids):
            if not (z[k] > 0 and 0 <= u[k] < view.width and 0 <= v[k] < view.height):
                continue
            if visible is not None and int(pid) not in visible:
                continue
            j = int(v[k] // patch) * grid_w + int(u[k] // patch)
            counts[j] = counts.get(j, 0) + 1
        if not counts:
            continue
        acc = [0.0] * dim
        for j in sorted(counts):
            for c in range(dim):
                acc[c] += view.patch_features.data[j, c]
        mean = np.array(acc) / len(counts)
        size = len(counts) if mask_size_mode == "patches" else sum(counts.values())
        weighted = mean * size if weighted is None else weighted + mean * size
        weight_sum += size
    if weighted is None:
        return np.zeros(dim)
    return weighted / weight_sum


def gen_scene(spec: SynthSpec, scene_id=None):
    """Sample a scene of box-shaped point clusters plus posed, depth-rendered views.

    Returns ``(scene, sidecar)``; the sidecar records the boxes, occluders, the
    feature rule, and the z-buffer visible sets at the default tolerance.
    """
    rng = np.random.default_rng(spec.seed)
    room = np.array(spec.room_extent)
    n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    cams = _camera_ring(rng, spec, room)

    clusters, boxes, occluders = [], [], []
    for i in range(n_obj):
        size = rng.uniform(0.2, 0.9, 3) * np.array([1, 1, 1.2])
        lo = rng.uniform(0.15 * room, 0.85 * room - size)
        lo[2] = rng.uniform(0, max(room[2] * 0.5 - size[2], 0.01))
        hi = lo + size
        m = int(rng.integers(spec.points_per_object[0], spec.points_per_object[1] + 1))
        clusters.append(_box_surface(rng, lo, hi, m))
        boxes.append((lo, hi))
    if spec.n_views:
        eye = cams[0][0]
        for i in range(n_obj):
            if rng.random() >= spec.occluder_prob:
                continue
            lo, hi = boxes[i]
            center = (lo + hi) / 2
            slab_c = center + 0.45 * (eye - center)
            half = (hi - lo) / 2
            normal = int(np.argmax(np.abs(eye - center)[:2]))
            s_half = half.copy()
            s_half[normal] = 0.01
            # cover half of the object's silhouette
            side = 1 - normal
            slab_lo = slab_c - s_half
            slab_hi = slab_c + s_half
            slab_lo[side] = slab_c[side]
            m = int(rng.integers(spec.points_per_object[0], spec.points_per_object[1] + 1))
            clusters.append(_box_surface(rng, slab_lo, slab_hi, m))
            boxes.append((slab_lo, slab_hi))
            occluders.append({"occludes": i, "proposal": len(clusters) - 1})

    points = _f32(np.vstack(clusters))
    proposals, start = [], 0
    for i, c in enumerate(clusters):
        proposals.append(ObjectProposal(i, np.arange(start, start + len(c))))
        start += len(c)
    colors = _f32(rng.random((len(points), 3)))
    sid = scene_id or f"synth{spec.seed:05d}"

    bare = Scene(sid, points, proposals, [], colors)
    fx = 0.9 * spec.width
    grid = (spec.width // spec.patch) * (spec.height // spec.patch)
    views = []
    for k, (_, ext) in enumerate(cams):
        vid = f"v{k:02d}"
        probe = CameraView(vid, fx, fx, spec.width / 2, spec.height / 2, ext, spec.width, spec.height)
        depth = render_depth(bare, probe)
        feats = np.stack([patch_feature(vid, j, spec.feature_dim) for j in range(grid)])
        views.append(CameraView(vid, fx, fx, spec.width / 2, spec.height / 2, ext, spec.width, spec.height,
                                depth=depth, patch_features=FeatureTable(feats), patch_size=spec.patch))
    scene = Scene(sid, points, proposals, views, colors)

    visible = {
        v.view_id: {str(i): sorted(oracle_visible(scene, i, v, 0.05, v.depth)) for i in range(len(proposals))}
        for v in views
    }
    sidecar = {
        "scene_id": sid,
        "spec": spec.to_dict(),
        "boxes": [[lo.tolist(), hi.tolist()] for lo, hi in boxes],
        "occluders": occluders,
        "feature_rule": "blake2b(f'{view_id}:{patch_index}', digest_size=4*dim) as <u4 / 2**31 - 1, float32",
        "visible_epsilon": 0.05,
        "visible": visible,
    }
    return scene, sidecar
