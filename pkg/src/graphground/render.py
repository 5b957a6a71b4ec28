"""Minimal z-buffered point-splat renderer for candidate views."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .ingest import project_points
from .scene import AABB, SceneGraph3D

BACKGROUND = (24, 24, 24)
HALF_FOV_DEG = 40.0
UP = np.array([0.0, 0.0, 1.0])
_BOX_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if bin(a ^ b).count("1") == 1]


@dataclass(frozen=True)
class CameraSpec:
    intrinsics: Tuple[float, float, float, float]
    pose: np.ndarray  # camera-to-world, optical frame
    width: int
    height: int


def object_color(oid: int) -> Tuple[int, int, int]:
    h = hashlib.sha256(f"object-{oid}".encode()).digest()
    return tuple(64 + b % 192 for b in h[:3])


def look_at(eye, target, up=UP) -> np.ndarray:
    """Camera-to-world pose in the optical convention (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
    return pose


def auto_camera(boxes: Sequence[AABB], width: int = 320, height: int = 240,
                direction=(1.0, -1.0, 1.0)) -> CameraSpec:
    """Look at the joint center from twice the bounding radius; the field of view covers the sphere."""
    lo = np.min([b.lo for b in boxes], axis=0)
    hi = np.max([b.hi for b in boxes], axis=0)
    center = (lo + hi) / 2.0
    radius = max(float(np.linalg.norm(hi - lo)) / 2.0, 0.25)
    d = np.asarray(direction, dtype=np.float64)
    eye = center + 2.0 * radius * d / np.linalg.norm(d)
    f = (min(width, height) / 2.0) / np.tan(np.radians(HALF_FOV_DEG))
    return CameraSpec((f, f, width / 2.0, height / 2.0), look_at(eye, center), width, height)


def _splat(img: np.ndarray, zbuf: np.ndarray, uv: np.ndarray, z: np.ndarray, color, radius: int) -> None:
    h, w = zbuf.shape
    ui = np.round(uv[:, 0]).astype(np.int64)
    vi = np.round(uv[:, 1]).astype(np.int64)
    for du in range(-radius, radius + 1):
        for dv in range(-radius, radius + 1):
            if du * du + dv * dv > radius * radius:
                continue
            u, v = ui + du, vi + dv
            ok = (u >= 0) & (u < w) & (v >= 0) & (v < h)
            u, v, zz = u[ok], v[ok], z[ok]
            # nearest point per pixel wins: sort far-to-near so near writes last
            order = np.argsort(-zz, kind="stable")
            u, v, zz = u[order], v[order], zz[order]
            closer = zz < zbuf[v, u]
            u, v, zz = u[closer], v[closer], zz[closer]
            zbuf[v, u] = zz
            img[v, u] = color


def project_box(box: AABB, cam: CameraSpec) -> Optional[np.ndarray]:
    """Pixel coordinates of the 8 corners, or None if any corner is behind the camera."""
    uv, z = project_points(box.corners(), cam.intrinsics, cam.pose)
    if np.any(z <= 1e-6):
        return None
    return uv


def render_candidates(gs: SceneGraph3D, candidate_ids: Sequence[int], camera: Optional[CameraSpec] = None,
                      markers: Optional[Dict[int, int]] = None, width: int = 320, height: int = 240,
                      splat_radius: int = 2, near: float = 0.05) -> np.ndarray:
    """RGB raster (H, W, 3) of the scene's points with numbered candidate boxes."""
    boxes = [gs.nodes[c].aabb for c in candidate_ids]
    if camera is None:
        camera = auto_camera(boxes or [n.aabb for n in gs.nodes.values()] or [AABB([0, 0, 0], [1, 1, 1])],
                             width, height)
    img = np.empty((camera.height, camera.width, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    zbuf = np.full((camera.height, camera.width), np.inf)
    for oid, obj in gs.nodes.items():
        if len(obj.points) == 0:
            continue
        uv, z = project_points(obj.points, camera.intrinsics, camera.pose)
        front = z > near
        if np.any(front):
            _splat(img, zbuf, uv[front], z[front], object_color(oid), splat_radius)
    pil = Image.fromarray(img)
    draw = ImageDraw.Draw(pil)
    markers = markers or {c: i + 1 for i, c in enumerate(candidate_ids)}
    for c in candidate_ids:
        uv = project_box(gs.nodes[c].aabb, camera)
        if uv is None:
            continue
        for a, b in _BOX_EDGES:
            draw.line([tuple(uv[a]), tuple(uv[b])], fill=(255, 255, 0), width=1)
        u0, v0 = uv.min(axis=0)
        draw.rectangle([u0, v0, u0 + 10, v0 + 11], fill=(255, 255, 0))
        draw.text((u0 + 2, v0), str(markers[c]), fill=(0, 0, 0))
    return np.asarray(pil)


def save_png(img: np.ndarray, path: str) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")
