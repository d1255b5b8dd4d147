"""Deterministic flat-shaded ray-cast renderer for the 64x64x3 observation.

Every body is a constant-color silhouette resolved with a per-pixel
z-buffer: ground plane, column and boom cylinders, finger capsules, and
oriented boxes.  No lighting or texture, so a frame is a pure function of
(World, CameraSpec) and the frame-difference flow target is well defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from softsense.config import CameraParams
from softsense.simcore import World, forward_kinematics

IMAGE_SIZE = 64

BACKGROUND = (0.88, 0.92, 0.97)
GROUND_COLOR = (0.55, 0.55, 0.55)
COLUMN_COLOR = (0.16, 0.26, 0.75)
BOOM_COLOR = (0.26, 0.38, 0.88)
FINGER_COLOR = (0.10, 0.72, 0.22)
BOX_COLORS = ((0.85, 0.15, 0.10), (0.90, 0.38, 0.12), (0.78, 0.10, 0.34))

# Thin links disappear at 64x64; capsules are drawn no thinner than this.
MIN_VISUAL_RADIUS = 0.02


@dataclass(frozen=True)
class CameraSpec:
    position: np.ndarray   # (3,)
    look_at: np.ndarray    # (3,)
    vertical_fov: float    # rad

    @staticmethod
    def from_params(params: CameraParams) -> "CameraSpec":
        return CameraSpec(position=np.array(params.position, dtype=np.float64),
                          look_at=np.array(params.look_at, dtype=np.float64),
                          vertical_fov=math.radians(params.vertical_fov_deg))

    def __post_init__(self):
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position must differ from look_at")


@njit(cache=True)
def _ray_capsule(ox, oy, oz, dx, dy, dz, ax, ay, az, bx, by, bz, r):
    """Nearest positive hit of a unit ray with a sphere-swept segment."""
    ux, uy, uz = bx - ax, by - ay, bz - az
    uu = ux * ux + uy * uy + uz * uz
    mx, my, mz = ox - ax, oy - ay, oz - az
    best = 1.0e30
    if uu > 1e-18:
        du = (dx * ux + dy * uy + dz * uz) / uu
        mu = (mx * ux + my * uy + mz * uz) / uu
        wx, wy, wz = dx - ux * du, dy - uy * du, dz - uz * du
        qx, qy, qz = mx - ux * mu, my - uy * mu, mz - uz * mu
        a = wx * wx + wy * wy + wz * wz
        b = 2.0 * (qx * wx + qy * wy + qz * wz)
        c = qx * qx + qy * qy + qz * qz - r * r
        if a > 1e-18:
            disc = b * b - 4.0 * a * c
            if disc >= 0.0:
                t = (-b - math.sqrt(disc)) / (2.0 * a)
                if t > 1e-6:
                    s = mu + t * du
                    if 0.0 <= s <= 1.0:
                        best = t
    for cx, cy, cz in ((ax, ay, az), (bx, by, bz)):
        px, py, pz = ox - cx, oy - cy, oz - cz
        b = 2.0 * (px * dx + py * dy + pz * dz)
        c = px * px + py * py + pz * pz - r * r
        disc = b * b - 4.0 * c
        if disc >= 0.0:
            t = (-b - math.sqrt(disc)) / 2.0
            if 1e-6 < t < best:
                best = t
    return best


@njit(cache=True)
def _ray_vertical_cylinder(ox, oy, oz, dx, dy, dz, radius, z_top):
    """Finite solid cylinder standing on the ground, with its top cap."""
    best = 1.0e30
    a = dx * dx + dy * dy
    if a > 1e-18:
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - radius * radius
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            t = (-b - math.sqrt(disc)) / (2.0 * a)
            if t > 1e-6 and 0.0 <= oz + t * dz <= z_top:
                best = t
    if abs(dz) > 1e-18:
        t = (z_top - oz) / dz
        if 1e-6 < t < best:
            hx, hy = ox + t * dx, oy + t * dy
            if hx * hx + hy * hy <= radius * radius:
                best = t
    return best


@njit(cache=True)
def _ray_box(ox, oy, oz, dx, dy, dz, cx, cy, cz, yaw, hx, hy, hz):
    """Slab test against a yaw-rotated box centered at (cx, cy, cz)."""
    cyaw, syaw = math.cos(yaw), math.sin(yaw)
    rox = cyaw * (ox - cx) + syaw * (oy - cy)
    roy = -syaw * (ox - cx) + cyaw * (oy - cy)
    roz = oz - cz
    rdx = cyaw * dx + syaw * dy
    rdy = -syaw * dx + cyaw * dy
    rdz = dz
    tmin, tmax = -1.0e30, 1.0e30
    for o, d, h in ((rox, rdx, hx), (roy, rdy, hy), (roz, rdz, hz)):
        if abs(d) < 1e-18:
            if abs(o) > h:
                return 1.0e30
        else:
            t1 = (-h - o) / d
            t2 = (h - o) / d
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
    if tmax >= tmin and tmax > 1e-6:
        return tmin if tmin > 1e-6 else tmax
    return 1.0e30


@njit(cache=True)
def _render_kernel(origin, right, up, forward, tan_half,
                   joints, finger_radius, column_h, column_r,
                   boom_z, boom_tip, boom_r,
                   box_pose, box_half, colors, out):
    n_links = joints.shape[0] - 1
    n_boxes = box_pose.shape[0]
    size = out.shape[0]
    for row in range(size):
        v = 1.0 - 2.0 * (row + 0.5) / size
        for col in range(size):
            u = 2.0 * (col + 0.5) / size - 1.0
            dx = forward[0] + tan_half * (u * right[0] + v * up[0])
            dy = forward[1] + tan_half * (u * right[1] + v * up[1])
            dz = forward[2] + tan_half * (u * right[2] + v * up[2])
            inv = 1.0 / math.sqrt(dx * dx + dy * dy + dz * dz)
            dx, dy, dz = dx * inv, dy * inv, dz * inv
            ox, oy, oz = origin[0], origin[1], origin[2]

            best = 1.0e30
            cid = 0  # background
            if dz < -1e-18:
                t = -oz / dz
                if t > 1e-6:
                    best = t
                    cid = 1
            t = _ray_vertical_cylinder(ox, oy, oz, dx, dy, dz,
                                       column_r, column_h)
            if t < best:
                best, cid = t, 2
            t = _ray_capsule(ox, oy, oz, dx, dy, dz,
                             0.0, 0.0, boom_z,
                             boom_tip[0], boom_tip[1], boom_tip[2], boom_r)
            if t < best:
                best, cid = t, 3
            for i in range(n_links):
                t = _ray_capsule(ox, oy, oz, dx, dy, dz,
                                 joints[i, 0], joints[i, 1], joints[i, 2],
                                 joints[i + 1, 0], joints[i + 1, 1],
                                 joints[i + 1, 2], finger_radius)
                if t < best:
                    best, cid = t, 4
            for b in range(n_boxes):
                t = _ray_box(ox, oy, oz, dx, dy, dz,
                             box_pose[b, 0], box_pose[b, 1], box_half[b, 2],
                             box_pose[b, 2], box_half[b, 0], box_half[b, 1],
                             box_half[b, 2])
                if t < best:
                    best, cid = t, 5 + b
            out[row, col, 0] = colors[cid, 0]
            out[row, col, 1] = colors[cid, 1]
            out[row, col, 2] = colors[cid, 2]


def render(world: World, cam: CameraSpec | None = None) -> np.ndarray:
    """Rasterize the world into a (64, 64, 3) float32 frame in [0, 1]."""
    if cam is None:
        cam = CameraSpec.from_params(world.sim.camera)
    forward = cam.look_at - cam.position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / norm
    up = np.cross(right, forward)

    frames = forward_kinematics(world.arm, world.finger, world.sim.finger,
                                world.sim)
    geom = world.sim.arm
    n_boxes = len(world.boxes)
    box_pose = np.zeros((n_boxes, 3))
    box_half = np.zeros((n_boxes, 3))
    for i, b in enumerate(world.boxes):
        box_pose[i] = b.pose
        box_half[i] = b.half_extents

    colors = np.zeros((5 + max(n_boxes, 1), 3))
    colors[0] = BACKGROUND
    colors[1] = GROUND_COLOR
    colors[2] = COLUMN_COLOR
    colors[3] = BOOM_COLOR
    colors[4] = FINGER_COLOR
    for i in range(n_boxes):
        colors[5 + i] = BOX_COLORS[i % len(BOX_COLORS)]

    out = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float64)
    _render_kernel(cam.position, right, up, forward,
                   math.tan(cam.vertical_fov / 2.0),
                   frames.joint_positions,
                   max(world.sim.finger.link_radius, MIN_VISUAL_RADIUS),
                   geom.column_height, geom.column_radius,
                   frames.boom_tip[2], frames.boom_tip, geom.boom_radius,
                   box_pose, box_half, colors, out)
    return out.astype(np.float32)


def frame_diff(prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
    """Optical-flow target: elementwise next minus previous frame."""
    prev = np.asarray(prev, dtype=np.float32)
    nxt = np.asarray(nxt, dtype=np.float32)
    if prev.shape != nxt.shape:
        raise ValueError("frame shapes differ")
    return nxt - prev


def frame_to_u8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)


def u8_to_frame(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / 255.0)


def flow_to_u8(flow: np.ndarray) -> np.ndarray:
    """Affine map [-1, 1] -> [0, 255]; zero flow lands on mid-gray."""
    return np.clip(np.rint((np.asarray(flow) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_ppm(path, image_u8: np.ndarray) -> None:
    """Binary P6 export of an (H, W, 3) uint8 image."""
    image_u8 = np.ascontiguousarray(image_u8, dtype=np.uint8)
    if image_u8.ndim != 3 or image_u8.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    h, w = image_u8.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image_u8.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ValueError("not a binary P6 file")
    w, h = (int(tok) for tok in parts[1].split())
    if parts[2] != b"255":
        raise ValueError("expected 8-bit channels")
    data = parts[3][: w * h * 3]
    if len(data) < w * h * 3:
        raise ValueError("truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()
