"""Procedural two-hands-plus-object scenes with full 3D/2D annotations.

Hands are posed by sampling joint angles within limits and placed so every
joint projects inside the frame; an optional box object is posed nearby.
Rendering is deliberately schematic (colored discs, bone segments, a filled
box silhouette) drawn back-to-front, which is enough texture for the
detector to learn from while keeping every label exact.

Conventions: hand index 0 is the right hand, 1 the left.  Camera axes are
x right, y down, z forward; 3D is in millimeters.  Pixel centers sit at
integer coordinates, so a continuous image point p maps to normalized
coordinates (p + 0.5) / size.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import skeleton
from .objpose import symmetry_set

BACKGROUND = np.array([0.14, 0.14, 0.16], dtype=np.float32)
HAND_COLORS = (np.array([0.25, 0.75, 0.35]), np.array([0.85, 0.35, 0.25]))
OBJECT_COLOR = np.array([0.30, 0.45, 0.90])


class GenerationError(RuntimeError):
    """Scene could not be placed inside the frustum within the retry budget."""


@dataclass(frozen=True)
class ObjectModel:
    """Box object: half extents (mm) plus a named discrete symmetry set."""

    name: str
    half_extents: tuple
    symmetry: str = "none"

    @property
    def corners(self):
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
        return signs * np.asarray(self.half_extents, dtype=np.float64)

    @property
    def symmetry_rotations(self):
        return symmetry_set(self.symmetry)

    @property
    def diagonal(self):
        return 2.0 * float(np.linalg.norm(self.half_extents))


DEFAULT_OBJECTS = (
    ObjectModel("carton", (30.0, 42.0, 24.0), "xyz180"),
    ObjectModel("tube", (16.0, 16.0, 52.0), "z180"),
    ObjectModel("dish", (38.0, 38.0, 12.0), "zinf36"),
)


@dataclass
class SceneConfig:
    image_size: int = 64
    hand_mode: str = "inter"          # "single" (right hand) or "inter"
    with_object: bool = True
    objects: tuple = DEFAULT_OBJECTS
    focal_scale: float = 1.6          # f = focal_scale * image_size
    z_range: tuple = (450.0, 750.0)
    shape_scale_range: tuple = (0.85, 1.15)
    frame_margin: float = 2.0
    max_tries: int = 100


@dataclass
class SceneSample:
    """One annotated frame.  Absent hands have zeroed annotations and
    all-False visibility."""

    image: np.ndarray            # (3, H, W) float32 in [0, 1]
    joints3d: np.ndarray         # (2, 21, 3) mm, camera frame
    joints2d: np.ndarray         # (2, 21, 2) px
    visibility: np.ndarray       # (2, 21) bool
    hands_present: np.ndarray    # (2,) bool
    intrinsics: np.ndarray       # (3, 3)
    z_root: np.ndarray           # (2,) mm
    joint_angles: np.ndarray     # (2, 16, 3) axis-angle
    shape_scale: float
    object_present: bool
    object_id: int               # index into the catalog, -1 when absent
    object_half_extents: np.ndarray  # (3,) mm
    object_pose: np.ndarray      # (4, 4) camera frame
    rng_seed: int

    @property
    def interacting(self):
        return bool(self.hands_present[0] and self.hands_present[1])

    def t_lr(self):
        """Left-hand root expressed in the right-hand root frame (mm)."""
        return self.joints3d[1, 0] - self.joints3d[0, 0]


def make_intrinsics(image_size, focal_scale=1.6):
    f = focal_scale * image_size
    c = (image_size - 1) / 2.0
    return np.array([[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]])


def pinhole_project(k, pts):
    pts = np.asarray(pts, dtype=np.float64)
    z = pts[..., 2]
    u = k[0, 0] * pts[..., 0] / z + k[0, 2]
    v = k[1, 1] * pts[..., 1] / z + k[1, 2]
    return np.stack([u, v], axis=-1)


def scale_coords(px, src_size, dst_size):
    """Map continuous pixel coords between resolutions (center-preserving)."""
    return (np.asarray(px, dtype=np.float64) + 0.5) * (dst_size / src_size) - 0.5


def px_to_uv(px, size):
    return (np.asarray(px, dtype=np.float64) + 0.5) / size


def uv_to_px(uv, size):
    return np.asarray(uv, dtype=np.float64) * size - 0.5


# ---------------------------------------------------------------------------
# scene sampling

def _fit_shift(points2d, size, margin):
    """2D shift that brings points into [margin, size-1-margin]^2, or None
    if their span cannot fit."""
    lo = points2d.min(axis=0)
    hi = points2d.max(axis=0)
    if np.any(hi - lo > size - 1 - 2 * margin):
        return None
    shift = np.zeros(2)
    shift = np.where(lo + shift < margin, margin - lo, shift)
    shift = np.where(hi + shift > size - 1 - margin, size - 1 - margin - hi, shift)
    return shift


def _place_in_frame(k, pts3d, size, margin):
    """Translate a 3D point cloud parallel to the image plane so that its
    projection fits in the frame.  Perspective makes the pixel shift depend
    on each point's depth, so the correction iterates.  Returns the shifted
    cloud or None when the projected span cannot fit."""
    pts = pts3d
    for _ in range(8):
        p2d = pinhole_project(k, pts)
        shift = _fit_shift(p2d, size, margin)
        if shift is None:
            return None
        if np.all(shift == 0.0):
            return pts
        z_mean = float(pts[:, 2].mean())
        pts = pts + np.array([shift[0] * z_mean / k[0, 0], shift[1] * z_mean / k[1, 1], 0.0])
    p2d = pinhole_project(k, pts)
    if _fit_shift(p2d, size, margin) is None or np.any(_fit_shift(p2d, size, margin) != 0.0):
        return None
    return pts


def sample_scene(seed, config=None):
    """Deterministic per-seed synthetic scene."""
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    size = config.image_size
    k = make_intrinsics(size, config.focal_scale)
    templates = (skeleton.right_template(), skeleton.left_template())
    present = np.array([True, config.hand_mode == "inter"])

    for _ in range(config.max_tries):
        shape_scale = float(rng.uniform(*config.shape_scale_range))
        joints3d = np.zeros((2, 21, 3))
        joint_angles = np.zeros((2, 16, 3))
        ok = True

        z0 = rng.uniform(*config.z_range)
        px0 = rng.uniform(0.35 * size, 0.65 * size)
        py0 = rng.uniform(0.50 * size, 0.80 * size)
        root0 = np.array([(px0 - k[0, 2]) * z0 / k[0, 0],
                          (py0 - k[1, 2]) * z0 / k[1, 1], z0])
        roots = [root0, None]
        if present[1]:
            side = rng.choice([-1.0, 1.0])
            roots[1] = root0 + np.array([side * rng.uniform(50.0, 170.0),
                                         rng.uniform(-80.0, 80.0),
                                         rng.uniform(-70.0, 70.0)])

        for h in range(2):
            if not present[h]:
                continue
            theta = skeleton.sample_pose(rng, templates[h])
            rel = skeleton.forward_kinematics(theta, np.zeros(10), templates[h]) * shape_scale
            placed = _place_in_frame(k, rel + roots[h], size, config.frame_margin)
            if placed is None or np.any(placed[:, 2] < 150.0):
                ok = False
                break
            joints3d[h] = placed
            joint_angles[h] = theta
        if not ok:
            continue

        object_id = -1
        object_pose = np.eye(4)
        half_extents = np.zeros(3)
        if config.with_object and config.objects:
            object_id = int(rng.integers(0, len(config.objects)))
            model = config.objects[object_id]
            half_extents = np.asarray(model.half_extents, dtype=np.float64)
            rot = skeleton.rodrigues(skeleton.random_axis_angle(rng))
            anchor = np.mean([joints3d[h, 0] for h in range(2) if present[h]], axis=0)
            center = anchor + rng.uniform((-60, -60, -90), (60, 60, 50))
            world = model.corners @ rot.T + center
            placed = _place_in_frame(k, world, size, config.frame_margin)
            if placed is None or np.any(placed[:, 2] < 150.0):
                continue
            center = center + (placed[0] - world[0])
            object_pose = np.eye(4)
            object_pose[:3, :3] = rot
            object_pose[:3, 3] = center

        joints2d = np.zeros((2, 21, 2))
        for h in range(2):
            if present[h]:
                joints2d[h] = pinhole_project(k, joints3d[h])

        visibility = present[:, None] & np.ones((2, 21), dtype=bool)
        if object_id >= 0:
            hull = _convex_hull(pinhole_project(k, _object_corners_world(object_pose, half_extents)))
            obj_z = object_pose[2, 3]
            for h in range(2):
                if not present[h]:
                    continue
                inside = _points_in_hull(joints2d[h], hull)
                occluded = inside & (joints3d[h][:, 2] > obj_z)
                visibility[h] &= ~occluded

        sample = SceneSample(
            image=np.zeros((3, size, size), np.float32),
            joints3d=joints3d, joints2d=joints2d,
            visibility=visibility, hands_present=present.copy(),
            intrinsics=k, z_root=joints3d[:, 0, 2].copy(),
            joint_angles=joint_angles, shape_scale=shape_scale,
            object_present=object_id >= 0, object_id=object_id,
            object_half_extents=half_extents, object_pose=object_pose,
            rng_seed=int(seed))
        sample.image = render_image(sample)
        return sample

    raise GenerationError(
        f"could not place scene inside a {size}x{size} frame after {config.max_tries} tries")


def _object_corners_world(pose, half_extents):
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
    corners = signs * half_extents
    return corners @ pose[:3, :3].T + pose[:3, 3]


# ---------------------------------------------------------------------------
# rasterization

def _convex_hull(points):
    """Andrew's monotone chain; returns CCW hull vertices."""
    pts = sorted(map(tuple, np.asarray(points, dtype=np.float64)))
    if len(pts) <= 2:
        return np.asarray(pts)

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.asarray(lower[:-1] + upper[:-1])


def _points_in_hull(points, hull):
    """Boolean inside-test for points against a CCW convex hull."""
    if len(hull) < 3:
        return np.zeros(len(points), dtype=bool)
    inside = np.ones(len(points), dtype=bool)
    for i in range(len(hull)):
        a, b = hull[i], hull[(i + 1) % len(hull)]
        cross = (b[0] - a[0]) * (points[:, 1] - a[1]) - (b[1] - a[1]) * (points[:, 0] - a[0])
        inside &= cross >= 0
    return inside


def _hull_inward_distance(xs, ys, hull):
    """Min signed distance to the hull edges (positive inside), vectorized
    over a pixel grid."""
    d = np.full(xs.shape, np.inf)
    for i in range(len(hull)):
        a, b = hull[i], hull[(i + 1) % len(hull)]
        e = np.array([b[0] - a[0], b[1] - a[1]])
        n = np.linalg.norm(e)
        if n < 1e-12:
            continue
        d = np.minimum(d, ((xs - a[0]) * -e[1] + (ys - a[1]) * e[0]) / n)
    return d


def _paint(img, ys, xs, cov, color):
    px = img[:, ys, xs]
    img[:, ys, xs] = px * (1.0 - cov) + color[:, None, None] * cov


def _grid(h, w, x0, x1, y0, y1):
    x0, x1 = max(0, int(np.floor(x0))), min(w - 1, int(np.ceil(x1)))
    y0, y1 = max(0, int(np.floor(y0))), min(h - 1, int(np.ceil(y1)))
    if x0 > x1 or y0 > y1:
        return None
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    return ys, xs


def _draw_disc(img, center, radius, color):
    h, w = img.shape[1:]
    g = _grid(h, w, center[0] - radius - 1, center[0] + radius + 1,
              center[1] - radius - 1, center[1] + radius + 1)
    if g is None:
        return
    ys, xs = g
    dist = np.hypot(xs - center[0], ys - center[1])
    cov = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    _paint(img, ys, xs, cov, color)


def _draw_segment(img, p0, p1, width, color):
    h, w = img.shape[1:]
    r = width / 2.0
    g = _grid(h, w, min(p0[0], p1[0]) - r - 1, max(p0[0], p1[0]) + r + 1,
              min(p0[1], p1[1]) - r - 1, max(p0[1], p1[1]) + r + 1)
    if g is None:
        return
    ys, xs = g
    d = np.array(p1, dtype=np.float64) - p0
    len2 = float(d @ d)
    if len2 < 1e-12:
        t = np.zeros_like(xs, dtype=np.float64)
    else:
        t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / len2, 0.0, 1.0)
    dist = np.hypot(xs - (p0[0] + t * d[0]), ys - (p0[1] + t * d[1]))
    cov = np.clip(r + 0.5 - dist, 0.0, 1.0)
    _paint(img, ys, xs, cov, color)


def _draw_polygon(img, hull, color):
    if len(hull) < 3:
        return
    h, w = img.shape[1:]
    g = _grid(h, w, hull[:, 0].min() - 1, hull[:, 0].max() + 1,
              hull[:, 1].min() - 1, hull[:, 1].max() + 1)
    if g is None:
        return
    ys, xs = g
    cov = np.clip(0.5 + _hull_inward_distance(xs, ys, hull), 0.0, 1.0)
    _paint(img, ys, xs, cov, color)


def _joint_color(hand, joint):
    return (HAND_COLORS[hand] * (0.55 + 0.45 * joint / 20.0)).astype(np.float32)


def render_image(sample):
    """Schematic render: bone segments and joint discs per hand, a filled
    box silhouette for the object, composited far to near."""
    size = sample.image.shape[-1]
    img = np.ones((3, size, size), np.float32) * BACKGROUND[:, None, None]
    disc_r = 0.020 * size
    bone_w = 0.018 * size
    drawables = []
    for h in range(2):
        if not sample.hands_present[h]:
            continue
        for j in range(1, 21):
            p = skeleton.PARENTS[j]
            depth = 0.5 * (sample.joints3d[h, j, 2] + sample.joints3d[h, p, 2])
            drawables.append((depth, "segment",
                              (sample.joints2d[h, p], sample.joints2d[h, j], bone_w,
                               _joint_color(h, j))))
        for j in range(21):
            drawables.append((sample.joints3d[h, j, 2], "disc",
                              (sample.joints2d[h, j], disc_r, _joint_color(h, j))))
    if sample.object_present:
        corners = _object_corners_world(sample.object_pose, sample.object_half_extents)
        hull = _convex_hull(pinhole_project(sample.intrinsics, corners))
        drawables.append((float(sample.object_pose[2, 3]), "polygon",
                          (hull, OBJECT_COLOR.astype(np.float32))))

    for _, kind, args in sorted(drawables, key=lambda d: -d[0]):
        if kind == "disc":
            _draw_disc(img, *args)
        elif kind == "segment":
            _draw_segment(img, *args)
        else:
            _draw_polygon(img, *args)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# supervision targets

def gaussian_heatmap(joints_px, visibility, sigma, shape):
    """Max-combined Gaussian peaks: value 1.0 exactly at a joint's pixel.

    `joints_px` are continuous coordinates in the target map's pixel units
    (pixel centers at integers).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    h, w = shape
    out = np.zeros((h, w))
    joints_px = np.asarray(joints_px, dtype=np.float64).reshape(-1, 2)
    visibility = np.asarray(visibility, dtype=bool).reshape(-1)
    ys, xs = np.mgrid[0:h, 0:w]
    for (jx, jy), vis in zip(joints_px, visibility):
        if not vis:
            continue
        g = np.exp(-((xs - jx) ** 2 + (ys - jy) ** 2) / (2.0 * sigma * sigma))
        np.maximum(out, g, out=out)
    return out[None].astype(np.float32)


def object_segmentation_mask(sample, resolution):
    """Binary object silhouette at `resolution`, with nearer hand elements
    cut out; all zeros when no object or the object sits behind the camera."""
    h = w = resolution
    if not sample.object_present:
        return np.zeros((1, h, w), np.float32)
    corners = _object_corners_world(sample.object_pose, sample.object_half_extents)
    if np.any(corners[:, 2] <= 1e-6):
        return np.zeros((1, h, w), np.float32)
    size = sample.image.shape[-1]
    hull_img = _convex_hull(pinhole_project(sample.intrinsics, corners))
    hull = scale_coords(hull_img, size, resolution)
    ys, xs = np.mgrid[0:h, 0:w]
    mask = _hull_inward_distance(xs.astype(np.float64), ys.astype(np.float64), hull) > 0

    obj_z = sample.object_pose[2, 3]
    factor = resolution / size
    disc_r = 0.020 * size * factor
    bone_r = 0.009 * size * factor
    for hd in range(2):
        if not sample.hands_present[hd]:
            continue
        j2 = scale_coords(sample.joints2d[hd], size, resolution)
        for j in range(21):
            if sample.joints3d[hd, j, 2] < obj_z:
                mask &= np.hypot(xs - j2[j, 0], ys - j2[j, 1]) > disc_r
        for j in range(1, 21):
            p = skeleton.PARENTS[j]
            depth = 0.5 * (sample.joints3d[hd, j, 2] + sample.joints3d[hd, p, 2])
            if depth < obj_z:
                d = j2[j] - j2[p]
                len2 = float(d @ d)
                if len2 < 1e-12:
                    continue
                t = np.clip(((xs - j2[p, 0]) * d[0] + (ys - j2[p, 1]) * d[1]) / len2, 0, 1)
                dist = np.hypot(xs - (j2[p, 0] + t * d[0]), ys - (j2[p, 1] + t * d[1]))
                mask &= dist > bone_r
    return mask[None].astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation

def _resample_image(image, inverse_map):
    """Bilinear resample: output pixel (y, x) reads the input at
    inverse_map(x, y); outside the frame blends to the background."""
    c, h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx, sy = inverse_map(xs.astype(np.float64), ys.astype(np.float64))
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    ax = sx - x0
    ay = sy - y0
    out = np.zeros_like(image)
    for dy in (0, 1):
        for dx in (0, 1):
            wgt = (ax if dx else 1 - ax) * (ay if dy else 1 - ay)
            xi = np.clip(x0 + dx, 0, w - 1)
            yi = np.clip(y0 + dy, 0, h - 1)
            valid = (x0 + dx >= 0) & (x0 + dx < w) & (y0 + dy >= 0) & (y0 + dy < h)
            sampled = np.where(valid[None], image[:, yi, xi], BACKGROUND[:, None, None])
            out += wgt[None] * sampled
    return out.astype(np.float32)


def _mirror_axis_angle(theta):
    out = theta.copy()
    out[..., 1] *= -1.0
    out[..., 2] *= -1.0
    return out


def augment(sample, kind, magnitude=None, seed=0):
    """Consistently transform image and annotations.

    rotate: in-plane rotation about the image center, `magnitude` degrees
    (drawn from +/-30 when None).  scale: zoom about the center by
    `magnitude` (0.8..1.2 when None); intrinsics absorb the zoom so 3D is
    untouched.  mirror: horizontal flip, swapping the hand labels.
    """
    rng = np.random.default_rng(seed)
    size = sample.image.shape[-1]
    k = sample.intrinsics

    if kind == "rotate":
        ang = np.deg2rad(magnitude if magnitude is not None else rng.uniform(-30.0, 30.0))
        rz = np.array([[np.cos(ang), -np.sin(ang), 0.0],
                       [np.sin(ang), np.cos(ang), 0.0],
                       [0.0, 0.0, 1.0]])
        joints3d = sample.joints3d @ rz.T
        pose = sample.object_pose.copy()
        pose[:3, :3] = rz @ pose[:3, :3]
        pose[:3, 3] = rz @ pose[:3, 3]
        angles = sample.joint_angles.copy()
        for h in range(2):
            if sample.hands_present[h]:
                angles[h, 0] = skeleton.matrix_to_axis_angle(
                    rz @ skeleton.rodrigues(sample.joint_angles[h, 0]))
        cx, cy = k[0, 2], k[1, 2]
        c, s = np.cos(ang), np.sin(ang)

        def inv(xs, ys):
            dx, dy = xs - cx, ys - cy
            return cx + c * dx + s * dy, cy - s * dx + c * dy

        out = replace(sample, image=_resample_image(sample.image, inv),
                      joints3d=joints3d, joint_angles=angles, object_pose=pose)

    elif kind == "scale":
        factor = float(magnitude if magnitude is not None else rng.uniform(0.8, 1.2))
        cx, cy = k[0, 2], k[1, 2]
        k2 = k.copy()
        k2[0, 0] *= factor
        k2[1, 1] *= factor
        k2[0, 2] = factor * cx + (1 - factor) * cx
        k2[1, 2] = factor * cy + (1 - factor) * cy

        def inv(xs, ys):
            return (xs - cx) / factor + cx, (ys - cy) / factor + cy

        out = replace(sample, image=_resample_image(sample.image, inv), intrinsics=k2)

    elif kind == "mirror":
        m = np.diag([-1.0, 1.0, 1.0])
        joints3d = (sample.joints3d @ m)[::-1].copy()
        angles = _mirror_axis_angle(sample.joint_angles)[::-1].copy()
        pose = sample.object_pose.copy()
        pose[:3, :3] = m @ pose[:3, :3] @ m
        pose[:3, 3] = m @ pose[:3, 3]
        out = replace(sample,
                      image=sample.image[:, :, ::-1].copy(),
                      joints3d=joints3d,
                      visibility=sample.visibility[::-1].copy(),
                      hands_present=sample.hands_present[::-1].copy(),
                      z_root=sample.z_root[::-1].copy(),
                      joint_angles=angles,
                      object_pose=pose)
    else:
        raise ValueError(f"unknown augmentation kind {kind!r}")

    joints2d = np.zeros_like(sample.joints2d)
    for h in range(2):
        if out.hands_present[h]:
            joints2d[h] = pinhole_project(out.intrinsics, out.joints3d[h])
    out.joints2d = joints2d
    out.z_root = out.joints3d[:, 0, 2] * out.hands_present
    return out


# ---------------------------------------------------------------------------
# dataset file format

MAGIC = b"KPF1"
FORMAT_VERSION = 1


class DatasetFormatError(Exception):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    def __init__(self, found, expected):
        super().__init__(f"dataset format version {found}, expected {expected}")
        self.found = found
        self.expected = expected


class TruncatedDatasetError(DatasetFormatError):
    pass


def _record_bytes(s):
    head = struct.pack("<qHH2BBhd", int(s.rng_seed),
                       s.image.shape[1], s.image.shape[2],
                       int(s.hands_present[0]), int(s.hands_present[1]),
                       int(s.object_present), int(s.object_id),
                       float(s.shape_scale))
    arrays = [
        np.ascontiguousarray(s.image, "<f4"),
        np.ascontiguousarray(s.joints3d, "<f8"),
        np.ascontiguousarray(s.joints2d, "<f8"),
        np.ascontiguousarray(s.visibility, "u1"),
        np.ascontiguousarray(s.intrinsics, "<f8"),
        np.ascontiguousarray(s.z_root, "<f8"),
        np.ascontiguousarray(s.joint_angles, "<f8"),
        np.ascontiguousarray(s.object_half_extents, "<f8"),
        np.ascontiguousarray(s.object_pose, "<f8"),
    ]
    return head + b"".join(a.tobytes() for a in arrays)


def write_dataset(path, samples):
    """Write samples to a little-endian binary file; bit-exact round trip."""
    samples = list(samples)
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(samples)))
        for s in samples:
            fh.write(_record_bytes(s))


def _take(buf, offset, count, what):
    if offset + count > len(buf):
        raise TruncatedDatasetError(f"file ends inside {what}")
    return buf[offset:offset + count], offset + count


def read_dataset(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    head, off = _take(buf, 0, 4, "magic")
    if head != MAGIC:
        raise BadMagicError(f"bad magic {head!r}, expected {MAGIC!r}")
    vc, off = _take(buf, off, 6, "header")
    version, count = struct.unpack("<HI", vc)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version, FORMAT_VERSION)
    samples = []
    for i in range(count):
        rec, off = _take(buf, off, struct.calcsize("<qHH2BBhd"), f"record {i} header")
        seed, h, w, pr, pl, obj, oid, shape_scale = struct.unpack("<qHH2BBhd", rec)
        holder = [off]

        def arr(shape, dt, name):
            n = int(np.prod(shape)) * np.dtype(dt).itemsize
            raw, holder[0] = _take(buf, holder[0], n, f"record {i} {name}")
            return np.frombuffer(raw, dtype=dt).reshape(shape).copy()

        image = arr((3, h, w), "<f4", "image")
        joints3d = arr((2, 21, 3), "<f8", "joints3d")
        joints2d = arr((2, 21, 2), "<f8", "joints2d")
        visibility = arr((2, 21), "u1", "visibility").astype(bool)
        intrinsics = arr((3, 3), "<f8", "intrinsics")
        z_root = arr((2,), "<f8", "z_root")
        joint_angles = arr((2, 16, 3), "<f8", "joint_angles")
        half_extents = arr((3,), "<f8", "object_half_extents")
        object_pose = arr((4, 4), "<f8", "object_pose")
        off = holder[0]
        samples.append(SceneSample(
            image=image, joints3d=joints3d, joints2d=joints2d,
            visibility=visibility,
            hands_present=np.array([bool(pr), bool(pl)]),
            intrinsics=intrinsics, z_root=z_root,
            joint_angles=joint_angles, shape_scale=shape_scale,
            object_present=bool(obj), object_id=int(oid),
            object_half_extents=half_extents, object_pose=object_pose,
            rng_seed=int(seed)))
    return samples


def samples_equal(a, b):
    """Bitwise equality of every field (used by round-trip tests)."""
    return (np.array_equal(a.image, b.image)
            and np.array_equal(a.joints3d, b.joints3d)
            and np.array_equal(a.joints2d, b.joints2d)
            and np.array_equal(a.visibility, b.visibility)
            and np.array_equal(a.hands_present, b.hands_present)
            and np.array_equal(a.intrinsics, b.intrinsics)
            and np.array_equal(a.z_root, b.z_root)
            and np.array_equal(a.joint_angles, b.joint_angles)
            and a.shape_scale == b.shape_scale
            and a.object_present == b.object_present
            and a.object_id == b.object_id
            and np.array_equal(a.object_half_extents, b.object_half_extents)
            and np.array_equal(a.object_pose, b.object_pose)
            and a.rng_seed == b.rng_seed)
