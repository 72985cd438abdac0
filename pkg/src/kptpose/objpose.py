"""Object rotation/translation outputs and the symmetry-aware corner loss.

Rotations are predicted as the first two columns of a rotation matrix and
orthogonalized by Gram-Schmidt.  The corner loss and MSSD both minimize over
a discrete symmetry set that is closed under composition, so a pose that
differs from ground truth by any set member scores exactly zero.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class DegenerateRotationError(ValueError):
    """6D rotation input whose Gram-Schmidt step is undefined."""


def rot6d_to_matrix_np(r6):
    """Gram-Schmidt two 3-vectors into a proper rotation (numpy)."""
    r6 = np.asarray(r6, dtype=np.float64).reshape(6)
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-8:
        raise DegenerateRotationError(f"first 6D column has norm {n1:.2e}")
    b1 = a1 / n1
    resid = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(resid)
    if n2 < 1e-8:
        raise DegenerateRotationError(f"6D columns are parallel (residual norm {n2:.2e})")
    b2 = resid / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def _norm3(v):
    return T.sqrt(T.tsum(T.mul(v, v)))


def rot6d_to_matrix(r6):
    """Differentiable Gram-Schmidt; returns a (3, 3) Tensor with columns
    (b1, b2, b1 x b2)."""
    if not isinstance(r6, T.Tensor):
        return T.const(rot6d_to_matrix_np(r6))
    if r6.data.size != 6:
        raise T.ShapeError(f"rot6d_to_matrix wants 6 values, got shape {r6.data.shape}")
    flat = T.reshape(r6, (6,))
    a1 = T.narrow(flat, 0, 0, 3)
    a2 = T.narrow(flat, 0, 3, 3)
    n1 = _norm3(a1)
    if float(n1.data) < 1e-8:
        raise DegenerateRotationError(f"first 6D column has norm {float(n1.data):.2e}")
    b1 = T.div(a1, n1)
    dot = T.tsum(T.mul(b1, a2))
    resid = T.sub(a2, T.mul(b1, dot))
    n2 = _norm3(resid)
    if float(n2.data) < 1e-8:
        raise DegenerateRotationError(f"6D columns are parallel (residual norm {float(n2.data):.2e})")
    b2 = T.div(resid, n2)
    b3 = _cross(b1, b2)
    cols = T.concat([T.reshape(b, (3, 1)) for b in (b1, b2, b3)], axis=1)
    return cols


def _cross(a, b):
    ax, ay, az = (T.narrow(a, 0, i, 1) for i in range(3))
    bx, by, bz = (T.narrow(b, 0, i, 1) for i in range(3))
    return T.concat([
        T.sub(T.mul(ay, bz), T.mul(az, by)),
        T.sub(T.mul(az, bx), T.mul(ax, bz)),
        T.sub(T.mul(ax, by), T.mul(ay, bx)),
    ], axis=0)


IDENTITY_BIAS_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=np.float32)

TRANSLATION_SCALE = 100.0  # mm per raw unit on the translation query head


class ObjectPoseOutput:
    """Decoded object branch: 6D rotation values and a translation (mm)
    expressed in the right-hand-root frame (camera-aligned axes)."""

    def __init__(self, rotation6d, translation_mm):
        self.rotation6d = rotation6d
        self.translation_mm = translation_mm

    def rotation_matrix(self):
        return rot6d_to_matrix(self.rotation6d)

    def pose_numpy(self):
        rot = rot6d_to_matrix_np(self.rotation6d.data if isinstance(self.rotation6d, T.Tensor)
                                 else self.rotation6d)
        t = self.translation_mm.data if isinstance(self.translation_mm, T.Tensor) \
            else self.translation_mm
        return pose_matrix(rot, np.asarray(t, dtype=np.float64))


def object_branch_outputs(raw):
    """Interpret decoder raw outputs: the rotation query emits 6 floats, the
    translation query 3 (scaled to mm)."""
    if "obj_rot" not in raw or "obj_trans" not in raw:
        raise KeyError("decoder raw outputs carry no object queries")
    return ObjectPoseOutput(raw["obj_rot"], T.mul(raw["obj_trans"], TRANSLATION_SCALE))


# ---------------------------------------------------------------------------
# symmetry sets

def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def close_rotation_set(generators, tol=1e-6, max_size=256):
    """Close a set of rotations under composition (identity always included)."""
    members = [np.eye(3)]

    def known(r):
        return any(np.max(np.abs(r - m)) < tol for m in members)

    frontier = [np.asarray(g, dtype=np.float64) for g in generators]
    while frontier:
        r = frontier.pop()
        if known(r):
            continue
        members.append(r)
        if len(members) > max_size:
            raise ValueError("symmetry closure exceeded max size; generators do not form a small group")
        frontier.extend(r @ m for m in members)
        frontier.extend(m @ r for m in members)
    return members


def symmetry_set(kind):
    """Named discrete symmetry sets, already closed.

    "none"    -> {I}
    "z180"    -> half-turn about z
    "xyz180"  -> half-turns about all three axes (4-element group)
    "zinf36"  -> continuous z symmetry discretized to 36 steps
    """
    if kind == "none":
        return [np.eye(3)]
    if kind == "z180":
        return close_rotation_set([rot_z(np.pi)])
    if kind == "xyz180":
        return close_rotation_set([rot_x(np.pi), rot_y(np.pi), rot_z(np.pi)])
    if kind == "zinf36":
        return close_rotation_set([rot_z(2 * np.pi / 36)])
    raise ValueError(f"unknown symmetry kind {kind!r}")


# ---------------------------------------------------------------------------
# losses / metrics

def _as_rt(pose):
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError(f"expected a 4x4 rigid transform, got {pose.shape}")
    return pose[:3, :3], pose[:3, 3]


def symmetry_corner_loss(pred_pose, gt_pose, corners, sym_set, unit_scale=1.0):
    """Mean squared corner distance under the best symmetry member.

    `pred_pose` is either a 4x4 rigid transform or a ((3,3) rotation,
    (3,) translation) pair; Tensor entries keep the loss differentiable.
    `unit_scale` rescales corners and translations first (the trainer runs
    this on meters, 1e-3, to keep the term comparable with the others).
    Ties pick the lowest set index; the gradient follows the selected
    member.
    """
    if not sym_set:
        raise ValueError("symmetry set must be non-empty")
    corners = np.asarray(corners, dtype=np.float64)
    gr, gt = _as_rt(gt_pose)
    if isinstance(pred_pose, tuple):
        pred_r, pred_t = pred_pose
    else:
        pred_r, pred_t = _as_rt(pred_pose)
    pr = pred_r if isinstance(pred_r, T.Tensor) else T.const(np.asarray(pred_r, np.float64))
    pt = pred_t if isinstance(pred_t, T.Tensor) else T.const(np.asarray(pred_t, np.float64))
    pred_pts = T.add(T.matmul(T.const(corners * unit_scale), T.transpose(pr)),
                     T.reshape(T.mul(pt, unit_scale), (1, 3)))
    best = None
    best_val = np.inf
    for rot in sym_set:
        target = (corners * unit_scale) @ (gr @ rot).T + gt * unit_scale
        diff = T.sub(pred_pts, T.const(target))
        loss = T.mean(T.mul(diff, diff))  # mean over 8 corners x 3 coords
        loss = T.mul(loss, 3.0)  # per-corner squared distance, averaged over corners
        if float(loss.data) < best_val:
            best_val = float(loss.data)
            best = loss
    return best


def mssd(pred_pose, gt_pose, corners, sym_set):
    """Maximum symmetry-aware corner distance in mm: min over the symmetry
    set of the worst corner displacement."""
    if not sym_set:
        raise ValueError("symmetry set must be non-empty")
    corners = np.asarray(corners, dtype=np.float64)
    pr, pt = _as_rt(pred_pose)
    gr, gt = _as_rt(gt_pose)
    pred_pts = corners @ pr.T + pt
    best = np.inf
    for rot in sym_set:
        target = corners @ (gr @ rot).T + gt
        worst = float(np.max(np.linalg.norm(pred_pts - target, axis=1)))
        best = min(best, worst)
    return best


def pose_matrix(r, t):
    out = np.eye(4)
    out[:3, :3] = np.asarray(r, dtype=np.float64)
    out[:3, 3] = np.asarray(t, dtype=np.float64).reshape(3)
    return out
