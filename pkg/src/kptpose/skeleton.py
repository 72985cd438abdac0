"""Canonical 21-joint hand skeleton: template, limits, forward kinematics.

Joint order: 0 = wrist, then four joints per finger (thumb, index, middle,
ring, pinky), base to tip.  Bone i connects parent[i+1] -> joint i+1, so the
20 bones are indexed by child joint minus one.  16 joints articulate (wrist
plus the first three joints of each finger); fingertips do not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JOINT_COUNT = 21
BONE_COUNT = 20

PARENTS = np.array([-1,
                    0, 1, 2, 3,     # thumb
                    0, 5, 6, 7,     # index
                    0, 9, 10, 11,   # middle
                    0, 13, 14, 15,  # ring
                    0, 17, 18, 19], # pinky
                   dtype=np.int64)

# wrist + per-finger base/mid/distal joints; tips (4, 8, 12, 16, 20) excluded
ARTICULATED = np.array([0, 1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19],
                       dtype=np.int64)
ARTICULATION_COUNT = 16

# rest bone offsets in mm, right hand, palm facing the camera,
# fingers pointing up in the image (-y), thumb toward -x
_REST_OFFSETS_RIGHT = np.array([
    [-40.0, -35.0, 10.0], [-25.0, -20.0, 5.0], [-18.0, -14.0, 3.0], [-15.0, -12.0, 2.0],
    [-20.0, -85.0, 0.0], [-3.0, -35.0, 0.0], [-2.0, -22.0, 0.0], [-2.0, -18.0, 0.0],
    [0.0, -88.0, 0.0], [0.0, -38.0, 0.0], [0.0, -25.0, 0.0], [0.0, -19.0, 0.0],
    [18.0, -82.0, 0.0], [2.0, -34.0, 0.0], [2.0, -23.0, 0.0], [2.0, -18.0, 0.0],
    [36.0, -75.0, 0.0], [4.0, -28.0, 0.0], [3.0, -18.0, 0.0], [3.0, -15.0, 0.0],
], dtype=np.float64)


def _default_angle_limits():
    lim = np.zeros((ARTICULATION_COUNT, 3, 2))
    lim[0] = [[-np.pi, np.pi]] * 3  # wrist: free
    for f in range(5):
        base = 1 + 3 * f
        lim[base + 0] = [[-1.4, 0.25], [-0.15, 0.15], [-0.35, 0.35]]
        lim[base + 1] = [[-1.6, 0.10], [-0.05, 0.05], [-0.08, 0.08]]
        lim[base + 2] = [[-1.2, 0.10], [-0.05, 0.05], [-0.08, 0.08]]
    return lim


def shape_basis():
    """Fixed 20x10 bone-length basis: l_j(beta) = rest_j * (1 + W[j] . beta).

    Column 0 scales every bone uniformly; columns 1..5 scale one finger each;
    columns 6..8 scale proximal/middle/distal phalanges; column 9 the
    metacarpals.
    """
    w = np.zeros((BONE_COUNT, 10))
    w[:, 0] = 0.10
    for f in range(5):
        w[4 * f:4 * f + 4, 1 + f] = 0.06
        w[4 * f + 1, 6] = 0.05
        w[4 * f + 2, 7] = 0.05
        w[4 * f + 3, 8] = 0.05
        w[4 * f, 9] = 0.05
    return w


@dataclass
class HandSkeletonTemplate:
    """Rest geometry of one hand; `side` is 'right' or 'left'."""

    side: str = "right"
    parent: np.ndarray = field(default_factory=lambda: PARENTS.copy())
    rest_offsets: np.ndarray = field(default_factory=lambda: _REST_OFFSETS_RIGHT.copy())
    joint_angle_limits: np.ndarray = field(default_factory=_default_angle_limits)

    @property
    def joint_count(self):
        return JOINT_COUNT

    @property
    def rest_bone_lengths(self):
        return np.linalg.norm(self.rest_offsets, axis=1)

    @property
    def rest_joints(self):
        return accumulate_offsets(self.rest_offsets, self.parent)

    def mirrored(self):
        off = self.rest_offsets.copy()
        off[:, 0] *= -1.0
        return HandSkeletonTemplate(
            side="left" if self.side == "right" else "right",
            parent=self.parent.copy(),
            rest_offsets=off,
            joint_angle_limits=self.joint_angle_limits.copy())


def right_template():
    return HandSkeletonTemplate()


def left_template():
    return right_template().mirrored()


def accumulate_offsets(offsets, parent=PARENTS):
    """Sum per-bone offsets down the tree; joint 0 lands at the origin."""
    joints = np.zeros((JOINT_COUNT, 3), dtype=offsets.dtype)
    for j in range(1, JOINT_COUNT):
        joints[j] = joints[parent[j]] + offsets[j - 1]
    return joints


def ancestor_matrix(parent=PARENTS):
    """(21, 20) 0/1 matrix A with A @ offsets == accumulate_offsets(offsets)."""
    a = np.zeros((JOINT_COUNT, BONE_COUNT))
    for j in range(1, JOINT_COUNT):
        a[j] = a[parent[j]]
        a[j, j - 1] = 1.0
    return a


def rodrigues(v):
    """Axis-angle 3-vector to rotation matrix; exact identity at zero."""
    v = np.asarray(v, dtype=np.float64)
    t2 = float(v @ v)
    kx, ky, kz = v
    k = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    if t2 < 1e-12:
        # second-order Taylor of sin t / t and (1 - cos t) / t^2
        return np.eye(3) + k * (1.0 - t2 / 6.0) + (k @ k) * (0.5 - t2 / 24.0)
    t = np.sqrt(t2)
    return np.eye(3) + k * (np.sin(t) / t) + (k @ k) * ((1.0 - np.cos(t)) / t2)


def bone_lengths_from_beta(template, beta):
    return template.rest_bone_lengths * (1.0 + shape_basis() @ np.asarray(beta, np.float64))


def forward_kinematics(theta, beta, template):
    """Pose the skeleton: 16 axis-angle joint rotations composed parent to
    child, each bone laid along its rest direction at its beta-scaled length.

    Returns (21, 3) root-relative joint positions in mm.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(ARTICULATION_COUNT, 3)
    lengths = bone_lengths_from_beta(template, beta)
    rest_len = template.rest_bone_lengths
    art_index = {int(j): i for i, j in enumerate(ARTICULATED)}
    rot = [None] * JOINT_COUNT
    rot[0] = rodrigues(theta[0])
    joints = np.zeros((JOINT_COUNT, 3))
    for j in range(1, JOINT_COUNT):
        p = template.parent[j]
        scale = lengths[j - 1] / rest_len[j - 1]
        joints[j] = joints[p] + rot[p] @ (template.rest_offsets[j - 1] * scale)
        if j in art_index:
            rot[j] = rot[p] @ rodrigues(theta[art_index[j]])
        else:
            rot[j] = rot[p]
    return joints


def sample_pose(rng, template, wrist_rotation=True):
    """Draw joint angles uniformly within limits; wrist from a uniform
    random rotation when `wrist_rotation`, else zero."""
    lim = template.joint_angle_limits
    theta = rng.uniform(lim[:, :, 0], lim[:, :, 1])
    if wrist_rotation:
        theta[0] = random_axis_angle(rng)
    else:
        theta[0] = 0.0
    return theta


def matrix_to_axis_angle(r):
    """Inverse of `rodrigues`, stable near 0 and pi."""
    r = np.asarray(r, dtype=np.float64)
    t = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(t)
    if angle < 1e-10:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near pi the skew part vanishes; recover the axis from R + I
        b = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(b), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            for i in range(3):
                if i != k and b[k, i] < 0:
                    axis[i] *= -1.0
        axis /= max(np.linalg.norm(axis), 1e-300)
        return axis * angle
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return axis / (2.0 * np.sin(angle)) * angle


def random_axis_angle(rng):
    """Axis-angle of a uniform random rotation (quaternion method)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    w = min(1.0, max(-1.0, q[0]))
    angle = 2.0 * np.arccos(w)
    s = np.sqrt(max(1e-300, 1.0 - w * w))
    if angle < 1e-9:
        return np.zeros(3)
    return (q[1:] / s) * angle
