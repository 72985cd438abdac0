"""Hand pose representations: joint vectors, 2.5D, and joint angles.

Each representation interprets the decoder's raw per-query outputs,
supplies matching ground truth from a scene sample, and scores an L1 loss
(three terms, summed unweighted; every term is a mean over its elements).
Units: millimeters for 3D, heatmap pixels for 2D.

Raw regression outputs are unit-free; fixed per-quantity scales map them
to physical ranges (e.g. a joint-vector coordinate is raw * 50 mm) so that
Adam-sized steps can cover the target range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import skeleton
from . import tensor as T
from .synthgen import scale_coords

V_SCALE = 50.0        # mm per raw unit, parent-relative joint vectors
T_SCALE = 100.0       # mm, inter-hand translation
DZ_SCALE = 50.0       # mm, parent-relative depths
THETA_SCALE = 1.0     # rad
WEAK_S0 = 0.08        # base weak-camera scale (px/mm); s_c = S0 * exp(raw)


@dataclass(frozen=True)
class KinematicTree:
    parent: np.ndarray

    @property
    def accumulation(self):
        return skeleton.ancestor_matrix(self.parent)


HAND_TREE = KinematicTree(skeleton.PARENTS)


@dataclass
class RepSpec:
    """Decoder-facing description of one representation."""

    name: str
    joints_per_hand: int
    joint_dim: int
    extra_dim: int


REPRESENTATIONS = {
    "jv": RepSpec("jv", joints_per_hand=20, joint_dim=3, extra_dim=6),
    "25d": RepSpec("25d", joints_per_hand=21, joint_dim=3, extra_dim=3),
    "angles": RepSpec("angles", joints_per_hand=16, joint_dim=3, extra_dim=16),
}


# ---------------------------------------------------------------------------
# numpy reference operations

def accumulate_joint_vectors(v, tree=HAND_TREE):
    """Root-relative joints from per-bone vectors: joint[j] = joint[p(j)] + V_j."""
    if isinstance(v, T.Tensor):
        return T.matmul(T.const(tree.accumulation.astype(v.data.dtype)), v)
    return tree.accumulation @ np.asarray(v, dtype=np.float64)


def diff_to_vectors(joints, tree=HAND_TREE):
    """Per-bone vectors V_j = J(j) - J(p(j)); exact inverse of accumulation."""
    joints = np.asarray(joints, dtype=np.float64)
    return joints[1:] - joints[tree.parent[1:]]


def accumulate_depths(dzp, tree=HAND_TREE):
    """Root-relative depth per joint from parent-relative depths (root 0)."""
    if isinstance(dzp, T.Tensor):
        return T.matmul(T.const(tree.accumulation.astype(dzp.data.dtype)),
                        T.reshape(dzp, (20, 1)))
    return tree.accumulation @ np.asarray(dzp, dtype=np.float64)


def reconstruct_25d(j2d, dzp, z_root, k, tree=HAND_TREE):
    """Back-project 2D joints given parent-relative depths and root depth.

    `j2d` is (21, 2) in the pixel units of `k`.  Depth per joint is
    z_root plus the tree-accumulated parent-relative depths; each joint is
    K^-1 . z . [x, y, 1].
    """
    if z_root <= 0:
        raise ValueError(f"z_root must be > 0, got {z_root}")
    k = np.asarray(k, dtype=np.float64)
    if abs(np.linalg.det(k)) < 1e-12:
        raise ValueError("singular intrinsics matrix")
    j2d = np.asarray(j2d, dtype=np.float64).reshape(21, 2)
    z = z_root + accumulate_depths(dzp, tree).reshape(21)
    homo = np.concatenate([j2d, np.ones((21, 1))], axis=1)
    return (np.linalg.inv(k) @ (homo * z[:, None]).T).T


def weak_project(points, s_c, t_c):
    """m = s_c * orthographic(M) + t_c."""
    if isinstance(points, T.Tensor):
        xy = T.narrow(points, 1, 0, 2)
        return T.add(T.mul(xy, T.reshape(s_c, (1, 1))), T.reshape(t_c, (1, 2)))
    pts = np.asarray(points, dtype=np.float64)
    return float(s_c) * pts[..., :2] + np.asarray(t_c, dtype=np.float64)


def apply_left_translation(left_joints_rootrel, t_lr):
    """Shift root-relative left-hand joints into the right-root frame."""
    if isinstance(left_joints_rootrel, T.Tensor) or isinstance(t_lr, T.Tensor):
        return T.add(left_joints_rootrel, T.reshape(t_lr, (1, 3)))
    return np.asarray(left_joints_rootrel, dtype=np.float64) + np.asarray(t_lr, np.float64)


# ---------------------------------------------------------------------------
# differentiable forward kinematics

def _skew(v):
    x = T.narrow(v, 0, 0, 1)
    y = T.narrow(v, 0, 1, 1)
    z = T.narrow(v, 0, 2, 1)
    zero = T.const(np.zeros(1, v.data.dtype))
    rows = [T.concat([zero, T.neg(z), y], axis=0),
            T.concat([z, zero, T.neg(x)], axis=0),
            T.concat([T.neg(y), x, zero], axis=0)]
    return T.stack_rows(rows)


def rodrigues_tensor(v):
    """Differentiable axis-angle to rotation; series form near zero keeps
    the gradient finite when the network predicts an identity rotation."""
    t2 = T.tsum(T.mul(v, v))
    k = _skew(v)
    k2 = T.matmul(k, k)
    eye = T.const(np.eye(3, dtype=v.data.dtype))
    if float(t2.data) < 1e-6:
        a = T.sub(T.const(np.ones(())), T.mul(t2, 1.0 / 6.0))
        b = T.sub(T.const(np.full((), 0.5)), T.mul(t2, 1.0 / 24.0))
    else:
        t = T.sqrt(t2)
        a = T.div(T.sin(t), t)
        b = T.div(T.sub(T.const(np.ones(())), T.cos(t)), t2)
    return T.add(eye, T.add(T.mul(k, T.reshape(a, ())), T.mul(k2, T.reshape(b, ()))))


def forward_kinematics(theta, beta, template, tree=HAND_TREE):
    """Pose a hand from 16 axis-angle rotations and a 10-D shape vector.

    Works on numpy arrays (evaluation) or Tensors (training); Tensor inputs
    produce a differentiable (21, 3) output.
    """
    if not isinstance(theta, T.Tensor) and not isinstance(beta, T.Tensor):
        return skeleton.forward_kinematics(theta, beta, template)
    theta = theta if isinstance(theta, T.Tensor) else T.const(np.asarray(theta, np.float32))
    beta = beta if isinstance(beta, T.Tensor) else T.const(np.asarray(beta, np.float32))
    dt = theta.data.dtype
    basis = skeleton.shape_basis().astype(dt)
    scale = T.add(T.const(np.ones((20, 1), dt)),
                  T.matmul(T.const(basis), T.reshape(beta, (10, 1))))
    art_index = {int(j): i for i, j in enumerate(skeleton.ARTICULATED)}
    rot = [None] * 21
    rot[0] = rodrigues_tensor(T.reshape(T.narrow(theta, 0, 0, 1), (3,)))
    joints = [T.const(np.zeros((1, 3), dt))]
    for j in range(1, 21):
        p = tree.parent[j]
        rest = template.rest_offsets[j - 1].astype(dt).reshape(3, 1)
        off = T.mul(T.const(rest), T.reshape(T.narrow(scale, 0, j - 1, 1), (1, 1)))
        step = T.transpose(T.matmul(rot[p], off))
        joints.append(T.add(joints[p], step))
        if j in art_index:
            local = rodrigues_tensor(T.reshape(T.narrow(theta, 0, art_index[j], 1), (3,)))
            rot[j] = T.matmul(rot[p], local)
        else:
            rot[j] = rot[p]
    return T.concat(joints, axis=0)


# ---------------------------------------------------------------------------
# ground truth per representation

@dataclass
class HandPoseGT:
    """Per-sample targets shared by the three representations."""

    present: np.ndarray          # (2,) bool
    v: np.ndarray                # (2, 20, 3) parent-relative vectors, mm
    joints_rframe: np.ndarray    # (2, 21, 3) right-root frame (left shifted by T)
    joints2d_hm: np.ndarray      # (2, 21, 2) heatmap px
    dzp: np.ndarray              # (2, 20) parent-relative depths, mm
    t_lr: np.ndarray             # (3,) mm
    theta: np.ndarray            # (2, 16, 3)
    beta: np.ndarray             # (10,)


def ground_truth(sample, heatmap_size):
    image_size = sample.image.shape[-1]
    v = np.zeros((2, 20, 3))
    joints_rframe = np.zeros((2, 21, 3))
    dzp = np.zeros((2, 20))
    t_lr = sample.t_lr() if sample.interacting else np.zeros(3)
    for h in range(2):
        if not sample.hands_present[h]:
            continue
        v[h] = diff_to_vectors(sample.joints3d[h])
        rootrel = sample.joints3d[h] - sample.joints3d[h, 0]
        joints_rframe[h] = rootrel + (t_lr if h == 1 else 0.0)
        dzp[h] = v[h][:, 2]
    beta = np.zeros(10)
    beta[0] = (sample.shape_scale - 1.0) / 0.10
    return HandPoseGT(
        present=sample.hands_present.copy(),
        v=v, joints_rframe=joints_rframe,
        joints2d_hm=scale_coords(sample.joints2d, image_size, heatmap_size),
        dzp=dzp, t_lr=t_lr,
        theta=sample.joint_angles.copy(), beta=beta)


# ---------------------------------------------------------------------------
# decoded predictions (Tensor fields)

@dataclass
class HandPoseJV:
    v: list          # two (20, 3) Tensors [right, left]
    t_lr: T.Tensor   # (3,)
    s_c: T.Tensor    # (1,) positive
    t_c: T.Tensor    # (2,)


@dataclass
class HandPose25D:
    j2d: list        # two (21, 2) Tensors, heatmap px
    dzp: list        # two (20,) Tensors (root-adjacent bone depths)
    t_lr: T.Tensor


@dataclass
class HandPoseAngles:
    theta: list      # two (16, 3) Tensors
    beta: T.Tensor   # (10,)
    t_lr: T.Tensor
    s_c: T.Tensor
    t_c: T.Tensor


def decode(representation, raw, heatmap_size):
    """Interpret one decoder layer's raw outputs for a representation."""
    joints = raw["joints"]
    extra = raw["extra"]
    if representation == "jv":
        return HandPoseJV(
            v=[T.mul(T.narrow(joints, 0, 0, 20), V_SCALE),
               T.mul(T.narrow(joints, 0, 20, 20), V_SCALE)],
            t_lr=T.mul(T.narrow(extra, 0, 0, 3), T_SCALE),
            s_c=T.mul(T.exp(T.narrow(extra, 0, 3, 1)), WEAK_S0),
            t_c=T.mul(T.narrow(extra, 0, 4, 2), heatmap_size / 2.0))
    if representation == "25d":
        return HandPose25D(
            j2d=[T.mul(T.narrow(T.narrow(joints, 0, 21 * h, 21), 1, 0, 2), heatmap_size / 2.0)
                 for h in range(2)],
            dzp=[T.mul(T.reshape(T.narrow(T.narrow(joints, 0, 21 * h + 1, 20), 1, 2, 1), (20,)),
                       DZ_SCALE)
                 for h in range(2)],
            t_lr=T.mul(T.narrow(extra, 0, 0, 3), T_SCALE))
    if representation == "angles":
        return HandPoseAngles(
            theta=[T.mul(T.narrow(joints, 0, 16 * h, 16), THETA_SCALE) for h in range(2)],
            beta=T.narrow(extra, 0, 3, 10),
            t_lr=T.mul(T.narrow(extra, 0, 0, 3), T_SCALE),
            s_c=T.mul(T.exp(T.narrow(extra, 0, 13, 1)), WEAK_S0),
            t_c=T.mul(T.narrow(extra, 0, 14, 2), heatmap_size / 2.0))
    raise ValueError(f"unknown representation {representation!r}")


# ---------------------------------------------------------------------------
# losses (each: three L1 terms, summed)

def _pred_joints_rframe_jv(pred, gt):
    """Accumulated 3D joints per present hand in the right-root frame."""
    out = {}
    for h in range(2):
        if not gt.present[h]:
            continue
        acc = accumulate_joint_vectors(pred.v[h])
        if h == 1:
            acc = apply_left_translation(acc, pred.t_lr)
        out[h] = acc
    return out


def _cat(arrs):
    return np.concatenate(arrs).astype(np.float32)


def loss_terms(representation, pred, gt, templates=None):
    """The (name, prediction Tensor, target array) pairs whose L1 means sum
    to the representation's loss."""
    hands = [h for h in range(2) if gt.present[h]]
    if representation == "jv":
        pred3d = _pred_joints_rframe_jv(pred, gt)
        proj = T.concat([weak_project(pred3d[h], pred.s_c, pred.t_c) for h in hands], axis=0)
        return [
            ("v", T.concat([pred.v[h] for h in hands], axis=0), _cat([gt.v[h] for h in hands])),
            ("3d", T.concat([pred3d[h] for h in hands], axis=0),
             _cat([gt.joints_rframe[h] for h in hands])),
            ("2d", proj, _cat([gt.joints2d_hm[h] for h in hands])),
        ]
    if representation == "25d":
        terms = [
            ("2d", T.concat([pred.j2d[h] for h in hands], axis=0),
             _cat([gt.joints2d_hm[h] for h in hands])),
            ("z", T.concat([pred.dzp[h] for h in hands], axis=0),
             _cat([gt.dzp[h] for h in hands])),
        ]
        if all(gt.present):
            terms.append(("t", pred.t_lr, gt.t_lr.astype(np.float32)))
        return terms
    if representation == "angles":
        templates = templates or (skeleton.right_template(), skeleton.left_template())
        fk = {}
        for h in hands:
            j = forward_kinematics(pred.theta[h], pred.beta, templates[h])
            if h == 1:
                j = apply_left_translation(j, pred.t_lr)
            fk[h] = j
        proj = T.concat([weak_project(fk[h], pred.s_c, pred.t_c) for h in hands], axis=0)
        return [
            ("3d", T.concat([fk[h] for h in hands], axis=0),
             _cat([gt.joints_rframe[h] for h in hands])),
            ("theta", T.concat([pred.theta[h] for h in hands], axis=0),
             _cat([gt.theta[h] for h in hands])),
            ("2d", proj, _cat([gt.joints2d_hm[h] for h in hands])),
        ]
    raise ValueError(f"unknown representation {representation!r}")


def _sum_l1(terms):
    total = None
    for _, p, target in terms:
        term = T.l1_loss(p, T.const(target))
        total = term if total is None else T.add(total, term)
    return total


def loss_jv(pred, gt):
    """L1 on joint vectors + accumulated 3D (left shifted by T) + weak-2D."""
    return _sum_l1(loss_terms("jv", pred, gt))


def loss_25d(pred, gt):
    """L1 on 2D joints + parent-relative depths + inter-hand translation."""
    return _sum_l1(loss_terms("25d", pred, gt))


def loss_angles(pred, gt, templates=None):
    """L1 on FK joints (right-root frame) + joint angles + weak-2D."""
    return _sum_l1(loss_terms("angles", pred, gt, templates))


def pose_loss(representation, pred, gt):
    return _sum_l1(loss_terms(representation, pred, gt))


# ---------------------------------------------------------------------------
# evaluation-side decoding (numpy)

def predictions_for_eval(representation, pred, sample, heatmap_size):
    """Root-relative joints per hand (own root) plus predicted T_{L->R}.

    The 2.5D route lifts with the sample's intrinsics and ground-truth root
    depth (absolute root depth estimation is outside this artifact).
    """
    image_size = sample.image.shape[-1]
    joints = np.zeros((2, 21, 3))
    if representation == "jv":
        for h in range(2):
            joints[h] = accumulate_joint_vectors(pred.v[h].data.astype(np.float64))
        t_lr = pred.t_lr.data.astype(np.float64)
    elif representation == "25d":
        for h in range(2):
            if not sample.hands_present[h]:
                continue
            j2d_img = scale_coords(pred.j2d[h].data.astype(np.float64), heatmap_size, image_size)
            cam = reconstruct_25d(j2d_img, pred.dzp[h].data.astype(np.float64),
                                  float(sample.z_root[h]), sample.intrinsics)
            joints[h] = cam - cam[0]
        t_lr = pred.t_lr.data.astype(np.float64)
    elif representation == "angles":
        templates = (skeleton.right_template(), skeleton.left_template())
        for h in range(2):
            joints[h] = skeleton.forward_kinematics(
                pred.theta[h].data.astype(np.float64),
                pred.beta.data.astype(np.float64), templates[h])
        t_lr = pred.t_lr.data.astype(np.float64)
    else:
        raise ValueError(f"unknown representation {representation!r}")
    return joints, t_lr


# ---------------------------------------------------------------------------
# pose files (JSON-shaped external interface)

def pose_to_dict(representation, joints_rootrel, t_lr, camera=None):
    return {
        "representation": representation,
        "hands": [{"joints3d_rootrel": np.asarray(joints_rootrel[h]).tolist()}
                  for h in range(2)],
        "t_lr": np.asarray(t_lr).tolist(),
        "camera": camera or {},
    }


def save_pose(path, pose_dict):
    with open(path, "w") as fh:
        json.dump(pose_dict, fh, indent=1)


def load_pose(path):
    with open(path) as fh:
        d = json.load(fh)
    joints = np.array([d["hands"][h]["joints3d_rootrel"] for h in range(2)])
    return d["representation"], joints, np.array(d["t_lr"]), d.get("camera", {})
