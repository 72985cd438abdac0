"""Transformer encoder-decoder over keypoint tokens.

The encoder self-attends over the (unordered) token set; a shared identity
head after every encoder layer classifies each token into (hand, joint),
background, or object.  The decoder carries learned queries with fixed
roles: per-joint queries, one extra query (inter-hand translation, shape,
weak camera), and optionally two object queries.  Shared pose heads emit
raw outputs after every decoder layer; interpreting them is the pose
decoder's job.

Pre-norm residual blocks throughout.  Attention reductions over the token
axis are computed in value-sorted order, which makes the encoder exactly
permutation-equivariant (see tensor.softmax_last / attn_weighted_sum).
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .frontend import OBJECT_SOURCE

N_JOINT_CLASSES = 42            # 2 hands x 21 joints
BACKGROUND_CLASS = 42
OBJECT_CLASS = 43
N_CLASSES = 44


class DegenerateFrameError(RuntimeError):
    """No keypoint tokens: the frame cannot enter the transformer."""


class MultiHeadAttention(nn.Module):
    def __init__(self, rng, d, n_heads):
        if d % n_heads != 0:
            raise T.ShapeError(f"width {d} not divisible by {n_heads} heads")
        self.q = nn.Linear(rng, d, d)
        self.k = nn.Linear(rng, d, d)
        self.v = nn.Linear(rng, d, d)
        self.out = nn.Linear(rng, d, d)
        self.n_heads = n_heads
        self.d_head = d // n_heads

    def __call__(self, query_in, kv_in):
        """Returns (output (nq, d), attention weights (heads, nq, nk))."""
        q = self.q(query_in)
        k = self.k(kv_in)
        v = self.v(kv_in)
        scale = 1.0 / np.sqrt(self.d_head)
        outs = []
        weights = []
        for h in range(self.n_heads):
            s = h * self.d_head
            qh = T.narrow(q, 1, s, self.d_head)
            kh = T.narrow(k, 1, s, self.d_head)
            vh = T.narrow(v, 1, s, self.d_head)
            attn = T.softmax_last(T.mul(T.matmul(qh, T.transpose(kh)), scale))
            outs.append(T.attn_weighted_sum(attn, vh))
            weights.append(attn.data.copy())
        return self.out(T.concat(outs, axis=1)), np.stack(weights)


class FeedForward(nn.Module):
    def __init__(self, rng, d, d_ff):
        self.lin1 = nn.Linear(rng, d, d_ff, relu_gain=True)
        self.lin2 = nn.Linear(rng, d_ff, d)

    def __call__(self, x):
        return self.lin2(T.relu(self.lin1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, rng, d, n_heads, d_ff):
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ff = FeedForward(rng, d, d_ff)

    def __call__(self, x):
        normed = self.ln1(x)
        attn_out, weights = self.attn(normed, normed)
        x = T.add(x, attn_out)
        x = T.add(x, self.ff(self.ln2(x)))
        return x, weights


class IdentityHead(nn.Module):
    """2 FC layers + linear projection to the 44 identity classes."""

    def __init__(self, rng, d, n_classes=N_CLASSES):
        self.fc1 = nn.Linear(rng, d, d, relu_gain=True)
        self.fc2 = nn.Linear(rng, d, d, relu_gain=True)
        self.proj = nn.Linear(rng, d, n_classes)

    def __call__(self, x):
        return self.proj(T.relu(self.fc2(T.relu(self.fc1(x)))))


class Encoder(nn.Module):
    """Stack of encoder layers with one identity head shared by all of them."""

    def __init__(self, rng, d, n_layers, n_heads, d_ff):
        self.layers = [EncoderLayer(rng, d, n_heads, d_ff) for _ in range(n_layers)]
        self.identity_head = IdentityHead(rng, d)

    def __call__(self, tokens_matrix):
        """Returns (encoded (n, d), per-layer identity logits, per-layer
        self-attention weights).  Raises on an empty token set."""
        if tokens_matrix.data.shape[0] == 0:
            raise DegenerateFrameError("encoder got zero tokens")
        x = tokens_matrix
        logits = []
        attn = []
        for layer in self.layers:
            x, w = layer(x)
            logits.append(self.identity_head(x))
            attn.append(w)
        return x, logits, attn


class DecoderLayer(nn.Module):
    def __init__(self, rng, d, n_heads, d_ff):
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(rng, d, n_heads)
        self.ln3 = nn.LayerNorm(d)
        self.ff = FeedForward(rng, d, d_ff)

    def __call__(self, q, encoded):
        normed = self.ln1(q)
        sa, _ = self.self_attn(normed, normed)
        q = T.add(q, sa)
        ca, cross_w = self.cross_attn(self.ln2(q), encoded)
        q = T.add(q, ca)
        q = T.add(q, self.ff(self.ln3(q)))
        return q, cross_w


class QuerySet(nn.Module):
    """Learned query embeddings with fixed roles.

    Layout: joint queries (right hand block then left hand block), one
    extra query, then optionally object rotation and translation queries.
    """

    def __init__(self, rng, d, joints_per_hand, with_object):
        self.joints_per_hand = joints_per_hand
        self.with_object = with_object
        n = 2 * joints_per_hand + 1 + (2 if with_object else 0)
        self.embed = T.Tensor((0.02 * rng.standard_normal((n, d))).astype(np.float32),
                              requires_grad=True)

    @property
    def count(self):
        return self.embed.data.shape[0]

    @property
    def extra_index(self):
        return 2 * self.joints_per_hand

    def role(self, i):
        jq = 2 * self.joints_per_hand
        if i < jq:
            hand = "right" if i < self.joints_per_hand else "left"
            return f"joint:{hand}:{i % self.joints_per_hand}"
        if i == jq:
            return "extra"
        return "object-rotation" if i == jq + 1 else "object-translation"


class PoseHeads(nn.Module):
    """Shared per-layer pose heads: a 2-layer MLP trunk and per-role linear
    projections (joint outputs, extra query outputs, object rotation and
    translation)."""

    def __init__(self, rng, d, joint_dim, extra_dim, with_object):
        self.fc1 = nn.Linear(rng, d, d, relu_gain=True)
        self.fc2 = nn.Linear(rng, d, d, relu_gain=True)
        self.joint_proj = nn.Linear(rng, d, joint_dim)
        self.extra_proj = nn.Linear(rng, d, extra_dim)
        self.with_object = with_object
        if with_object:
            from .objpose import IDENTITY_BIAS_6D
            self.rot_proj = nn.Linear(rng, d, 6)
            self.rot_proj.b.data = IDENTITY_BIAS_6D.copy()
            self.trans_proj = nn.Linear(rng, d, 3)

    def __call__(self, q, query_set):
        trunk = T.relu(self.fc2(T.relu(self.fc1(q))))
        n_joint = 2 * query_set.joints_per_hand
        out = {
            "joints": self.joint_proj(T.narrow(trunk, 0, 0, n_joint)),
            "extra": T.reshape(self.extra_proj(T.narrow(trunk, 0, query_set.extra_index, 1)), (-1,)),
        }
        if self.with_object and query_set.with_object:
            out["obj_rot"] = T.reshape(self.rot_proj(T.narrow(trunk, 0, n_joint + 1, 1)), (6,))
            out["obj_trans"] = T.reshape(self.trans_proj(T.narrow(trunk, 0, n_joint + 2, 1)), (3,))
        return out


class Decoder(nn.Module):
    def __init__(self, rng, d, n_layers, n_heads, d_ff, joint_dim, extra_dim, with_object):
        self.layers = [DecoderLayer(rng, d, n_heads, d_ff) for _ in range(n_layers)]
        self.heads = PoseHeads(rng, d, joint_dim, extra_dim, with_object)

    def __call__(self, query_set, encoded):
        """Returns (per-layer raw pose outputs, per-layer cross-attention
        weights (heads, n_queries, n_tokens))."""
        if encoded.data.shape[0] == 0:
            raise DegenerateFrameError("decoder got zero encoded tokens")
        q = query_set.embed
        outputs = []
        cross = []
        for layer in self.layers:
            q, w = layer(q, encoded)
            outputs.append(self.heads(q, query_set))
            cross.append(w)
        return outputs, cross


# ---------------------------------------------------------------------------
# keypoint-joint association and the identity loss

def associate_keypoints(keypoints, gt_joints2d_px, valid_mask, gamma, map_shape):
    """Target class per keypoint: the nearest valid ground-truth joint
    reprojection when within `gamma`, else background; segmentation-sourced
    keypoints get the object class.

    `gt_joints2d_px` is (2, 21, 2) in the pixel units of `map_shape`
    (h, w) -- the heatmap resolution where keypoints live.  Distance ties
    break toward the lowest (hand, joint) class index.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    gt = np.asarray(gt_joints2d_px, dtype=np.float64).reshape(2, 21, 2)
    valid = np.asarray(valid_mask, dtype=bool).reshape(2, 21)
    h, w = map_shape
    targets = np.full(len(keypoints), BACKGROUND_CLASS, dtype=np.int64)
    for i, kp in enumerate(keypoints):
        if kp.source == OBJECT_SOURCE:
            targets[i] = OBJECT_CLASS
            continue
        px = np.array([kp.uv[0] * w - 0.5, kp.uv[1] * h - 0.5])
        best_class = BACKGROUND_CLASS
        best_d = np.inf
        for hand in range(2):
            for joint in range(21):
                if not valid[hand, joint]:
                    continue
                d = float(np.hypot(px[0] - gt[hand, joint, 0], px[1] - gt[hand, joint, 1]))
                if d < best_d:  # strict: ties keep the lower class index
                    best_d = d
                    best_class = hand * 21 + joint
        if best_d <= gamma:
            targets[i] = best_class
    return targets


def identity_loss(per_layer_logits, targets):
    """Cross-entropy summed over keypoints, averaged across encoder layers."""
    targets = np.asarray(targets, dtype=np.int64)
    total = None
    for logits in per_layer_logits:
        ce = T.cross_entropy(logits, targets, reduction="sum")
        total = ce if total is None else T.add(total, ce)
    return T.mul(total, 1.0 / len(per_layer_logits))


def export_cross_attention(cross_layers, keypoints, query_set):
    """JSON-shaped attention dump: per (layer, query), the keypoint uv and
    head-averaged weight for every token."""
    out = []
    for li, weights in enumerate(cross_layers):
        mean_w = weights.mean(axis=0)  # (n_queries, n_tokens)
        layer_entry = {"layer": li, "queries": []}
        for qi in range(mean_w.shape[0]):
            layer_entry["queries"].append({
                "query": query_set.role(qi),
                "keypoints": [{"uv": [float(kp.uv[0]), float(kp.uv[1])],
                               "weight": float(mean_w[qi, ti])}
                              for ti, kp in enumerate(keypoints)],
            })
        out.append(layer_entry)
    return out
