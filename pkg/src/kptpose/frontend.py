"""Detection frontend: U-Net-lite backbone, peak extraction, keypoint tokens.

The backbone maps an image batch to a one-channel hand heatmap, a one-channel
object segmentation map, and a pyramid of decoder feature maps (coarsest to
finest).  Keypoints are strict 3x3 local maxima of the heatmap; each becomes
a token by bilinear-sampling every pyramid level at its location, reducing
the concatenation with a 3-layer MLP, and appending a sine positional
encoding.  Peak extraction is non-differentiable: gradients reach the
pyramid through the sampling values only, never through the coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T

HAND_SOURCE = "hand-heatmap"
OBJECT_SOURCE = "object-segmentation"


@dataclass(frozen=True)
class Keypoint:
    uv: tuple          # normalized (u, v) in [0, 1]^2
    score: float
    source: str = HAND_SOURCE


@dataclass
class KeypointToken:
    appearance: T.Tensor   # (d_app,)
    positional: np.ndarray  # (d_pos,)
    combined: T.Tensor     # (d_app + d_pos,)
    keypoint: Keypoint


class TokenSet:
    """Tokens of one frame plus their stacked (n, d) matrix for the
    transformer."""

    def __init__(self, tokens, matrix, d_app, d_pos):
        self.tokens = tokens
        self.matrix = matrix
        self.d_app = d_app
        self.d_pos = d_pos

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    @property
    def keypoints(self):
        return [t.keypoint for t in self.tokens]


# ---------------------------------------------------------------------------
# backbone

class UNetBackbone(nn.Module):
    """3-level strided encoder (16/32/64 channels) and skip decoder.

    For a 64x64 input the decoder maps come out at 8x8, 16x16 and 32x32;
    heatmap and segmentation heads sit on the finest map (half the input
    resolution), both squashed by a sigmoid.
    """

    def __init__(self, rng, in_channels=3, base=16):
        c1, c2, c3 = base, base * 2, base * 4
        self.enc1a = nn.Conv2d(rng, in_channels, c1, 3, stride=2, padding=1)
        self.enc1b = nn.Conv2d(rng, c1, c1, 3, stride=1, padding=1)
        self.enc2a = nn.Conv2d(rng, c1, c2, 3, stride=2, padding=1)
        self.enc2b = nn.Conv2d(rng, c2, c2, 3, stride=1, padding=1)
        self.enc3a = nn.Conv2d(rng, c2, c3, 3, stride=2, padding=1)
        self.enc3b = nn.Conv2d(rng, c3, c3, 3, stride=1, padding=1)
        self.dec2 = nn.Conv2d(rng, c3 + c2, c2, 3, stride=1, padding=1)
        self.dec1 = nn.Conv2d(rng, c2 + c1, c1, 3, stride=1, padding=1)
        self.heat_head = nn.Conv2d(rng, c1, 1, 1)
        self.seg_head = nn.Conv2d(rng, c1, 1, 1)
        self.pyramid_channels = (c3, c2, c1)

    def __call__(self, image):
        if image.data.ndim != 4 or image.data.shape[1] != self.enc1a.w.data.shape[1]:
            raise T.ShapeError(f"backbone wants (N,{self.enc1a.w.data.shape[1]},H,W) input, "
                               f"got {image.data.shape}")
        e1 = T.relu(self.enc1b(T.relu(self.enc1a(image))))
        e2 = T.relu(self.enc2b(T.relu(self.enc2a(e1))))
        e3 = T.relu(self.enc3b(T.relu(self.enc3a(e2))))
        d2 = T.relu(self.dec2(T.concat([T.upsample_nearest(e3, 2), e2], axis=1)))
        d1 = T.relu(self.dec1(T.concat([T.upsample_nearest(d2, 2), e1], axis=1)))
        return {
            "heatmap": T.sigmoid(self.heat_head(d1)),
            "segmap": T.sigmoid(self.seg_head(d1)),
            "pyramid": [e3, d2, d1],
        }


def pyramid_for_sample(pyramid, i):
    """Slice batched (N,C,H,W) pyramid levels down to sample i's (C,H,W)."""
    out = []
    for level in pyramid:
        _, c, h, w = level.data.shape
        out.append(T.reshape(T.narrow(level, 0, i, 1), (c, h, w)))
    return out


def heatmap_loss(pred, gt):
    """Mean squared error between predicted and target maps."""
    return T.mse_loss(pred, T.const(gt))


# ---------------------------------------------------------------------------
# keypoints

def nms_peaks(heatmap, max_n, threshold):
    """Strict 3x3 local maxima at or above `threshold`, highest first,
    truncated to `max_n`.  Peak pixel (x, y) maps to uv ((x+.5)/w, (y+.5)/h)."""
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")
    hm = np.asarray(heatmap, dtype=np.float64)
    hm = hm.reshape(hm.shape[-2], hm.shape[-1])
    h, w = hm.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = hm
    strict = np.ones((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            strict &= hm > padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    ys, xs = np.nonzero(strict & (hm >= threshold))
    order = sorted(range(len(ys)), key=lambda i: (-hm[ys[i], xs[i]], ys[i], xs[i]))
    peaks = []
    for i in order[:max_n]:
        x, y = int(xs[i]), int(ys[i])
        peaks.append(Keypoint(uv=((x + 0.5) / w, (y + 0.5) / h),
                              score=float(hm[y, x]), source=HAND_SOURCE))
    return peaks


def sample_object_keypoints(segmap, n_obj, seed):
    """Uniformly pick `n_obj` on-pixels (segmap >= 0.5) without replacement,
    with replacement when fewer exist; empty mask yields an empty list."""
    sm = np.asarray(segmap, dtype=np.float64)
    sm = sm.reshape(sm.shape[-2], sm.shape[-1])
    h, w = sm.shape
    ys, xs = np.nonzero(sm >= 0.5)
    if len(ys) == 0:
        return []
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ys), size=n_obj, replace=len(ys) < n_obj)
    return [Keypoint(uv=((int(xs[i]) + 0.5) / w, (int(ys[i]) + 0.5) / h),
                     score=float(sm[ys[i], xs[i]]), source=OBJECT_SOURCE)
            for i in idx]


# ---------------------------------------------------------------------------
# positional encoding and token building

def positional_encoding(uv, d_pos, max_cycles):
    """Sine encoding of a normalized 2D location.

    Each axis gets d_pos/4 (sin, cos) pairs at geometric frequencies from 1
    to `max_cycles` cycles across [0, 1]; the two axes are concatenated.
    """
    if d_pos % 4 != 0:
        raise ValueError(f"d_pos must be a multiple of 4, got {d_pos}")
    k = d_pos // 4
    if k == 1:
        freqs = np.array([1.0])
    else:
        freqs = max_cycles ** (np.arange(k) / (k - 1))
    out = []
    for coord in uv:
        phase = 2.0 * np.pi * freqs * coord
        out.append(np.stack([np.sin(phase), np.cos(phase)], axis=1).reshape(-1))
    return np.concatenate(out).astype(np.float32)


class TokenBuilder(nn.Module):
    """3-layer MLP reducing concatenated pyramid samples to d_app, plus the
    positional tail."""

    def __init__(self, rng, pyramid_channels, d_app, d_pos, heatmap_size):
        c_sum = int(sum(pyramid_channels))
        self.mlp = nn.MLP(rng, [c_sum, 2 * d_app, 2 * d_app, d_app])
        self.c_sum = c_sum
        self.d_app = d_app
        self.d_pos = d_pos
        self.max_cycles = heatmap_size / 2.0

    def concat_width(self):
        return self.c_sum


def build_tokens(keypoints, pyramid, builder):
    """Encode keypoints against one sample's (C,H,W) pyramid levels."""
    if not keypoints:
        raise ValueError("build_tokens needs at least one keypoint")
    rows = []
    for kp in keypoints:
        samples = [T.bilinear_sample(level, kp.uv) for level in pyramid]
        rows.append(T.concat(samples, axis=0))
    feats = T.stack_rows(rows)
    if feats.data.shape[1] != builder.c_sum:
        raise T.ShapeError(f"pyramid gives {feats.data.shape[1]} channels, "
                           f"token MLP expects {builder.c_sum}")
    appearance = builder.mlp(feats)
    pos = np.stack([positional_encoding(kp.uv, builder.d_pos, builder.max_cycles)
                    for kp in keypoints])
    matrix = T.concat([appearance, T.const(pos)], axis=1)
    tokens = []
    for i, kp in enumerate(keypoints):
        tokens.append(KeypointToken(
            appearance=T.reshape(T.narrow(appearance, 0, i, 1), (builder.d_app,)),
            positional=pos[i],
            combined=T.reshape(T.narrow(matrix, 0, i, 1), (builder.d_app + builder.d_pos,)),
            keypoint=kp))
    return TokenSet(tokens, matrix, builder.d_app, builder.d_pos)
