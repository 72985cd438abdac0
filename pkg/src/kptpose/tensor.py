"""Reverse-mode autodiff on dense numpy arrays.

Single-threaded, deterministic: the same seeded graph evaluates to
bitwise-identical outputs on repeated runs.  Reductions over the token axis
(softmax denominators, attention-weighted sums) accumulate in value-sorted
order so those ops are exactly permutation-equivariant, not just up to
float rounding.

Gradients are accumulated additively across fan-out.  Training runs in
float32; `grad_check` rebuilds graphs in float64 against central finite
differences.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's arithmetic."""


class Tensor:
    """Dense n-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def const(x, dtype=None):
    """Wrap a value as a non-differentiable Tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape

class Tape:
    """Ordered record of ops: (output, inputs, backward rule).

    Entries are appended in creation order, which is a topological order by
    construction.  `backward` sweeps the entries once, in reverse.
    """

    def __init__(self):
        self.entries = []

    def record(self, out, inputs, backward_fn):
        self.entries.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self.entries)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def backward(self, loss):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self.entries):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = g.astype(t.data.dtype, copy=True)
                else:
                    t.grad = t.grad + g


_TAPE_STACK = [Tape()]
_GRAD_ENABLED = [True]


def active_tape():
    return _TAPE_STACK[-1]


def reset_tape():
    """Drop the default tape's entries (and any grads already written stay)."""
    _TAPE_STACK[0].entries.clear()


class no_grad:
    """Context: ops compute forward only, nothing is recorded."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


def backward(loss):
    """Backpropagate from a scalar loss through the active tape."""
    active_tape().backward(loss)


def _make(data, inputs, backward_fn):
    """Create an op output; record it when grads are on and any input needs them."""
    track = _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track, dtype=data.dtype)
    if track:
        active_tape().record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise ops

def _pair(a, b):
    """Coerce operands; plain python numbers adopt the partner's dtype so a
    float32 graph is not silently promoted to float64."""
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return const(a), const(b)


def add(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                          _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _pair(a, b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return _make(data, (a, b), lambda g: (_unbroadcast(g / b.data, a.data.shape),
                                          _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a):
    a = const(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = const(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def sqrt(a):
    a = const(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * (0.5 / data),))


def sin(a):
    a = const(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = const(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def relu(a):
    a = const(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = const(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


# ---------------------------------------------------------------------------
# Shape ops

def reshape(a, shape):
    a = const(a)
    old = a.data.shape
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = const(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts, axis=0):
    parts = [const(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(parts), bwd)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis, with gradient scatter on backward."""
    a = const(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(data, (a,), bwd)


def stack_rows(rows):
    """Stack 1-D tensors of equal length into a 2-D (n, d) tensor."""
    return concat([reshape(r, (1, r.data.shape[0])) for r in rows], axis=0)


# ---------------------------------------------------------------------------
# Linear algebra

def matmul(a, b):
    a, b = const(a), const(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    return _make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _sorted_sum(x, axis):
    # Value-sorted accumulation: invariant under permutations along `axis`.
    return np.sort(x, axis=axis).sum(axis=axis)


def softmax_last(a):
    """Softmax over the last axis.

    The normalizer accumulates exp terms in sorted order, so permuting
    entries along the last axis permutes the output bitwise.
    """
    a = const(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = _sorted_sum(e, axis=-1)[..., None]
    s = e / denom

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _make(s, (a,), bwd)


def attn_weighted_sum(attn, v):
    """(q,k) attention weights times (k,d) values, reduced over k in
    value-sorted order (permutation-equivariant in the key axis)."""
    attn, v = const(attn), const(v)
    if attn.data.ndim != 2 or v.data.ndim != 2 or attn.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"attn_weighted_sum: {attn.data.shape} x {v.data.shape}")
    terms = attn.data[:, :, None] * v.data[None, :, :]
    data = _sorted_sum(terms, axis=1)

    def bwd(g):
        return (g @ v.data.T, attn.data.T @ g)

    return _make(data, (attn, v), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    a, gamma, beta = const(a), const(gamma), const(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    n = a.data.shape[-1]

    def bwd(g):
        gx = g * gamma.data
        dxhat_sum = gx.sum(axis=-1, keepdims=True)
        dxhat_dot = (gx * xhat).sum(axis=-1, keepdims=True)
        ga = inv / n * (n * gx - dxhat_sum - xhat * dxhat_dot)
        ggamma = _unbroadcast(g * xhat, gamma.data.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return (ga, ggamma, gbeta)

    return _make(data, (a, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Convolution / sampling

def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution, NCHW input, OIkk weight, zero padding.

    Output spatial size: floor((H + 2p - k) / s) + 1.
    """
    x, w = const(x), const(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.data.shape}, weight {w.data.shape} (want NCHW / OIkk)")
    n, c, h, wid = x.data.shape
    oc, ic, kh, kw = w.data.shape
    if ic != c:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {ic}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wid} with pad {padding}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)
    data = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    inputs = (x, w)
    if b is not None:
        b = const(b)
        data = data + b.data[None, :, None, None]
        inputs = (x, w, b)
    data = np.ascontiguousarray(data)

    def bwd(g):
        gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "nohw,oc->nchw", g, w.data[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding:padding + h, padding:padding + wid] if padding else gxp
        if len(inputs) == 3:
            return (gx, gw, g.sum(axis=(0, 2, 3)))
        return (gx, gw)

    return _make(data, inputs, bwd)


def upsample_nearest(x, factor=2):
    """Nearest-neighbor upsample of an NCHW map by an integer factor."""
    x = const(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest wants NCHW, got {x.data.shape}")
    n, c, h, w = x.data.shape
    data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(data, (x,), bwd)


def bilinear_sample(featmap, uv):
    """Sample a (C,H,W) feature map at normalized uv in [0,1]^2.

    Grid cell centers sit at ((ix+0.5)/W, (iy+0.5)/H); coordinates outside
    [0,1] clamp to the border.  Differentiable w.r.t. the feature map only;
    uv is plain data and carries no gradient.
    """
    featmap = const(featmap)
    if featmap.data.ndim != 3:
        raise ShapeError(f"bilinear_sample wants (C,H,W), got {featmap.data.shape}")
    c, h, w = featmap.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"bilinear_sample needs H,W >= 2, got {h}x{w}")
    u = min(max(float(uv[0]), 0.0), 1.0)
    v = min(max(float(uv[1]), 0.0), 1.0)
    fx = min(max(u * w - 0.5, 0.0), w - 1.0)
    fy = min(max(v * h - 0.5, 0.0), h - 1.0)
    x0, y0 = int(np.floor(fx)), int(np.floor(fy))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = fx - x0, fy - y0
    w00 = (1 - ax) * (1 - ay)
    w01 = ax * (1 - ay)
    w10 = (1 - ax) * ay
    w11 = ax * ay
    fm = featmap.data
    data = (w00 * fm[:, y0, x0] + w01 * fm[:, y0, x1]
            + w10 * fm[:, y1, x0] + w11 * fm[:, y1, x1])

    def bwd(g):
        gf = np.zeros_like(fm)
        gf[:, y0, x0] += w00 * g
        gf[:, y0, x1] += w01 * g
        gf[:, y1, x0] += w10 * g
        gf[:, y1, x1] += w11 * g
        return (gf,)

    return _make(data, (featmap,), bwd)


# ---------------------------------------------------------------------------
# Reductions / losses

def mean(a):
    a = const(a)
    n = a.data.size
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _make(data, (a,), lambda g: (np.full_like(a.data, g / n),))


def tsum(a):
    a = const(a)
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _make(data, (a,), lambda g: (np.full_like(a.data, g),))


def l1_loss(pred, target):
    """Mean absolute error over all elements."""
    pred, target = const(pred), const(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"l1_loss: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    data = np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype)

    def bwd(g):
        s = np.sign(diff) * (g / n)
        return (s, -s)

    return _make(data, (pred, target), bwd)


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    pred, target = const(pred), const(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    n = diff.size
    data = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def bwd(g):
        s = diff * (2.0 * g / n)
        return (s, -s)

    return _make(data, (pred, target), bwd)


def cross_entropy(logits, targets, reduction="mean"):
    """Cross-entropy of (n, C) logits against integer class targets."""
    logits = const(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.data.shape[0] != t.size:
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} vs {t.size} targets")
    n, c = logits.data.shape
    if t.min() < 0 or t.max() >= c:
        raise ValueError(f"cross_entropy: target out of range [0,{c})")
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    logp = (logits.data - m) - np.log(z)
    losses = -logp[np.arange(n), t]
    scale = 1.0 / n if reduction == "mean" else 1.0
    data = np.asarray(losses.sum() * scale, dtype=logits.data.dtype)
    probs = e / z

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(n), t] -= 1.0
        return (gl * (g * scale),)

    return _make(data, (logits,), bwd)


# ---------------------------------------------------------------------------
# Optimizer

def adam_step(params, grads, lr, betas=(0.9, 0.999), eps=1e-8, state=None):
    """One Adam update with bias correction; `state` is advanced in place.

    `state` maps are keyed by parameter position: {"m": [...], "v": [...],
    "t": int}.  Returns the state (created on first call).
    """
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be > 0, got {lr}")
    b1, b2 = betas
    if state is None:
        state = {"m": [np.zeros_like(p.data) for p in params],
                 "v": [np.zeros_like(p.data) for p in params],
                 "t": 0}
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state["m"][i]
        v = state["v"][i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
    return state


class Adam:
    """Adam over a fixed parameter list, reading grads off the tensors."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError(f"Adam: lr must be > 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = None

    def step(self):
        grads = [p.grad for p in self.params]
        self.state = adam_step(self.params, grads, self.lr, self.betas, self.eps, self.state)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Gradient verification

class GradCheckReport:
    def __init__(self):
        self.leaf_errors = {}

    @property
    def max_error(self):
        return max(self.leaf_errors.values()) if self.leaf_errors else 0.0

    def passed(self, tolerance):
        return self.max_error < tolerance

    def __str__(self):
        lines = [f"  {name}: max rel err {err:.3e}" for name, err in self.leaf_errors.items()]
        return "\n".join(lines) if lines else "  (no leaves)"


def grad_check(build, rng, tolerance=1e-4, h=1e-4):
    """Compare autodiff gradients against central finite differences.

    `build(values, rng)` returns (scalar loss Tensor, dict name -> leaf
    Tensor).  On the first call `values` is None and the builder draws
    random float64 leaves from `rng`; finite-difference re-evaluations call
    it again with perturbed copies of those leaf arrays.  The builder must
    be a pure function of `values` once the leaves exist.
    """
    with Tape() as tape:
        loss, leaves = build(None, rng)
        tape.backward(loss)
    base = {name: leaf.data.copy() for name, leaf in leaves.items()}

    def eval_loss(values):
        with no_grad():
            out, _ = build(values, rng)
        return float(out.data)

    report = GradCheckReport()
    for name, leaf in leaves.items():
        auto = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        fd = np.zeros_like(leaf.data)
        flat = base[name].reshape(-1)
        for i in range(flat.size):
            vals_p = {k: v.copy() for k, v in base.items()}
            vals_m = {k: v.copy() for k, v in base.items()}
            vals_p[name].reshape(-1)[i] += h
            vals_m[name].reshape(-1)[i] -= h
            fd.reshape(-1)[i] = (eval_loss(vals_p) - eval_loss(vals_m)) / (2 * h)
        denom = np.maximum(1.0, np.maximum(np.abs(auto), np.abs(fd)))
        report.leaf_errors[name] = float(np.max(np.abs(auto - fd) / denom))
    return report
