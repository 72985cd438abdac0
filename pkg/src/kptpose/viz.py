"""SVG visualization: heatmap overlays, skeleton comparisons, attention.

Pure-text SVG output keeps the artifact dependency-free; images render as
pixel rect grids, which is plenty at the toy resolutions.
"""

from __future__ import annotations

import numpy as np

from . import posedec, skeleton, synthgen
from . import tensor as T

QUERY_COLORS = ("#e63946", "#457b9d", "#f1c453", "#2a9d8f", "#b5179e", "#ff7b00")


def _svg(width, height, elements):
    body = "\n".join(elements)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n{body}\n</svg>\n')


def _rect(x, y, w, h, fill, opacity=None):
    op = f' fill-opacity="{opacity:.3f}"' if opacity is not None else ""
    return f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{fill}"{op}/>'


def _circle(cx, cy, r, stroke, fill="none", width=1.5):
    return (f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r:.2f}" stroke="{stroke}" '
            f'stroke-width="{width:.2f}" fill="{fill}"/>')


def _line(x1, y1, x2, y2, stroke, width=2.0, dash=None):
    d = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            f'stroke="{stroke}" stroke-width="{width:.2f}"{d}/>')


def _text(x, y, s, fill="#ffffff", size=12):
    return f'<text x="{x:.1f}" y="{y:.1f}" fill="{fill}" font-size="{size}">{s}</text>'


def _rgb(col):
    r, g, b = (int(255 * float(c)) for c in col)
    return f"#{r:02x}{g:02x}{b:02x}"


def _image_rects(image, scale):
    c, h, w = image.shape
    out = []
    for y in range(h):
        for x in range(w):
            out.append(_rect(x * scale, y * scale, scale, scale, _rgb(image[:, y, x])))
    return out


def heatmap_overlay_svg(heatmap, keypoints, out_size=320):
    """Grayscale heatmap with detected keypoints circled; circle centers are
    the keypoints' uv mapped into the output pixel grid."""
    hm = np.asarray(heatmap, dtype=np.float64)
    hm = hm.reshape(hm.shape[-2], hm.shape[-1])
    h, w = hm.shape
    scale = out_size / w
    els = []
    for y in range(h):
        for x in range(w):
            v = float(np.clip(hm[y, x], 0, 1))
            els.append(_rect(x * scale, y * scale, scale, scale, _rgb((v, v, v))))
    for kp in keypoints:
        els.append(_circle(kp.uv[0] * out_size, kp.uv[1] * out_size, 0.35 * scale, "#e63946"))
    return _svg(out_size, out_size, els)


def _skeleton_lines(j2d_px, scale, color, dash=None):
    els = []
    for j in range(1, 21):
        p = skeleton.PARENTS[j]
        els.append(_line(j2d_px[p, 0] * scale, j2d_px[p, 1] * scale,
                         j2d_px[j, 0] * scale, j2d_px[j, 1] * scale, color, 1.5, dash))
    for j in range(21):
        els.append(_circle(j2d_px[j, 0] * scale, j2d_px[j, 1] * scale, 2.0, color, color))
    return els


def skeleton_svg(sample, pred_joints2d_px=None, out_size=320):
    """Rendered scene with ground-truth skeletons (solid) and, when given,
    predicted 2D skeletons (dashed)."""
    size = sample.image.shape[-1]
    scale = out_size / size
    els = _image_rects(sample.image, scale)
    gt_colors = ("#73ff8a", "#ffb3a0")
    pred_colors = ("#0a7d2c", "#c1121f")
    for h in range(2):
        if not sample.hands_present[h]:
            continue
        els.extend(_skeleton_lines(sample.joints2d[h], scale, gt_colors[h]))
        if pred_joints2d_px is not None:
            els.extend(_skeleton_lines(pred_joints2d_px[h], scale, pred_colors[h], dash="4,3"))
    return _svg(out_size, out_size, els)


def attention_svg(sample, attention_export, query_names, out_size=320):
    """Last-layer cross-attention: one circle per keypoint per chosen query,
    radius proportional to its weight (normalized per query; zero-weight
    keypoints are omitted)."""
    size = sample.image.shape[-1]
    scale = out_size / size
    els = _image_rects(sample.image, scale)
    layer = attention_export[-1]
    legend_y = 16
    max_r = 0.055 * out_size
    for qi, qname in enumerate(query_names):
        entry = next((q for q in layer["queries"] if q["query"] == qname), None)
        if entry is None:
            continue
        color = QUERY_COLORS[qi % len(QUERY_COLORS)]
        weights = np.array([kp["weight"] for kp in entry["keypoints"]])
        top = float(weights.max()) if len(weights) else 0.0
        for kp in entry["keypoints"]:
            if kp["weight"] <= 0.0 or top <= 0.0:
                continue
            r = max_r * kp["weight"] / top
            if r < 0.25:
                continue
            els.append(_circle(kp["uv"][0] * out_size, kp["uv"][1] * out_size, r, color, width=1.8))
        els.append(_text(6, legend_y, qname, fill=color))
        legend_y += 14
    return _svg(out_size, out_size, els)


def predicted_joints2d_px(decoded, representation, sample, heatmap_size):
    """2D joints (image px) for overlay: the 2.5D route predicts them
    directly; the others reproject through the predicted weak camera."""
    size = sample.image.shape[-1]
    out = np.zeros((2, 21, 2))
    if representation == "25d":
        for h in range(2):
            out[h] = synthgen.scale_coords(decoded.j2d[h].data.astype(np.float64),
                                           heatmap_size, size)
        return out
    joints, t_lr = posedec.predictions_for_eval(representation, decoded, sample, heatmap_size)
    s_c = float(decoded.s_c.data[0])
    t_c = decoded.t_c.data.astype(np.float64)
    for h in range(2):
        pts = joints[h] + (t_lr if h == 1 else 0.0)
        out[h] = synthgen.scale_coords(posedec.weak_project(pts, s_c, t_c), heatmap_size, size)
    return out


def default_query_names(model):
    """Three right-hand joint queries spread across the hand (paper-figure
    style: a fingertip, a mid finger joint, a base joint)."""
    spec_n = model.queries.joints_per_hand
    picks = [min(7, spec_n - 1), min(9, spec_n - 1), min(16, spec_n - 1)]
    return [model.queries.role(i) for i in sorted(set(picks))]


def visualize(model, sample, out_dir, query_names=None):
    """Emit heatmap overlay, skeleton comparison, and attention SVGs plus a
    pose JSON for one sample; returns the written paths."""
    from . import harness  # local import: harness depends on this module's peers

    config = model.config
    report, recs = harness.evaluate(model, [sample], collect_attention=True)
    rec = recs[0]
    paths = []
    if rec.get("skipped"):
        raise RuntimeError("no keypoints detected for this sample; nothing to draw")
    hm_path = f"{out_dir}/heatmap.svg"
    with open(hm_path, "w") as fh:
        fh.write(heatmap_overlay_svg(rec["heatmap"], rec["keypoints"]))
    paths.append(hm_path)

    pred2d = predicted_joints2d_px(rec["decoded"], config.representation, sample,
                                   config.heatmap_size)
    sk_path = f"{out_dir}/skeleton.svg"
    with open(sk_path, "w") as fh:
        fh.write(skeleton_svg(sample, pred2d))
    paths.append(sk_path)

    names = query_names or default_query_names(model)
    at_path = f"{out_dir}/attention.svg"
    with open(at_path, "w") as fh:
        fh.write(attention_svg(sample, rec["attention"], names))
    paths.append(at_path)

    joints, t_lr = posedec.predictions_for_eval(config.representation, rec["decoded"],
                                                sample, config.heatmap_size)
    pose_path = f"{out_dir}/pose.json"
    posedec.save_pose(pose_path, posedec.pose_to_dict(config.representation, joints, t_lr))
    paths.append(pose_path)
    return paths
