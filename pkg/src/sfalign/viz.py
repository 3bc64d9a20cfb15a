"""Rasterizers for flow fields, feature maps and prediction errors.

Everything here is pure and byte-deterministic: identical inputs give
identical PPM bytes. Conventions, fixed once and used everywhere:

- flow arrays carry channels (dy, dx), matching the sampler;
- hue 0 is motion along +x (rightward), angles grow counterclockwise with
  the y axis pointing down, hue = atan2(dy, dx) in degrees;
- colors are computed in float [0, 1] and quantized once at the end with
  round-half-even, the same rule the dataset writer uses.
"""

import numpy as np

from .netpbm import write_ppm
from .warp import resize_bilinear
from . import tensor as T


def _to_u8(img):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _flow_array(flow):
    if hasattr(flow, "data"):
        flow = flow.data
    flow = np.asarray(flow, dtype=float)
    if flow.ndim == 4 and flow.shape[0] == 1:
        flow = flow[0]
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"expected flow of shape (2, H, W), got {flow.shape}")
    if not np.isfinite(flow).all():
        raise ValueError("flow must be finite")
    return flow


def _hsv_to_rgb(hue_deg, sat, val):
    """Vectorized sextant conversion; hue in degrees, sat and val in [0, 1]."""
    h6 = (hue_deg % 360.0) / 60.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = val * (1.0 - sat)
    q = val * (1.0 - sat * f)
    t = val * (1.0 - sat * (1.0 - f))
    r = np.choose(i, [val, q, p, p, t, val])
    g = np.choose(i, [t, val, val, q, p, p])
    b = np.choose(i, [p, p, t, val, val, q])
    return np.stack([r, g, b], axis=-1)


def flow_to_color(flow, max_mag=None):
    """Hue encodes flow direction, saturation encodes magnitude.

    max_mag defaults to the field's 99th-percentile magnitude; vectors at or
    beyond it are fully saturated, zero vectors render white.
    Returns (H, W, 3) uint8.
    """
    flow = _flow_array(flow)
    dy, dx = flow[0], flow[1]
    mag = np.hypot(dx, dy)
    if max_mag is None:
        max_mag = float(np.percentile(mag, 99))
    elif max_mag <= 0:
        raise ValueError("max_mag must be > 0")
    if max_mag > 0:
        sat = np.clip(mag / max_mag, 0.0, 1.0)
    else:
        sat = np.zeros_like(mag)
    hue = np.degrees(np.arctan2(dy, dx)) % 360.0
    return _to_u8(_hsv_to_rgb(hue, sat, np.ones_like(sat)))


def _draw_line(img, x0, y0, x1, y1, color):
    # integer Bresenham; pixels outside the canvas are skipped
    h, w = img.shape[:2]
    dx = abs(x1 - x0)
    sx = 1 if x0 < x1 else -1
    dy = -abs(y1 - y0)
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            img[y0, x0] = color
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def flow_arrows(flow, stride=8, scale=1.0):
    """Black arrows on white, one per stride-th pixel.

    Every sampled pixel gets a base dot; nonzero vectors additionally get a
    Bresenham line to pixel + round(scale * (dx, dy)) and a two-segment
    arrowhead. Returns (H, W, 3) uint8.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    flow = _flow_array(flow)
    h, w = flow.shape[1:]
    img = np.full((h, w, 3), 255, dtype=np.uint8)
    black = np.zeros(3, dtype=np.uint8)
    for y in range(0, h, stride):
        for x in range(0, w, stride):
            img[y, x] = black
            ex = x + int(np.rint(scale * flow[1, y, x]))
            ey = y + int(np.rint(scale * flow[0, y, x]))
            if ex == x and ey == y:
                continue
            _draw_line(img, x, y, ex, ey, black)
            theta = np.arctan2(ey - y, ex - x)
            head = max(2.0, 0.3 * np.hypot(ex - x, ey - y))
            for phi in (theta + 2.6, theta - 2.6):
                hx = ex + int(np.rint(head * np.cos(phi)))
                hy = ey + int(np.rint(head * np.sin(phi)))
                _draw_line(img, ex, ey, hx, hy, black)
    return img


_HEAT_POS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
_HEAT_R = np.array([0.0, 1.0, 1.0, 1.0, 1.0])
_HEAT_G = np.array([0.0, 0.0, 0.5, 1.0, 1.0])
_HEAT_B = np.array([0.0, 0.0, 0.0, 0.0, 1.0])


def feature_heatmap(feature):
    """Channel-mean heatmap through a black-red-orange-yellow-white ramp.

    Accepts a (C, H, W) array or single-sample (1, C, H, W) tensor. A
    constant map has no range to normalize, so it renders mid-gray.
    Returns (H, W, 3) uint8.
    """
    if hasattr(feature, "data"):
        feature = feature.data
    feature = np.asarray(feature, dtype=float)
    if feature.ndim == 4 and feature.shape[0] == 1:
        feature = feature[0]
    if feature.ndim != 3:
        raise ValueError(f"expected (C, H, W) feature, got {feature.shape}")
    m = feature.mean(axis=0)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape + (3,), 128, dtype=np.uint8)
    t = (m - lo) / (hi - lo)
    rgb = np.stack([np.interp(t, _HEAT_POS, _HEAT_R),
                    np.interp(t, _HEAT_POS, _HEAT_G),
                    np.interp(t, _HEAT_POS, _HEAT_B)], axis=-1)
    return _to_u8(rgb)


def error_map(pred_labels, gt_labels, palette, ignore_label=255):
    """Black where the prediction is right or the label ignored, the ground
    truth class color elsewhere. palette is (C, 3) float in [0, 1].
    Returns (H, W, 3) uint8.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    palette = np.asarray(palette, dtype=float)
    real = gt[gt != ignore_label]
    if real.size and (real.min() < 0 or real.max() >= len(palette)):
        raise ValueError(f"no palette entry for class {int(real.max())}")
    out = np.zeros(gt.shape + (3,), dtype=np.uint8)
    wrong = (pred != gt) & (gt != ignore_label)
    out[wrong] = _to_u8(palette[gt[wrong]])
    return out


def upsample_flow_for_view(flow, target_h, target_w):
    """Bilinearly resize a flow field for display; the input is untouched
    and the vector values are not rescaled."""
    flow = _flow_array(flow)
    with T.no_grad():
        out = resize_bilinear(T.Tensor(flow[None]), target_h, target_w)
    return out.data[0]


__all__ = ["flow_to_color", "flow_arrows", "feature_heatmap", "error_map",
           "upsample_flow_for_view", "write_ppm"]
