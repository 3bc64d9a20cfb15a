"""Brute-force reference implementations used as test oracles.

Everything here is written as plain python loops over numpy scalars,
independent of the library's vectorized kernels, so the two routes can
disagree when one of them is wrong.
"""

import math

import numpy as np


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def fd_grad(f, arr, h=1e-5):
    """Central finite differences of scalar f() w.r.t. every element of arr.

    f must read arr by reference (it is perturbed in place and restored).
    """
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def conv2d_loops(x, weight, bias=None, stride=1, padding=0):
    """Direct convolution sum, one python loop per index."""
    n, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, c_in, hp, wp))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for b in range(n):
        for co in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for ci in range(c_in):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[b, ci, i * stride + ky, j * stride + kx] \
                                    * weight[co, ci, ky, kx]
                    if bias is not None:
                        acc += bias[0, co, 0, 0]
                    out[b, co, i, j] = acc
    return out


def bilinear_sample_loops(src, coords):
    """Clamp-to-border bilinear sampling, pixel by pixel."""
    n, c, h, w = src.shape
    nc, _, out_h, out_w = coords.shape
    out = np.zeros((n, c, out_h, out_w))
    for b in range(n):
        cb = 0 if nc == 1 else b
        for i in range(out_h):
            for j in range(out_w):
                cy = min(max(coords[cb, 0, i, j], 0.0), h - 1.0)
                cx = min(max(coords[cb, 1, i, j], 0.0), w - 1.0)
                y0 = int(math.floor(cy))
                x0 = int(math.floor(cx))
                y1 = min(y0 + 1, h - 1)
                x1 = min(x0 + 1, w - 1)
                fy = cy - y0
                fx = cx - x0
                for ch in range(c):
                    out[b, ch, i, j] = (
                        (1 - fy) * (1 - fx) * src[b, ch, y0, x0]
                        + (1 - fy) * fx * src[b, ch, y0, x1]
                        + fy * (1 - fx) * src[b, ch, y1, x0]
                        + fy * fx * src[b, ch, y1, x1])
    return out


def group_norm_loops(x, groups, scale, shift, eps=1e-5):
    n, c, h, w = x.shape
    cpg = c // groups
    out = np.zeros_like(x)
    for b in range(n):
        for g in range(groups):
            vals = x[b, g * cpg:(g + 1) * cpg].reshape(-1)
            mu = vals.mean()
            var = vals.var()
            for ci in range(cpg):
                ch = g * cpg + ci
                out[b, ch] = (x[b, ch] - mu) / math.sqrt(var + eps) \
                    * scale[0, ch, 0, 0] + shift[0, ch, 0, 0]
    return out


def cross_entropy_loops(logits, labels, ignore_label=255):
    n, c, h, w = logits.shape
    out = np.zeros((n, 1, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                y = labels[b, i, j]
                if y == ignore_label:
                    continue
                z = logits[b, :, i, j]
                m = z.max()
                lse = m + math.log(np.exp(z - m).sum())
                out[b, 0, i, j] = lse - z[y]
    return out


def ohem_select_indices(flat_loss, flat_valid, keep_frac):
    """Indices of the K hardest valid pixels, ties broken by lowest index."""
    valid_idx = [i for i in range(len(flat_loss)) if flat_valid[i]]
    if not valid_idx:
        return []
    k = math.ceil(keep_frac * len(valid_idx))
    ranked = sorted(valid_idx, key=lambda i: (-flat_loss[i], i))
    return ranked[:k]


def confusion_loops(pred, gt, num_classes, ignore_label=255):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(np.asarray(pred).ravel(), np.asarray(gt).ravel()):
        if g == ignore_label:
            continue
        cm[g, p] += 1
    return cm


def miou_loops(cm):
    ious = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        denom = cm[c, :].sum() + cm[:, c].sum() - tp
        if denom > 0:
            ious.append(tp / denom)
    return float(np.mean(ious)), ious


def total_loss_loops(final_logits, aux_list, labels, keep_frac, aux_weight,
                     ignore_label=255):
    """Scalar recomputation of the deeply supervised loss: hard-pixel-mined
    mean CE on the final head plus weighted plain mean CE per aux head."""
    per = cross_entropy_loops(final_logits, labels, ignore_label)
    flat = per.ravel()
    valid = np.repeat((labels != ignore_label)[:, None], 1, axis=1).ravel()
    sel = ohem_select_indices(flat, valid, keep_frac)
    total = float(np.mean([flat[i] for i in sel])) if sel else 0.0
    for aux in aux_list:
        f = labels.shape[1] // aux.shape[2]
        lab = labels[:, ::f, ::f]
        pa = cross_entropy_loops(aux, lab, ignore_label)
        n_valid = (lab != ignore_label).sum()
        total += aux_weight * float(pa.sum() / max(n_valid, 1))
    return total


def error_map_loops(pred, gt, palette, ignore_label=255):
    """Per-pixel recoloring of wrong predictions with their gt class color."""
    h, w = gt.shape
    out = np.zeros((h, w, 3), np.uint8)
    for y in range(h):
        for x in range(w):
            if gt[y, x] != ignore_label and pred[y, x] != gt[y, x]:
                col = np.asarray(palette[gt[y, x]], float)
                out[y, x] = np.clip(np.rint(col * 255.0), 0, 255)
    return out


def rgb_to_hue_sat(rgb_u8):
    """Recover hue (degrees) and saturation from one 8-bit RGB pixel."""
    r, g, b = (float(v) / 255.0 for v in rgb_u8)
    mx, mn = max(r, g, b), min(r, g, b)
    d = mx - mn
    if d == 0:
        return 0.0, 0.0
    if mx == r:
        h = ((g - b) / d) % 6.0
    elif mx == g:
        h = (b - r) / d + 2.0
    else:
        h = (r - g) / d + 4.0
    return 60.0 * h, d / mx if mx > 0 else 0.0
