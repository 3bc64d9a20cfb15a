"""Coordinate mapping and differentiable bilinear sampling.

Convention used everywhere: a flow field stores per-pixel offsets (dy, dx)
in TARGET-grid units as channels 0 and 1. Target index (i, j) at scale s
samples the source at ((i + dy) / s, (j + dx) / s); origin is pixel (0, 0)
with no half-pixel shift, and out-of-range coordinates clamp to the border.
Bilinear upsampling is literally sampling with zero flow, through the same
kernel, so the two paths agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, _result, _track, _trace_kink, add, grad_enabled,
                     scalar_mul)

_GRID_CACHE = {}
_UPSAMPLE_COORD_CACHE = {}
_UPSAMPLE_PLAN_CACHE = {}
_ROWS_CACHE = [None, None]


def base_grid(h, w):
    """(2, h, w) array of target indices: channel 0 rows, channel 1 columns."""
    key = (h, w)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        grid = np.stack([ys, xs])
        grid.setflags(write=False)
        _GRID_CACHE[key] = grid
    return grid


def map_coords(p_target, delta, scale):
    """Map one target pixel to its source coordinate: (p + delta) / scale."""
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return ((p_target[0] + delta[0]) / scale, (p_target[1] + delta[1]) / scale)


@dataclass
class WarpGrid:
    """Per-target-pixel sampling plan: 4 neighbor indices and weights.

    Weights are the usual bilinear products; for every pixel they sum to 1.
    valid_y/valid_x mark coordinates that were inside [0, size-1] before
    clamping (the coordinate gradient is zero in clamped directions).
    """

    y0: np.ndarray
    y1: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    fy: np.ndarray
    fx: np.ndarray
    valid_y: np.ndarray
    valid_x: np.ndarray

    def weights(self):
        w00 = (1 - self.fy) * (1 - self.fx)
        w01 = (1 - self.fy) * self.fx
        w10 = self.fy * (1 - self.fx)
        w11 = self.fy * self.fx
        return w00, w01, w10, w11


def build_warp_grid(coords, src_h, src_w) -> WarpGrid:
    """Neighbor indices/weights for source coords (N, 2, H, W) -> WarpGrid of (N, H, W) arrays."""
    cy = coords[:, 0]
    cx = coords[:, 1]
    valid_y = (cy >= 0.0) & (cy <= src_h - 1)
    valid_x = (cx >= 0.0) & (cx <= src_w - 1)
    cyc = np.clip(cy, 0.0, float(src_h - 1))
    cxc = np.clip(cx, 0.0, float(src_w - 1))
    y0 = np.floor(cyc).astype(np.int64)
    x0 = np.floor(cxc).astype(np.int64)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    fy = cyc - y0
    fx = cxc - x0
    return WarpGrid(y0, y1, x0, x1, fy, fx, valid_y, valid_x)


def _feature_rows(arr):
    """Channels-last copy (N, H*W, C) of an activation map.

    One-slot cache keyed by array identity: during one alignment step the same
    coarse map feeds both the flow subnet's upsample and the warp, and forward
    activations are never mutated in place, so identity is a safe key.
    """
    if _ROWS_CACHE[0] is arr:
        return _ROWS_CACHE[1]
    n, c, h, w = arr.shape
    rows = np.ascontiguousarray(arr.transpose(0, 2, 3, 1)).reshape(n, h * w, c)
    _ROWS_CACHE[0] = arr
    _ROWS_CACHE[1] = rows
    return rows


def _row_patches(rows, w):
    """Strided (N, L, 2, 2, C) view of the 2x2 pixel neighborhoods of a rows
    buffer; entry L = y*w + x covers pixels {y, y+1} x {x, x+1}."""
    n, hw, c = rows.shape
    s0, s1, s2 = rows.strides
    return np.lib.stride_tricks.as_strided(
        rows, shape=(n, hw - w - 1, 2, 2, c), strides=(s0, s1, w * s1, s1, s2))


def _upsample_rows_plan(h, w, factor, mode):
    """Static gather plan for integer-factor upsampling of an (h, w) map.

    Returns (base, w4): flat source indices and, for bilinear, the (P, 2, 2)
    neighbor weights (None for nearest). The bilinear weights use the same
    floor/clip arithmetic as the sampling kernel, border fold included.
    """
    key = (h, w, factor, mode)
    plan = _UPSAMPLE_PLAN_CACHE.get(key)
    if plan is None:
        if mode == "nearest":
            iy = np.arange(h * factor, dtype=np.intp) // factor
            ix = np.arange(w * factor, dtype=np.intp) // factor
            base = (iy[:, None] * w + ix[None, :]).ravel()
            plan = (base, None)
        else:
            coords = _upsample_coords(h, w, factor)
            p = h * factor * w * factor
            cy = coords[0, 0].reshape(p)
            cx = coords[0, 1].reshape(p)
            by = np.clip(np.floor(cy), 0.0, float(h - 2))
            bx = np.clip(np.floor(cx), 0.0, float(w - 2))
            fy = np.clip(cy - by, 0.0, 1.0)
            fx = np.clip(cx - bx, 0.0, 1.0)
            base = (by * w + bx).astype(np.intp)
            wy = np.stack([1.0 - fy, fy], axis=-1)
            wx = np.stack([1.0 - fx, fx], axis=-1)
            w4 = wy[:, :, None] * wx[:, None, :]
            plan = (base, w4)
        _UPSAMPLE_PLAN_CACHE[key] = plan
    return plan


def upsample_rows(arr, factor, mode="bilinear"):
    """Upsample (N, C, h, w) by an integer factor, returned channels-last as
    (N, h*w*factor^2, C) rows, ready for a channel contraction. Inference
    helper: plain arrays in, plain array out, no graph."""
    n, c, h, w = arr.shape
    base, w4 = _upsample_rows_plan(h, w, factor, mode)
    rows = _feature_rows(arr)
    if w4 is None:
        return np.take(rows, base, axis=1)
    g = np.take(_row_patches(rows, w), base, axis=1)
    return np.einsum("npijc,pij->npc", g, w4)


# below this many output elements per channel-row gather, the channels-first
# route wins on plain op count; above it the channels-last gather vectorizes
# better and pays for its two transposes
_ROWS_ROUTE_MIN = 1 << 18


def _sample_eval(source: Tensor, coords_t: Tensor, n, c, h, w, nc, out_h, out_w):
    """Inference-only sampling: one strided gather of 2x2 patches per pixel.

    Border handling folds into the weights: the patch base is clipped to
    [0, size-2] and the fraction to [0, 1], so a clamped coordinate puts
    weight 1 on the border row/column and 0 on its (in-bounds but unused)
    patch neighbor. Values match the tracked path; only float association
    differs, so the two modes agree to roundoff, not bitwise.
    """
    p = out_h * out_w
    cy = coords_t.data[:, 0].reshape(nc, p)
    cx = coords_t.data[:, 1].reshape(nc, p)
    y0f = np.floor(cy)
    x0f = np.floor(cx)
    _trace_kink(y0f)
    _trace_kink(x0f)
    by = np.clip(y0f, 0.0, float(h - 2))
    bx = np.clip(x0f, 0.0, float(w - 2))
    fy = np.clip(cy - by, 0.0, 1.0)
    fx = np.clip(cx - bx, 0.0, 1.0)
    base = (by * w + bx).astype(np.intp)
    wy = np.stack([1.0 - fy, fy], axis=-1)
    wx = np.stack([1.0 - fx, fx], axis=-1)
    w4 = (wy[:, :, :, None] * wx[:, :, None, :]).reshape(nc, p, 4)

    if p * c >= _ROWS_ROUTE_MIN:
        # channels-last route: the gather and the weighting run with C as the
        # contiguous inner axis, which vectorizes much better on wide maps
        rp = _row_patches(_feature_rows(source.data), w)
        if nc == 1:
            g4 = np.take(rp, base[0], axis=1)
            out_rows = np.einsum("npijc,pij->npc", g4, w4.reshape(p, 2, 2))
        else:
            per = []
            for b in range(n):
                g4 = np.take(rp[b], base[b], axis=0)
                per.append(np.einsum("pijc,pij->pc", g4, w4[b].reshape(p, 2, 2)))
            out_rows = np.stack(per)
        out_data = np.ascontiguousarray(out_rows.transpose(0, 2, 1))
    else:
        flat = np.ascontiguousarray(source.data).reshape(n, c, h * w)
        st = flat.strides
        patches = np.lib.stride_tricks.as_strided(
            flat, shape=(n, c, h * w - w - 1, 2, 2), strides=(st[0], st[1], 8, w * 8, 8))
        if nc == 1:
            g4 = np.take(patches, base[0], axis=2).reshape(n, c, p, 4)
            out_data = np.einsum("ncpk,pk->ncp", g4, w4[0])
        else:
            per = []
            for b in range(n):
                g4 = np.take(patches[b], base[b], axis=1).reshape(c, p, 4)
                per.append(np.einsum("cpk,pk->cp", g4, w4[b]))
            out_data = np.stack(per)
    out_data = out_data.reshape(n, c, out_h, out_w)
    return _result(out_data, (source, coords_t), "bilinear_sample", False)


def bilinear_sample(source: Tensor, coords) -> Tensor:
    """Sample source (N, C, h, w) at coords (N, 2, H, W) -> (N, C, H, W).

    coords may be a Tensor (gradients flow into it, e.g. through a predicted
    flow field) or a plain ndarray / constant grid. A coords batch of 1
    broadcasts across the source batch. Gradients w.r.t. the source are
    scattered with one bincount (deterministic); gradients w.r.t. clamped
    coordinate directions are zero.
    """
    coords_t = coords if isinstance(coords, Tensor) else Tensor(coords)
    n, c, h, w = source.shape
    nc, two, out_h, out_w = coords_t.shape
    if two != 2:
        raise ValueError(f"coords must have 2 channels (dy, dx), got {two}")
    if nc not in (1, n):
        raise ValueError(f"coords batch {nc} incompatible with source batch {n}")
    if coords_t.requires_grad and nc != n:
        raise ValueError("coords with gradients must match the source batch")

    if not grad_enabled() and h >= 2 and w >= 2:
        return _sample_eval(source, coords_t, n, c, h, w, nc, out_h, out_w)

    grid = build_warp_grid(coords_t.data, h, w)
    _trace_kink(grid.y0)
    _trace_kink(grid.x0)
    hw = out_h * out_w
    flat = source.data.reshape(n, c, h * w)

    def gather(iy, ix):
        idx = (iy * w + ix).reshape(nc, 1, hw)
        return np.take_along_axis(flat, idx, axis=2)

    v00 = gather(grid.y0, grid.x0)
    v01 = gather(grid.y0, grid.x1)
    v10 = gather(grid.y1, grid.x0)
    v11 = gather(grid.y1, grid.x1)
    w00, w01, w10, w11 = (wt.reshape(nc, 1, hw) for wt in grid.weights())
    out_data = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).reshape(n, c, out_h, out_w)

    parents = (source, coords_t)
    track = _track(*parents)
    out = _result(out_data, parents, "bilinear_sample", track)
    if track:
        def _bw():
            g = out.grad.reshape(n, c, hw)
            if source.requires_grad:
                cell = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w)
                cell = cell[:, :, None]
                pieces = []
                weights = []
                for iy, ix, wt in ((grid.y0, grid.x0, w00), (grid.y0, grid.x1, w01),
                                   (grid.y1, grid.x0, w10), (grid.y1, grid.x1, w11)):
                    idx = (iy * w + ix).reshape(nc, 1, hw)
                    pieces.append(np.broadcast_to(cell + idx, (n, c, hw)).ravel())
                    weights.append((g * wt).ravel())
                total = np.bincount(np.concatenate(pieces),
                                    weights=np.concatenate(weights),
                                    minlength=n * c * h * w)
                source.accumulate_grad(total.reshape(n, c, h, w))
            if coords_t.requires_grad:
                fx = grid.fx.reshape(nc, 1, hw)
                fy = grid.fy.reshape(nc, 1, hw)
                dy_term = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
                dx_term = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
                gy = (g * dy_term).sum(axis=1).reshape(nc, out_h, out_w) * grid.valid_y
                gx = (g * dx_term).sum(axis=1).reshape(nc, out_h, out_w) * grid.valid_x
                coords_t.accumulate_grad(np.stack([gy, gx], axis=1))
        out._backward = _bw
    return out


def flow_coords(flow: Tensor, scale) -> Tensor:
    """Source coordinates for a flow field: (base grid + flow) * (1 / scale)."""
    n, c, h, w = flow.shape
    if c != 2:
        raise ValueError(f"flow must have 2 channels (dy, dx), got {c}")
    base = Tensor(np.broadcast_to(base_grid(h, w), (n, 2, h, w)).copy())
    return scalar_mul(add(flow, base), 1.0 / scale)


def warp_feature(feature: Tensor, flow: Tensor, scale: int) -> Tensor:
    """Align a coarse feature map to the flow's grid.

    flow lives on the target (fine) grid, feature on a grid `scale` times
    smaller in each spatial dimension. With zero flow this reduces exactly to
    bilinear upsampling by `scale` (same kernel, same arithmetic).
    """
    n, c, h, w = feature.shape
    fn, fc, fh, fw = flow.shape
    if fc != 2:
        raise ValueError(f"flow must have 2 channels, got {fc}")
    if fn != n:
        raise ValueError(f"flow batch {fn} != feature batch {n}")
    scale = int(scale)
    if scale < 1 or fh != h * scale or fw != w * scale:
        raise ValueError(
            f"flow grid {fh}x{fw} is not feature grid {h}x{w} times integer scale {scale}")
    if not grad_enabled():
        # same arithmetic as flow_coords without building graph nodes
        coords = (flow.data + base_grid(fh, fw)) * (1.0 / scale)
        return bilinear_sample(feature, coords)
    return bilinear_sample(feature, flow_coords(flow, scale))


def _upsample_coords(h, w, factor):
    key = (h, w, factor)
    coords = _UPSAMPLE_COORD_CACHE.get(key)
    if coords is None:
        coords = (base_grid(h * factor, w * factor) * (1.0 / factor))[None]
        coords.setflags(write=False)
        _UPSAMPLE_COORD_CACHE[key] = coords
    return coords


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor via the shared sampling kernel."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    return bilinear_sample(x, _upsample_coords(h, w, factor))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling: out[i, j] = in[i // factor, j // factor]."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    track = _track(x)
    out = _result(data, (x,), "upsample_nearest", track)
    if track:
        def _bw():
            g = out.grad.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
            x.accumulate_grad(g)
        out._backward = _bw
    return out


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resample to an arbitrary size: target (i, j) reads source (i*h/out_h, j*w/out_w)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    grid = base_grid(out_h, out_w)
    coords = np.stack([grid[0] * (h / out_h), grid[1] * (w / out_w)])[None]
    return bilinear_sample(x, coords)
