"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every value in the network is a `Tensor`: images, feature maps, flow fields,
logits, scalar losses. Data is always float64 with shape
(batch, channels, height, width); scalars use shape (1, 1, 1, 1). Each op
records a backward closure on its output, and `backward(root)` replays the
tape in reverse topological order, accumulating gradients additively.

Determinism: every kernel lowers to plain numpy (tensordot, bincount,
elementwise), so identical inputs give bit-identical results run to run on
the same machine.
"""

from __future__ import annotations

import math
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, NumericError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape construction inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self.prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self.prev
        return False


def grad_enabled():
    return _GRAD_ENABLED


# Optional recorder used by gradient checks to detect kink crossings
# (ReLU sign flips, sampler cell changes) between two perturbed forwards.
_KINK_TRACE = None


class record_kinks:
    """Collect non-smooth decision state (ReLU masks, sampler cells) of a forward."""

    def __enter__(self):
        global _KINK_TRACE
        self.records = []
        self._prev = _KINK_TRACE
        _KINK_TRACE = self.records
        return self

    def __exit__(self, *exc):
        global _KINK_TRACE
        _KINK_TRACE = self._prev
        return False

    def matches(self, other):
        if len(self.records) != len(other.records):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.records, other.records))


def _trace_kink(arr):
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(arr)


class Tensor:
    """A float64 (N, C, H, W) array plus an optional gradient buffer.

    Tensors are immutable once created as far as ops are concerned; only the
    optimizer mutates parameter data between steps. `grad` is allocated lazily
    on first accumulation and always matches `data` in shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(
                f"tensor data must be 4-D (N, C, H, W), got shape {arr.shape}"
            )
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g):
        if self.grad is None:
            # copy, not alias: g may be a view or a buffer the caller reuses
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def scalar(value):
    """Wrap a python float as a (1, 1, 1, 1) constant tensor."""
    return Tensor(np.full((1, 1, 1, 1), float(value)))


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _track(*parents):
    return _GRAD_ENABLED and any(p.requires_grad for p in parents)


def _result(data, parents, op, track):
    if track:
        return Tensor(data, requires_grad=True, _parents=parents, _op=op)
    return Tensor(data, _op=op)


def backward(root: Tensor):
    """Run reverse-mode accumulation from a scalar root over the whole tape."""
    if root.data.size != 1:
        raise ValueError(f"backward root must be a scalar tensor, got shape {root.shape}")
    if not np.isfinite(root.data).all():
        raise NumericError("backward root is not finite")
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.accumulate_grad(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# arithmetic and activation ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add requires identical shapes, got {a.shape} vs {b.shape}")
    track = _track(a, b)
    out = _result(a.data + b.data, (a, b), "add", track)
    if track:
        def _bw():
            if a.requires_grad:
                a.accumulate_grad(out.grad)
            if b.requires_grad:
                b.accumulate_grad(out.grad)
        out._backward = _bw
    return out


def scalar_mul(x: Tensor, s) -> Tensor:
    s = float(s)
    track = _track(x)
    out = _result(x.data * s, (x,), "scalar_mul", track)
    if track:
        def _bw():
            x.accumulate_grad(out.grad * s)
        out._backward = _bw
    return out


def mul_const(x: Tensor, arr) -> Tensor:
    """Elementwise product with a constant array (no gradient into arr)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != x.shape:
        raise ValueError(f"mul_const shape mismatch: {x.shape} vs {arr.shape}")
    track = _track(x)
    out = _result(x.data * arr, (x,), "mul_const", track)
    if track:
        def _bw():
            x.accumulate_grad(out.grad * arr)
        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    if _KINK_TRACE is None and not _track(x):
        return _result(np.maximum(x.data, 0.0), (x,), "relu", False)
    mask = x.data > 0
    _trace_kink(mask)
    track = _track(x)
    out = _result(np.where(mask, x.data, 0.0), (x,), "relu", track)
    if track:
        def _bw():
            # subgradient 0 at exactly 0
            x.accumulate_grad(out.grad * mask)
        out._backward = _bw
    return out


def concat_channels(a: Tensor, b: Tensor, *rest: Tensor) -> Tensor:
    parts = (a, b) + rest
    n, _, h, w = parts[0].shape
    for t in parts[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ValueError(
                f"concat_channels requires matching batch/spatial dims, got {parts[0].shape} vs {t.shape}"
            )
    track = _track(*parts)
    out = _result(np.concatenate([t.data for t in parts], axis=1), parts, "concat", track)
    if track:
        splits = np.cumsum([t.shape[1] for t in parts])[:-1]
        def _bw():
            chunks = np.split(out.grad, splits, axis=1)
            for t, g in zip(parts, chunks):
                if t.requires_grad:
                    t.accumulate_grad(g)
        out._backward = _bw
    return out


def sum_all(x: Tensor) -> Tensor:
    track = _track(x)
    out = _result(np.full((1, 1, 1, 1), x.data.sum()), (x,), "sum", track)
    if track:
        def _bw():
            x.accumulate_grad(np.broadcast_to(out.grad, x.shape))
        out._backward = _bw
    return out


def mean_all(x: Tensor) -> Tensor:
    return scalar_mul(sum_all(x), 1.0 / x.data.size)


def select_mean(x: Tensor, flat_indices) -> Tensor:
    """Mean of the elements of x chosen by flat (row-major) indices.

    Backward scatters grad/K to the chosen positions; duplicate indices
    accumulate. Used by the hard-example loss and by masked means.
    """
    idx = np.asarray(flat_indices, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ValueError("select_mean requires at least one index")
    if idx.min() < 0 or idx.max() >= x.data.size:
        raise ValueError("select_mean index out of range")
    k = idx.size
    vals = x.data.reshape(-1)[idx]
    track = _track(x)
    out = _result(np.full((1, 1, 1, 1), vals.mean()), (x,), "select_mean", track)
    if track:
        def _bw():
            counts = np.bincount(idx, minlength=x.data.size).astype(np.float64)
            x.accumulate_grad((counts * (out.grad.reshape(()) / k)).reshape(x.shape))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# convolution


def _shift_add_contraction(z, n, c_out, k, padding, h, w):
    """Finish a channel-contracted convolution: z is (N, H, W, C_out*k*k),
    the tensordot of the unpadded input with the reshaped kernel. Sums the
    k*k spatially shifted taps into the (N, C_out, H_out, W_out) result;
    zero padding never materializes because out-of-range taps are simply
    not added (they would contribute zeros)."""
    p = padding
    h_out, w_out = h + 2 * p - k + 1, w + 2 * p - k + 1
    zr = z.reshape(n, h, w, c_out, k, k)
    acc = np.zeros((n, h_out, w_out, c_out))
    for ky in range(k):
        for kx in range(k):
            yd0, yd1 = max(0, p - ky), min(h_out, h + p - ky)
            xd0, xd1 = max(0, p - kx), min(w_out, w + p - kx)
            if yd0 >= yd1 or xd0 >= xd1:
                continue
            acc[:, yd0:yd1, xd0:xd1] += zr[:, yd0 + ky - p:yd1 + ky - p,
                                           xd0 + kx - p:xd1 + kx - p, :, ky, kx]
    return np.ascontiguousarray(np.moveaxis(acc, 3, 1))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with square odd kernels.

    weight is (C_out, C_in, k, k); bias, when present, is (1, C_out, 1, 1).
    The kernel evaluates the direct convolution sum over strided sliding
    windows (one tensordot per call); backward scatters window gradients
    back with k*k strided slice adds, so everything stays deterministic.
    """
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if wc_in != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c_in}, weight expects {wc_in}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d invalid stride/padding: {stride}/{padding}")
    if bias is not None and bias.shape != (1, c_out, 1, 1):
        raise ValueError(f"conv2d bias must be (1, {c_out}, 1, 1), got {bias.shape}")
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d input {h}x{w} too small for kernel {k} at padding {padding}")

    parents = (x, weight) if bias is None else (x, weight, bias)
    track = _track(*parents)

    if not _GRAD_ENABLED and stride == 1 and k > 1 and 2 * c_out <= c_in and h * w >= 256:
        # inference-only narrow-output route: contract channels once on the
        # raw input, zero-pad the (much thinner) contraction, then accumulate
        # the k*k spatially shifted partial maps. The windowed route below
        # copies k*k*C_in*H*W elements; this one copies C_in*H*W, which is
        # what keeps the flow subnets cheap next to the trunk.
        wr = weight.data.transpose(1, 0, 2, 3).reshape(c_in, c_out * k * k)
        z = np.tensordot(x.data, wr, axes=([1], [0]))
        out_data = _shift_add_contraction(z, n, c_out, k, padding, h, w)
        if bias is not None:
            out_data += bias.data
        return _result(out_data, parents, "conv2d", False)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = win.shape[2], win.shape[3]
    out_data = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = np.ascontiguousarray(np.moveaxis(out_data, 3, 1))
    if bias is not None:
        out_data += bias.data

    out = _result(out_data, parents, "conv2d", track)
    if track:
        def _bw():
            g = out.grad
            if weight.requires_grad:
                weight.accumulate_grad(
                    np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1))
            if x.requires_grad:
                gw = np.moveaxis(np.tensordot(g, weight.data, axes=([1], [0])), 3, 1)
                gxp = np.zeros_like(xp)
                for ky in range(k):
                    for kx in range(k):
                        gxp[:, :, ky:ky + stride * h_out:stride,
                            kx:kx + stride * w_out:stride] += gw[:, :, :, :, ky, kx]
                if padding:
                    x.accumulate_grad(gxp[:, :, padding:padding + h, padding:padding + w])
                else:
                    x.accumulate_grad(gxp)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# normalization


def group_norm(x: Tensor, groups: int, scale: Tensor, shift: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize over channel groups (biased variance), then apply affine."""
    n, c, h, w = x.shape
    if eps <= 0:
        raise ValueError("group_norm eps must be positive")
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm needs channels divisible by groups, got C={c}, groups={groups}")
    if scale.shape != (1, c, 1, 1) or shift.shape != (1, c, 1, 1):
        raise ValueError("group_norm scale/shift must be (1, C, 1, 1)")
    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(n, c, h, w)
    out_data = xhat * scale.data + shift.data

    track = _track(x, scale, shift)
    out = _result(out_data, (x, scale, shift), "group_norm", track)
    if track:
        def _bw():
            g = out.grad
            if shift.requires_grad:
                shift.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
            if scale.requires_grad:
                scale.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
            if x.requires_grad:
                ghat = (g * scale.data).reshape(n, groups, m)
                mean_g = ghat.mean(axis=2, keepdims=True)
                mean_gx = (ghat * xhat_g).mean(axis=2, keepdims=True)
                dx = inv * (ghat - mean_g - xhat_g * mean_gx)
                x.accumulate_grad(dx.reshape(n, c, h, w))
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# pooling


def avg_pool_adaptive(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling with partition bins.

    Bin i along height covers rows [floor(i*H/out_h), floor((i+1)*H/out_h));
    bins tile the input without overlap, so backward hands each input cell
    exactly 1/(bin area) of its bin's gradient.
    """
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"avg_pool_adaptive output dims must be positive, got {out_h}x{out_w}")
    if out_h > h or out_w > w:
        raise ValueError(
            f"avg_pool_adaptive output {out_h}x{out_w} exceeds input {h}x{w}")
    ys = [i * h // out_h for i in range(out_h + 1)]
    xs = [j * w // out_w for j in range(out_w + 1)]
    out_data = np.empty((n, c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            out_data[:, :, i, j] = x.data[:, :, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(2, 3))

    track = _track(x)
    out = _result(out_data, (x,), "avg_pool_adaptive", track)
    if track:
        def _bw():
            gx = np.zeros_like(x.data)
            for i in range(out_h):
                for j in range(out_w):
                    area = (ys[i + 1] - ys[i]) * (xs[j + 1] - xs[j])
                    gx[:, :, ys[i]:ys[i + 1], xs[j]:xs[j + 1]] += \
                        out.grad[:, :, i:i + 1, j:j + 1] / area
            x.accumulate_grad(gx)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# classification ops


def softmax_over_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    track = _track(x)
    out = _result(s, (x,), "softmax", track)
    if track:
        def _bw():
            g = out.grad
            dot = (g * s).sum(axis=1, keepdims=True)
            x.accumulate_grad(s * (g - dot))
        out._backward = _bw
    return out


def cross_entropy_per_pixel(logits: Tensor, labels, ignore_label: int = 255) -> Tensor:
    """Per-pixel negative log-likelihood, shape (N, 1, H, W).

    labels is an integer numpy array (N, H, W). Pixels labeled ignore_label
    contribute exactly 0 and receive zero gradient. The per-pixel gradient is
    softmax(logits) - onehot(label).
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels must be (N, H, W) = {(n, h, w)}, got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integer, got dtype {labels.dtype}")
    valid = labels != ignore_label
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise ValueError(
            f"labels contain ids outside [0, {c}) and != {ignore_label}: "
            f"{sorted(np.unique(labels[bad]).tolist())}")
    zmax = logits.data.max(axis=1, keepdims=True)
    z = logits.data - zmax
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(valid, labels, 0)[:, None]
    zl = np.take_along_axis(z, safe, axis=1)
    validf = valid[:, None].astype(np.float64)
    loss = (lse - zl) * validf

    track = _track(logits)
    out = _result(loss, (logits,), "cross_entropy", track)
    if track:
        def _bw():
            gval = out.grad * validf
            p = np.exp(z - lse)
            gx = p * gval
            cur = np.take_along_axis(gx, safe, axis=1)
            np.put_along_axis(gx, safe, cur - gval, axis=1)
            logits.accumulate_grad(gx)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# parameter store and checkpoints

CHECKPOINT_MAGIC = b"SFAL"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named map of trainable tensors; iteration is lexicographic by name."""

    def __init__(self):
        self._tensors = {}

    def add(self, name: str, array) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True, _op="param")
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return sorted(self._tensors)

    def items(self):
        return [(k, self._tensors[k]) for k in self.names()]

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def num_elements(self):
        return sum(t.data.size for t in self._tensors.values())


def save_checkpoint(params, path):
    """Write parameters: magic, version u32, then per-tensor records in
    lexicographic name order (name len u32, name bytes, ndims u32, dims u32
    each, float64 little-endian payload)."""
    if isinstance(params, ParamStore):
        items = [(k, t.data) for k, t in params.items()]
    else:
        items = sorted((k, np.asarray(v, dtype=np.float64)) for k, v in params.items())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in items:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path):
    """Read a checkpoint into an ordered dict name -> float64 ndarray."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise DataError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndims,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndims}I", take(4 * ndims))
        count = int(np.prod(dims)) if ndims else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).copy()
        if name in out:
            raise DataError(f"{path}: duplicate tensor {name!r}")
        out[name] = arr
    return out


def load_into(store: ParamStore, path):
    """Load a checkpoint into an existing store, enforcing matching names/shapes."""
    state = load_checkpoint(path)
    missing = [n for n in store.names() if n not in state]
    extra = [n for n in state if n not in store]
    if missing or extra:
        raise DataError(
            f"{path}: parameter names do not match model "
            f"(missing: {missing[:5]}, unexpected: {extra[:5]})")
    for name, arr in state.items():
        t = store[name]
        if t.data.shape != arr.shape:
            raise DataError(
                f"{path}: shape mismatch for {name}: checkpoint {arr.shape} vs model {t.data.shape}")
        t.data = arr


# ---------------------------------------------------------------------------
# initialization helpers


def conv_init(rng, c_out, c_in, k):
    """Fan-in scaled uniform init, bound sqrt(6 / (C_in * k * k))."""
    bound = math.sqrt(6.0 / (c_in * k * k))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
