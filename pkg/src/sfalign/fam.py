"""Flow alignment: predict a semantic flow field between two pyramid levels
and warp the coarse level onto the fine grid with it.

The flow subnet sees the channel concat of the upsampled coarse map and the
fine map; its final conv is zero-initialized so a freshly built module is
exactly bilinear upsampling (the flow starts at zero everywhere), which is
what the alignment-vs-plain-upsampling ablation leans on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .warp import upsample_bilinear, upsample_nearest, upsample_rows, warp_feature

ALLOWED_KERNELS = (1, 3, 5, 7)


@dataclass
class FamConfig:
    kernel_size: int = 3
    n_layers: int = 1
    upsample_mode: str = "bilinear"

    def validate(self):
        if self.kernel_size not in ALLOWED_KERNELS:
            raise ConfigError(
                f"fam.kernel_size must be one of {ALLOWED_KERNELS}, got {self.kernel_size}")
        if self.n_layers < 1:
            raise ConfigError(f"fam.n_layers must be >= 1, got {self.n_layers}")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ConfigError(
                f"fam.upsample_mode must be 'bilinear' or 'nearest', got {self.upsample_mode!r}")


def flow_subnet_dims(cfg: FamConfig, channels: int):
    """(c_in, c_out) per conv of the flow subnet: 2C -> [C ...] -> 2."""
    dims = []
    c_in = 2 * channels
    for layer in range(cfg.n_layers):
        c_out = 2 if layer == cfg.n_layers - 1 else channels
        dims.append((c_in, c_out))
        c_in = c_out
    return dims


def init_fam_params(store: T.ParamStore, prefix: str, cfg: FamConfig,
                    channels: int, rng):
    """Register one flow subnet under `prefix`. The last conv starts at zero."""
    k = cfg.kernel_size
    dims = flow_subnet_dims(cfg, channels)
    for i, (c_in, c_out) in enumerate(dims, start=1):
        weight = T.conv_init(rng, c_out, c_in, k)
        if i == len(dims):
            weight = np.zeros_like(weight)
        store.add(f"{prefix}.flow.conv{i}.weight", weight)
        store.add(f"{prefix}.flow.conv{i}.bias", np.zeros((1, c_out, 1, 1)))


# one-slot cache of the channels-last copy of the most recent fine map; the
# three fusion-stage flow subnets all contract the same reference features
_NHWC_CACHE = [None, None]


def _nhwc_rows(arr):
    if _NHWC_CACHE[0] is arr:
        return _NHWC_CACHE[1]
    rows = np.ascontiguousarray(arr.transpose(0, 2, 3, 1)).reshape(-1, arr.shape[1])
    _NHWC_CACHE[0] = arr
    _NHWC_CACHE[1] = rows
    return rows


def _first_flow_conv_eval(coarse: T.Tensor, fine: T.Tensor, weight: T.Tensor,
                          bias: T.Tensor, k: int, scale: int, mode: str) -> T.Tensor:
    """Inference-only conv(cat(upsample(coarse), fine)): the kernel is split
    over the two channel blocks, the upsample arrives as channels-last rows
    straight from a cached gather plan, and neither the upsampled map nor the
    concatenation is ever materialized."""
    n, c, h, w = coarse.shape
    fh, fw = h * scale, w * scale
    wa = weight.data[:, :c].transpose(1, 0, 2, 3).reshape(c, -1)
    wb = weight.data[:, c:].transpose(1, 0, 2, 3).reshape(c, -1)
    z = upsample_rows(coarse.data, scale, mode).reshape(n * fh * fw, c) @ wa
    z += _nhwc_rows(fine.data) @ wb
    out = T._shift_add_contraction(z.reshape(n, fh, fw, -1), n, weight.shape[0],
                                   k, k // 2, fh, fw)
    out += bias.data
    return T.Tensor(out)


def predict_flow(coarse: T.Tensor, fine: T.Tensor, params: T.ParamStore,
                 prefix: str, cfg: FamConfig, scale: int = 2) -> T.Tensor:
    """Flow field on the fine grid from the pair (coarse upsampled, fine)."""
    n, c, h, w = coarse.shape
    fn, fc, fh, fw = fine.shape
    if fc != c:
        raise ValueError(f"flow prediction needs equal channel depth, got {c} vs {fc}")
    if fh != h * scale or fw != w * scale:
        raise ValueError(
            f"fine grid {fh}x{fw} is not coarse grid {h}x{w} times scale {scale}")
    pad = cfg.kernel_size // 2
    n_layers = cfg.n_layers
    if not T.grad_enabled() and (cfg.upsample_mode == "nearest" or (h >= 2 and w >= 2)):
        x = _first_flow_conv_eval(coarse, fine, params[f"{prefix}.flow.conv1.weight"],
                                  params[f"{prefix}.flow.conv1.bias"],
                                  cfg.kernel_size, scale, cfg.upsample_mode)
    else:
        if cfg.upsample_mode == "nearest":
            up = upsample_nearest(coarse, scale)
        else:
            up = upsample_bilinear(coarse, scale)
        x = T.conv2d(T.concat_channels(up, fine),
                     params[f"{prefix}.flow.conv1.weight"],
                     params[f"{prefix}.flow.conv1.bias"], stride=1, padding=pad)
    for i in range(2, n_layers + 1):
        x = T.relu(x)
        x = T.conv2d(x, params[f"{prefix}.flow.conv{i}.weight"],
                     params[f"{prefix}.flow.conv{i}.bias"], stride=1, padding=pad)
    return x


def fam_forward(coarse: T.Tensor, fine: T.Tensor, params: T.ParamStore,
                prefix: str, cfg: FamConfig, scale: int = 2):
    """Align `coarse` to the fine grid; returns (aligned features, flow)."""
    flow = predict_flow(coarse, fine, params, prefix, cfg, scale)
    aligned = warp_feature(coarse, flow, scale)
    return aligned, flow
