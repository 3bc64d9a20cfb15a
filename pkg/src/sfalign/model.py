"""Encoder, pyramid pooling, and the flow-aligned FPN decoder.

Layout (input H x W, divisible by 32):
  stem     two stride-2 convs            -> F2 at H/4
  stage l  stride-2 conv + residual block -> F3..F5 at H/8, H/16, H/32
  ppm      multi-bin context on F5 (optional), output at H/32
  decoder  laterals compress every level to fpn_channels; the top-down pass
           adds each lateral to the upper level upsampled (plain bilinear or
           flow-aligned); the fusion head aligns H/8, H/16, H/32 features
           onto the H/4 grid, concatenates, and classifies; logits are
           bilinearly upsampled x4 back to the input size.

Convs followed by a group norm carry no bias; standalone convs (flow
subnets, classifiers, lateral output convs) carry zero-initialized biases.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .fam import FamConfig, fam_forward, flow_subnet_dims, init_fam_params
from .warp import resize_bilinear, upsample_bilinear

SAMPLE_FLOPS_PER_ELEMENT = 8


@dataclass
class ModelConfig:
    stage_channels: tuple = (32, 64, 128, 256)
    fpn_channels: int = 64
    ppm_bins: tuple = (1, 2, 3, 6)
    num_classes: int = 5
    norm_groups: int = 8
    use_fam: bool = True
    use_ppm: bool = True
    fam: FamConfig = field(default_factory=FamConfig)

    def validate(self):
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if self.fpn_channels < 1:
            raise ConfigError(f"fpn_channels must be positive, got {self.fpn_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if list(self.ppm_bins) != sorted(set(self.ppm_bins)) or any(b < 1 for b in self.ppm_bins):
            raise ConfigError(f"ppm_bins must be strictly increasing positive ints, got {self.ppm_bins}")
        if self.norm_groups < 1:
            raise ConfigError(f"norm_groups must be positive, got {self.norm_groups}")
        for c in tuple(self.stage_channels) + (self.fpn_channels,):
            if c % self.norm_groups:
                raise ConfigError(
                    f"all channel widths must divide by norm_groups={self.norm_groups}, got {c}")
        self.fam.validate()


# levels are indexed by their downsampling exponent: F2 = H/4 ... F5 = H/32
LEVELS = (2, 3, 4, 5)


def _add_conv(store, rng, name, c_out, c_in, k, bias=False, zero=False):
    w = T.conv_init(rng, c_out, c_in, k)
    if zero:
        w = np.zeros_like(w)
    store.add(f"{name}.weight", w)
    if bias:
        store.add(f"{name}.bias", np.zeros((1, c_out, 1, 1)))


def _add_norm(store, name, c):
    store.add(f"{name}.scale", np.ones((1, c, 1, 1)))
    store.add(f"{name}.shift", np.zeros((1, c, 1, 1)))


def init_params(cfg: ModelConfig, rng) -> T.ParamStore:
    """Build every parameter of the configured model, names sorted on save.

    Baseline (use_fam=False) and aligned models share identical names for all
    shared layers; the flow subnets are purely additive.
    """
    cfg.validate()
    store = T.ParamStore()
    c2, c3, c4, c5 = cfg.stage_channels
    fc = cfg.fpn_channels

    # encoder
    _add_conv(store, rng, "encoder.stem.conv1", c2, 3, 3)
    _add_norm(store, "encoder.stem.norm1", c2)
    _add_conv(store, rng, "encoder.stem.conv2", c2, c2, 3)
    _add_norm(store, "encoder.stem.norm2", c2)
    widths = {2: c2, 3: c3, 4: c4, 5: c5}
    for level in (3, 4, 5):
        cin, cout = widths[level - 1], widths[level]
        _add_conv(store, rng, f"encoder.stage{level}.down.conv", cout, cin, 3)
        _add_norm(store, f"encoder.stage{level}.down.norm", cout)
        _add_conv(store, rng, f"encoder.stage{level}.res.conv1", cout, cout, 3)
        _add_norm(store, f"encoder.stage{level}.res.norm1", cout)
        _add_conv(store, rng, f"encoder.stage{level}.res.conv2", cout, cout, 3)
        _add_norm(store, f"encoder.stage{level}.res.norm2", cout)

    # context head on F5
    if cfg.use_ppm:
        for b in cfg.ppm_bins:
            _add_conv(store, rng, f"ppm.branch{b}.conv", fc, c5, 1)
            _add_norm(store, f"ppm.branch{b}.norm", fc)
        _add_conv(store, rng, "ppm.fuse.conv", fc, c5 + len(cfg.ppm_bins) * fc, 3)
        _add_norm(store, "ppm.fuse.norm", fc)
    else:
        _add_conv(store, rng, "decoder.lateral5.conv1", fc, c5, 1)
        _add_norm(store, "decoder.lateral5.norm", fc)
        _add_conv(store, rng, "decoder.lateral5.conv2", fc, fc, 1, bias=True)

    # decoder laterals
    for level in (2, 3, 4):
        _add_conv(store, rng, f"decoder.lateral{level}.conv1", fc, widths[level], 1)
        _add_norm(store, f"decoder.lateral{level}.norm", fc)
        _add_conv(store, rng, f"decoder.lateral{level}.conv2", fc, fc, 1, bias=True)

    # alignment subnets: top-down (one per target level) and fusion (one per source)
    if cfg.use_fam:
        for level in (2, 3, 4):
            init_fam_params(store, f"decoder.fam{level}", cfg.fam, fc, rng)
        for level in (3, 4, 5):
            init_fam_params(store, f"decoder.fuse_fam{level}", cfg.fam, fc, rng)

    # head and aux classifiers
    _add_conv(store, rng, "decoder.head.conv", fc, 4 * fc, 3)
    _add_norm(store, "decoder.head.norm", fc)
    _add_conv(store, rng, "decoder.head.cls", cfg.num_classes, fc, 1, bias=True)
    for level in (2, 3, 4):
        _add_conv(store, rng, f"decoder.aux{level}", cfg.num_classes, fc, 1, bias=True)
    return store


def _conv_norm_relu(params, cfg, name, x, stride=1, padding=1):
    x = T.conv2d(x, params[f"{name}.conv.weight"], stride=stride, padding=padding)
    x = T.group_norm(x, cfg.norm_groups, params[f"{name}.norm.scale"],
                     params[f"{name}.norm.shift"])
    return T.relu(x)


def encoder_forward(params: T.ParamStore, cfg: ModelConfig, image: T.Tensor) -> dict:
    """Image (N, 3, H, W) -> {2: F2, 3: F3, 4: F4, 5: F5}."""
    n, c, h, w = image.shape
    if c != 3:
        raise ValueError(f"encoder expects 3 input channels, got {c}")
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ValueError(f"input spatial dims must be positive multiples of 32, got {h}x{w}")
    x = T.conv2d(image, params["encoder.stem.conv1.weight"], stride=2, padding=1)
    x = T.group_norm(x, cfg.norm_groups, params["encoder.stem.norm1.scale"],
                     params["encoder.stem.norm1.shift"])
    x = T.relu(x)
    x = T.conv2d(x, params["encoder.stem.conv2.weight"], stride=2, padding=1)
    x = T.group_norm(x, cfg.norm_groups, params["encoder.stem.norm2.scale"],
                     params["encoder.stem.norm2.shift"])
    x = T.relu(x)
    feats = {2: x}
    for level in (3, 4, 5):
        x = _conv_norm_relu(params, cfg, f"encoder.stage{level}.down", x, stride=2)
        y = T.conv2d(x, params[f"encoder.stage{level}.res.conv1.weight"], padding=1)
        y = T.group_norm(y, cfg.norm_groups,
                         params[f"encoder.stage{level}.res.norm1.scale"],
                         params[f"encoder.stage{level}.res.norm1.shift"])
        y = T.relu(y)
        y = T.conv2d(y, params[f"encoder.stage{level}.res.conv2.weight"], padding=1)
        y = T.group_norm(y, cfg.norm_groups,
                         params[f"encoder.stage{level}.res.norm2.scale"],
                         params[f"encoder.stage{level}.res.norm2.shift"])
        x = T.relu(T.add(x, y))
        feats[level] = x
    return feats


def ppm_forward(params: T.ParamStore, cfg: ModelConfig, f5: T.Tensor) -> T.Tensor:
    """Pool F5 into each bin, project, resize back, concat with F5, fuse.

    Bins larger than the F5 map are skipped with a warning; to keep parameter
    shapes independent of input size, a skipped bin contributes a zero map.
    """
    n, c, h, w = f5.shape
    parts = [f5]
    for b in cfg.ppm_bins:
        if b > min(h, w):
            warnings.warn(
                f"ppm bin {b} exceeds feature map {h}x{w}; contributing zeros",
                RuntimeWarning, stacklevel=2)
            parts.append(T.zeros((n, cfg.fpn_channels, h, w)))
            continue
        x = T.avg_pool_adaptive(f5, b, b)
        x = T.conv2d(x, params[f"ppm.branch{b}.conv.weight"])
        x = T.group_norm(x, cfg.norm_groups, params[f"ppm.branch{b}.norm.scale"],
                         params[f"ppm.branch{b}.norm.shift"])
        x = T.relu(x)
        parts.append(resize_bilinear(x, h, w))
    x = T.concat_channels(*parts)
    x = T.conv2d(x, params["ppm.fuse.conv.weight"], padding=1)
    x = T.group_norm(x, cfg.norm_groups, params["ppm.fuse.norm.scale"],
                     params["ppm.fuse.norm.shift"])
    return T.relu(x)


def _lateral(params, cfg, level, x):
    x = T.conv2d(x, params[f"decoder.lateral{level}.conv1.weight"])
    x = T.group_norm(x, cfg.norm_groups, params[f"decoder.lateral{level}.norm.scale"],
                     params[f"decoder.lateral{level}.norm.shift"])
    x = T.relu(x)
    return T.conv2d(x, params[f"decoder.lateral{level}.conv2.weight"],
                    params[f"decoder.lateral{level}.conv2.bias"])


def decoder_forward(params: T.ParamStore, cfg: ModelConfig, feats: dict,
                    train_mode: bool = False, collect: bool = False):
    """Pyramid features -> logits at input resolution.

    Returns a dict with "logits"; train_mode adds "aux" (list of native-
    resolution aux logits for levels 2, 3, 4); collect adds "flows" and
    "refined" for inspection/visualization.
    """
    top = ppm_forward(params, cfg, feats[5]) if cfg.use_ppm else _lateral(params, cfg, 5, feats[5])
    flows = {}
    refined = {5: top}
    upper = top
    for level in (4, 3, 2):
        lat = _lateral(params, cfg, level, feats[level])
        if cfg.use_fam:
            aligned, flow = fam_forward(upper, lat, params, f"decoder.fam{level}",
                                        cfg.fam, scale=2)
            flows[f"fam{level}"] = flow
        else:
            aligned = upsample_bilinear(upper, 2)
        upper = T.add(lat, aligned)
        refined[level] = upper

    parts = [refined[2]]
    for level, scale in ((3, 2), (4, 4), (5, 8)):
        src = refined[level] if level != 5 else top
        if cfg.use_fam:
            aligned, flow = fam_forward(src, refined[2], params,
                                        f"decoder.fuse_fam{level}", cfg.fam, scale=scale)
            flows[f"fuse_fam{level}"] = flow
        else:
            aligned = upsample_bilinear(src, scale)
        parts.append(aligned)
    x = T.concat_channels(*parts)
    x = T.conv2d(x, params["decoder.head.conv.weight"], padding=1)
    x = T.group_norm(x, cfg.norm_groups, params["decoder.head.norm.scale"],
                     params["decoder.head.norm.shift"])
    x = T.relu(x)
    logits_quarter = T.conv2d(x, params["decoder.head.cls.weight"],
                              params["decoder.head.cls.bias"])
    out = {"logits": upsample_bilinear(logits_quarter, 4)}
    if train_mode:
        out["aux"] = [
            T.conv2d(refined[level], params[f"decoder.aux{level}.weight"],
                     params[f"decoder.aux{level}.bias"])
            for level in (2, 3, 4)
        ]
    if collect:
        out["flows"] = flows
        out["refined"] = refined
    return out


def model_forward(params: T.ParamStore, cfg: ModelConfig, image: T.Tensor,
                  train_mode: bool = False, collect: bool = False):
    feats = encoder_forward(params, cfg, image)
    return decoder_forward(params, cfg, feats, train_mode=train_mode, collect=collect)


# ---------------------------------------------------------------------------
# analytic op counting


def _conv_flops(c_in, c_out, k, h_out, w_out):
    return 2 * k * k * c_in * c_out * h_out * w_out


def _sample_flops(c, h_out, w_out):
    return SAMPLE_FLOPS_PER_ELEMENT * c * h_out * w_out


def count_flops(cfg: ModelConfig, input_shape) -> tuple[int, dict]:
    """Analytic FLOPs of the eval path: convs at 2*k^2*Cin*Cout*Hout*Wout,
    bilinear sampling at 8 per output element. Norms, activations, adds and
    pools are not counted. Returns (total, per-module breakdown)."""
    n, c, h, w = input_shape
    if c != 3 or h % 32 or w % 32:
        raise ValueError(f"input shape must be (N, 3, 32k, 32k), got {input_shape}")
    cfg.validate()
    c2, c3, c4, c5 = cfg.stage_channels
    fc = cfg.fpn_channels
    counts = {}

    def tally(key, val):
        counts[key] = counts.get(key, 0) + int(val) * n

    h2, w2 = h // 4, w // 4
    tally("encoder.stem", _conv_flops(3, c2, 3, h // 2, w // 2))
    tally("encoder.stem", _conv_flops(c2, c2, 3, h2, w2))
    widths = {2: c2, 3: c3, 4: c4, 5: c5}
    sizes = {2: (h2, w2)}
    for level in (3, 4, 5):
        hs, ws = h >> (level), w >> (level)
        sizes[level] = (hs, ws)
        tally(f"encoder.stage{level}", _conv_flops(widths[level - 1], widths[level], 3, hs, ws))
        tally(f"encoder.stage{level}", 2 * _conv_flops(widths[level], widths[level], 3, hs, ws))
    h5, w5 = sizes[5]
    if cfg.use_ppm:
        for b in cfg.ppm_bins:
            if b > min(h5, w5):
                continue
            tally("ppm", _conv_flops(c5, fc, 1, b, b))
            tally("ppm", _sample_flops(fc, h5, w5))
        tally("ppm", _conv_flops(c5 + len(cfg.ppm_bins) * fc, fc, 3, h5, w5))
    else:
        tally("decoder.lateral", _conv_flops(c5, fc, 1, h5, w5))
        tally("decoder.lateral", _conv_flops(fc, fc, 1, h5, w5))
    for level in (2, 3, 4):
        hs, ws = sizes[level]
        tally("decoder.lateral", _conv_flops(widths[level], fc, 1, hs, ws))
        tally("decoder.lateral", _conv_flops(fc, fc, 1, hs, ws))

    def fam_cost(key, h_t, w_t):
        # upsample for the concat input, flow convs, then the warp itself
        if cfg.fam.upsample_mode == "bilinear":
            tally(key, _sample_flops(fc, h_t, w_t))
        for c_in, c_out in flow_subnet_dims(cfg.fam, fc):
            tally(key, _conv_flops(c_in, c_out, cfg.fam.kernel_size, h_t, w_t))
        tally(key, _sample_flops(fc, h_t, w_t))

    for level in (2, 3, 4):
        hs, ws = sizes[level]
        if cfg.use_fam:
            fam_cost(f"decoder.fam{level}", hs, ws)
        else:
            tally("decoder.upsample", _sample_flops(fc, hs, ws))
    for level in (3, 4, 5):
        if cfg.use_fam:
            fam_cost(f"decoder.fuse_fam{level}", h2, w2)
        else:
            tally("decoder.upsample", _sample_flops(fc, h2, w2))

    tally("decoder.head", _conv_flops(4 * fc, fc, 3, h2, w2))
    tally("decoder.head", _conv_flops(fc, cfg.num_classes, 1, h2, w2))
    tally("decoder.head", _sample_flops(cfg.num_classes, h, w))
    return sum(counts.values()), counts
