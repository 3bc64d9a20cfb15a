"""Training protocol: SGD with momentum and weight decay, a polynomial
learning-rate schedule, hard-pixel-mined cross entropy on the final head with
plain-CE deep supervision on the aux heads, and flip/scale/crop augmentation.

Determinism contract: everything is driven by named substreams of one seed
(shuffling, init, per-sample augmentation), the log carries no timestamps,
and two runs with the same seed produce identical loss traces and identical
checkpoint bytes.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError
from .metrics import evaluate
from .model import ModelConfig, init_params, model_forward
from .warp import resize_bilinear


@dataclass
class TrainConfig:
    total_iters: int
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    power: float = 0.9
    ohem_keep_frac: float = 0.1
    aux_weight: float = 0.4
    crop_size: int = 64
    scale_range: tuple = (0.75, 2.0)
    flip_prob: float = 0.5
    seed: int = 0
    eval_interval: int = 250
    ignore_label: int = 255

    def validate(self):
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if not 0.0 < self.ohem_keep_frac <= 1.0:
            raise ConfigError(
                f"ohem_keep_frac must be in (0, 1], got {self.ohem_keep_frac}")
        lo, hi = self.scale_range
        if lo <= 0 or lo > hi:
            raise ConfigError(
                f"scale_range must be 0 < min <= max, got {self.scale_range}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop_size < 1:
            raise ConfigError(f"crop_size must be >= 1, got {self.crop_size}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.aux_weight < 0:
            raise ConfigError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")


def poly_lr(base: float, iteration: int, total: int, power: float) -> float:
    """base * (1 - iteration/total)^power; exact at both endpoints."""
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if iteration < 0 or iteration > total:
        raise ValueError(f"iter {iteration} outside [0, {total}]")
    return base * (1.0 - iteration / total) ** power


def ohem_ce(per_pixel_loss: T.Tensor, valid_mask, keep_frac: float) -> T.Tensor:
    """Mean of the K hardest valid pixel losses, K = ceil(keep_frac * N_valid).

    Ties at the cut are broken toward the lowest linear pixel index so the
    selection is deterministic. With no valid pixels at all the loss is 0 and
    a RuntimeWarning is emitted.
    """
    valid = np.asarray(valid_mask, dtype=bool).ravel()
    flat = per_pixel_loss.data.ravel()
    if valid.shape != flat.shape:
        raise ValueError(
            f"valid mask has {valid.size} entries for {flat.size} pixel losses")
    vidx = np.flatnonzero(valid)
    if vidx.size == 0:
        warnings.warn("hard-pixel mining found no valid pixels; loss is 0",
                      RuntimeWarning, stacklevel=2)
        return T.scalar(0.0)
    k = math.ceil(keep_frac * vidx.size)
    # stable sort on descending loss keeps ascending index order within ties
    order = np.argsort(-flat[vidx], kind="stable")
    return T.select_mean(per_pixel_loss, vidx[order[:k]])


def total_loss(final_logits: T.Tensor, aux_logits, labels, cfg: TrainConfig) -> T.Tensor:
    """Mined CE on the final head plus cfg.aux_weight times the plain mean CE
    of each aux head against stride-sliced labels."""
    labels = np.asarray(labels)
    valid = labels != cfg.ignore_label
    per = T.cross_entropy_per_pixel(final_logits, labels, cfg.ignore_label)
    loss = ohem_ce(per, valid, cfg.ohem_keep_frac)
    for aux in aux_logits:
        f = labels.shape[1] // aux.shape[2]
        lab = labels[:, ::f, ::f]
        per_aux = T.cross_entropy_per_pixel(aux, lab, cfg.ignore_label)
        vidx = np.flatnonzero(lab != cfg.ignore_label)
        if vidx.size == 0:
            continue
        loss = T.add(loss, T.scalar_mul(T.select_mean(per_aux, vidx), cfg.aux_weight))
    return loss


@dataclass
class OptimState:
    velocity: dict = field(default_factory=dict)
    iteration: int = 0


def init_optim(params: T.ParamStore) -> OptimState:
    state = OptimState()
    for name, p in params.items():
        state.velocity[name] = np.zeros_like(p.data)
    return state


def sgd_step(params: T.ParamStore, state: OptimState, lr: float,
             momentum: float, weight_decay: float):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Decay applies only to parameters named "*.weight" (conv kernels); norm
    scales/shifts and biases are exempt. Non-finite gradients abort the step.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = 0.0
        elif not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        v = state.velocity[name]
        v *= momentum
        v += g
        if weight_decay and name.endswith(".weight"):
            v += weight_decay * p.data
        p.data -= lr * v
    state.iteration += 1


def _nearest_indices(out_size: int, in_size: int) -> np.ndarray:
    # floor(i * in/out) in exact integer arithmetic
    return (np.arange(out_size) * in_size) // out_size


def augment(image: np.ndarray, label: np.ndarray, cfg: TrainConfig, rng):
    """Horizontal flip, scale jitter, random crop; image and label together.

    The image is resampled bilinearly, the label with nearest neighbor under
    the same floor coordinate convention. If the scaled map is smaller than
    the crop it is padded bottom/right (image with 0, label with the ignore
    id). Draw order is fixed (flip, scale, crop y, crop x) so a seeded rng
    reproduces the sample exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    label = np.asarray(label)
    crop = cfg.crop_size
    if rng.random() < cfg.flip_prob:
        image = image[:, :, ::-1]
        label = label[:, ::-1]
    s = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    h, w = label.shape
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    if (nh, nw) != (h, w):
        with T.no_grad():
            image = resize_bilinear(T.Tensor(image[None]), nh, nw).data[0]
        label = label[np.ix_(_nearest_indices(nh, h), _nearest_indices(nw, w))]
    pad_h, pad_w = max(0, crop - nh), max(0, crop - nw)
    if pad_h or pad_w:
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
        label = np.pad(label, ((0, pad_h), (0, pad_w)),
                       constant_values=cfg.ignore_label)
        nh, nw = max(nh, crop), max(nw, crop)
    y0 = int(rng.integers(0, nh - crop + 1))
    x0 = int(rng.integers(0, nw - crop + 1))
    return (np.ascontiguousarray(image[:, y0:y0 + crop, x0:x0 + crop]),
            np.ascontiguousarray(label[y0:y0 + crop, x0:x0 + crop]))


def _dump_nan_state(path: Path, iteration: int, lr: float, indices):
    payload = {"iter": iteration, "lr": lr, "batch_indices": list(map(int, indices))}
    path.write_text(json.dumps(payload, indent=2) + "\n")


def train_loop(train_samples, val_samples, model_cfg: ModelConfig,
               cfg: TrainConfig, out_dir, log_name: str = "train_log.jsonl") -> dict:
    """Run the full protocol; returns a summary dict.

    Writes ckpt_last.sfal, ckpt_best.sfal (best validation mIoU, or a copy of
    the last state if validation never ran) and a JSONL log with one object
    per step: iter, lr, loss, plus val_miou on evaluation steps. Batches walk
    shuffled epochs; each drawn sample gets its own augmentation substream
    keyed by the running draw counter, so batch assembly could be parallelized
    without changing the stream assignment.
    """
    model_cfg.validate()
    cfg.validate()
    if len(train_samples) == 0:
        raise ValueError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / log_name

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = init_params(model_cfg, init_rng)
    state = init_optim(params)

    losses = []
    best_miou = None
    draw_counter = 0
    queue = []
    with log_path.open("w") as log:
        header = {"rng": "PCG64", "seed": cfg.seed, "total_iters": cfg.total_iters,
                  "batch_size": cfg.batch_size, "base_lr": cfg.base_lr,
                  "crop_size": cfg.crop_size}
        log.write(json.dumps(header) + "\n")
        for it in range(cfg.total_iters):
            lr = poly_lr(cfg.base_lr, it, cfg.total_iters, cfg.power)
            while len(queue) < cfg.batch_size:
                queue.extend(shuffle_rng.permutation(len(train_samples)).tolist())
            indices = [queue.pop(0) for _ in range(cfg.batch_size)]
            images, labels = [], []
            for idx in indices:
                sub = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 2, draw_counter]))
                draw_counter += 1
                img, lab = augment(train_samples[idx][0], train_samples[idx][1],
                                   cfg, sub)
                images.append(img)
                labels.append(lab)
            batch = T.Tensor(np.stack(images))
            lab_arr = np.stack(labels).astype(np.int64)

            out = model_forward(params, model_cfg, batch, train_mode=True)
            loss = total_loss(out["logits"], out["aux"], lab_arr, cfg)
            value = loss.item()
            if not np.isfinite(value):
                dump = out_dir / "nan_dump.json"
                _dump_nan_state(dump, it, lr, indices)
                raise NumericError(
                    f"loss is not finite at iter {it}; state dump at {dump}")
            losses.append(value)
            T.backward(loss)
            sgd_step(params, state, lr, cfg.momentum, cfg.weight_decay)
            params.zero_grads()

            row = {"iter": it, "lr": lr, "loss": value}
            if val_samples and cfg.eval_interval > 0 \
                    and (it + 1) % cfg.eval_interval == 0:
                score = evaluate(params, model_cfg, val_samples)["miou"]
                row["val_miou"] = score
                if best_miou is None or score > best_miou:
                    best_miou = score
                    T.save_checkpoint(params, out_dir / "ckpt_best.sfal")
            log.write(json.dumps(row) + "\n")

    T.save_checkpoint(params, out_dir / "ckpt_last.sfal")
    if best_miou is None:
        T.save_checkpoint(params, out_dir / "ckpt_best.sfal")
    return {
        "losses": losses,
        "final_loss": losses[-1] if losses else None,
        "best_miou": best_miou,
        "ckpt_last": str(out_dir / "ckpt_last.sfal"),
        "ckpt_best": str(out_dir / "ckpt_best.sfal"),
        "log_path": str(log_path),
        "params": params,
    }
