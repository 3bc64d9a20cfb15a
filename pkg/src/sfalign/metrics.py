"""Segmentation quality metrics and wall-clock benchmarking.

The confusion matrix is the single accumulation structure: rows are ground
truth, columns are predictions, and ignored pixels are counted separately so
`counts.sum() + ignored` always equals the number of pixels processed.
"""

from __future__ import annotations

import os
import platform
import sys
import time

import numpy as np

from . import tensor as T
from .model import model_forward


class ConfusionMatrix:
    """C x C count matrix, counts[gt, pred], plus an ignored-pixel counter."""

    def __init__(self, num_classes: int, ignore_label: int = 255):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def update(self, pred, gt):
        pred = np.asarray(pred).ravel()
        gt = np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        c = self.num_classes
        valid = gt != self.ignore_label
        if ((pred < 0) | (pred >= c)).any():
            bad = sorted(np.unique(pred[(pred < 0) | (pred >= c)]).tolist())
            raise ValueError(f"prediction ids outside [0, {c}): {bad}")
        gv = gt[valid]
        if ((gv < 0) | (gv >= c)).any():
            bad = sorted(np.unique(gv[(gv < 0) | (gv >= c)]).tolist())
            raise ValueError(f"label ids outside [0, {c}) and != {self.ignore_label}: {bad}")
        self.counts += np.bincount(gv * c + pred[valid],
                                   minlength=c * c).reshape(c, c)
        self.ignored += int((~valid).sum())
        return self

    def merge(self, other: "ConfusionMatrix"):
        if other.num_classes != self.num_classes:
            raise ValueError(f"class count mismatch: {self.num_classes} vs {other.num_classes}")
        self.counts += other.counts
        self.ignored += other.ignored
        return self

    def pixel_accuracy(self) -> float:
        total = self.counts.sum()
        if total == 0:
            raise ValueError("no counted pixels; cannot compute accuracy")
        return float(np.trace(self.counts) / total)


def miou(cm: ConfusionMatrix):
    """(mean IoU, per-class list). Classes absent from both prediction and
    ground truth get None and are excluded from the mean."""
    tp = np.diag(cm.counts)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - tp
    per_class = [float(tp[c] / denom[c]) if denom[c] > 0 else None
                 for c in range(cm.num_classes)]
    present = [v for v in per_class if v is not None]
    if not present:
        raise ValueError("every class is absent; mIoU undefined")
    return float(np.mean(present)), per_class


def evaluate(params, cfg, samples, batch_size: int = 4):
    """Run eval-mode inference over (image, label) pairs and score it.

    Returns a dict with miou, per_class, pixel_acc and the matrix itself.
    """
    cm = ConfusionMatrix(cfg.num_classes)
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = [samples[i] for i in range(start, min(start + batch_size, len(samples)))]
            images = np.stack([s[0] for s in chunk])
            labels = np.stack([s[1] for s in chunk])
            logits = model_forward(params, cfg, T.Tensor(images))["logits"]
            cm.update(np.argmax(logits.data, axis=1), labels)
    mean, per_class = miou(cm)
    return {"miou": mean, "per_class": per_class,
            "pixel_acc": cm.pixel_accuracy(), "confusion": cm}


def env_fingerprint() -> dict:
    """Environment summary recorded next to any timing numbers."""
    fp = {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "threads": {var: os.environ.get(var) for var in
                    ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")},
    }
    try:
        blas = np.__config__.CONFIG["Build Dependencies"]["blas"]
        fp["blas"] = {"name": blas.get("name"), "version": blas.get("version")}
    except Exception:
        fp["blas"] = None
    return fp


def _time_once(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def benchmark_forward(params, cfg, input_shape, n_warmup: int = 3,
                      n_runs: int = 10, seed: int = 0) -> dict:
    """Wall-clock eval-mode forward latency over a fixed random input.

    Warmup runs are excluded. Reports mean/std/median milliseconds, effective
    FPS (from the median, times the batch size), and the environment
    fingerprint.
    """
    if n_runs < 3:
        raise ValueError(f"need n_runs >= 3 for a meaningful spread, got {n_runs}")
    x = T.Tensor(np.random.default_rng(seed).standard_normal(input_shape))
    with T.no_grad():
        for _ in range(n_warmup):
            model_forward(params, cfg, x)
        times = [_time_once(lambda: model_forward(params, cfg, x)) for _ in range(n_runs)]
    ms = 1000.0 * np.asarray(times)
    median = float(np.median(ms))
    return {
        "input_shape": tuple(input_shape),
        "n_warmup": n_warmup,
        "n_runs": n_runs,
        "mean_ms": float(ms.mean()),
        "std_ms": float(ms.std()),
        "median_ms": median,
        "fps": float(input_shape[0] * 1000.0 / median),
        "times_ms": [float(v) for v in ms],
        "env": env_fingerprint(),
    }


def compare_latency(params_a, cfg_a, params_b, cfg_b, input_shape,
                    n_warmup: int = 3, n_runs: int = 15, seed: int = 0) -> dict:
    """Interleaved A/B latency comparison of two models on one input.

    Reps alternate a-b, b-a, a-b, ... so slow machine drift lands on both
    variants equally; back-to-back blocks on a busy single-CPU host can drift
    by more than the difference being measured. Returns per-variant medians
    and the ratio median_a / median_b.
    """
    if n_runs < 3:
        raise ValueError(f"need n_runs >= 3, got {n_runs}")
    x = T.Tensor(np.random.default_rng(seed).standard_normal(input_shape))
    runs = {"a": (params_a, cfg_a), "b": (params_b, cfg_b)}
    times = {"a": [], "b": []}
    with T.no_grad():
        for key in ("a", "b"):
            params, cfg = runs[key]
            for _ in range(n_warmup):
                model_forward(params, cfg, x)
        for rep in range(n_runs):
            order = ("a", "b") if rep % 2 == 0 else ("b", "a")
            for key in order:
                params, cfg = runs[key]
                times[key].append(_time_once(lambda: model_forward(params, cfg, x)))
    med_a = float(np.median(1000.0 * np.asarray(times["a"])))
    med_b = float(np.median(1000.0 * np.asarray(times["b"])))
    return {
        "input_shape": tuple(input_shape),
        "n_runs": n_runs,
        "median_a_ms": med_a,
        "median_b_ms": med_b,
        "ratio": med_a / med_b,
        "env": env_fingerprint(),
    }
