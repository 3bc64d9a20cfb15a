"""Ablation grids: decoder variants and flow-conv kernel sizes.

The variant grid crosses {bilinear upsampling, flow alignment} with
{with, without} the pyramid pooling context head, each over several seeds;
the kernel grid sweeps the flow subnet's kernel size at one seed. Both
return one row per run with the validation mIoU and the analytic GFLOPs of
the trained configuration.

The protocol is sized for a CPU desk run: a 64x64 crop leaves a 2x2 top
feature map, so the context head uses bins (1, 2) and the model runs at
half width. Variants share parameter names for all common layers, so a
paired comparison at equal seeds isolates the decoder change.

Training deviates from the TrainConfig defaults in three measured ways:
plain cross entropy instead of hard-pixel mining (mining from a random
initialization starves the easy interior gradients and stalls all variants
equally), a 3x base learning rate, and a gentler scale jitter (0.9, 1.4)
that keeps shape statistics stable enough for the flow subnet to learn a
systematic correction within the short schedule.
"""

import dataclasses
from pathlib import Path

from .metrics import evaluate
from .model import ModelConfig, count_flops
from .train import TrainConfig, train_loop

VARIANTS = (
    ("fpn_bilinear", {"use_fam": False, "use_ppm": False}),
    ("fpn_fam", {"use_fam": True, "use_ppm": False}),
    ("fpn_ppm", {"use_fam": False, "use_ppm": True}),
    ("fpn_fam_ppm", {"use_fam": True, "use_ppm": True}),
)


def protocol_model_config(**overrides):
    base = dict(stage_channels=(16, 32, 64, 128), fpn_channels=32,
                norm_groups=8, ppm_bins=(1, 2))
    base.update(overrides)
    return ModelConfig(**base)


def protocol_train_config(total_iters=2000, seed=0, **overrides):
    base = dict(total_iters=total_iters, seed=seed, batch_size=4,
                crop_size=64, eval_interval=total_iters if total_iters else 1,
                ohem_keep_frac=1.0, base_lr=0.03, scale_range=(0.9, 1.4))
    base.update(overrides)
    return TrainConfig(**base)


def _train_and_score(train_samples, val_samples, model_cfg, train_cfg,
                     run_dir):
    result = train_loop(train_samples, val_samples, model_cfg, train_cfg,
                        Path(run_dir))
    scores = evaluate(result["params"], model_cfg, val_samples)
    size = val_samples[0][0].shape[1]
    gflops = count_flops(model_cfg, (1, 3, size, size))[0] / 1e9
    return scores["miou"], gflops


def run_variant_grid(train_samples, val_samples, out_dir, total_iters=2000,
                     seeds=(0, 1, 2), num_classes=5, progress=None):
    """One row per (variant, seed): variant, seed, miou, gflops."""
    rows = []
    for name, flags in VARIANTS:
        for seed in seeds:
            model_cfg = protocol_model_config(num_classes=num_classes,
                                              **flags)
            train_cfg = protocol_train_config(total_iters, seed=seed)
            run_dir = Path(out_dir) / f"{name}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            miou, gflops = _train_and_score(train_samples, val_samples,
                                            model_cfg, train_cfg, run_dir)
            rows.append({"variant": name, "seed": seed, "miou": miou,
                         "gflops": gflops})
            if progress is not None:
                progress(rows[-1])
    return rows


def run_kernel_grid(train_samples, val_samples, out_dir, total_iters=2000,
                    seed=0, kernels=(1, 3, 5, 7), num_classes=5,
                    progress=None):
    """One row per kernel size at a shared seed, FAM-only decoder."""
    rows = []
    for k in kernels:
        model_cfg = protocol_model_config(num_classes=num_classes,
                                          use_fam=True, use_ppm=False)
        model_cfg = dataclasses.replace(
            model_cfg, fam=dataclasses.replace(model_cfg.fam, kernel_size=k))
        train_cfg = protocol_train_config(total_iters, seed=seed)
        run_dir = Path(out_dir) / f"k{k}_seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        miou, gflops = _train_and_score(train_samples, val_samples,
                                        model_cfg, train_cfg, run_dir)
        rows.append({"kernel_size": k, "seed": seed, "miou": miou,
                     "gflops": gflops})
        if progress is not None:
            progress(rows[-1])
    return rows


def variant_means(rows):
    means = {}
    for name, _ in VARIANTS:
        vals = [r["miou"] for r in rows if r["variant"] == name]
        if vals:
            means[name] = sum(vals) / len(vals)
    return means
