"""Figures and delimited tables for training, evaluation and ablation runs.

Every reporting entry point takes already-computed results and an output
directory and writes both machine-readable tables (CSV / JSON) and rendered
matplotlib figures next to them. Nothing here feeds back into computation,
so report styling can change without touching any numeric contract.
"""

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def _save(fig, path):
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)


def read_train_log(log_path):
    """Parse a train_log.jsonl into (header, rows)."""
    with open(log_path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines:
        return {}, []
    return lines[0], [row for row in lines[1:] if "iter" in row]


def training_report(log_path, out_dir):
    """Loss / lr curves (and validation mIoU when logged) from a JSONL log."""
    out = Path(out_dir)
    header, rows = read_train_log(log_path)
    if not rows:
        return []
    iters = [r["iter"] for r in rows]
    losses = [r["loss"] for r in rows]
    lrs = [r["lr"] for r in rows]
    evals = [(r["iter"], r["val_miou"]) for r in rows if "val_miou" in r]

    fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(iters, losses, lw=0.9, color="tab:blue")
    ax_loss.set_ylabel("training loss")
    ax_loss.grid(alpha=0.3)
    if evals:
        ax_val = ax_loss.twinx()
        ax_val.plot(*zip(*evals), "o-", color="tab:green", ms=4)
        ax_val.set_ylabel("val mIoU", color="tab:green")
    ax_lr.plot(iters, lrs, lw=0.9, color="tab:orange")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("iteration")
    ax_lr.grid(alpha=0.3)
    seed = header.get("seed")
    ax_loss.set_title(f"training run (seed {seed})" if seed is not None
                      else "training run")
    fig_path = out / "train_curves.png"
    _save(fig, fig_path)
    return [fig_path]


def eval_report(results, class_names, gflops, out_dir, latency=None):
    """Write eval_report.json, per_class_iou.csv and two figures.

    results comes from metrics.evaluate; latency, when given, is the dict
    from metrics.benchmark_forward.
    """
    out = Path(out_dir)
    per_class = results["per_class"]
    payload = {
        "miou": results["miou"],
        "pixel_acc": results["pixel_acc"],
        "per_class_iou": {name: per_class[i]
                          for i, name in enumerate(class_names)},
        "gflops": gflops,
    }
    if latency is not None:
        payload["latency"] = latency
    with open(out / "eval_report.json", "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")

    write_csv(out / "per_class_iou.csv", ["class", "iou"],
              [(name, "" if per_class[i] is None else f"{per_class[i]:.6f}")
               for i, name in enumerate(class_names)])

    vals = [0.0 if v is None else v for v in per_class]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    bars = ax.bar(range(len(class_names)), vals, color="tab:blue")
    for i, v in enumerate(per_class):
        if v is None:
            bars[i].set_color("lightgray")
    ax.set_xticks(range(len(class_names)))
    ax.set_xticklabels(class_names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(f"per-class IoU (mIoU {results['miou']:.3f})")
    ax.grid(axis="y", alpha=0.3)
    figs = [out / "iou_per_class.png"]
    _save(fig, figs[0])

    cm = results["confusion"]
    cm = np.asarray(getattr(cm, "counts", cm), dtype=float)
    row_sums = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, row_sums, out=np.zeros_like(cm),
                     where=row_sums > 0)
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    im = ax.imshow(frac, cmap="viridis", vmin=0, vmax=1)
    ax.set_xticks(range(len(class_names)))
    ax.set_yticks(range(len(class_names)))
    ax.set_xticklabels(class_names, rotation=45, ha="right", fontsize=8)
    ax.set_yticklabels(class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    ax.set_title("row-normalized confusion")
    fig.colorbar(im, shrink=0.8)
    figs.append(out / "confusion.png")
    _save(fig, figs[1])
    return figs


def ablation_report(rows, out_dir, filename="ablation"):
    """Variant table plus a seed-scatter bar figure.

    rows are dicts with keys variant, seed, miou, gflops.
    """
    out = Path(out_dir)
    csv_path = out / f"{filename}.csv"
    write_csv(csv_path, ["variant", "seed", "miou", "gflops"],
              [(r["variant"], r["seed"], f"{r['miou']:.6f}",
                f"{r['gflops']:.4f}") for r in rows])

    variants = list(dict.fromkeys(r["variant"] for r in rows))
    means = [np.mean([r["miou"] for r in rows if r["variant"] == v])
             for v in variants]
    fig, ax = plt.subplots(figsize=(6.4, 3.4))
    ax.bar(range(len(variants)), means, color="tab:blue", alpha=0.7)
    for i, v in enumerate(variants):
        seeds = [r["miou"] for r in rows if r["variant"] == v]
        ax.plot([i] * len(seeds), seeds, "k.", ms=7)
    ax.set_xticks(range(len(variants)))
    ax.set_xticklabels(variants, rotation=20, ha="right")
    ax.set_ylabel("val mIoU")
    ax.set_title("ablation (bars = seed means, dots = runs)")
    ax.grid(axis="y", alpha=0.3)
    fig_path = out / f"{filename}.png"
    _save(fig, fig_path)
    return [csv_path, fig_path]


def kgrid_report(rows, out_dir):
    """Kernel-size grid table plus mIoU / GFLOPs trade-off figure.

    rows are dicts with keys kernel_size, seed, miou, gflops.
    """
    out = Path(out_dir)
    csv_path = out / "kgrid.csv"
    write_csv(csv_path, ["kernel_size", "seed", "miou", "gflops"],
              [(r["kernel_size"], r["seed"], f"{r['miou']:.6f}",
                f"{r['gflops']:.4f}") for r in rows])

    ks = [r["kernel_size"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    ax.plot(ks, [r["miou"] for r in rows], "o-", color="tab:blue")
    ax.set_xlabel("flow conv kernel size")
    ax.set_ylabel("val mIoU", color="tab:blue")
    ax.set_xticks(ks)
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(ks, [r["gflops"] for r in rows], "s--", color="tab:orange")
    ax2.set_ylabel("GFLOPs", color="tab:orange")
    ax.set_title("kernel-size grid")
    fig_path = out / "kgrid.png"
    _save(fig, fig_path)
    return [csv_path, fig_path]


def bench_report(stats, out_dir):
    """Latency stats as JSON plus a per-run timing figure."""
    out = Path(out_dir)
    with open(out / "bench.json", "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    times = stats["times_ms"]
    fig, ax = plt.subplots(figsize=(5.6, 3.0))
    ax.plot(range(1, len(times) + 1), times, "o-", color="tab:blue")
    ax.axhline(stats["median_ms"], color="tab:orange", ls="--",
               label=f"median {stats['median_ms']:.1f} ms")
    ax.set_xlabel("run")
    ax.set_ylabel("forward latency (ms)")
    ax.set_title(f"input {tuple(stats['input_shape'])}")
    ax.legend()
    ax.grid(alpha=0.3)
    fig_path = out / "bench_times.png"
    _save(fig, fig_path)
    return [out / "bench.json", fig_path]
