"""Command-line entry point wiring every module together.

Subcommands: gen-data, train, eval, gradcheck, bench, viz, ablate.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O or
data error. Failures print exactly one line to stderr of the form
"error: <kind>: <message>". Every training-style command writes the merged
effective config into its output directory, so any run can be reproduced
from its artifacts.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .ablate import (run_kernel_grid, run_variant_grid, variant_means)
from .config import (build_configs, deep_merge, load_config_file,
                     write_effective_config)
from .data import class_palette, gen_synthetic, load_dataset
from .errors import ConfigError, DataError, NumericError
from .gradcheck import SCOPES, run_scope
from .metrics import benchmark_forward, evaluate
from .model import count_flops, init_params, model_forward
from .netpbm import read_pgm, read_ppm
from .report import (ablation_report, bench_report, eval_report,
                     kgrid_report, training_report)
from .tensor import load_into
from .train import train_loop
from .viz import (error_map, feature_heatmap, flow_arrows, flow_to_color,
                  upsample_flow_for_view, write_ppm)
from .warp import resize_bilinear


def _write_json(payload, path):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model_from(checkpoint, config_path=None):
    ckpt = Path(checkpoint)
    cfg_path = Path(config_path) if config_path else ckpt.parent / "config.json"
    model_cfg, _ = build_configs(load_config_file(cfg_path),
                                 require_train=False)
    params = init_params(model_cfg, np.random.default_rng(0))
    load_into(params, ckpt)
    return params, model_cfg


def _check_classes(model_cfg, ds):
    if model_cfg.num_classes != ds.num_classes:
        raise ConfigError(
            f"model.num_classes {model_cfg.num_classes} does not match "
            f"dataset num_classes {ds.num_classes}")


def cmd_gen_data(args):
    manifest = gen_synthetic(args.out, seed=args.seed, n_train=args.n_train,
                             n_val=args.n_val, size=args.size,
                             num_classes=args.classes)
    print(f"wrote {manifest['n_samples']} samples "
          f"({len(manifest['splits']['train'])} train / "
          f"{len(manifest['splits']['val'])} val) to {args.out}")
    return 0


def _train_overrides(args):
    model = {}
    fam = {}
    train = {}
    if args.no_fam:
        model["use_fam"] = False
    if args.fam_k is not None:
        fam["kernel_size"] = args.fam_k
    if args.upsample is not None:
        fam["upsample_mode"] = args.upsample
    if fam:
        model["fam"] = fam
    if args.seed is not None:
        train["seed"] = args.seed
    if args.iters is not None:
        train["total_iters"] = args.iters
    out = {}
    if model:
        out["model"] = model
    if train:
        out["train"] = train
    return out


def cmd_train(args):
    raw = load_config_file(args.config) if args.config else {}
    model_cfg, train_cfg = build_configs(deep_merge(raw,
                                                    _train_overrides(args)))
    ds = load_dataset(args.data)
    _check_classes(model_cfg, ds)
    out = _out_dir(args.out)
    write_effective_config(model_cfg, train_cfg, out / "config.json")
    _write_json({"command": "train", "data": str(args.data)},
                out / "run_meta.json")
    result = train_loop(ds.split("train"), ds.split("val"), model_cfg,
                        train_cfg, out)
    training_report(result["log_path"], out)
    best = result["best_miou"]
    loss = result["final_loss"]
    print(f"trained {train_cfg.total_iters} iters"
          + (f"; final loss {loss:.4f}" if loss is not None else "")
          + (f"; best val mIoU {best:.4f}" if best is not None else "")
          + f"; checkpoints in {out}")
    return 0


def cmd_eval(args):
    params, model_cfg = _load_model_from(args.checkpoint, args.config)
    ds = load_dataset(args.data)
    _check_classes(model_cfg, ds)
    samples = ds.split(args.split)
    results = evaluate(params, model_cfg, samples)
    size = ds.manifest["image_size"]
    gflops = count_flops(model_cfg, (1, 3, size, size))[0] / 1e9
    latency = benchmark_forward(params, model_cfg, (1, 3, size, size),
                                n_warmup=2, n_runs=5)
    out = _out_dir(args.out_report)
    eval_report(results, ds.class_names, gflops, out, latency=latency)
    print(f"mIoU {results['miou']:.4f}, pixel acc "
          f"{results['pixel_acc']:.4f} over {len(samples)} samples; "
          f"report in {out}")
    return 0


def cmd_gradcheck(args):
    scopes = list(SCOPES) if args.scope == "all" else [args.scope]
    failed = False
    for scope in scopes:
        res = run_scope(scope, seeds=range(args.seeds))
        print(res.line())
        failed = failed or not res.passed
    if failed:
        raise NumericError("gradient check exceeded tolerance")
    return 0


def _parse_shape(text):
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"cannot parse shape {text!r}")
    if len(dims) == 2:
        dims = (1, 3) + dims
    if len(dims) != 4 or dims[1] != 3 or any(d < 1 for d in dims):
        raise ConfigError(f"shape must be HxW or Nx3xHxW, got {text!r}")
    return dims


def cmd_bench(args):
    params, model_cfg = _load_model_from(args.checkpoint, args.config)
    shape = _parse_shape(args.shape)
    stats = benchmark_forward(params, model_cfg, shape, n_warmup=args.warmup,
                              n_runs=args.runs)
    out = _out_dir(args.out)
    bench_report(stats, out)
    print(f"median {stats['median_ms']:.1f} ms ({stats['fps']:.1f} fps) "
          f"at {shape}; report in {out}")
    return 0


def cmd_viz(args):
    params, model_cfg = _load_model_from(args.checkpoint, args.config)
    image = read_ppm(args.image)
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise ConfigError(f"image size must be a multiple of 32, "
                          f"got {w}x{h}")
    x = T.Tensor(image.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)
    with T.no_grad():
        result = model_forward(params, model_cfg, x, collect=True)
    out = _out_dir(args.out_dir)
    palette = class_palette(model_cfg.num_classes)
    pred = np.argmax(result["logits"].data[0], axis=0)
    write_ppm(np.clip(np.rint(palette[pred] * 255.0), 0, 255)
              .astype(np.uint8), out / "prediction.ppm")
    written = 1

    for name, flow in result.get("flows", {}).items():
        if args.flow != "all" and args.flow != name:
            continue
        native = flow.data[0]
        view = upsample_flow_for_view(native, h, w)
        write_ppm(flow_to_color(view), out / f"flow_{name}_color.ppm")
        factor = h / native.shape[1]
        write_ppm(flow_arrows(view, stride=max(4, h // 16), scale=factor),
                  out / f"flow_{name}_arrows.ppm")
        written += 2
    for level, feat in result.get("refined", {}).items():
        with T.no_grad():
            view = resize_bilinear(feat, h, w)
        write_ppm(feature_heatmap(view), out / f"feat{level}_heat.ppm")
        written += 1
    if args.label:
        gt = read_pgm(args.label).astype(np.int64)
        write_ppm(error_map(pred, gt, palette), out / "error_map.ppm")
        written += 1
    print(f"wrote {written} images to {out}")
    return 0


def cmd_ablate(args):
    ds = load_dataset(args.data)
    train_samples = ds.split("train")
    val_samples = ds.split("val")
    out = _out_dir(args.out)
    seeds = tuple(args.seeds)

    def progress(row):
        keys = [k for k in ("variant", "kernel_size") if k in row]
        tag = f"{row[keys[0]]}" if keys else "?"
        print(f"  {tag:>14} seed {row['seed']}: mIoU {row['miou']:.4f}, "
              f"{row['gflops']:.3f} GFLOPs", flush=True)

    print(f"variant grid ({len(seeds)} seeds x 4 variants, "
          f"{args.iters} iters each)")
    rows = run_variant_grid(train_samples, val_samples, out / "runs",
                            total_iters=args.iters, seeds=seeds,
                            num_classes=ds.num_classes, progress=progress)
    ablation_report(rows, out)
    print(f"kernel grid (seed {seeds[0]})")
    krows = run_kernel_grid(train_samples, val_samples, out / "runs",
                            total_iters=args.iters, seed=seeds[0],
                            num_classes=ds.num_classes, progress=progress)
    kgrid_report(krows, out)
    means = variant_means(rows)
    for name, val in means.items():
        print(f"{name:>14}: mean mIoU {val:.4f}")
    print(f"tables and figures in {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sfalign",
        description="Semantic segmentation with flow-aligned feature "
                    "pyramids: data, training, evaluation, inspection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=5)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", help="JSON run config (flags override it)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, help="override train.total_iters")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--no-fam", action="store_true",
                   help="plain bilinear top-down path")
    p.add_argument("--fam-k", type=int, choices=(1, 3, 5, 7),
                   help="flow conv kernel size")
    p.add_argument("--upsample", choices=("bilinear", "nearest"),
                   help="flow subnet upsampling mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-report", required=True)
    p.add_argument("--config", help="config path (default: next to ckpt)")
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient verification")
    p.add_argument("--scope", default="all",
                   choices=("all",) + tuple(SCOPES))
    p.add_argument("--seeds", type=int, default=10,
                   help="number of seeded cases per scope")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="forward latency of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shape", default="256x256", help="HxW or Nx3xHxW")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="config path (default: next to ckpt)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("viz", help="render prediction, flows, features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PPM")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--label", help="ground-truth PGM for the error map")
    p.add_argument("--flow", default="all",
                   help="which flow field to render (default all)")
    p.add_argument("--config", help="config path (default: next to ckpt)")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("ablate", help="decoder variant and kernel grids")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {_one_line(e)}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: numeric: {_one_line(e)}", file=sys.stderr)
        return 3
    except (DataError, OSError) as e:
        print(f"error: io: {_one_line(e)}", file=sys.stderr)
        return 4


def _one_line(exc):
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
