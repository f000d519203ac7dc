"""Command-line entry points: train, eval, ablate and bench.

Every command writes its tables as CSV with a header row and its figures as
PNG files under ``--out`` (default ``$WSODKIT_OUT/<command>``, or
``./runs/<command>`` when the variable is unset).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import RunConfig, generate_scene
from .evalmetrics import format_report, write_metric_table
from .model import ImageTarget, WSODNet, rois_tensor
from .seqbp import memory_account
from .train import (
    DATA_SEED,
    RunRecord,
    evaluate_model,
    image_tensor,
    load_checkpoint,
    make_datasets,
    save_checkpoint,
    train,
)

log = logging.getLogger(__name__)

OUT_ENV = "WSODKIT_OUT"

# rows of the module ablation, in the order the trend is expected to rise
ABLATION_VARIANTS: dict[str, dict] = {
    "baseline": dict(selector="top1", use_regression=False, drop="off"),
    "mist_no_reg": dict(selector="mist", use_regression=False, drop="off"),
    "mist": dict(selector="mist", use_regression=True, drop="off"),
    "mist_fixed_drop": dict(selector="mist", use_regression=True, drop="fixed"),
    "mist_concrete_drop": dict(selector="mist", use_regression=True, drop="concrete"),
}
ABLATION_METRICS = ("AP50", "CorLoc", "AR1", "AR10", "AR100")
GRID_P = (0.05, 0.10, 0.15, 0.20, 0.25)
GRID_IOU = (0.1, 0.2, 0.3, 0.4, 0.5)
BENCH_SIZES = (1000, 2000, 3000, 4000, 5000)


def output_dir(out: str | os.PathLike | None, command: str) -> Path:
    if out is not None:
        path = Path(out)
    else:
        path = Path(os.environ.get(OUT_ENV, "runs")) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# ---------------------------------------------------------------- train / eval

def cmd_train(cfg: RunConfig, out: str | os.PathLike | None = None, dtype=torch.float32,
              evaluate: bool = True) -> RunRecord:
    """Train on the synthetic split, persist checkpoint, config, losses and record."""
    out_dir = output_dir(out, "train")
    cfg.validate().save(out_dir / "config.json")
    train_scenes, test_scenes = make_datasets(cfg)
    model, record = train(cfg, train_scenes, out_dir=out_dir, dtype=dtype)
    if evaluate:
        record.metrics = evaluate_model(model, test_scenes, cfg, train_scenes=train_scenes[: cfg.num_test])
        write_metric_table(out_dir / "metrics.csv", record.metrics)
    record.save(out_dir / "record.json")
    write_csv(out_dir / "losses.csv", ["iteration", "loss"], [(i, _fmt(v)) for i, v in enumerate(record.losses)])
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(record.losses, lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(out_dir / "loss.png", dpi=120)
    plt.close(fig)
    return record


def cmd_eval(checkpoint: str | os.PathLike, split: str = "test", out: str | os.PathLike | None = None) -> dict:
    """Evaluate a checkpoint; CorLoc is measured on the training split as usual."""
    if split not in ("train", "test"):
        raise ValueError("split must be train or test")
    model, cfg = load_checkpoint(checkpoint)
    train_scenes, test_scenes = make_datasets(cfg)
    scenes = test_scenes if split == "test" else train_scenes
    metrics = evaluate_model(model, scenes, cfg, train_scenes=train_scenes[: cfg.num_test])
    out_dir = output_dir(out, "eval")
    write_metric_table(out_dir / f"metrics_{split}.csv", metrics)
    (out_dir / f"report_{split}.txt").write_text(format_report(metrics) + "\n")
    return metrics


# --------------------------------------------------------------------- ablate

def _train_eval(cfg: RunConfig, scenes) -> dict:
    train_scenes, test_scenes = scenes
    model, _ = train(cfg, train_scenes)
    return evaluate_model(model, test_scenes, cfg, train_scenes=train_scenes[: cfg.num_test])


def run_ablation(cfg: RunConfig, seeds: Sequence[int], variants: Sequence[str] | None = None,
                 callback=None) -> list[dict]:
    """One row per (variant, seed) with the ablation metrics."""
    scenes = make_datasets(cfg)
    rows = []
    for name in variants or ABLATION_VARIANTS:
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, **ABLATION_VARIANTS[name]).validate()
            t0 = time.perf_counter()
            metrics = _train_eval(run_cfg, scenes)
            row = {"variant": name, "seed": seed, **{m: metrics[m] for m in ABLATION_METRICS},
                   "seconds": time.perf_counter() - t0}
            rows.append(row)
            if callback is not None:
                callback(row)
    return rows


def summarize(rows: Sequence[dict], metrics: Sequence[str] = ABLATION_METRICS) -> dict[str, dict]:
    """``variant -> {metric: (mean, sd)}`` with the sample standard deviation."""
    out: dict[str, dict] = {}
    for name in dict.fromkeys(r["variant"] for r in rows):
        sel = [r for r in rows if r["variant"] == name]
        out[name] = {}
        for m in metrics:
            v = np.array([r[m] for r in sel], dtype=float)
            out[name][m] = (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0)
    return out


def run_grid(cfg: RunConfig, seeds: Sequence[int], ps: Sequence[float] = GRID_P,
             ious: Sequence[float] = GRID_IOU, callback=None) -> np.ndarray:
    """AP50 for every (seed, p, IoU) cell; shape ``(len(seeds), len(ps), len(ious))``."""
    scenes = make_datasets(cfg)
    grid = np.full((len(seeds), len(ps), len(ious)), np.nan)
    for s, seed in enumerate(seeds):
        for i, p in enumerate(ps):
            for j, tau in enumerate(ious):
                run_cfg = replace(cfg, seed=seed, p=p, mist_iou_tau=tau).validate()
                grid[s, i, j] = _train_eval(run_cfg, scenes)["AP50"]
                if callback is not None:
                    callback(seed, p, tau, grid[s, i, j])
    return grid


def interior_argmax(table: np.ndarray) -> bool:
    """True when the maximum of a 2-D table is attained only away from its border."""
    peak = np.nanmax(table)
    hits = np.argwhere(table == peak)
    rows, cols = table.shape
    return all(0 < i < rows - 1 and 0 < j < cols - 1 for i, j in hits)


@dataclass
class AblationResult:
    rows: list[dict]
    summary: dict[str, dict]
    grid: np.ndarray | None = None
    grid_seeds: list[int] = field(default_factory=list)


def write_ablation(out_dir: Path, res: AblationResult) -> None:
    write_csv(out_dir / "ablation_runs.csv", ["variant", "seed", *ABLATION_METRICS, "seconds"],
              [[r["variant"], r["seed"], *(_fmt(r[m]) for m in ABLATION_METRICS), _fmt(r["seconds"])]
               for r in res.rows])
    header = ["variant"] + [f"{m}_{k}" for m in ABLATION_METRICS for k in ("mean", "sd")]
    write_csv(out_dir / "ablation.csv", header,
              [[name] + [_fmt(v) for m in ABLATION_METRICS for v in stats[m]]
               for name, stats in res.summary.items()])
    plt = _pyplot()
    names = list(res.summary)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    means = [res.summary[n]["AP50"][0] for n in names]
    sds = [res.summary[n]["AP50"][1] for n in names]
    ax.bar(range(len(names)), means, yerr=sds, capsize=3, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("AP50 (mean over seeds)")
    fig.tight_layout()
    fig.savefig(out_dir / "ablation.png", dpi=120)
    plt.close(fig)
    if res.grid is None:
        return
    rows = []
    for s, seed in enumerate(res.grid_seeds):
        for i, p in enumerate(GRID_P):
            for j, tau in enumerate(GRID_IOU):
                rows.append([seed, p, tau, _fmt(float(res.grid[s, i, j]))])
    write_csv(out_dir / "grid.csv", ["seed", "p", "iou", "AP50"], rows)
    mean = res.grid.mean(axis=0)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(mean, cmap="viridis", origin="lower")
    ax.set_xticks(range(len(GRID_IOU)), [f"{v:.1f}" for v in GRID_IOU])
    ax.set_yticks(range(len(GRID_P)), [f"{v:.2f}" for v in GRID_P])
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("p")
    for i in range(len(GRID_P)):
        for j in range(len(GRID_IOU)):
            ax.text(j, i, f"{mean[i, j]:.2f}", ha="center", va="center", fontsize=7, color="w")
    fig.colorbar(im, ax=ax, label="AP50")
    fig.tight_layout()
    fig.savefig(out_dir / "grid.png", dpi=120)
    plt.close(fig)


def cmd_ablate(cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2), out: str | os.PathLike | None = None,
               grid: bool = True, grid_seeds: Sequence[int] | None = None,
               grid_cfg: RunConfig | None = None) -> AblationResult:
    """Module ablation over ``seeds`` plus the p x IoU sensitivity grid."""
    out_dir = output_dir(out, "ablate")
    cfg.validate().save(out_dir / "config.json")
    rows = run_ablation(cfg, seeds, callback=lambda r: log.info("%s", r))
    res = AblationResult(rows, summarize(rows))
    if grid:
        gseeds = list(grid_seeds if grid_seeds is not None else seeds)
        gcfg = grid_cfg or replace(cfg, **ABLATION_VARIANTS["mist"])
        res.grid = run_grid(gcfg, gseeds)
        res.grid_seeds = gseeds
    write_ablation(out_dir, res)
    return res


# ---------------------------------------------------------------------- bench

def bench_model(cfg: RunConfig) -> WSODNet:
    """Toy detector whose memory is dominated by the Base, as with a real backbone.

    The per-region Head is kept narrow so that everything still scaling with N
    under sequential back-propagation is small next to the Base activations.
    """
    return WSODNet(cfg.num_classes, students=cfg.students, drop=cfg.drop, drop_tau=cfg.drop_clamp_tau,
                   block_size=cfg.block_size, temperature=cfg.gumbel_temperature, p=cfg.p,
                   tau=cfg.mist_iou_tau, base_widths=(16, 32), hidden=32, emb_dim=8,
                   drop_width=cfg.drop_width)


def run_bench(cfg: RunConfig, sizes: Sequence[int] = BENCH_SIZES, image_size: int = 512,
              repeats: int = 2) -> list[dict]:
    """Peak activation units and seconds per iteration for both modes at every N."""
    torch.manual_seed(cfg.seed)
    model = bench_model(cfg).train()
    graph = model.graph()
    rng = np.random.default_rng(DATA_SEED)
    rows = []
    for n in sizes:
        scene = generate_scene(rng, cfg.num_classes, cfg.max_instances, image_size, image_id=f"bench{n}",
                               num_proposals=(n, n))
        boxes = scene.proposals.as_array()[:n]
        target = ImageTarget(boxes, scene.image_label)
        img, rois = image_tensor(scene), rois_tensor(boxes)
        gen = torch.Generator().manual_seed(cfg.seed)
        noise = graph.sample_noise(len(boxes), gen, img.dtype)
        for mode in ("vanilla", "seqbp"):
            peaks, secs = [], []
            for _ in range(repeats):
                model.zero_grad(set_to_none=True)
                rep = memory_account(graph, img, rois, target, mode, cfg.sub_batch_size, noise=noise)
                peaks.append(rep["peak_activation_units"])
                secs.append(rep["wall_time"])
            rows.append({"N": n, "mode": mode, "peak_units": int(max(peaks)), "seconds": float(np.median(secs))})
    return rows


def cmd_bench(cfg: RunConfig, sizes: Sequence[int] = BENCH_SIZES, out: str | os.PathLike | None = None,
              repeats: int = 2) -> list[dict]:
    out_dir = output_dir(out, "bench")
    rows = run_bench(cfg, sizes, repeats=repeats)
    write_csv(out_dir / "bench.csv", ["N", "mode", "peak_units", "seconds"],
              [[r["N"], r["mode"], r["peak_units"], _fmt(r["seconds"])] for r in rows])
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for mode, style in (("vanilla", "o-"), ("seqbp", "s-")):
        sel = [r for r in rows if r["mode"] == mode]
        ns = [r["N"] for r in sel]
        axes[0].plot(ns, [r["peak_units"] / 1e6 for r in sel], style, label=mode)
        axes[1].plot(ns, [r["seconds"] for r in sel], style, label=mode)
    axes[0].set_ylabel("peak activations (M elements)")
    axes[1].set_ylabel("seconds / iteration")
    for ax in axes:
        ax.set_xlabel("proposals N")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "bench.png", dpi=120)
    plt.close(fig)
    return rows


# ----------------------------------------------------------------------- main

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--mode", choices=["vanilla", "seqbp"])
    p.add_argument("--sub-batch", dest="sub_batch_size", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--mist-iou", dest="mist_iou_tau", type=float)
    p.add_argument("--drop", choices=["off", "fixed", "concrete"])
    p.add_argument("--drop-tau", dest="drop_clamp_tau", type=float)
    p.add_argument("--students", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--literal-image-loss", action="store_true", default=None)
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.load(args.config).to_dict() if getattr(args, "config", None) else {}
    keys = ("mode", "sub_batch_size", "p", "mist_iou_tau", "drop", "drop_clamp_tau", "students", "seed",
            "iterations", "literal_image_loss")
    base.update({k: getattr(args, k) for k in keys if getattr(args, k, None) is not None})
    return RunConfig.from_dict(base)


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsodkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="module ablation and p x IoU grid")
    _add_config_flags(p)
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    p.add_argument("--grid-seeds", type=_seeds)
    p.add_argument("--no-grid", action="store_true")

    p = sub.add_parser("bench", help="memory / time sweep over the number of proposals")
    _add_config_flags(p)
    p.add_argument("--sizes", type=_seeds, default=list(BENCH_SIZES))
    p.add_argument("--repeats", type=int, default=2)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train":
        rec = cmd_train(config_from_args(args), args.out)
        print(format_report(rec.metrics))
    elif args.command == "eval":
        try:
            metrics = cmd_eval(args.checkpoint, args.split, args.out)
        except FileNotFoundError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(format_report(metrics))
    elif args.command == "ablate":
        res = cmd_ablate(config_from_args(args), args.seeds, args.out, grid=not args.no_grid,
                         grid_seeds=args.grid_seeds)
        for name, stats in res.summary.items():
            print(f"{name:20s} " + "  ".join(f"{m} {mu:.3f}±{sd:.3f}" for m, (mu, sd) in stats.items()))
    elif args.command == "bench":
        for r in cmd_bench(config_from_args(args), args.sizes, args.out, args.repeats):
            print(f"N={r['N']:5d} {r['mode']:8s} peak={r['peak_units']:>10d} {r['seconds']:.3f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
