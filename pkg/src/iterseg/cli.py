"""Command-line entry point: ``iterseg train|infer|evaluate|augment|synth``.

Exit codes: 0 success, 2 configuration or checkpoint error, 3 data error,
4 numeric divergence. Diagnostics go to stderr; stdout carries one JSON
summary line per command.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import (
    DataError,
    Sample,
    augment,
    load_augmentation_spec,
    load_dataset,
    read_gray,
    read_split,
    split_ids,
    synth_corpus,
    write_dataset,
    write_mask_png,
    write_soft_pgm,
)
from .engine import DivergenceError, IterationRecord, refine, train, write_trace_csv
from .network import ConfigError, build

logger = logging.getLogger("iterseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _threads() -> int:
    raw = os.environ.get("ITERSEG_THREADS")
    if not raw:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ITERSEG_THREADS must be an integer, got {raw!r}") from None


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "max_iter", None) is not None:
        changes["max_iterations"] = args.max_iter
    return cfg.replace(**changes) if changes else cfg


def _run_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg.tag}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_samples(cfg: RunConfig, which: str) -> list[Sample]:
    """Samples of one split ('train' or 'test') from disk or the synthetic corpus."""
    resolution = (cfg.input_height, cfg.input_width)
    if not cfg.data_root:
        samples = synth_corpus(
            cfg.synth_count, resolution, cfg.synth_family, cfg.seed, cfg.synth_contrast, cfg.synth_noise
        )
        n_test = min(cfg.synth_test_count, len(samples))
        return samples[: len(samples) - n_test] if which == "train" else samples[len(samples) - n_test :]
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    split = read_split(root)
    if not split and cfg.train_count is not None:
        stems = sorted(p.stem for p in (root / "images").glob("*"))
        split = split_ids(stems, cfg.train_count, cfg.seed)
    ids = None if not split else [k for k, v in split.items() if v == which]
    return load_dataset(root, resolution, cfg.allow_color, ids=ids)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def cmd_train(args) -> int:
    cfg = _config(args)
    samples = _split_samples(cfg, "train")
    if not samples:
        raise DataError("no training samples found")
    if cfg.augment:
        spec = load_augmentation_spec(cfg.augment)
        samples = [v for s in samples for v in augment(s, spec)]
    out = _run_dir(args, cfg)
    (out / "config.txt").write_text(cfg.to_text())
    params = build(cfg.network(), cfg.seed, cfg.dtype)
    params, history = train(
        params,
        samples,
        cfg.iteration(),
        cfg.optim(),
        epochs=cfg.epochs,
        seed=cfg.seed,
        loss_cfg=cfg.loss(),
        record_timing=cfg.record_timing,
    )
    save_checkpoint(params, out / "checkpoint.iseg")
    records = [r for summary in history for r in summary.records()]
    write_trace_csv(out / "train_trace.csv", records)
    last = history[-1].records()
    _emit(
        {
            "command": "train",
            "run_dir": str(out),
            "samples": len(samples),
            "epochs": cfg.epochs,
            "final_dice": [round(r.dice, 6) for r in last],
        }
    )
    return EXIT_OK


def _load_image(path, cfg: RunConfig) -> np.ndarray:
    from PIL import Image

    arr = read_gray(path, cfg.allow_color)
    if arr.shape != (cfg.input_height, cfg.input_width):
        arr = np.array(Image.fromarray(arr).resize((cfg.input_width, cfg.input_height), Image.BILINEAR))
    return arr.astype(np.float64) / 255.0


def cmd_infer(args) -> int:
    cfg = _config(args)
    params = load_checkpoint(args.checkpoint, cfg.network(), cfg.dtype)
    image = _load_image(args.image, cfg)
    out = _run_dir(args, cfg)
    it = cfg.iteration()
    maps, traces = refine(params, image[None], it, ids=[Path(args.image).stem], loss_cfg=cfg.loss(), record_timing=cfg.record_timing)
    final = maps[0]
    write_mask_png(out / "mask.png", final >= it.binarize_threshold)
    write_soft_pgm(out / "soft.pgm", final)
    write_trace_csv(out / "trace.csv", traces[0])
    th = it.threshold_for(final.size)
    _emit(
        {
            "command": "infer",
            "out": str(out),
            "iterations": len(traces[0]),
            "converged": traces[0][-1].conv_sum < th,
            "threshold": th,
        }
    )
    return EXIT_OK


def _carry_forward(trace: list[IterationRecord], steps: int) -> list[IterationRecord]:
    # an image that stopped early keeps its final map for the remaining steps
    out = list(trace)
    last = trace[-1]
    for t in range(len(trace) + 1, steps + 1):
        out.append(IterationRecord(last.image_id, t, last.dice, last.jaccard, last.loss, 0.0, 0.0))
    return out


def evaluate_samples(params, samples: Sequence[Sample], cfg: RunConfig, workers: int = 1) -> list[list[IterationRecord]]:
    """Per-image traces padded to ``max_iterations`` steps, in sample order."""
    it = cfg.iteration()
    chunks = [samples[i : i + cfg.batch_size] for i in range(0, len(samples), cfg.batch_size)]

    def run(chunk):
        x = np.stack([s.image for s in chunk])
        y = np.stack([s.mask for s in chunk])
        _, traces = refine(params, x, it, masks=y, ids=[s.id for s in chunk], loss_cfg=cfg.loss(), record_timing=cfg.record_timing)
        return traces

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, chunks))
    return [_carry_forward(t, it.max_iterations) for traces in results for t in traces]


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    params = load_checkpoint(args.checkpoint, cfg.network(), cfg.dtype)
    samples = _split_samples(cfg, "test")
    if not samples:
        raise DataError("no test samples found")
    out = _run_dir(args, cfg)
    traces = evaluate_samples(params, samples, cfg, _threads())
    steps = cfg.max_iterations
    curve = []
    for t in range(steps):
        dcs = [tr[t].dice for tr in traces]
        jcs = [tr[t].jaccard for tr in traces]
        curve.append((t + 1, float(np.mean(dcs)), float(np.mean(jcs))))
    rows = [r for tr in traces for r in tr]
    final_dc, final_jc = curve[-1][1], curve[-1][2]
    rows.append(IterationRecord("mean", steps, final_dc, final_jc, float(np.mean([tr[-1].loss for tr in traces])), 0.0, 0.0))
    write_trace_csv(out / "eval.csv", rows)
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration", "mean_dice", "mean_jaccard", "images"))
        for t, dc, jc in curve:
            w.writerow((t, repr(dc), repr(jc), len(traces)))
    _emit(
        {
            "command": "evaluate",
            "out": str(out),
            "images": len(traces),
            "mean_dice": [round(c[1], 6) for c in curve],
            "mean_jaccard": [round(c[2], 6) for c in curve],
        }
    )
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _config(args)
    root = Path(args.dataset or cfg.data_root or "")
    if not str(root) or not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    spec = load_augmentation_spec(args.spec or cfg.augment or "identity")
    split = read_split(root)
    ids = [k for k, v in split.items() if v == "train"] if split else None
    samples = load_dataset(root, None, cfg.allow_color, ids=ids)
    out = Path(args.out) if args.out else _run_dir(args, cfg)
    suffix = "." + args.format

    def work(sample):
        variants = augment(sample, spec)
        write_dataset(out, variants, suffix=suffix)
        return [v.id for v in variants]

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        written = [vid for ids_ in pool.map(work, samples) for vid in ids_]
    (out / "split.txt").write_text("".join(f"{v},train\n" for v in written))
    _emit({"command": "augment", "out": str(out), "images": len(samples), "variants_per_image": len(spec), "files": len(written)})
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _run_dir(args, cfg)
    samples = synth_corpus(
        cfg.synth_count,
        (cfg.input_height, cfg.input_width),
        cfg.synth_family,
        cfg.seed,
        cfg.synth_contrast,
        cfg.synth_noise,
    )
    n_test = min(cfg.synth_test_count, len(samples))
    split = {s.id: ("test" if i >= len(samples) - n_test else "train") for i, s in enumerate(samples)}
    write_dataset(out, samples, split)
    _emit({"command": "synth", "out": str(out), "samples": len(samples), "test": n_test})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iterseg", description="Iterative encoder-decoder segmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, max_iter=True):
        p.add_argument("--config", help="key = value run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default runs/<timestamp>-<tag>)")
        if max_iter:
            p.add_argument("--max-iter", type=int, dest="max_iter")

    p = sub.add_parser("train", help="train a network and write checkpoint.iseg")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="per-iteration DC/JC on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("augment", help="materialise the augmentation grid on disk")
    common(p, max_iter=False)
    p.add_argument("--dataset", help="dataset root (default: data_root from config)")
    p.add_argument("--spec", help="preset (identity, ph2, drive) or spec file")
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p, max_iter=False)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        return _fail(exc, EXIT_CONFIG)
    except DataError as exc:
        return _fail(exc, EXIT_DATA)
    except DivergenceError as exc:
        return _fail(exc, EXIT_DIVERGED)


def _fail(exc: Exception, code: int) -> int:
    print(f"iterseg: error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
