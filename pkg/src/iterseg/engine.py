"""Iterative refinement: feed (image, previous map) back through the network
until consecutive maps stop changing, and train the network that way."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .metrics import LossConfig, binarize, dice, iter_loss, jaccard, soft_dice
from .network import NetworkConfig, ParameterSet, SegmentationMap, forward
from .tensor import SGD, Tensor, backward

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("image_id", "iteration", "dice", "jaccard", "loss", "conv_sum", "ms")
INITIAL_VALUE = 0.5


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class IterationConfig:
    # None means 0.001 * number of pixels
    threshold: Optional[float] = None
    max_iterations: int = 8
    binarize_feedback: bool = True
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if self.threshold is not None and not self.threshold >= 0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")

    def threshold_for(self, num_pixels: int) -> float:
        return 0.001 * num_pixels if self.threshold is None else self.threshold


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    clip_norm: Optional[float] = 1.0


@dataclass
class IterationRecord:
    image_id: str
    t: int
    dice: Optional[float]
    jaccard: Optional[float]
    loss: Optional[float]
    conv_sum: float
    ms: float = 0.0

    def row(self) -> list:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [self.image_id, self.t, fmt(self.dice), fmt(self.jaccard), fmt(self.loss), fmt(self.conv_sum), fmt(self.ms)]


def initial_map(config: NetworkConfig) -> SegmentationMap:
    return SegmentationMap(np.full((config.input_height, config.input_width), INITIAL_VALUE), t=0)


def difference_sum(current, previous) -> float:
    a = np.asarray(getattr(current, "values", current), dtype=np.float64)
    b = np.asarray(getattr(previous, "values", previous), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"map resolutions differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def converged(current, previous, cfg: IterationConfig) -> bool:
    """True iff the summed absolute pixel difference is strictly below the threshold."""
    s = difference_sum(current, previous)
    return s < cfg.threshold_for(np.asarray(getattr(current, "values", current)).size)


def feedback(maps: np.ndarray, t: int, cfg: IterationConfig) -> np.ndarray:
    """The interim map fed to step t + 1. The t = 0 map goes in unchanged."""
    if t == 0 or not cfg.binarize_feedback:
        return maps
    return (maps >= cfg.binarize_threshold).astype(maps.dtype)


def refine(
    params: ParameterSet,
    images: np.ndarray,
    cfg: IterationConfig,
    masks: Optional[np.ndarray] = None,
    ids: Optional[Sequence[str]] = None,
    loss_cfg: LossConfig = LossConfig(),
    record_timing: bool = False,
    net: Callable = forward,
) -> tuple[np.ndarray, list[list[IterationRecord]]]:
    """Refine a batch of H x W images (stacked as N x H x W).

    Each image runs until its own stopping test fires or ``max_iterations``
    is reached. Metrics are filled in when ``masks`` is given. Returns the
    final soft maps (N x H x W) and one trace per image.
    """
    images = np.asarray(images)
    n = images.shape[0]
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    th = cfg.threshold_for(images[0].size)
    prev = np.full(images.shape, INITIAL_VALUE, dtype=np.float64)
    fed = prev.copy()
    d_prev = None
    if masks is not None:
        masks = np.asarray(masks, dtype=np.float64)
        d_prev = np.array([dice(prev[i], masks[i]) for i in range(n)])
    traces: list[list[IterationRecord]] = [[] for _ in range(n)]
    active = np.arange(n)
    for t in range(1, cfg.max_iterations + 1):
        start = time.perf_counter()
        out = net(params, images[active][:, None], fed[active][:, None]).data[:, 0].astype(np.float64)
        ms = (time.perf_counter() - start) * 1e3 / len(active) if record_timing else 0.0
        keep = []
        for j, i in enumerate(active):
            s = difference_sum(out[j], prev[i])
            dc = jc = loss = None
            if masks is not None:
                d_t = dice(out[j], masks[i])
                loss = iter_loss(d_t, d_prev[i], loss_cfg)
                d_prev[i] = d_t
                hard = binarize(out[j], cfg.binarize_threshold)
                dc, jc = dice(hard, masks[i]), jaccard(hard, masks[i])
            traces[i].append(IterationRecord(ids[i], t, dc, jc, loss, s, ms))
            prev[i] = out[j]
            fed[i] = feedback(out[j], t, cfg)
            if not s < th:
                keep.append(i)
        active = np.array(keep, dtype=int)
        if not len(active):
            break
    return prev, traces


def infer(
    params: ParameterSet,
    image: np.ndarray,
    iter_cfg: IterationConfig,
    mask: Optional[np.ndarray] = None,
    image_id: str = "0",
    **kwargs,
) -> tuple[SegmentationMap, list[IterationRecord]]:
    img = np.asarray(getattr(image, "data", image))
    img = img.reshape(img.shape[-2:])
    maps, traces = refine(
        params, img[None], iter_cfg, None if mask is None else np.asarray(mask)[None], [image_id], **kwargs
    )
    trace = traces[0]
    return SegmentationMap(maps[0], t=trace[-1].t), trace


def step_loss(
    params: ParameterSet,
    images: np.ndarray,
    masks: np.ndarray,
    fed: np.ndarray,
    d_prev: np.ndarray,
    loss_cfg: LossConfig = LossConfig(),
) -> tuple[Tensor, Tensor, Tensor]:
    """Forward one refinement step for a batch and build the mean loss.

    ``fed`` (the interim maps) and ``d_prev`` enter as constants. Returns
    (mean loss, predictions, per-image soft dice).
    """
    pred = forward(params, images[:, None], fed[:, None])
    d_t = soft_dice(pred, masks[:, None])
    losses = iter_loss(d_t, d_prev, loss_cfg)
    return losses.mean(), pred, d_t


@dataclass
class EpochSummary:
    epoch: int
    # per iteration step t: mean dice, jaccard, loss, conv_sum and sample count
    steps: dict = field(default_factory=dict)
    ms: float = 0.0

    def add(self, t: int, dc: float, jc: float, loss: float, conv: float) -> None:
        acc = self.steps.setdefault(t, [0.0, 0.0, 0.0, 0.0, 0])
        acc[0] += dc
        acc[1] += jc
        acc[2] += loss
        acc[3] += conv
        acc[4] += 1

    def records(self) -> list[IterationRecord]:
        out = []
        for t in sorted(self.steps):
            dc, jc, loss, conv, k = self.steps[t]
            out.append(IterationRecord(f"epoch{self.epoch}", t, dc / k, jc / k, loss / k, conv / k, self.ms))
        return out


def train(
    params: ParameterSet,
    dataset: Sequence,
    iter_cfg: IterationConfig,
    optim: OptimConfig = OptimConfig(),
    epochs: int = 1,
    seed: int = 0,
    loss_cfg: LossConfig = LossConfig(),
    record_timing: bool = False,
    on_epoch: Optional[Callable[[EpochSummary], None]] = None,
) -> tuple[ParameterSet, list[EpochSummary]]:
    """Train in place with the dice-ratio objective, one optimiser step per
    refinement step. ``dataset`` items need ``.image``, ``.mask`` and ``.id``.
    """
    if not len(dataset):
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    opt = SGD(params.parameters(), lr=optim.lr, momentum=optim.momentum, clip_norm=optim.clip_norm)
    dtype = params.dtype
    images = np.stack([s.image for s in dataset]).astype(dtype)
    masks = np.stack([s.mask for s in dataset]).astype(dtype)
    ids = [s.id for s in dataset]
    th = iter_cfg.threshold_for(images[0].size)
    history = []
    for epoch in range(epochs):
        start = time.perf_counter()
        summary = EpochSummary(epoch)
        order = rng.permutation(len(dataset))
        for b in range(0, len(order), optim.batch_size):
            batch = order[b : b + optim.batch_size]
            x, y = images[batch], masks[batch]
            prev = np.full(x.shape, INITIAL_VALUE, dtype=dtype)
            fed = prev.copy()
            d_prev = np.array([dice(prev[i], y[i]) for i in range(len(batch))])
            active = np.arange(len(batch))
            for t in range(1, iter_cfg.max_iterations + 1):
                loss, pred, d_t = step_loss(params, x[active], y[active], fed[active], d_prev[active], loss_cfg)
                per_loss = np.atleast_1d(iter_loss(d_t.data.astype(np.float64), d_prev[active], loss_cfg))
                if not np.all(np.isfinite(per_loss)) or not np.all(np.isfinite(pred.data)):
                    bad = active[int(np.argmin(np.isfinite(per_loss)))]
                    raise DivergenceError(f"non-finite loss for sample {ids[batch[bad]]!r} at iteration {t}")
                opt.zero_grad()
                backward(loss)
                opt.step()
                out = pred.data[:, 0]
                keep = []
                for j, i in enumerate(active):
                    s = difference_sum(out[j], prev[i])
                    hard = binarize(out[j], iter_cfg.binarize_threshold)
                    summary.add(t, dice(hard, y[i]), jaccard(hard, y[i]), float(per_loss[j]), s)
                    if not s < th:
                        keep.append(i)
                d_prev[active] = d_t.data
                prev[active] = out
                fed[active] = feedback(out, t, iter_cfg)
                active = np.array(keep, dtype=int)
                if not len(active):
                    break
        summary.ms = (time.perf_counter() - start) * 1e3 if record_timing else 0.0
        history.append(summary)
        logger.info(
            "epoch %d: %s",
            epoch,
            ", ".join(f"t={r.t} dc={r.dice:.4f} loss={r.loss:.4f}" for r in summary.records()),
        )
        if on_epoch is not None:
            on_epoch(summary)
    return params, history


def write_trace_csv(path: Union[str, Path], records: Sequence[IterationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_trace_csv(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
