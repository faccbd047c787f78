"""Joint training loop: triplet assembly, loss sum, Adam schedule, checkpoints.

A training run walks the paired dataset in epochs. Every epoch each pair is
assigned a fresh negative CAD from a different category, the order is
reshuffled, and short final batches wrap around so batch statistics stay
uniform. One step runs the scan pipeline and both CAD encodes, sums the
enabled losses with their weights, and applies a single Adam update at the
scheduled learning rate.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    AdamState,
    Tensor,
    adam_step,
    add,
    bce,
    default_dtype,
    scale,
    triplet_loss,
    write_checkpoint,
)
from .datagen import PairedSample
from .nets import AutoencoderModel, HourglassModel
from .voxel import OccupancyGrid, rotate_up_axis

ROTATION_STEPS = 12

# rng stream tags so per-epoch and per-step draws never share a seed
_STREAM_NEGATIVES = 0
_STREAM_SHUFFLE = 1
_STREAM_ROTATE = 2


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr0: float = 0.001
    decay_factor: float = 10.0
    decay_every: int = 20000
    max_iterations: int | None = None
    margin: float | None = None
    rotation_augment: bool = False
    seed: int = 0
    use_segmentation: bool = True
    use_completion: bool = True
    use_triplet: bool = True
    weight_seg: float = 1.0
    weight_cmp: float = 1.0
    weight_trip: float = 1.0
    grad_clip: float | None = None

    def __post_init__(self):
        # rotation-augmented runs train longer with a tighter margin
        if self.max_iterations is None:
            object.__setattr__(self, "max_iterations", 160000 if self.rotation_augment else 100000)
        if self.margin is None:
            object.__setattr__(self, "margin", 0.1 if self.rotation_augment else 0.2)
        if self.batch_size < 1 or self.decay_every < 1 or self.max_iterations < 1:
            raise ValueError("batch_size, decay_every and max_iterations must be positive")
        if self.lr0 <= 0 or self.decay_factor <= 0:
            raise ValueError("lr0 and decay_factor must be positive")
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if not (self.use_segmentation or self.use_completion or self.use_triplet):
            raise ValueError("at least one loss component must be enabled")

    @classmethod
    def tiny(cls, **kw) -> "TrainConfig":
        """Desk-scale preset: small batches over few samples for a short run.

        The hinge produces violation bursts that full-scale batch statistics
        average away; with eight samples they land raw, so the preset raises
        the rate for the shortened schedule and clips per-element gradients
        to keep those bursts from drowning the reconstruction losses.
        """
        kw.setdefault("batch_size", 8)
        kw.setdefault("lr0", 0.002)
        kw.setdefault("grad_clip", 0.01)
        return cls(**kw)


@dataclass(frozen=True)
class TripletSample:
    pair: PairedSample
    negative_cad: OccupancyGrid
    negative_category: str

    def __post_init__(self):
        if self.negative_category == self.pair.category:
            raise ValueError(
                f"negative for {self.pair.sample_id!r} is from its own category "
                f"{self.pair.category!r}"
            )


@dataclass(frozen=True)
class StepLosses:
    l_seg: float
    l_cmp: float
    l_trip: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"l_seg": self.l_seg, "l_cmp": self.l_cmp, "l_trip": self.l_trip, "total": self.total}


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Step decay: divide by decay_factor every decay_every iterations.

    The negative-exponent form underflows to 0.0 for very deep schedules
    instead of overflowing the divisor.
    """
    return cfg.lr0 * cfg.decay_factor ** -(iteration // cfg.decay_every)


def resample_negatives(dataset: list[PairedSample], seed: int, epoch: int) -> list[TripletSample]:
    """Uniform different-category negative per pair, deterministic in (seed, epoch)."""
    if len({p.category for p in dataset}) < 2:
        raise ValueError("cannot sample negatives: dataset has a single category")
    rng = np.random.default_rng([seed, _STREAM_NEGATIVES, epoch])
    triplets = []
    for pair in dataset:
        candidates = [i for i, p in enumerate(dataset) if p.category != pair.category]
        pick = dataset[candidates[rng.integers(len(candidates))]]
        triplets.append(TripletSample(pair, pick.cad, pick.category))
    return triplets


def _stack(grids: list[OccupancyGrid]) -> Tensor:
    occ = np.stack([g.occupancy for g in grids]).astype(default_dtype())
    return Tensor(occ[:, None])


def _rotated(grid: OccupancyGrid, step: int) -> OccupancyGrid:
    return grid if step == 0 else rotate_up_axis(grid, step)


def train_step(
    model: HourglassModel,
    batch: list[TripletSample],
    cfg: TrainConfig,
    iteration: int,
    adam: AdamState,
) -> StepLosses:
    """Forward, loss sum, backward, one Adam update at the scheduled rate."""
    if not batch:
        raise ValueError("empty batch")
    if cfg.rotation_augment:
        rng = np.random.default_rng([cfg.seed, _STREAM_ROTATE, iteration])
        steps = rng.integers(ROTATION_STEPS, size=len(batch))
    else:
        steps = np.zeros(len(batch), dtype=int)

    scans, fgs, bgs, poss, negs = [], [], [], [], []
    for t, r in zip(batch, steps):
        r = int(r)
        scans.append(_rotated(t.pair.scan, r))
        fgs.append(_rotated(t.pair.gt_fg, r))
        bgs.append(_rotated(t.pair.gt_bg, r))
        poss.append(_rotated(t.pair.cad, r))
        negs.append(_rotated(t.negative_cad, r))

    out = model.embed_scan(
        _stack(scans),
        use_segmentation=cfg.use_segmentation,
        use_completion=cfg.use_completion,
    )

    terms: list[tuple[str, Tensor, float]] = []
    if cfg.use_segmentation:
        l_seg = add(bce(out.fg, _stack(fgs).data), bce(out.bg, _stack(bgs).data))
        terms.append(("l_seg", l_seg, cfg.weight_seg))
    if cfg.use_completion:
        l_cmp = bce(out.cmp, _stack(poss).data)
        terms.append(("l_cmp", l_cmp, cfg.weight_cmp))
    if cfg.use_triplet:
        l_trip = triplet_loss(
            out.embedding, model.embed_cad(_stack(poss)), model.embed_cad(_stack(negs)), cfg.margin
        )
        terms.append(("l_trip", l_trip, cfg.weight_trip))

    values = {name: loss.item() for name, loss, _ in terms}
    for name, value in values.items():
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite {name} ({value}) at iteration {iteration}, aborting")

    total: Tensor | None = None
    for _, loss, weight in terms:
        part = loss if weight == 1.0 else scale(loss, weight)
        total = part if total is None else add(total, part)

    model.zero_grad()
    total.backward()
    lr = lr_at(cfg, iteration)
    if lr > 0.0:
        grads = model.gradients()
        if cfg.grad_clip is not None:
            c = cfg.grad_clip
            grads = {k: np.clip(g, -c, c) for k, g in grads.items()}
        adam_step(model.params, grads, adam, lr)

    return StepLosses(
        l_seg=values.get("l_seg", 0.0),
        l_cmp=values.get("l_cmp", 0.0),
        l_trip=values.get("l_trip", 0.0),
        total=total.item(),
    )


def _epoch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[int]:
    """Shuffled indices padded by wrapping to a whole number of batches."""
    rng = np.random.default_rng([seed, _STREAM_SHUFFLE, epoch])
    order = list(rng.permutation(n))
    steps = math.ceil(n / batch_size)
    while len(order) < steps * batch_size:
        order.append(order[len(order) % n])
    return order


def train(
    model: HourglassModel,
    dataset: list[PairedSample],
    cfg: TrainConfig,
    *,
    max_iterations: int | None = None,
    adam: AdamState | None = None,
    start_iteration: int = 0,
    checkpoint_dir=None,
    checkpoint_interval: int = 5000,
    metrics_path=None,
) -> list[StepLosses]:
    """Run train_step to max_iterations with per-epoch negative resampling.

    Emits one JSONL metrics line per step when metrics_path is given, and an
    SCCK checkpoint every checkpoint_interval steps (plus one at the end)
    when checkpoint_dir is given. Returns the per-step losses.
    """
    if not dataset:
        raise ValueError("empty dataset")
    limit = cfg.max_iterations if max_iterations is None else max_iterations
    if adam is None:
        adam = AdamState.for_params(model.params)
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    history: list[StepLosses] = []
    triplets: list[TripletSample] = []
    order: list[int] = []
    epoch = -1
    try:
        for it in range(start_iteration, limit):
            if it // steps_per_epoch != epoch:
                epoch = it // steps_per_epoch
                triplets = resample_negatives(dataset, cfg.seed, epoch)
                order = _epoch_order(len(dataset), cfg.batch_size, cfg.seed, epoch)
            slot = it % steps_per_epoch
            batch = [triplets[i] for i in order[slot * cfg.batch_size : (slot + 1) * cfg.batch_size]]
            losses = train_step(model, batch, cfg, it, adam)
            history.append(losses)
            if metrics_fh is not None:
                line = {"iteration": it, "lr": lr_at(cfg, it), **losses.as_dict()}
                metrics_fh.write(json.dumps(line) + "\n")
                metrics_fh.flush()
            done = it + 1
            if checkpoint_dir is not None and (done % checkpoint_interval == 0 or done == limit):
                path = os.path.join(checkpoint_dir, f"ckpt_{done:07d}.scck")
                write_checkpoint(path, done, model.params, adam)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return history


def train_autoencoder(
    model: AutoencoderModel,
    cads: list[OccupancyGrid],
    *,
    iterations: int,
    lr: float = 0.001,
    batch_size: int | None = None,
    seed: int = 0,
) -> list[float]:
    """Fit the proposal autoencoder: plain Adam on reconstruction cross-entropy.

    A constant rate suffices here; the step schedule belongs to the joint
    model. Returns the per-step loss values.
    """
    if not cads:
        raise ValueError("no CAD grids to train on")
    if iterations < 1:
        raise ValueError("iterations must be positive")
    size = len(cads) if batch_size is None else batch_size
    adam = AdamState.for_params(model.params)
    steps_per_epoch = math.ceil(len(cads) / size)
    losses: list[float] = []
    order: list[int] = []
    epoch = -1
    for it in range(iterations):
        if it // steps_per_epoch != epoch:
            epoch = it // steps_per_epoch
            order = _epoch_order(len(cads), size, seed, epoch)
        slot = it % steps_per_epoch
        batch = _stack([cads[i] for i in order[slot * size : (slot + 1) * size]])
        _, recon = model.autoencode(batch)
        loss = bce(recon, batch.data)
        value = loss.item()
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite autoencoder loss ({value}) at iteration {it}, aborting")
        model.zero_grad()
        loss.backward()
        adam_step(model.params, model.gradients(), adam, lr)
        losses.append(value)
    return losses
