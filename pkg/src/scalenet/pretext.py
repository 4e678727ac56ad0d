"""Rotation-prediction pretraining and the multi-scale stage chain.

The pretext task: every source image is expanded into its four quarter-turn
rotations with pseudo-labels 0..3, and the network is trained to recover the
label. The loss averages the negative log probability of the correct rotation
over all four rotations of every source, i.e. plain cross-entropy over the
expanded batch.

A chain run trains the same trunk at a ladder of scales: resize the raw
dataset to the stage's alpha, standardize it at that scale, train, then carry
the conv weights bitwise into the next stage. A single stage at alpha = 1 is
the plain rotation-pretraining baseline.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import transforms
from .models import (
    Backbone,
    BackboneSpec,
    CheckpointMeta,
    ModelCheckpoint,
    build_backbone,
    extract_checkpoint,
    to_model_input,
    transfer_weights,
)
from .runlog import MetricWriter, derive_seed

__all__ = [
    "RotationBatch",
    "LrLadder",
    "ScaleStage",
    "OptimizerConfig",
    "ScaleSchedule",
    "StageResult",
    "make_rotation_batch",
    "rotation_loss",
    "rotation_accuracy",
    "train_pretext_stage",
    "train_scalenet_chain",
]

LOG_EPS = 1e-12
N_ROTATIONS = 4


@dataclass
class RotationBatch:
    """All four rotations of B source images, label-major then source-major."""

    images: np.ndarray          # (4B, H, W, C)
    labels: np.ndarray          # (4B,) in {0,1,2,3}
    source_ids: np.ndarray      # (4B,) index into the source batch

    def __len__(self):
        return self.images.shape[0]


def make_rotation_batch(images: np.ndarray) -> RotationBatch:
    """Expand B square source images into their 4 labeled rotations.

    Order is label-major: all label-0 images first (source order preserved),
    then label-1, and so on. Every source id appears exactly once per label.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ValueError(f"expected a non-empty B x H x W x C stack, got shape {images.shape}")
    if images.shape[1] != images.shape[2]:
        raise ValueError("rotation batches need square images so shapes stack")
    b = images.shape[0]
    rotated = [
        images.copy(),                                # y=0
        np.ascontiguousarray(images.swapaxes(1, 2)[:, ::-1]),          # transpose then vflip
        np.ascontiguousarray(images[:, ::-1, ::-1]),                   # vflip then hflip
        np.ascontiguousarray(images[:, ::-1].swapaxes(1, 2)),          # vflip then transpose
    ]
    labels = np.repeat(np.arange(N_ROTATIONS, dtype=np.int64), b)
    source_ids = np.tile(np.arange(b, dtype=np.int64), N_ROTATIONS)
    return RotationBatch(images=np.concatenate(rotated, axis=0), labels=labels, source_ids=source_ids)


def rotation_loss(probs, labels, eps: float = LOG_EPS):
    """Mean negative log probability of the true rotation.

    With all four rotations of each source present this equals the per-source
    average of -(1/4) * sum_y log p_y, averaged over sources. ``probs`` rows
    must be normalized; entries are clamped at ``eps`` so saturated softmax
    outputs keep the objective finite. Differentiable when given a tensor.
    """
    p = probs if isinstance(probs, torch.Tensor) else torch.as_tensor(np.asarray(probs))
    y = labels if isinstance(labels, torch.Tensor) else torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise ValueError(f"probs {tuple(p.shape)} and labels {tuple(y.shape)} are misaligned")
    picked = p.gather(1, y.view(-1, 1)).squeeze(1)
    if eps <= 0 and bool((picked <= 0).any()):
        idx = int((picked <= 0).nonzero()[0, 0])
        raise FloatingPointError(f"probability <= 0 at index {idx}")
    return -(picked.clamp_min(eps).log()).mean()


def rotation_accuracy(probs, labels) -> float:
    p = probs.detach().cpu().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
    y = labels.detach().cpu().numpy() if isinstance(labels, torch.Tensor) else np.asarray(labels)
    return float((p.argmax(axis=1) == y).mean())


@dataclass(frozen=True)
class LrLadder:
    """Step-decay schedule: lr = initial / decay_factor^(milestones reached)."""

    initial_lr: float
    decay_factor: float = 5.0
    milestones: tuple = ()

    def lr_at(self, epoch: int) -> float:
        # Epochs are 1-indexed; a milestone takes effect at its own epoch.
        drops = sum(1 for m in self.milestones if m <= epoch)
        return self.initial_lr / (self.decay_factor ** drops)


@dataclass(frozen=True)
class ScaleStage:
    alpha: float
    lr_ladder: LrLadder
    epochs: int


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_images: int = 128     # source images per step; x4 samples after rotation


@dataclass
class ScaleSchedule:
    """Ordered stages of (alpha, lr ladder, epoch budget) plus SGD settings.

    Alphas must increase strictly and end at 1; initial learning rates must
    not increase from stage to stage (larger-scale stages train gentler).
    """

    stages: list
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        alphas = [s.alpha for s in self.stages]
        if any(a2 <= a1 for a1, a2 in zip(alphas, alphas[1:])):
            raise ValueError(f"alphas must be strictly increasing, got {alphas}")
        if alphas[-1] != 1.0:
            raise ValueError(f"final alpha must be 1, got {alphas[-1]}")
        lrs = [s.lr_ladder.initial_lr for s in self.stages]
        if any(l2 > l1 for l1, l2 in zip(lrs, lrs[1:])):
            raise ValueError(f"initial lrs must be non-increasing across stages, got {lrs}")

    def digest(self) -> str:
        import hashlib

        blob = json.dumps(
            {
                "stages": [
                    {
                        "alpha": s.alpha,
                        "lr": [s.lr_ladder.initial_lr, s.lr_ladder.decay_factor, list(s.lr_ladder.milestones)],
                        "epochs": s.epochs,
                    }
                    for s in self.stages
                ],
                "optimizer": [self.optimizer.momentum, self.optimizer.weight_decay, self.optimizer.batch_images],
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def two_stage_schedule(lr1=0.1, lr2=0.05, epochs=100, milestones=(30, 60, 80), alpha=0.5,
                       optimizer: OptimizerConfig | None = None) -> ScaleSchedule:
    """The standard two-model schedule: alpha = [x, 1], lrs = [lr1, lr2]."""
    return ScaleSchedule(
        stages=[
            ScaleStage(alpha, LrLadder(lr1, 5.0, tuple(milestones)), epochs),
            ScaleStage(1.0, LrLadder(lr2, 5.0, tuple(milestones)), epochs),
        ],
        optimizer=optimizer or OptimizerConfig(),
    )


def baseline_schedule(lr=0.1, epochs=100, milestones=(30, 60, 80),
                      optimizer: OptimizerConfig | None = None) -> ScaleSchedule:
    """Single-stage schedule at alpha = 1: the plain rotation baseline."""
    return ScaleSchedule(
        stages=[ScaleStage(1.0, LrLadder(lr, 5.0, tuple(milestones)), epochs)],
        optimizer=optimizer or OptimizerConfig(),
    )


@dataclass
class StageResult:
    checkpoint: ModelCheckpoint
    metrics: list
    diverged: bool = False
    divergence_epoch: int | None = None

    @property
    def final_rotation_acc(self) -> float:
        accs = [m["rotation_acc"] for m in self.metrics if "rotation_acc" in m]
        return accs[-1] if accs else float("nan")


def train_pretext_stage(model: Backbone, images: np.ndarray, stage: ScaleStage,
                        seed: int, optimizer: OptimizerConfig | None = None,
                        writer: MetricWriter | None = None,
                        schedule_digest: str = "") -> StageResult:
    """Run one stage of rotation-prediction SGD over standardized images.

    Per epoch: shuffle sources, expand each batch into its 4 rotations, one
    optimizer step per batch. The learning rate follows the stage ladder. If
    the loss goes non-finite the stage aborts and returns the checkpoint from
    the last finite epoch together with a divergence record.
    """
    opt_cfg = optimizer or OptimizerConfig()
    writer = writer or MetricWriter()
    first_record = len(writer.records)
    rng = np.random.default_rng(derive_seed(seed, "batch-order", stage.alpha))
    torch.manual_seed(derive_seed(seed, "stage", stage.alpha))

    model = model.to(memory_format=torch.channels_last)
    model.train()
    opt = torch.optim.SGD(
        [p for p in model.parameters() if p.requires_grad],
        lr=stage.lr_ladder.initial_lr, momentum=opt_cfg.momentum, weight_decay=opt_cfg.weight_decay,
    )

    n = images.shape[0]
    meta = CheckpointMeta(alpha=stage.alpha, epochs_trained=0, seed=seed,
                          schedule_digest=schedule_digest, arch=model.spec.arch)
    last_good = extract_checkpoint(model, meta)
    for epoch in range(1, stage.epochs + 1):
        t0 = time.perf_counter()
        lr = stage.lr_ladder.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        total_loss, total_correct, total_seen = 0.0, 0.0, 0
        for start in range(0, n, opt_cfg.batch_images):
            batch = make_rotation_batch(images[order[start:start + opt_cfg.batch_images]])
            x = to_model_input(batch.images).to(memory_format=torch.channels_last)
            y = torch.from_numpy(batch.labels)
            probs = torch.softmax(model(x), dim=1)
            loss = rotation_loss(probs, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            bs = len(batch)
            total_loss += float(loss.detach()) * bs
            total_correct += rotation_accuracy(probs, y) * bs
            total_seen += bs
        epoch_loss = total_loss / total_seen
        if not np.isfinite(epoch_loss):
            writer.emit(stage_alpha=stage.alpha, epoch=epoch, event="divergence")
            return StageResult(checkpoint=last_good, metrics=writer.records[first_record:],
                               diverged=True, divergence_epoch=epoch)
        writer.emit(
            stage_alpha=stage.alpha, epoch=epoch, lr=lr,
            train_loss=epoch_loss, rotation_acc=total_correct / total_seen,
            wall_time_s=time.perf_counter() - t0,
        )
        meta = CheckpointMeta(alpha=stage.alpha, epochs_trained=epoch, seed=seed,
                              schedule_digest=schedule_digest, arch=model.spec.arch)
        last_good = extract_checkpoint(model, meta)
    return StageResult(checkpoint=last_good, metrics=writer.records[first_record:])


def train_scalenet_chain(spec: BackboneSpec, schedule: ScaleSchedule, images_raw: np.ndarray,
                         seed: int, writer: MetricWriter | None = None) -> list:
    """Train the full multi-scale chain and return one StageResult per stage.

    Stage k resizes the raw dataset to its alpha and standardizes it at that
    scale. The first stage builds a fresh model; later stages start from the
    previous stage's conv weights (head kept, it stays 4-way). A one-stage
    schedule at alpha = 1 degenerates to the plain rotation baseline.
    """
    digest = schedule.digest()
    results = []
    model = None
    for idx, stage in enumerate(schedule.stages):
        resized = transforms.resize_dataset(images_raw, stage.alpha)
        standardized, _ = transforms.standardize(resized)
        if model is None:
            model = build_backbone(spec, derive_seed(seed, "chain-init"))
        else:
            model = transfer_weights(results[-1].checkpoint, spec, reinit_head=False,
                                     seed=derive_seed(seed, "chain-head", idx))
        result = train_pretext_stage(
            model, standardized, stage, seed=derive_seed(seed, "chain-stage", idx),
            optimizer=schedule.optimizer, writer=writer, schedule_digest=digest,
        )
        results.append(result)
        if result.diverged:
            break
    return results
