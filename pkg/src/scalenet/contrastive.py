"""Contrastive pretraining: paired augmentations, NT-Xent, multi-scale chaining.

Each source image yields two augmented views (random resized crop plus color
jitter); the loss pulls the two views of a source together and pushes apart
everything else in the batch, with cosine similarities scaled by a temperature.
The multi-scale variant trains the encoder at a reduced scale first and
transfers both the encoder and the projection head into the full-scale stage.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from torch import nn

from . import transforms
from .models import (
    Backbone,
    BackboneSpec,
    CheckpointMeta,
    ModelCheckpoint,
    NumericError,
    build_backbone,
    to_model_input,
)
from .pretext import ScaleSchedule, StageResult
from .runlog import MetricWriter, derive_seed

__all__ = [
    "ContrastiveConfig",
    "ProjectionBatch",
    "SimCLRModel",
    "augment_pair",
    "augment_batch",
    "cosine_sim",
    "nt_xent_loss",
    "train_simclr_stage",
    "train_multiscale_simclr",
    "simclr_checkpoint",
]


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 0.001


@dataclass(frozen=True)
class ContrastiveConfig:
    """Temperature, pair batch size, projection width, and augmentation knobs."""

    temperature: float = 0.5
    batch_pairs: int = 128
    proj_dim: int = 128
    augmentations: tuple = ("inception_crop", "color_distortion")
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    color_strength: float = 0.5
    crop_min_scale: float = 0.08

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be >= 2 so at least one negative exists")
        unknown = set(self.augmentations) - {"inception_crop", "color_distortion"}
        if unknown:
            raise ValueError(f"unknown augmentations: {sorted(unknown)}")


@dataclass
class ProjectionBatch:
    """2N x D projected views; rows (2k, 2k+1) are the two views of source k."""

    z: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z)
        if self.z.ndim != 2 or self.z.shape[0] % 2:
            raise ValueError(f"z must be 2N x D, got shape {self.z.shape}")
        if not np.isfinite(self.z).all():
            raise ValueError("z contains non-finite values")


def _crop_grid(n_out: int, lo: float, span: float) -> np.ndarray:
    if n_out == 1:
        return np.full(1, lo)
    return lo + np.arange(n_out) * (span - 1.0) / (n_out - 1)


def _random_resized_crop(images: np.ndarray, rng: np.random.Generator, min_scale: float) -> np.ndarray:
    """Inception-style crop per view, resampled back to the input size."""
    m, h, w, _ = images.shape
    src_y = np.empty((m, h))
    src_x = np.empty((m, w))
    for i in range(m):
        ch, cw, cy, cx = h, w, 0, 0
        for _ in range(10):
            area = rng.uniform(min_scale, 1.0) * h * w
            aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
            tw = int(round(np.sqrt(area * aspect)))
            th = int(round(np.sqrt(area / aspect)))
            if 1 <= th <= h and 1 <= tw <= w:
                ch, cw = th, tw
                cy = int(rng.integers(0, h - th + 1))
                cx = int(rng.integers(0, w - tw + 1))
                break
        src_y[i] = _crop_grid(h, cy, ch)
        src_x[i] = _crop_grid(w, cx, cw)
    y0 = np.floor(src_y).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    wy = (src_y - y0)[:, :, None, None]
    x0 = np.floor(src_x).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    wx = (src_x - x0)[:, None, :, None]
    rows = np.arange(m)[:, None, None]
    d = images.astype(np.float64, copy=False)
    top = d[rows, y0[:, :, None], x0[:, None, :]] * (1 - wx) + d[rows, y0[:, :, None], x1[:, None, :]] * wx
    bot = d[rows, y1[:, :, None], x0[:, None, :]] * (1 - wx) + d[rows, y1[:, :, None], x1[:, None, :]] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def _color_distortion(views: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Brightness, contrast, saturation, then hue jitter, raw 0..255 range.

    Amplitudes follow the usual contrastive-learning scaling: +/-0.8*s for the
    first three, +/-0.2*s hue shift.
    """
    m = views.shape[0]
    amp = 0.8 * strength
    out = views.astype(np.float32, copy=True)

    f = rng.uniform(1 - amp, 1 + amp, m).astype(np.float32)[:, None, None, None]
    out = np.clip(out * f, 0, 255)

    lum = transforms.luminance(out).astype(np.float32)
    f = rng.uniform(1 - amp, 1 + amp, m).astype(np.float32)[:, None, None, None]
    mean = lum.mean(axis=(1, 2))[:, None, None, None]
    out = np.clip((out - mean) * f + mean, 0, 255)

    f = rng.uniform(1 - amp, 1 + amp, m).astype(np.float32)[:, None, None, None]
    lum = transforms.luminance(out).astype(np.float32)[..., None]
    out = np.clip((out - lum) * f + lum, 0, 255)

    shift = rng.uniform(-0.2 * strength, 0.2 * strength, m).astype(np.float32)
    hsv = rgb_to_hsv(out / 255.0)
    hsv[..., 0] = (hsv[..., 0] + shift[:, None, None]) % 1.0
    return (hsv_to_rgb(hsv) * 255.0).astype(np.float32)


def augment_batch(images: np.ndarray, config: ContrastiveConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment a stack of raw M x H x W x C views in place of per-image calls."""
    out = np.asarray(images, dtype=np.float32)
    if "inception_crop" in config.augmentations:
        out = _random_resized_crop(out, rng, config.crop_min_scale)
    if "color_distortion" in config.augmentations:
        out = _color_distortion(out, rng, config.color_strength)
    return out


def augment_pair(img, config: ContrastiveConfig, seed: int):
    """Two independently augmented views of one raw 3-channel image."""
    data = img.data if isinstance(img, transforms.ImageTensor) else np.asarray(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"augment_pair needs an H x W x 3 image, got shape {data.shape}")
    rng = np.random.default_rng(derive_seed(seed, "augment-pair"))
    views = augment_batch(np.stack([data, data]), config, rng)
    return views[0], views[1]


def cosine_sim(u, v) -> float:
    """Normalized dot product; rejects zero vectors."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return float(u @ v / (nu * nv))


def nt_xent_loss(batch, temperature: float):
    """Normalized-temperature cross entropy over all 2N anchor/positive pairs.

    For each row i the positive is its paired view; the denominator sums
    exp(sim/temperature) over every other row, excluding only i itself (the
    positive stays in, so a lone pair gives loss exactly 0). Differentiable
    when given a tensor.
    """
    if isinstance(batch, ProjectionBatch):
        z = torch.as_tensor(batch.z)
    elif isinstance(batch, torch.Tensor):
        z = batch
    else:
        z = torch.as_tensor(np.asarray(batch))
    if z.ndim != 2 or z.shape[0] % 2:
        raise ValueError(f"expected 2N x D projections, got shape {tuple(z.shape)}")
    if not bool(torch.isfinite(z).all()):
        raise NumericError("non-finite projection values")
    norms = torch.linalg.vector_norm(z, dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericError("zero-norm projection row")
    zn = z / norms
    sim = (zn @ zn.T) / temperature
    two_n = z.shape[0]
    sim = sim.masked_fill(torch.eye(two_n, dtype=torch.bool), float("-inf"))
    partner = torch.arange(two_n) ^ 1
    return torch.nn.functional.cross_entropy(sim, partner)


class ProjectionHead(nn.Module):
    """Two-layer MLP with a nonlinear hidden layer, as contrastive heads use."""

    def __init__(self, in_dim: int, proj_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, in_dim), nn.ReLU(inplace=True), nn.Linear(in_dim, proj_dim))

    def forward(self, x):
        return self.net(x)


class SimCLRModel(nn.Module):
    """Encoder trunk plus projection head; the trunk's own head is unused."""

    def __init__(self, encoder: Backbone, proj_dim: int):
        super().__init__()
        self.encoder = encoder
        self.projection = ProjectionHead(encoder.feature_dim, proj_dim)

    def forward(self, x):
        return self.projection(self.encoder.pooled_features(x))


def build_simclr(spec: BackboneSpec, config: ContrastiveConfig, seed: int) -> SimCLRModel:
    encoder = build_backbone(spec, seed)
    torch.manual_seed(derive_seed(seed, "projection"))
    return SimCLRModel(encoder, config.proj_dim)


def simclr_checkpoint(model: SimCLRModel, meta: CheckpointMeta) -> ModelCheckpoint:
    """Encoder conv weights and projection-head weights, stored separately."""
    conv = {k: v.detach().cpu().contiguous().numpy().copy() for k, v in model.encoder.conv_state().items()}
    head = {k: v.detach().cpu().contiguous().numpy().copy() for k, v in model.projection.state_dict().items()}
    return ModelCheckpoint(conv_weights=conv, head_weights=head, meta=meta)


def _restore_simclr(ckpt: ModelCheckpoint, spec: BackboneSpec, config: ContrastiveConfig, seed: int) -> SimCLRModel:
    model = build_simclr(spec, config, seed)
    want = set(model.encoder.conv_state().keys())
    if want != set(ckpt.conv_weights.keys()):
        raise ValueError("checkpoint conv layers do not match the encoder arch")
    model.encoder.blocks.load_state_dict(
        {k: torch.from_numpy(v.copy()) for k, v in ckpt.conv_weights.items()}, strict=False
    )
    model.projection.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.head_weights.items()})
    return model


def train_simclr_stage(model: SimCLRModel, images_raw: np.ndarray, config: ContrastiveConfig,
                       alpha: float, epochs: int, seed: int,
                       writer: MetricWriter | None = None,
                       schedule_digest: str = "") -> StageResult:
    """One contrastive stage over raw images already resized to ``alpha``.

    Views are augmented in raw range, then standardized with stats computed
    once on the un-augmented stage dataset. Tail batches smaller than the
    configured pair count are dropped: the loss strength depends on the
    number of negatives.
    """
    writer = writer or MetricWriter()
    first_record = len(writer.records)
    _, stats = transforms.standardize(images_raw)
    rng = np.random.default_rng(derive_seed(seed, "simclr-order", alpha))
    torch.manual_seed(derive_seed(seed, "simclr-stage", alpha))

    model = model.to(memory_format=torch.channels_last)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.optimizer.lr)
    n = images_raw.shape[0]
    steps = n // config.batch_pairs
    if steps == 0:
        raise ValueError(f"dataset of {n} images is smaller than batch_pairs={config.batch_pairs}")

    meta = CheckpointMeta(alpha=alpha, epochs_trained=0, seed=seed,
                          schedule_digest=schedule_digest, arch=model.encoder.spec.arch)
    last_good = simclr_checkpoint(model, meta)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for step in range(steps):
            idx = order[step * config.batch_pairs:(step + 1) * config.batch_pairs]
            views = augment_batch(np.repeat(images_raw[idx], 2, axis=0), config, rng)
            x = to_model_input(transforms.apply_stats(views, stats)).to(memory_format=torch.channels_last)
            loss = nt_xent_loss(model(x), config.temperature)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach())
        epoch_loss = total / steps
        if not np.isfinite(epoch_loss):
            writer.emit(stage_alpha=alpha, epoch=epoch, event="divergence")
            return StageResult(checkpoint=last_good, metrics=writer.records[first_record:],
                               diverged=True, divergence_epoch=epoch)
        writer.emit(
            stage_alpha=alpha, epoch=epoch, lr=config.optimizer.lr, train_loss=epoch_loss,
            wall_time_s=time.perf_counter() - t0,
            temperature=config.temperature, batch_pairs=config.batch_pairs,
        )
        meta = CheckpointMeta(alpha=alpha, epochs_trained=epoch, seed=seed,
                              schedule_digest=schedule_digest, arch=model.encoder.spec.arch)
        last_good = simclr_checkpoint(model, meta)
    return StageResult(checkpoint=last_good, metrics=writer.records[first_record:])


def train_multiscale_simclr(spec: BackboneSpec, schedule: ScaleSchedule, images_raw: np.ndarray,
                            config: ContrastiveConfig, seed: int,
                            writer: MetricWriter | None = None) -> list:
    """Stage-wise contrastive training with encoder and head carried over.

    A single-stage schedule at alpha = 1 is the plain single-scale baseline;
    the two-stage [0.5, 1] schedule is the multi-scale variant. The stage
    learning rate comes from each stage's ladder initial value.
    """
    digest = schedule.digest()
    results = []
    model = None
    for idx, stage in enumerate(schedule.stages):
        resized = transforms.resize_dataset(images_raw, stage.alpha)
        stage_config = ContrastiveConfig(
            temperature=config.temperature, batch_pairs=config.batch_pairs,
            proj_dim=config.proj_dim, augmentations=config.augmentations,
            optimizer=OptimizerSpec(config.optimizer.kind, stage.lr_ladder.initial_lr),
            color_strength=config.color_strength, crop_min_scale=config.crop_min_scale,
        )
        if model is None:
            model = build_simclr(spec, stage_config, derive_seed(seed, "simclr-init"))
        else:
            model = _restore_simclr(results[-1].checkpoint, spec, stage_config,
                                    derive_seed(seed, "simclr-restore", idx))
        result = train_simclr_stage(
            model, resized, stage_config, alpha=stage.alpha, epochs=stage.epochs,
            seed=derive_seed(seed, "simclr-chain", idx), writer=writer, schedule_digest=digest,
        )
        results.append(result)
        if result.diverged:
            break
    return results
