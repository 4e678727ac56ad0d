"""Downstream evaluation: fine-tuning, frozen linear probes, Grad-CAM.

Two protocols mirror the common practice for judging pretrained features:

* ``finetune`` transfers the conv weights, swaps the head to the class count,
  and trains everything (nothing frozen when pretraining and evaluation use
  the same dataset);
* ``linear_probe`` freezes the whole trunk, spatially average-pools one named
  block's activation, and trains a multinomial logistic regression on top.

Both produce an :class:`EvalReport` with per-class accuracies and provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np
import torch

from . import transforms
from .models import (
    BackboneSpec,
    ModelCheckpoint,
    freeze_conv,
    to_model_input,
    transfer_weights,
)
from .pretext import LrLadder, OptimizerConfig
from .runlog import MetricWriter, atomic_write_bytes, derive_seed

__all__ = [
    "EvalReport",
    "DataSubset",
    "subsample",
    "finetune_classifier",
    "linear_probe",
    "probe_all_blocks",
    "gradcam",
    "save_gradcam",
]

FINETUNE_LADDER = LrLadder(0.001, 5.0, (80, 160, 200))
PROBE_LADDER = LrLadder(0.01, 5.0, (5, 15, 25))
PROBE_EPOCHS = 30


@dataclass
class EvalReport:
    """Downstream accuracy with enough provenance to reproduce the number."""

    protocol: str
    accuracy: float
    per_class_acc: list
    per_class_count: list
    config_digest: str
    seed: int
    n_train: int
    probe_block: str | None = None

    def __post_init__(self):
        if self.protocol not in ("finetune", "linear_probe"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        weighted = float(np.average(self.per_class_acc, weights=self.per_class_count))
        if abs(weighted - self.accuracy) > 1e-9:
            raise ValueError(f"accuracy {self.accuracy} != class-weighted mean {weighted}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def save(self, path):
        atomic_write_bytes(path, (self.to_json() + "\n").encode("utf-8"))
        return path


@dataclass(frozen=True)
class DataSubset:
    """Sorted unique indices into a parent dataset, traceable to a seed."""

    indices: tuple
    seed: int
    n: int

    def __post_init__(self):
        if len(self.indices) != self.n:
            raise ValueError(f"{len(self.indices)} indices for n={self.n}")
        arr = np.asarray(self.indices)
        if arr.size and (np.diff(arr) <= 0).any():
            raise ValueError("indices must be sorted and unique")


def subsample(dataset, n: int, seed: int) -> DataSubset:
    """Uniform sample of n indices without replacement, no stratification."""
    size = dataset if isinstance(dataset, int) else len(dataset)
    if n > size:
        raise ValueError(f"cannot sample {n} from a dataset of {size}")
    rng = np.random.default_rng(derive_seed(seed, "subsample"))
    idx = np.sort(rng.choice(size, size=n, replace=False))
    return DataSubset(indices=tuple(int(i) for i in idx), seed=seed, n=n)


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _per_class_accuracy(pred: np.ndarray, truth: np.ndarray, n_classes: int):
    accs, counts = [], []
    for c in range(n_classes):
        sel = truth == c
        counts.append(int(sel.sum()))
        accs.append(float((pred[sel] == c).mean()) if counts[-1] else 0.0)
    return accs, counts


def _evaluate(model, images: np.ndarray, batch: int = 256) -> np.ndarray:
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch):
            x = to_model_input(images[start:start + batch])
            preds.append(model(x).argmax(dim=1).numpy())
    return np.concatenate(preds)


def finetune_classifier(ckpt: ModelCheckpoint, data, lr_ladder: LrLadder = FINETUNE_LADDER,
                        seed: int = 0, epochs: int = 30, subset: DataSubset | None = None,
                        optimizer: OptimizerConfig | None = None,
                        writer: MetricWriter | None = None) -> EvalReport:
    """Fine-tune a pretrained trunk on labeled data and report test accuracy.

    The head is reinitialized to the class count; every layer trains (same
    dataset, so nothing is frozen). Train-split stats standardize both splits.
    """
    opt_cfg = optimizer or OptimizerConfig()
    writer = writer or MetricWriter()
    train_x, train_y = data.train_images, data.train_labels
    if subset is not None:
        idx = np.asarray(subset.indices)
        train_x, train_y = train_x[idx], train_y[idx]
    n_classes = data.n_classes
    train_std, stats = transforms.standardize(train_x)
    test_std = transforms.apply_stats(data.test_images, stats)

    spec = BackboneSpec(arch=ckpt.meta.arch, input_hw=train_x.shape[1:3], head_out=n_classes)
    model = transfer_weights(ckpt, spec, reinit_head=True, seed=derive_seed(seed, "finetune-head"))
    model = model.to(memory_format=torch.channels_last)
    opt = torch.optim.SGD(model.parameters(), lr=lr_ladder.initial_lr,
                          momentum=opt_cfg.momentum, weight_decay=opt_cfg.weight_decay)
    rng = np.random.default_rng(derive_seed(seed, "finetune-order"))
    torch.manual_seed(derive_seed(seed, "finetune-train"))
    y_all = torch.from_numpy(train_y.astype(np.int64))
    n = train_std.shape[0]
    for epoch in range(1, epochs + 1):
        model.train()
        lr = lr_ladder.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, opt_cfg.batch_images):
            sel = order[start:start + opt_cfg.batch_images]
            x = to_model_input(train_std[sel]).to(memory_format=torch.channels_last)
            loss = torch.nn.functional.cross_entropy(model(x), y_all[sel])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(sel)
            seen += len(sel)
        writer.emit(stage_alpha=ckpt.meta.alpha, epoch=epoch, lr=lr,
                    train_loss=total / seen, wall_time_s=0.0)

    pred = _evaluate(model, test_std)
    accs, counts = _per_class_accuracy(pred, data.test_labels, n_classes)
    digest = _digest({
        "protocol": "finetune", "arch": ckpt.meta.arch, "seed": seed, "epochs": epochs,
        "lr": [lr_ladder.initial_lr, lr_ladder.decay_factor, list(lr_ladder.milestones)],
        "n_train": int(train_x.shape[0]), "src_alpha": ckpt.meta.alpha,
    })
    return EvalReport(
        protocol="finetune",
        accuracy=float(np.average(accs, weights=counts)),
        per_class_acc=accs, per_class_count=counts,
        config_digest=digest, seed=seed, n_train=int(train_x.shape[0]),
    )


def _pooled_block_features(model, images: np.ndarray, block: str, batch: int = 256) -> np.ndarray:
    """Spatially average-pooled activations of one block, N x C."""
    model.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch):
            x = to_model_input(images[start:start + batch])
            a = model.block_activation(x, block)
            feats.append(a.mean(dim=(2, 3)).numpy())
    return np.concatenate(feats)


def linear_probe(ckpt: ModelCheckpoint, data, block: str, lr_ladder: LrLadder = PROBE_LADDER,
                 seed: int = 0, epochs: int = PROBE_EPOCHS,
                 subset: DataSubset | None = None) -> EvalReport:
    """Train a logistic regression on frozen, pooled block activations.

    Conv weights never move: the trunk is frozen outright and features are
    extracted once, so probing deep blocks costs the same as shallow ones.
    """
    train_x, train_y = data.train_images, data.train_labels
    if subset is not None:
        idx = np.asarray(subset.indices)
        train_x, train_y = train_x[idx], train_y[idx]
    n_classes = data.n_classes
    train_std, stats = transforms.standardize(train_x)
    test_std = transforms.apply_stats(data.test_images, stats)

    spec = BackboneSpec(arch=ckpt.meta.arch, input_hw=train_x.shape[1:3], head_out=n_classes)
    model = transfer_weights(ckpt, spec, reinit_head=True, seed=derive_seed(seed, "probe-head"))
    if block not in model.block_names:
        raise ValueError(f"unknown block {block!r}; choices: {model.block_names}")
    freeze_conv(model, "ALL")

    feats_train = _pooled_block_features(model, train_std, block)
    feats_test = _pooled_block_features(model, test_std, block)

    torch.manual_seed(derive_seed(seed, "probe-init", block))
    head = torch.nn.Linear(feats_train.shape[1], n_classes)
    opt = torch.optim.SGD(head.parameters(), lr=lr_ladder.initial_lr, momentum=0.9)
    rng = np.random.default_rng(derive_seed(seed, "probe-order", block))
    xs = torch.from_numpy(feats_train)
    ys = torch.from_numpy(train_y.astype(np.int64))
    n = xs.shape[0]
    for epoch in range(1, epochs + 1):
        lr = lr_ladder.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        for start in range(0, n, 128):
            sel = order[start:start + 128]
            loss = torch.nn.functional.cross_entropy(head(xs[sel]), ys[sel])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

    with torch.no_grad():
        pred = head(torch.from_numpy(feats_test)).argmax(dim=1).numpy()
    accs, counts = _per_class_accuracy(pred, data.test_labels, n_classes)
    digest = _digest({
        "protocol": "linear_probe", "arch": ckpt.meta.arch, "block": block, "seed": seed,
        "epochs": epochs, "lr": [lr_ladder.initial_lr, lr_ladder.decay_factor, list(lr_ladder.milestones)],
        "n_train": int(train_x.shape[0]), "src_alpha": ckpt.meta.alpha,
    })
    return EvalReport(
        protocol="linear_probe", probe_block=block,
        accuracy=float(np.average(accs, weights=counts)),
        per_class_acc=accs, per_class_count=counts,
        config_digest=digest, seed=seed, n_train=int(train_x.shape[0]),
    )


def probe_all_blocks(ckpt: ModelCheckpoint, data, seed: int = 0, **kwargs) -> list:
    """One linear probe per conv block, shallow to deep."""
    spec = BackboneSpec(arch=ckpt.meta.arch)
    return [linear_probe(ckpt, data, block=b, seed=seed, **kwargs) for b in spec.conv_block_names]


def gradcam(model, img, block: str, class_idx: int) -> np.ndarray:
    """Gradient-weighted class activation map, H x W in [0, 1].

    Channel weights are the spatial means of the class logit's gradient on the
    block activation; the weighted activation sum is rectified, upsampled to
    the input size, and divided by its max (an all-zero map stays zero when
    the class evidence is nonpositive everywhere).
    """
    if block not in model.block_names:
        raise ValueError(f"unknown block {block!r}; choices: {model.block_names}")
    if not 0 <= class_idx < model.spec.head_out:
        raise ValueError(f"class_idx {class_idx} out of range for head_out={model.spec.head_out}")
    data = img.data if isinstance(img, transforms.ImageTensor) else np.asarray(img)
    model.eval()
    x = to_model_input(data[None])
    h = x
    activation = None
    for name, blk in model.blocks.items():
        h = blk(h)
        if name == block:
            activation = h
            activation.retain_grad()
    logits = model.head(h.mean(dim=(2, 3)))
    model.zero_grad(set_to_none=True)
    logits[0, class_idx].backward()
    grads = activation.grad[0]                      # (C, h, w)
    weights = grads.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * activation[0].detach()).sum(dim=0))
    cam = torch.nn.functional.interpolate(
        cam[None, None], size=data.shape[:2], mode="bilinear", align_corners=False
    )[0, 0]
    cam = cam.numpy()
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def save_gradcam(heatmap: np.ndarray, path, model_name: str, block: str, class_idx: int):
    """8-bit grayscale PNG plus a JSON sidecar naming model, stage, and class."""
    from PIL import Image

    arr = np.clip(np.asarray(heatmap) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
    sidecar = str(path) + ".json"
    atomic_write_bytes(sidecar, json.dumps(
        {"model": model_name, "block": block, "class_idx": class_idx},
        sort_keys=True).encode("utf-8"))
    return path, sidecar
