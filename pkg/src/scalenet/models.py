"""Backbones, the rotation-probability head, checkpoints, and weight transfer.

Three trunk families are provided: ``resnet50_style`` (bottleneck stages with a
3x3 stem, sized for 32x32-scale inputs), ``alexnet_style`` (five conv blocks),
and ``small_convnet`` (four conv blocks, ~0.5M parameters, the desk-scale
default). Every trunk ends in global average pooling before the linear head,
so the same conv weights serve any input size the downsampling allows; that is
what lets a model trained at a reduced scale continue training at full scale.

Checkpoints are plain zip archives with two members: ``manifest`` (UTF-8 JSON:
meta fields, arch, and an ordered layer-name -> {section, shape, dtype,
byte_offset} map) and ``weights.bin`` (the little-endian float32 arrays
concatenated in manifest order). Round-trips are bit-exact.
"""

from __future__ import annotations

import io
import json
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .runlog import atomic_write_bytes, derive_seed

__all__ = [
    "BackboneSpec",
    "Backbone",
    "CheckpointMeta",
    "ModelCheckpoint",
    "build_backbone",
    "predict_distribution",
    "extract_checkpoint",
    "transfer_weights",
    "freeze_conv",
    "to_model_input",
    "ConstructionError",
    "TransferError",
    "IntegrityError",
    "NumericError",
]

ARCH_BLOCK_NAMES = {
    "resnet50_style": ["stage1", "stage2", "stage3", "stage4"],
    "alexnet_style": ["ConvB1", "ConvB2", "ConvB3", "ConvB4", "ConvB5"],
    "small_convnet": ["block1", "block2", "block3", "block4"],
}
# All three trunks downsample by 8x overall.
MIN_INPUT = 8
FREEZE_ALL = "ALL"


class ConstructionError(ValueError):
    """Backbone cannot be built for the requested input size."""


class TransferError(ValueError):
    """Checkpoint and target model disagree (arch or head shape)."""


class IntegrityError(ValueError):
    """Checkpoint layer names do not match the declared architecture."""


class NumericError(FloatingPointError):
    """Non-finite values encountered where finite ones are required."""


@dataclass(frozen=True)
class BackboneSpec:
    """What to build: architecture family, input size, and head width."""

    arch: str
    input_hw: tuple = (32, 32)
    head_out: int = 4
    conv_block_names: tuple = ()

    def __post_init__(self):
        if self.arch not in ARCH_BLOCK_NAMES:
            raise ValueError(f"unknown arch {self.arch!r}; choices: {sorted(ARCH_BLOCK_NAMES)}")
        if self.head_out < 2:
            raise ValueError(f"head_out must be >= 2, got {self.head_out}")
        names = self.conv_block_names or tuple(ARCH_BLOCK_NAMES[self.arch])
        if tuple(names) != tuple(ARCH_BLOCK_NAMES[self.arch]):
            raise ValueError(f"conv_block_names for {self.arch} must be {ARCH_BLOCK_NAMES[self.arch]}")
        object.__setattr__(self, "conv_block_names", tuple(names))
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))


@dataclass
class CheckpointMeta:
    alpha: float
    epochs_trained: int
    seed: int
    schedule_digest: str
    arch: str

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"meta.alpha must be in (0, 1], got {self.alpha}")


def _conv_bn_relu(cin, cout, ksize, pool=False):
    layers = [
        nn.Conv2d(cin, cout, ksize, padding=ksize // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride=1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def _resnet_stage(cin, width, blocks, stride):
    layers = [Bottleneck(cin, width, stride)]
    cout = width * Bottleneck.expansion
    layers += [Bottleneck(cout, width) for _ in range(blocks - 1)]
    return nn.Sequential(*layers), cout


def _build_blocks(arch: str):
    """Returns (OrderedDict name -> module, feature_dim)."""
    blocks = OrderedDict()
    if arch == "small_convnet":
        widths = (16, 48, 128, 320)
        blocks["block1"] = _conv_bn_relu(3, widths[0], 3, pool=True)
        blocks["block2"] = _conv_bn_relu(widths[0], widths[1], 3, pool=True)
        blocks["block3"] = _conv_bn_relu(widths[1], widths[2], 3, pool=True)
        blocks["block4"] = _conv_bn_relu(widths[2], widths[3], 3)
        return blocks, widths[3]
    if arch == "alexnet_style":
        blocks["ConvB1"] = _conv_bn_relu(3, 64, 5, pool=True)
        blocks["ConvB2"] = _conv_bn_relu(64, 192, 5, pool=True)
        blocks["ConvB3"] = _conv_bn_relu(192, 384, 3)
        blocks["ConvB4"] = _conv_bn_relu(384, 256, 3)
        blocks["ConvB5"] = _conv_bn_relu(256, 256, 3, pool=True)
        return blocks, 256
    # resnet50_style: 3x3 stem folded into stage1, bottleneck counts 3/4/6/3
    stem = nn.Sequential(nn.Conv2d(3, 64, 3, padding=1, bias=False), nn.BatchNorm2d(64), nn.ReLU(inplace=True))
    stage1, c = _resnet_stage(64, 64, 3, stride=1)
    blocks["stage1"] = nn.Sequential(stem, stage1)
    blocks["stage2"], c = _resnet_stage(c, 128, 4, stride=2)
    blocks["stage3"], c = _resnet_stage(c, 256, 6, stride=2)
    blocks["stage4"], c = _resnet_stage(c, 512, 3, stride=2)
    return blocks, c


class Backbone(nn.Module):
    """Named conv blocks -> global average pool -> linear head."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        if min(spec.input_hw) < MIN_INPUT:
            raise ConstructionError(
                f"{spec.arch} downsamples 8x; input {spec.input_hw} is too small (min {MIN_INPUT})"
            )
        self.spec = spec
        blocks, feature_dim = _build_blocks(spec.arch)
        self.blocks = nn.ModuleDict(blocks)
        self.feature_dim = feature_dim
        self.head = nn.Linear(feature_dim, spec.head_out)
        self._frozen: set[str] = set()

    @property
    def block_names(self):
        return list(self.blocks.keys())

    def forward_trunk(self, x, upto: str | None = None):
        for name, block in self.blocks.items():
            x = block(x)
            if name == upto:
                return x
        if upto is not None:
            raise ValueError(f"unknown block {upto!r}; choices: {self.block_names}")
        return x

    def pooled_features(self, x):
        return self.forward_trunk(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.pooled_features(x))

    def block_activation(self, x, block: str):
        return self.forward_trunk(x, upto=block)

    def train(self, mode: bool = True):
        super().train(mode)
        # Frozen blocks stay in eval mode so BatchNorm buffers never move.
        for name in self._frozen:
            self.blocks[name].eval()
        return self

    def conv_state(self) -> dict:
        """Trunk float tensors by name (BatchNorm counters excluded)."""
        return {
            k: v for k, v in self.blocks.state_dict().items()
            if not k.endswith("num_batches_tracked")
        }

    def head_state(self) -> dict:
        return dict(self.head.state_dict())


def build_backbone(spec: BackboneSpec, seed: int) -> Backbone:
    """Construct and deterministically initialize a trainable backbone."""
    torch.manual_seed(derive_seed(seed, "init", spec.arch, spec.head_out))
    return Backbone(spec)


def to_model_input(images: np.ndarray) -> torch.Tensor:
    """N x H x W x C float numpy stack -> N x C x H x W float32 torch tensor."""
    arr = np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))
    return torch.from_numpy(arr)


def predict_distribution(model: Backbone, batch) -> torch.Tensor:
    """Softmax class probabilities for a batch; rows sum to 1.

    Accepts an N x H x W x C numpy stack or an N x C x H x W tensor. Raises
    :class:`NumericError` naming the first offending row if logits are not
    finite.
    """
    x = batch if isinstance(batch, torch.Tensor) else to_model_input(batch)
    logits = model(x)
    finite = torch.isfinite(logits).all(dim=1)
    if not bool(finite.all()):
        idx = int((~finite).nonzero()[0, 0])
        raise NumericError(f"non-finite logits at batch index {idx}")
    return torch.softmax(logits, dim=1)


@dataclass
class ModelCheckpoint:
    """Named weight arrays plus stage metadata; the currency between stages."""

    conv_weights: dict
    head_weights: dict
    meta: CheckpointMeta

    def __post_init__(self):
        for group in (self.conv_weights, self.head_weights):
            for k, v in group.items():
                group[k] = np.ascontiguousarray(v, dtype=np.float32)

    def save(self, path):
        layers = OrderedDict()
        payload = io.BytesIO()
        offset = 0
        for section, group in (("conv", self.conv_weights), ("head", self.head_weights)):
            for name, arr in group.items():
                raw = arr.astype("<f4", copy=False).tobytes()
                layers[name] = {
                    "section": section,
                    "shape": list(arr.shape),
                    "dtype": "<f4",
                    "byte_offset": offset,
                }
                payload.write(raw)
                offset += len(raw)
        manifest = {
            "format": "scalenet-checkpoint-v1",
            "arch": self.meta.arch,
            "meta": asdict(self.meta),
            "layers": layers,
        }
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr("manifest", json.dumps(manifest, indent=1))
            zf.writestr("weights.bin", payload.getvalue())
        atomic_write_bytes(path, buf.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest").decode("utf-8"))
            blob = zf.read("weights.bin")
        conv, head = {}, {}
        for name, entry in manifest["layers"].items():
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = entry["byte_offset"]
            arr = np.frombuffer(blob, dtype=entry["dtype"], count=size, offset=start)
            arr = arr.reshape(entry["shape"]).copy()
            (conv if entry["section"] == "conv" else head)[name] = arr
        meta = CheckpointMeta(**manifest["meta"])
        return cls(conv_weights=conv, head_weights=head, meta=meta)


def extract_checkpoint(model: Backbone, meta: CheckpointMeta) -> ModelCheckpoint:
    """Snapshot the model's trunk and head as immutable numpy arrays."""
    conv = {k: v.detach().cpu().contiguous().numpy().copy() for k, v in model.conv_state().items()}
    head = {k: v.detach().cpu().contiguous().numpy().copy() for k, v in model.head_state().items()}
    return ModelCheckpoint(conv_weights=conv, head_weights=head, meta=meta)


def _reference_conv_keys(spec: BackboneSpec) -> set:
    probe = Backbone(spec)
    return set(probe.conv_state().keys())


def transfer_weights(src: ModelCheckpoint, dst_spec: BackboneSpec,
                     reinit_head: bool, seed: int) -> Backbone:
    """Build a new model carrying the checkpoint's conv weights bitwise.

    The head is freshly initialized under ``seed`` when ``reinit_head`` (this
    is how a 4-way rotation head becomes a 10-way classifier); otherwise the
    checkpoint's head weights are restored and must match shapes.
    """
    if src.meta.arch != dst_spec.arch:
        raise TransferError(f"arch mismatch: checkpoint {src.meta.arch!r} vs target {dst_spec.arch!r}")
    model = build_backbone(dst_spec, seed)
    want = set(model.conv_state().keys())
    have = set(src.conv_weights.keys())
    if want != have:
        missing = sorted(want - have)
        extra = sorted(have - want)
        raise IntegrityError(f"checkpoint layer mismatch: missing={missing} extra={extra}")
    model.blocks.load_state_dict(
        {k: torch.from_numpy(v.copy()) for k, v in src.conv_weights.items()}, strict=False
    )
    if not reinit_head:
        current = model.head_state()
        for k, arr in src.head_weights.items():
            if k not in current or tuple(current[k].shape) != tuple(arr.shape):
                raise TransferError(
                    f"head shape mismatch on {k!r}: checkpoint {tuple(arr.shape)} vs "
                    f"target {tuple(current[k].shape) if k in current else None}; "
                    "pass reinit_head=True to change head width"
                )
        model.head.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in src.head_weights.items()})
    return model


def freeze_conv(model: Backbone, upto_block: str = FREEZE_ALL) -> Backbone:
    """Disable gradient updates for the named prefix of conv blocks.

    ``upto_block`` is a block name (freezes it and everything shallower) or
    ``"ALL"``. Frozen BatchNorm layers are pinned to eval mode so a training
    step leaves the frozen weights bitwise unchanged.
    """
    names = model.block_names
    if upto_block == FREEZE_ALL:
        prefix = names
    elif upto_block in names:
        prefix = names[: names.index(upto_block) + 1]
    else:
        raise ValueError(f"unknown block {upto_block!r}; choices: {names + [FREEZE_ALL]}")
    for name in prefix:
        for p in model.blocks[name].parameters():
            p.requires_grad_(False)
        model._frozen.add(name)
        model.blocks[name].eval()
    return model
