"""Multi-scale self-supervised pretraining toolkit.

Rotation-prediction pretraining over a ladder of image scales with conv-weight
transfer between stages, a multi-scale contrastive variant, limited-information
input ablations (corner whitening, pseudo-grayscale, hybrids), and downstream
evaluation by fine-tuning and frozen linear probes.
"""

__version__ = "0.1.0"

from . import contrastive, data, eval, models, pretext, transforms  # noqa: F401
from .models import BackboneSpec, ModelCheckpoint, build_backbone, freeze_conv, transfer_weights  # noqa: F401
from .pretext import (  # noqa: F401
    LrLadder,
    OptimizerConfig,
    ScaleSchedule,
    ScaleStage,
    baseline_schedule,
    train_scalenet_chain,
    two_stage_schedule,
)
from .contrastive import ContrastiveConfig, nt_xent_loss, train_multiscale_simclr  # noqa: F401
from .eval import finetune_classifier, gradcam, linear_probe, probe_all_blocks, subsample  # noqa: F401
from .transforms import HarrisParams, harris_corners, remove_corners, resize, rotate_quarter  # noqa: F401
from .data import LabeledImageDataset, ingest_dataset, make_synthetic_dataset  # noqa: F401
