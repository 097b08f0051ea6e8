"""Modality-aware mutual learning for multi-modal volumetric segmentation."""

from .backbone import BackboneConfig, ConfigError, SegmentationHead, UNet3D
from .core import (
    DataQualityError,
    Mask,
    MultiModalCase,
    RegistrationRequiredError,
    Volume,
    aggregate_per_case,
    assd,
    dice_score,
    preprocess_case,
)
from .data import PatchSpec, SynthSpec, generate_synthetic, load_dataset, write_dataset
from .engine import (
    Checkpoint,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    predict_multimodal,
    predict_single,
    train,
)
from .fusion import FusionConfig, ModalityAwareFusion, weighted_aggregate
from .model import MAMLNet, SingleModalityNet
from .objective import mutual_learning_loss, seg_loss

__version__ = "0.1.0"
