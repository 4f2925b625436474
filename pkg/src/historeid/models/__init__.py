"""Re-identification model architectures and training loops."""

from .nets import (
    EncoderConfig,
    EncoderError,
    GatedAttentionPool,
    MILClassifier,
    PatchClassifier,
    TinyPatchEncoder,
    build_encoder,
    embed_patches,
    encoder_state_bytes,
    patches_to_tensor,
)
from .training import (
    Bag,
    EpochRecord,
    SlidePrediction,
    TrainedModel,
    TrainingConfig,
    TrainingError,
    load_checkpoint,
    make_bags,
    predict_slide_mil,
    predict_slide_patchwise,
    save_checkpoint,
    train_mil,
    train_patch_classifier,
    write_history,
)

__all__ = [
    "Bag",
    "EncoderConfig",
    "EncoderError",
    "EpochRecord",
    "GatedAttentionPool",
    "MILClassifier",
    "PatchClassifier",
    "SlidePrediction",
    "TinyPatchEncoder",
    "TrainedModel",
    "TrainingConfig",
    "TrainingError",
    "build_encoder",
    "embed_patches",
    "encoder_state_bytes",
    "load_checkpoint",
    "make_bags",
    "patches_to_tensor",
    "predict_slide_mil",
    "predict_slide_patchwise",
    "save_checkpoint",
    "train_mil",
    "train_patch_classifier",
    "write_history",
]
