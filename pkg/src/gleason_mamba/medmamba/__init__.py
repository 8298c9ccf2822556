from .layers import (
    ConfigError,
    Module,
    channel_shuffle,
    channel_split,
    channel_unshuffle,
    module_op,
    parameter_arrays,
)
from .model import (
    CLASS_NAMES,
    MedMamba,
    ModelConfig,
    SSConvSSMBlock,
    SSConvSSMConfig,
    classify,
    cross_entropy,
    patch_embed,
    patch_merge,
    softmax,
    ss_conv_ssm_forward,
)
from .train import Adam, TrainConfig, TrainingDiverged, fit, predict

__all__ = [
    "Adam",
    "CLASS_NAMES",
    "ConfigError",
    "MedMamba",
    "ModelConfig",
    "Module",
    "SSConvSSMBlock",
    "SSConvSSMConfig",
    "TrainConfig",
    "TrainingDiverged",
    "channel_shuffle",
    "channel_split",
    "channel_unshuffle",
    "classify",
    "cross_entropy",
    "fit",
    "module_op",
    "parameter_arrays",
    "patch_embed",
    "patch_merge",
    "predict",
    "softmax",
    "ss_conv_ssm_forward",
]
