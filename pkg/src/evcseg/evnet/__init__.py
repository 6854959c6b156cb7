from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .loss import LossReport, soft_dice_loss
from .network import EvNetConfig, evnet_backward, evnet_forward, init_params
from .optim import sgd_step

__all__ = [
    "EvNetConfig",
    "LossReport",
    "config_hash",
    "evnet_backward",
    "evnet_forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "sgd_step",
    "soft_dice_loss",
]
