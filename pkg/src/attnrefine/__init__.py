"""Attention-map refinement for vision-language classifiers."""
from .losses import LossConfig, cls_loss, fp_dice_score, seg_loss, soft_dice_score, total_loss
from .model import (AttnRefineNet, FindingCatalog, ModelConfig, SegHead, build_model, iei_init,
                    random_head_init, seg_head_apply)

__version__ = "0.1.0"
