"""Classification and attention-map objectives.

All functions operate on torch tensors and are differentiable, so the same
code path is used for training and for the finite-difference checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    smooth: float = 1.0
    eps: float = 1e-6
    w_fp: float = 2.0
    alpha_seg: float = 1.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"loss.eps must be > 0, got {self.eps}")
        if not self.w_fp >= 1:
            raise ValueError(f"loss.w_fp must be >= 1, got {self.w_fp}")
        if not self.smooth >= 0:
            raise ValueError(f"loss.smooth must be >= 0, got {self.smooth}")
        if not self.alpha_seg >= 0:
            raise ValueError(f"loss.alpha_seg must be >= 0, got {self.alpha_seg}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    with torch.no_grad():
        if pred.numel() and (pred.min() < 0 or pred.max() > 1):
            raise ValueError("pred values must lie in [0, 1]")


def _fp_dice(pred, target, smooth, eps, w_fp, dims=None):
    pred = _as_tensor(pred)
    target = _as_tensor(target).to(pred.dtype)
    _check_pair(pred, target)
    if dims is None:
        dims = tuple(range(pred.dim()))
    inter = (pred * target).sum(dim=dims)
    card_x = pred.sum(dim=dims)
    card_y = target.sum(dim=dims)
    fp = (pred * (1 - target)).sum(dim=dims)
    return (2 * inter + smooth + eps) / (card_x + card_y + (w_fp - 1) * fp + smooth + eps)


def soft_dice_score(pred, target, cfg: LossConfig = LossConfig(), eps: float | None = None) -> torch.Tensor:
    """(2|X∩Y| + smooth + eps) / (|X| + |Y| + smooth + eps).

    ``eps`` may be overridden (including with 0) for exact worked examples;
    LossConfig itself requires eps > 0.
    """
    e = cfg.eps if eps is None else eps
    return _fp_dice(pred, target, cfg.smooth, e, 1.0)


def fp_dice_score(pred, target, cfg: LossConfig = LossConfig(), eps: float | None = None) -> torch.Tensor:
    """Soft Dice whose target cardinality is inflated by ``(w_fp - 1) * FP``.

    FP is the soft false-positive mass ``sum(pred * (1 - target))``.
    """
    e = cfg.eps if eps is None else eps
    return _fp_dice(pred, target, cfg.smooth, e, cfg.w_fp)


def seg_loss(pred, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return 1 - fp_dice_score(pred, target, cfg)


def batch_seg_loss(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean of per-sample ``seg_loss`` over the leading dimension."""
    if pred.shape[0] == 0:
        return pred.sum() * 0
    dims = tuple(range(1, pred.dim()))
    return (1 - _fp_dice(pred, target, cfg.smooth, cfg.eps, cfg.w_fp, dims)).mean()


def cls_loss(logits, labels) -> torch.Tensor:
    """Mean per-finding binary cross-entropy on logistic(logit)."""
    logits, labels = _as_tensor(logits), _as_tensor(labels)
    if logits.shape != labels.shape:
        raise ValueError(f"length mismatch: {tuple(logits.shape)} logits vs {tuple(labels.shape)} labels")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def total_loss(cls, seg, cfg: LossConfig = LossConfig()):
    for name, v in (("cls", cls), ("seg", seg)):
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise ValueError(f"non-finite {name} loss: {val}")
    return cfg.alpha_seg * seg + cls
