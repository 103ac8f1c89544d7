"""Training loops: cyclic per-finding refinement and its comparison arms."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset, SyntheticConfig, decompose, generate_synthetic
from .losses import LossConfig, batch_seg_loss, cls_loss, total_loss
from .metrics import MetricReport, evaluate
from .model import AttnRefineNet, ModelConfig, build_model, params_hash, squash_raw

log = logging.getLogger(__name__)

ARMS = ("dwarf", "cls_only", "gain", "direct_attention", "dwarf_expert_teacher")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    # freshly initialized heads sit on top of a warmed-up backbone; they get a larger step
    head_lr_mult: float = 10.0
    seed: int = 0
    loss: LossConfig = LossConfig()
    init_mode: str = "iei"
    arm: str = "dwarf"
    negative_ratio: float = 1.0
    eval_every: int = 5
    # "native" uses each arm's own schedule; "cyclic"/"joint" force one
    schedule: str = "native"
    shuffle_findings: bool = False
    gain_use_heads: bool = True
    expert_epochs: int = 40
    # classification-only warm start on a disjoint corpus; 0 disables it
    pretrain_samples: int = 1000
    pretrain_epochs: int = 30
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if self.arm not in ARMS:
            raise ValueError(f"train.arm must be one of {ARMS}, got {self.arm!r}")
        if self.init_mode not in ("iei", "random"):
            raise ValueError(f"train.init_mode must be 'iei' or 'random', got {self.init_mode!r}")
        if self.schedule not in ("native", "cyclic", "joint"):
            raise ValueError(f"train.schedule must be native, cyclic or joint, got {self.schedule!r}")
        if self.negative_ratio < 0:
            raise ValueError(f"train.negative_ratio must be >= 0, got {self.negative_ratio}")
        if self.head_lr_mult <= 0:
            raise ValueError(f"train.head_lr_mult must be > 0, got {self.head_lr_mult}")
        if self.pretrain_samples < 0 or self.pretrain_epochs < 0:
            raise ValueError("train.pretrain_samples and train.pretrain_epochs must be >= 0")
        if self.expert_epochs < 1:
            raise ValueError(f"train.expert_epochs must be >= 1, got {self.expert_epochs}")
        if self.eval_every < 1:
            raise ValueError(f"train.eval_every must be >= 1, got {self.eval_every}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def pretrains(self) -> bool:
        return self.pretrain_samples > 0 and self.pretrain_epochs > 0

    @property
    def cyclic(self) -> bool:
        if self.schedule != "native":
            return self.schedule == "cyclic"
        return self.arm in ("dwarf", "direct_attention", "dwarf_expert_teacher")


@dataclass
class TrainState:
    model: AttnRefineNet
    epoch: int = 0
    finding_cursor: int = 0
    history: list[dict] = field(default_factory=list)
    best: dict = field(default_factory=dict)  # criterion -> {"epoch", "val", "state_dict"}


@dataclass
class TrainData:
    """Tensors for one split, indexed by dataset row."""
    images: torch.Tensor  # (N, H, W)
    labels: torch.Tensor  # (N, K)
    masks: torch.Tensor  # (N, K, H, W) float 0/1
    dataset: Dataset

    @classmethod
    def from_dataset(cls, ds: Dataset, dtype=torch.float32) -> "TrainData":
        masks = np.stack([ds.mask_array(n) for n in ds.catalog], axis=1)
        return cls(
            torch.as_tensor(ds.images(), dtype=dtype),
            torch.as_tensor(ds.label_matrix(), dtype=dtype),
            torch.as_tensor(masks, dtype=dtype),
            ds,
        )


def finding_schedule(k: int, epochs: int, shuffle: bool = False, seed: int = 0) -> list[int]:
    """Finding index trained at each epoch of a cyclic run."""
    if not shuffle:
        return [e % k for e in range(epochs)]
    rng = np.random.default_rng([seed, 7])
    order: list[int] = []
    while len(order) < epochs:
        order.extend(int(i) for i in rng.permutation(k))
    return order[:epochs]


def _upsample(maps: torch.Tensor, factor: int) -> torch.Tensor:
    return maps.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def _check_finite(epoch, step, **losses):
    for name, v in losses.items():
        if not math.isfinite(float(v)):
            raise TrainingDiverged(
                f"non-finite {name} loss at epoch {epoch}, step {step}: "
                + ", ".join(f"{k}={float(x):.6g}" for k, x in losses.items())
            )


def _cyclic_epoch(model, opt, data: TrainData, cfg: TrainConfig, epoch: int, f: int,
                  targets: torch.Tensor, seg_source: str | None) -> dict:
    """One epoch on finding ``f``'s single-label view.

    ``seg_source`` is "head", "raw" or None (no segmentation term).
    """
    ds = data.dataset
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        view = decompose(ds, cfg.negative_ratio, seed=int(np.random.default_rng([cfg.seed, epoch]).integers(2**31)))[f]
    if not view.positives:
        warnings.warn(f"epoch {epoch}: view for {view.finding!r} is empty; skipped", stacklevel=2)
        return {"epoch": epoch, "finding": view.finding, "skipped": True}
    row = {sid: i for i, sid in enumerate(ds.ids)}
    idx = np.sort(np.array([row[s] for s in view.positives + view.negatives]))
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    idx = idx[rng.permutation(len(idx))]
    p = model.config.patch_size
    sums = {"cls": 0.0, "seg": 0.0, "n": 0}
    for step, start in enumerate(range(0, len(idx), cfg.batch_size)):
        b = torch.as_tensor(idx[start:start + cfg.batch_size])
        logits, attn, refined = model(data.images[b], f)
        l_cls = cls_loss(logits, data.labels[b, f])
        pos = data.labels[b, f] > 0
        use_seg = seg_source is not None and cfg.loss.alpha_seg > 0 and bool(pos.any())
        l_seg = torch.zeros((), dtype=l_cls.dtype)
        if use_seg:
            maps = refined if seg_source == "head" else squash_raw(attn)
            l_seg = batch_seg_loss(_upsample(maps[pos], p), targets[b[pos], f], cfg.loss)
        _check_finite(epoch, step, cls=l_cls.detach(), seg=l_seg.detach())
        loss = total_loss(l_cls, l_seg, cfg.loss) if use_seg else l_cls
        opt.zero_grad()
        loss.backward()
        opt.step()
        sums["cls"] += float(l_cls.detach()) * len(b)
        sums["seg"] += float(l_seg.detach()) * len(b)
        sums["n"] += len(b)
    return {"epoch": epoch, "finding": view.finding, "cls_loss": sums["cls"] / sums["n"],
            "seg_loss": sums["seg"] / sums["n"], "n_samples": sums["n"]}


def _joint_epoch(model, opt, data: TrainData, cfg: TrainConfig, epoch: int,
                 targets: torch.Tensor, seg_source: str | None) -> dict:
    """One epoch over every sample with all prompts in each step."""
    n = len(data.images)
    rng = np.random.default_rng([cfg.seed, epoch, 1])
    idx = np.arange(n)[rng.permutation(n)]
    p = model.config.patch_size
    sums = {"cls": 0.0, "seg": 0.0, "n": 0}
    for step, start in enumerate(range(0, n, cfg.batch_size)):
        b = torch.as_tensor(idx[start:start + cfg.batch_size])
        logits, attn, refined = model.forward_all(data.images[b])
        l_cls = cls_loss(logits, data.labels[b])
        l_seg = torch.zeros((), dtype=l_cls.dtype)
        use_seg = seg_source is not None and cfg.loss.alpha_seg > 0
        if use_seg:
            maps = refined if seg_source == "head" else squash_raw(attn)
            for k in range(logits.shape[1]):
                pos = data.labels[b, k] > 0
                if bool(pos.any()):
                    l_seg = l_seg + batch_seg_loss(_upsample(maps[pos, k], p), targets[b[pos], k], cfg.loss)
        _check_finite(epoch, step, cls=l_cls.detach(), seg=l_seg.detach())
        loss = total_loss(l_cls, l_seg, cfg.loss) if use_seg else l_cls
        opt.zero_grad()
        loss.backward()
        opt.step()
        sums["cls"] += float(l_cls.detach()) * len(b)
        sums["seg"] += float(l_seg.detach()) * len(b)
        sums["n"] += len(b)
    return {"epoch": epoch, "finding": "all", "cls_loss": sums["cls"] / sums["n"],
            "seg_loss": sums["seg"] / sums["n"], "n_samples": sums["n"]}


def make_optimizer(model: AttnRefineNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    head_params = list(model.seg_heads.parameters())
    head_ids = {id(p) for p in head_params}
    rest = [p for p in model.parameters() if id(p) not in head_ids]
    return torch.optim.AdamW(
        [{"params": rest}, {"params": head_params, "lr": cfg.learning_rate * cfg.head_lr_mult}],
        lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
    )


def _macro(report: MetricReport, key: str) -> float:
    v = report.macro.get(key)
    return -math.inf if v is None else v


def run_training(train: Dataset, cfg: TrainConfig, val: Dataset | None = None,
                 teacher_masks: torch.Tensor | None = None,
                 on_epoch: Callable[[dict], None] | None = None,
                 model: AttnRefineNet | None = None) -> TrainState:
    """Shared driver for every arm.

    The segmentation source and schedule follow ``cfg.arm``; ``teacher_masks``
    (N, K, H, W) replaces the ground-truth masks when given.
    """
    torch.manual_seed(cfg.seed)
    if model is None:
        model = build_model(train.catalog, cfg.model, seed=cfg.seed, init_mode=cfg.init_mode)
    data = TrainData.from_dataset(train, dtype=next(model.parameters()).dtype)
    targets = data.masks if teacher_masks is None else teacher_masks.to(data.masks.dtype)
    if targets.shape != data.masks.shape:
        raise ValueError(f"teacher masks {tuple(targets.shape)} do not match data {tuple(data.masks.shape)}")

    if cfg.arm == "cls_only":
        seg_source = None
    elif cfg.arm == "direct_attention":
        seg_source = "raw"
    elif cfg.arm == "gain" and not cfg.gain_use_heads:
        seg_source = "raw"
    else:
        seg_source = "head"

    opt = make_optimizer(model, cfg)
    k = len(train.catalog)
    order = finding_schedule(k, cfg.epochs, cfg.shuffle_findings, cfg.seed)
    state = TrainState(model)
    chash = cfg.config_hash()
    for epoch in range(cfg.epochs):
        model.train()
        if cfg.cyclic:
            state.finding_cursor = order[epoch]
            rec = _cyclic_epoch(model, opt, data, cfg, epoch, order[epoch], targets, seg_source)
        else:
            rec = _joint_epoch(model, opt, data, cfg, epoch, targets, seg_source)
        state.epoch = epoch + 1
        if val is not None and (state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs):
            report = evaluate(model, val, chash)
            rec["val"] = {key: report.macro[key] for key in ("auc", "f1", "mcc", "max_dice", "hit_rate")}
            for crit in ("max_dice", "auc"):
                prev = state.best.get(crit)
                if prev is None or _macro(report, crit) > prev["score"]:
                    state.best[crit] = {"epoch": state.epoch, "score": _macro(report, crit),
                                        "state_dict": copy.deepcopy(model.state_dict())}
        state.history.append(rec)
        log.debug(json.dumps(rec))
        if on_epoch is not None:
            on_epoch(rec)
    model.eval()
    return state


def train_dwarf(train: Dataset, cfg: TrainConfig, val: Dataset | None = None, **kw) -> TrainState:
    return run_training(train, replace(cfg, arm="dwarf"), val, **kw)


def train_cls_only(train: Dataset, cfg: TrainConfig, val: Dataset | None = None, **kw) -> TrainState:
    return run_training(train, replace(cfg, arm="cls_only"), val, **kw)


def train_gain(train: Dataset, cfg: TrainConfig, val: Dataset | None = None, **kw) -> TrainState:
    return run_training(train, replace(cfg, arm="gain"), val, **kw)


def train_direct_attention(train: Dataset, cfg: TrainConfig, val: Dataset | None = None, **kw) -> TrainState:
    return run_training(train, replace(cfg, arm="direct_attention"), val, **kw)


# -- warm start ----------------------------------------------------------

PRETRAIN_SEED_OFFSET = 10_000


def pretrain_corpus(data_cfg: SyntheticConfig, cfg: TrainConfig) -> Dataset:
    """Synthetic corpus for the warm start, disjoint from the benchmark splits by seed."""
    corpus_cfg = replace(data_cfg, n_train=cfg.pretrain_samples, n_val=1, n_test=1,
                         seed=PRETRAIN_SEED_OFFSET + cfg.seed)
    return generate_synthetic(corpus_cfg)[0]


def pretrain_backbone(corpus: Dataset, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    """Classification-only training that plays the role of a pretrained vision-language model.

    Returns a state dict; the segmentation heads in it are untouched by this stage.
    """
    state = run_training(corpus, pretrain_config(cfg))
    return copy.deepcopy(state.model.state_dict())


def pretrain_config(cfg: TrainConfig) -> TrainConfig:
    """The fields of ``cfg`` the warm start depends on; equal results for equal outputs."""
    return TrainConfig(epochs=max(cfg.pretrain_epochs, 1), batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                       seed=cfg.seed, arm="cls_only", model=cfg.model,
                       pretrain_samples=cfg.pretrain_samples, pretrain_epochs=cfg.pretrain_epochs)


def finetune_model(catalog, cfg: TrainConfig, backbone: dict | None = None) -> AttnRefineNet:
    """Fresh model for ``cfg``, optionally loaded from a warm-start state with re-initialized heads."""
    model = build_model(catalog, cfg.model, seed=cfg.seed, init_mode=cfg.init_mode)
    if backbone is not None:
        model.load_state_dict(backbone)
        model.init_heads(cfg.init_mode, cfg.seed)
    return model


# -- expert teachers -----------------------------------------------------

class ExpertNet(nn.Module):
    """Small encoder-decoder producing a per-pixel probability map."""

    def __init__(self, width: int = 16, prior: float = 0.05):
        super().__init__()
        self.enc1 = nn.Sequential(nn.Conv2d(1, width, 3, padding=1), nn.ReLU())
        self.enc2 = nn.Sequential(nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
                                  nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU())
        self.enc3 = nn.Sequential(nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
                                  nn.Conv2d(2 * width, 2 * width, 3, padding=2, dilation=2), nn.ReLU())
        self.dec2 = nn.Sequential(nn.Conv2d(4 * width, width, 3, padding=1), nn.ReLU())
        self.dec1 = nn.Sequential(nn.Conv2d(2 * width, width, 3, padding=1), nn.ReLU(), nn.Conv2d(width, 1, 1))
        # start near a small foreground prior; at 0.5 everywhere the FP term swamps the overlap term
        nn.init.constant_(self.dec1[-1].bias, math.log(prior / (1 - prior)))

    def forward(self, x):
        x = x[:, None]
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2), e1], dim=1))
        return torch.sigmoid(d1[:, 0])


@dataclass
class ExpertModel:
    finding: str
    net: ExpertNet

    @torch.no_grad()
    def predict(self, images, batch_size: int = 64) -> torch.Tensor:
        self.net.eval()
        x = torch.as_tensor(images, dtype=torch.float32)
        return torch.cat([self.net(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])

    def pseudo_masks(self, images, threshold: float = 0.5) -> torch.Tensor:
        return (self.predict(images) >= threshold).float()


def train_expert(train: Dataset, finding: str, cfg: TrainConfig) -> ExpertModel:
    """Fit a segmentation expert on the (image, mask) pairs of one finding's positives."""
    k = train.catalog.index(finding)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        view = decompose(train, cfg.negative_ratio, seed=cfg.seed)[k]
    if not view.positives:
        raise ValueError(f"cannot train an expert for {finding!r}: no positive samples")
    torch.manual_seed(cfg.seed * 7919 + k)
    net = ExpertNet()
    row = {sid: i for i, sid in enumerate(train.ids)}
    idx = np.array([row[s] for s in view.positives])
    images = torch.as_tensor(train.images())
    masks = torch.as_tensor(train.mask_array(finding), dtype=torch.float32)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    for epoch in range(cfg.expert_epochs):
        net.train()
        rng = np.random.default_rng([cfg.seed, k, epoch, 2])
        order = idx[rng.permutation(len(idx))]
        for start in range(0, len(order), cfg.batch_size):
            b = torch.as_tensor(order[start:start + cfg.batch_size])
            loss = batch_seg_loss(net(images[b]), masks[b], cfg.loss)
            _check_finite(epoch, start // cfg.batch_size, seg=loss.detach())
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    for prm in net.parameters():
        prm.requires_grad_(False)
    return ExpertModel(finding, net)


def teacher_targets(train: Dataset, experts: dict[str, ExpertModel], threshold: float = 0.5) -> torch.Tensor:
    """(N, K, H, W) hard pseudo-labels from the frozen experts."""
    missing = [n for n in train.catalog if n not in experts]
    if missing:
        raise ValueError(f"missing expert for findings: {missing}")
    images = train.images()
    return torch.stack([experts[n].pseudo_masks(images, threshold) for n in train.catalog], dim=1)


def train_dwarf_with_teachers(train: Dataset, experts: dict[str, ExpertModel], cfg: TrainConfig,
                              val: Dataset | None = None, **kw) -> TrainState:
    targets = teacher_targets(train, experts)
    return run_training(train, replace(cfg, arm="dwarf_expert_teacher"), val, teacher_masks=targets, **kw)


def train_arm(train: Dataset, cfg: TrainConfig, val: Dataset | None = None,
              experts: dict[str, ExpertModel] | None = None, **kw) -> TrainState:
    if cfg.arm == "dwarf_expert_teacher":
        if experts is None:
            experts = {n: train_expert(train, n, cfg) for n in train.catalog}
        return train_dwarf_with_teachers(train, experts, cfg, val, **kw)
    return run_training(train, cfg, val, **kw)


def checkpoint_hash(state: TrainState) -> str:
    return params_hash(state.model)
