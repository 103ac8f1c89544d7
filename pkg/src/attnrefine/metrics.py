"""Grounding and classification metrics, and model evaluation reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

THRESHOLDS = np.round(np.arange(1, 20) * 0.05, 2)  # 0.05 ... 0.95


def _binary_pair(pred, mask, threshold):
    pred = np.asarray(pred, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: map {pred.shape} vs mask {mask.shape}")
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return pred >= threshold, mask


def dice_at(pred, mask, threshold: float = 0.5) -> float:
    """Hard Dice of ``pred >= threshold`` against ``mask``; empty vs empty is 1."""
    p, m = _binary_pair(pred, mask, threshold)
    denom = p.sum() + m.sum()
    if denom == 0:
        return 1.0
    return float(2 * np.logical_and(p, m).sum() / denom)


def iou_at(pred, mask, threshold: float = 0.5) -> float:
    p, m = _binary_pair(pred, mask, threshold)
    union = np.logical_or(p, m).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, m).sum() / union)


def _dice_per_sample(maps: np.ndarray, masks: np.ndarray, t: float) -> np.ndarray:
    p = maps >= t
    axes = tuple(range(1, maps.ndim))
    inter = np.logical_and(p, masks).sum(axis=axes)
    denom = p.sum(axis=axes) + masks.sum(axis=axes)
    return np.where(denom == 0, 1.0, 2 * inter / np.maximum(denom, 1))


def max_dice(pred_maps, masks, thresholds=THRESHOLDS) -> tuple[float, float]:
    """Best mean Dice over a threshold sweep; ties go to the lowest threshold."""
    maps = np.asarray(pred_maps, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    if maps.shape != masks.shape:
        raise ValueError(f"shape mismatch: maps {maps.shape} vs masks {masks.shape}")
    if len(maps) == 0:
        raise ValueError("max_dice needs at least one positive sample")
    best, best_t = -1.0, None
    for t in sorted(float(x) for x in thresholds):
        score = float(_dice_per_sample(maps, masks, t).mean())
        if score > best:
            best, best_t = score, t
    return best, best_t


def hit_rate(pred_maps, masks) -> float:
    """Pointing game: share of maps whose argmax (first in row-major order) hits the mask."""
    maps = np.asarray(pred_maps, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    if maps.shape != masks.shape:
        raise ValueError(f"shape mismatch: maps {maps.shape} vs masks {masks.shape}")
    if len(maps) == 0:
        raise ValueError("hit_rate needs at least one positive sample")
    flat = maps.reshape(len(maps), -1)
    peak = flat.argmax(axis=1)
    hits = masks.reshape(len(masks), -1)[np.arange(len(maps)), peak]
    return float(hits.mean())


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; tied pairs count one half."""
    from scipy.stats import rankdata

    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC requires both classes to be present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion_metrics(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """(F1, MCC) of ``scores >= threshold``. Zero denominators give 0."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if len(s) == 0:
        raise ValueError("confusion_metrics on empty input")
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal shape")
    p = s >= threshold
    tp = float(np.sum(p & y))
    tn = float(np.sum(~p & ~y))
    fp = float(np.sum(p & ~y))
    fn = float(np.sum(~p & y))
    f1_denom = 2 * tp + fp + fn
    f1 = 2 * tp / f1_denom if f1_denom else 0.0
    mcc_denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = (tp * tn - fp * fn) / mcc_denom if mcc_denom else 0.0
    return f1, mcc


# -- reports -------------------------------------------------------------

FINDING_KEYS = ("auc", "f1", "mcc", "dice_at_05", "max_dice", "best_threshold", "iou_at_best", "hit_rate")


@dataclass
class MetricReport:
    per_finding: dict[str, dict]
    macro: dict[str, float]
    n_samples: int
    config_hash: str | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_finding": self.per_finding,
            "macro": self.macro,
            "n_samples": self.n_samples,
            "config_hash": self.config_hash,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["per_finding"], d["macro"], d["n_samples"], d.get("config_hash"), d.get("meta", {}))


def macro_average(per_finding: dict[str, dict]) -> dict[str, float]:
    """Unweighted mean over findings with at least one positive; None entries skipped."""
    macro = {}
    for key in FINDING_KEYS:
        vals = [v[key] for v in per_finding.values() if v.get("n_pos", 0) > 0 and v.get(key) is not None]
        macro[key] = float(np.mean(vals)) if vals else None
    return macro


def upsample_nearest(maps: np.ndarray, factor: int) -> np.ndarray:
    return maps.repeat(factor, axis=-2).repeat(factor, axis=-1)


def report_from_outputs(probs: np.ndarray, labels: np.ndarray, maps: np.ndarray, masks: np.ndarray,
                        catalog, config_hash: str | None = None) -> MetricReport:
    """Assemble a report from (N, K) probabilities/labels and (N, K, H, W) maps/masks.

    ``maps`` must already be at mask resolution.
    """
    per = {}
    for k, name in enumerate(catalog):
        y = labels[:, k].astype(bool)
        entry = {key: None for key in FINDING_KEYS}
        entry["n_pos"] = int(y.sum())
        entry["n_neg"] = int((~y).sum())
        if entry["n_pos"] and entry["n_neg"]:
            entry["auc"] = auc(probs[:, k], y)
        if len(y):
            entry["f1"], entry["mcc"] = confusion_metrics(probs[:, k], y)
        if entry["n_pos"]:
            pm, gm = maps[y, k], masks[y, k]
            entry["dice_at_05"] = float(np.mean([dice_at(p, g, 0.5) for p, g in zip(pm, gm)]))
            entry["max_dice"], entry["best_threshold"] = max_dice(pm, gm)
            entry["iou_at_best"] = float(np.mean([iou_at(p, g, entry["best_threshold"]) for p, g in zip(pm, gm)]))
            entry["hit_rate"] = hit_rate(pm, gm)
        per[name] = entry
    return MetricReport(per, macro_average(per), int(len(labels)), config_hash)


@torch.no_grad()
def predict(model, images: np.ndarray, batch_size: int = 64):
    """Run every prompt over ``images``: (N, K) probabilities and (N, K, h, w) maps."""
    model.eval()
    dtype = next(model.parameters()).dtype
    probs, maps = [], []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(images[i:i + batch_size], dtype=dtype)
        logits, _, refined = model.forward_all(x)
        probs.append(torch.sigmoid(logits).double().numpy())
        maps.append(refined.double().numpy())
    return np.concatenate(probs), np.concatenate(maps)


def evaluate(model, dataset, config_hash: str | None = None, batch_size: int = 64) -> MetricReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if list(model.catalog) != list(dataset.catalog):
        raise ValueError(
            f"catalog mismatch: model {list(model.catalog)} vs dataset {list(dataset.catalog)}"
        )
    probs, maps = predict(model, dataset.images(), batch_size)
    maps = upsample_nearest(maps, model.config.patch_size)
    masks = np.stack([dataset.mask_array(name) for name in dataset.catalog], axis=1)
    return report_from_outputs(probs, dataset.label_matrix(), maps, masks, dataset.catalog, config_hash)


def format_table(rows: list[dict], columns=("method", "dataset", "auc", "f1", "mcc", "max_dice")) -> str:
    """Plain-text table; float cells are shown as percentages."""
    def cell(v):
        if isinstance(v, float):
            return f"{100 * v:.2f}"
        return "-" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line, sep] + ["  ".join(b[i].ljust(widths[i]) for i in range(len(columns))) for b in body])
