"""Qualitative overlays: input, refined-map heat overlay and ground-truth contour."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

CONTOUR_RGB = (255, 64, 64)


def mask_contour(mask: np.ndarray) -> np.ndarray:
    """1-px inner boundary: mask pixels with at least one 4-neighbour outside the mask."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def render_overlay(image: np.ndarray, heat: np.ndarray, mask: np.ndarray, alpha: float = 0.5,
                   cmap: str = "viridis") -> np.ndarray:
    """(H, 2W, 3) uint8 panel: grayscale input on the left, heat overlay with GT contour on the right.

    ``heat`` must already be at image resolution with values in [0, 1].
    """
    image = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    heat = np.clip(np.asarray(heat, dtype=np.float64), 0, 1)
    if image.shape != heat.shape or image.shape != np.shape(mask):
        raise ValueError(f"shape mismatch: image {image.shape}, heat {heat.shape}, mask {np.shape(mask)}")
    gray = np.repeat(image[..., None], 3, axis=-1)
    colored = colormaps[cmap](heat)[..., :3]
    blend = (1 - alpha) * gray + alpha * colored
    left = np.round(gray * 255).astype(np.uint8)
    right = np.round(blend * 255).astype(np.uint8)
    right[mask_contour(mask)] = CONTOUR_RGB
    return np.concatenate([left, right], axis=1)


def select_overlays(pairs: list[tuple[str, str]], n: int, seed: int) -> list[tuple[str, str]]:
    """Deterministic subset of ``min(n, len(pairs))`` (sample id, finding) pairs, kept in input order."""
    if n >= len(pairs):
        return list(pairs)
    keep = np.sort(np.random.default_rng(seed).choice(len(pairs), size=n, replace=False))
    return [pairs[i] for i in keep]


def save_overlay(path, panel: np.ndarray, scale: int = 4) -> None:
    im = Image.fromarray(panel)
    if scale > 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path)
