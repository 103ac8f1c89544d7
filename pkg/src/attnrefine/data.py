"""Datasets: synthetic lesion generation, annotation ingestion, rasterisation
and per-finding decomposition."""
from __future__ import annotations

import hashlib
import json
import re
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .model import FindingCatalog

SPLITS = ("train", "val", "test")
SHAPE_FAMILIES = ("disc", "ring", "bar", "square", "triangle")


class AnnotationError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W) float32 in [0, 1]
    labels: np.ndarray  # (K,) uint8
    masks: dict[str, np.ndarray] = field(default_factory=dict)  # finding -> (H, W) bool

    def check(self, catalog: FindingCatalog) -> None:
        if self.image.ndim != 2:
            raise ValueError(f"{self.id}: image must be 2-D")
        if len(self.labels) != len(catalog):
            raise ValueError(f"{self.id}: {len(self.labels)} labels for {len(catalog)} findings")
        for k, name in enumerate(catalog):
            mask = self.masks.get(name)
            has_mask = mask is not None and bool(mask.any())
            if bool(self.labels[k]) != has_mask:
                raise ValueError(f"{self.id}: label/mask disagree for {name!r}")
            if mask is not None and mask.shape != self.image.shape:
                raise ValueError(f"{self.id}: mask {mask.shape} vs image {self.image.shape} for {name!r}")
        extra = set(self.masks) - set(catalog)
        if extra:
            raise ValueError(f"{self.id}: masks for findings outside catalog: {sorted(extra)}")


@dataclass
class Dataset:
    samples: list[Sample]
    catalog: FindingCatalog
    split: str = "train"

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate sample ids in {self.split} split: {dup}")
        self._by_id = {s.id: s for s in self.samples}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, sample_id: str) -> Sample:
        return self._by_id[sample_id]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def label_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.catalog)), dtype=np.uint8)
        return np.stack([s.labels for s in self.samples]).astype(np.uint8)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples]).astype(np.float32)

    def mask_array(self, finding: str) -> np.ndarray:
        """(N, H, W) bool; all-zero where the finding is absent."""
        out = np.zeros((len(self.samples),) + self.samples[0].image.shape, dtype=bool)
        for i, s in enumerate(self.samples):
            m = s.masks.get(finding)
            if m is not None:
                out[i] = m
        return out


@dataclass(frozen=True)
class SingleLabelView:
    finding: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]


# -- rasterisation -------------------------------------------------------

def _pixel_centers(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def polygon_area(vertices) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_to_mask(vertices, h: int, w: int) -> np.ndarray:
    """Even-odd fill of a polygon; a pixel is set when its center is inside."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2:
        raise ValueError(f"vertices must be a list of (x, y) pairs, got shape {v.shape}")
    if len(v) < 3:
        raise ValueError(f"polygon needs at least 3 vertices, got {len(v)}")
    if v[:, 0].min() < 0 or v[:, 0].max() > w or v[:, 1].min() < 0 or v[:, 1].max() > h:
        raise ValueError(f"polygon vertices fall outside the {w}x{h} frame")
    if abs(polygon_area(v)) == 0.0:
        warnings.warn("degenerate polygon with zero area; returning empty mask", stacklevel=2)
        return np.zeros((h, w), dtype=bool)
    px, py = _pixel_centers(h, w)
    inside = np.zeros((h, w), dtype=bool)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for xa, ya, xb, yb in zip(x0, y0, x1, y1):
        if ya == yb:
            continue
        straddle = (ya > py) != (yb > py)
        x_cross = xa + (py - ya) * (xb - xa) / (yb - ya)
        inside ^= straddle & (px < x_cross)
    return inside


def bbox_to_mask(x0: float, y0: float, x1: float, y1: float, h: int, w: int) -> np.ndarray:
    """Filled box of pixel centers in ``[x0, x1) x [y0, y1)`` after clipping."""
    cx0, cx1 = max(float(x0), 0.0), min(float(x1), float(w))
    cy0, cy1 = max(float(y0), 0.0), min(float(y1), float(h))
    if not (cx0 < cx1 and cy0 < cy1):
        raise ValueError(f"box ({x0}, {y0}, {x1}, {y1}) has zero area inside the {w}x{h} frame")
    px, py = _pixel_centers(h, w)
    return (px >= cx0) & (px < cx1) & (py >= cy0) & (py < cy1)


# -- synthetic lesions ---------------------------------------------------

@dataclass(frozen=True)
class FindingSpec:
    name: str
    shape: str
    size_range: tuple[float, float] = (6.0, 10.0)
    intensity_range: tuple[float, float] = (0.25, 0.45)

    def __post_init__(self):
        if self.shape not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {self.shape!r}; expected one of {SHAPE_FAMILIES}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError(f"{self.name}: size_range must satisfy 0 < lo <= hi, got {self.size_range}")


DEFAULT_FINDINGS = (
    FindingSpec("Mass", "disc", (5.0, 9.0)),
    FindingSpec("Atelectasis", "bar", (14.0, 22.0)),
    FindingSpec("Cardiomegaly", "ring", (8.0, 12.0)),
)


@dataclass(frozen=True)
class SyntheticConfig:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    image_size: int = 64
    patch_size: int = 8
    findings: tuple[FindingSpec, ...] = DEFAULT_FINDINGS
    cooccurrence: float = 0.3
    empty_rate: float = 0.25
    noise: float = 0.05
    distractors: int = 2
    distractor_intensity: tuple[float, float] = (0.15, 0.35)
    seed: int = 0

    def __post_init__(self):
        for key in ("n_train", "n_val", "n_test"):
            if getattr(self, key) <= 0:
                raise ValueError(f"data.{key} must be > 0, got {getattr(self, key)}")
        if self.image_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(
                f"data.image_size={self.image_size} must be a positive multiple of patch_size={self.patch_size}"
            )
        if not 0 <= self.cooccurrence <= 1:
            raise ValueError(f"data.cooccurrence must be in [0, 1], got {self.cooccurrence}")
        if not 0 <= self.empty_rate < 1:
            raise ValueError(f"data.empty_rate must be in [0, 1), got {self.empty_rate}")
        if self.noise < 0:
            raise ValueError(f"data.noise must be >= 0, got {self.noise}")
        if self.distractors < 0:
            raise ValueError(f"data.distractors must be >= 0, got {self.distractors}")
        if not self.findings:
            raise ValueError("data.findings must not be empty")
        for f in self.findings:
            reach = 2 * f.size_range[1] if f.shape in ("disc", "ring") else f.size_range[1]
            if reach >= self.image_size:
                raise ValueError(f"lesion {f.name!r} (size up to {f.size_range[1]}) is larger than the image")

    @property
    def catalog(self) -> FindingCatalog:
        return FindingCatalog(f.name for f in self.findings)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["findings"] = [asdict(f) for f in self.findings]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "findings" in d:
            specs = []
            for f in d["findings"]:
                if not isinstance(f, dict):
                    raise ValueError(f"data.findings entries must be mappings with name/shape/size_range, got {f!r}")
                f = dict(f)
                for key in ("size_range", "intensity_range"):
                    if key in f:
                        f[key] = tuple(f[key])
                specs.append(FindingSpec(**f))
            d["findings"] = tuple(specs)
        if "distractor_intensity" in d:
            d["distractor_intensity"] = tuple(d["distractor_intensity"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


def _lesion_mask(spec: FindingSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    s = rng.uniform(*spec.size_range)
    px, py = _pixel_centers(size, size)
    if spec.shape in ("disc", "ring"):
        cx, cy = rng.uniform(s + 1, size - s - 1, size=2)
        r2 = (px - cx) ** 2 + (py - cy) ** 2
        if spec.shape == "disc":
            return r2 <= s * s
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    half = s / 2
    if spec.shape == "bar":
        angle = rng.uniform(0, np.pi)
        u = np.array([np.cos(angle), np.sin(angle)])
        n = np.array([-u[1], u[0]])
        hw = max(s / 8, 1.5)
        corners_rel = [u * half + n * hw, u * half - n * hw, -u * half - n * hw, -u * half + n * hw]
    elif spec.shape == "square":
        corners_rel = [np.array(c) * half for c in ((1, 1), (1, -1), (-1, -1), (-1, 1))]
    else:  # triangle
        corners_rel = [np.array((np.cos(t), np.sin(t))) * half * 1.2
                       for t in rng.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3]
    ext = np.max(np.abs(np.array(corners_rel)), axis=0)
    cx = rng.uniform(ext[0] + 1, size - ext[0] - 1)
    cy = rng.uniform(ext[1] + 1, size - ext[1] - 1)
    verts = [(cx + c[0], cy + c[1]) for c in corners_rel]
    return polygon_to_mask(verts, size, size)


def _make_sample(sample_id: str, cfg: SyntheticConfig, rng: np.random.Generator) -> Sample:
    k = len(cfg.findings)
    n = cfg.image_size
    labels = np.zeros(k, dtype=np.uint8)
    if rng.random() >= cfg.empty_rate:
        primary = rng.integers(k)
        labels[primary] = 1
        for j in range(k):
            if j != primary and rng.random() < cfg.cooccurrence:
                labels[j] = 1

    # smooth background: base level plus a random linear ramp
    px, py = _pixel_centers(n, n)
    gx, gy = rng.uniform(-0.15, 0.15, size=2)
    image = 0.3 + gx * (px / n - 0.5) + gy * (py / n - 0.5)
    # unlabelled soft-edged structures, so brightness alone does not localise lesions
    for _ in range(rng.integers(cfg.distractors + 1)):
        cx, cy = rng.uniform(0, n, size=2)
        sx, sy = rng.uniform(2.0, n / 6, size=2)
        theta = rng.uniform(0, np.pi)
        u = (px - cx) * np.cos(theta) + (py - cy) * np.sin(theta)
        v = -(px - cx) * np.sin(theta) + (py - cy) * np.cos(theta)
        image = image + rng.uniform(*cfg.distractor_intensity) * np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    masks = {}
    for j, spec in enumerate(cfg.findings):
        if labels[j]:
            mask = _lesion_mask(spec, rng, n)
            masks[spec.name] = mask
            image = image + mask * rng.uniform(*spec.intensity_range)
    image = image + rng.normal(0.0, cfg.noise, size=(n, n))
    # quantise to 8 bits so PNG storage round-trips exactly
    image = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).astype(np.float32) / 255.0
    return Sample(sample_id, image, labels, masks)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, Dataset, Dataset]:
    catalog = cfg.catalog
    rng = np.random.default_rng(cfg.seed)
    out = []
    for split, count in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
        samples = [_make_sample(f"{split}_{i:05d}", cfg, rng) for i in range(count)]
        out.append(Dataset(samples, catalog, split))
    return tuple(out)


# -- decomposition -------------------------------------------------------

def decompose(ds: Dataset, negative_ratio: float = 1.0, seed: int = 0) -> list[SingleLabelView]:
    """One view per finding: every positive, plus sampled negatives."""
    if negative_ratio < 0:
        raise ValueError(f"negative_ratio must be >= 0, got {negative_ratio}")
    labels = ds.label_matrix()
    ids = np.array(ds.ids, dtype=object)
    rng = np.random.default_rng(seed)
    views = []
    for k, name in enumerate(ds.catalog):
        col = labels[:, k] if len(labels) else np.zeros(0, dtype=np.uint8)
        pos = ids[col == 1]
        neg_pool = ids[col == 0]
        if len(pos) == 0:
            warnings.warn(f"finding {name!r} has no positive samples in {ds.split}; view is empty", stacklevel=2)
            views.append(SingleLabelView(name, (), ()))
            continue
        n_neg = min(int(round(negative_ratio * len(pos))), len(neg_pool))
        chosen = rng.choice(len(neg_pool), size=n_neg, replace=False) if n_neg else np.zeros(0, dtype=int)
        negatives = tuple(neg_pool[np.sort(chosen)])
        views.append(SingleLabelView(name, tuple(pos), negatives))
    return views


# -- annotation ingestion ------------------------------------------------

def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr / 255.0


def load_annotations(path, catalog: FindingCatalog, image_dir=None, split: str = "test") -> Dataset:
    """Read a ChestX-Det-style annotation file.

    The file is a JSON list with one record per image::

        {"file_name": "36199.png",
         "syms": ["Effusion", "Mass"],
         "boxes": [[x0, y0, x1, y1], ...],
         "polygons": [[[x, y], [x, y], ...], ...]}

    ``syms[i]`` is localised by ``polygons[i]`` when present, otherwise by
    ``boxes[i]``.  Images are read from ``image_dir`` (default: an
    ``images/`` folder next to the file, or the file's own folder).
    """
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(records, list):
        raise AnnotationError(f"{path}: expected a list of records")
    if image_dir is None:
        image_dir = path.parent / "images" if (path.parent / "images").is_dir() else path.parent
    image_dir = Path(image_dir)

    unknown = set()
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or not isinstance(rec.get("file_name"), str):
            raise AnnotationError(f"record {i}: missing or invalid 'file_name'")
        syms = rec.get("syms", [])
        if not isinstance(syms, list) or not all(isinstance(s, str) for s in syms):
            raise AnnotationError(f"record {i}: 'syms' must be a list of names")
        unknown.update(s for s in syms if s not in catalog)
    if unknown:
        raise AnnotationError(f"findings not in catalog: {sorted(unknown)}")

    samples = []
    seen = set()
    for i, rec in enumerate(records):
        name = rec["file_name"]
        if name in seen:
            raise AnnotationError(f"record {i}: duplicate file_name {name!r} in {split} split")
        seen.add(name)
        syms = rec.get("syms", [])
        boxes = rec.get("boxes", []) or []
        polys = rec.get("polygons", []) or []
        if not isinstance(boxes, list) or not isinstance(polys, list):
            raise AnnotationError(f"record {i}: 'boxes' and 'polygons' must be lists")
        if len(boxes) > len(syms) or len(polys) > len(syms):
            raise AnnotationError(f"record {i}: more shapes than entries in 'syms'")
        img_path = image_dir / name
        if not img_path.exists():
            raise AnnotationError(f"record {i}: image {img_path} not found")
        image = _read_image(img_path)
        h, w = image.shape
        labels = np.zeros(len(catalog), dtype=np.uint8)
        masks: dict[str, np.ndarray] = {}
        for j, sym in enumerate(syms):
            try:
                if j < len(polys) and polys[j]:
                    verts = polys[j]
                    if len(verts) < 3:
                        raise AnnotationError(f"record {i}: polygon {j} has {len(verts)} vertices (need >= 3)")
                    m = polygon_to_mask(verts, h, w)
                    if not m.any():
                        # sub-pixel polygon: keep the label, mark the pixel under its centroid
                        cx, cy = np.asarray(verts, dtype=np.float64).mean(axis=0)
                        m[min(int(cy), h - 1), min(int(cx), w - 1)] = True
                elif j < len(boxes) and boxes[j]:
                    box = boxes[j]
                    if len(box) != 4:
                        raise AnnotationError(f"record {i}: box {j} must have 4 numbers")
                    m = bbox_to_mask(*box, h, w)
                else:
                    raise AnnotationError(f"record {i}: finding {sym!r} has neither polygon nor box")
            except AnnotationError:
                raise
            except (ValueError, TypeError) as exc:
                raise AnnotationError(f"record {i}: {exc}") from exc
            labels[catalog.index(sym)] = 1
            masks[sym] = masks[sym] | m if sym in masks else m
        sample = Sample(Path(name).stem, image, labels, masks)
        sample.check(catalog)
        samples.append(sample)
    return Dataset(samples, catalog, split)


# -- on-disk dataset layout ----------------------------------------------

def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def dataset_hash(splits: Sequence[Dataset]) -> str:
    h = hashlib.sha256()
    for ds in splits:
        h.update(ds.split.encode())
        h.update(repr(list(ds.catalog)).encode())
        for s in ds.samples:
            h.update(s.id.encode())
            h.update(np.round(s.image * 255).astype(np.uint8).tobytes())
            h.update(s.labels.astype(np.uint8).tobytes())
            for name in ds.catalog:
                if name in s.masks:
                    h.update(name.encode())
                    h.update(np.packbits(s.masks[name]).tobytes())
    return h.hexdigest()


def save_dataset(root, splits: Sequence[Dataset], manifest_extra: dict | None = None) -> dict:
    """Write ``images/``, ``masks/<finding>/`` and ``manifest.json`` under ``root``."""
    root = Path(root)
    catalog = splits[0].catalog
    (root / "images").mkdir(parents=True, exist_ok=True)
    dirs = {name: _slug(name) for name in catalog}
    for d in dirs.values():
        (root / "masks" / d).mkdir(parents=True, exist_ok=True)
    listing = {}
    for ds in splits:
        if ds.catalog != catalog:
            raise ValueError("all splits must share one catalog")
        entries = []
        for s in ds.samples:
            Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / "images" / f"{s.id}.png")
            for name, m in s.masks.items():
                Image.fromarray(m.astype(np.uint8) * 255).save(root / "masks" / dirs[name] / f"{s.id}.png")
            entries.append({"id": s.id, "labels": [int(x) for x in s.labels]})
        listing[ds.split] = entries
    manifest = {
        "kind": "dataset",
        "catalog": list(catalog),
        "mask_dirs": dirs,
        "splits": listing,
        "data_hash": dataset_hash(splits),
    }
    manifest.update(manifest_extra or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(root) -> dict[str, Dataset]:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{root}: no manifest.json (not a dataset directory)")
    manifest = json.loads(mpath.read_text())
    catalog = FindingCatalog(manifest["catalog"])
    dirs = manifest["mask_dirs"]
    out = {}
    for split, entries in manifest["splits"].items():
        samples = []
        for e in entries:
            image = _read_image(root / "images" / f"{e['id']}.png")
            labels = np.asarray(e["labels"], dtype=np.uint8)
            masks = {}
            for k, name in enumerate(catalog):
                if labels[k]:
                    with Image.open(root / "masks" / dirs[name] / f"{e['id']}.png") as im:
                        masks[name] = np.asarray(im) > 127
            s = Sample(e["id"], image, labels, masks)
            s.check(catalog)
            samples.append(s)
        out[split] = Dataset(samples, catalog, split)
    return out
