"""Synthetic multi-modality lesion data, the on-disk dataset format, and
single-modality batch sampling.

The same prompt word maps to different appearances per modality:

==========  ===================  ===================
category    CFP-like (even idx)  OCT-like (odd idx)
==========  ===================  ===================
lesion      bright ellipse       dark band
scar        dark band            bright ellipse
==========  ===================  ===================

Each image also carries distractor shapes that must not be segmented.  In
the default layout CFP-like images sit on a dark background and OCT-like
images on a bright, horizontally layered one.  With ``ambiguous=True`` both
modalities share one mid-gray background, every image contains the other
modality's appearance for the prompted category as a distractor, plus the
target's polarity twin (same outline, opposite contrast).  Outline alone then
never identifies the target; intensity polarity and the modality label do.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .boxes import BoundingBox
from .config import SynthConfig, stream
from .modality import ModalityRegistry

MANIFEST_SCHEMA_VERSION = 1

KINDS = ("bright_ellipse", "dark_band", "dark_ellipse", "bright_band")
_APPEARANCE = {
    "lesion": ("bright_ellipse", "dark_band"),
    "scar": ("dark_band", "bright_ellipse"),
}
_TWIN = {"bright_ellipse": "dark_ellipse", "dark_ellipse": "bright_ellipse",
         "dark_band": "bright_band", "bright_band": "dark_band"}


def target_kind(category: str, modality_index: int) -> str:
    try:
        return _APPEARANCE[category][modality_index % 2]
    except KeyError:
        raise ValueError(f"unknown lesion category {category!r}; known {sorted(_APPEARANCE)}") from None


@dataclass(eq=False)
class Sample:
    image: np.ndarray  # (H, W) uint8
    modality: str
    prompt: str
    gt_boxes: list[BoundingBox] = field(default_factory=list)
    gt_masks: list[np.ndarray] = field(default_factory=list)  # (H, W) bool, one per box
    category: str = "lesion"
    split: str = "train"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.modality == other.modality and self.prompt == other.prompt
                and self.category == other.category and self.split == other.split
                and self.gt_boxes == other.gt_boxes
                and len(self.gt_masks) == len(other.gt_masks)
                and np.array_equal(self.image, other.image)
                and all(np.array_equal(a, b) for a, b in zip(self.gt_masks, other.gt_masks)))

    @property
    def merged_mask(self) -> np.ndarray:
        out = np.zeros(self.image.shape[:2], dtype=bool)
        for m in self.gt_masks:
            out |= m.astype(bool)
        return out


@dataclass(eq=False)
class Dataset:
    samples: list[Sample]
    registry: ModalityRegistry

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.registry == other.registry and self.samples == other.samples

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def frequencies(self, split: str = "train") -> dict[str, int]:
        """Per-modality sample counts on one split; absent modalities are omitted."""
        counts = Counter(s.modality for s in self.samples if s.split == split)
        return {m: counts[m] for m in self.registry if counts[m]}


def tight_box(mask: np.ndarray) -> BoundingBox:
    """Inclusive-min, exclusive-max integer box around the true pixels."""
    ys, xs = np.nonzero(mask)
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_BG_LEVEL = {0: 70.0, 1: 180.0}
_AMBIGUOUS_BG = 128.0
_BRIGHT, _DARK = 232.0, 22.0


class _PlacementError(RuntimeError):
    pass


def _background(rng: np.random.Generator, size: int, modality_index: int, ambiguous: bool) -> np.ndarray:
    texture = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=size / 20.0)
    texture *= 10.0 / (texture.std() + 1e-9)
    yy = np.arange(size)[:, None] * np.ones((1, size))
    if ambiguous:
        layers = 6.0 * np.sin(2 * np.pi * yy / (size / 5.0) + rng.uniform(0, 2 * np.pi))
        base = _AMBIGUOUS_BG
    elif modality_index % 2:
        # OCT-like: horizontal retinal layers
        layers = 10.0 * np.sin(2 * np.pi * yy / (size / 5.0) + rng.uniform(0, 2 * np.pi))
        base = _BG_LEVEL[1]
    else:
        # CFP-like: radial vignette
        xx = yy.T
        r2 = ((xx - size / 2) ** 2 + (yy - size / 2) ** 2) / (size / 2) ** 2
        layers = -12.0 * r2
        base = _BG_LEVEL[0]
    return base + texture + layers


def _shape_mask(kind: str, size: int, rng: np.random.Generator, occupied: np.ndarray,
                retries: int = 60) -> np.ndarray:
    s = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(retries):
        if kind.endswith("ellipse"):
            ax = rng.uniform(4.5, 8.0) * s
            ay = ax * rng.uniform(0.75, 1.25)
            power = 2.0
        else:
            ax = rng.uniform(10.0, 15.0) * s
            ay = rng.uniform(2.2, 3.4) * s
            power = 4.0
        margin = 2.0 * s
        cx = rng.uniform(ax + margin, size - ax - margin)
        cy = rng.uniform(ay + margin, size - ay - margin)
        m = (np.abs((xx - cx) / ax) ** power + np.abs((yy - cy) / ay) ** power) <= 1.0
        if not m.any():
            continue
        b = tight_box(m)
        pad = int(np.ceil(2 * s))
        y0, y1 = max(int(b.y_min) - pad, 0), min(int(b.y_max) + pad, size)
        x0, x1 = max(int(b.x_min) - pad, 0), min(int(b.x_max) + pad, size)
        if occupied[y0:y1, x0:x1].any():
            continue
        occupied[y0:y1, x0:x1] = True
        return m
    raise _PlacementError(kind)


def _render_sample(rng: np.random.Generator, cfg: SynthConfig, modality: str, modality_index: int,
                   category: str, negative: bool):
    size = cfg.image_size
    img = _background(rng, size, modality_index, cfg.ambiguous)
    tkind = target_kind(category, modality_index)
    counterpart = target_kind(category, modality_index + 1)
    occupied = np.zeros((size, size), dtype=bool)
    n_targets = 0 if negative else int(rng.integers(cfg.lesions_per_image[0], cfg.lesions_per_image[1] + 1))
    n_distract = int(rng.integers(cfg.distractors_per_image[0], cfg.distractors_per_image[1] + 1))
    pool = [k for k in (KINDS if cfg.ambiguous else KINDS[:2]) if k != tkind]
    kinds = [counterpart] + [pool[int(rng.integers(len(pool)))] for _ in range(n_distract - 1)]
    if cfg.ambiguous:
        kinds.insert(1, _TWIN[tkind])
    masks = []
    shapes = [(tkind, True)] * n_targets + [(k, False) for k in kinds]
    for kind, is_target in shapes:
        m = _shape_mask(kind, size, rng, occupied)
        level = _BRIGHT if kind.startswith("bright") else _DARK
        img[m] = level + rng.normal(0.0, 6.0, int(m.sum()))
        if is_target:
            masks.append(m)
    img = img + rng.normal(0.0, 3.0, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    boxes = [tight_box(m) for m in masks]
    return image, boxes, masks


def generate(cfg: SynthConfig, seed: int, registry: ModalityRegistry | None = None) -> Dataset:
    """Render a deterministic dataset from ``cfg`` and ``seed``."""
    registry = registry or ModalityRegistry(cfg.counts.keys())
    for m in cfg.counts:
        registry.index(m)
    samples = []
    sample_id = 0
    for modality, count in cfg.counts.items():
        mi = registry.index(modality)
        n_train = int(round(cfg.train_fraction * count))
        n_val = int(round(cfg.val_fraction * count))
        for k in range(count):
            split = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
            attempt = 0
            while True:
                rng = stream(seed, "dataset", sample_id, attempt)
                category = cfg.categories[int(rng.integers(len(cfg.categories)))]
                negative = bool(rng.random() < cfg.negative_fraction)
                try:
                    image, boxes, masks = _render_sample(rng, cfg, modality, mi, category, negative)
                    break
                except _PlacementError:
                    attempt += 1
                    if attempt > 100:
                        raise RuntimeError(f"could not place shapes for sample {sample_id}") from None
            samples.append(Sample(image=image, modality=modality, prompt=category, gt_boxes=boxes,
                                  gt_masks=masks, category=category, split=split))
            sample_id += 1
    return Dataset(samples=samples, registry=registry)


# ---------------------------------------------------------------------------
# PGM and manifest I/O
# ---------------------------------------------------------------------------

def write_pgm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


class ManifestError(ValueError):
    pass


def save(ds: Dataset, directory: str | Path) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(ds.samples):
        image_rel = f"images/{i:04d}.pgm"
        write_pgm(root / image_rel, s.image)
        mask_rels = []
        for k, m in enumerate(s.gt_masks):
            rel = f"masks/{i:04d}_{k}.pgm"
            write_pgm(root / rel, np.where(m, 255, 0).astype(np.uint8))
            mask_rels.append(rel)
        records.append({
            "image": image_rel,
            "masks": mask_rels,
            "boxes": [[int(b.x_min), int(b.y_min), int(b.x_max), int(b.y_max)] for b in s.gt_boxes],
            "prompt": s.prompt,
            "modality": s.modality,
            "category": s.category,
            "split": s.split,
        })
    manifest = {"schema_version": MANIFEST_SCHEMA_VERSION, "modalities": list(ds.registry.names),
                "samples": records}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load(directory: str | Path) -> Dataset:
    root = Path(directory)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise ManifestError(f"{mpath}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: malformed JSON ({exc})") from None
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(f"{mpath}: unsupported schema_version {manifest.get('schema_version')!r}")
    try:
        registry = ModalityRegistry(manifest["modalities"])
        records = manifest["samples"]
    except (KeyError, ValueError, TypeError) as exc:
        raise ManifestError(f"{mpath}: bad header ({exc})") from None
    samples = []
    for i, rec in enumerate(records):
        where = f"{mpath} record {i}"
        try:
            modality = rec["modality"]
            if modality not in registry:
                raise ManifestError(f"{where}: unregistered modality {modality!r}")
            if len(rec["boxes"]) != len(rec["masks"]):
                raise ManifestError(f"{where}: {len(rec['boxes'])} boxes but {len(rec['masks'])} masks")
            image = read_pgm(root / rec["image"])
            masks = [read_pgm(root / p) > 127 for p in rec["masks"]]
            boxes = [BoundingBox(*map(int, b)) for b in rec["boxes"]]
            samples.append(Sample(image=image, modality=modality, prompt=rec["prompt"],
                                  gt_boxes=boxes, gt_masks=masks, category=rec["category"],
                                  split=rec["split"]))
        except ManifestError:
            raise
        except FileNotFoundError as exc:
            raise ManifestError(f"{where}: missing file {exc.filename}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: {exc}") from None
    return Dataset(samples=samples, registry=registry)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def epoch_batches(ds: Dataset, batch_size: int, seed: int, epoch: int,
                  split: str = "train") -> list[list[Sample]]:
    """One epoch of single-modality batches covering the split exactly once."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = stream(seed, "sampler", epoch)
    batches = []
    for m in ds.registry:
        members = [s for s in ds.samples if s.split == split and s.modality == m]
        order = rng.permutation(len(members))
        for start in range(0, len(order), batch_size):
            batches.append([members[j] for j in order[start:start + batch_size]])
    perm = rng.permutation(len(batches))
    return [batches[j] for j in perm]


def batch_sampler(ds: Dataset, batch_size: int, seed: int, split: str = "train"
                  ) -> Iterator[list[Sample]]:
    """Endless stream of single-modality batches, reshuffled every epoch."""
    epoch = 0
    while True:
        batches = epoch_batches(ds, batch_size, seed, epoch, split)
        if not batches:
            return
        yield from batches
        epoch += 1


def frequencies(ds: Dataset, split: str = "train") -> dict[str, int]:
    return ds.frequencies(split)


def lesion_intensity_means(samples: Sequence[Sample]) -> dict[str, float]:
    """Mean gray level inside target masks, per modality."""
    acc: dict[str, list[float]] = {}
    for s in samples:
        for m in s.gt_masks:
            acc.setdefault(s.modality, []).append(float(s.image[m].mean()))
    return {k: float(np.mean(v)) for k, v in acc.items()}
