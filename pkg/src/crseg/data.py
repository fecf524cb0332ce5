"""Sample types, synthetic crack/road generator, dataset I/O and label split."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import ConfigError, FormatError


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # H x W x C float in [0, 1]
    mask: np.ndarray | None = None  # H x W uint8 in {0, 1}
    labeled: bool = False

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.labeled != (self.mask is not None):
            raise ValueError(f"sample {self.id}: labeled flag must match mask presence")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ValueError(f"sample {self.id}: mask shape {self.mask.shape} != image {self.image.shape[:2]}")


@dataclass(frozen=True)
class DatasetSplit:
    labeled_ids: tuple
    unlabeled_ids: tuple
    label_fraction: float
    seed: int


@dataclass
class SynthConfig:
    image_size: int = 128
    foreground_fraction_target: float = 0.02
    task: str = "crack"
    n_images: int = 100
    noise_level: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if not 0.0 < self.foreground_fraction_target < 0.5:
            raise ConfigError("foreground_fraction_target must lie in (0, 0.5)")
        if self.task not in ("crack", "road"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_images < 0:
            raise ConfigError("n_images must be >= 0")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")


def make_split(ids, label_fraction: float, seed: int) -> DatasetSplit:
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if not 0.0 < label_fraction <= 1.0:
        raise ValueError(f"label_fraction must be in (0, 1], got {label_fraction}")
    n_lab = max(1, int(round(label_fraction * len(ids))))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(ids), size=n_lab, replace=False).tolist())
    labeled = tuple(i for k, i in enumerate(ids) if k in chosen)
    unlabeled = tuple(i for k, i in enumerate(ids) if k not in chosen)
    return DatasetSplit(labeled, unlabeled, float(label_fraction), int(seed))


# --- synthetic generator -------------------------------------------------

def _background(rng, size, noise_level):
    """Smooth low-frequency shading plus fine grain, roughly concrete-like."""
    coarse = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8)
    coarse /= np.abs(coarse).max() + 1e-12
    grain = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=0.8)
    img = 0.6 + 0.12 * coarse + 0.06 * grain
    return img


def _bezier(p0, p1, p2, p3, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return ((1 - t) ** 3) * p0 + 3 * ((1 - t) ** 2) * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


def _crack_path(rng, size):
    """A wandering cubic Bezier with a small random-walk jitter added."""
    pts = rng.uniform(-0.1 * size, 1.1 * size, size=(4, 2))
    curve = _bezier(*pts, n=4 * size)
    jitter = np.cumsum(rng.normal(0, 0.35, size=curve.shape), axis=0)
    jitter -= np.linspace(0, 1, len(curve))[:, None] * jitter[-1]
    return curve + jitter


def _draw_polyline(size, pts, width):
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).line([tuple(p) for p in pts], fill=255, width=int(width), joint="curve")
    return np.asarray(canvas) > 0


def _synth_crack(rng, cfg):
    size = cfg.image_size
    img = _background(rng, size, cfg.noise_level)
    mask = np.zeros((size, size), bool)
    target = cfg.foreground_fraction_target * size * size
    for _ in range(5):
        width = int(rng.integers(1, 5))
        stroke = _draw_polyline(size, _crack_path(rng, size), width)
        mask |= stroke
        if mask.sum() >= 0.5 * target:
            break
    # non-crack distractors: faint dark blots and scratches of lower contrast
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(2, size / 10)
        yy, xx = np.mgrid[:size, :size]
        img -= 0.12 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    if rng.random() < 0.5:
        img -= 0.08 * _draw_polyline(size, _crack_path(rng, size), 1)
    depth = rng.uniform(0.25, 0.4)
    crack = ndimage.gaussian_filter(mask.astype(float), 0.5)
    img = img - depth * np.clip(crack * 1.6, 0, 1)
    img += rng.normal(0, cfg.noise_level, size=img.shape)
    return np.clip(img, 0, 1), mask


def road_aux_masks(surface: np.ndarray, centerline_pts=None, size=None):
    """Edge and centerline masks derived from a road surface mask.

    Edge pixels are surface pixels with a 4-neighbour outside the surface.
    The centerline is the rasterised medial polyline when given, otherwise
    the morphological skeleton; either way it is clipped to the surface.
    """
    surface = surface.astype(bool)
    interior = ndimage.binary_erosion(surface, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)
    edge = surface & ~interior
    if centerline_pts is not None:
        center = _draw_polyline(size or surface.shape[0], centerline_pts, 1)
    else:
        from skimage.morphology import skeletonize
        center = skeletonize(surface)
    center &= surface
    return edge.astype(np.uint8), center.astype(np.uint8)


def _road_path(rng, size):
    p0 = np.array([rng.uniform(0, size), -0.2 * size])
    p3 = np.array([rng.uniform(0, size), 1.2 * size])
    if rng.random() < 0.5:
        p0, p3 = p0[::-1], p3[::-1]
    p1, p2 = rng.uniform(0.1 * size, 0.9 * size, size=(2, 2))
    return _bezier(p0, p1, p2, p3, n=4 * size)


def _synth_road(rng, cfg):
    size = cfg.image_size
    img = _background(rng, size, cfg.noise_level) * 0.8 + 0.1
    path = _road_path(rng, size)
    # visible length is roughly 1.1 x size for these paths
    width = max(2, int(round(cfg.foreground_fraction_target * size / 1.1 * rng.uniform(0.8, 1.2))))
    surface = _draw_polyline(size, path, width)
    img = np.where(surface, 0.35 + 0.05 * rng.standard_normal((size, size)) * cfg.noise_level * 10, img)
    img += rng.normal(0, cfg.noise_level, size=img.shape)
    edge, center = road_aux_masks(surface, path, size)
    return np.clip(img, 0, 1), surface, edge, center


def generate_synthetic_dataset(cfg: SynthConfig, with_aux: bool = False):
    """Labeled synthetic samples; deterministic given ``cfg.seed``.

    For the road task with ``with_aux=True`` a second list of
    ``(edge, centerline)`` mask pairs is returned alongside the samples.
    """
    cfg.validate()
    samples, aux = [], []
    root = np.random.SeedSequence(cfg.seed)
    for k, child in enumerate(root.spawn(cfg.n_images)):
        rng = np.random.default_rng(child)
        if cfg.task == "crack":
            img, mask = _synth_crack(rng, cfg)
        else:
            img, mask, edge, center = _synth_road(rng, cfg)
            aux.append((edge, center))
        samples.append(ImageSample(f"{cfg.task}_{k:05d}", img[:, :, None].astype(np.float32),
                                   mask.astype(np.uint8), True))
    if with_aux:
        return samples, aux
    return samples


# --- on-disk layout ------------------------------------------------------

def save_dataset(samples, root) -> None:
    """Write ``images/<id>.png``, ``masks/<id>.png`` and ``manifest.tsv``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.tsv", "w", newline="") as fh:
        fh.write("id\tlabeled\n")
        for s in samples:
            arr = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
            arr = arr[:, :, 0] if arr.shape[2] == 1 else arr
            Image.fromarray(arr).save(root / "images" / f"{s.id}.png")
            if s.mask is not None:
                Image.fromarray((s.mask > 0).astype(np.uint8) * 255).save(root / "masks" / f"{s.id}.png")
            fh.write(f"{s.id}\t{int(s.labeled)}\n")


def _read_manifest(root: Path):
    path = root / "manifest.tsv"
    if not path.exists():
        # no manifest: every image, labeled iff a mask file exists
        return [(p.stem, None) for p in sorted((root / "images").glob("*.png"))]
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            try:
                rows.append((row["id"], bool(int(row["labeled"]))))
            except (KeyError, ValueError) as exc:
                raise FormatError(f"bad manifest row {row}") from exc
    return rows


def load_dataset(root):
    root = Path(root)
    if not (root / "images").is_dir():
        raise FormatError(f"{root} has no images/ directory")
    samples = []
    for sid, labeled in _read_manifest(root):
        img_path = root / "images" / f"{sid}.png"
        if not img_path.exists():
            raise FormatError(f"missing image for id {sid}")
        img = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
        if img.ndim == 2:
            img = img[:, :, None]
        mask_path = root / "masks" / f"{sid}.png"
        mask = None
        if mask_path.exists() and labeled is not False:
            mask = (np.asarray(Image.open(mask_path).convert("L")) > 127).astype(np.uint8)
            if mask.shape != img.shape[:2]:
                raise FormatError(f"mask {mask.shape} and image {img.shape[:2]} differ for id {sid}")
        elif labeled:
            raise FormatError(f"id {sid} is listed as labeled but has no mask")
        samples.append(ImageSample(sid, img, mask, mask is not None))
    return samples
