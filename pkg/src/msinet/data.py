"""Dataset geometry, fixation density maps, splitting and a synthetic generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .fixations import FixationError, FixationMap
from .imageio import load_fixations, load_image, save_fixations, save_image, to_rgb
from .tensor import interp_matrix
from .weights import atomic_write_bytes

MANIFEST_COLUMNS = ("path_image", "path_fixations", "category")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    target_size: tuple[int, int]
    split_fraction: float = 0.8
    min_val: int = 200
    sigma: float | None = None  # defaults to width / 32

    def __post_init__(self):
        r, c = self.target_size
        if r % 8 or c % 8:
            raise ValueError(f"{self.name}: target size {r}x{c} not divisible by 8")

    @property
    def blur_sigma(self) -> float:
        return self.sigma if self.sigma is not None else default_sigma(self.target_size)


DATASETS = {
    "salicon": DatasetSpec("salicon", (240, 320)),
    "osie": DatasetSpec("osie", (240, 320)),
    "mit1003": DatasetSpec("mit1003", (360, 360)),
    "dut-omron": DatasetSpec("dut-omron", (360, 360)),
    "pascal-s": DatasetSpec("pascal-s", (360, 360)),
    "cat2000": DatasetSpec("cat2000", (216, 384)),
}


def default_sigma(size: tuple[int, int]) -> float:
    return size[1] / 32.0


@dataclass
class Target:
    kind: str
    row: float
    col: float
    radius: float

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
        dr, dc = np.abs(rr - self.row), np.abs(cc - self.col)
        r = self.radius
        if self.kind == "disc":
            return dr**2 + dc**2 <= r**2
        if self.kind == "square":
            return (dr <= r * 0.85) & (dc <= r * 0.85)
        if self.kind == "diamond":
            return dr + dc <= r * 1.2
        if self.kind == "cross":
            arm = r * 0.35
            return ((dr <= arm) & (dc <= r)) | ((dc <= arm) & (dr <= r))
        raise ValueError(f"unknown target kind {self.kind!r}")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    fixations: FixationMap
    density: np.ndarray  # (H, W), unit sum
    category: str | None = None
    name: str = ""
    targets: list[Target] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.density.shape

    def target_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for t in self.targets:
            m |= t.mask(self.shape)
        return m


# --- geometry ------------------------------------------------------------------


@dataclass(frozen=True)
class ContentRect:
    """Where the resized image content sits inside the padded frame."""

    top: int
    left: int
    height: int
    width: int
    source_shape: tuple[int, int]
    frame_shape: tuple[int, int]

    @property
    def scale(self) -> tuple[float, float]:
        return self.height / self.source_shape[0], self.width / self.source_shape[1]


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of a (C, H, W) array with half-pixel centers."""
    _, h, w = image.shape
    mh = interp_matrix(h, size[0])
    mw = interp_matrix(w, size[1])
    return np.einsum("yh,chw,xw->cyx", mh, image, mw, optimize=True)


def resize_pad(image: np.ndarray, target_size: tuple[int, int]) -> tuple[np.ndarray, ContentRect]:
    """Aspect-preserving resize to fit ``target_size`` then symmetric zero padding."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    _, h, w = image.shape
    if h <= 0 or w <= 0:
        raise ValueError(f"resize_pad: degenerate image {h}x{w}")
    th, tw = target_size
    scale = min(th / h, tw / w)
    ch = min(th, max(1, round(h * scale)))
    cw = min(tw, max(1, round(w * scale)))
    top, left = (th - ch) // 2, (tw - cw) // 2
    out = np.zeros((image.shape[0], th, tw))
    out[:, top:top + ch, left:left + cw] = resize_bilinear(image, (ch, cw))
    return out, ContentRect(top, left, ch, cw, (h, w), (th, tw))


def map_fixations(fixations: FixationMap, rect: ContentRect) -> FixationMap:
    """Carry source-image fixations into the padded prediction frame."""
    sr, sc = rect.scale
    loc = fixations.locations.astype(np.float64)
    rows = np.minimum(np.floor((loc[:, 0] + 0.5) * sr), rect.height - 1) + rect.top
    cols = np.minimum(np.floor((loc[:, 1] + 0.5) * sc), rect.width - 1) + rect.left
    pts = np.stack([rows, cols], axis=1).astype(np.int64)
    return FixationMap.from_points(pts, *rect.frame_shape)


def fixations_to_density(fixations: FixationMap, sigma: float) -> np.ndarray:
    """Blur the binary fixation map with a Gaussian truncated at 4 sigma and normalise."""
    if len(fixations) == 0:
        raise FixationError("cannot build a density map from an empty fixation map")
    blurred = gaussian_filter(fixations.to_mask().astype(np.float64), sigma,
                              mode="constant", truncate=4.0)
    return blurred / blurred.sum()


# --- splitting -----------------------------------------------------------------


def validation_size(n: int, fraction: float = 0.8, min_val: int = 200) -> int:
    return min(max(math.ceil(round((1 - fraction) * n, 9)), min_val), n - 1)


def split_dataset(samples: list, spec: DatasetSpec | None = None, seed: int = 0):
    """Seeded shuffle into disjoint, covering (train, val) lists."""
    n = len(samples)
    if n < 2:
        raise ValueError("split_dataset needs at least two samples")
    fraction = spec.split_fraction if spec else 0.8
    min_val = spec.min_val if spec else 200
    n_val = validation_size(n, fraction, min_val)
    order = np.random.default_rng(seed).permutation(n)
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


# --- synthetic data ------------------------------------------------------------

TARGET_KINDS = ("disc", "square", "diamond", "cross")
_PALETTE = np.array([
    [0.95, 0.10, 0.10], [0.10, 0.90, 0.15], [0.15, 0.25, 0.95],
    [0.98, 0.92, 0.10], [0.98, 0.98, 0.98], [0.95, 0.15, 0.90],
])
FIXATIONS_PER_IMAGE = 30


def _background(rng, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.45, size=(3, max(1, h // 8), max(1, w // 8)))
    fine = rng.normal(0.0, 0.03, size=(3, h, w))
    return resize_bilinear(coarse, (h, w)) + fine


def _place_targets(rng, h: int, w: int, count: int, radius: float) -> list[tuple[float, float]]:
    centers: list[tuple[float, float]] = []
    for _ in range(200):
        if len(centers) == count:
            break
        # centre-biased placement mirrors the central tendency of natural fixations
        r = np.clip(rng.normal((h - 1) / 2, h / 5), radius + 1, h - radius - 2)
        c = np.clip(rng.normal((w - 1) / 2, w / 5), radius + 1, w - radius - 2)
        if all((r - a) ** 2 + (c - b) ** 2 > (2.4 * radius) ** 2 for a, b in centers):
            centers.append((float(r), float(c)))
    return centers


def synthetic_sample(rng, size: tuple[int, int], index: int, sigma: float | None = None) -> Sample:
    h, w = size
    kind = TARGET_KINDS[int(rng.integers(len(TARGET_KINDS)))]
    radius = float(rng.uniform(0.09, 0.12) * min(h, w))
    count = int(rng.integers(1, 4))
    image = _background(rng, h, w)
    targets = []
    for r, c in _place_targets(rng, h, w, count, radius):
        t = Target(kind, r, c, radius)
        color = _PALETTE[int(rng.integers(len(_PALETTE)))]
        image[:, t.mask((h, w))] = color[:, None]
        targets.append(t)
    image = np.round(np.clip(image, 0.0, 1.0) * 255) / 255

    which = rng.integers(len(targets), size=FIXATIONS_PER_IMAGE)
    centers = np.array([(t.row, t.col) for t in targets])[which]
    pts = centers + rng.normal(0.0, radius / 2.5, size=centers.shape)
    pts = np.round(pts).astype(np.int64)
    pts[:, 0] = np.clip(pts[:, 0], 0, h - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, w - 1)
    fixations = FixationMap.from_points(pts, h, w)
    density = fixations_to_density(fixations, sigma if sigma is not None else default_sigma(size))
    return Sample(image, fixations, density, kind, f"synth_{index:05d}", targets)


def generate_synthetic(count: int, size: tuple[int, int], seed: int = 0,
                       sigma: float | None = None) -> list[Sample]:
    """Images with 1-3 high-contrast shapes on texture; gaze clusters on the shapes."""
    if size[0] % 8 or size[1] % 8:
        raise ValueError(f"synthetic size {size} must be divisible by 8")
    rng = np.random.default_rng(seed)
    return [synthetic_sample(rng, size, i, sigma) for i in range(count)]


# --- manifests -----------------------------------------------------------------


def write_dataset(samples: list[Sample], directory) -> Path:
    """Write PNG images, fixation text files and ``manifest.csv``; return the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "fixations").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        img_rel = f"images/{s.name}.png"
        fix_rel = f"fixations/{s.name}.txt"
        save_image(directory / img_rel, s.image)
        save_fixations(directory / fix_rel, s.fixations)
        rows.append((img_rel, fix_rel, s.category or ""))
    manifest = directory / "manifest.csv"
    lines = [",".join(MANIFEST_COLUMNS)] + [",".join(r) for r in rows]
    atomic_write_bytes(manifest, ("\n".join(lines) + "\n").encode("utf-8"))
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS[:2] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {missing}")
        rows = []
        for row in reader:
            rows.append({
                "path_image": path.parent / row["path_image"],
                "path_fixations": path.parent / row["path_fixations"],
                "category": row.get("category") or None,
            })
    return rows


def load_sample(image_path, fixation_path, target_size: tuple[int, int] | None = None,
                sigma: float | None = None, category: str | None = None) -> Sample:
    image = to_rgb(load_image(image_path))
    fixations = load_fixations(fixation_path, image.shape[1:])
    if target_size is not None and tuple(image.shape[1:]) != tuple(target_size):
        image, rect = resize_pad(image, target_size)
        fixations = map_fixations(fixations, rect)
    size = image.shape[1:]
    density = fixations_to_density(fixations, sigma if sigma is not None else default_sigma(size))
    return Sample(image, fixations, density, category, Path(image_path).stem)


def load_dataset(manifest, target_size: tuple[int, int] | None = None,
                 sigma: float | None = None) -> list[Sample]:
    return [load_sample(r["path_image"], r["path_fixations"], target_size, sigma, r["category"])
            for r in read_manifest(manifest)]
