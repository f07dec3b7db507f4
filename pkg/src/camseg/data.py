"""ROI preparation: chain-code masks, padded crops, 8-bit conversion,
the synthetic blob dataset, and the filtered-ROI constructions."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import load_gray, resize_bilinear, resize_nearest, round_half_up, save_png
from .repro import derive_rng, derive_seed

NORMAL, ABNORMAL = 0, 1


@dataclass
class RoiSample:
    image: np.ndarray  # (H, W) uint8
    label: int
    mask: np.ndarray | None = None  # (H, W) bool
    id: str = ""
    provenance: str = "real"

    def __post_init__(self):
        if self.label not in (NORMAL, ABNORMAL):
            raise ValueError(f"{self.id}: label must be 0 or 1, got {self.label}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != np.shape(self.image):
                raise ValueError(f"{self.id}: mask shape {self.mask.shape} != image shape {np.shape(self.image)}")
        if self.label == ABNORMAL and self.provenance == "real" and (self.mask is None or not self.mask.any()):
            raise ValueError(f"{self.id}: abnormal sample needs a non-empty mask")


# -- chain codes -------------------------------------------------------------------

# Freeman 8-direction steps as (drow, dcol); rows grow downward.
FREEMAN = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


class ChainCodeError(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryChain:
    start: tuple[int, int]
    codes: tuple[int, ...]

    def vertices(self) -> np.ndarray:
        steps = np.array([FREEMAN[c] for c in self.codes], dtype=int).reshape(-1, 2)
        return np.vstack([self.start, np.asarray(self.start) + np.cumsum(steps, axis=0)])


def parse_chain_codes(text: str) -> list[BoundaryChain]:
    """Parse lines of the form ``row col: c1 c2 c3 ...``."""
    chains = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        head, sep, tail = line.partition(":")
        try:
            if not sep:
                raise ValueError("missing ':'")
            row, col = (int(v) for v in head.split())
            codes = tuple(int(v) for v in tail.split())
        except ValueError as e:
            raise ChainCodeError(f"line {lineno}: cannot parse {line!r} ({e})") from None
        if any(not 0 <= c <= 7 for c in codes):
            raise ChainCodeError(f"line {lineno}: codes must be in 0..7")
        chains.append(BoundaryChain((row, col), codes))
    return chains


def format_chain_codes(chains: Iterable[BoundaryChain]) -> str:
    return "".join(f"{c.start[0]} {c.start[1]}: {' '.join(map(str, c.codes))}\n" for c in chains)


def chain_from_points(points: Sequence[tuple[int, int]]) -> BoundaryChain:
    """Encode a closed polygon of integer (row, col) vertices as an 8-connected chain."""
    pts = [tuple(int(v) for v in p) for p in points]
    codes = []
    cur = pts[0]
    for target in pts[1:] + pts[:1]:
        while cur != target:
            dr = int(np.sign(target[0] - cur[0]))
            dc = int(np.sign(target[1] - cur[1]))
            codes.append(FREEMAN.index((dr, dc)))
            cur = (cur[0] + dr, cur[1] + dc)
    return BoundaryChain(pts[0], tuple(codes))


def decode_chain_code(chain: BoundaryChain, shape: tuple[int, int]) -> np.ndarray:
    """Rasterize a closed chain and fill its interior (even-odd, boundary inclusive)."""
    h, w = shape
    verts = chain.vertices()
    if not np.array_equal(verts[0], verts[-1]):
        raise ChainCodeError(f"chain starting at {chain.start} is not closed (ends at {tuple(verts[-1])})")
    if verts.min() < 0 or np.any(verts[:, 0] >= h) or np.any(verts[:, 1] >= w):
        raise ChainCodeError(f"chain starting at {chain.start} leaves the {h}x{w} canvas")
    mask = np.zeros(shape, dtype=bool)
    mask[verts[:, 0], verts[:, 1]] = True
    r0, c0 = verts[:-1, 0].astype(float), verts[:-1, 1].astype(float)
    r1, c1 = verts[1:, 0].astype(float), verts[1:, 1].astype(float)
    for row in range(int(verts[:, 0].min()), int(verts[:, 0].max()) + 1):
        # half-open rule so a vertex on the scanline is counted once
        hit = ((r0 <= row) & (row < r1)) | ((r1 <= row) & (row < r0))
        if not hit.any():
            continue
        xs = np.sort(c0[hit] + (row - r0[hit]) * (c1[hit] - c0[hit]) / (r1[hit] - r0[hit]))
        for a, b in zip(xs[0::2], xs[1::2]):
            lo, hi = math.ceil(a), math.floor(b)
            if lo <= hi:
                mask[row, lo:hi + 1] = True
    return mask


# -- ROI cropping ------------------------------------------------------------------

@dataclass(frozen=True)
class CropRect:
    """Half-open pixel rectangle ``[top, bottom) x [left, right)``."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom), slice(self.left, self.right)

    def contains(self, other: "CropRect") -> bool:
        return (self.top <= other.top and self.left <= other.left
                and self.bottom >= other.bottom and self.right >= other.right)

    def overlaps(self, other: "CropRect") -> bool:
        return (self.top < other.bottom and other.top < self.bottom
                and self.left < other.right and other.left < self.right)

    def mirrored(self, width: int) -> "CropRect":
        """The same rectangle reflected left-right inside an image ``width`` pixels wide."""
        return CropRect(self.top, width - self.right, self.bottom, width - self.left)


PAD_RANGE = (0.10, 0.30)


def bounding_box(mask: np.ndarray) -> CropRect:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    return CropRect(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def padded_rect(bbox: CropRect, image_shape: tuple[int, int], rng) -> CropRect:
    """Grow ``bbox`` on each side by an independent 10-30% of the tumour extent, clamped to the image."""
    top, bottom, left, right = rng.uniform(*PAD_RANGE, size=4)
    pad = lambda frac, d: int(round_half_up(frac * d))  # noqa: E731
    h, w = image_shape
    return CropRect(
        max(0, bbox.top - pad(top, bbox.height)),
        max(0, bbox.left - pad(left, bbox.width)),
        min(h, bbox.bottom + pad(bottom, bbox.height)),
        min(w, bbox.right + pad(right, bbox.width)),
    )


def crop_abnormal_roi(image: np.ndarray, mask: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray, CropRect]:
    """Crop the padded tumour bounding box from ``image`` and ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != image shape {image.shape[:2]}")
    if not mask.any():
        raise ValueError("cannot crop an abnormal ROI around an empty mask")
    rect = padded_rect(bounding_box(mask), mask.shape, rng)
    sl = rect.slices()
    return image[sl].copy(), mask[sl].copy(), rect


class SampleSkipped(Exception):
    """A normal ROI could not be taken; ``reason`` says why."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def crop_normal_roi(
    contralateral: np.ndarray,
    rect: CropRect,
    source_width: int | None = None,
    contralateral_abnormal: Iterable[CropRect] = (),
) -> np.ndarray:
    """Crop the mirror location of ``rect`` from the other breast's image.

    ``rect`` is in the coordinates of the abnormal image (``source_width`` wide,
    default the contralateral width). Raises :class:`SampleSkipped` when the
    mirrored rectangle falls outside the image or overlaps an abnormality on
    the contralateral side.
    """
    h, w = contralateral.shape[:2]
    m = rect.mirrored(w if source_width is None else source_width)
    if m.top < 0 or m.left < 0 or m.bottom > h or m.right > w:
        raise SampleSkipped(f"mirrored rect {m} outside {h}x{w} contralateral image")
    for other in contralateral_abnormal:
        if m.overlaps(other):
            raise SampleSkipped(f"mirrored rect {m} overlaps contralateral abnormality {other}")
    return contralateral[m.slices()].copy()


def to_8bit(image: np.ndarray) -> np.ndarray:
    """Per-image min-max rescale to 0..255 with round-half-up; constant input gives zeros."""
    x = np.asarray(image, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros(x.shape, dtype=np.uint8)
    return round_half_up((x - lo) * (255.0 / (hi - lo))).clip(0, 255).astype(np.uint8)


# -- filtered ROIs -----------------------------------------------------------------

def _unit_of(cam) -> np.ndarray:
    return np.asarray(cam.unit if hasattr(cam, "unit") else cam, dtype=np.float64)


def cam_filter(roi: np.ndarray, cam) -> np.ndarray:
    """Pixelwise ``round(roi * cam.unit)`` as 8-bit."""
    unit = _unit_of(cam)
    if unit.shape != roi.shape:
        raise ValueError(f"CAM shape {unit.shape} != ROI shape {roi.shape}")
    return round_half_up(roi.astype(np.float64) * unit).clip(0, 255).astype(np.uint8)


def _check_mask(roi: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != roi.shape:
        raise ValueError(f"mask shape {mask.shape} != ROI shape {roi.shape}")
    return mask


def mask_filter(roi: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(_check_mask(roi, mask), roi, 0).astype(roi.dtype)


def inverse_mask_filter(roi: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(_check_mask(roi, mask), 0, roi).astype(roi.dtype)


def random_mask_assign(normals: Sequence[RoiSample], masks: Sequence[np.ndarray], rng) -> list[RoiSample]:
    """Give each normal ROI a uniformly drawn tumour mask, nearest-resized to its size."""
    if len(masks) == 0:
        raise ValueError("no abnormal masks to borrow from")
    picks = rng.integers(0, len(masks), size=len(normals))
    out = []
    for s, k in zip(normals, picks):
        h, w = s.image.shape
        out.append(dataclasses.replace(s, mask=resize_nearest(np.asarray(masks[k], dtype=bool), h, w)))
    return out


# -- manifests ---------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    image_path: str
    label: int
    mask_path: str | None = None
    split: str | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    root: Path = field(default_factory=Path)
    seed: int | None = None

    @property
    def counts(self) -> dict[int, int]:
        labels = [r.label for r in self.records]
        return {NORMAL: labels.count(NORMAL), ABNORMAL: labels.count(ABNORMAL)}

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.records:
            rec = {k: v for k, v in dataclasses.asdict(r).items() if v is not None}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            records.append(ManifestRecord(
                id=str(d["id"]), image_path=d["image_path"], label=int(d["label"]),
                mask_path=d.get("mask_path"), split=d.get("split"),
            ))
        except (ValueError, KeyError) as e:
            raise ValueError(f"{path}:{lineno}: bad manifest record ({e})") from None
    manifest = DatasetManifest(records, root=path.parent)
    for r in records:
        for rel in (r.image_path, r.mask_path):
            if rel is not None and not manifest.resolve(rel).exists():
                raise FileNotFoundError(f"{path}: {r.id} references missing file {rel}")
    return manifest


def load_samples(manifest: DatasetManifest) -> list[RoiSample]:
    samples = []
    for r in manifest.records:
        image = load_gray(manifest.resolve(r.image_path))
        if image.dtype != np.uint8:
            image = to_8bit(image)
        mask = load_gray(manifest.resolve(r.mask_path)) > 0 if r.mask_path else None
        samples.append(RoiSample(image=image, label=r.label, mask=mask, id=r.id))
    return samples


def write_dataset(samples: Sequence[RoiSample], out_dir, splits: dict[str, str] | None = None,
                  seed: int | None = None) -> DatasetManifest:
    """Write ``images/<id>.png``, ``masks/<id>.png`` and ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    records = []
    for s in samples:
        img_rel = f"images/{s.id}.png"
        save_png(out_dir / img_rel, s.image)
        mask_rel = None
        if s.mask is not None:
            mask_rel = f"masks/{s.id}.png"
            save_png(out_dir / mask_rel, s.mask)
        records.append(ManifestRecord(s.id, img_rel, s.label, mask_rel, (splits or {}).get(s.id)))
    manifest = DatasetManifest(records, root=out_dir, seed=seed)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# -- synthetic data ----------------------------------------------------------------

@dataclass
class SynthConfig:
    count_per_class: int = 200
    image_size: int = 64
    canvas_size: int = 128
    blob_axes: tuple[float, float] = (8.0, 20.0)  # semi-axis range, canvas pixels
    contrast: tuple[float, float] = (0.35, 0.7)
    texture_amplitude: float = 0.12
    texture_sigma: float = 3.0
    split: float = 0.8
    seed: int = 0

    def __post_init__(self):
        self.blob_axes = tuple(self.blob_axes)
        self.contrast = tuple(self.contrast)
        if self.count_per_class < 2:
            raise ValueError("count_per_class must be at least 2")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        lo, hi = self.blob_axes
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid blob_axes range {self.blob_axes}")
        if 2 * hi * (1 + 2 * PAD_RANGE[1]) + 2 > self.canvas_size:
            raise ValueError("canvas_size too small for the largest padded blob")
        if not 0 < self.contrast[0] <= self.contrast[1]:
            raise ValueError(f"invalid contrast range {self.contrast}")
        if self.texture_amplitude < 0 or self.texture_sigma <= 0:
            raise ValueError("texture_amplitude must be >= 0 and texture_sigma > 0")
        if not 0 < self.split < 1:
            raise ValueError("split must be in (0, 1)")


def _texture(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    s = cfg.canvas_size
    g = gaussian_filter(rng.standard_normal((s, s)), cfg.texture_sigma, mode="wrap")
    g /= g.std()
    return 0.35 + cfg.texture_amplitude * g


def _blob(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Smooth dome-shaped ellipse and its exact mask."""
    s = cfg.canvas_size
    a, b = rng.uniform(*cfg.blob_axes, size=2)
    theta = rng.uniform(0, np.pi)
    contrast = rng.uniform(*cfg.contrast)
    margin = max(a, b) * (1 + 2 * PAD_RANGE[1]) + 1
    cy, cx = rng.uniform(margin, s - margin, size=2)
    rr, cc = np.mgrid[0:s, 0:s].astype(np.float64)
    dy, dx = rr - cy, cc - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    r2 = u * u + v * v
    mask = r2 <= 1.0
    return contrast * np.sqrt(np.clip(1.0 - r2, 0.0, None)), mask


def synth_case(cfg: SynthConfig, index: int) -> tuple[RoiSample, RoiSample]:
    """One abnormal ROI and its contralateral normal ROI."""
    rng = derive_rng(cfg.seed, "synth", index)
    left = _texture(rng, cfg)
    right = _texture(rng, cfg)
    blob, mask = _blob(rng, cfg)
    left = left + blob
    # both sides share one 16-bit scan and one 8-bit conversion
    scan16 = round_half_up(np.clip(np.hstack([left, right]), 0, 1) * 65535).astype(np.uint16)
    scan8 = to_8bit(scan16)
    s = cfg.canvas_size
    left8, right8 = scan8[:, :s], scan8[:, s:]
    roi, roi_mask, rect = crop_abnormal_roi(left8, mask, rng)
    normal = crop_normal_roi(right8, rect)
    n = cfg.image_size
    case = f"case{index:04d}"

    def fit(img):
        return round_half_up(resize_bilinear(img, n, n)).astype(np.uint8)

    abn = RoiSample(fit(roi), ABNORMAL, resize_nearest(roi_mask, n, n), f"{case}-abn", "synthetic")
    nrm = RoiSample(fit(normal), NORMAL, np.zeros((n, n), dtype=bool), f"{case}-nrm", "synthetic")
    return abn, nrm


def synth_samples(cfg: SynthConfig) -> list[RoiSample]:
    samples = []
    for i in range(cfg.count_per_class):
        samples.extend(synth_case(cfg, i))
    return samples


def synth_generate(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Generate the synthetic dataset on disk with a seeded stratified train/val split."""
    from .network import stratified_split

    samples = synth_samples(cfg)
    train_idx, _ = stratified_split([s.label for s in samples], cfg.split, derive_seed(cfg.seed, "split"))
    in_train = set(train_idx.tolist())
    splits = {s.id: ("train" if i in in_train else "val") for i, s in enumerate(samples)}
    return write_dataset(samples, out_dir, splits, seed=cfg.seed)


def fit_to_size(sample: RoiSample, size: int) -> RoiSample:
    """Resample a ROI (bilinear) and its mask (nearest) to ``size`` x ``size``."""
    if sample.image.shape == (size, size):
        return sample
    image = round_half_up(resize_bilinear(sample.image, size, size)).astype(np.uint8)
    mask = None if sample.mask is None else resize_nearest(sample.mask, size, size)
    return dataclasses.replace(sample, image=image, mask=mask)
