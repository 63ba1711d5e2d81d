"""Clip ingestion, fixed-length windowing and a synthetic stand-in dataset.

On-disk layout (shared by real and synthetic data)::

    <root>/manifest.json
    <root>/<split>/<clip_id>/Frame/<stem>.jpg
    <root>/<split>/<clip_id>/GT/<stem>.png

The manifest is a JSON array of ``{clip_id, case_id, split, attributes}``
objects.  Masks are 8-bit single channel images with 0 for background and
255 for polyp.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

ATTRIBUTE_CODES = ("SI", "IB", "HO", "GH", "FM", "SO", "LO", "OCC", "OV", "SV")
SPLITS = ("train", "easy_unseen", "hard_unseen")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff")
MANIFEST_NAME = "manifest.json"

# Quantitative attribute thresholds of the SUN-SEG attribute table.
SMALL_OBJECT_AREA = 0.05
LARGE_OBJECT_BBOX_AREA = 0.15
FAST_MOTION_PX = 20.0
SCALE_VARIATION_RATIO = 0.5

MIN_SYNTH_SIZE = 64


class DataError(Exception):
    """Malformed dataset on disk or in a manifest."""


def parse_attributes(value) -> frozenset[str]:
    """Parse ``"GH,OCC"`` or ``["GH", "OCC"]`` into a validated code set."""
    if isinstance(value, str):
        codes = [c.strip() for c in value.split(",") if c.strip()]
    else:
        codes = [str(c).strip() for c in value]
    unknown = sorted(set(codes) - set(ATTRIBUTE_CODES))
    if unknown:
        raise DataError(f"unknown attribute code(s) {unknown}; valid codes are {list(ATTRIBUTE_CODES)}")
    return frozenset(codes)


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    case_id: str
    frame_paths: tuple[Path, ...]
    mask_paths: tuple[Path, ...]
    attributes: frozenset[str] = frozenset()
    split: str = "train"

    def __post_init__(self):
        if len(self.frame_paths) == 0 or len(self.frame_paths) != len(self.mask_paths):
            raise DataError(
                f"clip {self.clip_id}: {len(self.frame_paths)} frames vs {len(self.mask_paths)} masks"
            )
        if self.split not in SPLITS:
            raise DataError(f"clip {self.clip_id}: unknown split {self.split!r}")
        object.__setattr__(self, "attributes", parse_attributes(self.attributes))

    def __len__(self) -> int:
        return len(self.frame_paths)


@dataclass(frozen=True)
class FrameWindow:
    clip_id: str
    frame_indices: tuple[int, ...]

    @property
    def F(self) -> int:
        return len(self.frame_indices)

    def unique_positions(self) -> list[int]:
        """Positions inside the window holding a frame not seen earlier in it.

        Padding repeats the last frame; those duplicates are dropped before
        metrics are aggregated.
        """
        seen, keep = set(), []
        for pos, idx in enumerate(self.frame_indices):
            if idx not in seen:
                seen.add(idx)
                keep.append(pos)
        return keep


def _list_images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"split manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"split manifest {path} is not valid JSON: {exc}") from None
    if not isinstance(entries, list):
        raise DataError(f"split manifest {path} must hold a JSON array")
    for entry in entries:
        missing = {"clip_id", "case_id", "split"} - set(entry)
        if missing:
            raise DataError(f"manifest entry {entry} lacks {sorted(missing)}")
    return entries


def scan_dataset(root, split_manifest=None) -> list[ClipRecord]:
    """Build clip records for every positive clip listed in the manifest.

    Clips whose ``GT`` directory is absent or empty are negative clips and are
    skipped.  A frame without a mask (or a mask without a frame) is an error.
    """
    root = Path(root)
    manifest = Path(split_manifest) if split_manifest is not None else root / MANIFEST_NAME
    records = []
    for entry in read_manifest(manifest):
        clip_id, split = str(entry["clip_id"]), str(entry["split"])
        if split not in SPLITS:
            raise DataError(f"clip {clip_id}: unknown split {split!r}; valid splits are {list(SPLITS)}")
        attributes = parse_attributes(entry.get("attributes", []))
        clip_dir = root / split / clip_id
        if not clip_dir.is_dir():
            raise DataError(f"clip directory missing: {clip_dir}")
        frames = _list_images(clip_dir / "Frame")
        masks = _list_images(clip_dir / "GT")
        if not masks:
            continue
        mask_by_stem = {m.stem: m for m in masks}
        paired = []
        for frame in frames:
            if frame.stem not in mask_by_stem:
                raise DataError(f"no mask for frame {frame}")
            paired.append(mask_by_stem.pop(frame.stem))
        if mask_by_stem:
            orphan = sorted(mask_by_stem.values())[0]
            raise DataError(f"mask without frame: {orphan}")
        records.append(
            ClipRecord(
                clip_id=clip_id,
                case_id=str(entry["case_id"]),
                frame_paths=tuple(frames),
                mask_paths=tuple(paired),
                attributes=attributes,
                split=split,
            )
        )
    return sorted(records, key=lambda r: r.clip_id)


def select_first_clip_per_polyp(records: Sequence[ClipRecord]) -> list[ClipRecord]:
    first: dict[str, ClipRecord] = {}
    for rec in records:
        if rec.case_id not in first or rec.clip_id < first[rec.case_id].clip_id:
            first[rec.case_id] = rec
    return sorted(first.values(), key=lambda r: r.clip_id)


def filter_split(records: Sequence[ClipRecord], split: str) -> list[ClipRecord]:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; valid splits are {list(SPLITS)}")
    return [r for r in records if r.split == split]


def window_indices(n_frames: int, F: int) -> list[tuple[int, ...]]:
    if F <= 0:
        raise ValueError(f"window length must be positive, got {F}")
    if n_frames <= 0:
        raise ValueError(f"clip must have at least one frame, got {n_frames}")
    windows = []
    for start in range(0, n_frames, F):
        idx = list(range(start, min(start + F, n_frames)))
        idx += [idx[-1]] * (F - len(idx))
        windows.append(tuple(idx))
    return windows


def window_clip(record: ClipRecord, F: int, mode: str = "eval_stride_F") -> list[FrameWindow]:
    """Split a clip into non-overlapping length-``F`` windows.

    A short tail window is completed by repeating its last frame.  Both modes
    use the same stride-F rule; the mode is kept so callers state intent.
    """
    if mode not in ("train_stride_F", "eval_stride_F"):
        raise ValueError(f"unknown window mode {mode!r}")
    return [FrameWindow(record.clip_id, idx) for idx in window_indices(len(record), F)]


def _read_rgb(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None


def _read_mask(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.NEAREST)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from None
    return (arr >= 0.5).astype(np.float32)


def load_window(record: ClipRecord, window: FrameWindow, size=(256, 256)):
    """Load a window as ``(1, F, 3, H, W)`` images and ``(1, F, 1, H, W)`` masks."""
    size = (int(size[0]), int(size[1]))
    images = np.stack([_read_rgb(record.frame_paths[i], size) for i in window.frame_indices])
    masks = np.stack([_read_mask(record.mask_paths[i], size) for i in window.frame_indices])
    images = torch.from_numpy(images).permute(0, 3, 1, 2).unsqueeze(0).contiguous()
    masks = torch.from_numpy(masks)[None, :, None]
    return images, masks


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    """Shape of a synthetic dataset.

    ``attributes`` optionally fixes the tag set of each training clip; when
    omitted clip ``i`` carries the single code ``ATTRIBUTE_CODES[i % 10]``.
    Evaluation clips cycle through the codes the same way.
    """

    n_clips: int = 2
    n_frames: int = 10
    size: int = 256
    eval_clips: int = 0
    clips_per_case: int = 1
    attributes: list | None = None
    jpeg_quality: int = 95

    def __post_init__(self):
        if self.size < MIN_SYNTH_SIZE:
            raise ValueError(f"image size must be >= {MIN_SYNTH_SIZE} to render a polyp, got {self.size}")
        if self.n_clips < 0 or self.eval_clips < 0 or self.n_frames < 1 or self.clips_per_case < 1:
            raise ValueError("clip and frame counts must be positive")
        if self.attributes is not None:
            if len(self.attributes) != self.n_clips:
                raise ValueError("attributes must list one tag set per training clip")
            self.attributes = [sorted(parse_attributes(a)) for a in self.attributes]


def _stable_key(*parts) -> int:
    return zlib.crc32("/".join(map(str, parts)).encode())


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array([0.78, 0.42, 0.36]) + rng.uniform(-0.05, 0.05, 3)
    noise = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    noise /= np.abs(noise).max() + 1e-9
    img = base[None, None, :] * (1.0 + 0.15 * noise[..., None])
    yy, xx = np.mgrid[0:size, 0:size] / size
    vignette = 1.0 - 0.35 * ((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
    return np.clip(img * vignette[..., None], 0, 1)


def _ellipse_mask(size, cx, cy, a, b, theta, harmonics) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    boundary = 1.0 + sum(amp * np.cos(k * phi + ph) for k, amp, ph in harmonics)
    return r <= boundary


def _render_clip(rng: np.random.Generator, attrs: set, n_frames: int, size: int):
    """Return lists of uint8 RGB frames and uint8 masks for one clip."""
    bg = _background(rng, size)
    radius = size * rng.uniform(0.15, 0.18)
    if "SO" in attrs:
        radius = size * 0.075
    if "LO" in attrs:
        radius = size * 0.30
    aspect = rng.uniform(0.8, 1.0)
    cx, cy = size * rng.uniform(0.4, 0.6), size * rng.uniform(0.4, 0.6)
    if "OV" in attrs:
        cx = radius * 0.3
    vx, vy = rng.uniform(-1.5, 1.5, 2) * size / 256
    theta0 = rng.uniform(0, np.pi)
    harmonics = [(k, rng.uniform(0.02, 0.06), rng.uniform(0, 2 * np.pi)) for k in (2, 3, 5)]
    jump = max(24.0, 0.15 * size)
    jump_dir = rng.uniform(0, 2 * np.pi)

    polyp_rgb = np.array([0.85, 0.55, 0.45]) if "IB" not in attrs else bg.mean(axis=(0, 1)) * 1.04
    second_rgb = np.array([0.55, 0.25, 0.30])
    instrument_angle = rng.uniform(0.2, 0.6)

    frames, masks = [], []
    for t in range(n_frames):
        scale = 1.0 + 0.05 * np.sin(2 * np.pi * t / max(n_frames, 2))
        if "SV" in attrs:
            scale = 1.0 - 0.75 * t / max(n_frames - 1, 1)
        px, py = cx + vx * t, cy + vy * t
        if "FM" in attrs:
            sign = 1.0 if t % 2 == 0 else -1.0
            px += sign * 0.5 * jump * np.cos(jump_dir)
            py += sign * 0.5 * jump * np.sin(jump_dir)
        a, b = radius * scale, radius * scale * aspect
        theta = theta0 + 0.05 * t
        jittered = [(k, amp * (1 + 0.2 * np.sin(t + ph)), ph + 0.1 * t) for k, amp, ph in harmonics]
        mask = _ellipse_mask(size, px, py, a, b, theta, jittered)

        img = bg.copy()
        if "GH" in attrs:
            for shift, channel in ((3, 0), (-3, 1), (5, 2)):
                ghost = np.roll(mask, shift * size // 128 or shift, axis=1) & ~mask
                img[ghost, channel] = np.clip(img[ghost, channel] + 0.45, 0, 1)
        shade = gaussian_filter(mask.astype(np.float64), sigma=max(radius / 4, 1))
        img[mask] = polyp_rgb * (0.8 + 0.3 * shade[mask, None])
        if "HO" in attrs:
            yy, xx = np.mgrid[0:size, 0:size]
            half = mask & ((xx - px) * np.cos(theta) + (yy - py) * np.sin(theta) > 0)
            img[half] = second_rgb
        if "SI" in attrs:
            yy, xx = np.mgrid[0:size, 0:size]
            d = np.abs((yy - size) * np.cos(instrument_angle) - xx * np.sin(instrument_angle))
            tool = (d < size * 0.03) & (xx < px - 0.6 * a)
            img[tool] = np.array([0.75, 0.77, 0.80])
        if "OCC" in attrs:
            bar_w = max(int(0.6 * radius), 4)
            span = size + bar_w
            x0 = int(round((t + 0.5) / n_frames * span)) - bar_w
            bar = np.zeros_like(mask)
            bar[:, max(x0, 0):max(x0 + bar_w, 0)] = True
            img[bar] = np.array([0.25, 0.2, 0.18])
            mask = mask & ~bar

        frames.append((np.clip(img, 0, 1) * 255).round().astype(np.uint8))
        masks.append(mask.astype(np.uint8) * 255)
    return frames, masks


def synthesize_dataset(spec: SynthSpec, seed: int, root) -> tuple[Path, Path]:
    """Write a deterministic synthetic dataset under ``root``.

    Returns ``(root, manifest_path)``.  Output bytes depend only on
    ``(spec, seed)``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    plan = []
    for i in range(spec.n_clips):
        case = i // spec.clips_per_case
        attrs = spec.attributes[i] if spec.attributes is not None else [ATTRIBUTE_CODES[i % len(ATTRIBUTE_CODES)]]
        plan.append((f"case{case:03d}_{i % spec.clips_per_case}", f"case{case:03d}", "train", attrs))
    for split, prefix in (("easy_unseen", "easy"), ("hard_unseen", "hard")):
        for i in range(spec.eval_clips):
            plan.append((f"{prefix}{i:03d}_0", f"{prefix}{i:03d}", split, [ATTRIBUTE_CODES[i % len(ATTRIBUTE_CODES)]]))

    manifest = []
    for clip_id, case_id, split, attrs in plan:
        rng = np.random.default_rng([seed, _stable_key(clip_id)])
        frames, masks = _render_clip(rng, set(attrs), spec.n_frames, spec.size)
        clip_dir = root / split / clip_id
        (clip_dir / "Frame").mkdir(parents=True, exist_ok=True)
        (clip_dir / "GT").mkdir(parents=True, exist_ok=True)
        for t, (frame, mask) in enumerate(zip(frames, masks)):
            Image.fromarray(frame, "RGB").save(clip_dir / "Frame" / f"{t:05d}.jpg", quality=spec.jpeg_quality)
            Image.fromarray(mask, "L").save(clip_dir / "GT" / f"{t:05d}.png")
        manifest.append({"clip_id": clip_id, "case_id": case_id, "split": split, "attributes": sorted(attrs)})

    manifest_path = root / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return root, manifest_path


# --------------------------------------------------------------------------
# attribute statistics, used to check synthetic clips against the thresholds


def mask_area_ratio(masks: np.ndarray) -> float:
    """Mean object-area / image-area over a ``(T, H, W)`` stack."""
    masks = np.asarray(masks, dtype=bool)
    return float(masks.reshape(len(masks), -1).mean(axis=1).mean())


def _bbox_area(mask: np.ndarray) -> float:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return 0.0
    return float((ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1))


def bbox_area_ratio(masks: np.ndarray) -> float:
    masks = np.asarray(masks, dtype=bool)
    h, w = masks.shape[1:]
    return float(np.mean([_bbox_area(m) / (h * w) for m in masks]))


def mean_centroid_motion(masks: np.ndarray) -> float:
    masks = np.asarray(masks, dtype=bool)
    cents = []
    for m in masks:
        ys, xs = np.nonzero(m)
        cents.append((ys.mean(), xs.mean()) if len(ys) else (np.nan, np.nan))
    cents = np.asarray(cents)
    if len(cents) < 2:
        return 0.0
    return float(np.nanmean(np.linalg.norm(np.diff(cents, axis=0), axis=1)))


def mean_pairwise_bbox_ratio(masks: np.ndarray) -> float:
    areas = [_bbox_area(m) for m in np.asarray(masks, dtype=bool)]
    ratios = [
        min(areas[i], areas[j]) / max(areas[i], areas[j])
        for i in range(len(areas))
        for j in range(i + 1, len(areas))
        if max(areas[i], areas[j]) > 0
    ]
    return float(np.mean(ratios)) if ratios else 1.0


def load_clip_masks(record: ClipRecord) -> np.ndarray:
    out = []
    for p in record.mask_paths:
        with Image.open(p) as im:
            out.append(np.asarray(im.convert("L")) >= 128)
    return np.stack(out)


__all__ = [
    "ATTRIBUTE_CODES",
    "SPLITS",
    "ClipRecord",
    "DataError",
    "FrameWindow",
    "SynthSpec",
    "filter_split",
    "load_window",
    "scan_dataset",
    "select_first_clip_per_polyp",
    "synthesize_dataset",
    "window_clip",
    "window_indices",
]
