"""Dataset ingestion, augmentation and seeded synthetic patch generation.

Images are 8-bit RGB PNGs decoded to float32 [3, H, W] in [0, 1]; masks
are 8-bit palette PNGs whose index 0 is background and 1..C follow the
class-name order. A dataset directory carries ``manifest.json`` listing
entries with multi-hot labels, or labels can be parsed from bracket
suffixes in the filenames themselves.

Randomness is stream-per-patch: every patch derives its own generator
from (seed, patch index), so parallel loading order can never change
results.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, LabelParseError, ShapeError, ValidationError

DEFAULT_CLASS_NAMES = ("tumor", "stroma", "normal")

# Palette for mask PNGs: background, then one saturated color per class.
_PALETTE_COLORS = [
    (0, 0, 0),
    (228, 26, 28),
    (55, 126, 184),
    (77, 175, 74),
    (152, 78, 163),
    (255, 127, 0),
    (255, 255, 51),
    (166, 86, 40),
]


def _palette_bytes() -> list[int]:
    flat: list[int] = []
    for i in range(256):
        r, g, b = _PALETTE_COLORS[i] if i < len(_PALETTE_COLORS) else (0, 0, 0)
        flat.extend((r, g, b))
    return flat


_PALETTE = _palette_bytes()


@dataclass
class LabeledPatch:
    """RGB image with an image-level multi-hot label.

    ``gt_mask`` is present for synthetic or evaluation data only; its
    foreground classes always agree with the positive label set.
    """

    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    label: np.ndarray  # int8 [C] multi-hot
    id: str
    gt_mask: np.ndarray | None = None  # int [H, W] in 0..C

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.label = np.asarray(self.label, dtype=np.int8)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"patch image must be [3,H,W], got {self.image.shape}")
        if self.gt_mask is not None:
            self.gt_mask = np.asarray(self.gt_mask)
            if self.gt_mask.shape != self.image.shape[1:]:
                raise ShapeError(
                    f"mask shape {self.gt_mask.shape} != image plane {self.image.shape[1:]}"
                )


@dataclass
class ManifestEntry:
    image: str
    label: np.ndarray
    mask: str | None = None

    @property
    def id(self) -> str:
        return Path(self.image).stem


@dataclass
class DatasetManifest:
    root: Path
    class_names: tuple[str, ...]
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def save_image_png(image: np.ndarray, path) -> None:
    """float [3,H,W] in [0,1] -> 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_mask_png(mask: np.ndarray, path) -> None:
    """Class-index mask -> palette PNG with the fixed package palette."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValidationError("mask indices must fit in uint8")
    img = Image.fromarray(arr.astype(np.uint8), mode="P")
    img.putpalette(_PALETTE)
    img.save(path)


def load_mask_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("P", "L"):
                raise DataError(f"mask {path} must be palette or grayscale, got {img.mode}")
            return np.asarray(img, dtype=np.int32)
    except OSError as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Labels and manifests
# ---------------------------------------------------------------------------

_BRACKET_RE = re.compile(r"\[([01](?:\s*,\s*[01])*)\]")


def parse_bracket_label(filename: str, n_classes: int = 3) -> np.ndarray:
    """Extract the multi-hot label from a "name-[a, b, c].png" filename."""
    matches = _BRACKET_RE.findall(str(filename))
    if not matches:
        raise LabelParseError(f"no [a, b, c] label suffix in {filename!r}")
    values = [int(v) for v in re.split(r"\s*,\s*", matches[-1])]
    if len(values) != n_classes:
        raise LabelParseError(
            f"label arity {len(values)} != {n_classes} classes in {filename!r}"
        )
    return np.asarray(values, dtype=np.int8)


def load_dataset(root, mode: str = "manifest", class_names=DEFAULT_CLASS_NAMES) -> DatasetManifest:
    """Index a dataset directory without decoding pixels.

    ``manifest`` mode reads ``manifest.json``; ``bracket_names`` mode
    scans PNGs whose filenames carry bracket labels. Entries come back
    in lexicographic order and every referenced file must exist.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    if mode == "bracket_names":
        names = tuple(class_names)
        entries = []
        for p in sorted(root.glob("*.png")):
            entries.append(ManifestEntry(image=p.name, label=parse_bracket_label(p.name, len(names))))
        return DatasetManifest(root=root, class_names=names, entries=entries)
    if mode != "manifest":
        raise ValidationError(f"unknown dataset mode {mode!r}")

    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"missing manifest.json under {root}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest.json is not valid JSON: {exc}") from exc
    names = tuple(doc.get("class_names", ()))
    if not names:
        raise DataError("manifest.json lacks class_names")
    entries = []
    for raw in doc.get("entries", []):
        label = np.asarray(raw.get("label", ()), dtype=np.int8)
        if label.shape != (len(names),):
            raise DataError(f"entry {raw.get('image')} label length != {len(names)}")
        entry = ManifestEntry(image=raw["image"], label=label, mask=raw.get("mask"))
        if not (root / entry.image).is_file():
            raise DataError(f"manifest references missing image {entry.image}")
        if entry.mask is not None and not (root / entry.mask).is_file():
            raise DataError(f"manifest references missing mask {entry.mask}")
        entries.append(entry)
    entries.sort(key=lambda e: e.image)
    return DatasetManifest(root=root, class_names=names, entries=entries)


def load_patches(manifest: DatasetManifest) -> list[LabeledPatch]:
    """Decode every manifest entry into an in-memory patch."""
    patches = []
    for entry in manifest.entries:
        image = load_image_png(manifest.root / entry.image)
        mask = load_mask_png(manifest.root / entry.mask) if entry.mask else None
        patches.append(LabeledPatch(image=image, label=entry.label, id=entry.id, gt_mask=mask))
    return patches


def write_dataset(patches: list[LabeledPatch], out_dir) -> Path:
    """Write images/, masks/ and manifest.json for a list of patches."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(p.gt_mask is not None for p in patches)
    if has_masks:
        (out_dir / "masks").mkdir(exist_ok=True)
    entries = []
    n_classes = len(patches[0].label) if patches else 0
    class_names = DEFAULT_CLASS_NAMES if n_classes == 3 else tuple(
        f"class{i + 1}" for i in range(n_classes)
    )
    for p in sorted(patches, key=lambda q: q.id):
        image_rel = f"images/{p.id}.png"
        save_image_png(p.image, out_dir / image_rel)
        entry = {"image": image_rel, "label": [int(v) for v in p.label]}
        if p.gt_mask is not None:
            mask_rel = f"masks/{p.id}.png"
            save_mask_png(p.gt_mask, out_dir / mask_rel)
            entry["mask"] = mask_rel
        entries.append(entry)
    doc = {"class_names": list(class_names), "entries": entries}
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out_dir


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def patch_rng(seed: int, index) -> np.random.Generator:
    """Per-patch random stream: independent of processing order."""
    if isinstance(index, (tuple, list)):
        entropy = [int(seed) & 0xFFFFFFFF, *[int(i) & 0xFFFFFFFF for i in index]]
    else:
        entropy = [int(seed) & 0xFFFFFFFF, int(index) & 0xFFFFFFFF]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def augment(patch: LabeledPatch, rng: np.random.Generator) -> LabeledPatch:
    """Random flips and an integer translation with reflect padding.

    Draw order is fixed (hflip, vflip, dy, dx) so a given generator state
    always produces the same transform. The ground-truth mask, when
    present, is co-transformed; the label never changes.
    """
    img = patch.image
    mask = patch.gt_mask
    _, h, w = img.shape

    if rng.random() < 0.5:
        img = img[:, :, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
        mask = mask[::-1, :] if mask is not None else None

    max_dy = h // 10
    max_dx = w // 10
    dy = int(rng.integers(-max_dy, max_dy + 1))
    dx = int(rng.integers(-max_dx, max_dx + 1))
    if dy or dx:
        pad_y, pad_x = abs(dy), abs(dx)
        padded = np.pad(img, ((0, 0), (pad_y, pad_y), (pad_x, pad_x)), mode="reflect")
        img = padded[:, pad_y - dy : pad_y - dy + h, pad_x - dx : pad_x - dx + w]
        if mask is not None:
            mpad = np.pad(mask, ((pad_y, pad_y), (pad_x, pad_x)), mode="reflect")
            mask = mpad[pad_y - dy : pad_y - dy + h, pad_x - dx : pad_x - dx + w]

    return LabeledPatch(
        image=np.ascontiguousarray(img),
        label=patch.label,
        id=patch.id,
        gt_mask=np.ascontiguousarray(mask) if mask is not None else None,
    )


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _base_colors(class_count: int) -> np.ndarray:
    if class_count == 3:
        # loosely H&E-themed: violet tumor, pink stroma, blue-gray normal
        return np.array(
            [[0.52, 0.30, 0.56], [0.87, 0.56, 0.66], [0.40, 0.53, 0.76]], dtype=np.float32
        )
    hues = np.linspace(0.0, 1.0, class_count, endpoint=False)
    colors = []
    for h in hues:
        colors.append(
            [
                0.45 + 0.35 * np.cos(2 * np.pi * h),
                0.45 + 0.35 * np.cos(2 * np.pi * (h + 1 / 3)),
                0.45 + 0.35 * np.cos(2 * np.pi * (h + 2 / 3)),
            ]
        )
    return np.clip(np.asarray(colors, dtype=np.float32), 0.05, 0.95)


def _class_texture(class_idx: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Per-class texture field in roughly [-0.15, 0.15].

    Each class has its own statistics so localization cannot rely on a
    flat color: speckle, oriented stripes, or smooth blotches.
    """
    kind = class_idx % 3
    if kind == 0:
        return rng.normal(0.0, 0.085, size=(h, w)).astype(np.float32)
    if kind == 1:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.45, 0.8)
        phase = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        stripes = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        return (0.07 * stripes + rng.normal(0, 0.04, size=(h, w))).astype(np.float32)
    coarse = rng.normal(0.0, 0.11, size=(max(h // 6, 2), max(w // 6, 2)))
    reps_y = -(-h // coarse.shape[0])
    reps_x = -(-w // coarse.shape[1])
    blotch = np.kron(coarse, np.ones((reps_y, reps_x)))[:h, :w]
    return (blotch + rng.normal(0, 0.03, size=(h, w))).astype(np.float32)


def _ellipse_mask(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    cy = rng.uniform(0.25 * h, 0.75 * h)
    cx = rng.uniform(0.25 * w, 0.75 * w)
    ry = rng.uniform(0.18, 0.42) * h
    rx = rng.uniform(0.18, 0.42) * w
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    yr = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    xr = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    return (yr / ry) ** 2 + (xr / rx) ** 2 <= 1.0


def synth_generate(seed: int, count: int, size: int, class_count: int = 3) -> list[LabeledPatch]:
    """Generate textured-region patches with pixel ground truth.

    Each patch paints 1..class_count elliptical regions (distinct
    classes, later regions may occlude earlier ones) over a bright
    background; the label is recomputed from the final mask so the
    label/mask agreement invariant holds by construction.
    """
    if size < 16:
        raise ValidationError(f"size must be >= 16, got {size}")
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    colors = _base_colors(class_count)
    patches = []
    for i in range(count):
        rng = patch_rng(seed, i)
        image = np.full((3, size, size), 0.93, dtype=np.float32)
        image += rng.normal(0.0, 0.02, size=(3, size, size)).astype(np.float32)
        gt = np.zeros((size, size), dtype=np.int32)

        k = int(rng.integers(1, class_count + 1))
        chosen = rng.choice(class_count, size=k, replace=False)
        for cls in chosen:
            region = _ellipse_mask(size, size, rng)
            texture = _class_texture(int(cls), size, size, rng)
            for ch in range(3):
                image[ch][region] = colors[cls, ch] + texture[region]
            image[:, region] += rng.normal(0, 0.015, size=(3, int(region.sum()))).astype(
                np.float32
            )
            gt[region] = int(cls) + 1

        image = np.clip(image, 0.0, 1.0)
        label = np.zeros(class_count, dtype=np.int8)
        present = np.unique(gt)
        for v in present:
            if v > 0:
                label[v - 1] = 1
        bracket = "[" + ", ".join(str(int(v)) for v in label) + "]"
        patches.append(
            LabeledPatch(image=image, label=label, id=f"{i:04d}-{bracket}", gt_mask=gt)
        )
    return patches
