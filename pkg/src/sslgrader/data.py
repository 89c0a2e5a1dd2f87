"""Patch datasets: sliding-window extraction, resizing, manifests, ingestion.

Images move through the pipeline as 8-bit RGB rasters shaped (H, W, 3).
Large source images are cut into overlapping square windows, each resized
to the model's input resolution and written to disk; a manifest CSV ties
the patch files to their source, origin, grade label, and split.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "unassigned")


class GradeLabel(IntEnum):
    """Ordinal tissue grades, non-cancerous through grade 5."""

    NC = 0
    G3 = 1
    G4 = 2
    G5 = 3


@dataclass
class PatchRecord:
    """One extracted patch: file location, provenance, and annotations."""

    patch_path: str
    source_id: str
    x: int = 0
    y: int = 0
    label: GradeLabel | None = None
    split: str = "unassigned"

    def __post_init__(self) -> None:
        if not self.patch_path:
            raise ValueError("patch_path must be non-empty")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"origin must be non-negative, got ({self.x}, {self.y})")
        if self.label is not None:
            self.label = GradeLabel(self.label)
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class PatchParams:
    """Window geometry: 512-pixel windows at 50% overlap, resized to 128."""

    patch_size: int = 512
    overlap: float = 0.5
    target_size: int = 128

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.target_size < 1:
            raise ValueError(f"target_size must be >= 1, got {self.target_size}")
        if self.stride < 1:
            raise ValueError("stride rounds to zero; decrease overlap")

    @property
    def stride(self) -> int:
        return round(self.patch_size * (1.0 - self.overlap))


def window_origins(width: int, height: int, params: PatchParams) -> list[tuple[int, int]]:
    """Top-left corners of every window lying fully inside a width x height image.

    Windows start at multiples of the stride; per axis there are
    floor((dim - patch_size) / stride) + 1 of them.
    """
    p, s = params.patch_size, params.stride
    if width < p or height < p:
        return []
    nx = (width - p) // s + 1
    ny = (height - p) // s + 1
    return [(i * s, j * s) for j in range(ny) for i in range(nx)]


def _axis_samples(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-center mapping: dst index -> fractional src coordinate
    centers = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    lo = np.floor(centers).astype(np.int64)
    t = centers - lo
    return np.clip(lo, 0, src - 1), np.clip(lo + 1, 0, src - 1), t


def resize_bilinear(raster: np.ndarray, target_h: int, target_w: int | None = None) -> np.ndarray:
    """Resize (H, W) or (H, W, C) to the target size, channels independent.

    Interpolates as a + t*(b - a) along each axis, which keeps every output
    value inside the input's min/max even under floating-point rounding.
    Identity when the target matches the source. Returns float64.
    """
    if target_w is None:
        target_w = target_h
    arr = np.asarray(raster, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"raster must be 2-d or 3-d, got {arr.ndim}-d")
    h, w, _ = arr.shape
    if min(h, w, target_h, target_w) < 1:
        raise ValueError("source and target sizes must be >= 1")

    lo_y, hi_y, ty = _axis_samples(h, target_h)
    lo_x, hi_x, tx = _axis_samples(w, target_w)
    top = arr[lo_y]
    rows = top + ty[:, None, None] * (arr[hi_y] - top)
    left = rows[:, lo_x]
    out = left + tx[None, :, None] * (rows[:, hi_x] - left)
    return out[:, :, 0] if squeeze else out


def _quantize(raster: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(raster), 0, 255).astype(np.uint8)


def patchify(
    image: np.ndarray,
    params: PatchParams,
    source_id: str,
    out_dir: str | Path | None = None,
    fmt: str = "png",
) -> tuple[list[PatchRecord], list[np.ndarray]]:
    """Cut an RGB image into overlapping windows resized to target_size.

    Returns the records and the resized uint8 rasters in matching order
    (row-major over window origins). When out_dir is given each raster is
    also written there and the record paths point at the files; otherwise
    paths are synthetic names derived from source_id and the origin.
    An image smaller than the window yields no patches, with a warning.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {image.shape}")
    h, w = image.shape[:2]
    origins = window_origins(w, h, params)
    if not origins:
        warnings.warn(
            f"{source_id}: image {w}x{h} smaller than patch size "
            f"{params.patch_size}, skipped", stacklevel=2)
        return [], []

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    records, rasters = [], []
    for x, y in origins:
        window = image[y : y + params.patch_size, x : x + params.patch_size]
        patch = _quantize(resize_bilinear(window, params.target_size))
        name = f"{source_id}_x{x}_y{y}.{fmt}"
        if out_dir is not None:
            path = out_dir / name
            write_image(patch, path)
            name = str(path)
        records.append(PatchRecord(patch_path=name, source_id=source_id, x=x, y=y))
        rasters.append(patch)
    return records, rasters


# ---------------------------------------------------------------------------
# image files


def write_image(raster: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) uint8 raster as PNG or binary PPM, by extension."""
    path = Path(path)
    raster = np.ascontiguousarray(raster, dtype=np.uint8)
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) raster, got shape {raster.shape}")
    if path.suffix.lower() == ".ppm":
        h, w = raster.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(raster.tobytes())
    else:
        Image.fromarray(raster, mode="RGB").save(path)


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated PPM header")
        ch = data[pos : pos + 1]
        if ch == b"#":  # comment runs to end of line
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise ValueError(f"{path}: truncated PPM header")
            pos += 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
    pos += 1  # single whitespace separates header from pixel data
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pixels = data[pos : pos + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def read_image(path: str | Path) -> np.ndarray:
    """Read an image file into an (H, W, 3) uint8 raster."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return _read_ppm(path)
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


# ---------------------------------------------------------------------------
# dataset ingestion


_IMAGE_SUFFIXES = {".png", ".ppm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _read_two_column_csv(path: Path, value_field: str) -> dict[str, str]:
    table = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "path" not in reader.fieldnames \
                or value_field not in reader.fieldnames:
            raise ValueError(f"{path}: expected columns path,{value_field}")
        for row in reader:
            table[row["path"]] = row[value_field]
    return table


def ingest_sicap(root_dir: str | Path) -> list[PatchRecord]:
    """Build records from a patch-image directory tree.

    Two layouts are accepted: a labels.csv at the root (columns path,label
    with paths relative to the root), or per-class subfolders named NC,
    G3, G4, G5. An optional split.csv (columns path,split) assigns splits,
    typically a held-out test partition. Unreadable images are skipped and
    counted; per-class totals are logged.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")

    labeled: list[tuple[Path, GradeLabel]] = []
    labels_csv = root / "labels.csv"
    if labels_csv.is_file():
        for rel, name in _read_two_column_csv(labels_csv, "label").items():
            if name not in GradeLabel.__members__:
                raise ValueError(f"{labels_csv}: unknown label {name!r} for {rel!r}")
            labeled.append((root / rel, GradeLabel[name]))
    else:
        for grade in GradeLabel:
            folder = root / grade.name
            if not folder.is_dir():
                continue
            for p in folder.rglob("*"):
                if p.suffix.lower() in _IMAGE_SUFFIXES:
                    labeled.append((p, grade))
    labeled.sort(key=lambda item: str(item[0]))

    split_map: dict[str, str] = {}
    split_csv = root / "split.csv"
    if split_csv.is_file():
        split_map = _read_two_column_csv(split_csv, "split")

    records, skipped = [], 0
    counts = {grade.name: 0 for grade in GradeLabel}
    for path, grade in labeled:
        try:
            if path.suffix.lower() == ".ppm":
                _read_ppm(path)
            else:
                with Image.open(path) as img:
                    img.verify()
        except Exception:
            skipped += 1
            log.warning("skipping unreadable image %s", path)
            continue
        rel = str(path.relative_to(root))
        records.append(PatchRecord(
            patch_path=str(path),
            source_id=path.stem,
            label=grade,
            split=split_map.get(rel, "unassigned"),
        ))
        counts[grade.name] += 1

    if not records:
        log.info("ingested 0 records from %s", root)
    else:
        log.info("ingested %d records from %s (%s), skipped %d",
                 len(records), root,
                 ", ".join(f"{k} {v}" for k, v in counts.items()), skipped)
    return records


# ---------------------------------------------------------------------------
# synthetic textures


# light pink stroma background and a purple nucleus tone per class; blob
# count, radius, and hue all separate the classes
_BACKGROUND = np.array([233.0, 205.0, 219.0])
_CLASS_STYLE = {
    GradeLabel.NC: dict(blobs=5, radius=11.0, color=(130.0, 95.0, 165.0)),
    GradeLabel.G3: dict(blobs=14, radius=9.0, color=(110.0, 70.0, 150.0)),
    GradeLabel.G4: dict(blobs=26, radius=7.0, color=(90.0, 50.0, 135.0)),
    GradeLabel.G5: dict(blobs=42, radius=5.0, color=(70.0, 35.0, 120.0)),
}


def _synth_patch(rng: np.random.Generator, size: int, style: dict) -> np.ndarray:
    img = np.tile(_BACKGROUND, (size, size, 1))
    img += rng.normal(0.0, 3.0, size=img.shape)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    color = np.asarray(style["color"])
    for _ in range(style["blobs"]):
        cx, cy = rng.uniform(0, size, size=2)
        r = style["radius"] * rng.uniform(0.7, 1.3)
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        weight = np.clip(1.5 - dist / r, 0.0, 1.0)[:, :, None]
        img = img + weight * (color - img)
    return _quantize(img)


def synth_generate(
    n_per_class,
    seed: int,
    out_dir: str | Path,
    size: int = 128,
    fmt: str = "png",
) -> list[PatchRecord]:
    """Write procedural stained-tissue-like patches, one folder of files.

    n_per_class gives the four class counts in grade order. Textures are
    drawn from a single seeded generator in a fixed order, so identical
    arguments reproduce identical files. A synthetic.json beside the
    patches records the seed and counts.
    """
    counts = [int(c) for c in n_per_class]
    if len(counts) != 4 or any(c < 0 for c in counts):
        raise ValueError(f"n_per_class must be 4 non-negative counts, got {n_per_class}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    records = []
    for grade, count in zip(GradeLabel, counts):
        for i in range(count):
            patch = _synth_patch(rng, size, _CLASS_STYLE[grade])
            path = out_dir / f"{grade.name}_{i:04d}.{fmt}"
            write_image(patch, path)
            records.append(PatchRecord(
                patch_path=str(path),
                source_id=f"synthetic-{grade.name}-{i:04d}",
                label=grade,
            ))
    meta = {"seed": seed, "size": size,
            "counts": {g.name: c for g, c in zip(GradeLabel, counts)}}
    with open(out_dir / "synthetic.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return records


# ---------------------------------------------------------------------------
# manifests


MANIFEST_FIELDS = ("patch_path", "source_id", "x", "y", "label", "split")


def write_manifest(records: list[PatchRecord], path: str | Path) -> None:
    """Write records as CSV; the label column holds grade names, blank if unlabeled."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for rec in records:
            writer.writerow([
                rec.patch_path, rec.source_id, rec.x, rec.y,
                "" if rec.label is None else rec.label.name, rec.split,
            ])


def read_manifest(path: str | Path) -> list[PatchRecord]:
    """Parse a manifest CSV back into records, naming the line on any bad row."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(MANIFEST_FIELDS):
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_FIELDS):
                raise ValueError(f"{path} line {lineno}: expected "
                                 f"{len(MANIFEST_FIELDS)} fields, got {len(row)}")
            patch_path, source_id, x, y, label, split = row
            try:
                grade = None if label == "" else GradeLabel[label]
                records.append(PatchRecord(
                    patch_path=patch_path, source_id=source_id,
                    x=int(x), y=int(y), label=grade, split=split,
                ))
            except (KeyError, ValueError) as exc:
                reason = f"unknown label {label!r}" if isinstance(exc, KeyError) else exc
                raise ValueError(f"{path} line {lineno}: {reason}") from exc
    return records


def load_patches(
    records: list[PatchRecord], size: int | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Load patch files as a float32 batch (n, 3, S, S) scaled to [0, 1].

    Rasters are resized to `size` when given (the model input resolution).
    The second return value is the label vector, or None if any record is
    unlabeled.
    """
    if not records:
        raise ValueError("no records to load")
    batch = []
    for rec in records:
        raster = read_image(rec.patch_path).astype(np.float64)
        if size is not None and raster.shape[:2] != (size, size):
            raster = resize_bilinear(raster, size)
        batch.append(raster.transpose(2, 0, 1) / 255.0)
    patches = np.stack(batch).astype(np.float32)
    if any(rec.label is None for rec in records):
        return patches, None
    labels = np.array([int(rec.label) for rec in records], dtype=np.int64)
    return patches, labels
