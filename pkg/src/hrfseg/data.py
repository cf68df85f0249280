"""Dataset ingestion and OCT preprocessing.

B-scans arrive at vendor-native geometry (Cirrus 1024x512 at 1.96x11.74 um,
Spectralis 496x512 at 3.87x11.23 um), get row-resampled to a uniform
320x512 (bilinear for intensities, nearest-neighbor for masks so they stay
binary), and are min-max normalized per OCT volume so every volume spans
exactly [0, 1]. Training patches of 128x32 are cut at uniformly random
offsets from image and mask at identical positions.

On disk: intensities as 16-bit grayscale PNG, masks as 8-bit PNG with
values {0, 255}, and a tab-separated manifest with one line per B-scan and
the column order

    patient_id  scan_id  slice_index  vendor  disease  split  image_path  mask_path

(paths relative to the manifest's directory).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger("hrfseg.data")

TARGET_ROWS, TARGET_COLS = 320, 512
PATCH_ROWS, PATCH_COLS = 128, 32

DISEASES = ("AMD", "DME", "RVO")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class VendorGeometry:
    rows: int
    cols: int
    row_um: float
    col_um: float


VENDORS = {
    "cirrus": VendorGeometry(1024, 512, 1.96, 11.74),
    "spectralis": VendorGeometry(496, 512, 3.87, 11.23),
}


@dataclass
class BScan:
    """One OCT slice: intensity image plus vendor geometry metadata."""

    pixels: np.ndarray
    vendor: str
    row_pixel_size_um: float
    col_pixel_size_um: float
    patient_id: str
    scan_id: str
    slice_index: int


@dataclass
class LabelMask:
    """Binary pixel annotation matching one BScan."""

    pixels: np.ndarray

    def __post_init__(self):
        if not np.all((self.pixels == 0) | (self.pixels == 1)):
            raise ValueError("label mask must be binary (0/1)")


@dataclass
class PatchPair:
    """A 128x32 crop of image and mask taken at the same offset."""

    x: np.ndarray
    y: np.ndarray
    patient_id: str
    scan_id: str
    slice_index: int
    row_offset: int
    col_offset: int


@dataclass
class ManifestEntry:
    patient_id: str
    scan_id: str
    slice_index: int
    vendor: str
    disease: str
    split: str
    image_path: str
    mask_path: str


@dataclass
class DatasetManifest:
    """Patient-keyed scan index; the unit of splitting is the patient."""

    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def for_split(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split])

    def for_vendors(self, vendors: str) -> "DatasetManifest":
        if vendors == "both":
            return DatasetManifest(list(self.entries))
        if vendors not in VENDORS:
            raise ValueError(f"unknown vendor selector {vendors!r}")
        return DatasetManifest([e for e in self.entries if e.vendor == vendors])

    def patients(self) -> list:
        return sorted({e.patient_id for e in self.entries})

    def scan_keys(self) -> list:
        return sorted({(e.patient_id, e.scan_id) for e in self.entries})


MANIFEST_FIELDS = (
    "patient_id",
    "scan_id",
    "slice_index",
    "vendor",
    "disease",
    "split",
    "image_path",
    "mask_path",
)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(MANIFEST_FIELDS)
        for e in manifest.entries:
            writer.writerow([getattr(e, f) for f in MANIFEST_FIELDS])
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            raise ValueError(f"{path} is not a manifest (header {reader.fieldnames})")
        for row in reader:
            row["slice_index"] = int(row["slice_index"])
            entries.append(ManifestEntry(**row))
    return DatasetManifest(entries)


# -- PNG persistence --------------------------------------------------------


def write_image_png(pixels: np.ndarray, path) -> Path:
    """Store a [0,1] float image as 16-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    Image.fromarray((arr * 65535.0).round().astype(np.uint16)).save(path)
    return path


def read_image_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 65535.0


def write_mask_png(pixels: np.ndarray, path) -> Path:
    """Store a binary mask as 8-bit PNG with values {0, 255}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(pixels)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask must be binary (0/1)")
    Image.fromarray((arr * 255).astype(np.uint8)).save(path)
    return path


def read_mask_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask not found: {path}")
    arr = np.asarray(Image.open(path))
    return (arr >= 128).astype(np.uint8)


def load_entry(entry: ManifestEntry, root) -> tuple:
    """Read one manifest entry into a native-resolution (BScan, LabelMask)."""
    root = Path(root)
    geom = VENDORS[entry.vendor]
    pixels = read_image_png(root / entry.image_path)
    mask = read_mask_png(root / entry.mask_path)
    scan = BScan(
        pixels=pixels,
        vendor=entry.vendor,
        row_pixel_size_um=geom.row_um,
        col_pixel_size_um=geom.col_um,
        patient_id=entry.patient_id,
        scan_id=entry.scan_id,
        slice_index=entry.slice_index,
    )
    return scan, LabelMask(mask)


# -- preprocessing -----------------------------------------------------------


def rescale_bscan(scan: BScan, mask: LabelMask) -> tuple:
    """Resample rows to the uniform 320x512 grid.

    Intensities are interpolated bilinearly (linear along rows; columns are
    already 512), masks by nearest neighbor. The recorded row pixel size
    grows by the native/target row ratio.
    """
    geom = VENDORS.get(scan.vendor)
    if geom is None:
        raise ValueError(f"unknown vendor {scan.vendor!r}")
    if scan.pixels.shape != (geom.rows, geom.cols):
        raise ValueError(
            f"{scan.vendor} scans are {geom.rows}x{geom.cols}, got {scan.pixels.shape}"
        )
    if mask.pixels.shape != scan.pixels.shape:
        raise ValueError("mask shape does not match scan shape")

    ratio = geom.rows / TARGET_ROWS
    src = (np.arange(TARGET_ROWS) + 0.5) * ratio - 0.5
    src = np.clip(src, 0.0, geom.rows - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, geom.rows - 1)
    frac = (src - lo)[:, None]
    img_lo = scan.pixels[lo, :]
    # a + f*(b-a) keeps constant images exactly constant
    img = img_lo + frac * (scan.pixels[hi, :] - img_lo)
    nearest = np.clip(np.round(src).astype(int), 0, geom.rows - 1)
    new_mask = mask.pixels[nearest, :]

    new_scan = replace(
        scan,
        pixels=img,
        row_pixel_size_um=geom.rows * geom.row_um / TARGET_ROWS,
    )
    return new_scan, LabelMask(new_mask)


def normalize_scan(scans) -> list:
    """Min-max normalize all B-scans of one OCT volume to [0, 1].

    The extrema are taken over the whole volume, so the volume minimum maps
    to exactly 0 and the maximum to exactly 1. A constant volume maps to
    all zeros (logged, degenerate input).
    """
    scans = list(scans)
    if not scans:
        raise ValueError("normalize_scan needs at least one B-scan")
    lo = min(float(s.pixels.min()) for s in scans)
    hi = max(float(s.pixels.max()) for s in scans)
    if hi == lo:
        logger.warning(
            "constant volume (patient %s scan %s): normalizing to zeros",
            scans[0].patient_id,
            scans[0].scan_id,
        )
        return [replace(s, pixels=np.zeros_like(s.pixels)) for s in scans]
    span = hi - lo
    return [replace(s, pixels=(s.pixels - lo) / span) for s in scans]


def sample_patches(scan: BScan, mask: LabelMask, k: int, rng, fg_bias: float = 0.0) -> list:
    """Cut ``k`` 128x32 patch pairs at uniformly random offsets.

    ``rng`` is a seed or a numpy Generator. ``fg_bias`` is the probability
    of retrying an offset (up to 500 times) until the mask crop contains a
    positive pixel; the default 0 keeps sampling fully uniform.
    """
    if k < 0:
        raise ValueError(f"patch count must be non-negative, got {k}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    rows, cols = scan.pixels.shape
    if rows < PATCH_ROWS or cols < PATCH_COLS:
        raise ValueError(
            f"image {rows}x{cols} cannot hold a {PATCH_ROWS}x{PATCH_COLS} patch"
        )
    max_r = rows - PATCH_ROWS
    max_c = cols - PATCH_COLS
    patches = []
    for _ in range(k):
        r = int(rng.integers(0, max_r + 1))
        c = int(rng.integers(0, max_c + 1))
        if fg_bias > 0.0 and rng.random() < fg_bias:
            for _ in range(500):
                if mask.pixels[r : r + PATCH_ROWS, c : c + PATCH_COLS].any():
                    break
                r = int(rng.integers(0, max_r + 1))
                c = int(rng.integers(0, max_c + 1))
        patches.append(
            PatchPair(
                x=scan.pixels[r : r + PATCH_ROWS, c : c + PATCH_COLS].copy(),
                y=mask.pixels[r : r + PATCH_ROWS, c : c + PATCH_COLS].copy(),
                patient_id=scan.patient_id,
                scan_id=scan.scan_id,
                slice_index=scan.slice_index,
                row_offset=r,
                col_offset=c,
            )
        )
    return patches


def filter_annotated(manifest: DatasetManifest, root) -> DatasetManifest:
    """Keep only entries whose mask contains at least one positive pixel."""
    root = Path(root)
    kept = []
    for entry in manifest.entries:
        if read_mask_png(root / entry.mask_path).any():
            kept.append(entry)
    return DatasetManifest(kept)


def split_by_patient(manifest: DatasetManifest, fractions, rng) -> DatasetManifest:
    """Assign train/val/test splits so each patient lands in exactly one.

    ``fractions`` are the (train, val, test) shares of OCT scans; patients
    are shuffled deterministically and assigned greedily until each split
    reaches its scan quota.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLITS):
        raise ValueError(f"need {len(SPLITS)} fractions, got {len(fractions)}")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng

    by_patient = {}
    for entry in manifest.entries:
        by_patient.setdefault(entry.patient_id, set()).add((entry.patient_id, entry.scan_id))
    patients = sorted(by_patient)
    n_needed = sum(1 for f in fractions if f > 0)
    if len(patients) < n_needed:
        raise ValueError(f"{len(patients)} patients cannot fill {n_needed} non-empty splits")
    order = list(rng.permutation(patients))

    total_scans = len(manifest.scan_keys())
    raw = np.array(fractions) * total_scans
    targets = np.floor(raw).astype(int)
    remainders = raw - targets
    for _ in range(total_scans - int(targets.sum())):
        idx = int(np.argmax(remainders))
        targets[idx] += 1
        remainders[idx] = -1.0
    # every non-empty split owes at least one scan
    for i, f in enumerate(fractions):
        if f > 0 and targets[i] == 0:
            targets[i] = 1
            targets[int(np.argmax(targets))] -= 1

    assignment = {}
    assigned = np.zeros(len(SPLITS), dtype=int)
    deficits = targets.astype(float)
    deficits[np.array(fractions) == 0] = -np.inf
    for patient in order:
        idx = int(np.argmax(deficits))
        assignment[patient] = SPLITS[idx]
        assigned[idx] += len(by_patient[patient])
        if np.isfinite(deficits[idx]):
            deficits[idx] = targets[idx] - assigned[idx]

    entries = [replace(e, split=assignment[e.patient_id]) for e in manifest.entries]
    return DatasetManifest(entries)
