"""Synthetic OCT-like phantoms with exact ground-truth masks.

Stands in for clinical data: each image is a smooth layered background
(dark vitreous, a mid-gray retinal band with undulating boundaries, a
bright membrane stripe at the band's lower edge) plus mild Gaussian
noise, with bright circular foci painted inside the retinal band. The
mask is the exact rasterized support of the painted foci: pixel (y, x)
belongs to a focus at integer center (cy, cx) with radius r iff
(y-cy)^2 + (x-cx)^2 <= r^2. Everything is driven by one seeded generator,
so identical parameters reproduce the dataset bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    VENDORS,
    BScan,
    DatasetManifest,
    DISEASES,
    LabelMask,
    ManifestEntry,
    write_image_png,
    write_manifest,
    write_mask_png,
)

BACKGROUND_MODELS = ("layered", "flat")


@dataclass(frozen=True)
class PhantomParams:
    n_images: int = 20
    foci_per_image: object = (1, 8)  # exact count, or inclusive (lo, hi) range
    radius_range: tuple = (2.0, 6.0)
    background: str = "layered"
    vendor: str = "both"
    slices_per_scan: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_images <= 0:
            raise ValueError("n_images must be positive")
        if self.slices_per_scan <= 0:
            raise ValueError("slices_per_scan must be positive")
        if self.background not in BACKGROUND_MODELS:
            raise ValueError(f"unknown background model {self.background!r}")
        if self.vendor not in ("both",) and self.vendor not in VENDORS:
            raise ValueError(f"unknown vendor {self.vendor!r}")
        lo, hi = self.radius_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"bad radius range {self.radius_range}")
        counts = self.foci_count_range
        if counts[0] < 0 or counts[1] < counts[0]:
            raise ValueError(f"bad foci count {self.foci_per_image!r}")

    @property
    def foci_count_range(self) -> tuple:
        if isinstance(self.foci_per_image, int):
            return (self.foci_per_image, self.foci_per_image)
        lo, hi = self.foci_per_image
        return (int(lo), int(hi))


@dataclass
class PhantomDataset:
    scans: list  # [(BScan, LabelMask), ...]
    manifest: DatasetManifest


def _layered_background(rows, cols, rng):
    y = (np.arange(rows, dtype=np.float64) / rows)[:, None]
    x = np.arange(cols, dtype=np.float64) / cols
    phase1, phase2 = rng.uniform(0, 2 * np.pi, size=2)
    top = 0.30 + 0.04 * np.sin(2 * np.pi * (1.5 * x) + phase1)
    bottom = top + 0.36 + 0.02 * np.sin(2 * np.pi * (2.5 * x) + phase2)
    sharp = 80.0
    band = 1.0 / (1.0 + np.exp(-sharp * (y - top))) - 1.0 / (1.0 + np.exp(-sharp * (y - bottom)))
    stripe = np.exp(-((y - bottom) / 0.012) ** 2)
    img = 0.06 + 0.24 * band + 0.62 * stripe
    return img, top, bottom


def _flat_background(rows, cols, rng):
    img = np.full((rows, cols), 0.12, dtype=np.float64)
    top = np.full(cols, 0.2)
    bottom = np.full(cols, 0.8)
    return img, top, bottom


def _paint_focus(img, mask, cy, cx, radius, intensity):
    r_int = int(np.ceil(radius))
    ys = np.arange(cy - r_int, cy + r_int + 1)
    xs = np.arange(cx - r_int, cx + r_int + 1)
    dy2 = (ys - cy)[:, None] ** 2
    dx2 = (xs - cx)[None, :] ** 2
    inside = dy2 + dx2 <= radius * radius
    # gentle radial falloff, but strictly brighter than the background stripe
    patch = intensity * (1.0 - 0.12 * (dy2 + dx2) / max(radius * radius, 1.0))
    region = (slice(cy - r_int, cy + r_int + 1), slice(cx - r_int, cx + r_int + 1))
    img[region] = np.where(inside, np.maximum(img[region], patch), img[region])
    mask[region] |= inside


def generate_phantom(params: PhantomParams) -> PhantomDataset:
    """Produce native-resolution B-scans, exact masks and a manifest.

    Image count, foci statistics, vendor mix and background model come
    from ``params``; the manifest references the relative paths that
    ``write_phantom`` will create and starts with every entry in the
    train split (use ``split_by_patient`` to assign real splits).
    """
    rng = np.random.default_rng(params.seed)
    count_lo, count_hi = params.foci_count_range
    r_lo, r_hi = params.radius_range

    scans = []
    entries = []
    image_idx = 0
    patient_idx = 0
    while image_idx < params.n_images:
        patient_id = f"P{patient_idx:04d}"
        scan_id = f"S{patient_idx:04d}"
        vendor = params.vendor
        if vendor == "both":
            vendor = "cirrus" if patient_idx % 2 == 0 else "spectralis"
        disease = DISEASES[patient_idx % len(DISEASES)]
        geom = VENDORS[vendor]
        margin = int(np.ceil(r_hi)) + 1
        if 2 * margin + 2 >= min(geom.rows, geom.cols):
            raise ValueError(
                f"foci of radius {r_hi} do not fit a {geom.rows}x{geom.cols} {vendor} scan"
            )
        n_slices = min(params.slices_per_scan, params.n_images - image_idx)
        for slice_index in range(n_slices):
            if params.background == "layered":
                img, top, bottom = _layered_background(geom.rows, geom.cols, rng)
            else:
                img, top, bottom = _flat_background(geom.rows, geom.cols, rng)
            noise = rng.normal(0.0, 0.015, size=img.shape)
            img = np.clip(img + noise, 0.0, 1.0)
            mask = np.zeros(img.shape, dtype=bool)
            n_foci = int(rng.integers(count_lo, count_hi + 1)) if count_hi > count_lo else count_lo
            for _ in range(n_foci):
                cx = int(rng.integers(margin, geom.cols - margin))
                lo_row = int(top[cx] * geom.rows) + margin
                hi_row = int(bottom[cx] * geom.rows) - margin
                lo_row = max(lo_row, margin)
                hi_row = min(hi_row, geom.rows - margin - 1)
                if hi_row <= lo_row:
                    lo_row, hi_row = margin, geom.rows - margin - 1
                cy = int(rng.integers(lo_row, hi_row + 1))
                radius = float(rng.uniform(r_lo, r_hi))
                intensity = float(rng.uniform(0.88, 0.98))
                _paint_focus(img, mask, cy, cx, radius, intensity)
            scan = BScan(
                pixels=img,
                vendor=vendor,
                row_pixel_size_um=geom.row_um,
                col_pixel_size_um=geom.col_um,
                patient_id=patient_id,
                scan_id=scan_id,
                slice_index=slice_index,
            )
            stem = f"{patient_id}_{scan_id}_{slice_index:03d}"
            entries.append(
                ManifestEntry(
                    patient_id=patient_id,
                    scan_id=scan_id,
                    slice_index=slice_index,
                    vendor=vendor,
                    disease=disease,
                    split="train",
                    image_path=f"images/{stem}.png",
                    mask_path=f"masks/{stem}.png",
                )
            )
            scans.append((scan, LabelMask(mask.astype(np.uint8))))
            image_idx += 1
        patient_idx += 1
    return PhantomDataset(scans=scans, manifest=DatasetManifest(entries))


def write_phantom(dataset: PhantomDataset, out_dir) -> Path:
    """Write PNGs and the manifest under ``out_dir``; returns manifest path."""
    out_dir = Path(out_dir)
    for (scan, mask), entry in zip(dataset.scans, dataset.manifest.entries):
        write_image_png(scan.pixels, out_dir / entry.image_path)
        write_mask_png(mask.pixels, out_dir / entry.mask_path)
    return write_manifest(dataset.manifest, out_dir / "manifest.tsv")
