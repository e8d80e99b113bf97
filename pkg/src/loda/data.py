"""Synthetic distortion datasets, raster files and manifests.

Images are stored as binary PPM (``P6``): the ASCII header
``P6\\n<width> <height>\\n255\\n`` followed by width*height RGB triplets, one
unsigned byte per channel, rows top to bottom.  The format is uncompressed,
so the bytes depend only on pixel values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import ConfigError, InputError, ManifestError

BASE_FAMILIES = ("gaussian_field", "checker", "gradient_mix")
DISTORTIONS = ("blur", "additive_noise", "block_average")


@dataclass(frozen=True)
class SyntheticSpec:
    """Grid of (distortion, severity, replicate) cells; base family cycles per image."""

    image_size: int = 64
    bases: tuple[str, ...] = BASE_FAMILIES
    distortions: tuple[str, ...] = ("blur", "additive_noise")
    severities: tuple[float, ...] = tuple(float(s) for s in np.linspace(0.0, 4.0, 32))
    images_per_cell: int = 1
    mos_max: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "bases", tuple(self.bases))
        object.__setattr__(self, "distortions", tuple(self.distortions))
        object.__setattr__(self, "severities", tuple(float(s) for s in self.severities))
        unknown = set(self.bases) - set(BASE_FAMILIES) | set(self.distortions) - set(DISTORTIONS)
        if unknown:
            raise ConfigError(f"unknown base/distortion families: {sorted(unknown)}")
        if not self.bases or not self.distortions or not self.severities:
            raise ConfigError("bases, distortions and severities must be non-empty")
        if any(s < 0 for s in self.severities):
            raise ConfigError("severities must be >= 0")
        if self.image_size < 4 or self.images_per_cell < 1:
            raise ConfigError("image_size >= 4 and images_per_cell >= 1 required")

    def mos(self, severity: float) -> float:
        return self.mos_max / (1.0 + severity)

    def cells(self) -> list[tuple[str, float, int]]:
        return [(d, s, k) for d in self.distortions for s in self.severities for k in range(self.images_per_cell)]

    def __len__(self) -> int:
        return len(self.distortions) * len(self.severities) * self.images_per_cell


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, 3, H, W) in [0, 1]
    labels: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise InputError(f"images must be (n, 3, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.size:
            raise InputError(f"{self.images.shape[0]} images vs {self.labels.size} labels")

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=int)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return ImageDataset(self.images[idx], self.labels[idx], paths)


# base images -----------------------------------------------------------------


def base_image(family: str, size: int, gen: np.random.Generator) -> np.ndarray:
    """Pristine (3, size, size) image in [0, 1]."""
    if family == "gaussian_field":
        noise = gen.normal(size=(3, size, size))
        field_ = np.stack([gaussian_filter(ch, sigma=size / 16.0, mode="wrap") for ch in noise])
        field_ = (field_ - field_.min()) / (np.ptp(field_) + 1e-12)
        return 0.1 + 0.8 * field_
    if family == "checker":
        cell = int(gen.integers(4, max(5, size // 4) + 1))
        oy, ox = gen.integers(0, cell, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        mask = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
        c0, c1 = gen.uniform(0.1, 0.45, size=3), gen.uniform(0.55, 0.9, size=3)
        return c0[:, None, None] + (c1 - c0)[:, None, None] * mask[None]
    if family == "gradient_mix":
        yy, xx = np.mgrid[0:size, 0:size] / size
        img = np.empty((3, size, size))
        for ch in range(3):
            theta = gen.uniform(0, 2 * np.pi)
            freq = gen.uniform(1.0, 4.0)
            ramp = np.cos(theta) * xx + np.sin(theta) * yy
            wave = np.sin(2 * np.pi * freq * (np.sin(theta) * xx - np.cos(theta) * yy) + gen.uniform(0, 2 * np.pi))
            img[ch] = 0.6 * ramp + 0.4 * (0.5 + 0.5 * wave)
        img = (img - img.min()) / (np.ptp(img) + 1e-12)
        return 0.1 + 0.8 * img
    raise ConfigError(f"unknown base family {family!r}")


def distort(image: np.ndarray, kind: str, severity: float, gen: np.random.Generator) -> np.ndarray:
    """Apply one distortion; severity 0 returns the image unchanged.

    blur: Gaussian sigma = severity px; additive_noise: sigma = 0.05 * severity;
    block_average: block edge = 1 + round(2 * severity) px.
    """
    if severity == 0:
        return image.copy()
    if kind == "blur":
        out = np.stack([gaussian_filter(ch, sigma=severity, mode="reflect") for ch in image])
    elif kind == "additive_noise":
        out = image + gen.normal(0.0, 0.05 * severity, size=image.shape)
    elif kind == "block_average":
        block = 1 + int(round(2 * severity))
        c, h, w = image.shape
        out = np.empty_like(image)
        for y0 in range(0, h, block):
            for x0 in range(0, w, block):
                tile = image[:, y0:y0 + block, x0:x0 + block]
                out[:, y0:y0 + block, x0:x0 + block] = tile.mean(axis=(1, 2), keepdims=True)
    else:
        raise ConfigError(f"unknown distortion {kind!r}")
    return np.clip(out, 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def synthesize(spec: SyntheticSpec, seed: int) -> tuple[list[np.ndarray], list[float], list[str]]:
    """All images of ``spec`` as uint8 (3, S, S) arrays with labels and names."""
    images, labels, names = [], [], []
    for idx, (kind, sev, rep) in enumerate(spec.cells()):
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), idx])))
        base = spec.bases[idx % len(spec.bases)]
        img = distort(base_image(base, spec.image_size, gen), kind, sev, gen)
        images.append(to_uint8(img))
        labels.append(spec.mos(sev))
        names.append(f"img{idx:05d}_{base}_{kind}_s{sev:.4f}_r{rep}.ppm")
    return images, labels, names


# raster io -------------------------------------------------------------------


def write_ppm(path, image_u8: np.ndarray) -> None:
    """Write a (3, H, W) uint8 array."""
    arr = np.asarray(image_u8, dtype=np.uint8)
    c, h, w = arr.shape
    if c != 3:
        raise InputError(f"PPM needs 3 channels, got {c}")
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) uint8 array."""
    buf = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated PPM header")
        fields.append(buf[start:pos])
    pos += 1
    if fields[0] != b"P6" or fields[3] != b"255":
        raise InputError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=pos) if len(buf) - pos >= 3 * w * h else None
    if data is None:
        raise InputError(f"{path}: pixel data truncated")
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


# manifests -------------------------------------------------------------------


@dataclass
class Manifest:
    paths: list[str]
    mos: list[float]
    splits: list[str] | None = None

    def __post_init__(self):
        if len(self.paths) != len(self.mos) or (self.splits is not None and len(self.splits) != len(self.paths)):
            raise ManifestError("manifest columns have different lengths")
        seen = set()
        for p in self.paths:
            if p in seen:
                raise ManifestError(f"duplicate path {p!r}")
            seen.add(p)
        for p, m in zip(self.paths, self.mos):
            if not math.isfinite(m):
                raise ManifestError(f"non-finite MOS for {p!r}")

    def __len__(self) -> int:
        return len(self.paths)


def write_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["path", "mos"] + (["split"] if manifest.splits is not None else [])
        w.writerow(header)
        for i, (p, m) in enumerate(zip(manifest.paths, manifest.mos)):
            row = [p, repr(float(m))]
            if manifest.splits is not None:
                row.append(manifest.splits[i])
            w.writerow(row)


def read_manifest(path) -> Manifest:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty manifest, header row required")
    header = [h.strip() for h in rows[0]]
    if "path" not in header or "mos" not in header:
        raise ManifestError(f"{path}: line 1: header must contain 'path' and 'mos', got {header}")
    ip, im = header.index("path"), header.index("mos")
    isplit = header.index("split") if "split" in header else None
    paths, mos, splits = [], [], []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ManifestError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        p = row[ip]
        try:
            m = float(row[im])
        except ValueError:
            raise ManifestError(f"{path}: line {lineno}: MOS {row[im]!r} is not a number") from None
        if not math.isfinite(m):
            raise ManifestError(f"{path}: line {lineno}: non-finite MOS")
        if p in seen:
            raise ManifestError(f"{path}: line {lineno}: duplicate path {p!r}")
        seen.add(p)
        paths.append(p)
        mos.append(m)
        if isplit is not None:
            splits.append(row[isplit])
    return Manifest(paths, mos, splits if isplit is not None else None)


def generate_dataset(spec: SyntheticSpec, seed: int, out_dir) -> Manifest:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        images, labels, names = synthesize(spec, seed)
        for img, name in zip(images, names):
            write_ppm(out / name, img)
        manifest = Manifest(names, labels)
        write_manifest(manifest, out / "manifest.csv")
    except OSError as exc:
        raise InputError(f"cannot write dataset to {out}: {exc}") from exc
    return manifest


def load_dataset(manifest_path) -> ImageDataset:
    """Read every image listed in a manifest; paths are relative to its folder."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.csv"
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    images = [read_ppm(root / p).astype(np.float64) / 255.0 for p in manifest.paths]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise InputError(f"images in {manifest_path} have differing shapes {sorted(shapes)}")
    return ImageDataset(np.stack(images), np.asarray(manifest.mos), list(manifest.paths))


def dataset_from_spec(spec: SyntheticSpec, seed: int) -> ImageDataset:
    """In-memory equivalent of ``generate_dataset`` followed by ``load_dataset``."""
    images, labels, names = synthesize(spec, seed)
    return ImageDataset(np.stack(images).astype(np.float64) / 255.0, np.asarray(labels), names)


def split_indices(n: int, seeds: Sequence[int], train_fraction: float = 0.8) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random train/test partitions of range(n), one per seed."""
    out = []
    n_train = int(round(train_fraction * n))
    if not 0 < n_train < n:
        raise ConfigError(f"train fraction {train_fraction} leaves an empty side for n={n}")
    for s in seeds:
        perm = np.random.Generator(np.random.PCG64(int(s))).permutation(n)
        out.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return out
