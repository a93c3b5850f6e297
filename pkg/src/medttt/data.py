"""Netpbm I/O, dataset manifests, batching and the synthetic lesion generator."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ("id", "image", "mask", "split")


class NetpbmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(NetpbmError):
    pass


class DataError(ValueError):
    pass


class TilingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------


def _header_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers after the magic number.

    Returns the values and the offset of the payload (one whitespace byte
    after the last token).
    """
    pos = 2
    vals: list[int] = []
    n = len(buf)
    while len(vals) < count:
        if pos >= n:
            raise NetpbmError("truncated header", pos)
        c = buf[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isdigit():
            start = pos
            while pos < n and buf[pos : pos + 1].isdigit():
                pos += 1
            vals.append(int(buf[start:pos]))
        else:
            raise NetpbmError(f"unexpected byte {c!r} in header", pos)
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise NetpbmError("missing whitespace after header", pos)
    return vals, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Binary P5 -> ``H x W``; binary P6 -> ``3 x H x W``; values scaled to [0, 1]."""
    if len(buf) < 2:
        raise NetpbmError("truncated magic number", len(buf))
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"unsupported magic {magic!r}; only binary P5/P6", 0)
    (width, height, maxval), off = _header_tokens(buf, 3)
    if width <= 0 or height <= 0:
        raise NetpbmError(f"invalid extents {width}x{height}", off)
    if maxval != 255:
        raise UnsupportedFormatError(f"maxval {maxval} unsupported; only 255", off)
    chans = 1 if magic == b"P5" else 3
    need = width * height * chans
    payload = buf[off:]
    if len(payload) < need:
        raise NetpbmError(f"truncated payload: need {need} bytes, have {len(payload)}", off + len(payload))
    arr = np.frombuffer(payload[:need], dtype=np.uint8).astype(np.float64) / 255.0
    if chans == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1).copy()


def load_pgm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def quantize(plane) -> np.ndarray:
    """8-bit codes, rounding half up."""
    arr = np.asarray(plane, dtype=np.float64)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_pnm(plane) -> bytes:
    arr = np.asarray(plane, dtype=np.float64)
    if arr.ndim == 2:
        h, w = arr.shape
        return b"P5\n%d %d\n255\n" % (w, h) + quantize(arr).tobytes()
    if arr.ndim == 3 and arr.shape[0] == 3:
        _, h, w = arr.shape
        return b"P6\n%d %d\n255\n" % (w, h) + quantize(arr.transpose(1, 2, 0)).tobytes()
    raise ValueError(f"expected H x W or 3 x H x W plane, got {arr.shape}")


def save_pgm(plane, path) -> None:
    Path(path).write_bytes(encode_pnm(plane))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    id: str
    image: str
    mask: str
    split: str


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    root: Path

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def write(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in self.rows:
            w.writerow((r.id, r.image, r.mask, r.split))
        Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        rows = [ManifestRow(*row) for row in reader if row]
    seen: set[str] = set()
    for r in rows:
        if r.id in seen:
            raise DataError(f"{path}: duplicate id {r.id!r}")
        seen.add(r.id)
        if r.split not in SPLITS:
            raise DataError(f"{path}: row {r.id!r} has unknown split {r.split!r}")
        if check_files:
            for p in (r.image, r.mask):
                if not (path.parent / p).is_file():
                    raise DataError(f"{path}: row {r.id!r} references missing file {p}")
    return DatasetManifest(rows, path.parent)


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to ``ratios``."""
    total = float(sum(ratios))
    quotas = [n * r / total for r in ratios]
    sizes = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


# ---------------------------------------------------------------------------
# samples and batches
# ---------------------------------------------------------------------------


@dataclass
class SegmentationSample:
    image: np.ndarray  # C x H x W in [0, 1]
    mask: np.ndarray  # H x W in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} extents differ")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise DataError(f"{self.id}: mask is not binary")


def load_sample(manifest: DatasetManifest, row: ManifestRow) -> SegmentationSample:
    image = load_pgm(manifest.root / row.image)
    mask = (load_pgm(manifest.root / row.mask) >= 0.5).astype(np.float64)
    return SegmentationSample(image, mask, row.id)


def load_split(manifest: DatasetManifest, split: str) -> list[SegmentationSample]:
    rows = manifest.split(split)
    if not rows:
        raise DataError(f"split {split!r} is empty")
    return [load_sample(manifest, r) for r in rows]


def flip_sample(image: np.ndarray, mask: np.ndarray, horizontal: bool, vertical: bool):
    if horizontal:
        image, mask = image[..., ::-1], mask[..., ::-1]
    if vertical:
        image, mask = image[..., ::-1, :], mask[..., ::-1, :]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def batches(
    samples: Sequence[SegmentationSample],
    batch_size: int,
    seed: int,
    epoch: int = 0,
    augment: str = "none",
    shuffle: bool = True,
) -> Iterator[tuple[np.ndarray, np.ndarray, list[str]]]:
    """Yield ``(images B x C x H x W, masks B x H x W, ids)``.

    The order is a function of ``(seed, epoch)`` only.
    """
    if not samples:
        raise DataError("cannot batch an empty split")
    if augment not in ("none", "flips"):
        raise DataError(f"augment must be 'none' or 'flips', got {augment!r}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        imgs, masks = [], []
        for i in idx:
            s = samples[int(i)]
            img, msk = s.image, s.mask
            if augment == "flips":
                h, v = rng.random(2) < 0.5
                img, msk = flip_sample(img, msk, bool(h), bool(v))
            imgs.append(img)
            masks.append(msk)
        yield np.stack(imgs), np.stack(masks), [samples[int(i)].id for i in idx]


# ---------------------------------------------------------------------------
# synthetic lesions
# ---------------------------------------------------------------------------

FG_RANGE = (0.02, 0.5)


def synth_sample(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One noisy grayscale image with 1-3 elliptical lesions and its exact mask."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    while True:
        image = 0.3 + rng.normal(0.0, 0.1, (size, size))
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.15 * size, 0.85 * size, 2)
            ay, ax = rng.uniform(0.08 * size, 0.25 * size, 2)
            theta = rng.uniform(0.0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(theta) + dy * np.sin(theta)
            v = -dx * np.sin(theta) + dy * np.cos(theta)
            inside = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
            level = 0.7 + rng.uniform(-0.1, 0.1)
            lesion = np.full((size, size), level)
            if rng.random() < 0.5:
                # fine stripe texture inside the lesion
                period = rng.uniform(2.0, 4.0)
                phi = rng.uniform(0.0, np.pi)
                lesion += 0.08 * np.sin(2 * np.pi * (xx * np.cos(phi) + yy * np.sin(phi)) / period)
            image = np.where(inside, lesion + rng.normal(0.0, 0.1, (size, size)), image)
            mask |= inside
        frac = mask.mean()
        if FG_RANGE[0] <= frac <= FG_RANGE[1]:
            return np.clip(image, 0.0, 1.0), mask.astype(np.float64)


def synth_dataset(
    n: int,
    size: int,
    seed: int,
    out_dir,
    tile: int = 4,
    ratios: Sequence[float] = (0.8, 0.2, 0.0),
) -> Path:
    """Write ``n`` image/mask P5 pairs plus ``manifest.csv``; returns the manifest path."""
    if n <= 0:
        raise DataError(f"n must be positive, got {n}")
    if size <= 0 or size % (4 * tile):
        raise TilingError(f"size {size} must be a positive multiple of 4*K = {4 * tile}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sizes = split_sizes(n, ratios)
    labels = [s for s, k in zip(SPLITS, sizes) for _ in range(k)]
    rows = []
    for i in range(n):
        image, mask = synth_sample(size, rng)
        sid = f"synth_{i:04d}"
        img_rel, msk_rel = f"images/{sid}.pgm", f"masks/{sid}.pgm"
        save_pgm(image, out / img_rel)
        save_pgm(mask, out / msk_rel)
        rows.append(ManifestRow(sid, img_rel, msk_rel, labels[i]))
    manifest_path = out / "manifest.csv"
    DatasetManifest(rows, out).write(manifest_path)
    return manifest_path


def is_writable_dir(path) -> bool:
    p = Path(path)
    while not p.exists():
        p = p.parent
    return os.access(p, os.W_OK)
