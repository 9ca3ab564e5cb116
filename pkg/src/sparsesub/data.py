"""Datasets, mask simulation, splits and the binary file formats.

Two little-endian container formats share one record layout::

    magic        8 bytes   b"SSUBCKPT" (checkpoints) or b"SSUBDATA" (datasets)
    version      u32
    manifest     u32 length + UTF-8 text, sorted ``key=value`` lines
    n_records    u32
    record*      u32 name length, UTF-8 name, u32 rank, rank x u32 dims,
                 float32 payload
    crc32        u32 over every preceding byte
"""

from __future__ import annotations

import gzip
import logging
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    BadMagicError,
    ChecksumError,
    DataFormatError,
    DimensionMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .tensor import SeededRng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SSUBCKPT"
DATASET_MAGIC = b"SSUBDATA"
FORMAT_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# stream tags for SeededRng children
_MASK_STREAM = 11
_SPLIT_STREAM = 12
_PERMUTE_STREAM = 13
_PATCH_STREAM = 14
_ROTATE_STREAM = 15

VARIANTS = ("mnist-2", "mnist-all", "mnist-rot", "fashion")


@dataclass
class Dataset:
    """Sparse images with masks; ``images`` is zero wherever ``masks`` is zero.

    ``ground_truth`` holds the full images for evaluation, ``labels`` are only
    used to build dataset variants, and ``meta`` collects provenance strings
    that end up in container manifests.
    """

    images: np.ndarray
    masks: np.ndarray
    ground_truth: np.ndarray | None = None
    labels: np.ndarray | None = None
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.float32)
        if self.images.ndim != 3 or self.masks.shape != self.images.shape:
            raise DimensionMismatchError(f"images {self.images.shape} and masks {self.masks.shape} must be equal N x H x W")
        if self.ground_truth is not None:
            self.ground_truth = np.asarray(self.ground_truth, dtype=np.float32)
            if self.ground_truth.shape != self.images.shape:
                raise DimensionMismatchError("ground truth shape differs from images")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise DimensionMismatchError("one label per image required")

    @classmethod
    def dense(cls, images, labels=None, **meta):
        """Fully observed dataset; the images double as ground truth."""
        images = np.asarray(images, dtype=np.float32)
        return cls(images, np.ones_like(images), images.copy(), labels, meta=dict(meta))

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index, split=None):
        pick = (lambda a: None if a is None else a[index])
        return Dataset(self.images[index], self.masks[index], pick(self.ground_truth), pick(self.labels),
                       split or self.split, dict(self.meta))


# ---------------------------------------------------------------- IDX


def _read_bytes(path):
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(raw, magic, path):
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    rank = raw[3]
    header = 4 + 4 * rank
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload < expected:
        raise TruncatedFileError(f"{path}: {payload} payload bytes, header promises {expected}")
    if payload > expected:
        raise DimensionMismatchError(f"{path}: {payload - expected} bytes beyond the declared dimensions")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None):
    """Read an IDX image file (optionally gzipped) and scale intensities to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = None
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
        if len(labels) != len(images):
            raise DimensionMismatchError(f"{len(labels)} labels for {len(images)} images")
    return Dataset.dense(images.astype(np.float32) / 255.0, labels, source=str(images_path))


def write_idx(path, array, magic=IDX_IMAGES_MAGIC):
    """Write a uint8 array as an uncompressed IDX file (used for fixtures and tests)."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic)[:3] + bytes([array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# ---------------------------------------------------------------- variants


def rotate_images(images, angles):
    """Bilinear rotation about the image center with zero background."""
    out = np.empty_like(images, dtype=np.float32)
    for i, (img, angle) in enumerate(zip(images, angles)):
        out[i] = ndimage.rotate(img, float(angle), reshape=False, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def make_variant(dataset, variant, rng):
    """Derive one of the benchmark variants from a dense source dataset."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    meta = {**dataset.meta, "variant": variant}
    if variant == "mnist-2":
        if dataset.labels is None:
            raise ValueError("mnist-2 needs labels")
        out = dataset.subset(np.flatnonzero(dataset.labels == 2))
    elif variant == "mnist-rot":
        angles = rng.child(_ROTATE_STREAM).uniform(0.0, 360.0, len(dataset))
        truth = rotate_images(dataset.ground_truth, angles)
        out = Dataset(truth * dataset.masks, dataset.masks, truth, dataset.labels, dataset.split)
        meta["rotation"] = "bilinear"
    else:
        out = dataset.subset(slice(None))
    out.meta = meta
    return out


# ---------------------------------------------------------------- masks


@dataclass(frozen=True)
class MaskSpec:
    """How observation masks are simulated.

    ``random`` keeps exactly ``round((1 - sparsity) * D)`` pixels per image,
    chosen independently per image.  ``stride`` keeps the rows congruent to
    ``phase`` modulo ``period``.
    """

    kind: str = "random"
    sparsity: float = 0.0
    period: int = 1
    phase: int = 0

    def __post_init__(self):
        if self.kind == "random":
            if not 0.0 <= self.sparsity < 1.0:
                raise ValueError(f"sparsity must be in [0, 1), got {self.sparsity}")
        elif self.kind == "stride":
            if self.period < 1 or not 0 <= self.phase < self.period:
                raise ValueError(f"invalid stride period {self.period} / phase {self.phase}")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")

    @classmethod
    def parse(cls, text):
        """``random:0.9``, ``stride:6`` or ``stride:6:2``."""
        parts = text.split(":")
        try:
            if parts[0] == "random" and len(parts) == 2:
                return cls("random", float(parts[1]))
            if parts[0] == "stride" and len(parts) in (2, 3):
                return cls("stride", period=int(parts[1]), phase=int(parts[2]) if len(parts) == 3 else 0)
        except ValueError as exc:
            raise ValueError(f"bad mask spec {text!r}: {exc}") from None
        raise ValueError(f"bad mask spec {text!r}; expected random:<sparsity> or stride:<period>[:<phase>]")

    def __str__(self):
        if self.kind == "random":
            return f"random:{self.sparsity:g}"
        return f"stride:{self.period}:{self.phase}"

    def draw(self, n, shape, rng):
        h, w = shape
        if self.kind == "stride":
            row = (np.arange(h) % self.period == self.phase).astype(np.float32)
            return np.broadcast_to(row[:, None], (n, h, w)).copy()
        keep = int(round((1.0 - self.sparsity) * h * w))
        masks = np.zeros((n, h * w), dtype=np.float32)
        for i in range(n):
            masks[i, rng.permutation(h * w)[:keep]] = 1.0
        return masks.reshape(n, h, w)


def sparsify(dataset, spec, seed):
    """Hide pixels of a dataset with ground truth according to ``spec``."""
    if dataset.ground_truth is None:
        raise ValueError("sparsify needs ground truth")
    if isinstance(spec, str):
        spec = MaskSpec.parse(spec)
    masks = spec.draw(len(dataset), dataset.image_shape, SeededRng(seed, _MASK_STREAM))
    meta = {**dataset.meta, "mask": str(spec), "mask_seed": str(seed)}
    return Dataset(dataset.ground_truth * masks, masks, dataset.ground_truth, dataset.labels, dataset.split, meta)


def split(dataset, fractions=(0.5, 0.3, 0.2), seed=0):
    """Seeded shuffle followed by contiguous train/val/test cuts."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if len(fractions) != 3 or abs(fractions.sum() - 1.0) > 1e-9 or (fractions < 0).any():
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    order = SeededRng(seed, _SPLIT_STREAM).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    cuts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    parts = []
    for name, idx in zip(("train", "val", "test"), cuts):
        if len(idx) == 0:
            raise ValueError(f"{name} split is empty for N={n} and fractions {fractions.tolist()}")
        parts.append(dataset.subset(idx, split=name))
    return tuple(parts)


def permute_pixels(dataset, seed=None):
    """Apply one pixel permutation to every image, mask and ground truth.

    ``seed=None`` uses the identity.  Returns the permuted dataset and the
    flat permutation, so ``new.flat[k] == old.flat[perm[k]]``.
    """
    d = int(np.prod(dataset.image_shape))
    perm = np.arange(d) if seed is None else SeededRng(seed, _PERMUTE_STREAM).permutation(d)
    return _apply_permutation(dataset, perm), perm


def unpermute_pixels(dataset, perm):
    return _apply_permutation(dataset, np.argsort(perm))


def _apply_permutation(dataset, perm):
    n, shape = len(dataset), dataset.image_shape
    move = (lambda a: None if a is None else a.reshape(n, -1)[:, perm].reshape((n,) + shape))
    return Dataset(move(dataset.images), move(dataset.masks), move(dataset.ground_truth), dataset.labels,
                   dataset.split, dict(dataset.meta))


def extract_patches(dataset, size=64, per_image=1, seed=0):
    """Seeded random square crops; masks and ground truth are cropped alike."""
    h, w = dataset.image_shape
    if h < size or w < size:
        raise ValueError(f"images of {h}x{w} are smaller than the {size}x{size} patch")
    rng = SeededRng(seed, _PATCH_STREAM)
    rows = rng.integers(0, h - size + 1, size=(len(dataset), per_image))
    cols = rng.integers(0, w - size + 1, size=(len(dataset), per_image))
    src = np.repeat(np.arange(len(dataset)), per_image)
    r, c = rows.ravel(), cols.ravel()

    def crop(a):
        if a is None:
            return None
        return np.stack([a[i, y:y + size, x:x + size] for i, y, x in zip(src, r, c)]) if len(src) else a[:0, :size, :size]

    labels = None if dataset.labels is None else dataset.labels[src]
    return Dataset(crop(dataset.images), crop(dataset.masks), crop(dataset.ground_truth), labels,
                   dataset.split, {**dataset.meta, "patch": str(size)})


def pixel_mean(dataset_or_values, masks=None):
    """Per-pixel mean over observed entries; never-observed pixels take the global observed mean."""
    if masks is None:
        values, masks = dataset_or_values.images, dataset_or_values.masks
    else:
        values = dataset_or_values
    values = np.asarray(values, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    counts = masks.sum(axis=0)
    total = (values * masks).sum(axis=0)
    fallback = total.sum() / counts.sum() if counts.sum() > 0 else 0.0
    return np.divide(total, counts, out=np.full(total.shape, fallback), where=counts > 0).astype(np.float32)


# ---------------------------------------------------------------- containers


def _encode_manifest(manifest):
    lines = []
    for key in sorted(manifest):
        value = str(manifest[key])
        if "\n" in value or "=" in str(key) or "\n" in str(key):
            raise ValueError(f"manifest entry {key!r} cannot contain newlines or '=' in the key")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_manifest(raw):
    text = raw.decode("utf-8")
    return dict(line.split("=", 1) for line in text.split("\n") if line)


def encode_container(magic, records, manifest=None):
    """Serialize ``{name: float32 array}`` records; order is preserved as given."""
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    text = _encode_manifest(manifest or {})
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(records))]
    for name, array in records.items():
        array = np.asarray(array, dtype="<f4")
        encoded = name.encode("utf-8")
        parts += [struct.pack("<I", len(encoded)), encoded, struct.pack("<I", array.ndim),
                  struct.pack(f"<{array.ndim}I", *array.shape), array.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"need {n} bytes at offset {self.pos}, file body has {len(self.raw)}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        values = struct.unpack(f"<{count}I", self.take(4 * count))
        return values[0] if count == 1 else values


def decode_container(raw, magic):
    """Inverse of :func:`encode_container`; returns ``(records, manifest)``."""
    if len(raw) < len(magic) + 8:
        raise TruncatedFileError("file too short for a container header")
    if raw[:len(magic)] != magic:
        raise BadMagicError(f"magic {raw[:len(magic)]!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", raw[len(magic):len(magic) + 4])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this library reads {FORMAT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 trailer does not match the file contents")
    reader = _Reader(body)
    reader.take(len(magic) + 4)
    manifest = _decode_manifest(reader.take(reader.u32()))
    records = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = reader.u32(rank) if rank > 1 else ((reader.u32(),) if rank == 1 else ())
        count = int(np.prod(dims)) if dims else 1
        records[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if reader.pos != len(body):
        raise DataFormatError(f"{len(body) - reader.pos} unexpected bytes after the last record")
    return records, manifest


def checkpoint_save(params, manifest, path):
    """Write named float32 parameters plus a manifest to ``path``."""
    Path(path).write_bytes(encode_container(CHECKPOINT_MAGIC, dict(params), manifest))


def checkpoint_load(path):
    """Returns ``(params, manifest)``."""
    return decode_container(Path(path).read_bytes(), CHECKPOINT_MAGIC)


def dataset_save(dataset, path, manifest=None):
    records = {"values": dataset.images, "masks": dataset.masks}
    if dataset.ground_truth is not None:
        records["ground_truth"] = dataset.ground_truth
    if dataset.labels is not None:
        records["labels"] = dataset.labels.astype(np.float32)
    meta = {**dataset.meta, **(manifest or {}), "split": dataset.split}
    Path(path).write_bytes(encode_container(DATASET_MAGIC, records, meta))


def dataset_load(path):
    """Returns the stored :class:`Dataset`; its ``meta`` holds the manifest."""
    records, manifest = decode_container(Path(path).read_bytes(), DATASET_MAGIC)
    missing = {"values", "masks"} - set(records)
    if missing:
        raise DataFormatError(f"dataset container lacks {sorted(missing)}")
    labels = records.get("labels")
    split_name = manifest.pop("split", "all")
    return Dataset(records["values"], records["masks"], records.get("ground_truth"),
                   None if labels is None else labels.astype(np.int64), split_name, manifest)


# ---------------------------------------------------------------- image grids


def write_pgm(path, grid):
    """Binary 8-bit PGM of a [0, 1] image (values are clipped)."""
    grid = np.asarray(grid, dtype=np.float64)
    pixels = np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path):
    raw = Path(path).read_bytes()
    header = _PGM_HEADER.match(raw)
    if header is None:
        raise BadMagicError(f"{path}: not a binary PGM")
    w, h = int(header.group(1)), int(header.group(2))
    pixels = raw[header.end():]
    if len(pixels) < w * h:
        raise TruncatedFileError(f"{path}: {len(pixels)} pixel bytes for a {w}x{h} image")
    return np.frombuffer(pixels, dtype=np.uint8, count=w * h).reshape(h, w)


def tile(images, columns, pad=1, fill=1.0):
    """Arrange (N, H, W) images row-major into one grid with ``pad`` pixel borders."""
    images = np.asarray(images, dtype=np.float32)
    n, h, w = images.shape
    rows = -(-n // columns)
    grid = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad), fill, dtype=np.float32)
    for i, img in enumerate(images):
        r, c = divmod(i, columns)
        grid[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = img
    return grid

