"""MNIST IDX reader.

Layout (big endian)::

    images: u32 magic 0x00000803 | u32 count | u32 rows | u32 cols | u8 pixels...
    labels: u32 magic 0x00000801 | u32 count | u8 labels...
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class ImageStore:
    images: np.ndarray
    labels: np.ndarray
    source_digest: str

    def __len__(self):
        return self.labels.shape[0]


def _header(buf, n_fields, path):
    size = 4 * n_fields
    if len(buf) < size:
        raise FormatError("truncated header", path=path, offset=len(buf))
    return struct.unpack(">" + "I" * n_fields, buf[:size])


def _read_images(path):
    buf = Path(path).read_bytes()
    magic, count, rows, cols = _header(buf, 4, path)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}", path=path, offset=0)
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise FormatError(f"truncated pixel data: need {need} bytes", path=path, offset=len(buf))
    pix = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pix.reshape(count, rows * cols), buf


def _read_labels(path):
    buf = Path(path).read_bytes()
    magic, count = _header(buf, 2, path)
    if magic != LABEL_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x}", path=path, offset=0)
    if len(buf) < 8 + count:
        raise FormatError(f"truncated label data: need {8 + count} bytes", path=path, offset=len(buf))
    labels = np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} outside 0..9", path=path, offset=8 + int(bad[0]))
    return labels, buf


def load_idx(images_path, labels_path):
    """Read an image/label pair into an :class:`ImageStore`.

    Pixels are scaled to [0, 1] and every nonzero image is then rescaled to
    unit L2 norm; all-zero images stay zero.
    """
    pix, ibuf = _read_images(images_path)
    labels, lbuf = _read_labels(labels_path)
    if pix.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {pix.shape[0]} != label count {labels.shape[0]}", path=labels_path, offset=4
        )
    x = pix.astype(float) / 255.0
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    x.setflags(write=False)
    labels = labels.astype(np.int64)
    labels.setflags(write=False)
    digest = hashlib.sha256(ibuf + lbuf).hexdigest()
    return ImageStore(images=x, labels=labels, source_digest=digest)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (N, rows, cols) and labels (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, labels.shape[0]) + labels.tobytes())
