"""Datasets: IDX (MNIST format) files and procedurally drawn shapes with bounding boxes."""

import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SHAPES = ("circle", "square", "triangle")


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) in [0, 1]
    label: int
    box: tuple | None = None  # (row0, col0, row1, col1), inclusive

    def __post_init__(self):
        if self.box is not None:
            r0, c0, r1, c1 = self.box
            H, W = self.pixels.shape[-2:]
            if not (0 <= r0 <= r1 < H and 0 <= c0 <= c1 < W):
                raise ValueError(f"box {self.box} outside {H}x{W} image")


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W)
    labels: np.ndarray  # (n,)
    boxes: np.ndarray | None = None  # (n, 4) inclusive boxes of the labelled object
    other_boxes: np.ndarray | None = None  # second object in two-object mode
    other_labels: np.ndarray | None = None
    name: str = "dataset"

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        box = None if self.boxes is None else tuple(int(v) for v in self.boxes[i])
        return LabeledImage(self.images[i], int(self.labels[i]), box)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx):
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.images[idx], self.labels[idx], pick(self.boxes), pick(self.other_boxes),
                       pick(self.other_labels), self.name)

    def split(self, n_first):
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


# ---------------------------------------------------------------- IDX


def _read_idx(path, magic, what):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise IdxFormatError(f"{what} file {path} is truncated (no header)")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IdxFormatError(f"{what} file {path}: expected magic 0x{magic:08x}, found 0x{found:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError(f"{what} file {path} is truncated (dimensions)")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    body = buf[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise IdxFormatError(f"{what} file {path} is truncated: need {need} bytes, have {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path):
    """Big-endian IDX image/label pair; pixels scaled to [0, 1]."""
    imgs = _read_idx(images_path, IMAGE_MAGIC, "image")
    labels = _read_idx(labels_path, LABEL_MAGIC, "label")
    if imgs.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {imgs.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(imgs[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), name="idx")


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images (n, H, W) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IMAGE_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", LABEL_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------- synthetic shapes


def _draw(kind, cy, cx, r, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # upright triangle: apex at cy - r, base at cy + r
    t = (yy - (cy - r)) / (2 * r)
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * r)


def _bbox(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def _place(rng, kind, rmin, rmax, size, avoid=None):
    for _ in range(200):
        r = rng.uniform(rmin, rmax)
        cy = rng.uniform(r + 0.5, size - 1.5 - r)
        cx = rng.uniform(r + 0.5, size - 1.5 - r)
        mask = _draw(kind, cy, cx, r, size)
        if not mask.any():
            continue
        box = _bbox(mask)
        if avoid is not None:
            a = avoid
            gap = 1
            if not (box[2] + gap < a[0] or a[2] + gap < box[0] or box[3] + gap < a[1] or a[3] + gap < box[1]):
                continue
        return mask, box
    return None


def synth_shapes(n, seed=0, two_object=False, size=28, classes=SHAPES,
                 primary_radius=(5.5, 7.5), secondary_radius=(3.0, 4.0)):
    """Rasterised circles, squares and triangles with tight inclusive bounding boxes.

    Labels cycle through the classes before shuffling, so counts differ by at
    most one. In two-object mode each image also holds a smaller shape of a
    different class (radii drawn from ``secondary_radius``); the label and
    ``boxes`` refer to the primary one.
    """
    if n < 1:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7, int(two_object)]))
    M = len(classes)
    labels = rng.permutation(np.arange(n) % M)
    images = np.zeros((n, 1, size, size))
    boxes = np.zeros((n, 4), dtype=np.int64)
    other_boxes = np.zeros((n, 4), dtype=np.int64) if two_object else None
    other_labels = np.zeros(n, dtype=np.int64) if two_object else None
    for i, lab in enumerate(labels):
        if two_object:
            other = (lab + 1 + rng.integers(M - 1)) % M
            placed = None
            while placed is None:  # a large primary can leave no room; redraw it
                mask, box = _place(rng, classes[lab], *primary_radius, size)
                placed = _place(rng, classes[other], *secondary_radius, size, avoid=box)
            mask2, box2 = placed
            images[i, 0][mask2] = rng.uniform(0.7, 1.0)
            other_boxes[i] = box2
            other_labels[i] = other
        else:
            mask, box = _place(rng, classes[lab], 4.0, 9.0, size)
        images[i, 0][mask] = rng.uniform(0.7, 1.0)
        boxes[i] = box
    name = "synth2" if two_object else "synth"
    return Dataset(images, labels.astype(np.int64), boxes, other_boxes, other_labels, name)
