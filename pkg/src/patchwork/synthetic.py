"""Synthetic 2D datasets for demos, self-tests and acceptance runs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume


def test_image(size: int = 256, seed: int = 0) -> Volume:
    """Smooth blobs plus sharp rectangles and stripes on an identity grid."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(6):
        cy, cx = rng.uniform(0, size, 2)
        s = rng.uniform(size / 20, size / 6)
        img += rng.uniform(0.5, 1.0) * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
    for _ in range(4):
        y0, x0 = rng.integers(0, size - size // 5, 2)
        h, w = rng.integers(size // 20, size // 5, 2)
        img[y0:y0 + h, x0:x0 + w] += rng.uniform(-0.5, 0.5)
    img += 0.2 * (np.sin(x / 3.0) > 0)
    return Volume(img.astype(np.float32), np.eye(3))


@dataclass
class ContextDataset:
    images: list[Volume]
    labels: list[Volume]
    classes: np.ndarray
    disk_centers: np.ndarray
    marker_boxes: np.ndarray

    def split(self, n_train: int):
        a = ContextDataset(self.images[:n_train], self.labels[:n_train], self.classes[:n_train],
                           self.disk_centers[:n_train], self.marker_boxes[:n_train])
        b = ContextDataset(self.images[n_train:], self.labels[n_train:], self.classes[n_train:],
                           self.disk_centers[n_train:], self.marker_boxes[n_train:])
        return a, b


CONTEXT_MARKER_VALUES = (-1.0, 2.0)


def box_gap(center, radius: float, box) -> float:
    """Chebyshev gap between a disk's bounding square and an axis box ``(y0, x0, y1, x1)``."""
    c = np.asarray(center, dtype=np.float64)
    lo, hi = c - radius, c + radius
    b0, b1 = np.asarray(box[:2], float), np.asarray(box[2:], float)
    gap = np.maximum(np.maximum(b0 - hi, lo - b1), 0.0)
    return float(gap.max())


def context_dataset(n: int = 200, size: int = 256, radius: float = 6.0, marker: int = 32,
                    margin: int = 28, min_gap: float = 40.0, noise: float = 0.1,
                    seed: int = 0) -> ContextDataset:
    """Disk whose class is written only in a marker square in a far corner.

    The marker intensity encodes the class (A or B) independently of the disk
    position, so a window that sees the disk but not the marker carries no
    class information.  Labels are two channels: disk-if-A and disk-if-B.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels, classes, centers, boxes = [], [], [], [], []
    corners = [(margin, margin), (margin, size - margin - marker),
               (size - margin - marker, margin), (size - margin - marker, size - margin - marker)]
    while len(images) < n:
        c = rng.uniform(2 * radius, size - 2 * radius, 2)
        ok = [k for k, (y0, x0) in enumerate(corners)
              if box_gap(c, radius, (y0, x0, y0 + marker - 1, x0 + marker - 1)) > min_gap]
        if not ok:
            continue
        y0, x0 = corners[ok[rng.integers(len(ok))]]
        cls = int(rng.integers(2))
        disk = (yy - c[0]) ** 2 + (xx - c[1]) ** 2 <= radius ** 2
        img = noise * rng.standard_normal((size, size))
        img[disk] += 1.0
        img[y0:y0 + marker, x0:x0 + marker] += CONTEXT_MARKER_VALUES[cls]
        lab = np.zeros((size, size, 2), dtype=np.float32)
        lab[..., cls] = disk
        images.append(Volume(img.astype(np.float32), np.eye(3)))
        labels.append(Volume(lab, np.eye(3)))
        classes.append(cls)
        centers.append(c)
        boxes.append((y0, x0, y0 + marker - 1, x0 + marker - 1))
    return ContextDataset(images, labels, np.array(classes), np.array(centers), np.array(boxes))


def rare_label_dataset(n: int = 100, n_rare: int = 5, size: int = 32, seed: int = 0):
    """``n`` images with a common label everywhere-ish and a rare label in ``n_rare`` of them."""
    rng = np.random.default_rng(seed)
    rare_idx = set(rng.choice(n, size=n_rare, replace=False).tolist())
    images, labels = [], []
    for i in range(n):
        img = rng.standard_normal((size, size)).astype(np.float32)
        lab = np.zeros((size, size, 2), dtype=np.float32)
        lab[size // 4: 3 * size // 4, size // 4: 3 * size // 4, 0] = 1
        if i in rare_idx:
            lab[:, :, 1] = 1
            img += 2.0
        images.append(Volume(img, np.eye(3)))
        labels.append(Volume(lab, np.eye(3)))
    return images, labels, sorted(rare_idx)


def threshold_dataset(n: int = 4, size: int = 16, seed: int = 0):
    """Linearly separable toy: label = image > 0."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for _ in range(n):
        img = rng.standard_normal((size, size)).astype(np.float32)
        images.append(Volume(img, np.eye(3)))
        labels.append(Volume((img > 0).astype(np.float32), np.eye(3)))
    return images, labels
