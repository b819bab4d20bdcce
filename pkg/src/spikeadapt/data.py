"""Toy image tasks: Gaussian-blob classification and rectangle detection."""
from __future__ import annotations

import numpy as np

from .io import Dataset

BLOB_CENTERS = np.array([[4.5, 4.5], [4.5, 11.5], [11.5, 8.0]])  # (row, col) per class on a 16x16 canvas


def _grid(size: int):
    return np.mgrid[0:size, 0:size].astype(float)


def make_blobs(
    n: int,
    rng: np.random.Generator,
    size: int = 16,
    position_std: float = 1.6,
    radius: float = 3.0,
    background: float = 0.0,
    amplitude: tuple[float, float] = (0.8, 1.0),
) -> Dataset:
    """Balanced 3-class set of single-channel images, one bright Gaussian bump each.

    Bump centres are drawn from an isotropic Gaussian around the class centre,
    so classes are Gaussian blobs in position space rendered as images.
    """
    labels = np.arange(n) % 3
    rng.shuffle(labels)
    rows, cols = _grid(size)
    centers = BLOB_CENTERS * (size / 16.0)
    images = np.empty((n, 1, size, size))
    for i, c in enumerate(labels):
        r0, c0 = centers[c] + rng.normal(0.0, position_std, 2)
        amp = rng.uniform(*amplitude)
        bump = amp * np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2 * radius**2))
        noise = rng.uniform(0.0, background, (size, size))
        images[i, 0] = np.clip(bump + noise, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), 3)


# --------------------------------------------------------------------------
# detection


def make_rectangles(
    n: int,
    rng: np.random.Generator,
    size: int = 16,
    grid: int = 4,
    max_objects: int = 3,
) -> Dataset:
    """Images with 1-3 filled rectangles on a textured background.

    Class 0 rectangles are wide, class 1 tall. At most one object centre falls
    in each grid cell. Annotations are ``[class, x0, y0, x1, y1]`` in pixels.
    """
    cell = size / grid
    rows, cols = _grid(size)
    images = np.empty((n, 1, size, size))
    annotations = []
    for i in range(n):
        img = rng.uniform(0.0, 0.25, (size, size))
        img += 0.1 * np.sin(cols * rng.uniform(0.5, 1.5) + rng.uniform(0, 6.3))
        k = rng.integers(1, max_objects + 1)
        cells = rng.choice(grid * grid, size=k, replace=False)
        boxes = []
        for c in cells:
            cls = int(rng.integers(0, 2))
            long_side, short_side = rng.uniform(5.0, 7.0), rng.uniform(2.0, 3.0)
            w, h = (long_side, short_side) if cls == 0 else (short_side, long_side)
            cy = (c // grid + rng.uniform(0.2, 0.8)) * cell
            cx = (c % grid + rng.uniform(0.2, 0.8)) * cell
            x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, float(size))
            y0, y1 = max(cy - h / 2, 0.0), min(cy + h / 2, float(size))
            inside = (cols + 0.5 >= x0) & (cols + 0.5 <= x1) & (rows + 0.5 >= y0) & (rows + 0.5 <= y1)
            img[inside] = rng.uniform(0.7, 0.95)
            boxes.append([cls, x0, y0, x1, y1])
        images[i, 0] = np.clip(img, 0.0, 1.0)
        annotations.append(boxes)
    return Dataset(images, None, 2, annotations)


def detection_targets(annotations, size: int = 16, grid: int = 4, n_classes: int = 2):
    """Per-cell training targets: objectness (N,G,G), class (N,G,G), box (N,G,G,4).

    Boxes are encoded as centre offset within the cell and size relative to
    the image, all in [0, 1].
    """
    n = len(annotations)
    cell = size / grid
    obj = np.zeros((n, grid, grid))
    cls = np.zeros((n, grid, grid), dtype=np.int64)
    box = np.zeros((n, grid, grid, 4))
    for i, boxes in enumerate(annotations):
        for c, x0, y0, x1, y1 in boxes:
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            gi, gj = min(int(cy // cell), grid - 1), min(int(cx // cell), grid - 1)
            obj[i, gi, gj] = 1.0
            cls[i, gi, gj] = int(c)
            box[i, gi, gj] = [cx / cell - gj, cy / cell - gi, (x1 - x0) / size, (y1 - y0) / size]
    return obj, cls, box
