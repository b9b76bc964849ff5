"""Classical structure maps: Sobel magnitude thresholded at its global mean.

These maps are the self-supervision targets for the structure heads and the
source of the unique-structure masks used during fusion. Nothing here is learned.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()  # gy = correlation of the image with SOBEL_Y


class Polarity(str, Enum):
    """Which side of the global-mean threshold is labelled 1.

    EDGE marks pixels whose gradient is at or above the mean (edges are 1).
    LITERAL applies the inequality ``grad - mean <= 0`` literally, so flat
    regions are 1 and edges are 0.
    """

    EDGE = "edge"
    LITERAL = "literal"


@dataclass
class StructurePyramid:
    levels: list[np.ndarray]
    polarity: Polarity = Polarity.EDGE

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.levels[k]


def sobel_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalised 3x3 Sobel responses (gx, gy) with replicate-padded borders.

    Written as weighted differences so a flat region gives exactly 0.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D plane, got shape {img.shape}")
    p = np.pad(img, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    gx, gy = sobel_gradients(img)
    return np.sqrt(gx * gx + gy * gy)


def binarize_by_global_mean(grad: np.ndarray, polarity: Polarity | str = Polarity.EDGE) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    diff = grad - grad.mean()
    if Polarity(polarity) is Polarity.LITERAL:
        return (diff <= 0).astype(np.uint8)
    return (diff >= 0).astype(np.uint8)


def avg_pool2(img: np.ndarray) -> np.ndarray:
    """2x2 mean pooling; an odd trailing row/column is dropped (floor division)."""
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    v = img[: 2 * h2, : 2 * w2]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def structure_pyramid_gt(img: np.ndarray, n_levels: int = 3, polarity: Polarity | str = Polarity.EDGE) -> StructurePyramid:
    img = np.asarray(img, dtype=np.float64)
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    need = 2 ** (n_levels - 1)
    if img.ndim != 2 or min(img.shape) < need:
        raise ValueError(f"image of shape {img.shape} too small for {n_levels} levels (needs >= {need} px per side)")
    levels = []
    cur = img
    for k in range(n_levels):
        if k:
            cur = avg_pool2(cur)
        levels.append(binarize_by_global_mean(sobel_magnitude(cur), polarity))
    return StructurePyramid(levels, Polarity(polarity))


def edge_map_for_display(img: np.ndarray) -> np.ndarray:
    return structure_pyramid_gt(img, 1, Polarity.EDGE).levels[0]
