"""Image IO, YUV conversion, dataset discovery and crop helpers.

All planes are float64 in [0, 1] once loaded; 8-bit quantization happens only
when writing PNGs. Colour handling uses the full-range BT.601 (JPEG YCbCr)
transform with chroma centred at 0.5.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# rows: Y, U (Cb), V (Cr)
RGB_TO_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)
CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


class RegistrationError(ValueError):
    """Infrared and visible images do not share spatial dimensions."""


class ImageIOError(OSError):
    """An image file is missing or cannot be decoded."""


@dataclass
class ImagePair:
    ir_y: np.ndarray
    vi_yuv: np.ndarray
    pair_id: str = ""

    def __post_init__(self):
        self.ir_y = np.asarray(self.ir_y, dtype=np.float64)
        self.vi_yuv = np.asarray(self.vi_yuv, dtype=np.float64)
        if self.ir_y.ndim != 2 or self.vi_yuv.ndim != 3 or self.vi_yuv.shape[2] != 3:
            raise ValueError(
                f"expected ir HxW and vi HxWx3, got {self.ir_y.shape} and {self.vi_yuv.shape}"
            )
        if self.ir_y.shape != self.vi_yuv.shape[:2]:
            raise RegistrationError(
                f"pair {self.pair_id!r}: ir {self.ir_y.shape} vs vi {self.vi_yuv.shape[:2]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.ir_y.shape

    @property
    def vi_y(self) -> np.ndarray:
        return self.vi_yuv[..., 0]

    @property
    def vi_uv(self) -> np.ndarray:
        return self.vi_yuv[..., 1:]


def rgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    """HxWx3 RGB in [0,1] -> HxWx3 YUV with U/V centred at 0.5."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 RGB, got {rgb.shape}")
    return rgb @ RGB_TO_YUV.T + CHROMA_OFFSET


def yuv_to_rgb(fused_y: np.ndarray, vi_uv: np.ndarray) -> np.ndarray:
    """Recombine a luminance plane with chroma planes into RGB clamped to [0,1]."""
    fused_y = np.asarray(fused_y, dtype=np.float64)
    vi_uv = np.asarray(vi_uv, dtype=np.float64)
    if vi_uv.ndim != 3 or vi_uv.shape[2] != 2 or fused_y.shape != vi_uv.shape[:2]:
        raise ValueError(f"shape mismatch: y {fused_y.shape} vs uv {vi_uv.shape}")
    yuv = np.concatenate([fused_y[..., None], vi_uv], axis=2)
    rgb = (yuv - CHROMA_OFFSET) @ YUV_TO_RGB.T
    return np.clip(rgb, 0.0, 1.0)


def read_image(path: str | os.PathLike, mode: str) -> np.ndarray:
    """Decode an 8-bit image as float64 in [0,1]; mode is 'L' or 'RGB'."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB", "RGBA", "P", "LA", "I;16", "I"):
                raise ImageIOError(f"{path}: unsupported image mode {im.mode}")
            arr = np.asarray(im.convert(mode), dtype=np.float64)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"cannot decode {path}: {exc}") from exc
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write an HxW or HxWx3 float image in [0,1] as an 8-bit PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_pair(ir_path, vi_path, pair_id: str | None = None) -> ImagePair:
    ir = read_image(ir_path, "L")
    try:
        with Image.open(vi_path) as im:
            gray = im.mode in ("L", "LA", "I", "I;16")
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ImageIOError(f"cannot decode {vi_path}: {exc}") from exc
    if gray:
        y = read_image(vi_path, "L")
        vi = np.stack([y, np.full_like(y, 0.5), np.full_like(y, 0.5)], axis=2)
    else:
        vi = rgb_to_yuv(read_image(vi_path, "RGB"))
    if pair_id is None:
        pair_id = Path(ir_path).stem
    if ir.shape != vi.shape[:2]:
        raise RegistrationError(f"pair {pair_id!r}: ir {ir.shape} vs vi {vi.shape[:2]}")
    return ImagePair(ir, vi, pair_id)


def random_crop_pair(pair: ImagePair, size: int, seed: int) -> ImagePair:
    """Crop the same size x size window out of both modalities."""
    h, w = pair.shape
    if size > min(h, w) or size < 1:
        raise ValueError(f"crop size {size} does not fit a {h}x{w} pair")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    win = (slice(top, top + size), slice(left, left + size))
    return ImagePair(pair.ir_y[win].copy(), pair.vi_yuv[win].copy(), pair.pair_id)


@dataclass
class DatasetSplit:
    """Pairs found as `<root>/ir/<id>.*` and `<root>/vi/<id>.*` with matching stems."""

    root_path: Path
    pair_ids: list[str] = field(default_factory=list)
    crop_size: int | None = None

    @classmethod
    def from_root(cls, root, crop_size: int | None = None) -> "DatasetSplit":
        root = Path(root)
        ir_files = _index_dir(root / "ir")
        vi_files = _index_dir(root / "vi")
        missing = sorted(set(ir_files) ^ set(vi_files))
        if missing:
            raise ImageIOError(f"{root}: unmatched pair ids {missing}")
        return cls(root, sorted(ir_files), crop_size)

    def paths(self, pair_id: str) -> tuple[Path, Path]:
        return _index_dir(self.root_path / "ir")[pair_id], _index_dir(self.root_path / "vi")[pair_id]

    def load(self, pair_id: str) -> ImagePair:
        pair = load_pair(*self.paths(pair_id), pair_id=pair_id)
        if self.crop_size is not None and self.crop_size > min(pair.shape):
            raise ValueError(f"crop {self.crop_size} larger than pair {pair_id} {pair.shape}")
        return pair

    def __len__(self) -> int:
        return len(self.pair_ids)

    def __iter__(self) -> Iterator[ImagePair]:
        for pid in self.pair_ids:
            yield self.load(pid)


def _index_dir(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise ImageIOError(f"missing directory {d}")
    out: dict[str, Path] = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in out:
                raise ImageIOError(f"{d}: more than one file for pair id {p.stem!r}")
            out[p.stem] = p
    return out


def synthetic_pair(height: int, width: int, seed: int, pair_id: str = "") -> ImagePair:
    """A registered toy pair: textured colour scene plus a thermal view of warm objects.

    Both modalities share some object boundaries and each carries structure the
    other lacks, which is the situation the fusion network is built for.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)

    rgb = np.empty((height, width, 3))
    for c in range(3):
        fx, fy, ph = rng.uniform(2, 9), rng.uniform(2, 9), rng.uniform(0, 2 * np.pi)
        rgb[..., c] = 0.45 + 0.2 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    ir = 0.15 + 0.1 * yy

    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        ry, rx = rng.uniform(0.06, 0.2, size=2)
        box = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        shade = rng.uniform(0.1, 0.9, size=3)
        rgb[box] = 0.5 * rgb[box] + 0.5 * shade
        # objects are warm: shared boundary with the visible view
        ir[box] += rng.uniform(0.25, 0.55)

    # hidden heat sources, invisible in the visible band
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.04, 0.12)
        ir += rng.uniform(0.3, 0.6) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))

    rgb += rng.normal(0, 0.02, size=rgb.shape)
    ir += rng.normal(0, 0.01, size=ir.shape)
    rgb = np.round(np.clip(rgb, 0, 1) * 255) / 255
    ir = np.round(np.clip(ir, 0, 1) * 255) / 255
    return ImagePair(ir, rgb_to_yuv(rgb), pair_id)


def write_synthetic_dataset(root, n_pairs: int, height: int = 96, width: int = 96, seed: int = 0) -> DatasetSplit:
    """Write `n_pairs` synthetic pairs in the `<root>/ir`, `<root>/vi` layout."""
    root = Path(root)
    for i in range(n_pairs):
        pid = f"pair{i:03d}"
        pair = synthetic_pair(height, width, seed + i, pid)
        save_png(pair.ir_y, root / "ir" / f"{pid}.png")
        save_png(yuv_to_rgb(pair.vi_y, pair.vi_uv), root / "vi" / f"{pid}.png")
    return DatasetSplit.from_root(root)
