"""Raster image I/O and the nearest-neighbor target-image semantics.

Images are float arrays of shape (H, W, d) in linear [0,1]; PNG files are
8-bit and converted by /255 with no gamma handling, PFM files are 32-bit
float and serve as evaluation ground truth.
"""

from __future__ import annotations

import re

import numpy as np
from PIL import Image


class TargetImage:
    """Raster grid defining the target function I(x) on the unit canvas.

    I(x) is the nearest-neighbor lookup: pixel (row, col) covers the cell
    [col/W,(col+1)/W) x [row/H,(row+1)/H), its center sits at
    ((col+.5)/W, (row+.5)/H).
    """

    def __init__(self, pixels):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3:
            raise ValueError("pixels must be (H, W) or (H, W, d)")
        self.pixels = np.ascontiguousarray(pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def sample(self, points) -> np.ndarray:
        """Nearest-neighbor values at canvas points (n,2) -> (n,d)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        col = np.clip((pts[:, 0] * self.width).astype(np.int64), 0, self.width - 1)
        row = np.clip((pts[:, 1] * self.height).astype(np.int64), 0, self.height - 1)
        return self.pixels[row, col]

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) canvas coordinates of all pixel centers, row-major."""
        xs = (np.arange(self.width) + 0.5) / self.width
        ys = (np.arange(self.height) + 0.5) / self.height
        gx, gy = np.meshgrid(xs, ys)  # row-major: y varies over rows
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def luma(self) -> np.ndarray:
        """Grayscale (H, W) view: channel average (luma of linear RGB)."""
        return self.pixels.mean(axis=2)


def load_image(path) -> TargetImage:
    path = str(path)
    if path.lower().endswith(".pfm"):
        return TargetImage(read_pfm(path))
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return TargetImage(arr / 255.0)


def save_image(pixels, path):
    path = str(path)
    pixels = np.asarray(pixels)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if path.lower().endswith(".pfm"):
        write_pfm(path, pixels)
        return
    arr = np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into (H, W, d) float64; rows stored bottom-up."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        if header not in ("PF", "Pf"):
            raise ValueError(f"not a PFM file: {path}")
        dims = fh.readline().decode("ascii")
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValueError("malformed PFM dimensions")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(fh.readline().decode("ascii").strip())
        dt = "<f4" if scale < 0 else ">f4"
        ch = 3 if header == "PF" else 1
        data = np.frombuffer(fh.read(4 * w * h * ch), dtype=dt).astype(np.float64)
    arr = data.reshape(h, w, ch)
    return arr[::-1].copy()


def write_pfm(path, pixels):
    """Write (H, W) or (H, W, d<=3) floats as little-endian PFM."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, ch = arr.shape
    if ch == 1:
        header = "Pf"
        out = arr
    elif ch == 3:
        header = "PF"
        out = arr
    else:
        raise ValueError("PFM supports 1 or 3 channels")
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(out[::-1].astype("<f4").tobytes())
