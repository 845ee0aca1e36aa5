"""Polar to cartesian resampling, red/cyan overlays and slice-stack export.

Orientation: theta = 0 points along +x (to the right) and theta grows
counterclockwise as seen in the output image; the catheter (depth 0) sits
on the centre pixel (S/2, S/2).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .config import dump_kv, read_kv


@dataclass
class CartesianImage:
    pixels: np.ndarray  # (S, S) or (S, S, 3)
    scale: float  # output pixels per depth sample

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def center(self) -> tuple[float, float]:
        return (self.size / 2, self.size / 2)


def default_scale(out_size: int, depth: int) -> float:
    """Fits the full depth range inside the half-width."""
    return (out_size / 2 - 1) / depth


def polar_to_cartesian(polar: np.ndarray, out_size: int, scale: Optional[float] = None) -> CartesianImage:
    """Inverse-map every output pixel to (angle, depth) and sample bilinearly.

    Angles wrap around; depth is clamped to the last sample and pixels at or
    beyond the full depth are 0. Extra trailing axes (e.g. RGB) are carried through.
    """
    if out_size < 2:
        raise ValueError("out_size must be >= 2")
    polar = np.asarray(polar, dtype=np.float64)
    n_angles, depth = polar.shape[:2]
    if scale is None:
        scale = default_scale(out_size, depth)
    c = out_size / 2
    i, j = np.mgrid[0:out_size, 0:out_size].astype(np.float64)
    x = j - c
    y = c - i
    d = np.hypot(x, y) / scale
    a = np.mod(np.arctan2(y, x), 2 * np.pi) * n_angles / (2 * np.pi)
    inside = d < depth

    a0 = np.floor(a).astype(np.int64)
    fa = a - a0
    a0 %= n_angles
    a1 = (a0 + 1) % n_angles
    dc = np.clip(d, 0, depth - 1)
    d0 = np.floor(dc).astype(np.int64)
    fd = dc - d0
    d1 = np.minimum(d0 + 1, depth - 1)
    extra = (Ellipsis,) + (None,) * (polar.ndim - 2)
    fa, fd = fa[extra], fd[extra]
    out = ((1 - fa) * (1 - fd) * polar[a0, d0] + (1 - fa) * fd * polar[a0, d1]
           + fa * (1 - fd) * polar[a1, d0] + fa * fd * polar[a1, d1])
    out = np.where(inside[extra], out, 0.0)
    return CartesianImage(out, scale)


def cartesian_position(theta_row: float, depth: float, n_angles: int, out_size: int,
                       scale: float) -> tuple[float, float]:
    """Forward map of a polar sample to (row, col) in the cartesian image."""
    theta = 2 * np.pi * theta_row / n_angles
    c = out_size / 2
    return c - depth * scale * np.sin(theta), c + depth * scale * np.cos(theta)


def overlay(oct_image: np.ndarray, saliency: np.ndarray) -> np.ndarray:
    """RGB composite: saliency in red, OCT intensity in green and blue (cyan)."""
    oct_image = np.asarray(oct_image, dtype=np.float64)
    saliency = np.asarray(saliency, dtype=np.float64)
    if oct_image.shape != saliency.shape:
        raise ValueError(f"overlay: OCT shape {oct_image.shape} != saliency shape {saliency.shape}")
    return np.clip(np.stack([saliency, oct_image, oct_image], axis=-1), 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def render_stack(slices: Sequence[np.ndarray], out_dir: str | Path, slice_spacing: float = 1.0,
                 scale: float = 1.0, volume: bool = True, prefix: str = "slice") -> Path:
    """Write a numbered PNG sequence and, optionally, a raw float32 volume with a text sidecar.

    The volume is little-endian float32 in (slice, row, col[, channel]) order.
    """
    if not slices:
        raise ValueError("render_stack needs at least one slice")
    shape = np.shape(slices[0])
    for i, s in enumerate(slices):
        if np.shape(s) != shape:
            raise ValueError(f"slice {i} has shape {np.shape(s)}, expected {shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(slices):
        Image.fromarray(to_uint8(np.asarray(s))).save(out / f"{prefix}_{i:04d}.png")
    if volume:
        vol = np.ascontiguousarray(np.stack(slices), dtype="<f4")
        (out / "volume.raw").write_bytes(vol.tobytes())
        meta = {
            "format": "bvsviz-volume-1",
            "dtype": "float32-le",
            "dims": " ".join(str(n) for n in vol.shape),
            "order": "slice row col" + (" channel" if vol.ndim == 4 else ""),
            "slice_spacing": float(slice_spacing),
            "scale": float(scale),
        }
        (out / "volume.txt").write_text(dump_kv(meta))
    return out


def read_volume(out_dir: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    out = Path(out_dir)
    meta = read_kv(out / "volume.txt")
    dims = tuple(int(n) for n in meta["dims"].split())
    raw = (out / "volume.raw").read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise ValueError(f"volume.raw holds {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(dims), meta
