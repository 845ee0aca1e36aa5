"""Patch-based, shift-averaged guided-backprop saliency maps.

A slice is tiled into 36 overlapping patches. The patch softmax outputs are
averaged into a global prediction, guided gradients of the global class
logit are computed for every patch, and only patches whose own prediction
agrees with the global one are stitched back together, each with a border
removed. The whole procedure is repeated on k angularly shifted copies of
the slice and the un-shifted maps are averaged.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .labels import ClassLabel
from .tensor import get_dtype, guided_gradient

logger = logging.getLogger(__name__)

N_PATCHES = 36


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _axis_positions(length: int, patch: int, n: int) -> list[int]:
    if n == 1:
        return [0]
    return [round_half_up(i * (length - patch) / (n - 1)) for i in range(n)]


def _axis_coverage(length: int, patch: int, n: int, border: int) -> np.ndarray:
    cov = np.zeros(length)
    for p in _axis_positions(length, patch, n):
        cov[p + border:p + patch - border] += 1
    return cov


def grid_shape(image_shape: tuple[int, int], patch_size: int, border_fraction: float = 0.1) -> tuple[int, int]:
    """Factor 36 into (n_angle, n_depth) for the most uniform post-crop coverage.

    Only factorizations whose uncropped patches cover every pixel are
    considered (all of them if none does). Among those, the one minimizing
    the coefficient of variation of the per-pixel count of border-cropped
    patches wins; ties go to more positions along the longer axis.
    """
    h, w = image_shape
    border = round_half_up(border_fraction * patch_size)
    options = []
    for na in range(1, N_PATCHES + 1):
        if N_PATCHES % na:
            continue
        nd = N_PATCHES // na
        full = _axis_coverage(h, patch_size, na, 0).min() > 0 and _axis_coverage(w, patch_size, nd, 0).min() > 0
        a = _axis_coverage(h, patch_size, na, border)
        d = _axis_coverage(w, patch_size, nd, border)
        mean = a.mean() * d.mean()
        # coverage is separable: count(r, c) = a[r] * d[c]
        var = max((a ** 2).mean() * (d ** 2).mean() - mean ** 2, 0.0)
        cv = np.sqrt(var) / mean if mean > 0 else np.inf
        longer_first = nd if w >= h else na
        options.append((not full, round(cv, 12), -longer_first, (na, nd)))
    return min(options)[3]


def tile_patches(image_shape: tuple[int, int], patch_size: int,
                 border_fraction: float = 0.1) -> list[tuple[int, int]]:
    """Top-left corners of the 36 overlapping patches, row-major over the grid."""
    h, w = image_shape
    if patch_size > min(h, w) or patch_size < 1:
        raise ValueError(f"patch size {patch_size} does not fit image {image_shape}")
    na, nd = grid_shape(image_shape, patch_size, border_fraction)
    rows = _axis_positions(h, patch_size, na)
    cols = _axis_positions(w, patch_size, nd)
    return [(r, c) for r in rows for c in cols]


def extract_patches(pixels: np.ndarray, positions: Sequence[tuple[int, int]], patch_size: int) -> np.ndarray:
    return np.stack([pixels[r:r + patch_size, c:c + patch_size] for r, c in positions])[:, None].astype(get_dtype())


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PatchGrid:
    patch_size: int
    positions: list[tuple[int, int]]
    probabilities: np.ndarray  # (36, n_classes)
    saliency: Optional[np.ndarray] = None  # (36, patch, patch)

    @property
    def global_probabilities(self) -> np.ndarray:
        return self.probabilities.mean(axis=0)

    @property
    def global_class(self) -> int:
        return int(np.argmax(self.global_probabilities))


@dataclass
class SaliencyMap:
    values: np.ndarray
    contribution_count: np.ndarray
    source_class: ClassLabel
    k_shifts: int = 1
    empty: bool = False
    contributors: list[int] = field(default_factory=list)  # patch indices used (single-shift maps)


def predict_patches(model, pixels: np.ndarray, patch_size: int) -> PatchGrid:
    positions = tile_patches(pixels.shape, patch_size)
    logits = model.predict_logits(extract_patches(pixels, positions, patch_size))
    return PatchGrid(patch_size, positions, _softmax(logits.astype(np.float64)))


def predict_image(model, pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Mean of the 36 per-patch softmax vectors."""
    return predict_patches(model, pixels, patch_size).global_probabilities


def patch_saliency(model, pixels: np.ndarray, grid: PatchGrid, class_index: int) -> np.ndarray:
    """Guided gradients of the class logit for every patch, shape (36, p, p)."""
    x = extract_patches(pixels, grid.positions, grid.patch_size)
    return guided_gradient(model, x, class_index)[:, 0].astype(np.float64)


def assemble(grid: PatchGrid, global_class: int, border_fraction: float = 0.1,
             image_shape: Optional[tuple[int, int]] = None) -> SaliencyMap:
    """Stitch the agreeing patches' saliency, border-cropped, averaging overlaps."""
    if grid.saliency is None:
        raise ValueError("patch grid carries no saliency")
    p = grid.patch_size
    if image_shape is None:
        image_shape = (max(r for r, _ in grid.positions) + p, max(c for _, c in grid.positions) + p)
    b = round_half_up(border_fraction * p)
    total = np.zeros(image_shape)
    count = np.zeros(image_shape, dtype=np.int64)
    contributors = []
    predicted = grid.probabilities.argmax(axis=1)
    for i, (r, c) in enumerate(grid.positions):  # fixed order keeps the float sum deterministic
        if predicted[i] != global_class:
            continue
        contributors.append(i)
        total[r + b:r + p - b, c + b:c + p - b] += grid.saliency[i, b:p - b, b:p - b]
        count[r + b:r + p - b, c + b:c + p - b] += 1
    values = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return SaliencyMap(values, count, ClassLabel(global_class), 1, empty=not contributors, contributors=contributors)


def single_saliency(model, pixels: np.ndarray, patch_size: int, border_fraction: float = 0.1) -> SaliencyMap:
    grid = predict_patches(model, pixels, patch_size)
    cls = grid.global_class
    grid.saliency = patch_saliency(model, pixels, grid, cls)
    return assemble(grid, cls, border_fraction, pixels.shape)


def shift_amounts(n_angles: int, k: int) -> list[int]:
    return [round_half_up(i * n_angles / k) for i in range(k)]


def shifted_saliency(model, pixels: np.ndarray, patch_size: int, k: int = 3,
                     border_fraction: float = 0.1) -> SaliencyMap:
    """Average of k single-pass maps computed on angularly shifted copies, aligned back."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total = np.zeros(pixels.shape)
    n_maps = np.zeros(pixels.shape, dtype=np.int64)
    count = np.zeros(pixels.shape, dtype=np.int64)
    classes = []
    maps = []
    for s in shift_amounts(pixels.shape[0], k):
        m = single_saliency(model, np.roll(pixels, s, axis=0), patch_size, border_fraction)
        values = np.roll(m.values, -s, axis=0)
        c = np.roll(m.contribution_count, -s, axis=0)
        total += np.where(c > 0, values, 0.0)
        n_maps += c > 0
        count += c
        classes.append(int(m.source_class))
        maps.append(m)
    if k == 1:
        return maps[0]
    values = np.divide(total, n_maps, out=np.zeros_like(total), where=n_maps > 0)
    source = max(set(classes), key=lambda c: (classes.count(c), -classes.index(c)))
    return SaliencyMap(values, count, ClassLabel(source), k, empty=bool(n_maps.max() == 0))


class SignMode(enum.Enum):
    NEGATIVE = "neg"
    POSITIVE = "pos"


def default_mode(cls: ClassLabel) -> SignMode:
    """Metal struts show up in the positive map, everything else in the negative one."""
    return SignMode.POSITIVE if ClassLabel(cls) == ClassLabel.METAL_STENT else SignMode.NEGATIVE


def sign_select(values: np.ndarray, mode: SignMode) -> np.ndarray:
    if isinstance(values, SaliencyMap):
        values = values.values
    if mode is SignMode.NEGATIVE:
        return np.maximum(0.0, -values)
    return np.maximum(0.0, values)


def normalize_for_display(values: np.ndarray, percentile: float = 99.0) -> np.ndarray:
    """Scale by the given percentile of the nonzero values and clip to [0, 1].

    The percentile is the nearest-rank order statistic (no interpolation), so
    the reference value itself maps to exactly 1.
    """
    nz = values[values > 0]
    if nz.size == 0:
        return np.zeros_like(values, dtype=np.float64)
    ref = np.percentile(nz, percentile, method="inverted_cdf")
    return np.clip(values / ref, 0.0, 1.0)


# export

def write_saliency(path: str | Path, smap: SaliencyMap, patch_size: int, mode: SignMode) -> None:
    h, w = smap.values.shape
    header = (f"format = bvsviz-saliency-1\nrows = {h}\ncols = {w}\nclass = {smap.source_class.name}\n"
              f"k = {smap.k_shifts}\npatch = {patch_size}\nmode = {mode.value}\nempty = {str(smap.empty).lower()}\n"
              "end_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(np.ascontiguousarray(smap.values, dtype="<f4").tobytes())


def read_saliency(path: str | Path) -> tuple[np.ndarray, dict[str, str]]:
    from .config import parse_kv

    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    pos = raw.find(marker)
    if pos < 0:
        raise ValueError(f"{path}: missing end_header")
    header = parse_kv(raw[:pos].decode())
    rows, cols = int(header["rows"]), int(header["cols"])
    values = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=pos + len(marker)).reshape(rows, cols)
    return values.astype(np.float64), header


def write_preview(path: str | Path, display: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(display, 0, 1) * 255).astype(np.uint8)).save(path)
