"""Synthetic polar IVOCT pullbacks with exact strut and lumen ground truth.

Rows of a polar image are acquisition angles, columns are depth samples.
Metal struts render as bright discs at the lumen boundary with a radial
shadow behind them; polymer (BVS) struts render as boxes with a bright rim
and a dark core at or just below the boundary. Strut angles advance along a
helix from slice to slice, so a stack of slices shows the stent lattice.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import config as cfg
from .labels import ClassLabel

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Independent child seed for item ``index`` of a run seeded with ``seed``."""
    return splitmix64(splitmix64(seed & MASK64) ^ (index & MASK64))


@dataclass
class PolarImage:
    pixels: np.ndarray  # (n_angles, n_depth) floats in [0, 1]
    label: ClassLabel
    pullback_id: str = ""
    slice_index: int = 0
    strut_mask: Optional[np.ndarray] = None
    lumen_boundary: Optional[np.ndarray] = None  # per-row depth index

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def replace(self, **changes) -> "PolarImage":
        return dataclasses.replace(self, **changes)


@dataclass
class PullbackDataset:
    pullback_id: str
    label: ClassLabel
    slices: list[PolarImage]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.slices)


@dataclass
class PhantomSpec:
    n_angles: int = 256
    depth_raw: int = 360
    depth_trim: int = 40
    slices_per_pullback: int = 13
    max_crop: int = 64
    class_mix: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # lumen boundary, in depth samples
    lumen_radius_min: float = 60.0
    lumen_radius_max: float = 110.0
    lumen_slice_amplitude: float = 8.0
    lumen_slice_period: float = 40.0
    lumen_eccentricity_max: float = 15.0
    lumen_wobble: float = 3.0
    # tissue appearance
    lumen_level: float = 0.03
    background_level: float = 0.04
    tissue_peak: float = 0.75
    tissue_attenuation: float = 60.0
    speckle: float = 0.25
    # struts
    n_struts: int = 10
    helix_rate: float = 2.0  # rows per slice
    counter_helix: bool = True
    metal_radius: float = 2.5
    metal_intensity: float = 1.0
    shadow_factor: float = 0.12
    bvs_rows: int = 8
    bvs_depth: int = 6
    bvs_rim_intensity: float = 0.9
    bvs_core_intensity: float = 0.04
    bvs_embed_max: int = 6  # struts may sit up to this far below the boundary
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def depth(self) -> int:
        return self.depth_raw - self.depth_trim

    @property
    def max_boundary_step(self) -> int:
        """Upper bound on |boundary(z+1) - boundary(z)| at any angle."""
        slope = 2 * math.pi * self.lumen_slice_amplitude / self.lumen_slice_period
        drift = self.lumen_eccentricity_max * 2 * math.pi / self.lumen_slice_period
        return int(math.ceil(slope + drift + 2 * math.pi * self.lumen_wobble / self.lumen_slice_period)) + 1

    def validate(self) -> None:
        problems = []
        if self.depth_trim < 0 or self.depth_trim >= self.depth_raw:
            problems.append("depth_trim must be in [0, depth_raw)")
        if self.depth < self.max_crop or self.n_angles < self.max_crop:
            problems.append(f"trimmed image {self.n_angles}x{self.depth} smaller than max_crop {self.max_crop}")
        if not 0 < self.lumen_radius_min <= self.lumen_radius_max:
            problems.append("lumen radius range invalid")
        deepest = (self.lumen_radius_max + self.lumen_slice_amplitude + self.lumen_eccentricity_max
                   + self.lumen_wobble + self.bvs_embed_max + self.bvs_depth + self.metal_radius + 2)
        shallowest = (self.lumen_radius_min - self.lumen_slice_amplitude - self.lumen_eccentricity_max
                      - self.lumen_wobble - self.metal_radius)
        if deepest >= self.depth:
            problems.append(f"lumen/strut geometry reaches depth {deepest:.0f} beyond trimmed depth {self.depth}")
        if shallowest < 1:
            problems.append("lumen boundary can reach the catheter (depth < 1)")
        if self.slices_per_pullback < 1 or self.n_struts < 0:
            problems.append("slices_per_pullback must be >= 1 and n_struts >= 0")
        if len(self.class_mix) != 3 or min(self.class_mix) < 0 or sum(self.class_mix) <= 0:
            problems.append("class_mix needs three nonnegative weights")
        for name in ("lumen_level", "background_level", "tissue_peak", "metal_intensity", "shadow_factor",
                     "bvs_rim_intensity", "bvs_core_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if not 0 < self.speckle < 2:
            problems.append("speckle must lie in (0, 2)")
        if self.lumen_slice_period <= 0 or self.tissue_attenuation <= 0:
            problems.append("periods and attenuation must be positive")
        if problems:
            raise ValueError("invalid phantom spec: " + "; ".join(problems))

    def to_text(self) -> str:
        return cfg.dump_kv(cfg.to_dict(self))

    @classmethod
    def from_text(cls, text: str, base: Optional["PhantomSpec"] = None) -> "PhantomSpec":
        return cfg.from_dict(cls, cfg.parse_kv(text), base=base)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


DESK = PhantomSpec()
CLINICAL = PhantomSpec(
    n_angles=496, depth_raw=976, depth_trim=200, max_crop=224,
    lumen_radius_min=120.0, lumen_radius_max=260.0, lumen_slice_amplitude=15.0,
    lumen_eccentricity_max=30.0, lumen_wobble=5.0, tissue_attenuation=120.0,
    n_struts=14, helix_rate=4.0, metal_radius=4.0, bvs_rows=14, bvs_depth=10, bvs_embed_max=12,
)
PRESETS = {"desk": DESK, "clinical": CLINICAL}


def _lumen_boundaries(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Boundary depth (float) for every slice and angle, shape (n_slices, n_angles)."""
    z = np.arange(spec.slices_per_pullback)[:, None]
    theta = 2 * np.pi * np.arange(spec.n_angles)[None, :] / spec.n_angles
    radius = rng.uniform(spec.lumen_radius_min, spec.lumen_radius_max)
    phase = rng.uniform(0, 2 * np.pi)
    ecc = rng.uniform(0, spec.lumen_eccentricity_max)
    ecc_dir = rng.uniform(0, 2 * np.pi)
    wobble_phase = rng.uniform(0, 2 * np.pi)
    omega = 2 * np.pi / spec.lumen_slice_period
    b = (radius
         + spec.lumen_slice_amplitude * np.sin(omega * z + phase)
         + ecc * np.cos(theta - ecc_dir - omega * z)
         + spec.lumen_wobble * np.sin(3 * theta + wobble_phase + omega * z))
    return b


def strut_rows(spec: PhantomSpec, slice_index: int, offset: float) -> np.ndarray:
    """Angular (row) centre of every strut in a slice; even struts follow +helix, odd ones -helix."""
    k = np.arange(spec.n_struts)
    base = offset + k * spec.n_angles / max(spec.n_struts, 1)
    direction = np.where(k % 2 == 1, -1.0, 1.0) if spec.counter_helix else np.ones(spec.n_struts)
    return np.mod(base + direction * spec.helix_rate * slice_index, spec.n_angles)


def _render_slice(spec: PhantomSpec, label: ClassLabel, boundary: np.ndarray, rows_c: np.ndarray,
                  embed: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, Optional[np.ndarray]]:
    h, w = spec.n_angles, spec.depth_raw
    d = np.arange(w)[None, :].astype(float)
    b = boundary[:, None]
    inside = d >= b
    img = np.where(inside, spec.background_level + spec.tissue_peak * np.exp(-(d - b) / spec.tissue_attenuation),
                   spec.lumen_level)
    mask = np.zeros((h, w), dtype=bool)
    values = np.zeros((h, w))
    # strut pixels are assigned after the background so that the mask equals the rendered support
    if label == ClassLabel.METAL_STENT:
        r = spec.metal_radius
        span = int(math.ceil(r))
        for rc in rows_c:
            rows = np.arange(int(round(rc)) - span, int(round(rc)) + span + 1)
            rr = np.mod(rows, h)
            depth_c = boundary[int(round(rc)) % h]
            dr = (rows - rc)[:, None]
            dd = d - depth_c
            disc = dr ** 2 + dd ** 2 <= r ** 2
            blob_rows = disc.any(axis=1)
            far = np.where(disc, d, -1).max(axis=1)
            shadow = (d > far[:, None]) & blob_rows[:, None]
            img[rr] = np.where(shadow, img[rr] * spec.shadow_factor, img[rr])
            mask[rr] |= disc
            values[rr] = np.where(disc, spec.metal_intensity, values[rr])
    elif label == ClassLabel.BVS:
        for rc, e in zip(rows_c, embed):
            r0 = int(round(rc - spec.bvs_rows / 2))
            rows = np.mod(np.arange(r0, r0 + spec.bvs_rows), h)
            top = int(round(boundary[int(round(rc)) % h])) + int(e)
            box = np.zeros((spec.bvs_rows, w), dtype=bool)
            box[:, top:top + spec.bvs_depth] = True
            core = np.zeros_like(box)
            core[1:-1, top + 1:top + spec.bvs_depth - 1] = True
            vals = np.where(core, spec.bvs_core_intensity, spec.bvs_rim_intensity)
            mask[rows] |= box
            values[rows] = np.where(box, vals, values[rows])
    img = np.where(mask, values, img)
    shape_k = 1.0 / spec.speckle ** 2
    img = img * rng.gamma(shape_k, 1.0 / shape_k, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img, (mask if label != ClassLabel.NO_DEVICE else None)


def generate_pullback(spec: PhantomSpec, label: ClassLabel, pullback_id: str, seed: int) -> PullbackDataset:
    """Render one pullback at raw (untrimmed) depth."""
    spec.validate()
    label = ClassLabel(label)
    rng = np.random.default_rng(seed)
    boundaries = _lumen_boundaries(spec, rng)
    offset = rng.uniform(0, spec.n_angles)
    embed = rng.integers(0, spec.bvs_embed_max + 1, size=spec.n_struts)
    slices = []
    for z in range(spec.slices_per_pullback):
        rows_c = strut_rows(spec, z, offset) if label != ClassLabel.NO_DEVICE else np.empty(0)
        pixels, mask = _render_slice(spec, label, boundaries[z], rows_c, embed, rng)
        slices.append(PolarImage(pixels=pixels, label=label, pullback_id=pullback_id, slice_index=z,
                                 strut_mask=mask, lumen_boundary=np.round(boundaries[z]).astype(np.int64)))
    return PullbackDataset(pullback_id, label, slices, seed)


def assign_labels(n: int, mix: Sequence[float]) -> list[ClassLabel]:
    """Deterministic label sequence whose running counts track ``mix`` as closely as possible."""
    weights = np.asarray(mix, dtype=float) / sum(mix)
    counts = np.zeros(3)
    labels = []
    for i in range(n):
        c = int(np.argmax(weights * (i + 1) - counts))
        counts[c] += 1
        labels.append(ClassLabel(c))
    return labels


def generate_dataset(spec: PhantomSpec, n_pullbacks: int, seed: int) -> list[PullbackDataset]:
    labels = assign_labels(n_pullbacks, spec.class_mix)
    return [generate_pullback(spec, lab, f"pb{i:03d}", derive_seed(seed, i)) for i, lab in enumerate(labels)]


def depth_trim(image: PolarImage, n: int) -> PolarImage:
    """Drop the last ``n`` depth columns (mostly noise in real pullbacks)."""
    w = image.pixels.shape[1]
    if not 0 <= n < w:
        raise ValueError(f"cannot trim {n} columns from depth {w}")
    if n == 0:
        return image
    keep = w - n
    if image.lumen_boundary is not None and np.any(image.lumen_boundary >= keep):
        raise ValueError(f"trimming to depth {keep} would cut the lumen boundary (max {image.lumen_boundary.max()})")
    mask = image.strut_mask[:, :keep].copy() if image.strut_mask is not None else None
    return image.replace(pixels=image.pixels[:, :keep].copy(), strut_mask=mask)


def trim_pullbacks(pullbacks: Sequence[PullbackDataset], n: int) -> list[PullbackDataset]:
    return [dataclasses.replace(pb, slices=[depth_trim(s, n) for s in pb.slices]) for pb in pullbacks]


def split_by_pullback(pullbacks: Sequence[PullbackDataset], train_fraction: float = 0.7, seed: int = 0,
                      stratify: bool = False) -> tuple[list[PullbackDataset], list[PullbackDataset]]:
    """Partition whole pullbacks so the training slice fraction is as close to ``train_fraction`` as possible.

    Candidates are scanned in a seed-shuffled order and the first subset with
    minimal |achieved - target| wins, so ties are broken by the seed. With
    ``stratify`` the split is done independently within each label.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if stratify:
        train, test = [], []
        for lab in sorted({pb.label for pb in pullbacks}):
            group = [pb for pb in pullbacks if pb.label == lab]
            tr, te = split_by_pullback(group, train_fraction, derive_seed(seed, int(lab)))
            train += tr
            test += te
        return train, test
    n = len(pullbacks)
    if n < 2:
        raise ValueError("need at least 2 pullbacks to split")
    order = np.random.default_rng(seed).permutation(n)
    sizes = [len(pullbacks[i]) for i in order]
    total = sum(sizes)
    chosen = _best_subset(sizes, train_fraction * total)
    train_idx = sorted(int(order[i]) for i in chosen)
    test_idx = sorted(set(range(n)) - set(train_idx))
    train = [pullbacks[i] for i in train_idx]
    test = [pullbacks[i] for i in test_idx]
    ids_train = {pb.pullback_id for pb in train}
    ids_test = {pb.pullback_id for pb in test}
    assert not ids_train & ids_test, "pullback appears in both partitions"
    return train, test


def _best_subset(sizes: Sequence[int], target: float) -> list[int]:
    """Indices of a proper nonempty subset whose size sum is closest to ``target``.

    Subset-sum dynamic programme over achievable totals; for each total the
    first subset found is kept; ties on distance go to the smaller index tuple.
    """
    n = len(sizes)
    best: dict[int, tuple[int, ...]] = {0: ()}
    for i, s in enumerate(sizes):
        for acc, members in list(best.items()):
            new = acc + s
            if new not in best:
                best[new] = members + (i,)
    candidates = [(abs(acc - target), members) for acc, members in best.items() if 0 < len(members) < n]
    if not candidates:
        raise ValueError("cannot place at least one pullback on each side")
    # ties on distance: prefer the subset that comes first in seed order
    return list(min(candidates, key=lambda t: (t[0], t[1]))[1])


def exhaustive_best_deviation(sizes: Sequence[int], train_fraction: float) -> float:
    total = sum(sizes)
    best = math.inf
    for r in range(1, len(sizes)):
        for combo in itertools.combinations(range(len(sizes)), r):
            best = min(best, abs(sum(sizes[i] for i in combo) / total - train_fraction))
    return best


# on-disk format

def save_dataset(pullbacks: Sequence[PullbackDataset], out_dir: str | Path, spec: PhantomSpec, seed: int) -> Path:
    """One directory per pullback with 16-bit slice PNGs, 8-bit mask PNGs and lumen boundaries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "phantom_spec.txt").write_text(spec.to_text())
    lines = ["format = bvsviz-phantom-1", f"spec_hash = {spec.digest()}", f"seed = {seed}",
             f"n_angles = {pullbacks[0].slices[0].shape[0] if pullbacks else spec.n_angles}",
             f"depth = {pullbacks[0].slices[0].shape[1] if pullbacks else spec.depth_raw}"]
    for pb in pullbacks:
        d = out / pb.pullback_id
        d.mkdir(exist_ok=True)
        bounds = []
        for s in pb.slices:
            stem = f"slice_{s.slice_index:04d}"
            Image.fromarray(np.round(s.pixels * 65535).astype(np.uint16)).save(d / f"{stem}.png")
            if s.strut_mask is not None:
                Image.fromarray(s.strut_mask.astype(np.uint8) * 255).save(d / f"mask_{s.slice_index:04d}.png")
            bounds.append(s.lumen_boundary)
        np.savetxt(d / "lumen.txt", np.asarray(bounds), fmt="%d")
        lines.append(f"pullback = {pb.pullback_id} {pb.label.name} {len(pb)} {pb.seed}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def read_slice_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


def load_dataset(root: str | Path) -> list[PullbackDataset]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {root}")
    pullbacks = []
    for raw in manifest.read_text().splitlines():
        key, _, value = raw.partition("=")
        if key.strip() != "pullback":
            continue
        pid, label_name, n, seed = value.split()
        label = ClassLabel[label_name]
        d = root / pid
        bounds = np.loadtxt(d / "lumen.txt", dtype=np.int64, ndmin=2)
        slices = []
        for z in range(int(n)):
            pixels = read_slice_png(d / f"slice_{z:04d}.png")
            mask_path = d / f"mask_{z:04d}.png"
            mask = np.asarray(Image.open(mask_path)) > 0 if mask_path.exists() else None
            slices.append(PolarImage(pixels, label, pid, z, mask, bounds[z]))
        pullbacks.append(PullbackDataset(pid, label, slices, int(seed)))
    return pullbacks
