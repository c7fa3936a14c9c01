"""Samples, overlapping patch grids, dihedral augmentation, synthetic nuclei
and PNG ingestion."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

MASK_THRESHOLD = 127
N_DIHEDRAL = 8


@dataclass
class Sample:
    """Image ``(C, H, W)`` float32 in [0, 1] with a binary ``(H, W)`` uint8 mask."""

    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"sample {self.id}: image must be (C, H, W), got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise ValueError(
                f"sample {self.id}: image {self.image.shape[1:]} and mask {self.mask.shape} sizes differ"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"sample {self.id}: mask is not binary")


# -- patch grid -------------------------------------------------------------


def axis_origins(n: int, patch: int, stride: int) -> list[int]:
    """Patch origins along one axis of (padded) length ``max(n, patch)``.

    Multiples of ``stride``; a final origin at ``n - patch`` is appended when
    the stride grid leaves a remainder uncovered.
    """
    if not 1 <= stride <= patch:
        raise ValueError(f"need 1 <= stride <= patch, got stride={stride}, patch={patch}")
    n = max(n, patch)
    last = n - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


@dataclass
class PatchGrid:
    height: int
    width: int
    patch: int
    stride: int
    pad: tuple[int, int] = (0, 0)
    origins: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def plan(cls, height: int, width: int, patch: int = 256, stride: int = 128) -> "PatchGrid":
        pad = (max(patch - height, 0), max(patch - width, 0))
        rows = axis_origins(height, patch, stride)
        cols = axis_origins(width, patch, stride)
        return cls(height, width, patch, stride, pad, [(r, c) for r in rows for c in cols])

    @property
    def padded_shape(self) -> tuple[int, int]:
        return self.height + self.pad[0], self.width + self.pad[1]

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.padded_shape, dtype=np.int64)
        p = self.patch
        for r, c in self.origins:
            cov[r:r + p, c:c + p] += 1
        return cov

    def to_json(self) -> str:
        return json.dumps({
            "height": self.height, "width": self.width, "patch": self.patch,
            "stride": self.stride, "pad": list(self.pad),
            "origins": [list(o) for o in self.origins],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PatchGrid":
        d = json.loads(text)
        return cls(d["height"], d["width"], d["patch"], d["stride"], tuple(d["pad"]),
                   [tuple(o) for o in d["origins"]])


def _pad_reflect(arr: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    if pad == (0, 0):
        return arr
    widths = [(0, 0)] * (arr.ndim - 2) + [(0, pad[0]), (0, pad[1])]
    # reflect needs at least two samples along an axis; fall back to edge
    mode = "reflect" if min(arr.shape[-2:]) > 1 else "edge"
    return np.pad(arr, widths, mode=mode)


def extract_patches(image: np.ndarray, patch: int = 256, stride: int = 128
                    ) -> tuple[list[np.ndarray], PatchGrid]:
    """Cut ``(..., H, W)`` into row-major overlapping ``patch x patch`` tiles.

    Images smaller than ``patch`` along an axis are reflect-padded at the
    bottom/right first.
    """
    h, w = image.shape[-2:]
    grid = PatchGrid.plan(h, w, patch, stride)
    padded = _pad_reflect(image, grid.pad)
    tiles = [padded[..., r:r + patch, c:c + patch] for r, c in grid.origins]
    return tiles, grid


def reassemble(patches: Sequence[np.ndarray], grid: PatchGrid) -> np.ndarray:
    """Average overlapping tiles back onto the source grid in float64.

    Uses a running mean (``m += (x - m) / k``) rather than sum-then-divide so
    that overlaps carrying identical values reproduce them bit for bit.
    """
    if len(patches) != len(grid.origins):
        raise ValueError(f"got {len(patches)} patches for a grid of {len(grid.origins)}")
    lead = np.asarray(patches[0]).shape[:-2]
    mean = np.zeros(lead + grid.padded_shape, dtype=np.float64)
    count = np.zeros(grid.padded_shape, dtype=np.float64)
    p = grid.patch
    for tile, (r, c) in zip(patches, grid.origins):
        k = count[r:r + p, c:c + p]
        k += 1.0
        region = mean[..., r:r + p, c:c + p]
        region += (np.asarray(tile, dtype=np.float64) - region) / k
    return mean[..., :grid.height, :grid.width]


# -- augmentation -----------------------------------------------------------


def dihedral(arr: np.ndarray, t: int) -> np.ndarray:
    """Transform ``t`` in 0..7 of the last two axes: ``t % 4`` quarter turns,
    followed by a horizontal flip when ``t >= 4``."""
    out = np.rot90(arr, t % 4, axes=(-2, -1))
    if t >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment_index(seed: int, sample_id: str) -> int:
    rng = np.random.default_rng([seed, zlib.crc32(sample_id.encode())])
    return int(rng.integers(N_DIHEDRAL))


def augment(sample: Sample, seed: int) -> Sample:
    """Apply one uniformly drawn dihedral transform, fixed by ``(seed, sample.id)``."""
    t = augment_index(seed, sample.id)
    return Sample(dihedral(sample.image, t), dihedral(sample.mask, t), sample.id)


# -- synthetic nuclei -------------------------------------------------------

STREAMS = {"train": 0, "test": 1}


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(5, 16))):
        cy, cx = rng.uniform(0, size, 2)
        a, b = rng.uniform(4, 12, 2)
        theta = rng.uniform(0, np.pi)
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def synth_sample(size: int, rng: np.random.Generator, sample_id: str,
                 max_fraction: float = 0.6) -> Sample:
    """One image of 5-15 rotated ellipses (semi-axes 4-12 px) over a noisy background.

    Draws are repeated until the foreground fraction is in ``(0, max_fraction)``;
    at small sizes a dense draw can otherwise flood the frame.
    """
    while True:
        mask = _ellipse_mask(size, rng)
        frac = mask.mean()
        if 0 < frac < max_fraction:
            break
    image = np.where(mask, 0.7, 0.3) + rng.normal(0.0, 0.1, mask.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)[None]
    return Sample(image, mask.astype(np.uint8), sample_id)


def synth_generate(count: int, size: int = 64, seed: int = 0, split: str = "train") -> list[Sample]:
    """Deterministic synthetic dataset; ``train`` and ``test`` use disjoint streams."""
    if split not in STREAMS:
        raise ValueError(f"split must be one of {sorted(STREAMS)}, got {split!r}")
    rng = np.random.default_rng([seed, STREAMS[split]])
    return [synth_sample(size, rng, f"{split}_{i:04d}") for i in range(count)]


# -- PNG io -----------------------------------------------------------------


class DatasetError(ValueError):
    """Raised with one line per problem file."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("dataset errors:\n" + "\n".join(f"  - {p}" for p in problems))


def _scale(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int64, np.uint32):
        return arr.astype(np.float32) / 65535.0
    if arr.dtype == bool:
        return arr.astype(np.float32)
    return arr.astype(np.float32)


def read_image(path: Path) -> np.ndarray:
    """PNG (8/16-bit, gray or RGB) to ``(C, H, W)`` float32 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("RGBA", "P", "LA", "CMYK", "YCbCr"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    arr = _scale(arr)
    return arr[None] if arr.ndim == 2 else np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path: Path) -> np.ndarray:
    """Single-channel PNG mask binarized at > 127 on the 8-bit scale."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im).astype(np.float64) / 257.0
        else:
            arr = np.asarray(im.convert("L")).astype(np.float64)
    return (arr > MASK_THRESHOLD).astype(np.uint8)


def _stems(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def load_dataset(root: str | Path) -> list[Sample]:
    """Pair ``root/images/*.png`` with ``root/masks/*.png`` by stem."""
    root = Path(root)
    images, masks = _stems(root / "images"), _stems(root / "masks")
    problems: list[str] = []
    if not images:
        problems.append(f"{root / 'images'}: no PNG images found")
    samples = []
    for stem, ipath in images.items():
        mpath = masks.get(stem)
        if mpath is None:
            problems.append(f"{stem}: no mask for {ipath}")
            continue
        try:
            img, msk = read_image(ipath), read_mask(mpath)
        except (OSError, ValueError) as exc:
            problems.append(f"{stem}: unreadable file ({exc})")
            continue
        if img.shape[1:] != msk.shape:
            problems.append(f"{stem}: image {img.shape[1:]} and mask {msk.shape} sizes differ")
            continue
        samples.append(Sample(img, msk, stem))
    if problems:
        raise DatasetError(problems)
    return samples


def load_images(directory: str | Path) -> list[tuple[str, np.ndarray]]:
    """All PNGs in ``directory`` as ``(stem, image)`` pairs, sorted by stem."""
    out, problems = [], []
    for stem, path in _stems(Path(directory)).items():
        try:
            out.append((stem, read_image(path)))
        except (OSError, ValueError) as exc:
            problems.append(f"{stem}: unreadable file ({exc})")
    if problems:
        raise DatasetError(problems)
    return out


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255).save(path)


def write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)).save(path)


def write_dataset(samples: Iterable[Sample], root: str | Path) -> int:
    """Write samples as ``root/images/<id>.png`` and ``root/masks/<id>.png``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    n = 0
    for s in samples:
        write_image(root / "images" / f"{s.id}.png", s.image)
        write_mask(root / "masks" / f"{s.id}.png", s.mask)
        n += 1
    return n


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays: images ``(N, C, H, W)`` float32, masks ``(N, 1, H, W)`` float32."""
    x = np.stack([s.image for s in samples]).astype(np.float32)
    y = np.stack([s.mask for s in samples])[:, None].astype(np.float32)
    return x, y
