"""Grayscale difference stacking, patchification and random patch masks."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import NUM_FRAMES, FrameSequence


def round_half_away(x):
    """Round half away from zero (``np.round`` rounds half to even)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return int(out) if out.ndim == 0 else out.astype(np.int64)


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma of an 8-bit RGB image, rounded half up, as uint8.

    Integer arithmetic keeps the result bit-exact: ``(299 R + 587 G + 114 B + 500) // 1000``.
    """
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.shape[-1] != 3:
        raise ValueError("expected an 8-bit RGB image")
    c = rgb.astype(np.int64)
    return ((299 * c[..., 0] + 587 * c[..., 1] + 114 * c[..., 2] + 500) // 1000).astype(np.uint8)


@dataclass(eq=False)
class DiffImage:
    """Three stacked absolute grayscale differences of a 4-frame sequence.

    ``raw`` holds the exact 8-bit differences, shape ``(3, H, W)``;
    :attr:`channels` is the model input scaled to ``[0, 1]``.
    """

    raw: np.ndarray
    source_sequence_id: str = ""
    title_id: str = ""

    @property
    def channels(self) -> np.ndarray:
        return self.raw.astype(np.float32) / np.float32(255.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.raw.shape

    def __eq__(self, other):
        if not isinstance(other, DiffImage):
            return NotImplemented
        return (
            self.source_sequence_id == other.source_sequence_id
            and self.title_id == other.title_id
            and np.array_equal(self.raw, other.raw)
        )


def stack_frames(frames: np.ndarray) -> np.ndarray:
    """``(4, H, W, 3)`` uint8 frames -> ``(3, H, W)`` uint8 ``|g[k+1] - g[k]|``."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] != NUM_FRAMES:
        raise ValueError(f"expected 4 frames, got array of shape {frames.shape}")
    gray = to_grayscale(frames).astype(np.int16)
    return np.abs(np.diff(gray, axis=0)).astype(np.uint8)


def stack_diffs(seq: FrameSequence) -> DiffImage:
    frames = seq.frames
    if isinstance(frames, (list, tuple)):
        if len(frames) != NUM_FRAMES:
            raise ValueError(f"expected 4 frames, got {len(frames)}")
        if len({f.shape for f in frames}) != 1:
            raise ValueError("frame size mismatch")
        frames = np.stack(frames)
    return DiffImage(stack_frames(frames), seq.sequence_id, seq.title_id)


@dataclass(eq=False)
class PatchGrid:
    """Row-major patches, shape ``(N, P, P, C)``."""

    patches: np.ndarray
    patch_size: int
    grid_shape: tuple[int, int]

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    def flat(self) -> np.ndarray:
        return self.patches.reshape(self.num_patches, -1)


def patchify(image: np.ndarray, patch_size: int) -> PatchGrid:
    """Split a channel-first ``(C, H, W)`` image into ``P x P`` patches."""
    image = np.asarray(image)
    c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    patches = image.reshape(c, gh, p, gw, p).transpose(1, 3, 2, 4, 0).reshape(gh * gw, p, p, c)
    return PatchGrid(patches, p, (gh, gw))


def unpatchify(grid: PatchGrid) -> np.ndarray:
    gh, gw = grid.grid_shape
    p = grid.patch_size
    c = grid.patches.shape[-1]
    return grid.patches.reshape(gh, gw, p, p, c).transpose(4, 0, 2, 1, 3).reshape(c, gh * p, gw * p)


@dataclass(frozen=True)
class MaskSpec:
    masked_indices: tuple[int, ...]
    ratio: float
    num_patches: int

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.masked_indices))
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate mask indices")
        if idx and (idx[0] < 0 or idx[-1] >= self.num_patches):
            raise ValueError("mask index out of range")
        object.__setattr__(self, "masked_indices", idx)

    def __len__(self):
        return len(self.masked_indices)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.num_patches, dtype=bool)
        out[list(self.masked_indices)] = True
        return out


def mask_count(num_patches: int, ratio: float) -> int:
    return round_half_away(ratio * num_patches)


def sample_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Uniform random subset of ``round(ratio * N)`` patch indices."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio {ratio} outside [0, 1]")
    k = mask_count(num_patches, ratio)
    idx = rng.choice(num_patches, size=k, replace=False) if k else []
    return MaskSpec(tuple(int(i) for i in idx), ratio, num_patches)


# DiffImage cache: 16-bit fixed point under <dataset>/diff/<split>/<sequence_id>.npy


def write_diff_cache(root: str | os.PathLike, split: str, diffs: list[DiffImage]) -> None:
    d = Path(root) / "diff" / split
    d.mkdir(parents=True, exist_ok=True)
    for diff in diffs:
        fixed = round_half_away(diff.channels.astype(np.float64) * 65535).astype(np.uint16)
        tmp = d / f".{diff.source_sequence_id}.tmp.npy"
        np.save(tmp, fixed)
        os.replace(tmp, d / f"{diff.source_sequence_id}.npy")


def read_diff_cache(root: str | os.PathLike, split: str, sequence_id: str) -> np.ndarray:
    """Cached diff as float64 ``(3, H, W)`` in ``[0, 1]``."""
    path = Path(root) / "diff" / split / f"{sequence_id}.npy"
    return np.load(path).astype(np.float64) / 65535.0
