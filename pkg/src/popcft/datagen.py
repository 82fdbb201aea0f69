"""Procedural multi-title game-frame sequences with injected pop bugs.

Scenes are 2D sprite composites over a procedural background. A sequence is
four consecutive frames of one scene; pop bugs take effect at frame 2 and are
annotated in frame-2 coordinates.

On-disk layout written by :func:`write_dataset`::

    root/
      manifest.json
      <split>/<sequence_id>/frame_0.png ... frame_3.png
      <split>/<sequence_id>/boxes       # "frame_index x_min y_min x_max y_max class"
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes import BoundingBox

BUG_CLASSES = ("culling_pop", "lod_pop")
SPLITS = ("train", "validation", "test", "unlabeled")
LABELED_SPLITS = ("train", "validation", "test")
BACKGROUND_KINDS = ("park", "indoor", "terrain")
NUM_FRAMES = 4
POP_FRAME = 2
MAX_SEQUENCES_PER_SPLIT = 100_000
MIN_POP_AREA = 16
FORMAT_VERSION = "popcft-dataset/1"


class DatasetError(Exception):
    """Raised for unreadable, inconsistent or corrupted datasets on disk."""


class NoEligibleObject(ValueError):
    pass


@dataclass(frozen=True)
class TitleStyle:
    title_id: str
    palette_seed: int
    background_kind: str = "park"
    object_density: float = 0.5
    camera_speed_px_per_frame: float = 2.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.background_kind not in BACKGROUND_KINDS:
            raise ValueError(f"unknown background_kind {self.background_kind!r}")
        if not 0 < self.object_density <= 1:
            raise ValueError("object_density must lie in (0, 1]")
        if self.camera_speed_px_per_frame < 0 or self.noise_sigma < 0:
            raise ValueError("camera speed and noise sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TitleStyle":
        return cls(**d)


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    bug_class: str
    frame_index: int = POP_FRAME

    def __post_init__(self):
        if self.bug_class not in BUG_CLASSES:
            raise ValueError(f"unknown bug class {self.bug_class!r}")


@dataclass(eq=False)
class FrameSequence:
    sequence_id: str
    title_id: str
    frames: np.ndarray  # (4, H, W, 3) uint8
    annotations: tuple[Annotation, ...] = ()
    split: str = "train"

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[0] != NUM_FRAMES or self.frames.shape[-1] != 3:
            raise ValueError(f"expected (4, H, W, 3) frames, got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError("frames must be 8-bit")
        self.annotations = tuple(self.annotations)
        h, w = self.frames.shape[1:3]
        for ann in self.annotations:
            if not ann.box.inside(h, w):
                raise ValueError(f"annotation box {ann.box} outside {w}x{h} image")
        if self.split == "unlabeled" and self.annotations:
            raise ValueError("unlabeled sequences carry no annotations")

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.frames.shape[1:3])

    def __eq__(self, other):
        if not isinstance(other, FrameSequence):
            return NotImplemented
        return (
            self.sequence_id == other.sequence_id
            and self.title_id == other.title_id
            and self.split == other.split
            and self.annotations == other.annotations
            and np.array_equal(self.frames, other.frames)
        )


@dataclass(eq=False)
class TitleDataset:
    style: TitleStyle
    train: list[FrameSequence] = field(default_factory=list)
    validation: list[FrameSequence] = field(default_factory=list)
    test: list[FrameSequence] = field(default_factory=list)
    unlabeled: list[FrameSequence] = field(default_factory=list)
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    options: dict = field(default_factory=dict)

    def split(self, name: str) -> list[FrameSequence]:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def counts(self) -> dict[str, dict[str, int]]:
        return {
            s: {"images": len(self.split(s)), "pops": sum(len(q.annotations) for q in self.split(s))}
            for s in SPLITS
        }

    def __eq__(self, other):
        if not isinstance(other, TitleDataset):
            return NotImplemented
        return (
            self.style == other.style
            and self.seed == other.seed
            and tuple(self.image_size) == tuple(other.image_size)
            and all(self.split(s) == other.split(s) for s in SPLITS)
        )


# ---------------------------------------------------------------------------
# Scene rendering


@dataclass
class SceneObject:
    sprite: np.ndarray  # (h, w, 3) uint8
    alpha: np.ndarray  # (h, w) bool
    x: int  # world position of the sprite's top-left corner
    y: int
    visible: list[bool] = field(default_factory=lambda: [True] * NUM_FRAMES)
    degraded_from: int | None = None
    degraded: np.ndarray | None = None
    popped: bool = False

    def pixels(self, k: int) -> np.ndarray:
        if self.degraded_from is not None and k >= self.degraded_from:
            return self.degraded
        return self.sprite


@dataclass
class Scene:
    background: np.ndarray  # (H_world, W_world, 3) uint8
    objects: list[SceneObject]
    offsets: list[int]  # camera x offset per frame
    height: int
    width: int
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def render(self, noise: bool = True) -> np.ndarray:
        frames = np.empty((NUM_FRAMES, self.height, self.width, 3), dtype=np.uint8)
        for k in range(NUM_FRAMES):
            world = self.background.copy()
            for obj in self.objects:
                if not obj.visible[k]:
                    continue
                h, w = obj.alpha.shape
                region = world[obj.y : obj.y + h, obj.x : obj.x + w]
                region[obj.alpha] = obj.pixels(k)[obj.alpha]
            off = self.offsets[k]
            frames[k] = world[: self.height, off : off + self.width]
        if noise and self.noise_sigma > 0:
            for k in range(NUM_FRAMES):
                rng = np.random.default_rng([self.noise_seed, k])
                noisy = frames[k].astype(np.float64) + rng.normal(0.0, self.noise_sigma, frames[k].shape)
                frames[k] = np.clip(np.floor(noisy + 0.5), 0, 255).astype(np.uint8)
        return frames

    def box_in_frame(self, obj: SceneObject, k: int) -> BoundingBox:
        rows = np.flatnonzero(obj.alpha.any(axis=1))
        cols = np.flatnonzero(obj.alpha.any(axis=0))
        x0 = obj.x - self.offsets[k]
        return BoundingBox(
            float(x0 + cols[0]), float(obj.y + rows[0]), float(x0 + cols[-1] + 1), float(obj.y + rows[-1] + 1)
        )


def degrade_sprite(sprite: np.ndarray, factor: int = 4) -> np.ndarray:
    """Bilinear downsample by ``factor`` followed by nearest-neighbour upsample."""
    h, w = sprite.shape[:2]
    img = Image.fromarray(sprite)
    small = img.resize((max(1, -(-w // factor)), max(1, -(-h // factor))), Image.BILINEAR)
    return np.asarray(small.resize((w, h), Image.NEAREST), dtype=np.uint8).copy()


def title_palette(style: TitleStyle) -> np.ndarray:
    rng = np.random.default_rng(style.palette_seed)
    return rng.integers(0, 256, size=(8, 3), dtype=np.int64).astype(np.uint8)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    gh, gw = max(2, h // cell + 2), max(2, w // cell + 2)
    grid = (rng.random((gh, gw)) * 255).astype(np.uint8)
    up = Image.fromarray(grid).resize((gw * cell, gh * cell), Image.BILINEAR)
    return np.asarray(up, dtype=np.float64)[:h, :w] / 255.0


def _blend(c0, c1, t: np.ndarray) -> np.ndarray:
    c0 = np.asarray(c0, dtype=np.float64)
    c1 = np.asarray(c1, dtype=np.float64)
    return c0 * (1 - t[..., None]) + c1 * t[..., None]


def _background(style: TitleStyle, palette: np.ndarray, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kind = style.background_kind
    if kind == "park":
        grass = np.array([60, 140, 60]) * 0.6 + palette[0] * 0.4
        t = _smooth_noise(rng, h, w, 16)
        img = _blend(grass * 0.75, grass * 1.15, t)
        # winding path
        ys = np.arange(h)[:, None]
        xs = np.arange(w)[None, :]
        centre = h / 2 + (h / 4) * np.sin(xs / max(w, 1) * 2 * np.pi + rng.uniform(0, 2 * np.pi))
        path = np.abs(ys - centre) < 3
        img[path] = np.array([190, 170, 120]) * 0.7 + palette[1] * 0.3
    elif kind == "indoor":
        tile = int(rng.integers(6, 12))
        ys, xs = np.mgrid[0:h, 0:w]
        checker = ((ys // tile + xs // tile) % 2).astype(np.float64)
        img = _blend(palette[2] * 0.5 + 40, palette[3] * 0.5 + 90, checker * 0.6)
        wall = ys < h // 5
        img[wall] = palette[4] * 0.4 + 60
    else:  # terrain
        t = 0.65 * _smooth_noise(rng, h, w, 12) + 0.35 * _smooth_noise(rng, h, w, 5)
        img = _blend(np.array([110, 90, 60]) * 0.6 + palette[5] * 0.4, np.array([150, 150, 140]), t)
    return np.clip(img, 0, 255).astype(np.uint8)


def _make_object(palette: np.ndarray, rng: np.random.Generator, world_h: int, world_w: int) -> SceneObject:
    oh, ow = (int(v) for v in rng.integers(8, 21, size=2))
    ys, xs = np.mgrid[0:oh, 0:ow]
    shape = rng.integers(0, 3)
    if shape == 0:
        alpha = np.ones((oh, ow), dtype=bool)
    elif shape == 1:
        alpha = ((ys + 0.5 - oh / 2) / (oh / 2)) ** 2 + ((xs + 0.5 - ow / 2) / (ow / 2)) ** 2 <= 1.0
    else:
        alpha = np.abs(ys + 0.5 - oh / 2) / (oh / 2) + np.abs(xs + 0.5 - ow / 2) / (ow / 2) <= 1.0
    base = palette[rng.integers(0, len(palette))].astype(np.float64)
    accent = 255.0 - base
    period = int(rng.integers(2, 4))
    pattern = rng.integers(0, 3)
    if pattern == 0:
        stripes = (ys // period) % 2
    elif pattern == 1:
        stripes = (xs // period) % 2
    else:
        stripes = ((ys // period) + (xs // period)) % 2
    sprite = _blend(base, accent, stripes.astype(np.float64) * 0.7)
    sprite = np.clip(sprite, 0, 255).astype(np.uint8)
    x = int(rng.integers(0, max(1, world_w - ow)))
    y = int(rng.integers(0, max(1, world_h - oh)))
    return SceneObject(sprite=sprite, alpha=alpha, x=x, y=y)


def make_scene(
    style: TitleStyle,
    rng: np.random.Generator,
    image_size: tuple[int, int] = (64, 64),
    static_pop_window: bool = True,
    palette: np.ndarray | None = None,
) -> Scene:
    """Lay out a bug-free scene and its four camera poses."""
    h, w = image_size
    if h <= 0 or w <= 0:
        raise ValueError("image dimensions must be positive")
    palette = title_palette(style) if palette is None else palette
    speed = style.camera_speed_px_per_frame
    travel = int(np.ceil(speed * (NUM_FRAMES - 1)))
    world_w = w + travel
    background = _background(style, palette, rng, h, world_w)
    n_objects = max(1, int(np.floor(style.object_density * 12 + 0.5)))
    objects = [_make_object(palette, rng, h, world_w) for _ in range(n_objects)]
    if static_pop_window:
        pose = int(np.floor(speed * POP_FRAME + 0.5))
        offsets = [pose] * NUM_FRAMES
    else:
        offsets = [int(np.floor(speed * k + 0.5)) for k in range(NUM_FRAMES)]
    return Scene(
        background=background,
        objects=objects,
        offsets=offsets,
        height=h,
        width=w,
        noise_sigma=style.noise_sigma,
        noise_seed=int(rng.integers(0, 2**63 - 1)),
    )


def inject_pop(scene: Scene, bug_class: str, rng: np.random.Generator) -> tuple[np.ndarray, Annotation]:
    """Inject one pop bug into ``scene`` in place.

    Returns the re-rendered frames and the frame-2 annotation. Raises
    :class:`NoEligibleObject` when no unpopped object is fully in view at
    frame 2 with a visible change of at least ``MIN_POP_AREA`` pixels.
    """
    if bug_class not in BUG_CLASSES:
        raise ValueError(f"unknown bug class {bug_class!r}")
    order = rng.permutation(len(scene.objects)) if scene.objects else []
    appear = bool(rng.integers(0, 2))
    for i in order:
        obj = scene.objects[i]
        if obj.popped:
            continue
        box = scene.box_in_frame(obj, POP_FRAME)
        if box.area < MIN_POP_AREA or not box.inside(scene.height, scene.width):
            continue
        before = scene.render(noise=False)
        saved = (list(obj.visible), obj.degraded_from, obj.degraded)
        if bug_class == "culling_pop":
            obj.visible = [False, False, True, True] if appear else [True, True, False, False]
        else:
            obj.degraded = degrade_sprite(obj.sprite)
            obj.degraded_from = POP_FRAME
        after = scene.render(noise=False)
        x0, y0, x1, y1 = (int(v) for v in box.as_tuple())
        # the change must be visible at the pop frame and absent from the frames before it
        changed = np.any(after[POP_FRAME, y0:y1, x0:x1] != after[POP_FRAME - 1, y0:y1, x0:x1], axis=-1)
        changed_before = np.any(after[:POP_FRAME] != before[:POP_FRAME]) if bug_class == "lod_pop" else False
        if changed.sum() >= MIN_POP_AREA and not changed_before:
            obj.popped = True
            return scene.render(), Annotation(box=box, bug_class=bug_class, frame_index=POP_FRAME)
        obj.visible, obj.degraded_from, obj.degraded = saved
    raise NoEligibleObject("no eligible object")


# ---------------------------------------------------------------------------
# Dataset generation


def sequence_rng(seed: int, sequence_id: str) -> np.random.Generator:
    """Independent stream per sequence, so generation order does not matter."""
    digest = hashlib.sha256(sequence_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def generate_sequence(
    style: TitleStyle,
    sequence_id: str,
    split: str,
    seed: int,
    image_size: tuple[int, int] = (64, 64),
    static_pop_window: bool = True,
    bug_classes: tuple[str, ...] = BUG_CLASSES,
    extra_pop_prob: float = 0.1,
    max_pops: int = 3,
    unlabeled_pop_rate: float = 0.5,
    palette: np.ndarray | None = None,
) -> FrameSequence:
    rng = sequence_rng(seed, sequence_id)
    palette = title_palette(style) if palette is None else palette
    labeled = split in LABELED_SPLITS
    for _ in range(50):
        scene = make_scene(style, rng, image_size, static_pop_window, palette)
        if labeled:
            n_pops = 1
            while n_pops < max_pops and rng.random() < extra_pop_prob:
                n_pops += 1
        else:
            n_pops = int(rng.random() < unlabeled_pop_rate)
        annotations = []
        for _ in range(n_pops):
            cls = bug_classes[int(rng.integers(0, len(bug_classes)))]
            try:
                _, ann = inject_pop(scene, cls, rng)
            except NoEligibleObject:
                break
            annotations.append(ann)
        if not labeled or annotations:
            break
    else:
        raise RuntimeError(f"could not place a pop in sequence {sequence_id}")
    return FrameSequence(
        sequence_id=sequence_id,
        title_id=style.title_id,
        frames=scene.render(),
        annotations=tuple(annotations) if labeled else (),
        split=split,
    )


def generate_title(
    style: TitleStyle,
    n_train: int,
    n_val: int,
    n_test: int,
    n_unlabeled: int = 2000,
    seed: int = 0,
    *,
    image_size: tuple[int, int] = (64, 64),
    patch_size: int | None = None,
    static_pop_window: bool = True,
    bug_classes: tuple[str, ...] = BUG_CLASSES,
    extra_pop_prob: float = 0.1,
    max_pops: int = 3,
    unlabeled_pop_rate: float = 0.5,
    max_sequences: int = MAX_SEQUENCES_PER_SPLIT,
) -> TitleDataset:
    """Generate train/validation/test splits and an unlabeled pool for one title.

    Unlabeled sequences are rendered with pops injected at
    ``unlabeled_pop_rate`` and then stripped of their annotations, the way a
    randomly sampled gameplay pool would look.
    """
    h, w = image_size
    if h <= 0 or w <= 0:
        raise ValueError("zero image dimensions")
    if patch_size is not None and (h % patch_size or w % patch_size):
        raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
    counts = {"train": n_train, "validation": n_val, "test": n_test, "unlabeled": n_unlabeled}
    for name, n in counts.items():
        if n < 0:
            raise ValueError(f"negative count for {name}")
        if n > max_sequences:
            raise ValueError(f"{name} count {n} exceeds safety cap {max_sequences}")
    bug_classes = tuple(bug_classes)
    palette = title_palette(style)
    ds = TitleDataset(
        style=style,
        seed=seed,
        image_size=(h, w),
        options={
            "static_pop_window": static_pop_window,
            "bug_classes": list(bug_classes),
            "extra_pop_prob": extra_pop_prob,
            "max_pops": max_pops,
            "unlabeled_pop_rate": unlabeled_pop_rate,
        },
    )
    for split, n in counts.items():
        seqs = ds.split(split)
        for i in range(n):
            seqs.append(
                generate_sequence(
                    style,
                    f"{style.title_id}-{split}-{i:05d}",
                    split,
                    seed,
                    (h, w),
                    static_pop_window,
                    bug_classes,
                    extra_pop_prob,
                    max_pops,
                    unlabeled_pop_rate,
                    palette,
                )
            )
    return ds


# ---------------------------------------------------------------------------
# Persistence


def _png_bytes(frame: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(frame, mode="RGB").save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def _format_boxes(annotations) -> str:
    lines = []
    for a in annotations:
        b = a.box
        lines.append(f"{a.frame_index} {b.x_min!r} {b.y_min!r} {b.x_max!r} {b.y_max!r} {a.bug_class}")
    return "".join(line + "\n" for line in lines)


def _parse_boxes(text: str, where: str) -> tuple[Annotation, ...]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise DatasetError(f"{where}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            box = BoundingBox(*(float(p) for p in parts[1:5]))
            out.append(Annotation(box=box, bug_class=parts[5], frame_index=int(parts[0])))
        except ValueError as exc:
            raise DatasetError(f"{where}:{lineno}: {exc}") from exc
    return tuple(out)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_dataset(dataset: TitleDataset, root: str | os.PathLike) -> dict:
    """Write ``dataset`` under ``root`` atomically and return the manifest.

    Everything is staged in a sibling temporary directory and renamed into
    place, so a failed write never leaves a partial dataset behind.
    """
    root = Path(root)
    root.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{root.name}.", dir=root.parent))
    try:
        checksums = {}
        splits = {}
        for split in SPLITS:
            seqs = dataset.split(split)
            for seq in seqs:
                d = staging / split / seq.sequence_id
                d.mkdir(parents=True)
                for k in range(NUM_FRAMES):
                    data = _png_bytes(seq.frames[k])
                    (d / f"frame_{k}.png").write_bytes(data)
                    checksums[f"{split}/{seq.sequence_id}/frame_{k}.png"] = _sha256(data)
                data = _format_boxes(seq.annotations).encode("utf-8")
                (d / "boxes").write_bytes(data)
                checksums[f"{split}/{seq.sequence_id}/boxes"] = _sha256(data)
            splits[split] = {
                "images": len(seqs),
                "pops": sum(len(s.annotations) for s in seqs),
                "sequences": [s.sequence_id for s in seqs],
            }
        manifest = {
            "format": FORMAT_VERSION,
            "title_id": dataset.style.title_id,
            "seed": dataset.seed,
            "image_size": list(dataset.image_size),
            "style": dataset.style.to_dict(),
            "options": dataset.options,
            "splits": splits,
            "checksums": checksums,
        }
        (staging / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if root.exists():
            old = root.parent / f".{root.name}.old"
            if old.exists():
                shutil.rmtree(old)
            os.replace(root, old)
            os.replace(staging, root)
            shutil.rmtree(old)
        else:
            os.replace(staging, root)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return manifest


def read_manifest(root: str | os.PathLike) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {manifest.get('format')!r}")
    return manifest


def read_dataset(root: str | os.PathLike, splits: tuple[str, ...] = SPLITS) -> TitleDataset:
    """Load a dataset written by :func:`write_dataset`, verifying checksums."""
    root = Path(root)
    manifest = read_manifest(root)
    checksums = manifest["checksums"]

    def load(rel: str) -> bytes:
        path = root / rel
        if not path.is_file():
            raise DatasetError(f"missing file: {path}")
        data = path.read_bytes()
        if checksums.get(rel) != _sha256(data):
            raise DatasetError(f"checksum mismatch: {path}")
        return data

    style = TitleStyle.from_dict(manifest["style"])
    ds = TitleDataset(
        style=style,
        seed=manifest["seed"],
        image_size=tuple(manifest["image_size"]),
        options=manifest.get("options", {}),
    )
    for split in splits:
        entry = manifest["splits"][split]
        seqs = ds.split(split)
        for sid in entry["sequences"]:
            frames = np.stack(
                [np.asarray(Image.open(io.BytesIO(load(f"{split}/{sid}/frame_{k}.png"))).convert("RGB")) for k in range(NUM_FRAMES)]
            )
            anns = _parse_boxes(load(f"{split}/{sid}/boxes").decode("utf-8"), f"{split}/{sid}/boxes")
            try:
                seqs.append(FrameSequence(sid, style.title_id, frames, anns, split))
            except ValueError as exc:
                raise DatasetError(f"{split}/{sid}: {exc}") from exc
        actual = {"images": len(seqs), "pops": sum(len(s.annotations) for s in seqs)}
        if actual != {"images": entry["images"], "pops": entry["pops"]}:
            raise DatasetError(f"{split}: manifest counts {entry} disagree with contents {actual}")
    return ds
