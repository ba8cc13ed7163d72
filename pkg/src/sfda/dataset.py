"""Procedural two-domain segmentation corpus.

Scenes are a horizon-split background (two classes) with a handful of
textured shapes on top. The target domain shares the label layout of the
source domain for a given seed; only the rendered image is shifted (hue
rotation, sensor noise, texture frequency).
"""
from __future__ import annotations

import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

SOURCE = "source"
TARGET = "target"
MANIFEST_NAME = "manifest.json"
MAX_SHAPES = 6
HUE_JITTER_DEG = 15.0
_VALUES = (0.35, 0.9, 0.6, 0.75, 0.5, 0.95, 0.4)


@dataclass(frozen=True)
class ShiftParams:
    hue_deg: float = 0.0
    noise_std: float = 0.0
    texture_scale: float = 1.0

    @property
    def is_identity(self) -> bool:
        return self.hue_deg == 0.0 and self.noise_std == 0.0 and self.texture_scale == 1.0


TARGET_SHIFT = ShiftParams(hue_deg=40.0, noise_std=0.05, texture_scale=1.6)

SHIFT_PRESETS = {
    "none": ShiftParams(),
    "default": TARGET_SHIFT,
    "mild": ShiftParams(hue_deg=20.0, noise_std=0.03, texture_scale=1.3),
    "strong": ShiftParams(hue_deg=60.0, noise_std=0.08, texture_scale=2.0),
}


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 5
    image_height: int = 64
    image_width: int = 64
    domain_id: str = SOURCE
    shift: ShiftParams = field(default_factory=ShiftParams)

    def validate(self, divisors: Sequence[int] = ()) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_height <= 0 or self.image_width <= 0:
            raise ValueError(
                f"image dimensions must be positive, got {self.image_height}x{self.image_width}"
            )
        if self.domain_id not in (SOURCE, TARGET):
            raise ValueError(f"unknown domain_id {self.domain_id!r}")
        if self.domain_id == SOURCE and not self.shift.is_identity:
            raise ValueError("source domain must use identity shift parameters")
        for d in divisors:
            if self.image_height % d or self.image_width % d:
                raise ValueError(
                    f"image size {self.image_height}x{self.image_width} not divisible by {d}"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["shift"] = ShiftParams(**d.get("shift", {}))
        return cls(**d)


def source_spec(num_classes: int = 5, size: int = 64) -> SceneSpec:
    return SceneSpec(num_classes, size, size, SOURCE, ShiftParams())


def target_spec(num_classes: int = 5, size: int = 64, shift: ShiftParams = TARGET_SHIFT) -> SceneSpec:
    return SceneSpec(num_classes, size, size, TARGET, shift)


@dataclass
class LabeledSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1], quantized to 8-bit levels
    labels: np.ndarray  # (H, W) int64


def class_palette(num_classes: int) -> np.ndarray:
    """Base RGB color per class: golden-angle hues, distinct brightness levels."""
    hsv = np.zeros((num_classes, 3))
    for c in range(num_classes):
        hsv[c] = ((c * 137.508) % 360.0 / 360.0, 0.45 + 0.35 * (c % 2), _VALUES[c % len(_VALUES)])
    return _hsv_to_rgb(hsv)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(hsv.shape)
    for k, (r, g, b) in enumerate(choices):
        m = i == k
        out[..., 0][m], out[..., 1][m], out[..., 2][m] = r[m], g[m], b[m]
    return out


# RGB <-> YIQ; hue rotation is a rotation of the (I, Q) chroma plane.
_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    rot = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    return _YIQ2RGB @ rot @ _RGB2YIQ


def _layout(rng: np.random.Generator, C: int, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    horizon = rng.uniform(0.35, 0.6) * H + rng.uniform(-0.15, 0.15) * (xx - W / 2)
    labels = np.where(yy < horizon, 0, 1).astype(np.int64)
    if C == 2:
        return labels
    extra = list(range(2, C))
    n = int(rng.integers(max(2, len(extra)), max(MAX_SHAPES, len(extra)) + 1))
    # random fill first, guaranteed coverage of every shape class drawn last (on top)
    classes = list(rng.choice(extra, size=n - len(extra))) + list(rng.permutation(extra))
    for c in classes:
        kind = rng.integers(3)
        # each shape class lives in its own vertical band, like objects in street scenes
        anchor = 0.2 + 0.6 * (c - 2) / max(C - 3, 1)
        cy, cx = (anchor + rng.uniform(-0.15, 0.15)) * H, rng.uniform(0.1, 0.9) * W
        ry, rx = rng.uniform(0.08, 0.2) * H, rng.uniform(0.08, 0.2) * W
        if kind == 0:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        elif kind == 1:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            # upward triangle inscribed in the box
            rel = (yy - (cy - ry)) / (2 * ry)
            mask = (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * rx)
        labels[mask] = c
    return labels


def generate_scene(seed: int, spec: SceneSpec) -> LabeledSample:
    """Render one sample. Deterministic in (seed, spec); labels ignore the domain."""
    spec.validate()
    C, H, W = spec.num_classes, spec.image_height, spec.image_width
    rng = np.random.default_rng([seed, 0])
    labels = _layout(rng, C, H, W)
    phases = rng.uniform(0, 2 * np.pi, size=C)
    illum = rng.uniform(0.85, 1.15)
    # per-scene white-balance drift, identical in both domains
    hue = rng.uniform(-HUE_JITTER_DEG, HUE_JITTER_DEG) + spec.shift.hue_deg

    palette = class_palette(C)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    theta = np.pi * np.arange(C) / C
    freq = (0.08 + 0.04 * (np.arange(C) % 3)) * spec.shift.texture_scale
    proj = np.cos(theta)[labels] * xx + np.sin(theta)[labels] * yy
    texture = 1.0 + 0.25 * np.sin(2 * np.pi * freq[labels] * proj + phases[labels])
    img = palette[labels] * (texture * illum)[..., None]  # (H, W, 3)

    img = img @ hue_rotation_matrix(hue).T
    if spec.shift.noise_std:
        noise_rng = np.random.default_rng([seed, 1])
        img = img + noise_rng.normal(0.0, spec.shift.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0
    return LabeledSample(img.transpose(2, 0, 1).astype(np.float32), labels)


@dataclass
class DatasetManifest:
    root: Path
    split: str
    count: int
    spec: SceneSpec
    seed: int
    images: list[str]
    labels: list[str]

    @property
    def split_dir(self) -> Path:
        return Path(self.root) / self.split

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "count": self.count,
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "images": self.images,
            "labels": self.labels,
        }

    def save(self) -> Path:
        path = self.split_dir / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text())
        if d["count"] != len(d["images"]) or d["count"] != len(d["labels"]):
            raise ValueError(f"manifest {path} count does not match file lists")
        return cls(
            root=path.parent.parent,
            split=d["split"],
            count=d["count"],
            spec=SceneSpec.from_dict(d["spec"]),
            seed=d["seed"],
            images=d["images"],
            labels=d["labels"],
        )


def sample_seed(seed: int, index: int) -> int:
    return seed * 1_000_003 + index


def build_dataset(
    n: int,
    spec: SceneSpec,
    seed: int,
    out_dir: str | os.PathLike,
    split: str | None = None,
    force: bool = False,
) -> DatasetManifest:
    """Write ``n`` samples to ``out_dir/<split>/`` and return the manifest."""
    spec.validate()
    split = split or spec.domain_id
    root = Path(out_dir)
    split_dir = root / split
    if split_dir.exists():
        if not force:
            raise FileExistsError(f"{split_dir} exists; pass force=True to overwrite")
        shutil.rmtree(split_dir)
    (split_dir / "images").mkdir(parents=True)
    (split_dir / "labels").mkdir(parents=True)

    images, labels = [], []
    for i in range(n):
        sample = generate_scene(sample_seed(seed, i), spec)
        img_rel, lab_rel = f"images/{i:05d}.png", f"labels/{i:05d}.png"
        rgb = np.round(sample.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb).save(split_dir / img_rel)
        Image.fromarray(sample.labels.astype(np.uint8)).save(split_dir / lab_rel)
        images.append(img_rel)
        labels.append(lab_rel)

    manifest = DatasetManifest(root, split, n, spec, seed, images, labels)
    manifest.save()
    return manifest


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise ValueError(f"{path}: expected mode {mode}, got {im.mode}")
            return np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"corrupt or unreadable file {path}: {exc}") from exc


def load_batch(manifest: DatasetManifest, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Images ``(B, 3, H, W)`` float32 in [0, 1] and labels ``(B, H, W)`` int64."""
    imgs, labs = [], []
    for i in indices:
        if not 0 <= i < manifest.count:
            raise IndexError(f"index {i} out of range for split of size {manifest.count}")
        rgb = _read_png(manifest.split_dir / manifest.images[i], "RGB")
        lab = _read_png(manifest.split_dir / manifest.labels[i], "L")
        imgs.append(rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
        labs.append(lab.astype(np.int64))
    C, H, W = manifest.spec.num_classes, manifest.spec.image_height, manifest.spec.image_width
    if not imgs:
        return np.zeros((0, 3, H, W), np.float32), np.zeros((0, H, W), np.int64)
    labels = np.stack(labs)
    if labels.max() >= C:
        raise ValueError(f"label id {labels.max()} >= num_classes {C}")
    return np.stack(imgs), labels


def load_split(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    return load_batch(manifest, range(manifest.count))


SPLITS = ("source_train", "source_test", "target_train", "target_test")


def build_domain_pair(
    root: str | os.PathLike,
    num_classes: int = 5,
    size: int = 64,
    n_train: int = 500,
    n_test: int = 100,
    seed: int = 0,
    shift: ShiftParams = TARGET_SHIFT,
    force: bool = False,
) -> dict[str, DatasetManifest]:
    """Source/target train/test splits under ``root``. Test splits use disjoint seeds."""
    src, tgt = source_spec(num_classes, size), target_spec(num_classes, size, shift)
    # target train scenes are a different draw from source train scenes
    return {
        "source_train": build_dataset(n_train, src, seed, root, "source_train", force),
        "source_test": build_dataset(n_test, src, seed + 1, root, "source_test", force),
        "target_train": build_dataset(n_train, tgt, seed + 2, root, "target_train", force),
        "target_test": build_dataset(n_test, tgt, seed + 3, root, "target_test", force),
    }
