"""Data ingestion: manifests, preprocessing, reference batches, toy shapes.

Images travel through the package as float32 NCHW torch tensors in [-1, 1].
Manifests are plain ``path,label`` CSV files with labels 0, 1, or ``unknown``.
The procedural two-class ellipse dataset stands in for a full-scale binary
pathology-conditioned corpus in desk-scale experiments: class 1 draws a
clearly larger ellipse than class 0 on a textured background, so conditional
generation has a checkable ground truth.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ContractError, ManifestError

LABELS = (0, 1)

# Reference-batch sizes used by the full-scale evaluations these tools mirror.
REFERENCE_BATCH_PRESETS = {"airogs": 6540, "crcdx": 19958, "chexpert": 15738}


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int | None  # None = unknown status


@dataclass(frozen=True)
class DatasetManifest:
    rows: tuple[ManifestRow, ...]
    name: str = "dataset"
    channels: int = 1
    native_size: int | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def class_counts(self) -> dict:
        counts: dict = {0: 0, 1: 0, None: 0}
        for row in self.rows:
            counts[row.label] += 1
        return counts


def load_manifest(path, name: str | None = None, channels: int = 1,
                  native_size: int | None = None) -> DatasetManifest:
    """Parse a ``path,label`` CSV; labels must be 0, 1, or ``unknown``."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    rows: list[ManifestRow] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise ManifestError(f"{path}:1: expected header 'path,label', got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 fields, got {len(rec)}")
            img_path, label_str = rec[0].strip(), rec[1].strip()
            if not img_path:
                raise ManifestError(f"{path}:{lineno}: empty image path")
            if img_path in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate path {img_path!r} "
                    f"(first at line {seen[img_path]})"
                )
            seen[img_path] = lineno
            if label_str == "unknown":
                label = None
            elif label_str in ("0", "1"):
                label = int(label_str)
            else:
                raise ManifestError(
                    f"{path}:{lineno}: label {label_str!r} not in {{0, 1, unknown}}"
                )
            rows.append(ManifestRow(path=img_path, label=label))
    return DatasetManifest(
        rows=tuple(rows),
        name=name or path.stem,
        channels=channels,
        native_size=native_size,
    )


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        for row in manifest.rows:
            writer.writerow([row.path, "unknown" if row.label is None else row.label])


def relabel(manifest: DatasetManifest, policy) -> DatasetManifest:
    """Resolve unknown labels; known labels and row count are never touched.

    ``policy`` is one of ``identity``, ``unknown_to_0``, ``unknown_to_1``, a
    dict mapping image path to label, or the path of a ``path,label`` CSV
    providing such a mapping.  Any unknown row the policy does not cover is
    an error.
    """
    mapping: dict[str, int] | None = None
    if isinstance(policy, dict):
        mapping = policy
    elif isinstance(policy, (str, Path)) and policy not in (
        "identity", "unknown_to_0", "unknown_to_1",
    ):
        mapped = load_manifest(policy, name="relabel-map")
        mapping = {}
        for row in mapped.rows:
            if row.label is None:
                raise ManifestError(f"relabel map {policy} has an unknown label itself")
            mapping[row.path] = row.label

    new_rows = []
    for row in manifest.rows:
        if row.label is not None:
            new_rows.append(row)
            continue
        if policy == "identity" and mapping is None:
            raise ManifestError(f"identity policy cannot resolve unknown label: {row.path}")
        if mapping is not None:
            if row.path not in mapping:
                raise ManifestError(f"relabel policy does not cover {row.path}")
            new_rows.append(ManifestRow(path=row.path, label=mapping[row.path]))
        elif policy == "unknown_to_0":
            new_rows.append(ManifestRow(path=row.path, label=0))
        elif policy == "unknown_to_1":
            new_rows.append(ManifestRow(path=row.path, label=1))
        else:
            raise ManifestError(f"unknown relabel policy {policy!r}")
    return DatasetManifest(
        rows=tuple(new_rows),
        name=manifest.name,
        channels=manifest.channels,
        native_size=manifest.native_size,
    )


# ---------------------------------------------------------------------------
# image loading and preprocessing


def load_image(path) -> np.ndarray:
    """Decode an image file to uint8 (H, W) or (H, W, C)."""
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc


def preprocess(image: np.ndarray, target_size: int) -> torch.Tensor:
    """Bilinear-resize 8-bit pixels to target and map to [-1, 1] (CHW float32).

    0 maps to -1, 255 to +1; grayscale stays single-channel.  Inputs already
    at the target size skip the resample, so preprocessing already-sized
    data is the pure intensity map.
    """
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise ContractError(f"expected 8-bit pixels, got dtype {arr.dtype}")
    if arr.ndim not in (2, 3):
        raise ContractError(f"expected (H, W) or (H, W, C) pixels, got shape {arr.shape}")
    if arr.shape[0] != target_size or arr.shape[1] != target_size:
        pil = Image.fromarray(arr)
        pil = pil.resize((target_size, target_size), Image.BILINEAR)
        arr = np.asarray(pil)
    out = arr.astype(np.float32) * 2.0 / 255.0 - 1.0  # hits -1 and +1 exactly
    if out.ndim == 2:
        out = out[None, :, :]
    else:
        out = out.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(out))


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """Rescale [-1, 1] images to 8-bit via (x + 1) / 2, NCHW -> NHWC."""
    arr = images.detach().clamp(-1.0, 1.0).numpy()
    arr = ((arr + 1.0) / 2.0 * 255.0).round().astype(np.uint8)
    return arr.transpose(0, 2, 3, 1)


def save_png(image: torch.Tensor, path) -> None:
    """Write one CHW [-1, 1] image as an 8-bit PNG."""
    arr = to_uint8(image[None])[0]
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_images(manifest: DatasetManifest, size: int, root=None):
    """Load every manifest row: ([-1,1] NCHW tensor, int64 label tensor)."""
    root = Path(root) if root is not None else None
    images, labels = [], []
    for row in manifest.rows:
        if row.label is None:
            raise ManifestError(f"cannot load unlabeled row {row.path}; relabel first")
        p = Path(row.path)
        if root is not None and not p.is_absolute():
            p = root / p
        images.append(preprocess(load_image(p), size))
        labels.append(row.label)
    return torch.stack(images), torch.tensor(labels, dtype=torch.int64)


# ---------------------------------------------------------------------------
# reference batches


@dataclass(frozen=True)
class ReferenceBatch:
    """Fixed, class-balanced subset of real items metrics are computed against."""

    items: tuple[ManifestRow, ...]
    per_class: dict
    seed: int
    descriptor: str

    def __len__(self) -> int:
        return len(self.items)


def build_reference_batch(manifest: DatasetManifest, n: int, seed: int) -> ReferenceBatch:
    """Sample exactly n/2 items per class without replacement, seeded."""
    if n % 2 != 0 or n < 2:
        raise ContractError(f"reference batch size must be even and >= 2, got {n}")
    per_class = n // 2
    rng = np.random.default_rng(seed)
    chosen: list[ManifestRow] = []
    for label in LABELS:
        pool = [row for row in manifest.rows if row.label == label]
        if len(pool) < per_class:
            raise ContractError(
                f"class {label} has {len(pool)} items, need {per_class} "
                f"(short by {per_class - len(pool)})"
            )
        idx = np.sort(rng.choice(len(pool), size=per_class, replace=False))
        chosen.extend(pool[i] for i in idx)
    digest = hashlib.sha256(
        json.dumps({"paths": [r.path for r in chosen], "seed": seed, "n": n}).encode()
    ).hexdigest()
    return ReferenceBatch(
        items=tuple(chosen),
        per_class={label: per_class for label in LABELS},
        seed=seed,
        descriptor=f"ref-n{n}-s{seed}-{digest[:16]}",
    )


# ---------------------------------------------------------------------------
# procedural toy dataset


@dataclass(frozen=True)
class ToyShapesConfig:
    """Two-class ellipse images: class 0 small, class 1 large, textured background."""

    size: int = 32
    noise_level: float = 0.03
    seed: int = 0

    # (min, max) ellipse radius as a fraction of image size, per class
    radius_ranges = ((0.09, 0.14), (0.22, 0.30))


def _toy_image(cfg: ToyShapesConfig, label: int, index: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, label, index])
    size = cfg.size

    # smooth background texture: low-resolution field, bilinearly upsampled
    field = rng.normal(size=(4, 4)).astype(np.float32)
    texture = F.interpolate(
        torch.from_numpy(field)[None, None], size=(size, size),
        mode="bilinear", align_corners=True,
    )[0, 0].numpy()
    img = -0.7 + 0.18 * texture

    lo, hi = cfg.radius_ranges[label]
    rx = rng.uniform(lo, hi) * size
    ry = rng.uniform(lo, hi) * size
    cx = size / 2 + rng.uniform(-0.12, 0.12) * size
    cy = size / 2 + rng.uniform(-0.12, 0.12) * size
    theta = rng.uniform(0.0, np.pi)
    value = 0.55 + rng.uniform(0.0, 0.25)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = (np.cos(theta) * dx + np.sin(theta) * dy) / rx
    v = (-np.sin(theta) * dx + np.cos(theta) * dy) / ry
    rho = np.sqrt(u * u + v * v)
    mask = 1.0 / (1.0 + np.exp(-(1.0 - rho) * 8.0))  # soft ~1px edge

    img = img * (1.0 - mask) + value * mask
    img += rng.normal(size=(size, size)) * cfg.noise_level
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def gen_toy_shapes(cfg: ToyShapesConfig, n: int, label: int):
    """Generate n images of one class: ((N,1,H,W) tensor, synthetic manifest).

    Sample i depends only on (seed, label, i), so a batch of n is a prefix
    of any larger batch with the same config.
    """
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if label not in LABELS:
        raise ContractError(f"label {label} not in {LABELS}")
    images = np.stack([_toy_image(cfg, label, i) for i in range(n)])[:, None]
    rows = tuple(
        ManifestRow(path=f"toy-s{cfg.seed}/label{label}/{i:05d}.png", label=label)
        for i in range(n)
    )
    manifest = DatasetManifest(rows=rows, name=f"toy-s{cfg.seed}", channels=1,
                               native_size=cfg.size)
    return torch.from_numpy(images), manifest


def gen_toy_dataset(cfg: ToyShapesConfig, n_per_class: int):
    """Balanced two-class batch: (images, labels, manifest), classes interleaved."""
    imgs0, man0 = gen_toy_shapes(cfg, n_per_class, 0)
    imgs1, man1 = gen_toy_shapes(cfg, n_per_class, 1)
    images = torch.empty(2 * n_per_class, 1, cfg.size, cfg.size)
    images[0::2] = imgs0
    images[1::2] = imgs1
    labels = torch.tensor([0, 1] * n_per_class, dtype=torch.int64)
    rows = []
    for r0, r1 in zip(man0.rows, man1.rows):
        rows.extend([r0, r1])
    manifest = DatasetManifest(rows=tuple(rows), name=man0.name, channels=1,
                               native_size=cfg.size)
    return images, labels, manifest


def write_toy_dataset(cfg: ToyShapesConfig, n_per_class: int, out_dir) -> Path:
    """Materialize the toy dataset as PNGs plus a manifest.csv; returns the manifest path."""
    out_dir = Path(out_dir)
    images, labels, manifest = gen_toy_dataset(cfg, n_per_class)
    rows = []
    for img, label, row in zip(images, labels, manifest.rows):
        rel = Path(row.path)
        dest = out_dir / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        save_png(img, dest)
        rows.append(ManifestRow(path=str(rel), label=int(label)))
    manifest_path = out_dir / "manifest.csv"
    save_manifest(DatasetManifest(rows=tuple(rows), name=manifest.name, channels=1,
                                  native_size=cfg.size), manifest_path)
    return manifest_path


def foreground_area(images: torch.Tensor, threshold: float = 0.2) -> torch.Tensor:
    """Bright-pixel count per image; separates the two toy classes nearly perfectly."""
    return (images > threshold).sum(dim=(1, 2, 3)).float()
