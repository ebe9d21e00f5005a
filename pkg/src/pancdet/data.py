"""Synthetic scans, flip augmentation and the on-disk dataset format.

A dataset directory holds ``dataset.json`` plus one folder per split::

    train/annotations.jsonl   {"image": "images/00000.png", "boxes": [[x1, y1, x2, y2], ...]}
    train/images/00000.png    8-bit grayscale
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

DATA_ENV = "PANCDET_DATA_DIR"

MIN_DIAMETER = 15.0
MAX_DIAMETER = 104.0


@dataclass
class SynthConfig:
    image_side: int = 256
    noise_sigma: float = 0.04
    contrast: tuple[float, float] = (0.22, 0.40)
    diameter_mean: float = 50.0
    diameter_sd: float = 18.0
    distractors: tuple[int, int] = (1, 4)
    distractor_contrast: tuple[float, float] = (0.01, 0.03)
    vessels: tuple[int, int] = (0, 3)


@dataclass
class Sample:
    name: str
    image: np.ndarray  # uint8 [H, W]
    boxes: np.ndarray  # (k, 4) float64

    def image_float(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0

    @property
    def has_tumor(self) -> bool:
        return len(self.boxes) > 0


# ------------------------------------------------------------------ synthesis


def draw_diameters(rng: np.random.Generator, n: int, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """Truncated normal on ``[15, 104]`` by rejection; most mass in ``[20, 80]``."""
    out = np.empty(0)
    while out.size < n:
        d = rng.normal(cfg.diameter_mean, cfg.diameter_sd, size=2 * n + 8)
        out = np.concatenate([out, d[(d >= MIN_DIAMETER) & (d <= MAX_DIAMETER)]])
    return out[:n]


def _blob(yy, xx, cx, cy, a, b, power: float = 4.0):
    r2 = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2
    return np.exp2(-(r2 ** (power / 2)))


def synth_scan(rng: np.random.Generator, with_tumor: bool, cfg: SynthConfig = SynthConfig()):
    """Render one image in ``[0, 1]`` and its boxes (zero or one)."""
    n = cfg.image_side
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    img = np.full((n, n), 0.45)
    # slow background variation
    for _ in range(4):
        cx, cy = rng.uniform(0, n, 2)
        s = rng.uniform(40, 120)
        img += rng.uniform(-0.08, 0.08) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    # organ-like region
    ocx, ocy = rng.uniform(0.35 * n, 0.65 * n, 2)
    img += 0.12 * _blob(yy, xx, ocx, ocy, rng.uniform(0.25, 0.4) * n, rng.uniform(0.15, 0.3) * n, 2.0)
    for _ in range(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1)):
        cx, cy = rng.uniform(0, n, 2)
        a, b = rng.uniform(8, 50, 2)
        img -= rng.uniform(*cfg.distractor_contrast) * _blob(yy, xx, cx, cy, a, b)
    for _ in range(rng.integers(cfg.vessels[0], cfg.vessels[1] + 1)):
        cx, cy = rng.uniform(0, n, 2)
        r = rng.uniform(3, 9)
        img += rng.uniform(0.15, 0.3) * _blob(yy, xx, cx, cy, r, r)
    boxes = np.zeros((0, 4))
    if with_tumor:
        d = float(draw_diameters(rng, 1, cfg)[0])
        aspect = rng.uniform(0.6, 1.0)
        w, h = (d, d * aspect) if rng.random() < 0.5 else (d * aspect, d)
        margin = 2.0
        cx = rng.uniform(margin + w / 2, n - margin - w / 2)
        cy = rng.uniform(margin + h / 2, n - margin - h / 2)
        img -= rng.uniform(*cfg.contrast) * _blob(yy, xx, cx, cy, w / 2, h / 2)
        boxes = np.array([[cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]])
    img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0), boxes


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_split(n: int, tumor_fraction: float, seed: int, split: str, cfg: SynthConfig = SynthConfig()) -> list[Sample]:
    split_id = {"train": 0, "test": 1}.get(split, 2)
    n_tumor = int(round(n * tumor_fraction))
    flags = np.zeros(n, dtype=bool)
    flags[:n_tumor] = True
    np.random.default_rng([seed, split_id, 10**6]).shuffle(flags)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, split_id, i])
        img, boxes = synth_scan(rng, bool(flags[i]), cfg)
        out.append(Sample(f"{i:05d}", to_uint8(img), boxes))
    return out


def generate_dataset(out_dir, n_train: int = 200, n_test: int = 60, tumor_fraction: float = 0.75, seed: int = 7, cfg: SynthConfig = SynthConfig()) -> Path:
    """Write a deterministic train/test dataset; splits use disjoint random streams."""
    if n_train <= 0 or n_test <= 0:
        raise ValueError("split sizes must be positive")
    if not 0.0 <= tumor_fraction <= 1.0:
        raise ValueError("tumor_fraction must lie in [0, 1]")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    for split, n in (("train", n_train), ("test", n_test)):
        write_split(out / split, generate_split(n, tumor_fraction, seed, split, cfg))
    meta = {"seed": seed, "train": n_train, "test": n_test, "tumor_fraction": tumor_fraction, "image_side": cfg.image_side}
    atomic_write_text(out / "dataset.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


# ------------------------------------------------------------------ flips


def augment_flips(image: np.ndarray, gts, mode: str):
    """Flip pixels and remap boxes. ``diagonal`` transposes; ``antidiagonal`` reflects across the other diagonal."""
    img = np.asarray(image)
    H, W = img.shape[-2:]
    b = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    x1, y1, x2, y2 = b.T
    if mode == "horizontal":
        return img[..., :, ::-1].copy(), np.stack([W - x2, y1, W - x1, y2], axis=1)
    if mode == "vertical":
        return img[..., ::-1, :].copy(), np.stack([x1, H - y2, x2, H - y1], axis=1)
    if mode in ("diagonal", "antidiagonal"):
        if H != W:
            raise ValueError(f"{mode} flip needs a square image, got {H}x{W}")
        if mode == "diagonal":
            return np.swapaxes(img, -1, -2).copy(), np.stack([y1, x1, y2, x2], axis=1)
        return np.swapaxes(img[..., ::-1, ::-1], -1, -2).copy(), np.stack([H - y2, W - x2, H - y1, W - x1], axis=1)
    raise ValueError(f"unknown flip mode {mode!r}")


# ------------------------------------------------------------------ file formats


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def boxes_to_annotation(image: str, boxes) -> str:
    rows = [[float(v) for v in row] for row in np.asarray(boxes, dtype=np.float64).reshape(-1, 4)]
    return json.dumps({"image": image, "boxes": rows})


def annotation_to_boxes(line: str) -> tuple[str, np.ndarray]:
    rec = json.loads(line)
    return rec["image"], np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4)


def write_split(split_dir, samples: list[Sample]) -> None:
    split_dir = Path(split_dir)
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"images/{s.name}.png"
        tmp = split_dir / "images" / f".{s.name}.png.tmp"
        Image.fromarray(np.ascontiguousarray(s.image, dtype=np.uint8)).save(tmp, format="PNG")
        os.replace(tmp, split_dir / rel)
        lines.append(boxes_to_annotation(rel, s.boxes))
    atomic_write_text(split_dir / "annotations.jsonl", "\n".join(lines) + "\n")


def load_split(data_dir, split: str) -> list[Sample]:
    split_dir = Path(data_dir) / split
    ann = split_dir / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"missing annotation file {ann}")
    out = []
    for lineno, line in enumerate(ann.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rel, boxes = annotation_to_boxes(line)
        except (ValueError, KeyError) as exc:
            raise ValueError(f"{ann}:{lineno}: bad annotation record: {exc}") from exc
        path = split_dir / rel
        try:
            with Image.open(path) as im:
                img = np.asarray(im.convert("L"), dtype=np.uint8)
        except OSError as exc:
            raise OSError(f"{path}: cannot read image: {exc}") from exc
        out.append(Sample(Path(rel).stem, img, boxes))
    return out


def resolve_data_dir(arg: str | None) -> Path:
    value = arg or os.environ.get(DATA_ENV)
    if not value:
        raise ValueError(f"no data directory given (pass --data or set {DATA_ENV})")
    return Path(value)
