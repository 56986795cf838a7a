"""Face-image datasets, age brackets, augmentation and a synthetic bar dataset."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

AGE_BRACKETS = (
    (0, 2), (3, 6), (7, 12), (13, 17), (18, 22), (23, 26), (27, 33),
    (34, 44), (45, 59), (60, 69), (70, 79), (80, 89), (90, 99), (100, 116),
)
MAX_AGE = 116
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}
_UTK_NAME = re.compile(r"^(\d+)_([01])_(\d+)_(\d+)")


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    gender: int
    age: float | None = None

    @property
    def age_class(self) -> int | None:
        return None if self.age is None else age_to_class(self.age)


def age_to_class(age: float) -> int:
    """Index of the bracket containing ``age`` (fractional ages round down)."""
    if not 0 <= age <= MAX_AGE:
        raise ValueError(f"age {age} outside [0, {MAX_AGE}]")
    a = int(np.floor(age))
    for k, (_, hi) in enumerate(AGE_BRACKETS):
        if a <= hi:
            return k
    raise AssertionError("unreachable")


def bracket_label(k: int) -> str:
    lo, hi = AGE_BRACKETS[k]
    return f"[{lo}, {hi}]"


# ---------------------------------------------------------------------------
# images


def normalize(pixels: np.ndarray) -> np.ndarray:
    """uint8 pixel values -> float32 in [0, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / 255.0).astype(np.float32)


def read_image(path, shape: tuple[int, int, int]) -> np.ndarray:
    """Decode, resize to ``shape[:2]`` and convert to ``shape[2]`` channels."""
    from PIL import Image

    h, w, c = shape
    with Image.open(path) as img:
        img = img.convert("L" if c == 1 else "RGB").resize((w, h), Image.BILINEAR)
        arr = normalize(np.asarray(img))
    if c == 1:
        arr = arr[..., None]
    return arr


def parse_utkface_name(name: str) -> tuple[int, int] | None:
    """``age_gender_race_timestamp.jpg`` -> (age, gender), or None if malformed."""
    m = _UTK_NAME.match(Path(name).name)
    if not m:
        return None
    age, gender = int(m.group(1)), int(m.group(2))
    if age > MAX_AGE:
        return None
    return age, gender


def load_directory(path, naming: str = "utkface", shape=(128, 128, 1), stats: dict | None = None) -> list[Sample]:
    """Load a UTKFace-style directory or a CSV manifest.

    ``stats``, if given, receives the number of skipped files under ``"skipped"``.
    """
    path = Path(path)
    if naming == "csv-manifest":
        return load_manifest(path, shape)
    if naming != "utkface":
        raise ValueError(f"unknown naming {naming!r}")
    if not path.is_dir():
        raise DatasetError(f"{path}: not a readable directory")
    samples, skipped = [], 0
    for f in sorted(path.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        parsed = parse_utkface_name(f.name)
        if parsed is None:
            skipped += 1
            continue
        try:
            image = read_image(f, shape)
        except OSError:
            skipped += 1
            continue
        samples.append(Sample(image, parsed[1], float(parsed[0])))
    if skipped:
        log.warning("skipped %d malformed or unreadable files in %s", skipped, path)
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
    if not samples:
        raise DatasetError(f"{path}: no parseable samples")
    return samples


def load_manifest(path, shape=(128, 128, 1)) -> list[Sample]:
    """Read a ``path,gender,age`` CSV; image paths are relative to the CSV."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.is_file():
        raise DatasetError(f"{path}: manifest not found")
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "gender", "age"} <= set(reader.fieldnames):
            raise DatasetError(f"{path}: header must be path,gender,age")
        for lineno, row in enumerate(reader, start=2):
            try:
                gender = int(row["gender"])
                if gender not in (0, 1):
                    raise ValueError("gender must be 0 or 1")
                age = float(int(row["age"])) if row["age"].strip() else None
                if age is not None and not 0 <= age <= MAX_AGE:
                    raise ValueError("age out of range")
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            image_path = Path(row["path"])
            if not image_path.is_absolute():
                image_path = path.parent / image_path
            try:
                image = read_image(image_path, shape)
            except OSError as exc:
                raise DatasetError(f"{path}:{lineno}: cannot read {image_path}: {exc}") from None
            samples.append(Sample(image, gender, age))
    if not samples:
        raise DatasetError(f"{path}: manifest lists no samples")
    return samples


# ---------------------------------------------------------------------------
# augmentation


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :].copy()


def augment(sample: Sample, seed, pad: int = 4, force_flip: bool | None = None) -> Sample:
    """Random crop after zero-padding by ``pad``, then a 50% horizontal flip."""
    rng = np.random.default_rng(seed)
    img = sample.image
    h, w, _ = img.shape
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    out = padded[dy : dy + h, dx : dx + w]
    flip = rng.random() < 0.5 if force_flip is None else force_flip
    if flip:
        out = hflip(out)
    return replace(sample, image=np.ascontiguousarray(out))


# ---------------------------------------------------------------------------
# synthetic data


def synth_bars(
    n_samples: int,
    size: int = 16,
    noise: float = 0.3,
    seed=0,
    channels: int = 1,
    thickness: int = 2,
    with_age: bool = False,
) -> list[Sample]:
    """Horizontal bars (gender 0) versus vertical bars (gender 1) plus noise.

    The bar sits at a random offset; with ``with_age`` the offset is mapped
    linearly onto [0, 116] and used as a synthetic age. Pixel values are
    clipped to [0, 1]. Classes are balanced and shuffled.
    """
    if size < 8:
        raise ValueError("size must be >= 8")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % 2
    rng.shuffle(labels)
    span = size - thickness
    samples = []
    for label in labels:
        pos = int(rng.integers(0, span + 1))
        img = np.zeros((size, size), dtype=np.float64)
        if label == 0:
            img[pos : pos + thickness, :] = 1.0
        else:
            img[:, pos : pos + thickness] = 1.0
        if noise > 0:
            img = img + rng.normal(0.0, noise, size=img.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        image = np.repeat(img[..., None], channels, axis=2)
        age = float(round(MAX_AGE * pos / span)) if with_age else None
        samples.append(Sample(image, int(label), age))
    return samples


# ---------------------------------------------------------------------------
# batching


def split(samples: list, seed, fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    """Seeded shuffle then train/val/test split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(fractions[0] * len(samples)))
    n_val = int(round(fractions[1] * len(samples)))
    pick = [samples[k] for k in order]
    return pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]


def to_arrays(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    if not samples:
        raise DatasetError("empty dataset")
    x = np.stack([s.image for s in samples]).astype(np.float32)
    gender = np.array([s.gender for s in samples], dtype=np.float32)
    ages = [s.age for s in samples]
    age = None if any(a is None for a in ages) else np.array(ages, dtype=np.float32)
    return x, gender, age
