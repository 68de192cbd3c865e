"""Dataset scanning, splitting, augmentation, preprocessing, and synthetic data."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError, DatasetError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Directory names recognized as the positive (stroke) class when collapsing
# a 3-class tree into the presence task.
_STROKE_DIR_NAMES = {"stroke", "hemorrhage", "hemorrhagic", "ischemia", "ischemic"}


@dataclass(frozen=True)
class Sample:
    path: Path
    label: int
    class_name: str


@dataclass
class DatasetIndex:
    samples: list
    class_names: list
    task: str  # "presence" or "subtype"

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self):
        return [s.label for s in self.samples]


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(not 0.0 < r < 1.0 for r in self.ratios):
            raise ConfigurationError(f"split ratios must be three fractions in (0,1), got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigurationError(f"split ratios must sum to 1, got {sum(self.ratios)}")


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    jitter_saturation: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if self.max_rotation_deg < 0:
            raise ConfigurationError("max_rotation_deg must be >= 0")
        if min(self.jitter_brightness, self.jitter_contrast, self.jitter_saturation) < 0:
            raise ConfigurationError("jitter ranges must be >= 0")


def _list_class_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DatasetError(f"dataset root has no class directories: {root}")
    return dirs


def _list_images(class_dir):
    files = sorted(p for p in class_dir.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise DatasetError(f"class directory has no readable images: {class_dir}")
    return files


def scan_dataset(root, task="subtype"):
    """Index ``root/<class_name>/<image>`` into a DatasetIndex.

    Class indices follow lexicographic order of the class directory names.
    For the presence task a 3-class tree is collapsed: every stroke-subtype
    directory maps to a single positive "stroke" class (label 1).
    """
    if task not in ("presence", "subtype"):
        raise ConfigurationError(f"unknown task: {task!r}")
    dirs = _list_class_dirs(root)

    if task == "presence" and len(dirs) != 2:
        positive = [d for d in dirs if d.name.lower() in _STROKE_DIR_NAMES]
        negative = [d for d in dirs if d.name.lower() not in _STROKE_DIR_NAMES]
        if not positive or len(negative) != 1:
            raise DatasetError(
                f"cannot collapse {sorted(d.name for d in dirs)} into presence classes; "
                "expected one non-stroke directory plus stroke subtype directories")
        class_names = [negative[0].name, "stroke"]
        mapping = {negative[0].name: (0, negative[0].name)}
        mapping.update({d.name: (1, "stroke") for d in positive})
    else:
        class_names = [d.name for d in dirs]
        mapping = {name: (i, name) for i, name in enumerate(class_names)}

    samples = []
    for d in dirs:
        label, class_name = mapping[d.name]
        for f in _list_images(d):
            samples.append(Sample(path=f, label=label, class_name=class_name))
    return DatasetIndex(samples=samples, class_names=class_names, task=task)


def split(index, spec):
    """Seeded random partition into (train, val, test).

    Train and val sizes are floored; test takes the remainder so the
    partition is exhaustive and the test split is never starved by rounding.
    """
    n = len(index)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    n_train = math.floor(n * spec.ratios[0])
    n_val = math.floor(n * spec.ratios[1])
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) == 0:
        raise DatasetError(f"split of {n} samples with ratios {spec.ratios} produces an empty partition")

    perm = np.random.default_rng(spec.seed).permutation(n)
    ordered = [index.samples[i] for i in perm]
    make = lambda chunk: DatasetIndex(samples=chunk, class_names=list(index.class_names), task=index.task)
    return (make(ordered[:n_train]),
            make(ordered[n_train:n_train + n_val]),
            make(ordered[n_train + n_val:]))


def _to_pil(image):
    if isinstance(image, Image.Image):
        return image, "pil"
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(arr), "array"


def augment(image, cfg, rng):
    """Apply flip / rotation / color jitter with all draws taken from ``rng``.

    The draw sequence is fixed (flip, angle, brightness, contrast,
    saturation) so outputs depend only on (image, cfg, rng state).
    Returns the input unchanged when cfg.enabled is false.
    """
    if not cfg.enabled:
        return image
    pil, kind = _to_pil(image)

    do_flip = rng.random() < cfg.hflip_prob
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    b = rng.uniform(max(0.0, 1.0 - cfg.jitter_brightness), 1.0 + cfg.jitter_brightness)
    c = rng.uniform(max(0.0, 1.0 - cfg.jitter_contrast), 1.0 + cfg.jitter_contrast)
    s = rng.uniform(max(0.0, 1.0 - cfg.jitter_saturation), 1.0 + cfg.jitter_saturation)

    if do_flip:
        pil = pil.transpose(Image.FLIP_LEFT_RIGHT)
    if cfg.max_rotation_deg > 0:
        pil = pil.rotate(angle, resample=Image.BILINEAR, fillcolor=0)

    from PIL import ImageEnhance
    if cfg.jitter_brightness > 0:
        pil = ImageEnhance.Brightness(pil).enhance(b)
    if cfg.jitter_contrast > 0:
        pil = ImageEnhance.Contrast(pil).enhance(c)
    if cfg.jitter_saturation > 0 and pil.mode == "RGB":
        pil = ImageEnhance.Color(pil).enhance(s)

    return pil if kind == "pil" else np.asarray(pil)


def preprocess(image, size=224):
    """Resize to ``size``×``size``, replicate grayscale to 3 channels, and
    standardize with the canonical ImageNet statistics.

    Accepts a PIL image, a uint8 array, or a float array already in [0,1];
    returns a float32 tensor of shape [3, size, size].
    """
    if isinstance(image, Image.Image):
        arr = np.asarray(image)
    else:
        arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    else:
        arr = arr.astype(np.float32)

    if arr.ndim == 2:
        arr = arr[None, :, :]
    elif arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)
    else:
        raise ConfigurationError(f"expected 2-D or 3-D image, got shape {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr))
    if x.shape[0] == 1:
        x = x.expand(3, -1, -1).contiguous()
    elif x.shape[0] == 4:  # drop alpha
        x = x[:3]
    elif x.shape[0] != 3:
        raise ConfigurationError(f"expected 1 or 3 channels, got {x.shape[0]}")

    if x.shape[1:] != (size, size):
        x = F.interpolate(x[None], size=(size, size), mode="bilinear", align_corners=False)[0]

    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def load_image(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.convert(im.mode if im.mode in ("L", "RGB") else "RGB")
    except (OSError, ValueError) as e:
        raise OSError(f"cannot decode image {path}: {e}") from e


def sample_tensor(sample, augment_cfg=None, rng=None, size=224):
    """Load one sample as a normalized [3,size,size] tensor, optionally augmented."""
    img = load_image(sample.path)
    if augment_cfg is not None and augment_cfg.enabled:
        img = augment(img, augment_cfg, rng)
    return preprocess(img, size=size)


SYNTHETIC_CLASSES = {
    "subtype": ["hemorrhage", "ischemia"],
    "presence": ["nonstroke", "stroke"],
}


def _synthetic_image(class_name, rng, size=64):
    """Grayscale CT-like stand-in with class-separable mean intensity."""
    img = rng.normal(110.0, 12.0, size=(size, size))
    yy, xx = np.mgrid[0:size, 0:size]

    kind = class_name
    if class_name == "stroke":  # presence positives mix both appearances
        kind = "hemorrhage" if rng.random() < 0.5 else "ischemia"

    if kind == "hemorrhage":
        cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
        r = rng.uniform(size * 0.12, size * 0.2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        img[mask] = 235.0 + rng.normal(0.0, 5.0, size=int(mask.sum()))
    elif kind == "ischemia":
        cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
        ry = rng.uniform(size * 0.2, size * 0.3)
        rx = rng.uniform(size * 0.2, size * 0.3)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[mask] = 40.0 + rng.normal(0.0, 8.0, size=int(mask.sum()))
    # nonstroke: background only
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_synthetic(n_per_class, task, seed, out, size=64):
    """Write a synthetic labeled dataset under ``out`` and index it.

    Per-image randomness derives from (seed, class index, image index), so
    the dataset is byte-identical for a fixed seed regardless of generation
    order.
    """
    if n_per_class < 1:
        raise ConfigurationError("n_per_class must be >= 1")
    if task not in SYNTHETIC_CLASSES:
        raise ConfigurationError(f"unknown task: {task!r}")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e

    class_names = SYNTHETIC_CLASSES[task]
    counts = {}
    for ci, name in enumerate(class_names):
        class_dir = out / name
        class_dir.mkdir(exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, ci, i])
            arr = _synthetic_image(name, rng, size=size)
            Image.fromarray(arr, mode="L").save(class_dir / f"{name}_{i:05d}.png")
        counts[name] = n_per_class

    manifest = {"seed": seed, "task": task, "n_per_class": n_per_class,
                "image_size": size, "class_names": class_names, "counts": counts}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return scan_dataset(out, task=task)
