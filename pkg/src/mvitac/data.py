"""Augmentation, synthetic paired data, on-disk loaders, and batching.

Every stage is deterministic under its seed: augmentation draws come from a
generator owned by the call, and per-view sub-seeds are split off the sample
seed so results do not depend on worker scheduling.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetFormatError

logger = logging.getLogger(__name__)

TASK_COLUMNS = {
    "category": "category",
    "hardsoft": "hard_soft",
    "roughsmooth": "rough_smooth",
    "grasp": "grasp",
}

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass
class PairedSample:
    """One visual/tactile pair; both images share the sample's labels."""

    stem: str
    visual: np.ndarray            # [3,H,W] float32 in [0,1]
    tactile: np.ndarray           # [3,H,W], or [6,H,W] for stacked sensor pairs
    labels: dict[str, str] = field(default_factory=dict)
    split: str = "train"


@dataclass
class PairDataset:
    samples: list[PairedSample]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def train(self) -> list[PairedSample]:
        return [s for s in self.samples if s.split == "train"]

    def test(self) -> list[PairedSample]:
        return [s for s in self.samples if s.split == "test"]


def task_view(samples: list[PairedSample], task: str):
    """Samples carrying a label for ``task``, their integer labels, class names.

    Class indices follow the sorted order of the distinct raw label strings,
    so the mapping is stable across runs and splits.
    """
    if task not in TASK_COLUMNS:
        raise ConfigError(f"unknown task {task!r}; expected one of {sorted(TASK_COLUMNS)}")
    column = TASK_COLUMNS[task]
    kept = [s for s in samples if s.labels.get(column, "") != ""]
    classes = sorted({s.labels[column] for s in kept})
    index = {name: i for i, name in enumerate(classes)}
    labels = np.array([index[s.labels[column]] for s in kept], dtype=np.int64)
    return kept, labels, classes


@dataclass
class ViewBatch:
    """The four augmented image batches consumed by one training step."""

    o_v_q: np.ndarray
    o_v_k: np.ndarray
    o_t_q: np.ndarray
    o_t_k: np.ndarray


@dataclass
class AugmentationConfig:
    """Resize, random resized crop, flip, grayscale, then normalization.

    Defaults are the full-scale profile (256 -> 224); the synthetic desk
    profile uses 36 -> 32. ``grasp_mode`` disables grayscale entirely, which
    is also required for 6-channel stacked tactile inputs.
    """

    resize_to: int = 256
    crop_to: int = 224
    crop_scale: tuple[float, float] = (0.2, 1.0)
    hflip_prob: float = 0.5
    grayscale_prob: float = 0.2
    normalize_mean: tuple[float, ...] | None = None
    normalize_std: tuple[float, ...] | None = None
    grasp_mode: bool = False

    def __post_init__(self):
        if self.crop_to > self.resize_to:
            raise ConfigError(
                f"crop_to {self.crop_to} exceeds resize_to {self.resize_to}")
        if self.crop_to < 1:
            raise ConfigError(f"crop_to must be >= 1, got {self.crop_to}")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ConfigError(f"invalid crop_scale {self.crop_scale}")
        for name in ("hflip_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {p}")
        if self.grasp_mode:
            self.grayscale_prob = 0.0
        if (self.normalize_mean is None) != (self.normalize_std is None):
            raise ConfigError("normalize_mean and normalize_std must be set together")
        if self.normalize_std is not None and any(s <= 0 for s in self.normalize_std):
            raise ConfigError(f"normalize_std must be positive, got {self.normalize_std}")


def split_seed(seed: int, n: int) -> list[int]:
    """Derive n independent 64-bit sub-seeds from one seed."""
    return [int(c.generate_state(1, np.uint64)[0])
            for c in np.random.SeedSequence(seed).spawn(n)]


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [C,H,W] with bilinear interpolation (half-pixel centers)."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = image[:, y0c[:, None], x0c[None, :]] * (1 - wx) + \
        image[:, y0c[:, None], x1c[None, :]] * wx
    bot = image[:, y1c[:, None], x0c[None, :]] * (1 - wx) + \
        image[:, y1c[:, None], x1c[None, :]] * wx
    out = top * (1 - wy[:, None]) + bot * wy[:, None]
    return out.astype(np.float32)


def augment(image: np.ndarray, config: AugmentationConfig, rng_seed: int) -> np.ndarray:
    """One stochastic view of ``image``: [C, crop_to, crop_to].

    Pipeline order: resize, random resized crop (area fraction uniform in
    crop_scale), horizontal flip, grayscale, per-channel normalization. The
    same (image, config, seed) triple always yields bit-identical output.
    """
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    img = bilinear_resize(image, config.resize_to, config.resize_to)

    area_frac = float(rng.uniform(config.crop_scale[0], config.crop_scale[1]))
    side = int(round(math.sqrt(area_frac) * config.resize_to))
    side = max(1, min(side, config.resize_to))
    top = int(rng.integers(0, config.resize_to - side + 1))
    left = int(rng.integers(0, config.resize_to - side + 1))
    img = bilinear_resize(img[:, top:top + side, left:left + side],
                          config.crop_to, config.crop_to)

    if rng.random() < config.hflip_prob:
        img = img[:, :, ::-1]
    if rng.random() < config.grayscale_prob:
        if img.shape[0] != 3:
            raise ConfigError(
                f"grayscale needs 3 channels, got {img.shape[0]}; "
                f"use grasp_mode for stacked tactile inputs")
        lum = np.tensordot(_LUMA, img, axes=([0], [0]))
        img = np.repeat(lum[None], 3, axis=0)

    img = np.ascontiguousarray(img, dtype=np.float32)
    if config.normalize_mean is not None:
        mean = np.asarray(config.normalize_mean, dtype=np.float32)[:, None, None]
        std = np.asarray(config.normalize_std, dtype=np.float32)[:, None, None]
        if mean.shape[0] != img.shape[0]:
            raise ConfigError(
                f"normalization stats have {mean.shape[0]} channels, image has "
                f"{img.shape[0]}")
        img = (img - mean) / std
    return img


def eval_transform(image: np.ndarray, config: AugmentationConfig) -> np.ndarray:
    """Deterministic evaluation view: plain resize to crop size + normalize."""
    img = bilinear_resize(image, config.crop_to, config.crop_to)
    if config.normalize_mean is not None:
        mean = np.asarray(config.normalize_mean, dtype=np.float32)[:, None, None]
        std = np.asarray(config.normalize_std, dtype=np.float32)[:, None, None]
        img = (img - mean) / std
    return img.astype(np.float32)


def make_views(sample: PairedSample, config: AugmentationConfig, rng_seed: int,
               tactile_config: AugmentationConfig | None = None):
    """Four independently augmented views of one pair: (v_q, v_k, t_q, t_k).

    Each view draws from its own sub-seed of ``rng_seed``. The tactile stream
    may use a separate config (different channel stats or grasp stacking);
    by default it shares the visual one.
    """
    tcfg = tactile_config or config
    s_vq, s_vk, s_tq, s_tk = split_seed(rng_seed, 4)
    return (augment(sample.visual, config, s_vq),
            augment(sample.visual, config, s_vk),
            augment(sample.tactile, tcfg, s_tq),
            augment(sample.tactile, tcfg, s_tk))


def build_view_batch(samples: list[PairedSample], config: AugmentationConfig,
                     seeds: list[int],
                     tactile_config: AugmentationConfig | None = None) -> ViewBatch:
    """Stack per-sample views into the four [N,C,crop,crop] batches."""
    views = [make_views(s, config, seed, tactile_config)
             for s, seed in zip(samples, seeds)]
    return ViewBatch(
        o_v_q=np.stack([v[0] for v in views]),
        o_v_k=np.stack([v[1] for v in views]),
        o_t_q=np.stack([v[2] for v in views]),
        o_t_k=np.stack([v[3] for v in views]),
    )


def compute_channel_stats(images: list[np.ndarray]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std over a list of [C,H,W] images."""
    stacked = np.stack(images).astype(np.float64)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    std = np.maximum(std, 1e-6)
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


# ---------------------------------------------------------------------------
# Synthetic paired dataset
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Desk-scale stand-in for a real visuotactile corpus.

    Each class pairs a visual grating family (class orientation and base
    luminance) with a tactile blob-field family (class blob count and base
    luminance). Two continuous per-sample latents drive both renders, so the
    pair shares class identity plus a recoverable sample signature.
    """

    class_count: int = 4
    samples_per_class: int = 128
    image_size: int = 32
    noise_std: float = 0.05
    seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


def _render_visual(cls: int, n_classes: int, size: int, u1: float, u2: float,
                   phase: float, rng: np.random.Generator, noise_std: float) -> np.ndarray:
    # class cues: grating orientation and base luminance band
    # shared latents: u2 -> luminance offset, u1 -> grating amplitude
    theta = math.pi * cls / n_classes
    freq = 3.0 + cls
    lum = 0.28 + 0.40 * cls / max(n_classes - 1, 1) + 0.12 * (u2 - 0.5)
    amp = 0.08 + 0.18 * u1
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    coord = (xx * math.cos(theta) + yy * math.sin(theta)) / size
    pattern = lum + amp * np.sin(2 * math.pi * freq * coord + phase)
    img = np.stack([pattern + 0.02, pattern, pattern - 0.02]).astype(np.float32)
    img += rng.normal(0.0, noise_std, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _render_tactile(cls: int, n_classes: int, size: int, u1: float, u2: float,
                    rng: np.random.Generator, noise_std: float) -> np.ndarray:
    # class cues: blob grid density and reversed luminance band
    # shared latents mirror the visual render: u2 -> luminance, u1 -> contrast
    # the pattern is a smooth function of (class, u1, u2) so the tactile image
    # stays predictable from its visual partner up to pixel noise
    lum = 0.62 - 0.40 * cls / max(n_classes - 1, 1) + 0.12 * (u2 - 0.5)
    grid = 2 + cls
    amp = 0.10 + 0.30 * u1
    spacing = size / grid
    sigma = spacing / 3.5
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    pattern = np.full((size, size), lum, dtype=np.float64)
    for gy in range(grid):
        for gx in range(grid):
            cy = (gy + 0.5) * spacing
            cx = (gx + 0.5) * spacing
            pattern += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    img = np.repeat(pattern[None].astype(np.float32), 3, axis=0)
    img += rng.normal(0.0, noise_std, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def synth_generate(spec: SynthSpec) -> PairDataset:
    """class_count x samples_per_class labeled pairs, deterministic per seed."""
    root_ss = np.random.SeedSequence(spec.seed)
    samples: list[PairedSample] = []
    n = spec.class_count * spec.samples_per_class
    split_rng = np.random.Generator(np.random.PCG64(root_ss.spawn(1)[0]))
    sample_seqs = root_ss.spawn(n)

    idx = 0
    for cls in range(spec.class_count):
        # per-class balanced 80/20 split
        order = split_rng.permutation(spec.samples_per_class)
        n_train = int(round(spec.train_fraction * spec.samples_per_class))
        is_train = np.zeros(spec.samples_per_class, dtype=bool)
        is_train[order[:n_train]] = True
        for j in range(spec.samples_per_class):
            rng = np.random.Generator(np.random.PCG64(sample_seqs[idx]))
            u1 = float(rng.random())
            u2 = float(rng.random())
            phase = float(rng.uniform(0, 2 * math.pi))
            visual = _render_visual(cls, spec.class_count, spec.image_size,
                                    u1, u2, phase, rng, spec.noise_std)
            tactile = _render_tactile(cls, spec.class_count, spec.image_size,
                                      u1, u2, rng, spec.noise_std)
            labels = {
                "category": f"class{cls}",
                "hard_soft": "hard" if cls < spec.class_count / 2 else "soft",
                "rough_smooth": "rough" if cls % 2 == 0 else "smooth",
            }
            samples.append(PairedSample(
                stem=f"c{cls}_s{j:04d}", visual=visual, tactile=tactile,
                labels=labels, split="train" if is_train[j] else "test"))
            idx += 1
    return PairDataset(samples=samples)


# ---------------------------------------------------------------------------
# On-disk layouts
# ---------------------------------------------------------------------------

def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _save_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(image, 0.0, 1.0)
    arr = (arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def export_pair_layout(dataset: PairDataset, root) -> None:
    """Write the pair layout: visual/, tactile/, labels.csv, split.csv."""
    root = Path(root)
    (root / "visual").mkdir(parents=True, exist_ok=True)
    (root / "tactile").mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        _save_png(root / "visual" / f"{s.stem}.png", s.visual)
        _save_png(root / "tactile" / f"{s.stem}.png", s.tactile)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stem", "category", "hard_soft", "rough_smooth"])
        for s in dataset.samples:
            writer.writerow([s.stem, s.labels.get("category", ""),
                             s.labels.get("hard_soft", ""),
                             s.labels.get("rough_smooth", "")])
    with open(root / "split.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stem", "split"])
        for s in dataset.samples:
            writer.writerow([s.stem, s.split])


def load_pair_dataset(root) -> PairDataset:
    """Load the pair layout; visual/tactile matched by file stem.

    Pairs missing either image are skipped (counted); a missing labels.csv or
    a duplicate stem is a format error.
    """
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.is_file():
        raise DatasetFormatError(f"missing labels.csv under {root}")

    rows: dict[str, dict[str, str]] = {}
    with open(labels_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"stem", "category", "hard_soft", "rough_smooth"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DatasetFormatError(
                f"labels.csv must have columns {sorted(required)}, "
                f"got {reader.fieldnames}")
        for row in reader:
            stem = row["stem"]
            if stem in rows:
                raise DatasetFormatError(f"duplicate stem {stem!r} in labels.csv")
            rows[stem] = row

    splits: dict[str, str] = {}
    split_path = root / "split.csv"
    if split_path.is_file():
        with open(split_path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["split"] not in ("train", "test"):
                    raise DatasetFormatError(
                        f"split.csv value {row['split']!r} for stem {row['stem']!r}")
                splits[row["stem"]] = row["split"]

    samples: list[PairedSample] = []
    skipped = 0
    for stem, row in rows.items():
        vpath = root / "visual" / f"{stem}.png"
        tpath = root / "tactile" / f"{stem}.png"
        if not (vpath.is_file() and tpath.is_file()):
            skipped += 1
            continue
        samples.append(PairedSample(
            stem=stem,
            visual=_load_png(vpath),
            tactile=_load_png(tpath),
            labels={"category": row["category"], "hard_soft": row["hard_soft"],
                    "rough_smooth": row["rough_smooth"]},
            split=splits.get(stem, "train")))
    if skipped:
        logger.warning("load_pair_dataset: skipped %d unpaired stems", skipped)
    return PairDataset(samples=samples, skipped=skipped)


def load_grasp_dataset(root) -> PairDataset:
    """Load grasp attempts: per-attempt dirs with 'during' frames and a label.

    The two tactile sensor images are stacked along the channel axis into a
    single 6-channel tensor. Attempts missing any of the three during-frames
    are skipped; a present attempt without a label file is a format error.
    """
    root = Path(root)
    attempt_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not attempt_dirs:
        raise DatasetFormatError(f"no attempt directories under {root}")
    samples: list[PairedSample] = []
    skipped = 0
    for attempt in attempt_dirs:
        rgb = attempt / "rgb_during.png"
        left = attempt / "tac_left_during.png"
        right = attempt / "tac_right_during.png"
        if not (rgb.is_file() and left.is_file() and right.is_file()):
            skipped += 1
            continue
        label_path = attempt / "label.txt"
        if not label_path.is_file():
            raise DatasetFormatError(f"attempt {attempt.name} has no label.txt")
        raw = label_path.read_text().strip()
        if raw not in ("0", "1"):
            raise DatasetFormatError(
                f"attempt {attempt.name} has invalid label {raw!r}")
        tactile = np.concatenate([_load_png(left), _load_png(right)], axis=0)
        samples.append(PairedSample(
            stem=attempt.name, visual=_load_png(rgb), tactile=tactile,
            labels={"grasp": raw}))
    if skipped:
        logger.warning("load_grasp_dataset: skipped %d incomplete attempts", skipped)
    return PairDataset(samples=samples, skipped=skipped)


def detect_layout(root) -> str:
    """'pair' if labels.csv is present, else 'grasp' if attempt dirs are."""
    root = Path(root)
    if (root / "labels.csv").is_file():
        return "pair"
    if root.is_dir() and any(p.is_dir() and (p / "label.txt").is_file()
                             for p in root.iterdir()):
        return "grasp"
    raise DatasetFormatError(f"unrecognized dataset layout under {root}")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def iter_batches(num_items: int, batch_size: int, shuffle_seed: int, epoch: int,
                 drop_last: bool = True) -> list[np.ndarray]:
    """Index batches for one epoch under a (seed, epoch)-keyed permutation."""
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([shuffle_seed & 0xFFFF_FFFF_FFFF_FFFF, epoch])))
    order = rng.permutation(num_items)
    batches = []
    for start in range(0, num_items, batch_size):
        chunk = order[start:start + batch_size]
        if drop_last and len(chunk) < batch_size:
            break
        batches.append(chunk)
    return batches
