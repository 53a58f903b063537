"""Adam, the self-supervised pretraining loop, linear probing, retrieval.

The pretraining step order is: draw batch, build views, forward all eight
embeddings, combined loss, backward, Adam on the query-side parameters only,
then the momentum update. Probing freezes the encoder entirely: features are
extracted once with no tape and only a linear classifier (with dropout at
train time) is optimized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    AugmentationConfig,
    PairDataset,
    PairedSample,
    build_view_batch,
    compute_channel_stats,
    eval_transform,
    iter_batches,
    split_seed,
    task_view,
)
from .errors import (
    ConfigError,
    DivergedTrainingError,
    EvaluationError,
    LabelError,
)
from .losses import LossWeights, combined_loss, cross_entropy
from .models import MViTacModel, forward_views, momentum_update, save_checkpoint

METRICS_HEADER = ["step", "epoch", "l_vv", "l_tt", "l_vt", "l_tv", "l_mm"]
EVAL_HEADER = ["task", "modality", "accuracy", "n"]


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0,1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class TrainConfig:
    pretrain_lr: float = 0.003
    probe_lr: float = 1e-4
    batch_size: int = 64
    pretrain_epochs: int = 30
    probe_epochs: int = 20
    momentum: float = 0.99
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must be in [0,1], got {self.momentum}")


@dataclass
class ProbeConfig:
    input_source: str = "tactile"   # "tactile" or "both"
    dropout_prob: float = 0.2
    class_count: int = 0            # 0: infer from the dataset

    def __post_init__(self):
        if self.input_source not in ("tactile", "both"):
            raise ConfigError(
                f"input_source must be 'tactile' or 'both', got {self.input_source!r}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError(f"dropout_prob must be in [0,1), got {self.dropout_prob}")


@dataclass
class MetricsLog:
    """Per-step loss records plus per-epoch summaries, serializable to CSV."""

    steps: list[tuple] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def log_step(self, step: int, epoch: int, breakdown) -> None:
        self.steps.append((step, epoch, breakdown.l_vv, breakdown.l_tt,
                           breakdown.l_vt, breakdown.l_tv, breakdown.l_mm))

    def log_epoch(self, epoch: int, mean_l_mm: float, **extra) -> None:
        self.epochs.append({"epoch": epoch, "mean_l_mm": mean_l_mm, **extra})

    def epoch_mean(self, epoch: int) -> float:
        vals = [row[6] for row in self.steps if row[1] == epoch]
        return float(np.mean(vals)) if vals else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for step, epoch, *losses in self.steps:
                writer.writerow([step, epoch] + [f"{v:.6f}" for v in losses])


class Adam:
    """Bias-corrected Adam over a named parameter table."""

    def __init__(self, params: dict[str, T.Tensor], config: AdamConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergedTrainingError(
                    f"non-finite gradient for parameter {name}", param_name=name)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(g)
            p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _modality_configs(samples: list[PairedSample], aug: AugmentationConfig,
                      grasp: bool) -> tuple[AugmentationConfig, AugmentationConfig]:
    """Fill per-modality normalization stats unless the config pins them."""
    base = dict(resize_to=aug.resize_to, crop_to=aug.crop_to,
                crop_scale=aug.crop_scale, hflip_prob=aug.hflip_prob,
                grayscale_prob=aug.grayscale_prob, grasp_mode=grasp or aug.grasp_mode)
    if aug.normalize_mean is not None:
        vis = AugmentationConfig(**base, normalize_mean=aug.normalize_mean,
                                 normalize_std=aug.normalize_std)
        return vis, vis
    v_mean, v_std = compute_channel_stats([s.visual for s in samples])
    t_mean, t_std = compute_channel_stats([s.tactile for s in samples])
    vis = AugmentationConfig(**base, normalize_mean=v_mean, normalize_std=v_std)
    tac = AugmentationConfig(**base, normalize_mean=t_mean, normalize_std=t_std)
    return vis, tac


def pretrain(model: MViTacModel, dataset: PairDataset, config: TrainConfig,
             aug: AugmentationConfig, out_dir=None,
             grasp: bool = False) -> tuple[MetricsLog, str | None]:
    """Run the full self-supervised loop; returns the log and final checkpoint.

    Deterministic under config.seed: batch order, augmentation draws, and
    initialization all derive from it. On a non-finite loss the last good
    checkpoint is kept and DivergedTrainingError is raised.
    """
    samples = dataset.train()
    if not samples:
        raise ConfigError("pretraining dataset has no training samples")
    if config.batch_size > len(samples):
        raise ConfigError(
            f"batch_size {config.batch_size} exceeds dataset size {len(samples)}")
    vis_cfg, tac_cfg = _modality_configs(samples, aug, grasp)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = Adam(model.trainable_params(),
                     AdamConfig(lr=config.pretrain_lr))
    log = MetricsLog()
    last_good: str | None = None
    step = 0
    for epoch in range(config.pretrain_epochs):
        for batch in iter_batches(len(samples), config.batch_size,
                                  config.seed, epoch):
            step += 1
            T.reset_tape()
            optimizer.zero_grad()
            seeds = [int(np.random.SeedSequence(
                [config.seed & 0xFFFF_FFFF_FFFF_FFFF, epoch, int(i)]
            ).generate_state(1, np.uint64)[0]) for i in batch]
            views = build_view_batch([samples[i] for i in batch], vis_cfg,
                                     seeds, tactile_config=tac_cfg)
            embeddings = forward_views(model, views)
            total, breakdown = combined_loss(embeddings, config.weights)
            if not math.isfinite(breakdown.l_mm):
                raise DivergedTrainingError(
                    f"non-finite loss {breakdown.l_mm} at step {step}",
                    last_checkpoint=last_good)
            T.backward(total)
            optimizer.step()
            momentum_update(model, config.momentum)
            log.log_step(step, epoch, breakdown)
        log.log_epoch(epoch, log.epoch_mean(epoch))
        if out_dir is not None:
            epoch_path = out_dir / "checkpoint_epoch.ckpt"
            save_checkpoint(model, epoch_path, step=step,
                            seeds={"seed": config.seed, "epoch": epoch})
            last_good = str(epoch_path)
    T.reset_tape()
    final_path = None
    if out_dir is not None:
        final_path = str(out_dir / "checkpoint_final.ckpt")
        save_checkpoint(model, final_path, step=step, seeds={"seed": config.seed})
        log.write_csv(out_dir / "metrics.csv")
    return log, final_path


# ---------------------------------------------------------------------------
# Linear probing
# ---------------------------------------------------------------------------

@dataclass
class LinearClassifier:
    weight: np.ndarray       # [D, C]
    bias: np.ndarray         # [C]
    classes: list[str]
    input_source: str

    def predict(self, features: np.ndarray) -> np.ndarray:
        logits = features @ self.weight + self.bias
        return np.argmax(logits, axis=1)  # argmax takes the lowest tied index


def extract_features(model: MViTacModel, samples: list[PairedSample],
                     aug_visual: AugmentationConfig, aug_tactile: AugmentationConfig,
                     input_source: str, batch_size: int = 128) -> np.ndarray:
    """Frozen backbone features; heads are bypassed entirely.

    'tactile' uses the tactile query encoder; 'both' concatenates tactile and
    visual backbone outputs.
    """
    feats = []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            tac = np.stack([eval_transform(s.tactile, aug_tactile) for s in chunk])
            f_t = model.tactile.query_encoder(T.Tensor(tac)).data
            if input_source == "both":
                vis = np.stack([eval_transform(s.visual, aug_visual) for s in chunk])
                f_v = model.visual.query_encoder(T.Tensor(vis)).data
                feats.append(np.concatenate([f_t, f_v], axis=1))
            else:
                feats.append(f_t)
    return np.concatenate(feats, axis=0)


def linear_probe_train(model: MViTacModel, dataset: PairDataset, task: str,
                       probe: ProbeConfig, config: TrainConfig,
                       aug: AugmentationConfig,
                       grasp: bool = False) -> tuple[LinearClassifier, float, float]:
    """Train a linear classifier on frozen features; returns train/test accuracy."""
    train_samples, train_labels, classes = task_view(dataset.train(), task)
    test_samples, test_labels, test_classes = task_view(dataset.test(), task)
    if not train_samples:
        raise EvaluationError(f"no labeled training samples for task {task!r}")
    if any(c not in classes for c in test_classes):
        raise LabelError(f"test split contains classes unseen in training: "
                         f"{sorted(set(test_classes) - set(classes))}")
    n_classes = probe.class_count or len(classes)
    if len(classes) > n_classes:
        raise LabelError(
            f"dataset has {len(classes)} classes but probe expects {n_classes}")

    vis_cfg, tac_cfg = _modality_configs(dataset.train(), aug, grasp)
    x_train = extract_features(model, train_samples, vis_cfg, tac_cfg,
                               probe.input_source)
    dim = x_train.shape[1]
    weight = T.zeros((dim, n_classes), requires_grad=True)
    bias = T.zeros((n_classes,), requires_grad=True)
    optimizer = Adam({"weight": weight, "bias": bias}, AdamConfig(lr=config.probe_lr))

    step = 0
    for epoch in range(config.probe_epochs):
        for batch in iter_batches(len(train_samples), config.batch_size,
                                  config.seed + 1, epoch, drop_last=False):
            step += 1
            T.reset_tape()
            optimizer.zero_grad()
            x = T.Tensor(x_train[batch])
            x = T.dropout(x, probe.dropout_prob, True,
                          seed=split_seed(config.seed + step, 1)[0])
            logits = T.add(T.matmul(x, weight), bias)
            loss = cross_entropy(logits, train_labels[batch])
            T.backward(loss)
            optimizer.step()
    T.reset_tape()

    clf = LinearClassifier(weight=weight.data.copy(), bias=bias.data.copy(),
                           classes=classes, input_source=probe.input_source)
    train_acc = float(np.mean(clf.predict(x_train) == train_labels))
    if test_samples:
        x_test = extract_features(model, test_samples, vis_cfg, tac_cfg,
                                  probe.input_source)
        test_acc = float(np.mean(clf.predict(x_test) == test_labels))
    else:
        test_acc = math.nan
    return clf, train_acc, test_acc


def evaluate(clf: LinearClassifier, model: MViTacModel, dataset: PairDataset,
             task: str, aug: AugmentationConfig,
             grasp: bool = False) -> tuple[float, np.ndarray]:
    """Top-1 accuracy and a [C,C] confusion matrix (rows: true class)."""
    samples, labels, classes = task_view(dataset.test() or dataset.samples, task)
    if not samples:
        raise EvaluationError(f"no labeled samples to evaluate for task {task!r}")
    if any(c not in clf.classes for c in classes):
        raise LabelError(f"evaluation classes {classes} not covered by classifier "
                         f"classes {clf.classes}")
    remap = np.array([clf.classes.index(c) for c in classes], dtype=np.int64)
    labels = remap[labels]
    vis_cfg, tac_cfg = _modality_configs(dataset.train() or samples, aug, grasp)
    feats = extract_features(model, samples, vis_cfg, tac_cfg, clf.input_source)
    preds = clf.predict(feats)
    n_classes = len(clf.classes)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    return float(np.mean(preds == labels)), confusion


def topk_partner_accuracy(z_queries: np.ndarray, z_keys: np.ndarray, k: int) -> float:
    """Fraction of rows whose index-matched key ranks in the top k by dot product."""
    n = z_queries.shape[0]
    if k < 1 or k >= n:
        raise ConfigError(f"k must satisfy 1 <= k < {n}, got {k}")
    sims = z_queries @ z_keys.T
    order = np.argsort(-sims, axis=1, kind="stable")
    ranks = np.argmax(order == np.arange(n)[:, None], axis=1)
    return float(np.mean(ranks < k))


def retrieval_eval(model: MViTacModel, samples: list[PairedSample],
                   aug: AugmentationConfig, k: int = 1,
                   grasp: bool = False) -> float:
    """Top-k cross-modal retrieval: visual queries against tactile keys.

    Visual embeddings come from the visual branch's cross-modal query head,
    tactile embeddings from the tactile branch's; the true partner must rank
    in the top k by dot product.
    """
    if k >= len(samples):
        raise ConfigError(f"k={k} must be smaller than the dataset ({len(samples)})")
    vis_cfg, tac_cfg = _modality_configs(samples, aug, grasp)
    with T.no_grad():
        vis = np.stack([eval_transform(s.visual, vis_cfg) for s in samples])
        tac = np.stack([eval_transform(s.tactile, tac_cfg) for s in samples])
        z_v = model.visual.inter_head_q(
            model.visual.query_encoder(T.Tensor(vis))).data
        z_t = model.tactile.inter_head_q(
            model.tactile.query_encoder(T.Tensor(tac))).data
    return topk_partner_accuracy(z_v, z_t, k)


def append_eval_row(path, task: str, modality: str, accuracy: float, n: int) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(EVAL_HEADER)
        writer.writerow([task, modality, f"{accuracy:.4f}", n])
