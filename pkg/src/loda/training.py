"""Training and evaluation protocol."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .adaptation import MODES, AdapterConfig, LoDaModel, trainable_parameters
from .backbones import CnnConfig, FrozenParams, VitConfig, init_frozen
from .data import ImageDataset, split_indices
from .exceptions import ConfigError, ContractError, DegenerateBatchError, InputError
from .metrics import MetricPair, evaluate_scores, plcc_loss, srcc
from .tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

LOG_COLUMNS = ("epoch", "step", "lr", "loss", "train_srcc", "test_srcc", "test_plcc")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 3e-4
    weight_decay: float = 0.01
    lr_min: float = 0.0
    batch_size: int = 16
    epochs: int = 10
    patches_per_train_image: int = 1
    patches_per_test_image: int = 15
    crop_size: int = 64
    mode: str = "loda"
    seed: int = 0
    frozen_seed: int = 0
    interaction_count: int = 4
    latent_dim: int = 16
    heads: int = 4
    extractor_channels: int = 16
    pooled_size: int = 4
    eval_every: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for a correlation loss")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.patches_per_train_image < 1 or self.patches_per_test_image < 1:
            raise ConfigError("patch counts must be >= 1")

    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(latent_dim=self.latent_dim, heads=self.heads, interactions=self.interaction_count,
                             extractor_channels=self.extractor_channels, pooled_size=self.pooled_size)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def derived_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for one purpose (model init, batch order, test crops)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def build_model(cfg: TrainConfig, vit_cfg: VitConfig | None = None, cnn_cfg: CnnConfig | None = None,
                frozen: FrozenParams | None = None) -> LoDaModel:
    if frozen is None:
        frozen = init_frozen(cfg.frozen_seed, vit_cfg, cnn_cfg)
    if cfg.crop_size != frozen.vit_config.image_size:
        raise ConfigError(f"crop_size {cfg.crop_size} must equal the ViT image_size {frozen.vit_config.image_size}")
    return LoDaModel(frozen, cfg.adapter_config(), cfg.mode, seed=cfg.seed)


# optimisation ----------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float, weight_decay: float,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One AdamW update in place, weight decay decoupled from the moments."""
    b1, b2 = betas
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"no gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data - lr * weight_decay * p.data - lr * update


def cosine_lr(step: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        return lr0
    return lr_min + (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total)) / 2.0


# patches -----------------------------------------------------------------------


def sample_patches(image: np.ndarray, k: int, crop_size: int, gen: np.random.Generator, train: bool,
                   label: float | None = None):
    """``k`` random crops of a (3, H, W) image.

    In train mode each crop is independently flipped horizontally and
    vertically with probability 1/2.  Returns (patches, labels, offsets).
    """
    image = np.asarray(image)
    _, h, w = image.shape
    if h < crop_size or w < crop_size:
        raise InputError(f"image {h}x{w} smaller than crop {crop_size}")
    ys = gen.integers(0, h - crop_size + 1, size=k)
    xs = gen.integers(0, w - crop_size + 1, size=k)
    flips = gen.random(size=(k, 2)) < 0.5 if train else np.zeros((k, 2), dtype=bool)
    patches = np.empty((k, image.shape[0], crop_size, crop_size))
    for i in range(k):
        p = image[:, ys[i]:ys[i] + crop_size, xs[i]:xs[i] + crop_size]
        if flips[i, 0]:
            p = p[:, :, ::-1]
        if flips[i, 1]:
            p = p[:, ::-1, :]
        patches[i] = p
    labels = np.full(k, np.nan if label is None else float(label))
    return patches, labels, np.stack([ys, xs, flips[:, 0], flips[:, 1]], axis=1).astype(int)


def preprocess(images: np.ndarray) -> Tensor:
    return Tensor((np.asarray(images, dtype=np.float64) - PIXEL_MEAN) / PIXEL_STD)


# train -------------------------------------------------------------------------


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    steps: int = 0

    def log_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.log:
            w.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                        for c in LOG_COLUMNS])
        return buf.getvalue()


def _batches(n: int, batch_size: int, gen: np.random.Generator) -> list[np.ndarray]:
    order = gen.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _is_degenerate(labels: np.ndarray) -> bool:
    return labels.size < 2 or np.ptp(labels) == 0


def train(model: LoDaModel, dataset: ImageDataset, cfg: TrainConfig,
          eval_set: ImageDataset | None = None) -> TrainResult:
    """Optimise the model's trainable tensors with the PLCC-induced loss."""
    if len(dataset) == 0:
        raise InputError("empty training set")
    if np.ptp(dataset.labels) == 0:
        raise DegenerateBatchError("training labels are all equal")
    gen = derived_rng(cfg.seed, 1)
    params = dict(model.named_trainable())
    state = OptimizerState()
    n_patches = len(dataset) * cfg.patches_per_train_image
    steps_per_epoch = len(_batches(n_patches, cfg.batch_size, derived_rng(0, 0)))
    total = cfg.epochs * steps_per_epoch
    result = TrainResult()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        patches, labels = [], []
        for img, lab in zip(dataset.images, dataset.labels):
            p, l, _ = sample_patches(img, cfg.patches_per_train_image, cfg.crop_size, gen, train=True, label=lab)
            patches.append(p)
            labels.append(l)
        patches = np.concatenate(patches)
        labels = np.concatenate(labels)
        losses, seen_pred, seen_lab = [], [], []
        lr = cfg.lr0
        for idx in _batches(len(labels), cfg.batch_size, gen):
            if _is_degenerate(labels[idx]):
                idx = gen.choice(len(labels), size=idx.size, replace=False)
                if _is_degenerate(labels[idx]):
                    raise DegenerateBatchError(f"epoch {epoch}: batch labels constant after resampling")
            lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min)
            model.zero_grad()
            pred = model(preprocess(patches[idx]))
            loss = plcc_loss(pred, labels[idx])
            backward(loss)
            adamw_step(params, state, lr, cfg.weight_decay)
            step += 1
            losses.append(loss.item())
            seen_pred.append(pred.data.reshape(-1))
            seen_lab.append(labels[idx])
        row = {
            "epoch": epoch, "step": step, "lr": float(lr), "loss": float(np.mean(losses)),
            "train_srcc": srcc(np.concatenate(seen_pred), np.concatenate(seen_lab)),
            "test_srcc": None, "test_plcc": None,
        }
        if eval_set is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            metrics = evaluate(model, eval_set, cfg)
            row["test_srcc"], row["test_plcc"] = metrics.srcc, metrics.plcc
        result.log.append(row)
        logger.debug("epoch %d loss %.6f", epoch, row["loss"])
    result.steps = step
    return result


# evaluate ------------------------------------------------------------------------


def predict(model: LoDaModel, images: np.ndarray, cfg: TrainConfig, batch_size: int = 32) -> np.ndarray:
    """Per-image score: mean over ``patches_per_test_image`` unflipped crops."""
    gen = derived_rng(cfg.seed, 2)
    out = np.empty(len(images))
    with no_grad():
        for i, img in enumerate(images):
            patches, _, offsets = sample_patches(img, cfg.patches_per_test_image, cfg.crop_size, gen, train=False)
            # identical crops give identical scores; score each distinct one once
            uniq, first, counts = np.unique(offsets, axis=0, return_index=True, return_counts=True)
            scores = []
            for s in range(0, len(first), batch_size):
                scores.append(model(preprocess(patches[first[s:s + batch_size]])).data.reshape(-1))
            scores = np.concatenate(scores)
            out[i] = float(np.sum(scores * counts) / counts.sum())
    return out


def evaluate(model: LoDaModel, dataset: ImageDataset, cfg: TrainConfig) -> MetricPair:
    return evaluate_scores(predict(model, dataset.images, cfg), dataset.labels)


# split protocol --------------------------------------------------------------------


@dataclass
class SplitPlan:
    seeds: tuple[int, ...] = tuple(range(10))
    train_fraction: float = 0.8

    def splits(self, n: int) -> list[tuple[np.ndarray, np.ndarray]]:
        return split_indices(n, self.seeds, self.train_fraction)


@dataclass
class EvalReport:
    per_split: list[MetricPair]
    trainable: int
    total: int
    mode: str

    @property
    def median_srcc(self) -> float:
        return float(np.median([m.srcc for m in self.per_split]))

    @property
    def median_plcc(self) -> float:
        return float(np.median([m.plcc for m in self.per_split]))

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "trainable": self.trainable,
            "total": self.total,
            "median_srcc": self.median_srcc,
            "median_plcc": self.median_plcc,
            "per_split": [asdict(m) for m in self.per_split],
        }


def _fit_eval(train_set, test_set, cfg, vit_cfg, cnn_cfg):
    from .adaptation import parameter_counts

    model = build_model(cfg, vit_cfg, cnn_cfg)
    train(model, train_set, cfg)
    counts = parameter_counts(model)
    return evaluate(model, test_set, cfg), counts


def run_splits(dataset: ImageDataset, cfg: TrainConfig, plan: SplitPlan | None = None,
               vit_cfg: VitConfig | None = None, cnn_cfg: CnnConfig | None = None) -> EvalReport:
    """Train and test once per split; the model is re-initialised every split."""
    plan = plan or SplitPlan()
    results = []
    counts = {"trainable": 0, "total": 0}
    for tr, te in plan.splits(len(dataset)):
        metrics, counts = _fit_eval(dataset.subset(tr), dataset.subset(te), cfg, vit_cfg, cnn_cfg)
        results.append(metrics)
    return EvalReport(results, counts["trainable"], counts["total"], cfg.mode)


def cross_dataset(train_set: ImageDataset, eval_set: ImageDataset, cfg: TrainConfig, seeds: Sequence[int] = (0,),
                  vit_cfg: VitConfig | None = None, cnn_cfg: CnnConfig | None = None) -> EvalReport:
    """Train on one dataset and evaluate on another without any adaptation."""
    results = []
    counts = {"trainable": 0, "total": 0}
    for s in seeds:
        metrics, counts = _fit_eval(train_set, eval_set, replace(cfg, seed=int(s)), vit_cfg, cnn_cfg)
        results.append(metrics)
    return EvalReport(results, counts["trainable"], counts["total"], cfg.mode)


def trainable_count(cfg: TrainConfig, vit_cfg: VitConfig | None = None, cnn_cfg: CnnConfig | None = None) -> int:
    return trainable_parameters(build_model(cfg, vit_cfg, cnn_cfg))[1]
