"""Incremental protocol: initialisation, three-step update, detection and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .datagen import Dataset
from .diffcore import ParameterSet, Tensor
from .errors import ConfigError, IncganError, TrainingError, UsageError
from .losses import (
    BatchLabels,
    LossConfig,
    binary_loss_mtmc,
    classification_loss,
    distillation_loss,
    group_binary_loss_mtsc,
    icarl_loss,
    mtmc_loss,
    mtsc_loss,
)
from .memory import (
    ClassRegistry,
    ExemplarSet,
    ExemplarStore,
    class_quota,
    classify_nme,
    compute_templates,
    reduce_exemplars,
    select_exemplars,
)
from .model import (
    ModelSnapshot,
    ModelState,
    NetworkConfig,
    crop_batch,
    detector_graph,
    expand_head,
    extract_features,
    features_graph,
    forward_all,
    init_model,
    logits_graph,
    snapshot,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    patience: int = 5
    max_epochs: int = 100
    min_delta: float = 1e-5
    clip_norm: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise ConfigError(f"invalid training configuration: {self}")


@dataclass
class StepReport:
    step: int
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = 0
    stop_reason: str = "max_epochs"


@dataclass
class MetricsReport:
    step: int
    architectures: list[int]
    detection_acc: float
    per_arch_detection: dict[int, float]
    classification_acc: float
    confusion: np.ndarray
    aux_detector_acc: float | None = None
    rule: str = "nme"


@dataclass
class LearnerState:
    model: ModelState
    store: ExemplarStore
    registry: ClassRegistry
    loss_config: LossConfig
    train_config: TrainConfig
    snapshot: ModelSnapshot | None = None
    step: int = 0
    reports: list[StepReport] = field(default_factory=list)

    @property
    def variant(self) -> str:
        return self.model.config.variant


@dataclass
class Pool:
    """Training or validation samples with everything the objective needs."""

    images: np.ndarray
    labels: BatchLabels
    is_new: np.ndarray
    old_logits: np.ndarray  # rows only meaningful where ``is_new`` is False

    def __len__(self) -> int:
        return len(self.is_new)

    def take(self, rows) -> "Pool":
        return Pool(self.images[rows], self.labels.subset(rows), self.is_new[rows], self.old_logits[rows])


# ------------------------------------------------------------------ objective

def objective(
    logits: Tensor,
    det_logits: Tensor | None,
    pool: Pool,
    variant: str,
    loss_config: LossConfig,
    gan_classes: np.ndarray,
) -> tuple[Tensor, dict[str, float]]:
    """The variant's full loss for one batch given its head outputs."""
    new_rows = np.flatnonzero(pool.is_new)
    old_rows = np.flatnonzero(~pool.is_new)
    t_old = pool.old_logits.shape[1]
    scores = dc.sigmoid(logits)
    class_term = classification_loss(scores[new_rows], pool.labels.subset(new_rows))
    if loss_config.gamma > 0 and len(old_rows) and t_old:
        distill = distillation_loss(
            logits[np.ix_(old_rows, np.arange(t_old))], pool.old_logits[old_rows], loss_config.temperature
        )
    else:
        distill = Tensor(np.zeros((), logits.dtype))
    total = icarl_loss(class_term, distill, loss_config.gamma)
    terms = {"class": class_term.item(), "distill": distill.item()}
    if variant == "mt_mc":
        d = dc.sigmoid(det_logits)
        bl = binary_loss_mtmc(d[new_rows], pool.labels.subset(new_rows))
        total = mtmc_loss(total, bl, loss_config.lam)
        terms["binary"] = bl.item()
    elif variant == "mt_sc":
        bl = group_binary_loss_mtsc(scores, pool.labels, gan_classes)
        total = mtsc_loss(total, bl, loss_config.lam)
        terms["binary"] = bl.item()
    terms["total"] = total.item()
    return total, terms


def batch_loss(leaves, pool: Pool, model_config: NetworkConfig, loss_config: LossConfig, gan_classes) -> Tensor:
    feats = features_graph(leaves, pool.images, model_config)
    logits = logits_graph(leaves, feats)
    det = detector_graph(leaves, feats) if model_config.variant == "mt_mc" else None
    return objective(logits, det, pool, model_config.variant, loss_config, gan_classes)[0]


def pool_objective(model, pool: Pool, loss_config: LossConfig, gan_classes) -> float:
    """Full objective over a whole pool, evaluated without gradients."""
    out = forward_all(model, pool.images)
    det = Tensor(out["detector_logits"]) if "detector_logits" in out else None
    return objective(Tensor(out["logits"]), det, pool, model.config.variant, loss_config, gan_classes)[1]["total"]


# ------------------------------------------------------------------ generic trainer

def fit(
    params: ParameterSet,
    n_samples: int,
    batch_loss_fn: Callable[[dict, np.ndarray, np.random.Generator], Tensor],
    val_fn: Callable[[], float],
    config: TrainConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> StepReport:
    """Adam with early stopping on ``val_fn``; restores the best-validation parameters."""
    report = StepReport(step)
    params.reset_optimizer()
    best_val = math.inf
    best_values = {k: v.copy() for k, v in params.items()}
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n_samples)
        total, seen = 0.0, 0
        for start in range(0, n_samples, config.batch_size):
            rows = perm[start:start + config.batch_size]
            leaves = params.leaves()
            loss = batch_loss_fn(leaves, rows, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at step {step}, epoch {epoch}, batch starting {start}")
            grads = dc.backward(loss, leaves)
            grads, _ = dc.clip_by_global_norm(grads, config.clip_norm)
            dc.adam_step(params, grads, config.lr, config.beta1, config.beta2, config.eps)
            total += value * len(rows)
            seen += len(rows)
        report.train_losses.append(total / max(seen, 1))
        val = float(val_fn())
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at step {step}, epoch {epoch}")
        report.val_losses.append(val)
        report.epochs_run = epoch
        if best_val - val >= config.min_delta:
            best_val, stale, report.best_epoch = val, 0, epoch
            best_values = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                report.stop_reason = "patience"
                break
    for k, v in best_values.items():
        params.values[k] = v
    return report


def train_epochs(state: LearnerState, pool: Pool, val_pool: Pool) -> StepReport:
    model = state.model
    gan = state.registry.gan_mask()
    cfg = state.train_config
    size = model.config.input_size

    def batch_fn(leaves, rows, rng):
        part = pool.take(rows)
        part.images = crop_batch(part.images, size, rng)
        return batch_loss(leaves, part, model.config, state.loss_config, gan)

    centred = Pool(crop_batch(val_pool.images, size), val_pool.labels, val_pool.is_new, val_pool.old_logits)
    rng = np.random.default_rng([cfg.seed, 2, state.step])
    return fit(
        model.params,
        len(pool),
        batch_fn,
        lambda: pool_objective(model, centred, state.loss_config, gan),
        cfg,
        rng,
        step=state.step,
    )


# ------------------------------------------------------------------ pools

def _new_pool(data: Dataset, registry: ClassRegistry, architectures, split: str, t_old: int) -> Pool:
    images, ids = [], []
    for arch in architectures:
        for origin in ("G", "R"):
            block = data.block(arch, origin, split)
            images.append(block.images)
            ids.append(np.full(len(block), registry.class_id(arch, origin)))
    ids = np.concatenate(ids)
    return Pool(
        np.concatenate(images),
        BatchLabels.from_registry(ids, registry),
        np.ones(len(ids), bool),
        np.zeros((len(ids), t_old), np.float32),
    )


def _exemplar_pool(store: ExemplarStore, registry: ClassRegistry, old_model: ModelSnapshot, t_old: int, image_shape) -> Pool:
    sets = [(cid, ex) for cid, ex in sorted(store.sets.items()) if len(ex)]
    if not sets:
        return Pool(
            np.zeros((0, *image_shape), np.float32),
            BatchLabels(np.zeros(0, np.int64), np.zeros(0, bool)),
            np.zeros(0, bool),
            np.zeros((0, t_old), np.float32),
        )
    images = np.concatenate([ex.images for _, ex in sets])
    ids = np.concatenate([np.full(len(ex), cid) for cid, ex in sets])
    old_logits = forward_all(old_model, crop_batch(images, old_model.config.input_size))["logits"][:, :t_old]
    return Pool(images, BatchLabels.from_registry(ids, registry), np.zeros(len(ids), bool), old_logits)


def _concat(a: Pool, b: Pool) -> Pool:
    return Pool(
        np.concatenate([a.images, b.images]),
        BatchLabels(
            np.concatenate([a.labels.class_ids, b.labels.class_ids]),
            np.concatenate([a.labels.is_gan, b.labels.is_gan]),
        ),
        np.concatenate([a.is_new, b.is_new]),
        np.concatenate([a.old_logits, b.old_logits]),
    )


# ------------------------------------------------------------------ exemplar bookkeeping

def _build_new_sets(state: LearnerState, data: Dataset, architectures, quota) -> None:
    size = state.model.config.input_size
    for arch in architectures:
        for origin in ("G", "R"):
            block = data.block(arch, origin, "train")
            feats = extract_features(state.model, crop_batch(block.images, size))
            keep = select_exemplars(feats, quota)
            cid = state.registry.class_id(arch, origin)
            state.store.sets[cid] = ExemplarSet(block.images[keep], keep.astype(np.int64), [block.paths[i] for i in keep])
            state.store.available[cid] = len(block)


def _reduce_old_sets(state: LearnerState, class_ids, quota) -> None:
    size = state.model.config.input_size
    for cid in class_ids:
        ex = state.store.sets.get(cid)
        if ex is None or len(ex) <= quota:
            continue
        feats = extract_features(state.model, crop_batch(ex.images, size))
        reduce_exemplars(state.store, cid, quota, feats)


def check_invariants(state: LearnerState) -> None:
    """Raise if the exemplar store, registry and head disagree."""
    t = len(state.registry)
    if state.model.n_classes != t:
        raise IncganError(f"head has {state.model.n_classes} rows but registry holds {t} classes")
    budget = state.store.budget
    if state.store.total > budget:
        raise IncganError(f"{state.store.total} exemplars exceed budget {budget}")
    if budget != math.inf:
        quota = class_quota(budget, t)
        for cid in range(1, t + 1):
            have = len(state.store.sets.get(cid, ()))
            expected = min(quota, state.store.available.get(cid, quota))
            if have != expected:
                raise IncganError(f"class {cid} holds {have} exemplars, expected {expected}")


# ------------------------------------------------------------------ protocol

def initialize(
    data: Dataset,
    architectures: list[int],
    net_config: NetworkConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    budget: float,
) -> LearnerState:
    """Train on the first architectures from scratch and build their exemplar sets."""
    if not architectures:
        raise ConfigError("initialisation needs at least one architecture")
    registry = ClassRegistry()
    for arch in architectures:
        registry.add_architecture(arch)
    model = init_model(net_config, np.random.default_rng([train_config.seed, 1]), n_classes=len(registry))
    state = LearnerState(model, ExemplarStore(budget), registry, loss_config, train_config, step=1)
    pool = _new_pool(data, registry, architectures, "train", 0)
    if len(pool) == 0:
        raise ConfigError("empty training set")
    val = _new_pool(data, registry, architectures, "val", 0)
    report = train_epochs(state, pool, val)
    state.reports.append(report)
    _build_new_sets(state, data, architectures, class_quota(budget, len(registry)))
    compute_templates(state.store, state.model)
    log.info("step 1: %d classes, %d epochs (%s)", len(registry), report.epochs_run, report.stop_reason)
    return state


def increment(state: LearnerState, data: Dataset, architecture: int) -> StepReport:
    """Absorb one new architecture: snapshot, grow head, fine-tune, update exemplars."""
    state.step += 1
    t_old = len(state.registry)
    old_ids = list(range(1, t_old + 1))
    state.snapshot = snapshot(state.model)
    state.registry.add_architecture(architecture)
    expand_head(state.model, 2)
    image_shape = data.block(architecture, "G", "train").images.shape[1:]
    exemplars = _exemplar_pool(state.store, state.registry, state.snapshot, t_old, image_shape)
    pool = _concat(_new_pool(data, state.registry, [architecture], "train", t_old), exemplars)
    val = _concat(_new_pool(data, state.registry, [architecture], "val", t_old), exemplars)
    report = train_epochs(state, pool, val)
    state.reports.append(report)
    quota = class_quota(state.store.budget, len(state.registry))
    _build_new_sets(state, data, [architecture], quota)
    _reduce_old_sets(state, old_ids, quota)
    compute_templates(state.store, state.model)
    log.info(
        "step %d: %d classes, %d exemplars, %d epochs (%s)",
        state.step, len(state.registry), state.store.total, report.epochs_run, report.stop_reason,
    )
    return report


# ------------------------------------------------------------------ inference

def predict(state: LearnerState, images: np.ndarray, outputs: dict | None = None) -> np.ndarray:
    """Class ids by nearest template, or by head argmax when no exemplars exist."""
    out = outputs if outputs is not None else forward_all(state.model, crop_batch(images, state.model.config.input_size))
    if state.store.templates:
        return classify_nme(out["features"], state.store.templates)
    if state.model.n_classes < 1:
        raise UsageError("model has no classes")
    return np.argmax(out["logits"], axis=1) + 1


def detect(state: LearnerState, images: np.ndarray) -> np.ndarray:
    """True where the predicted class is a GAN class."""
    return state.registry.gan_mask()[predict(state, images) - 1]


def evaluate(state: LearnerState, data: Dataset, split: str = "test") -> MetricsReport:
    archs = state.registry.architectures
    gan_classes = state.registry.gan_mask()
    pos = {a: i for i, a in enumerate(archs)}
    confusion = np.zeros((len(archs), len(archs)), dtype=np.int64)
    per_arch, correct, count = {}, 0, 0
    aux_correct = 0
    size = state.model.config.input_size
    for arch in archs:
        arch_correct, arch_count = 0, 0
        for origin in ("G", "R"):
            block = data.block(arch, origin, split)
            out = forward_all(state.model, crop_batch(block.images, size))
            pred = predict(state, block.images, out)
            said_gan = gan_classes[pred - 1]
            hits = int((said_gan == (origin == "G")).sum())
            arch_correct += hits
            arch_count += len(block)
            if origin == "G":
                for p in state.registry.arch_of_ids(pred):
                    confusion[pos[arch], pos[p]] += 1
            if "detector_logits" in out:
                aux_correct += int(((out["detector_logits"] >= 0) == (origin == "G")).sum())
        per_arch[arch] = arch_correct / arch_count
        correct += arch_correct
        count += arch_count
    return MetricsReport(
        step=state.step,
        architectures=list(archs),
        detection_acc=correct / count,
        per_arch_detection=per_arch,
        classification_acc=float(np.trace(confusion) / confusion.sum()),
        confusion=confusion,
        aux_detector_acc=aux_correct / count if state.model.has_detector else None,
        rule="nme" if state.store.templates else "head_argmax",
    )
