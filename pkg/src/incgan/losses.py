"""Training objectives for the incremental learner.

Every loss returns a scalar ``Tensor`` in minimisation form (negated
log-likelihoods) averaged over the samples it is computed on. Scores are
clipped to ``[EPS, 1 - EPS]`` before any logarithm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, UsageError

EPS = 1e-7

DEFAULT_LAMBDA = {"mt_mc": 1.0, "mt_sc": 0.5, "base_icarl": 0.0, "finetune": 0.0}


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.5
    temperature: float = 2.0
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.temperature < 1.0:
            raise ConfigError(f"temperature must be >= 1, got {self.temperature}")
        if self.lam < 0.0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")

    @classmethod
    def for_variant(cls, variant: str, gamma: float = 0.5, temperature: float = 2.0, lam: float | None = None):
        if variant == "finetune":
            return cls(gamma=0.0, temperature=temperature, lam=0.0)
        if variant == "base_icarl":
            return cls(gamma=gamma, temperature=temperature, lam=0.0)
        return cls(gamma=gamma, temperature=temperature, lam=DEFAULT_LAMBDA[variant] if lam is None else lam)


@dataclass(frozen=True)
class BatchLabels:
    """Per-sample class ids (1-based) and GAN/real origin flags."""

    class_ids: np.ndarray
    is_gan: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "class_ids", np.asarray(self.class_ids, dtype=np.int64))
        object.__setattr__(self, "is_gan", np.asarray(self.is_gan, dtype=bool))
        if self.class_ids.shape != self.is_gan.shape:
            raise UsageError("class_ids and is_gan must have the same length")

    @classmethod
    def from_registry(cls, class_ids, registry) -> "BatchLabels":
        ids = np.asarray(class_ids, dtype=np.int64)
        return cls(ids, registry.gan_mask()[ids - 1])

    def __len__(self) -> int:
        return len(self.class_ids)

    def subset(self, rows) -> "BatchLabels":
        return BatchLabels(self.class_ids[rows], self.is_gan[rows])


def _zero(dtype=np.float64) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def _clipped_log(x: Tensor) -> Tensor:
    return dc.log(dc.clip(x, EPS, 1.0 - EPS))


def tempered_softmax(logits, temperature: float) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classification_loss(scores, labels: BatchLabels) -> Tensor:
    """Per-class binary cross-entropy summed over classes, averaged over samples."""
    g = dc.as_tensor(scores)
    n, t = g.shape
    if len(labels) != n:
        raise UsageError(f"{len(labels)} labels for {n} score rows")
    if n == 0:
        return _zero(g.dtype)
    if labels.class_ids.min() < 1 or labels.class_ids.max() > t:
        raise UsageError(f"class labels must lie in 1..{t}")
    onehot = np.zeros((n, t), dtype=g.dtype)
    onehot[np.arange(n), labels.class_ids - 1] = 1
    ll = onehot * _clipped_log(g) + (1 - onehot) * _clipped_log(1.0 - g)
    return -dc.sum(ll) / n


def distillation_loss(new_logits, old_logits, temperature: float) -> Tensor:
    """``T^2 * KL(new || old)`` of the tempered softmaxes, averaged over rows."""
    new = dc.as_tensor(new_logits)
    old = np.asarray(old_logits.data if isinstance(old_logits, Tensor) else old_logits)
    if new.shape != old.shape:
        raise UsageError(f"distillation logits differ in shape: new {new.shape} vs old {old.shape}")
    n = new.shape[0]
    if n == 0 or new.shape[1] == 0:
        return _zero(new.dtype)
    log_p = dc.log_softmax(new / temperature, axis=1)
    log_q = dc.log_softmax(Tensor(old.astype(new.dtype)) / temperature, axis=1).data
    kl = dc.sum(dc.exp(log_p) * (log_p - log_q))
    return kl * (temperature ** 2 / n)


def icarl_loss(class_term, distill_term, gamma: float) -> Tensor:
    return (1.0 - gamma) * dc.as_tensor(class_term) + gamma * dc.as_tensor(distill_term)


def binary_loss_mtmc(detector_scores, labels: BatchLabels) -> Tensor:
    """Binary cross-entropy of the separate detector head."""
    d = dc.as_tensor(detector_scores)
    n = d.shape[0]
    if n == 0:
        return _zero(d.dtype)
    gan = labels.is_gan.astype(d.dtype)
    ll = gan * _clipped_log(d) + (1 - gan) * _clipped_log(1.0 - d)
    return -dc.sum(ll) / n


def mtmc_loss(icarl, bl, lam: float) -> Tensor:
    return dc.as_tensor(icarl) + lam * dc.as_tensor(bl)


def group_binary_loss_mtsc(scores, labels: BatchLabels, registry) -> Tensor:
    """Sum of log-scores over the sample's own origin group (all GAN or all real classes)."""
    g = dc.as_tensor(scores)
    n, t = g.shape
    gan_cls = np.asarray(registry.gan_mask() if hasattr(registry, "gan_mask") else registry, dtype=bool)
    if gan_cls.shape != (t,):
        raise UsageError(f"registry covers {gan_cls.size} classes but scores have {t}")
    if not gan_cls.any() or gan_cls.all():
        raise UsageError("both a GAN and a real class group are required")
    if n == 0:
        return _zero(g.dtype)
    # row i selects the classes sharing its origin
    member = np.where(labels.is_gan[:, None], gan_cls[None, :], ~gan_cls[None, :]).astype(g.dtype)
    return -dc.sum(member * _clipped_log(g)) / n


def mtsc_loss(icarl, bl, lam: float) -> Tensor:
    return dc.as_tensor(icarl) + lam * dc.as_tensor(bl)
