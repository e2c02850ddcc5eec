"""Exemplar sets, class templates and the nearest-mean-of-exemplars rule."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, UsageError

log = logging.getLogger(__name__)

UNLIMITED = math.inf


@dataclass(frozen=True)
class ClassDescriptor:
    class_id: int
    architecture: int
    origin: str  # "G" or "R"


class ClassRegistry:
    """Bijection between (architecture, origin) pairs and dense class ids 1..t.

    Each architecture contributes its GAN class first, then its real class.
    """

    def __init__(self):
        self.classes: list[ClassDescriptor] = []

    def __len__(self) -> int:
        return len(self.classes)

    def add_architecture(self, architecture: int) -> tuple[int, int]:
        if architecture in self.architectures:
            raise UsageError(f"architecture {architecture} is already registered")
        gan_id = len(self.classes) + 1
        self.classes.append(ClassDescriptor(gan_id, architecture, "G"))
        self.classes.append(ClassDescriptor(gan_id + 1, architecture, "R"))
        return gan_id, gan_id + 1

    @property
    def architectures(self) -> list[int]:
        return [c.architecture for c in self.classes if c.origin == "G"]

    def describe(self, class_id: int) -> ClassDescriptor:
        if not 1 <= class_id <= len(self.classes):
            raise UsageError(f"class id {class_id} outside 1..{len(self.classes)}")
        return self.classes[class_id - 1]

    def class_id(self, architecture: int, origin: str) -> int:
        for c in self.classes:
            if c.architecture == architecture and c.origin == origin:
                return c.class_id
        raise UsageError(f"no class for architecture {architecture} origin {origin}")

    def gan_mask(self) -> np.ndarray:
        return np.array([c.origin == "G" for c in self.classes], dtype=bool)

    def arch_of_ids(self, class_ids) -> np.ndarray:
        archs = np.array([c.architecture for c in self.classes])
        return archs[np.asarray(class_ids) - 1]


@dataclass
class ExemplarSet:
    images: np.ndarray
    sample_ids: np.ndarray  # index of each exemplar within its class training set
    paths: list[str]

    def __len__(self) -> int:
        return len(self.sample_ids)

    def subset(self, keep: np.ndarray) -> "ExemplarSet":
        return ExemplarSet(self.images[keep], self.sample_ids[keep], [self.paths[i] for i in keep])


@dataclass
class ExemplarStore:
    budget: float
    sets: dict[int, ExemplarSet] = field(default_factory=dict)
    templates: dict[int, np.ndarray] = field(default_factory=dict)
    available: dict[int, int] = field(default_factory=dict)  # training samples per class

    @property
    def total(self) -> int:
        return sum(len(s) for s in self.sets.values())

    def counts(self) -> dict[int, int]:
        return {cid: len(s) for cid, s in sorted(self.sets.items())}

    def template_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array(sorted(self.templates), dtype=np.int64)
        if not len(ids):
            return np.zeros((0, 0)), ids
        return np.stack([self.templates[i] for i in ids]), ids


def class_quota(budget: float, n_classes: int) -> float:
    """Exemplars per class: ``floor(M / t)``; unlimited when ``M`` is infinite."""
    if n_classes < 1:
        raise UsageError("class_quota needs at least one class")
    if budget == UNLIMITED:
        return UNLIMITED
    if budget < 0:
        raise ConfigError(f"memory budget must be >= 0, got {budget}")
    return int(budget) // n_classes


def class_mean(features) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise UsageError("class_mean needs a non-empty list of feature vectors")
    return feats.mean(axis=0)


TIE_RTOL = 1e-12  # distances this close (relative to the largest) count as ties


def _distances(features: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = np.asarray(features, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return np.sqrt((diff * diff).sum(axis=-1))


def _tie_groups(sorted_dist: np.ndarray) -> np.ndarray:
    """Group label per position of an ascending distance array; near-equal neighbours share a group."""
    if len(sorted_dist) == 0:
        return np.zeros(0, dtype=np.int64)
    tol = TIE_RTOL * max(float(sorted_dist[-1]), 1e-300)
    return np.concatenate([[0], np.cumsum(np.diff(sorted_dist) > tol)])


def _rank_by_distance(features: np.ndarray, center: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Positions sorted by distance to ``center``, ties (up to rounding) by ascending sample id."""
    dist = _distances(features, center)
    order = np.lexsort((ids, dist))
    groups = _tie_groups(dist[order])
    return order[np.lexsort((np.asarray(ids)[order], groups))]


def select_exemplars(class_features, m: float, sample_ids=None) -> np.ndarray:
    """Positions of the ``m`` features closest to the class mean, closest first."""
    feats = np.asarray(class_features, dtype=np.float64)
    ids = np.arange(len(feats)) if sample_ids is None else np.asarray(sample_ids)
    if len(feats) == 0 or m <= 0:
        return np.zeros(0, dtype=np.int64)
    order = _rank_by_distance(feats, class_mean(feats), ids)
    return order[: int(min(m, len(feats)))]


def reduce_exemplars(
    store: ExemplarStore, class_id: int, new_m: float, features: np.ndarray, template: np.ndarray | None = None
) -> ExemplarStore:
    """Keep the ``new_m`` exemplars of a class closest to its template.

    ``features`` are the exemplars' features under the current model; the
    template defaults to their mean.
    """
    ex = store.sets[class_id]
    if len(features) != len(ex):
        raise UsageError(f"{len(features)} feature rows for {len(ex)} exemplars of class {class_id}")
    if new_m >= len(ex):
        return store
    center = class_mean(features) if template is None else template
    keep = _rank_by_distance(features, center, ex.sample_ids)[: int(max(new_m, 0))]
    store.sets[class_id] = ex.subset(keep)
    return store


def compute_templates(store: ExemplarStore, model) -> dict[int, np.ndarray]:
    """Mean current-model feature of each class's exemplars."""
    from .model import extract_features

    templates = {}
    for cid, ex in sorted(store.sets.items()):
        if len(ex) == 0:
            if store.budget > 0:
                raise ConfigError(f"class {cid} has no exemplars under budget {store.budget}")
            continue
        templates[cid] = class_mean(extract_features(model, ex.images))
    store.templates = templates
    return templates


def nme_distances(features: np.ndarray, templates: np.ndarray) -> np.ndarray:
    return _distances(np.asarray(features)[:, None, :], np.asarray(templates)[None])


def classify_nme(features, templates, class_ids=None) -> np.ndarray:
    """Class id of the nearest template per feature row; ties go to the smallest id.

    ``templates`` is either a (t, D) matrix (ids 1..t, or ``class_ids``) or a
    ``{class_id: vector}`` mapping.
    """
    if isinstance(templates, dict):
        class_ids = np.array(sorted(templates), dtype=np.int64)
        templates = np.stack([templates[c] for c in class_ids]) if len(class_ids) else np.zeros((0, 0))
    templates = np.asarray(templates, dtype=np.float64)
    if templates.ndim != 2 or len(templates) == 0:
        raise UsageError("classify_nme needs at least one template")
    ids = np.arange(1, len(templates) + 1) if class_ids is None else np.asarray(class_ids)
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 1
    feats = np.atleast_2d(feats)
    # sort columns by id so the first near-minimal column is the smallest id
    col = np.argsort(ids, kind="stable")
    dist = nme_distances(feats, templates[col])
    best = dist.min(axis=1, keepdims=True)
    tol = TIE_RTOL * np.maximum(dist.max(axis=1, keepdims=True), 1e-300)
    pick = np.argmax(dist <= best + tol, axis=1)
    out = ids[col][pick]
    return out[0] if single else out


# ------------------------------------------------------------------ persistence

def save_store(store: ExemplarStore, path: str | Path) -> None:
    budget = "inf" if store.budget == UNLIMITED else str(int(store.budget))
    lines = [f"# budget={budget}", "# class_id,sample_path"]
    for cid, ex in sorted(store.sets.items()):
        lines.extend(f"{cid},{p}" for p in ex.paths)
    Path(path).write_text("\n".join(lines) + "\n")


def load_store_manifest(path: str | Path) -> tuple[float, list[tuple[int, str]]]:
    budget = None
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.startswith("# budget="):
            value = line.split("=", 1)[1].strip()
            budget = UNLIMITED if value == "inf" else int(value)
            continue
        if not line.strip() or line.startswith("#"):
            continue
        cid, sep, sample_path = line.partition(",")
        if not sep or not cid.strip().isdigit():
            raise FormatError(f"{path}:{lineno}: expected class_id,sample_path")
        rows.append((int(cid), sample_path.strip()))
    if budget is None:
        raise FormatError(f"{path}: missing '# budget=' header")
    return budget, rows
