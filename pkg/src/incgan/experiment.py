"""Experiment runs built on the learner: one stream, budget sweeps and the lambda/T grid."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .config import ExperimentConfig, format_config, load_config
from .datagen import Dataset, default_architectures, generate_dataset, read_container
from .errors import FormatError
from .learner import (
    LearnerState,
    MetricsReport,
    StepReport,
    check_invariants,
    evaluate,
    increment,
    initialize,
)
from .memory import ClassRegistry, ExemplarSet, ExemplarStore, load_store_manifest, save_store
from .model import VARIANTS, load_model, save_model
from .report import csv_text, emit_svg_curve, write_atomic
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

DEFAULT_BUDGETS = (math.inf, 128, 32, 0)
ABLATION_LAMBDAS = (0.25, 0.5, 1.0)
ABLATION_TEMPERATURES = (1.0, 2.0, 3.0)
ABLATION_VARIANTS = ("mt_sc", "mt_mc")
ABLATION_ARCHITECTURES = 3


@dataclass
class RunResult:
    config: ExperimentConfig
    state: LearnerState
    metrics: list[MetricsReport] = field(default_factory=list)
    steps: list[StepReport] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def final(self) -> MetricsReport:
        return self.metrics[-1]


def build_dataset(config: ExperimentConfig, architectures: int | None = None) -> Dataset:
    specs = default_architectures(architectures or config.architectures, config.amplitude, config.channels)
    return generate_dataset(specs, config.counts(), config.seed, config.image_size, config.channels)


def run_stream(
    config: ExperimentConfig,
    data: Dataset | None = None,
    on_step: Callable[[LearnerState, MetricsReport], None] | None = None,
) -> RunResult:
    """Initialise on the first architectures, then add the rest one at a time.

    Store/registry invariants are checked after every step.
    """
    start = time.process_time()
    data = data if data is not None else build_dataset(config)
    archs = list(range(config.architectures))
    s = config.initial_architectures
    state = initialize(
        data, archs[:s], config.network_config(), config.loss_config(), config.train_config(), config.budget
    )
    result = RunResult(config, state)
    _record(result, data, on_step)
    for arch in archs[s:]:
        increment(state, data, arch)
        _record(result, data, on_step)
    result.seconds = time.process_time() - start
    return result


def extend_stream(result: RunResult, data: Dataset, architecture: int) -> MetricsReport:
    """Run one more increment on a finished stream."""
    increment(result.state, data, architecture)
    return _record(result, data, None)


def _record(result: RunResult, data: Dataset, on_step) -> MetricsReport:
    check_invariants(result.state)
    metrics = evaluate(result.state, data)
    result.metrics.append(metrics)
    result.steps.append(result.state.reports[-1])
    if on_step is not None:
        on_step(result.state, metrics)
    log.info("step %d detection %.4f classification %.4f", metrics.step, metrics.detection_acc, metrics.classification_acc)
    return metrics


# ------------------------------------------------------------------ tables

def metrics_table(result: RunResult) -> tuple[list[str], list[list]]:
    n_arch = max(result.config.architectures, max(len(m.architectures) for m in result.metrics))
    header = ["step", "seen_architectures", "detection_acc"]
    header += [f"det_arch{i}" for i in range(n_arch)]
    header += ["classification_acc"]
    mt_mc = result.config.variant == "mt_mc"
    if mt_mc:
        header.append("aux_detector_acc")
    header.append("epochs_run")
    rows = []
    for m, s in zip(result.metrics, result.steps):
        row = [m.step, len(m.architectures), m.detection_acc]
        row += [m.per_arch_detection.get(i) for i in range(n_arch)]
        row.append(m.classification_acc)
        if mt_mc:
            row.append(m.aux_detector_acc)
        row.append(s.epochs_run)
        rows.append(row)
    return header, rows


def confusion_table(metrics: MetricsReport) -> tuple[list[str], list[list]]:
    header = ["true\\predicted"] + [f"arch{a}" for a in metrics.architectures]
    rows = [[f"arch{a}"] + [int(v) for v in metrics.confusion[i]] for i, a in enumerate(metrics.architectures)]
    return header, rows


def write_run_outputs(result: RunResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "config.txt", format_config(result.config.resolved()))
    write_atomic(out / "metrics.csv", csv_text(*metrics_table(result)))
    write_atomic(out / "confusion.csv", csv_text(*confusion_table(result.final)))
    curve = {result.config.variant: [(m.step, m.detection_acc) for m in result.metrics]}
    write_atomic(out / "detection.svg", emit_svg_curve(curve))
    save_checkpoint(result.state, result.config, out / "checkpoint")
    return out


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(state: LearnerState, config: ExperimentConfig, directory: str | Path) -> None:
    directory = Path(directory)
    save_model(state.model, directory / "model")
    save_store(state.store, directory / "exemplars.txt")
    lines = ["# class_id,architecture_index,origin"]
    lines += [f"{c.class_id},{c.architecture},{c.origin}" for c in state.registry.classes]
    (directory / "registry.txt").write_text("\n".join(lines) + "\n")
    if state.store.templates:
        ids = sorted(state.store.templates)
        write_tensor(directory / "templates.iltf", np.stack([state.store.templates[i] for i in ids]))
    (directory / "config.txt").write_text(format_config(config.resolved()))
    (directory / "step.txt").write_text(f"{state.step}\n")


def load_checkpoint(directory: str | Path, data: Dataset | None = None) -> tuple[LearnerState, ExperimentConfig]:
    """Rebuild a learner state for evaluation; exemplar images are attached when ``data`` is given."""
    directory = Path(directory)
    if not (directory / "registry.txt").exists():
        raise FormatError(f"{directory}: not a checkpoint (registry.txt missing)")
    config = load_config(directory / "config.txt")
    model = load_model(directory / "model")
    registry = ClassRegistry()
    for lineno, line in enumerate((directory / "registry.txt").read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3 or parts[2] not in ("G", "R"):
            raise FormatError(f"{directory / 'registry.txt'}:{lineno}: expected class_id,architecture_index,origin")
        if parts[2] == "G":
            registry.add_architecture(int(parts[1]))
    budget, rows = load_store_manifest(directory / "exemplars.txt")
    store = ExemplarStore(budget)
    by_class: dict[int, list[str]] = {}
    for cid, path in rows:
        by_class.setdefault(cid, []).append(path)
    lookup = {}
    if data is not None:
        for block in data.blocks.values():
            lookup.update({p: (block, i) for i, p in enumerate(block.paths)})
    for cid, paths in by_class.items():
        if data is not None and all(p in lookup for p in paths):
            images = np.stack([lookup[p][0].images[lookup[p][1]] for p in paths])
            ids = np.array([lookup[p][1] for p in paths], dtype=np.int64)
        else:
            images = np.zeros((0,), np.float32)
            ids = np.zeros(len(paths), dtype=np.int64)
        store.sets[cid] = ExemplarSet(images, ids, paths)
    if (directory / "templates.iltf").exists():
        matrix = read_tensor(directory / "templates.iltf").astype(np.float64)
        ids = sorted(cid for cid, paths in by_class.items() if paths)
        if len(ids) != len(matrix):
            raise FormatError(f"{directory}: {len(matrix)} templates for {len(ids)} non-empty exemplar sets")
        store.templates = {cid: matrix[i] for i, cid in enumerate(ids)}
    step = int((directory / "step.txt").read_text().strip()) if (directory / "step.txt").exists() else 0
    state = LearnerState(model, store, registry, config.loss_config(), config.train_config(), step=step)
    return state, config


def load_or_generate(config: ExperimentConfig, data_dir: str | Path | None) -> Dataset:
    if data_dir is not None:
        return read_container(data_dir)
    return build_dataset(config)


# ------------------------------------------------------------------ sweeps

def budget_label(budget: float) -> str:
    return "inf" if budget == math.inf else str(int(budget))


def budget_sweep(
    config: ExperimentConfig,
    budgets=DEFAULT_BUDGETS,
    variants=VARIANTS,
    data: Dataset | None = None,
    on_cell: Callable[[str, float, RunResult], None] | None = None,
) -> dict[tuple[str, float], float]:
    """Final detection accuracy for every (variant, budget) cell, same seed throughout."""
    data = data if data is not None else build_dataset(config)
    ordered = [v for v in VARIANTS if v in variants]
    grid = {}
    for variant in ordered:
        for budget in budgets:
            cell = replace(config, variant=variant, memory_budget=budget, lam=config.lam)
            result = run_stream(cell, data)
            grid[(variant, budget)] = result.final.detection_acc
            if on_cell is not None:
                on_cell(variant, budget, result)
    return grid


def sweep_table(grid: dict[tuple[str, float], float], budgets) -> tuple[list[str], list[list]]:
    header = ["variant"] + [f"M={budget_label(b)}" for b in budgets]
    variants = [v for v in VARIANTS if any(k[0] == v for k in grid)]
    rows = [[v] + [grid[(v, b)] for b in budgets] for v in variants]
    return header, rows


def ablation(
    config: ExperimentConfig,
    lambdas=ABLATION_LAMBDAS,
    temperatures=ABLATION_TEMPERATURES,
    variants=ABLATION_VARIANTS,
    data: Dataset | None = None,
) -> dict[tuple[str, float, float], float]:
    """Detection accuracy after the third architecture for each (variant, T, lambda)."""
    n_arch = min(ABLATION_ARCHITECTURES, config.architectures)
    base = replace(config, architectures=n_arch, initial_architectures=min(config.initial_architectures, n_arch))
    data = data if data is not None else build_dataset(base)
    grid = {}
    for variant in variants:
        for temperature in temperatures:
            for lam in lambdas:
                cell = replace(base, variant=variant, temperature=temperature, lam=lam)
                grid[(variant, temperature, lam)] = run_stream(cell, data).final.detection_acc
    return grid


def ablation_argmax(grid: dict[tuple[str, float, float], float], variant: str) -> tuple[float, float]:
    """(T, lambda) of the best cell; ties go to the first cell in (T, lambda) order."""
    cells = sorted((k for k in grid if k[0] == variant), key=lambda k: (k[1], k[2]))
    best = max(cells, key=lambda k: grid[k])  # max keeps the first maximal element
    return best[1], best[2]


def ablation_table(grid, lambdas=ABLATION_LAMBDAS, temperatures=ABLATION_TEMPERATURES) -> tuple[list[str], list[list]]:
    header = ["variant", "temperature"] + [f"lambda={lam:g}" for lam in lambdas] + ["best_lambda"]
    rows = []
    variants = list(dict.fromkeys(k[0] for k in grid))
    for variant in variants:
        best_t, best_lam = ablation_argmax(grid, variant)
        for t in temperatures:
            row = [variant, float(t)] + [grid[(variant, t, lam)] for lam in lambdas]
            row.append(float(best_lam) if t == best_t else None)
            rows.append(row)
    return header, rows
