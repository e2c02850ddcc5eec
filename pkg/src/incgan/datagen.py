"""Synthetic GAN/real image surrogate with planted per-architecture fingerprints.

Real images of an architecture are Gaussian-smoothed white noise with an
architecture-specific smoothing radius and per-channel gain. GAN images
come from the same process plus a 2-D sinusoid whose frequency is unique to
the architecture. Every sample draws from its own generator seeded by
``(run_seed, architecture, origin, split, index)``, so any single sample can
be regenerated in isolation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, FormatError
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ORIGINS = ("G", "R")
MANIFEST = "manifest.txt"
REAL_SCALE = 1.0


@dataclass(frozen=True)
class FingerprintSpec:
    frequency: tuple[int, int]  # cycles per image along (x, y)
    phase: float = 0.0
    amplitude: float = 0.5
    mixing: tuple[float, ...] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class ArchitectureSpec:
    index: int
    smoothing: float
    gains: tuple[float, ...]
    fingerprint: FingerprintSpec


# smoothing radius, channel gains, fingerprint frequency, phase, channel mixing
_ARCH_TABLE = [
    (1.5, (1.0, 0.9, 0.8), (16, 16), 0.0, (1.0, 1.0, 1.0)),
    (0.7, (0.8, 1.0, 0.9), (8, 0), 0.5, (1.0, 0.6, 0.3)),
    (2.5, (0.9, 0.9, 1.1), (0, 11), 1.0, (0.4, 1.0, 0.7)),
    (1.0, (1.1, 0.8, 1.0), (6, 6), 2.0, (0.8, 0.8, 1.0)),
    (3.5, (0.7, 1.1, 1.0), (12, -5), 0.3, (1.0, 0.5, 0.8)),
    (0.9, (1.0, 1.0, 0.7), (4, 10), 1.5, (0.6, 1.0, 1.0)),
    (2.0, (0.8, 0.8, 1.2), (14, 3), 2.5, (1.0, 0.8, 0.5)),
    (1.2, (1.2, 1.0, 0.8), (3, -13), 0.8, (0.7, 0.7, 1.0)),
]
MAX_ARCHITECTURES = len(_ARCH_TABLE)


def default_architectures(count: int, amplitude: float = 0.5, channels: int = 3) -> list[ArchitectureSpec]:
    if not 1 <= count <= MAX_ARCHITECTURES:
        raise ConfigError(f"architectures must lie in 1..{MAX_ARCHITECTURES}, got {count}")
    if not 0.0 <= amplitude <= 1.0:
        raise ConfigError(f"fingerprint amplitude must lie in [0, 1], got {amplitude}")
    specs = []
    for i, (radius, gains, freq, phase, mix) in enumerate(_ARCH_TABLE[:count]):
        gains = tuple(gains[c % 3] for c in range(channels))
        mix = tuple(mix[c % 3] for c in range(channels))
        specs.append(ArchitectureSpec(i, radius, gains, FingerprintSpec(freq, phase, amplitude, mix)))
    return specs


def with_amplitude(spec: ArchitectureSpec, amplitude: float) -> ArchitectureSpec:
    return replace(spec, fingerprint=replace(spec.fingerprint, amplitude=amplitude))


def fingerprint_pattern(fp: FingerprintSpec, size: int, channels: int) -> np.ndarray:
    """Unit-amplitude fingerprint, shape (size, size, channels)."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    fx, fy = fp.frequency
    wave = np.cos(2 * np.pi * (fx * x + fy * y) / size + fp.phase)
    return wave[:, :, None] * np.asarray(fp.mixing[:channels], dtype=np.float64)[None, None, :]


def sample_seed(run_seed: int, architecture: int, origin: str, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, architecture, ORIGINS.index(origin), SPLITS.index(split), index])


def generate_sample(
    spec: ArchitectureSpec, origin: str, split: str, index: int, run_seed: int, size: int = 32, channels: int = 3
) -> np.ndarray:
    rng = np.random.default_rng(sample_seed(run_seed, spec.index, origin, split, index))
    noise = rng.standard_normal((size, size, channels))
    smooth = gaussian_filter(noise, sigma=(spec.smoothing, spec.smoothing, 0), mode="wrap")
    smooth /= smooth.std() + 1e-12
    img = np.clip(REAL_SCALE * smooth * np.asarray(spec.gains)[None, None, :], -1.0, 1.0)
    if origin == "G":
        fp = spec.fingerprint
        img = np.clip(img + fp.amplitude * fingerprint_pattern(fp, size, channels), -1.0, 1.0)
    return img.astype(np.float32)


def sample_path(architecture: int, origin: str, split: str, index: int) -> str:
    return f"arch{architecture}/{origin}/{split}/{index:05d}.iltf"


@dataclass
class Block:
    """All samples of one (architecture, origin, split) cell, in index order."""

    images: np.ndarray
    paths: list[str]

    def __len__(self) -> int:
        return len(self.paths)


class Dataset:
    def __init__(self, blocks: dict[tuple[int, str, str], Block] | None = None):
        self.blocks = dict(blocks or {})

    def block(self, architecture: int, origin: str, split: str) -> Block:
        try:
            return self.blocks[(architecture, origin, split)]
        except KeyError:
            raise ConfigError(f"dataset has no samples for architecture {architecture} {origin}/{split}") from None

    @property
    def architectures(self) -> list[int]:
        return sorted({a for a, _, _ in self.blocks})

    def update(self, other: "Dataset") -> None:
        self.blocks.update(other.blocks)

    def summary(self) -> list[str]:
        lines = []
        for arch in self.architectures:
            counts = [
                f"{o}/{s}={len(self.blocks[(arch, o, s)])}"
                for o in ORIGINS for s in SPLITS if (arch, o, s) in self.blocks
            ]
            lines.append(f"architecture {arch}: " + " ".join(counts))
        return lines


def generate_architecture(
    spec: ArchitectureSpec, counts: dict[str, int], seed: int, size: int = 32, channels: int = 3
) -> Dataset:
    for split in SPLITS:
        if counts.get(split, 0) < 1:
            raise ConfigError(f"need at least one {split} sample per class, got {counts.get(split)}")
    blocks = {}
    for origin in ORIGINS:
        for split in SPLITS:
            n = counts[split]
            images = np.stack([generate_sample(spec, origin, split, i, seed, size, channels) for i in range(n)])
            blocks[(spec.index, origin, split)] = Block(
                images, [sample_path(spec.index, origin, split, i) for i in range(n)]
            )
    return Dataset(blocks)


def generate_dataset(
    specs: list[ArchitectureSpec], counts: dict[str, int], seed: int, size: int = 32, channels: int = 3
) -> Dataset:
    data = Dataset()
    for spec in specs:
        data.update(generate_architecture(spec, counts, seed, size, channels))
    return data


# ------------------------------------------------------------------ container files

def write_container(data: Dataset, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["# relative_path,architecture_index,origin,split"]
    for (arch, origin, split), block in sorted(data.blocks.items(), key=lambda kv: (kv[0][0], kv[0][1], SPLITS.index(kv[0][2]))):
        (root / f"arch{arch}" / origin / split).mkdir(parents=True, exist_ok=True)
        for img, rel in zip(block.images, block.paths):
            write_tensor(root / rel, img)
            lines.append(f"{rel},{arch},{origin},{split}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root / MANIFEST


def read_manifest(root: str | Path) -> list[tuple[str, int, str, str]]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FormatError(f"{path}: manifest not found")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 comma-separated fields, got {len(parts)}")
        rel, arch, origin, split = parts
        if not arch.isdigit():
            raise FormatError(f"{path}:{lineno}: bad architecture index {arch!r}")
        if origin not in ORIGINS:
            raise FormatError(f"{path}:{lineno}: unknown origin token {origin!r}")
        if split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split token {split!r}")
        rows.append((rel, int(arch), origin, split))
    return rows


def read_container(root: str | Path) -> Dataset:
    root = Path(root)
    grouped: dict[tuple[int, str, str], list[str]] = {}
    for rel, arch, origin, split in read_manifest(root):
        grouped.setdefault((arch, origin, split), []).append(rel)
    blocks = {}
    for key, rels in grouped.items():
        images = []
        for rel in rels:
            if not (root / rel).exists():
                raise FormatError(f"{root / MANIFEST}: path {rel!r} does not resolve")
            images.append(read_tensor(root / rel))
        blocks[key] = Block(np.stack(images), rels)
    return Dataset(blocks)
