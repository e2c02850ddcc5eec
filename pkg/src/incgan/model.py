"""Feature extractor, growing per-class head and optional detector head.

The backbone is ``conv_stages`` stride-2 3x3 convolutions with ReLU, global
average pooling, one affine map to ``feature_dim`` and L2 normalisation.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterSet, Tensor
from .errors import ConfigError, FormatError, UsageError
from .tensorio import read_tensor, write_tensor

VARIANTS = ("base_icarl", "mt_mc", "mt_sc", "finetune")
EVAL_CHUNK = 256


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 32
    channels: int = 3
    feature_dim: int = 64
    conv_stages: int = 2
    base_channels: int = 16
    variant: str = "mt_sc"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.conv_stages < 1 or self.input_size % (2 ** self.conv_stages):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**conv_stages ({2 ** self.conv_stages})"
            )
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be at least 2")
        if self.channels < 1 or self.base_channels < 1:
            raise ConfigError("channels and base_channels must be positive")

    def stage_widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.conv_stages)]


@dataclass
class ModelState:
    config: NetworkConfig
    params: ParameterSet

    @property
    def n_classes(self) -> int:
        return self.params["head.w"].shape[0]

    @property
    def has_detector(self) -> bool:
        return "det.w" in self.params


@dataclass(frozen=True)
class ModelSnapshot:
    """Read-only copy of a model taken before an update phase."""

    config: NetworkConfig
    params: ParameterSet

    @property
    def n_classes(self) -> int:
        return self.params["head.w"].shape[0]

    @property
    def has_detector(self) -> bool:
        return "det.w" in self.params


def init_model(config: NetworkConfig, seed: int | np.random.Generator = 0, n_classes: int = 0) -> ModelState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = {}
    c_in = config.channels
    for i, c_out in enumerate(config.stage_widths()):
        values[f"conv{i}.w"] = dc.glorot_uniform(rng, (3, 3, c_in, c_out), 9 * c_in, 9 * c_out)
        values[f"conv{i}.b"] = np.zeros(c_out, np.float32)
        c_in = c_out
    d = config.feature_dim
    values["embed.w"] = dc.glorot_uniform(rng, (d, c_in), c_in, d)
    values["embed.b"] = np.zeros(d, np.float32)
    values["head.w"] = np.zeros((0, d), np.float32)
    values["head.b"] = np.zeros(0, np.float32)
    if config.variant == "mt_mc":
        values["det.w"] = np.zeros(d, np.float32)
        values["det.b"] = np.zeros(1, np.float32)
    state = ModelState(config, ParameterSet(values))
    if n_classes:
        state = expand_head(state, n_classes)
    return state


# ------------------------------------------------------------------ graph builders

def features_graph(leaves, batch, config: NetworkConfig) -> Tensor:
    """Differentiable unit-norm features for a batch shaped (N, H, W, C)."""
    x = np.asarray(batch)
    if x.ndim != 4 or x.shape[1:] != (config.input_size, config.input_size, config.channels):
        raise ConfigError(
            f"input batch shape {x.shape[1:]} does not match network input "
            f"{(config.input_size, config.input_size, config.channels)}"
        )
    h = Tensor(x.astype(leaves["embed.w"].dtype, copy=False))
    for i in range(config.conv_stages):
        h = dc.relu(dc.conv2d(h, leaves[f"conv{i}.w"], leaves[f"conv{i}.b"], stride=2, pad=1))
    pooled = dc.mean(h, axis=(1, 2))
    emb = dc.affine(pooled, leaves["embed.w"], leaves["embed.b"])
    return dc.l2_normalize(emb, eps=1e-8)


def logits_graph(leaves, feats: Tensor) -> Tensor:
    return dc.affine(feats, leaves["head.w"], leaves["head.b"])


def detector_graph(leaves, feats: Tensor) -> Tensor:
    return dc.sum(feats * leaves["det.w"], axis=1) + leaves["det.b"]


def _const_leaves(model) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in model.params.items()}


def _chunks(batch: np.ndarray):
    for start in range(0, len(batch), EVAL_CHUNK):
        yield batch[start:start + EVAL_CHUNK]


# ------------------------------------------------------------------ evaluation API

def extract_features(model, batch: np.ndarray) -> np.ndarray:
    """Unit-norm feature rows, shape (N, feature_dim)."""
    leaves = _const_leaves(model)
    out = [features_graph(leaves, part, model.config).data for part in _chunks(batch)]
    if not out:
        return np.zeros((0, model.config.feature_dim), np.float32)
    return np.concatenate(out)


def forward_all(model, batch: np.ndarray) -> dict[str, np.ndarray]:
    """Features, class logits and (when present) detector logits in one pass."""
    leaves = _const_leaves(model)
    feats, logits, det = [], [], []
    for part in _chunks(batch):
        f = features_graph(leaves, part, model.config)
        feats.append(f.data)
        logits.append(logits_graph(leaves, f).data)
        if model.has_detector:
            det.append(detector_graph(leaves, f).data)
    d, t = model.config.feature_dim, model.n_classes
    out = {
        "features": np.concatenate(feats) if feats else np.zeros((0, d), np.float32),
        "logits": np.concatenate(logits) if logits else np.zeros((0, t), np.float32),
    }
    if model.has_detector:
        out["detector_logits"] = np.concatenate(det) if det else np.zeros(0, np.float32)
    return out


def class_scores(model, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Head logits and independent per-class sigmoid scores."""
    if model.n_classes < 1:
        raise UsageError("class head has no rows yet")
    logits = forward_all(model, batch)["logits"]
    return logits, dc.sigmoid(Tensor(logits)).data


def detector_score(model, batch: np.ndarray) -> np.ndarray:
    if not model.has_detector:
        raise UsageError(f"detector head only exists for variant mt_mc, not {model.config.variant!r}")
    return dc.sigmoid(Tensor(forward_all(model, batch)["detector_logits"])).data


def expand_head(state: ModelState, n_new: int) -> ModelState:
    """Append ``n_new`` zero-initialised rows to the class head (in place)."""
    if n_new < 1:
        raise UsageError(f"expand_head needs n_new >= 1, got {n_new}")
    w, b = state.params["head.w"], state.params["head.b"]
    state.params["head.w"] = np.concatenate([w, np.zeros((n_new, w.shape[1]), w.dtype)])
    state.params["head.b"] = np.concatenate([b, np.zeros(n_new, b.dtype)])
    return state


def snapshot(model) -> ModelSnapshot:
    params = ParameterSet({k: v.copy() for k, v in model.params.items()})
    for v in params.values.values():
        v.setflags(write=False)
    return ModelSnapshot(model.config, params)


def clone(model) -> ModelState:
    return ModelState(model.config, ParameterSet({k: v.copy() for k, v in model.params.items()}))


# ------------------------------------------------------------------ input patching

def crop_batch(images: np.ndarray, size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random crop when ``rng`` is given, centre crop otherwise; identity at ``size``."""
    h, w = images.shape[1:3]
    if h < size or w < size:
        raise ConfigError(f"images of {h}x{w} are smaller than the network input {size}")
    if h == size and w == size:
        return images
    if rng is None:
        top, left = (h - size) // 2, (w - size) // 2
        return images[:, top:top + size, left:left + size]
    out = np.empty((len(images), size, size, images.shape[3]), images.dtype)
    for i, img in enumerate(images):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        out[i] = img[top:top + size, left:left + size]
    return out


# ------------------------------------------------------------------ checkpoints

def save_model(model, directory: str | Path) -> None:
    """One tensor file per parameter plus ``manifest.txt`` (``name,file``) and ``network.txt``."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    lines = ["# name,relative_path,shape"]
    for name, value in model.params.items():
        rel = f"tensors/{name}.iltf"
        write_tensor(directory / rel, value)
        lines.append(f"{name},{rel},{'x'.join(map(str, value.shape)) or 'scalar'}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    cfg = "\n".join(f"{k} = {v}" for k, v in asdict(model.config).items())
    (directory / "network.txt").write_text(cfg + "\n")


def load_model(directory: str | Path) -> ModelState:
    directory = Path(directory)
    fields = {}
    for line in (directory / "network.txt").read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    config = NetworkConfig(
        **{k: (v if k == "variant" else int(v)) for k, v in fields.items()}
    )
    values = {}
    for lineno, line in enumerate((directory / "manifest.txt").read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(f"{directory / 'manifest.txt'}:{lineno}: expected name,path,shape")
        values[parts[0]] = read_tensor(directory / parts[1])
    return ModelState(config, ParameterSet(values))
