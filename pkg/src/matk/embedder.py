"""Fully connected embedding network: definition, training, checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Graph, Node

log = logging.getLogger(__name__)

MAGIC = b"MATKCKPT"
LOSS_TAGS = ("cross_entropy", "triplet")


@dataclass(frozen=True)
class EmbedderConfig:
    input_shape: tuple[int, int, int]
    hidden_sizes: tuple[int, ...] = (256, 128)
    feature_dim: int = 64
    num_classes: int = 0
    pixel_scale: float = 1.0 / 255.0
    pixel_offset: float = -0.5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden_sizes", tuple(int(v) for v in self.hidden_sizes))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (height, width, channels), got {self.input_shape}")
        if not self.hidden_sizes:
            raise ValueError("hidden_sizes must be non-empty")
        if min(self.hidden_sizes) < 1:
            raise ValueError(f"hidden sizes must be positive, got {self.hidden_sizes}")
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.num_classes < 0:
            raise ValueError("num_classes must be non-negative")

    @property
    def input_dim(self) -> int:
        h, w, c = self.input_shape
        return h * w * c

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Shapes of all weight tensors, in storage order."""
        sizes = [self.input_dim, *self.hidden_sizes, self.feature_dim]
        shapes = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        if self.num_classes:
            shapes += [(self.feature_dim, self.num_classes), (self.num_classes,)]
        return shapes

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class ModelParams:
    config: EmbedderConfig
    weights: list[np.ndarray]
    training_loss_tag: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        if self.training_loss_tag not in LOSS_TAGS:
            raise ValueError(f"unknown training loss tag {self.training_loss_tag!r}")
        expected = self.config.layer_shapes()
        got = [tuple(w.shape) for w in self.weights]
        if got != expected:
            raise ValueError(f"weight shapes {got} do not match config {expected}")

    def bindings(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}w{i}": w for i, w in enumerate(self.weights)}

    def equals(self, other: "ModelParams") -> bool:
        """Bit-level equality of config, tag, seed and every weight."""
        return (self.config == other.config
                and self.training_loss_tag == other.training_loss_tag
                and self.seed == other.seed
                and len(self.weights) == len(other.weights)
                and all(a.tobytes() == b.tobytes() for a, b in zip(self.weights, other.weights)))

    def replace(self, weights=None, **kw) -> "ModelParams":
        return ModelParams(
            config=kw.get("config", self.config),
            weights=[w.copy() for w in (self.weights if weights is None else weights)],
            training_loss_tag=kw.get("training_loss_tag", self.training_loss_tag),
            seed=kw.get("seed", self.seed),
        )


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.05
    epochs: int = 60
    batch_size: int = 32
    margin: float = 0.3
    pk_batch: tuple[int, int] = (8, 4)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["pk_batch"] = list(self.pk_batch)
        return d


def init_model(config: EmbedderConfig, seed: int, training_loss_tag: str = "cross_entropy") -> ModelParams:
    """He-style initialisation: weights ~ N(0, 2/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for shape in config.layer_shapes():
        if len(shape) == 2:
            w = rng.standard_normal(shape) * np.sqrt(2.0 / shape[0])
        else:
            w = np.zeros(shape)
        weights.append(w.astype(np.float32))
    return ModelParams(config, weights, training_loss_tag, seed)


# -- graph construction ------------------------------------------------------

@dataclass
class EmbedderNodes:
    pixels: Node
    embedding: Node
    features: Node
    logits: Node | None
    param_names: list[str] = field(default_factory=list)


def build_embedder(g: Graph, config: EmbedderConfig, pixels: Node, prefix: str = "") -> EmbedderNodes:
    """Attach the network to ``pixels`` (a flattened ``[N, H*W*C]`` raw-pixel node).

    Parameters become roots named ``{prefix}w0, {prefix}w1, ...``.
    """
    x = g.scale(pixels, config.pixel_scale)
    if config.pixel_offset:
        x = g.add(x, g.constant(config.pixel_offset))
    names = []

    def param():
        name = f"{prefix}w{len(names)}"
        names.append(name)
        return g.input(name)

    for _ in config.hidden_sizes:
        w, b = param(), param()
        x = g.relu(g.add(g.matmul(x, w), b))
    w, b = param(), param()
    z = g.add(g.matmul(x, w), b)
    feats = g.l2_normalize(z)
    logits = None
    if config.num_classes:
        wc, bc = param(), param()
        logits = g.add(g.matmul(z, wc), bc)
    return EmbedderNodes(pixels, z, feats, logits, names)


def _flatten(images, config: EmbedderConfig) -> np.ndarray:
    """Accept ImageRecords, an ``[N, H, W, C]`` array, or pre-flattened rows."""
    if isinstance(images, np.ndarray):
        arr = images
    else:
        arr = np.stack([getattr(im, "pixels", im) for im in images]) if len(images) else np.zeros((0, *config.input_shape))
    if arr.ndim == 2 and arr.shape[1] == config.input_dim:
        return arr.astype(np.float32, copy=False)
    if arr.shape[1:] != config.input_shape:
        raise ValueError(f"image shape {list(arr.shape[1:])} does not match model input {list(config.input_shape)}")
    return arr.reshape(len(arr), -1).astype(np.float32)


class _Net:
    """Cached graph per config, reused across calls."""
    _cache: dict[EmbedderConfig, tuple[Graph, EmbedderNodes]] = {}

    @classmethod
    def get(cls, config: EmbedderConfig):
        if config not in cls._cache:
            g = Graph()
            nodes = build_embedder(g, config, g.input("pixels"))
            cls._cache[config] = (g, nodes)
        return cls._cache[config]


def extract_features(model: ModelParams, images, batch_size: int = 256) -> np.ndarray:
    """L2-normalised embeddings, one row per image."""
    x = _flatten(images, model.config)
    g, nodes = _Net.get(model.config)
    out = [np.zeros((0, model.config.feature_dim), np.float32)]
    for start in range(0, len(x), batch_size):
        binds = {"pixels": x[start:start + batch_size], **model.bindings()}
        out.append(g.forward(binds, nodes.features).copy())
    return np.concatenate(out)


# -- training ------------------------------------------------------------------

def _sgd_step(model: ModelParams, grads: dict, lr: float):
    for i, w in enumerate(model.weights):
        w -= np.float32(lr) * grads[f"w{i}"]


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), np.float32)
    out[np.arange(len(labels)), labels] = 1
    return out


def train_cross_entropy(model: ModelParams, images, labels: Sequence[int], hyper: TrainHyper,
                        history: list | None = None) -> ModelParams:
    """Mini-batch SGD on the softmax cross-entropy of the class head.

    ``labels`` are class indices in ``[0, num_classes)``.  Per-epoch mean
    losses are appended to ``history`` when given.
    """
    cfg = model.config
    if cfg.num_classes < 1:
        raise ValueError("cross-entropy training needs num_classes > 0")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= cfg.num_classes):
        bad = labels[(labels < 0) | (labels >= cfg.num_classes)]
        raise ValueError(f"label {int(bad[0])} out of range [0, {cfg.num_classes})")
    x = _flatten(images, cfg)
    if len(x) != len(labels):
        raise ValueError("images and labels differ in length")

    model = model.replace(training_loss_tag="cross_entropy")
    g = Graph()
    nodes = build_embedder(g, cfg, g.input("pixels"))
    loss = g.softmax_cross_entropy(nodes.logits, g.input("targets"))
    targets = one_hot(labels, cfg.num_classes)
    rng = np.random.default_rng(hyper.seed)

    for epoch in range(hyper.epochs):
        order = rng.permutation(len(x))
        total, count = 0.0, 0
        for start in range(0, len(x), hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            binds = {"pixels": x[idx], "targets": targets[idx], **model.bindings()}
            value = g.forward(binds, loss)[0]
            grads = g.grad(loss, nodes.param_names)
            _sgd_step(model, grads, hyper.learning_rate)
            total += float(value) * len(idx)
            count += len(idx)
        if history is not None:
            history.append(total / count)
        log.debug("ce epoch %d loss %.5f", epoch, total / count)
    return model


def batch_hard_indices(features: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hardest positive and hardest negative per anchor, by squared distance."""
    diff = features[:, None, :] - features[None, :, :]
    dist = np.sum(diff * diff, axis=-1)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(len(labels), dtype=bool)
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(~same, dist, np.inf), axis=1)
    return pos, neg


def triplet_loss_value(features: np.ndarray, labels: np.ndarray, margin: float) -> float:
    """Batch-hard triplet loss (mean over anchors), computed directly in numpy."""
    labels = np.asarray(labels)
    pos, neg = batch_hard_indices(features, labels)
    d_ap = np.sum((features - features[pos]) ** 2, axis=1)
    d_an = np.sum((features - features[neg]) ** 2, axis=1)
    return float(np.mean(np.maximum(d_ap - d_an + margin, 0)))


def triplet_graph(config: EmbedderConfig, margin: float):
    """Graph for the batch-hard triplet loss.

    Mining happens outside the graph: the caller binds one-hot selection
    matrices ``sel_pos`` / ``sel_neg`` so that ``sel @ F`` picks each anchor's
    hardest positive / negative.
    """
    g = Graph()
    nodes = build_embedder(g, config, g.input("pixels"))
    f = nodes.features
    d_ap = g.sum(g.square(g.subtract(f, g.matmul(g.input("sel_pos"), f))), axis=-1)
    d_an = g.sum(g.square(g.subtract(f, g.matmul(g.input("sel_neg"), f))), axis=-1)
    hinge = g.relu(g.add(g.subtract(d_ap, d_an), g.constant(margin)))
    loss = g.mean(hinge)
    return g, nodes, loss


def _selection(idx: np.ndarray) -> np.ndarray:
    sel = np.zeros((len(idx), len(idx)), np.float32)
    sel[np.arange(len(idx)), idx] = 1
    return sel


def pk_batches(labels: np.ndarray, p: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of P identities x K images batches."""
    by_id: dict[int, np.ndarray] = {}
    for ident in np.unique(labels):
        by_id[int(ident)] = np.flatnonzero(labels == ident)
    ids = np.array(sorted(by_id))
    ids = ids[rng.permutation(len(ids))]
    batches = []
    for start in range(0, len(ids) - p + 1, p):
        chosen = [rng.choice(by_id[int(i)], size=k, replace=False) for i in ids[start:start + p]]
        batches.append(np.concatenate(chosen))
    return batches


def train_triplet(model: ModelParams, images, labels: Sequence[int], hyper: TrainHyper,
                  history: list | None = None) -> ModelParams:
    """SGD on the batch-hard triplet loss over P x K batches."""
    cfg = model.config
    labels = np.asarray(labels, dtype=np.int64)
    p, k = hyper.pk_batch
    if p < 2:
        raise ValueError("triplet training needs P >= 2 identities per batch")
    if hyper.batch_size != p * k:
        raise ValueError(f"batch_size {hyper.batch_size} != P*K = {p * k}")
    ids, counts = np.unique(labels, return_counts=True)
    short = [int(i) for i, c in zip(ids, counts) if c < k]
    if short:
        raise ValueError(f"identities with fewer than K={k} images: {short}")
    if len(ids) < p:
        raise ValueError(f"need at least P={p} identities, got {len(ids)}")
    x = _flatten(images, cfg)

    model = model.replace(training_loss_tag="triplet")
    g, nodes, loss = triplet_graph(cfg, hyper.margin)
    rng = np.random.default_rng(hyper.seed)

    for epoch in range(hyper.epochs):
        total, count = 0.0, 0
        for idx in pk_batches(labels, p, k, rng):
            binds = {"pixels": x[idx], **model.bindings()}
            feats = g.forward(binds, nodes.features)
            pos, neg = batch_hard_indices(feats, labels[idx])
            binds["sel_pos"] = _selection(pos)
            binds["sel_neg"] = _selection(neg)
            value = g.forward(binds, loss)[0]
            grads = g.grad(loss, nodes.param_names)
            _sgd_step(model, grads, hyper.learning_rate)
            total += float(value)
            count += 1
        if history is not None and count:
            history.append(total / count)
        log.debug("triplet epoch %d loss %.5f", epoch, total / max(count, 1))
    return model


def train(model: ModelParams, images, labels, hyper: TrainHyper, loss: str = "cross_entropy",
          history: list | None = None) -> ModelParams:
    if loss == "cross_entropy":
        return train_cross_entropy(model, images, labels, hyper, history)
    if loss == "triplet":
        return train_triplet(model, images, labels, hyper, history)
    raise ValueError(f"unknown loss {loss!r}")


# -- checkpoints ---------------------------------------------------------------

class CheckpointError(Exception):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


def save_checkpoint(model: ModelParams, path) -> Path:
    path = Path(path)
    header = {
        "config": model.config.to_json(),
        "training_loss_tag": model.training_loss_tag,
        "seed": model.seed,
        "shapes": [list(w.shape) for w in model.weights],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for w in model.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC or len(data) < 16:
        raise CorruptHeaderError(f"{path}: bad magic, not a checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise CorruptHeaderError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
        config = EmbedderConfig(**header["config"])
        shapes = [tuple(s) for s in header["shapes"]]
        tag, seed = header["training_loss_tag"], int(header["seed"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable header ({exc})") from exc
    if shapes != config.layer_shapes():
        raise ShapeMismatchError(f"{path}: header shapes {shapes} disagree with config {config.layer_shapes()}")

    offset = 16 + n
    weights = []
    for shape in shapes:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(data):
            raise TruncatedBlobError(f"{path}: truncated blob for tensor of shape {list(shape)}")
        weights.append(np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset)
                       .reshape(shape).astype(np.float32))
        offset += nbytes
    if offset != len(data):
        raise ShapeMismatchError(f"{path}: {len(data) - offset} trailing bytes after last tensor")
    return ModelParams(config, weights, tag, seed)
