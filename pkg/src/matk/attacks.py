"""Gradient-sign attacks on the distance metric (FGSM, I-FGSM, MI-FGSM)."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datakit import ImageRecord, quantize
from .embedder import ModelParams, extract_features
from .metrics import MetricObjective, MetricSpec

log = logging.getLogger(__name__)

METHODS = ("fgsm", "i_fgsm", "mi_fgsm")
MODES = ("non_targeted", "targeted")
POLICIES = ("random_other", "fixed_identity")


def default_iters(epsilon: float) -> int:
    """``floor(min(eps + 4, 1.25 * eps))``, at least 1."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return max(1, math.floor(min(epsilon + 4, 1.25 * epsilon)))


@dataclass(frozen=True)
class AttackConfig:
    method: str = "i_fgsm"
    epsilon: float = 5.0
    alpha: float | None = None  # None -> min(1, epsilon)
    mu: float = 1.0
    iters: int | str = "auto"
    mode: str = "non_targeted"
    target_policy: str = "random_other"
    target_identity: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if not 0 < self.epsilon <= 255:
            raise ValueError(f"epsilon must be in (0, 255], got {self.epsilon}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", min(1.0, float(self.epsilon)))
        if not 0 < self.alpha <= self.epsilon:
            raise ValueError(f"alpha must be in (0, epsilon], got {self.alpha}")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.iters == "auto":
            object.__setattr__(self, "iters", default_iters(self.epsilon))
        if not isinstance(self.iters, (int, np.integer)) or self.iters < 1:
            raise ValueError(f"iters must be a positive integer or 'auto', got {self.iters!r}")
        object.__setattr__(self, "iters", int(self.iters))
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.target_policy not in POLICIES:
            raise ValueError(f"unknown target policy {self.target_policy!r}")
        if self.target_policy == "fixed_identity" and self.mode == "targeted" and self.target_identity is None:
            raise ValueError("fixed_identity policy needs target_identity")

    def to_json(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AdversarialExample:
    original: ImageRecord
    adversarial: np.ndarray  # float32 pixels, same shape as original
    config: AttackConfig
    reference_probe_ids: list = field(default_factory=list)
    loss_before: float = 0.0
    loss_after: float = 0.0
    trajectory: list = field(default_factory=list)
    target_identity: int | None = None
    flagged: bool = False  # passed through without attack

    def as_record(self, quantized: bool = False) -> ImageRecord:
        o = self.original
        px = quantize(self.adversarial, o.pixels, self.config.epsilon) if quantized else self.adversarial
        return ImageRecord(px, o.identity, o.camera, o.split, o.source_path)


def clip_eps(x_adv, x_orig, epsilon: float) -> np.ndarray:
    """Project onto the L-inf ball around ``x_orig`` intersected with [0, 255]."""
    x_adv = np.asarray(x_adv, dtype=np.float32)
    x_orig = np.asarray(x_orig, dtype=np.float32)
    if x_adv.shape != x_orig.shape:
        raise ValueError(f"shape mismatch: {x_adv.shape} vs {x_orig.shape}")
    eps = np.float32(epsilon)
    lo = np.maximum(x_orig - eps, np.float32(0))
    hi = np.minimum(x_orig + eps, np.float32(255))
    return np.minimum(np.maximum(x_adv, lo), hi)


def run_attack(objective, x0: np.ndarray, config: AttackConfig) -> tuple[np.ndarray, np.ndarray, list]:
    """Run the configured attack on a batch ``x0`` of shape ``[N, ...]``.

    ``objective(x)`` must return ``(per_image_losses, gradient)``.  Returns
    the adversarial batch, the final per-image losses, and the loss
    trajectory (one array per evaluated iterate).
    """
    x0 = np.asarray(x0, dtype=np.float32)
    direction = np.float32(1 if config.mode == "non_targeted" else -1)
    if config.method == "fgsm":
        steps, step = 1, np.float32(config.epsilon)
    else:
        steps, step = config.iters, np.float32(config.alpha)

    x = x0.copy()
    momentum = np.zeros_like(x0)
    trajectory = []
    axes = tuple(range(1, x0.ndim))
    for _ in range(steps):
        losses, g = objective(x)
        trajectory.append(losses)
        if config.method == "mi_fgsm":
            l1 = np.sum(np.abs(g), axis=axes, keepdims=True, dtype=np.float64)
            normed = np.where(l1 < 1e-12, 0, g / np.where(l1 < 1e-12, 1, l1)).astype(np.float32)
            momentum = np.float32(config.mu) * momentum + normed
            g = momentum
        x = clip_eps(x + direction * step * np.sign(g), x0, config.epsilon)
    final, _ = objective(x)
    trajectory.append(final)
    return x, final, trajectory


# -- single-image API ------------------------------------------------------------

def _single(method: str, models, metric, probes, gallery_image, config: AttackConfig) -> AdversarialExample:
    if config.method != method:
        raise ValueError(f"{method} called with config.method={config.method!r}")
    refs = _reference_ids(probes, gallery_image, config)
    return attack_images(models, metric, probes, [gallery_image], config, [refs])[0]


def _reference_ids(probes, image, config: AttackConfig) -> list[int]:
    if config.mode == "non_targeted":
        ident = image.identity
    else:
        ident = config.target_identity
        if ident is None:
            raise ValueError("single-image targeted attack needs config.target_identity")
    refs = [i for i, p in enumerate(probes) if p.identity == ident]
    if not refs:
        raise ValueError(f"no probe of identity {ident}")
    return refs


def fgsm(models, metric, probes, gallery_image, config) -> AdversarialExample:
    return _single("fgsm", models, metric, probes, gallery_image, config)


def i_fgsm(models, metric, probes, gallery_image, config) -> AdversarialExample:
    return _single("i_fgsm", models, metric, probes, gallery_image, config)


def mi_fgsm(models, metric, probes, gallery_image, config) -> AdversarialExample:
    return _single("mi_fgsm", models, metric, probes, gallery_image, config)


# -- batch orchestration ---------------------------------------------------------

def attack_images(models: Sequence[ModelParams], metric: MetricSpec, references: Sequence[ImageRecord],
                  images: Sequence[ImageRecord], config: AttackConfig, refs: Sequence[Sequence[int]],
                  chunk: int = 256, ref_features: Sequence[np.ndarray] | None = None,
                  targets: Sequence[int | None] | None = None) -> list[AdversarialExample]:
    """Attack ``images[i]`` using ``references[j] for j in refs[i]`` as metric anchors."""
    models = list(models)
    if ref_features is None:
        ref_features = [extract_features(m, references) for m in models]
    out = []
    for start in range(0, len(images), chunk):
        batch = images[start:start + chunk]
        batch_refs = refs[start:start + chunk]
        x0 = np.stack([im.pixels for im in batch]).astype(np.float32)
        obj = MetricObjective(models, metric, ref_features, batch_refs)
        x_adv, final, traj = run_attack(obj, x0, config)
        for i, im in enumerate(batch):
            out.append(AdversarialExample(
                original=im,
                adversarial=x_adv[i],
                config=config,
                reference_probe_ids=[references[j].source_path or j for j in batch_refs[i]],
                loss_before=float(traj[0][i]),
                loss_after=float(final[i]),
                trajectory=[float(t[i]) for t in traj],
                target_identity=None if targets is None else targets[start + i],
            ))
    return out


def choose_targets(gallery: Sequence[ImageRecord], probe_ids: Sequence[int], config: AttackConfig) -> list[int | None]:
    """Target identity per gallery image (``None`` = leave untouched)."""
    ids = sorted(set(int(i) for i in probe_ids))
    if len(ids) < 2:
        raise ValueError("targeted attack needs at least two identities in the probe set")
    if config.target_policy == "fixed_identity":
        if config.target_identity not in ids:
            raise ValueError(f"target identity {config.target_identity} has no probe")
        return [None if im.identity == config.target_identity else config.target_identity for im in gallery]
    rng = np.random.default_rng(config.seed)
    targets = []
    for im in gallery:
        others = [i for i in ids if i != im.identity]
        targets.append(int(others[rng.integers(len(others))]))
    return targets


def attack_gallery(models: Sequence[ModelParams], metric: MetricSpec, probe_set: Sequence[ImageRecord],
                   gallery_set: Sequence[ImageRecord], config: AttackConfig,
                   chunk: int = 256) -> list[AdversarialExample]:
    """Adversarial version of a gallery, in gallery order.

    Non-targeted: each image is pushed away from every probe of its own
    identity.  Targeted: each image is pulled toward every probe of its
    target identity.  Images that cannot be attacked (no probe of their
    identity, or already the fixed target) are returned unchanged with
    ``flagged=True``.
    """
    if not probe_set:
        raise ValueError("probe set is empty")
    by_id: dict[int, list[int]] = {}
    for j, p in enumerate(probe_set):
        by_id.setdefault(p.identity, []).append(j)

    if config.mode == "targeted":
        targets = choose_targets(gallery_set, list(by_id), config)
        wanted = targets
    else:
        targets = [None] * len(gallery_set)
        wanted = [im.identity if im.identity in by_id else None for im in gallery_set]

    todo = [i for i, ident in enumerate(wanted) if ident is not None]
    skipped = [gallery_set[i].name for i, ident in enumerate(wanted) if ident is None]
    if skipped:
        log.warning("%d gallery images passed through unattacked (e.g. %s)", len(skipped), skipped[0])

    results: list[AdversarialExample | None] = [None] * len(gallery_set)
    if todo:
        attacked = attack_images(models, metric, probe_set, [gallery_set[i] for i in todo], config,
                                 [by_id[wanted[i]] for i in todo], chunk=chunk,
                                 targets=[targets[i] for i in todo])
        for i, ex in zip(todo, attacked):
            results[i] = ex
    for i, ex in enumerate(results):
        if ex is None:
            im = gallery_set[i]
            results[i] = AdversarialExample(im, im.pixels.astype(np.float32), config, flagged=True)
    return results
