"""Metric-preserving retraining against metric attacks.

The procedure: train a clean model, attack every training image against
the other images of its identity to build an adversarial copy of the
training set, then train a fresh model on the union of both.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attacks import AdversarialExample, AttackConfig, attack_images
from .datakit import ImageRecord
from .embedder import ModelParams, TrainHyper, extract_features, init_model, train
from .metrics import MetricSpec

log = logging.getLogger(__name__)


@dataclass
class DefensePlan:
    clean_model: ModelParams
    attack_cfg: AttackConfig
    retrain_hyper: TrainHyper
    metric: MetricSpec = MetricSpec()
    merge_mode: str = "union"

    def __post_init__(self):
        if self.attack_cfg.mode != "non_targeted":
            raise ValueError("defense attacks must be non-targeted")
        if self.merge_mode != "union":
            raise ValueError(f"unsupported merge mode {self.merge_mode!r}")


def generate_adv_training_set(model: ModelParams, train_set: Sequence[ImageRecord], attack_cfg: AttackConfig,
                              metric: MetricSpec = MetricSpec(), chunk: int = 256) -> list[AdversarialExample]:
    """Attack each training image using every other image of its identity as the query."""
    ids = np.array([r.identity for r in train_set])
    uniq, counts = np.unique(ids, return_counts=True)
    lonely = [int(i) for i, c in zip(uniq, counts) if c < 2]
    if lonely:
        raise ValueError(f"identities with a single training image: {lonely}")
    refs = [np.flatnonzero((ids == ids[i]) & (np.arange(len(ids)) != i)) for i in range(len(ids))]
    feats = [extract_features(model, train_set)]
    return attack_images([model], metric, train_set, train_set, attack_cfg, refs,
                         chunk=chunk, ref_features=feats)


def merge_union(train_set: Sequence[ImageRecord], adv: Sequence[AdversarialExample]) -> list[ImageRecord]:
    """Clean records followed by their adversarial copies (float pixels, same labels)."""
    merged = list(train_set)
    for ex in adv:
        o = ex.original
        merged.append(ImageRecord(ex.adversarial, o.identity, o.camera, "train", o.source_path))
    return merged


def train_metric_preserving(plan: DefensePlan, train_set: Sequence[ImageRecord], labels: Sequence[int],
                            adv_set: Sequence[AdversarialExample] | None = None,
                            history: list | None = None) -> ModelParams:
    """Train a fresh model (seed from ``plan.retrain_hyper.seed``) on Y and Y_adv.

    ``labels`` are the training labels of ``train_set`` in the form the clean
    model's loss expects (class indices for cross-entropy).
    """
    if adv_set is None:
        adv_set = generate_adv_training_set(plan.clean_model, train_set, plan.attack_cfg, plan.metric)
    if len(adv_set) != len(train_set):
        raise ValueError(f"adversarial set has {len(adv_set)} records, training set {len(train_set)}")
    merged = merge_union(train_set, adv_set)
    merged_labels = np.concatenate([np.asarray(labels), np.asarray(labels)])
    tag = plan.clean_model.training_loss_tag
    fresh = init_model(plan.clean_model.config, plan.retrain_hyper.seed, tag)
    return train(fresh, merged, merged_labels, plan.retrain_hyper, tag, history)
