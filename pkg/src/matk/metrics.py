"""Distance metrics, pairwise distance matrices and the metric attack loss."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedder import ModelParams, _flatten, build_embedder, extract_features
from .tensor import Graph

log = logging.getLogger(__name__)

SYM_TOL = 1e-6
PSD_TOL = 1e-8


def project_psd(m: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Clamp eigenvalues below ``tol`` to zero."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if np.max(np.abs(m - m.T), initial=0) > SYM_TOL:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = np.where(vals < tol, 0.0, vals)
    out = (vecs * vals) @ vecs.T
    return (out + out.T) / 2


@dataclass(frozen=True, eq=False)
class MetricSpec:
    kind: str = "euclidean"
    M: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "euclidean":
            if self.M is not None:
                raise ValueError("euclidean metric takes no matrix")
            return
        if self.kind != "mahalanobis":
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.M is None:
            raise ValueError("mahalanobis metric needs a matrix M")
        m = np.asarray(self.M, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"M must be square, got shape {m.shape}")
        if np.max(np.abs(m - m.T), initial=0) > SYM_TOL:
            raise ValueError("M is not symmetric")
        lo = np.linalg.eigvalsh(m).min()
        if lo < -PSD_TOL:
            raise ValueError(f"M is not positive semidefinite (min eigenvalue {lo:.3g})")
        object.__setattr__(self, "M", m)

    @classmethod
    def mahalanobis(cls, m) -> "MetricSpec":
        return cls("mahalanobis", np.asarray(m, dtype=np.float64))

    def describe(self) -> str:
        return self.kind


def load_mahalanobis(path) -> MetricSpec:
    """Load ``{"dim": d, "rows": [...]}``, symmetrise and PSD-project."""
    doc = json.loads(Path(path).read_text())
    m = np.asarray(doc["rows"], dtype=np.float64)
    if m.shape != (doc["dim"], doc["dim"]):
        raise ValueError(f"{path}: rows have shape {m.shape}, header says dim {doc['dim']}")
    sym = (m + m.T) / 2
    proj = project_psd(sym, PSD_TOL)
    log.info("mahalanobis %s: symmetrise moved %.3g, PSD projection moved %.3g",
             path, np.abs(sym - m).max(), np.abs(proj - sym).max())
    return MetricSpec.mahalanobis(proj)


def save_mahalanobis(m: np.ndarray, path) -> Path:
    m = np.asarray(m, dtype=np.float64)
    Path(path).write_text(json.dumps({"dim": int(m.shape[0]), "rows": m.tolist()}))
    return Path(path)


def random_spd(dim: int, cond: float, seed: int) -> np.ndarray:
    """Random SPD matrix with eigenvalues spread log-uniformly in [1, cond]."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    vals = np.exp(rng.uniform(0, np.log(cond), dim))
    vals[0], vals[-1] = 1.0, cond
    m = (q * vals) @ q.T
    return (m + m.T) / 2


def distance(metric: MetricSpec, p, x) -> float:
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if p.shape != x.shape or p.ndim != 1:
        raise ValueError(f"feature dimensions differ: {p.shape} vs {x.shape}")
    v = p - x
    if metric.kind == "euclidean":
        d = float(v @ v)
    else:
        if metric.M.shape[0] != v.size:
            raise ValueError(f"M is {metric.M.shape[0]}-dimensional, features are {v.size}")
        d = float(v @ (metric.M @ v))
    return max(d, 0.0)


def pairwise_distances(metric: MetricSpec, p_feats, x_feats) -> np.ndarray:
    """``[Np, Nx]`` matrix of metric distances, computed in float64."""
    p = np.asarray(p_feats, dtype=np.float64)
    x = np.asarray(x_feats, dtype=np.float64)
    if p.ndim != 2 or x.ndim != 2 or p.shape[1] != x.shape[1]:
        raise ValueError(f"feature dimensions differ: {p.shape} vs {x.shape}")
    diff = p[:, None, :] - x[None, :, :]
    if metric.kind == "euclidean":
        d = np.einsum("ijk,ijk->ij", diff, diff)
    else:
        if metric.M.shape[0] != p.shape[1]:
            raise ValueError(f"M is {metric.M.shape[0]}-dimensional, features are {p.shape[1]}")
        d = np.einsum("ijk,ijk->ij", diff @ metric.M, diff)
    return np.maximum(d, 0.0)


def _check_models(models: Sequence[ModelParams]):
    if not models:
        raise ValueError("need at least one model")
    shapes = {m.config.input_shape for m in models}
    if len(shapes) > 1:
        raise ValueError(f"models disagree on input shape: {sorted(shapes)}")


class MetricObjective:
    """Batched metric attack loss over a set of images.

    For image ``i`` with reference features ``R_i`` (one set per model), the
    loss is the mean over models of the mean over references of
    ``d(r, F(x_i))``.  Images do not interact, so the gradient of the summed
    loss w.r.t. the pixel batch holds each image's own gradient in its row.

    ``refs`` is a list (one entry per image) of index arrays into
    ``ref_features[k]`` for every model ``k``.
    """

    def __init__(self, models: Sequence[ModelParams], metric: MetricSpec,
                 ref_features: Sequence[np.ndarray], refs: Sequence[Sequence[int]]):
        _check_models(models)
        if any(len(r) == 0 for r in refs):
            raise ValueError("every image needs at least one reference")
        self.models = list(models)
        self.n = len(refs)
        pair_img = np.concatenate([np.full(len(r), i) for i, r in enumerate(refs)])
        pair_ref = np.concatenate([np.asarray(r, dtype=np.int64) for r in refs])
        counts = np.array([len(r) for r in refs], dtype=np.float64)

        sel = np.zeros((len(pair_img), self.n), np.float32)
        sel[np.arange(len(pair_img)), pair_img] = 1
        avg = (sel.T / counts[:, None]).astype(np.float32)

        g = Graph()
        x = g.input("x")
        per_model = []
        self._binds = {"sel": sel, "avg": avg}
        sel_n, avg_n = g.input("sel"), g.input("avg")
        m_node = g.input("M") if metric.kind == "mahalanobis" else None
        if m_node is not None:
            self._binds["M"] = metric.M.astype(np.float32)
        for k, model in enumerate(self.models):
            nodes = build_embedder(g, model.config, x, prefix=f"m{k}.")
            refs_k = g.input(f"refs{k}")
            self._binds[f"refs{k}"] = np.asarray(ref_features[k], np.float32)[pair_ref]
            self._binds.update(model.bindings(f"m{k}."))
            diff = g.subtract(g.matmul(sel_n, nodes.features), refs_k)
            if m_node is None:
                dist = g.sum(g.square(diff), axis=-1)
            else:
                dist = g.quadratic_form(diff, m_node)
            per_model.append(g.matmul(avg_n, dist))
        total = per_model[0]
        for node in per_model[1:]:
            total = g.add(total, node)
        self.per_image = g.scale(total, 1.0 / len(per_model)) if len(per_model) > 1 else total
        self.total = g.sum(self.per_image)
        self.graph = g

    def bindings(self, pixels: np.ndarray) -> dict[str, np.ndarray]:
        """Root bindings for ``self.graph`` at the given pixel batch."""
        return {"x": np.asarray(pixels).reshape(self.n, -1), **self._binds}

    def losses(self, pixels: np.ndarray) -> np.ndarray:
        return self.graph.forward(self.bindings(pixels), self.per_image).copy()

    def __call__(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-image losses and pixel gradients (same shape as ``pixels``)."""
        self.graph.forward(self.bindings(pixels), self.total)
        losses = self.graph.value(self.per_image).copy()
        grad = self.graph.grad(self.total, ["x"])["x"]
        return losses, grad.reshape(pixels.shape)


def attack_loss(models: Sequence[ModelParams], metric: MetricSpec, probe_images,
                gallery_image) -> tuple[float, np.ndarray]:
    """Metric loss of one gallery image against probe references, with its pixel gradient."""
    if len(probe_images) == 0:
        raise ValueError("empty probe list")
    _check_models(models)
    ref_feats = [extract_features(m, probe_images) for m in models]
    px = getattr(gallery_image, "pixels", gallery_image)
    x = _flatten(np.asarray(px)[None], models[0].config)
    obj = MetricObjective(models, metric, ref_feats, [np.arange(len(probe_images))])
    losses, grad = obj(x)
    return float(losses[0]), grad.reshape(np.shape(px))
