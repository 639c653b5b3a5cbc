"""Retrieval evaluation: CMC, mAP, mAP ratio and ranking lists."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PROTOCOLS = ("cross_camera", "all")
DEFAULT_KS = (1, 5, 10)


class NoEvaluableProbes(ValueError):
    pass


@dataclass
class EvalReport:
    rank_k: dict[int, float]
    mAP: float
    num_probes_evaluated: int
    protocol: str = "cross_camera"

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol,
            "mAP": self.mAP,
            "rank": {str(k): v for k, v in sorted(self.rank_k.items())},
            "num_probes_evaluated": self.num_probes_evaluated,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        return cls({int(k): float(v) for k, v in doc["rank"].items()}, float(doc["mAP"]),
                   int(doc["num_probes_evaluated"]), doc.get("protocol", "cross_camera"))

    def save(self, path) -> Path:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return Path(path)

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def _relevance_lists(dist, probe_labels, gallery_labels, probe_cams, gallery_cams, protocol):
    """Yield, per probe, the relevance vector of the ranked gallery after exclusions."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    dist = np.asarray(dist)
    ql, gl = np.asarray(probe_labels), np.asarray(gallery_labels)
    qc, gc = np.asarray(probe_cams), np.asarray(gallery_cams)
    if dist.shape != (len(ql), len(gl)) or len(qc) != len(ql) or len(gc) != len(gl):
        raise ValueError(f"label arrays ({len(ql)}, {len(gl)}) do not match distance matrix {dist.shape}")
    for i in range(len(ql)):
        order = np.argsort(dist[i], kind="stable")
        same = gl[order] == ql[i]
        if protocol == "cross_camera":
            keep = ~(same & (gc[order] == qc[i]))
            same = same[keep]
        yield same


def _ap(rel: np.ndarray) -> float:
    hits = np.flatnonzero(rel)
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision.mean())


def evaluate(dist, probe_labels, gallery_labels, probe_cams, gallery_cams,
             protocol: str = "cross_camera", ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
    """mAP and CMC in one pass.  Probes with no relevant gallery item are skipped."""
    aps, firsts = [], []
    for rel in _relevance_lists(dist, probe_labels, gallery_labels, probe_cams, gallery_cams, protocol):
        if not rel.any():
            continue
        aps.append(_ap(rel))
        firsts.append(int(np.argmax(rel)))
    if not aps:
        raise NoEvaluableProbes("no evaluable probes")
    firsts = np.array(firsts)
    rank = {int(k): float(np.mean(firsts < k)) for k in ks}
    return EvalReport(rank, float(np.mean(aps)), len(aps), protocol)


def mean_average_precision(dist, probe_labels, gallery_labels, probe_cams, gallery_cams,
                           protocol: str = "cross_camera") -> float:
    return evaluate(dist, probe_labels, gallery_labels, probe_cams, gallery_cams, protocol).mAP


def cmc(dist, probe_labels, gallery_labels, probe_cams, gallery_cams, ks=DEFAULT_KS,
        protocol: str = "cross_camera") -> dict[int, float]:
    return evaluate(dist, probe_labels, gallery_labels, probe_cams, gallery_cams, protocol, ks).rank_k


def map_ratio(adv_report: EvalReport, clean_report: EvalReport) -> float:
    if clean_report.mAP == 0:
        raise ValueError("clean mAP is zero; ratio undefined")
    return adv_report.mAP / clean_report.mAP


@dataclass
class RankingList:
    probe_index: int
    gallery_indices: list[int]
    distances: list[float]
    relevant: list[bool] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"probe": self.probe_index, "gallery": self.gallery_indices,
                "distances": self.distances, "relevant": self.relevant}


def ranking_list(probe_index: int, dist, gallery_labels, top_k: int, probe_label=None) -> RankingList:
    """Top ``top_k`` gallery entries by ascending distance (ties: lower index first).

    Relevance is identity agreement with ``probe_label``; when that is not
    given, all flags are False.
    """
    row = np.asarray(dist)[probe_index]
    if top_k > len(row):
        raise ValueError(f"top_k={top_k} exceeds gallery size {len(row)}")
    order = np.argsort(row, kind="stable")[:max(top_k, 0)]
    gl = np.asarray(gallery_labels)
    rel = [bool(gl[j] == probe_label) if probe_label is not None else False for j in order]
    return RankingList(probe_index, [int(j) for j in order], [float(row[j]) for j in order], rel)


def rank_positions(dist, probe_index: int) -> np.ndarray:
    """0-based position of every gallery item in the probe's ranking."""
    order = np.argsort(np.asarray(dist)[probe_index], kind="stable")
    pos = np.empty_like(order)
    pos[order] = np.arange(len(order))
    return pos


def render_strip(probe_pixels: np.ndarray, gallery_pixels: Sequence[np.ndarray], relevant: Sequence[bool],
                 border: int = 2, gap: int = 4) -> np.ndarray:
    """Probe followed by ranked gallery images; blue border = match, red = non-match."""
    h, w = probe_pixels.shape[:2]

    def rgb(px):
        px = np.clip(np.rint(px), 0, 255).astype(np.uint8)
        return np.repeat(px, 3, axis=-1) if px.shape[-1] == 1 else px

    def framed(px, colour):
        tile = np.zeros((h + 2 * border, w + 2 * border, 3), np.uint8)
        tile[:] = colour
        tile[border:border + h, border:border + w] = rgb(px)
        return tile

    tiles = [framed(probe_pixels, (255, 255, 255))]
    for px, ok in zip(gallery_pixels, relevant):
        tiles.append(framed(px, (0, 0, 255) if ok else (255, 0, 0)))
    spacer = np.full((h + 2 * border, gap, 3), 255, np.uint8)
    parts = []
    for t in tiles:
        parts += [t, spacer]
    return np.concatenate(parts[:-1], axis=1)
