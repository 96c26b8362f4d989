"""Retrieval ranking, mAP/CMC under a camera-aware protocol, pooling,
and distractor injection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sampling import LabeledDataset


class ProtocolError(ValueError):
    """Evaluation inputs violate the protocol's preconditions."""


@dataclass
class EvalProtocol:
    mode: str = "single_query"                  # or "multi_query"
    exclude_same_camera_same_id: bool = True
    cmc_ranks: tuple[int, ...] = (1, 5, 10)

    def __post_init__(self):
        if self.mode not in ("single_query", "multi_query"):
            raise ProtocolError(f"unknown mode {self.mode!r}")
        if list(self.cmc_ranks) != sorted(self.cmc_ranks) or \
                any(r < 1 for r in self.cmc_ranks):
            raise ProtocolError("cmc_ranks must be ascending and >= 1")


@dataclass
class EvalResult:
    map: float
    cmc: dict[int, float]
    per_query_ap: list[float] = field(default_factory=list)
    num_queries: int = 0
    num_skipped: int = 0

    def to_dict(self, protocol: EvalProtocol | None = None) -> dict:
        doc = {
            "map": self.map,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "num_queries": self.num_queries,
            "num_skipped": self.num_skipped,
        }
        if protocol is not None:
            doc["protocol"] = {
                "mode": protocol.mode,
                "exclude_same_camera_same_id": protocol.exclude_same_camera_same_id,
                "cmc_ranks": list(protocol.cmc_ranks),
            }
        return doc


def rank_gallery(query_embedding: np.ndarray, gallery_embeddings: np.ndarray,
                 metric: str = "euclidean") -> np.ndarray:
    """Gallery indices by ascending distance; ties go to the lower index."""
    g = np.asarray(gallery_embeddings, dtype=np.float64)
    if len(g) == 0:
        raise ProtocolError("gallery is empty")
    q = np.asarray(query_embedding, dtype=np.float64)
    diff = g - q[None, :]
    d = np.sum(diff * diff, axis=1)
    if metric == "euclidean":
        d = np.sqrt(d)
    return np.argsort(d, kind="stable")


def average_precision(relevance: np.ndarray, num_relevant_total: int) -> float:
    """Sum of precision@k over relevant ranks k, / num_relevant_total."""
    if num_relevant_total < 1:
        raise ProtocolError("num_relevant_total must be >= 1")
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.sum() > num_relevant_total:
        raise ProtocolError("more relevant hits than num_relevant_total")
    cum = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float(np.sum(rel * cum / ranks) / num_relevant_total)


def _pool_queries(queries: LabeledDataset) -> LabeledDataset:
    """Mean-pool query embeddings per (identity, camera) group."""
    keys = sorted({(int(p), int(c)) for p, c in zip(queries.pids, queries.cams)})
    feats, pids, cams = [], [], []
    for pid, cam in keys:
        mask = (queries.pids == pid) & (queries.cams == cam)
        feats.append(queries.features[mask].mean(axis=0))
        pids.append(pid)
        cams.append(cam)
    return LabeledDataset(np.asarray(feats), pids, cams,
                          np.arange(len(keys)))


def evaluate(queries: LabeledDataset, gallery: LabeledDataset,
             protocol: EvalProtocol = EvalProtocol(),
             metric: str = "euclidean") -> EvalResult:
    """mAP and CMC over all queries; unanswerable queries are skipped."""
    if queries.feature_dim != gallery.feature_dim:
        raise ProtocolError("query/gallery embedding widths differ")
    if protocol.mode == "multi_query":
        queries = _pool_queries(queries)

    aps = []
    first_correct = []
    skipped = 0
    for qi in range(len(queries)):
        qpid, qcam = queries.pids[qi], queries.cams[qi]
        keep = np.ones(len(gallery), dtype=bool)
        if protocol.exclude_same_camera_same_id:
            keep &= ~((gallery.pids == qpid) & (gallery.cams == qcam))
        kept = np.flatnonzero(keep)
        rel_mask = gallery.pids[kept] == qpid
        num_rel = int(rel_mask.sum())
        if num_rel == 0:
            skipped += 1
            continue
        order = rank_gallery(queries.features[qi], gallery.features[kept], metric)
        relevance = rel_mask[order].astype(np.float64)
        aps.append(average_precision(relevance, num_rel))
        first_correct.append(int(np.flatnonzero(relevance)[0]) + 1)

    if not aps:
        raise ProtocolError("every query was skipped; nothing to evaluate")
    first_correct = np.asarray(first_correct)
    cmc = {k: float(np.mean(first_correct <= k)) for k in protocol.cmc_ranks}
    return EvalResult(float(np.mean(aps)), cmc, aps, len(aps), skipped)


def combine_embeddings_mean(embeddings: list[np.ndarray]) -> np.ndarray:
    if not embeddings:
        raise ProtocolError("nothing to combine")
    return np.mean(np.asarray(embeddings, dtype=np.float64), axis=0)


def combine_embeddings_max(embeddings: list[np.ndarray]) -> np.ndarray:
    if not embeddings:
        raise ProtocolError("nothing to combine")
    return np.max(np.asarray(embeddings, dtype=np.float64), axis=0)


def inject_distractors(gallery: LabeledDataset, distractors: LabeledDataset,
                       query_pids: np.ndarray,
                       prepend: bool = False) -> LabeledDataset:
    """Concatenate distractor rows into the gallery.

    Distractor identities must be disjoint from every query identity so
    they can never be relevant.
    """
    clash = np.intersect1d(np.unique(distractors.pids), np.unique(query_pids))
    if len(clash):
        raise ProtocolError(f"distractor identities collide with queries: {clash}")
    parts = ([distractors, gallery] if prepend else [gallery, distractors])
    feats = np.concatenate([p.features for p in parts])
    pids = np.concatenate([p.pids for p in parts])
    cams = np.concatenate([p.cams for p in parts])
    # re-key item ids to keep them unique in the combined gallery
    item_ids = np.arange(len(feats))
    return LabeledDataset(feats, pids, cams, item_ids)
