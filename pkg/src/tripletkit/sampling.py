"""PK batch construction, random triplet sampling, and offline hard mining."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .losses import MarginMode, margin_apply, pairwise_distances
from .numcore import MlpParams, mlp_forward


class SamplingError(ValueError):
    """Dataset cannot support the requested sampling."""


@dataclass
class LabeledDataset:
    """Feature rows with identity and camera labels."""

    features: np.ndarray        # (N, F)
    pids: np.ndarray            # identity per row
    cams: np.ndarray            # camera per row
    item_ids: np.ndarray        # unique per row

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.pids = np.asarray(self.pids, dtype=np.int64)
        self.cams = np.asarray(self.cams, dtype=np.int64)
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        n = len(self.features)
        if not (len(self.pids) == len(self.cams) == len(self.item_ids) == n):
            raise ValueError("column lengths disagree")
        if len(np.unique(self.item_ids)) != n:
            raise ValueError("item_ids must be unique")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def identity_index(self) -> dict[int, np.ndarray]:
        """Row indices per identity, in stable row order."""
        order = {}
        for pid in np.unique(self.pids):
            order[int(pid)] = np.flatnonzero(self.pids == pid)
        return order

    def subset(self, rows: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.features[rows], self.pids[rows],
                              self.cams[rows], self.item_ids[rows])


@dataclass
class PKBatch:
    rows: np.ndarray            # P*K dataset row indices, identity-blocked
    P: int
    K: int


@dataclass
class TripletSet:
    triplets: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.triplets)

    def materialize_rows(self) -> np.ndarray:
        """Flatten to 3B rows in (a, p, n) order."""
        return np.array([i for t in self.triplets for i in t], dtype=np.int64)


def sample_pk_batch(dataset: LabeledDataset, P: int, K: int,
                    rng: np.random.Generator) -> PKBatch:
    """P identities uniform without replacement, K items each.

    Items are taken without replacement when the identity has at least K,
    otherwise every distinct item appears once before uniform replication.
    Identities with a single item are excluded (no positive exists).
    """
    if P < 2 or K < 2:
        raise SamplingError("need P >= 2 and K >= 2")
    index = {pid: rows for pid, rows in dataset.identity_index().items()
             if len(rows) >= 2}
    if len(index) < P:
        raise SamplingError(
            f"dataset has {len(index)} usable identities, need {P}")
    pids = sorted(index)
    chosen = rng.choice(len(pids), size=P, replace=False)
    all_rows = []
    for c in chosen:
        rows = index[pids[c]]
        if len(rows) >= K:
            picked = rng.choice(rows, size=K, replace=False)
        else:
            extra = rng.choice(rows, size=K - len(rows), replace=True)
            picked = np.concatenate([rng.permutation(rows), extra])
        all_rows.append(picked)
    return PKBatch(np.concatenate(all_rows), P, K)


def sample_random_triplets(dataset: LabeledDataset, B: int,
                           rng: np.random.Generator) -> TripletSet:
    """B uniform triplets; anchors come only from identities with >= 2 items."""
    index = dataset.identity_index()
    anchor_pool = np.concatenate(
        [rows for rows in index.values() if len(rows) >= 2]) \
        if any(len(r) >= 2 for r in index.values()) else np.array([], dtype=np.int64)
    if len(index) < 2 or len(anchor_pool) == 0:
        raise SamplingError("need >= 2 identities and one with >= 2 items")
    triplets = []
    for _ in range(B):
        a = int(rng.choice(anchor_pool))
        same = index[int(dataset.pids[a])]
        positives = same[same != a]
        p = int(rng.choice(positives))
        neg_mask = dataset.pids != dataset.pids[a]
        negatives = np.flatnonzero(neg_mask)
        if len(negatives) == 0:
            raise SamplingError("no negative exists for some identity")
        n = int(rng.choice(negatives))
        triplets.append((a, p, n))
    return TripletSet(triplets)


def _all_valid_triplets(pids: np.ndarray) -> list[tuple[int, int, int]]:
    n = len(pids)
    out = []
    for a in range(n):
        for p in range(n):
            if p == a or pids[p] != pids[a]:
                continue
            for j in range(n):
                if pids[j] != pids[a]:
                    out.append((a, p, j))
    return out


def mine_hard_offline(model: MlpParams, dataset: LabeledDataset,
                      sample_fraction: float, B: int,
                      margin_mode: MarginMode,
                      rng: np.random.Generator,
                      metric: str = "euclidean") -> TripletSet:
    """Embed a random subset and return the B highest-loss valid triplets.

    Returned indices refer to the full dataset. Ordering is by descending
    loss term, ties by subset enumeration order.
    """
    if not 0.0 < sample_fraction <= 1.0:
        raise SamplingError("sample_fraction must be in (0, 1]")
    n = len(dataset)
    size = max(2, int(round(sample_fraction * n)))

    def pick_subset():
        rows = np.sort(rng.choice(n, size=size, replace=False))
        return rows

    rows = pick_subset()
    if len(np.unique(dataset.pids[rows])) < 2:
        rows = pick_subset()    # one retry before giving up
        if len(np.unique(dataset.pids[rows])) < 2:
            raise SamplingError("mined subset degenerated to one identity")

    emb, _ = mlp_forward(model, dataset.features[rows])
    d = pairwise_distances(emb, metric).values
    pids = dataset.pids[rows]
    candidates = _all_valid_triplets(pids)
    if not candidates:
        raise SamplingError("subset contains no valid triplet")
    terms = np.array([
        float(margin_apply(d[a, p] - d[a, j], margin_mode))
        for a, p, j in candidates
    ])
    # stable sort keeps enumeration order among ties
    order = np.argsort(-terms, kind="stable")[:B]
    triplets = [
        (int(rows[candidates[i][0]]), int(rows[candidates[i][1]]),
         int(rows[candidates[i][2]]))
        for i in order
    ]
    return TripletSet(triplets)


def write_dataset_csv(path, dataset: LabeledDataset) -> None:
    """CSV with header item_id,pid,cam,f0,...; round-trip float formatting."""
    f_dim = dataset.feature_dim
    header = ["item_id", "pid", "cam"] + [f"f{i}" for i in range(f_dim)]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            w.writerow([int(dataset.item_ids[i]), int(dataset.pids[i]),
                        int(dataset.cams[i])]
                       + [repr(float(v)) for v in dataset.features[i]])


def read_dataset_csv(path, prefix: str = "f") -> LabeledDataset:
    with open(path, encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r)
        if header[:3] != ["item_id", "pid", "cam"]:
            raise ValueError(f"unexpected CSV header in {path}")
        exp_cols = [f"{prefix}{i}" for i in range(len(header) - 3)]
        if header[3:] != exp_cols:
            raise ValueError(f"unexpected feature columns in {path}")
        item_ids, pids, cams, feats = [], [], [], []
        for row in r:
            item_ids.append(int(row[0]))
            pids.append(int(row[1]))
            cams.append(int(row[2]))
            feats.append([float(v) for v in row[3:]])
    return LabeledDataset(np.asarray(feats), pids, cams, item_ids)
