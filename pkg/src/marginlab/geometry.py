"""Max margins (Eq. 4) and cross-group distance geometry.

The maximum margin of a sample is the Euclidean distance to the nearest
sample carrying a different target — an upper bound on any achievable
classification margin when both endpoints are correctly classified.
Records hold that distance before corruption (true labels on uncorrupted
features) and after (effective labels on effective features).

Nearest-neighbor scans are exact: a blocked inner-product pass shortlists
candidates per query, and every shortlisted distance is recomputed by
direct subtraction in float64 before the minimum is taken, so results
agree with a quadratic-scan brute force to the last bit of the
subtraction-based distance. No approximate structures are used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import LabeledDataset

_SHORTLIST_SLACK = 1e-6   # squared-distance slack covering inner-product rounding
_QUERY_BLOCK = 256
_ROW_BLOCK = 16


@dataclass(frozen=True)
class MaxMarginRecord:
    sample_id: int
    corruption: int
    dist_before: float
    dist_after: float
    neighbor_id_before: int
    neighbor_id_after: int


@dataclass(frozen=True)
class DistanceMatrix:
    row_ids: np.ndarray
    col_ids: np.ndarray
    entries: np.ndarray
    ordering: str


def nearest_other_label(queries: np.ndarray, query_labels: np.ndarray,
                        refs: np.ndarray, ref_labels: np.ndarray,
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest reference with a label different from each query's.

    Returns (distances, ref indices); queries with no differently-labeled
    reference get (inf, -1). Ties break to the lowest reference index.
    """
    Q = np.ascontiguousarray(queries, dtype=np.float64)
    R = np.ascontiguousarray(refs, dtype=np.float64)
    qlab = np.asarray(query_labels)
    rlab = np.asarray(ref_labels)
    nq = len(Q)
    out_d = np.full(nq, np.inf)
    out_i = np.full(nq, -1, dtype=np.int64)
    if nq == 0 or len(R) == 0:
        return out_d, out_i
    r2 = np.einsum("rd,rd->r", R, R)
    for start in range(0, nq, _QUERY_BLOCK):
        qb = Q[start:start + _QUERY_BLOCK]
        lb = qlab[start:start + _QUERY_BLOCK]
        q2 = np.einsum("qd,qd->q", qb, qb)
        d2 = q2[:, None] + r2[None, :] - 2.0 * (qb @ R.T)
        d2[lb[:, None] == rlab[None, :]] = np.inf
        mins = np.min(d2, axis=1)
        reachable = np.isfinite(mins)
        if not np.any(reachable):
            continue
        cand = d2 <= (mins[:, None] + _SHORTLIST_SLACK)
        cand[~reachable] = False
        rows, cols = np.nonzero(cand)
        diff = qb[rows] - R[cols]
        exact = np.einsum("kd,kd->k", diff, diff)
        order = np.lexsort((cols, exact, rows))
        rows_s, idx_first = np.unique(rows[order], return_index=True)
        pick = order[idx_first]
        out_d[start + rows_s] = np.sqrt(exact[pick])
        out_i[start + rows_s] = cols[pick]
    return out_d, out_i


def max_margin(ds: LabeledDataset, query_ids: np.ndarray,
               labeling: str = "effective_labels",
               ) -> tuple[np.ndarray, np.ndarray]:
    """Eq. 4: exact distance from each query to the nearest different-target
    sample in the whole dataset, under the chosen labeling.

    Returns (distances, neighbor sample ids) aligned with query_ids.
    """
    if labeling not in ("true_labels", "effective_labels"):
        raise ValueError(f"unknown labeling {labeling!r}")
    labels = ds.true_labels if labeling == "true_labels" else ds.effective_labels
    if len(np.unique(labels)) < 2:
        raise ValueError("degenerate dataset: only one label present, "
                         "no different-target neighbor exists")
    query_ids = np.asarray(query_ids, dtype=np.int64)
    pos = {int(sid): k for k, sid in enumerate(ds.ids)}
    try:
        qrows = np.array([pos[int(sid)] for sid in query_ids], dtype=np.int64)
    except KeyError as exc:
        raise KeyError(f"query id {exc.args[0]} not in dataset") from None
    dist, ridx = nearest_other_label(ds.features[qrows], labels[qrows],
                                     ds.features, labels)
    if not np.all(np.isfinite(dist)):
        missing = query_ids[~np.isfinite(dist)]
        raise ValueError(f"no different-target neighbor for ids {missing[:5].tolist()}")
    return dist, ds.ids[ridx]


def build_max_margin_records(ds_before: LabeledDataset, ds_after: LabeledDataset,
                             query_ids: np.ndarray) -> list[MaxMarginRecord]:
    """Pair the before/after labelings into one record per query.

    ds_before: uncorrupted features with true labels; ds_after: the
    corrupted dataset (effective features and labels). Both must hold the
    same sample ids.
    """
    if not np.array_equal(ds_before.ids, ds_after.ids):
        raise ValueError("before/after datasets must list identical sample ids")
    d_b, n_b = max_margin(ds_before, query_ids, "true_labels")
    d_a, n_a = max_margin(ds_after, query_ids, "effective_labels")
    pos = {int(sid): k for k, sid in enumerate(ds_after.ids)}
    recs = []
    for k, sid in enumerate(np.asarray(query_ids, dtype=np.int64)):
        flag = int(ds_after.corruption[pos[int(sid)]])
        recs.append(MaxMarginRecord(sample_id=int(sid), corruption=flag,
                                    dist_before=float(d_b[k]), dist_after=float(d_a[k]),
                                    neighbor_id_before=int(n_b[k]),
                                    neighbor_id_after=int(n_a[k])))
    return recs


def records_frame(records: list[MaxMarginRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        {"sample_id": [r.sample_id for r in records],
         "corruption": [r.corruption for r in records],
         "dist_before": [r.dist_before for r in records],
         "dist_after": [r.dist_after for r in records],
         "neighbor_id_before": [r.neighbor_id_before for r in records],
         "neighbor_id_after": [r.neighbor_id_after for r in records]})


def scatter_before_after(records: list[MaxMarginRecord],
                         ) -> tuple[pd.DataFrame, dict[str, float]]:
    """Plot-ready (dist_before, dist_after, corruption) table plus the
    fraction of points strictly below the identity line per group."""
    df = records_frame(records)[["sample_id", "dist_before", "dist_after", "corruption"]]
    summary = {}
    flags = df.corruption.values
    for name, mask in (("clean", flags == 0), ("corrupted", flags != 0)):
        if np.any(mask):
            summary[f"frac_below_identity_{name}"] = float(
                np.mean(df.dist_after.values[mask] < df.dist_before.values[mask]))
    return df, summary


def order_ids(ids: np.ndarray, corruption: np.ndarray,
              margins: np.ndarray) -> np.ndarray:
    """Fig. 4 axis order: corruption status first, then ascending margin."""
    ids = np.asarray(ids, dtype=np.int64)
    order = np.lexsort((ids, np.asarray(margins), np.asarray(corruption)))
    return ids[order]


def distance_matrix(ds: LabeledDataset, row_ids: np.ndarray, col_ids: np.ndarray,
                    ordering_key: dict[int, tuple[int, float]] | None = None,
                    ) -> DistanceMatrix:
    """Exact pairwise Euclidean distances between two id lists.

    ordering_key maps sample_id -> (corruption, margin); when given, both
    axes are re-sorted by corruption status first, then ascending margin.
    Entries are computed by direct blocked subtraction (no inner-product
    shortcut), so a same-id row/col pair is exactly zero and the matrix is
    exactly symmetric when the id lists coincide.
    """
    row_ids = np.asarray(row_ids, dtype=np.int64)
    col_ids = np.asarray(col_ids, dtype=np.int64)
    ordering = "input order"
    if ordering_key is not None:
        for sid in np.concatenate([row_ids, col_ids]):
            if int(sid) not in ordering_key:
                raise KeyError(f"id {int(sid)} has no (corruption, margin) ordering key")

        def sort(ids_arr):
            flags = np.array([ordering_key[int(s)][0] for s in ids_arr])
            margs = np.array([ordering_key[int(s)][1] for s in ids_arr])
            return order_ids(ids_arr, flags, margs)

        row_ids, col_ids = sort(row_ids), sort(col_ids)
        ordering = "corruption status first, then ascending margin"
    pos = {int(sid): k for k, sid in enumerate(ds.ids)}
    rows = ds.features[[pos[int(s)] for s in row_ids]]
    cols = ds.features[[pos[int(s)] for s in col_ids]]
    entries = np.empty((len(rows), len(cols)))
    for b in range(0, len(rows), _ROW_BLOCK):
        diff = rows[b:b + _ROW_BLOCK, None, :] - cols[None, :, :]
        entries[b:b + _ROW_BLOCK] = np.sqrt(np.einsum("rcd,rcd->rc", diff, diff))
    return DistanceMatrix(row_ids=row_ids, col_ids=col_ids,
                          entries=entries, ordering=ordering)


def save_distance_matrix(dm: DistanceMatrix, bin_path) -> None:
    """Dense row-major float64 .bin next to a .json sidecar."""
    bin_path = str(bin_path)
    np.ascontiguousarray(dm.entries, dtype=np.float64).tofile(bin_path)
    sidecar = {"shape": list(dm.entries.shape), "dtype": "<f8", "order": "C",
               "ordering": dm.ordering,
               "row_ids": dm.row_ids.tolist(), "col_ids": dm.col_ids.tolist()}
    with open(bin_path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1)


def load_distance_matrix(bin_path) -> DistanceMatrix:
    bin_path = str(bin_path)
    with open(bin_path + ".json") as fh:
        side = json.load(fh)
    entries = np.fromfile(bin_path, dtype=np.dtype(side["dtype"]))
    entries = entries.reshape(side["shape"])
    return DistanceMatrix(row_ids=np.array(side["row_ids"], dtype=np.int64),
                          col_ids=np.array(side["col_ids"], dtype=np.int64),
                          entries=entries, ordering=side["ordering"])
