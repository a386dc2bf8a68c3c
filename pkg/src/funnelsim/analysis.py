"""Ranking and outlier analysis used as inter-stage filters and for
evaluating surrogate score quality.

Scores follow the docking convention: lower is better.  All ranking
operations break ties by item id so results are deterministic and
invariant under strictly increasing transforms of the scores.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass
class ScoredSet:
    """(id, true score, predicted score) triples over one library."""
    ids: list[str]
    true_scores: np.ndarray
    predicted_scores: np.ndarray

    def __post_init__(self):
        self.true_scores = np.asarray(self.true_scores, dtype=float)
        self.predicted_scores = np.asarray(self.predicted_scores, dtype=float)
        if not (len(self.ids) == len(self.true_scores) == len(self.predicted_scores)):
            raise InputError("ids and score arrays must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise InputError("ids must be unique")
        if not (np.isfinite(self.true_scores).all() and np.isfinite(self.predicted_scores).all()):
            raise InputError("scores must be finite")

    @property
    def u(self) -> int:
        return len(self.ids)

    @classmethod
    def from_csv(cls, path) -> "ScoredSet":
        ids, ts, ps = [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            for lineno, row in enumerate(reader, start=1):
                if lineno == 1 and row and row[0].strip().lower() == "ligand_id":
                    continue
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    ids.append(row[0].strip())
                    ts.append(float(row[1]))
                    ps.append(float(row[2]))
                except (IndexError, ValueError) as exc:
                    raise InputError(f"bad scores row at line {lineno}: {exc}", line=lineno) from exc
        return cls(ids, np.array(ts), np.array(ps))


def _rank_orders(scored: ScoredSet) -> tuple[np.ndarray, np.ndarray]:
    """Rank of each item under (score, id) ascending order, per score kind."""
    n = scored.u
    true_order = sorted(range(n), key=lambda i: (scored.true_scores[i], scored.ids[i]))
    pred_order = sorted(range(n), key=lambda i: (scored.predicted_scores[i], scored.ids[i]))
    true_rank = np.empty(n, dtype=np.int64)
    pred_rank = np.empty(n, dtype=np.int64)
    for r, i in enumerate(true_order):
        true_rank[i] = r
    for r, i in enumerate(pred_order):
        pred_rank[i] = r
    return true_rank, pred_rank


def top_k_recall(scored: ScoredSet, k: int, delta: int) -> float:
    """Fraction of the true top-k found in the predicted top-delta."""
    if not 1 <= k <= scored.u:
        raise ValueError(f"k must be in [1, {scored.u}], got {k}")
    if not 1 <= delta <= scored.u:
        raise ValueError(f"delta must be in [1, {scored.u}], got {delta}")
    true_rank, pred_rank = _rank_orders(scored)
    hits = int(np.count_nonzero((true_rank < k) & (pred_rank < delta)))
    return hits / k


@dataclass
class RESGrid:
    """Recall of the true top f*u as a function of the prediction budget
    b*u: one cell per (budget fraction, top fraction) pair."""
    budget_fractions: np.ndarray
    top_fractions: np.ndarray
    cells: np.ndarray  # shape (len(budget_fractions), len(top_fractions))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["budget_fraction"] + [f"{f:.6g}" for f in self.top_fractions])
            for b, row in zip(self.budget_fractions, self.cells):
                writer.writerow([f"{b:.6g}"] + [f"{v:.10g}" for v in row])


def default_grid() -> np.ndarray:
    """Log-spaced fractions 1e-4 .. 1, ten per decade."""
    return np.logspace(-4, 0, 41)


def compute_res(scored: ScoredSet,
                budget_fractions=None, top_fractions=None) -> RESGrid:
    bf = np.asarray(default_grid() if budget_fractions is None else budget_fractions, dtype=float)
    tf = np.asarray(default_grid() if top_fractions is None else top_fractions, dtype=float)
    if ((bf <= 0) | (bf > 1)).any() or ((tf <= 0) | (tf > 1)).any():
        raise ValueError("grid fractions must lie in (0, 1]")
    u = scored.u
    true_rank, pred_rank = _rank_orders(scored)
    cells = np.empty((len(bf), len(tf)))
    for i, b in enumerate(bf):
        delta = math.ceil(b * u)
        in_budget = pred_rank < delta
        for j, f in enumerate(tf):
            k = math.ceil(f * u)
            hits = int(np.count_nonzero(in_budget & (true_rank < k)))
            cells[i, j] = hits / k
    return RESGrid(bf, tf, cells)


# ---------------------------------------------------------------------------
# point-set operations

def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise InputError("point set must be a non-empty n x d matrix")
    if not np.isfinite(pts).all():
        raise InputError("point set entries must be finite")
    return pts


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances.  Direct differencing keeps exact
    zeros for coincident points; the gram-matrix route is only used when
    the broadcast would be too large, with a clamp at 0."""
    if a.shape[0] * b.shape[0] * a.shape[1] <= 2 ** 25:
        diff = a[:, None, :] - b[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    sq_a = np.sum(a * a, axis=1)
    sq_b = np.sum(b * b, axis=1)
    d2 = sq_a[:, None] + sq_b[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def load_points_csv(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise InputError(f"bad point row at line {lineno}: {exc}", line=lineno) from exc
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise InputError(f"ragged point row at line {lineno}", line=lineno)
            rows.append(vals)
    if not rows:
        raise InputError("point set file is empty")
    return np.asarray(rows)


def lof(points, k_neighbors: int) -> np.ndarray:
    """Local outlier factor per point: about 1 for inliers, larger for
    points in sparser regions than their neighbors.

    The k-distance is the k-th smallest *distinct* neighbor distance, so
    duplicates do not starve the neighborhood.  A point whose k-distance
    is 0 gets infinite local reachability density; density ratios where
    both sides are infinite count as 1.
    """
    pts = _as_points(points)
    n = len(pts)
    if not 1 <= k_neighbors < n:
        raise ValueError(f"k_neighbors must be in [1, {n - 1}], got {k_neighbors}")
    dist = np.sqrt(_pairwise_sq(pts, pts))

    k_dist = np.empty(n)
    neighborhoods: list[np.ndarray] = []
    idx = np.arange(n)
    for i in range(n):
        row = dist[i]
        others = np.sort(row[idx != i])
        distinct = np.unique(others)
        k_dist[i] = distinct[k_neighbors - 1] if len(distinct) >= k_neighbors else distinct[-1]
        nb = idx[(idx != i) & (row <= k_dist[i] + 0.0)]
        neighborhoods.append(nb)

    lrd = np.empty(n)
    for i, nb in enumerate(neighborhoods):
        reach = np.maximum(k_dist[nb], dist[i, nb])
        mean_reach = reach.mean()
        lrd[i] = math.inf if mean_reach == 0.0 else 1.0 / mean_reach

    scores = np.empty(n)
    for i, nb in enumerate(neighborhoods):
        ratios = np.empty(len(nb))
        for j, q in enumerate(nb):
            if math.isinf(lrd[q]) and math.isinf(lrd[i]):
                ratios[j] = 1.0
            elif math.isinf(lrd[i]):
                ratios[j] = 0.0
            else:
                ratios[j] = lrd[q] / lrd[i]
        scores[i] = ratios.mean()
    return scores


def select_outliers(scores, m: int) -> list[int]:
    """Indices of the m largest scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=float)
    if not 0 <= m <= len(scores):
        raise ValueError(f"m must be in [0, {len(scores)}], got {m}")
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:m]


def chamfer(a, b) -> float:
    """Symmetric point-set distance: mean squared nearest-neighbor
    distance from a to b plus the same from b to a."""
    pa = _as_points(a)
    pb = _as_points(b)
    if pa.shape[1] != pb.shape[1]:
        raise InputError(f"dimension mismatch: {pa.shape[1]} vs {pb.shape[1]}")
    d2 = _pairwise_sq(pa, pb)
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())
