"""Ranking metrics over frozen candidates and the boundary analyses."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels, scorers
from .dataset import EvalCandidates, InteractionSet

DEFAULT_KS = (1, 10)
DEFAULT_OFFSETS = tuple(range(-5, 6))
METRIC_ORDER = ("hit@1", "hit@10", "ndcg@10", "mrr@10")


def rank_metrics(scores, positive_index: int, k: int) -> tuple[float, float, float]:
    """``(hit, ndcg, mrr)`` at ``k`` for one candidate list with a single
    positive.  Negatives tied with the positive rank above it."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score in candidate list")
    p = s[positive_index]
    rank = int(np.count_nonzero(s >= p))  # includes the positive itself
    if rank > k:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1), 1.0 / rank


def metrics_from_ranks(ranks: np.ndarray, ks=DEFAULT_KS) -> dict[str, np.ndarray]:
    ranks = np.asarray(ranks, dtype=np.int64)
    out = {}
    for k in ks:
        hit = ranks <= k
        out[f"hit@{k}"] = hit.astype(np.float64)
        out[f"ndcg@{k}"] = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
        out[f"mrr@{k}"] = np.where(hit, 1.0 / ranks, 0.0)
    return out


@dataclass
class MetricsReport:
    mean: dict[str, float]
    std: dict[str, float]
    per_user: dict[str, np.ndarray] = field(default_factory=dict)
    runs: list[dict[str, float]] = field(default_factory=list)

    @property
    def n_runs(self) -> int:
        return max(1, len(self.runs))


def candidate_ranks(state: scorers.ModelState, cands: EvalCandidates, users=None) -> np.ndarray:
    """1-based rank of each positive among its candidates (pessimistic ties)."""
    if users is not None:
        pos_of = {int(u): i for i, u in enumerate(cands.users)}
        missing = [int(u) for u in users if int(u) not in pos_of]
        if missing:
            raise KeyError(f"users missing from candidates: {missing[:5]}")
    if cands.users.size and (cands.users.max() >= state.n_users
                             or cands.negatives.max() >= state.n_items):
        raise ValueError("candidates reference users/items outside the model")
    s = scorers.score_matrix(state, cands.users, cands.items())
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score in candidate list")
    return 1 + kernels.count_ge(s[:, 0], s[:, 1:])


def evaluate(state: scorers.ModelState, cands: EvalCandidates, ks=DEFAULT_KS, users=None) -> MetricsReport:
    """Mean metrics over the held-out users of ``cands``."""
    ranks = candidate_ranks(state, cands, users)
    per = metrics_from_ranks(ranks, ks)
    if users is not None:
        idx = np.searchsorted(cands.users, np.asarray(users))
        per = {k: v[idx] for k, v in per.items()}
    mean = {k: float(v.mean()) for k, v in per.items()}
    return MetricsReport(mean, {k: 0.0 for k in mean}, per, [mean])


def summarize_runs(reports: list[MetricsReport]) -> MetricsReport:
    """Mean and (population) standard deviation across repeated runs."""
    if not reports:
        raise ValueError("no runs to summarize")
    keys = list(reports[0].mean)
    runs = [r.mean for r in reports]
    mean = {k: float(np.mean([r[k] for r in runs])) for k in keys}
    std = {k: float(np.std([r[k] for r in runs])) for k in keys}
    return MetricsReport(mean, std, {}, runs)


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Tidy rows: one per model x dataset x seed."""
    if not rows:
        raise ValueError("no rows")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def report_json(report: MetricsReport) -> str:
    return json.dumps({"mean": report.mean, "std": report.std, "runs": report.runs},
                      indent=2, sort_keys=True) + "\n"


# -- boundary analyses -----------------------------------------------------


@dataclass
class BoundaryReport:
    offsets: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    predicted: np.ndarray  # items passing the boundary, summed over users
    filtered: np.ndarray
    boundaries: np.ndarray
    n_users: int
    n_items: int
    n_positive: int

    @property
    def filter_rate(self) -> float:
        """Fraction of the catalog below the boundary at offset 0."""
        i = int(np.flatnonzero(self.offsets == 0)[0]) if np.any(self.offsets == 0) else None
        if i is None:
            raise ValueError("offset 0 not swept")
        return float(self.filtered[i]) / (self.n_users * self.n_items)

    def best_offset(self) -> float:
        return float(self.offsets[int(np.argmax(self.f1))])

    def rows(self) -> list[dict]:
        return [{"offset": float(o), "precision": float(p), "recall": float(r), "f1": float(f)}
                for o, p, r, f in zip(self.offsets, self.precision, self.recall, self.f1)]


def f1_score(p, r):
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    den = p + r
    return np.where(den > 0, 2 * p * r / np.where(den > 0, den, 1.0), 0.0)


def boundary_sweep(state: scorers.ModelState, observed: InteractionSet, offsets=DEFAULT_OFFSETS,
                   users=None, chunk: int = 256) -> BoundaryReport:
    """Classify every catalog item as liked iff ``s(u, x) > b_u + offset``;
    micro-averaged precision/recall/F1 against the observed interactions."""
    if not state.has_boundary:
        raise ValueError("boundary sweep needs a model trained with a boundary head")
    offsets = np.asarray(offsets, dtype=np.float64)
    users = np.arange(observed.n_users) if users is None else np.asarray(users, dtype=np.int64)
    tp = np.zeros(offsets.size, dtype=np.int64)
    pred = np.zeros(offsets.size, dtype=np.int64)
    n_pos = 0
    bvals = scorers.boundary_scores(state, users)
    for start in range(0, users.size, chunk):
        uu = users[start:start + chunk]
        s = scorers.score_all_items(state, uu)
        label = np.zeros(s.shape, dtype=bool)
        for r, u in enumerate(uu):
            label[r, observed.items_of(u)] = True
        n_pos += int(label.sum())
        margin = s - bvals[start:start + chunk, None]
        for j, off in enumerate(offsets):
            hit = margin > off
            pred[j] += int(hit.sum())
            tp[j] += int((hit & label).sum())
    precision = np.where(pred > 0, tp / np.maximum(pred, 1), 0.0)
    recall = tp / max(n_pos, 1)
    total = users.size * state.n_items
    return BoundaryReport(offsets, precision, recall, f1_score(precision, recall), pred,
                          total - pred, bvals, int(users.size), state.n_items, n_pos)


@dataclass
class BoundaryDistribution:
    values: np.ndarray
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    std: float

    def rows(self) -> list[dict]:
        return [{"bin_left": float(a), "bin_right": float(b), "count": int(c)}
                for a, b, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def boundary_distribution(state: scorers.ModelState, bins: int = 10, users=None) -> BoundaryDistribution:
    users = np.arange(state.n_users) if users is None else users
    vals = scorers.boundary_scores(state, users)
    counts, edges = np.histogram(vals, bins=bins)
    return BoundaryDistribution(vals, counts, edges, float(vals.mean()), float(vals.std()))


def is_unimodal(counts) -> bool:
    """Counts rise (weakly) to a single peak and then fall (weakly)."""
    c = np.asarray(counts)
    peak = int(np.argmax(c))
    return bool(np.all(np.diff(c[:peak + 1]) >= 0) and np.all(np.diff(c[peak:]) <= 0))


def iqr(x) -> float:
    q75, q25 = np.percentile(np.asarray(x, dtype=np.float64), [75, 25])
    return float(q75 - q25)


def score_spreads(state: scorers.ModelState, train: InteractionSet, cands: EvalCandidates) -> dict:
    """Positive (training pairs) and negative (frozen candidates) scores
    measured relative to each user's boundary."""
    u, x = train.pairs()
    b = scorers.boundary_scores(state, np.arange(state.n_users))
    rel_pos = scorers.score_pairs(state, u, x) - b[u]
    rel_neg = (scorers.score_matrix(state, cands.users, cands.negatives) - b[cands.users, None]).ravel()
    return {
        "mean_b": float(b.mean()), "std_b": float(b.std()),
        "pos_iqr": iqr(rel_pos), "pos_median": float(np.median(rel_pos)),
        "neg_iqr": iqr(rel_neg), "neg_median": float(np.median(rel_neg)),
    }


def alpha_study(template, alphas, bundle) -> list[dict]:
    """Train one boundary model per alpha (shared seed) and report metrics,
    boundary level and the score spreads around it."""
    from dataclasses import replace

    from .training import train

    if not len(alphas):
        raise ValueError("alpha list is empty")
    rows = []
    for a in alphas:
        res = train(replace(template, alpha=float(a)), bundle)
        test = evaluate(res.state, bundle.cand_test)
        row = {"alpha": float(a), "val_ndcg10": res.best_val_ndcg10,
               "test_ndcg10": test.mean["ndcg@10"], "test_hit1": test.mean["hit@1"]}
        row.update(score_spreads(res.state, bundle.train, bundle.cand_test))
        rows.append(row)
    return rows
