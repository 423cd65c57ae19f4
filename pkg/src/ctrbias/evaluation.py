"""Ranking metrics over per-user score lists, with group-level exposure views.

All rankings order a user's samples by descending score with lexicographic
item-id tie-breaks, so every metric is deterministic for any input order.
Group-level metrics key off the bias field: a sample counts for group j
when its feature vector has positive mass on that group's feature.

Undefined values (a user with no positives, a group with no positive
samples) are skipped or reported as NaN rather than silently treated as
zero; the evaluate() driver collects them into an error list.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, MetricError
from .numeric import average_ranks, to_jsonable

DEFAULT_K = 5


@dataclass
class RankedData:
    """Per-user contiguous blocks of sample rows in ranking order."""

    order: np.ndarray
    user_starts: np.ndarray
    users: np.ndarray

    @property
    def n_users(self) -> int:
        return len(self.users)

    def block(self, u: int) -> np.ndarray:
        return self.order[self.user_starts[u]:self.user_starts[u + 1]]


def rank_users(user_ids, scores, item_ids) -> RankedData:
    """Sort rows by (user asc, score desc, item_id asc) and find user blocks."""
    user_ids = np.asarray(user_ids)
    scores = np.asarray(scores, dtype=np.float64)
    item_ids = np.asarray(item_ids)
    if not (len(user_ids) == len(scores) == len(item_ids)):
        raise ConfigError("user_ids, scores, item_ids must have equal length")
    if len(user_ids) == 0:
        raise ConfigError("cannot rank an empty sample list")
    order = np.lexsort((item_ids, -scores, user_ids))
    sorted_users = user_ids[order]
    new_user = np.flatnonzero(sorted_users[1:] != sorted_users[:-1]) + 1
    user_starts = np.concatenate([[0], new_user, [len(order)]])
    return RankedData(order, user_starts, sorted_users[user_starts[:-1]])


def _positions_within_user(ranked: RankedData) -> np.ndarray:
    """0-based rank of each ordered row inside its user's block."""
    n = len(ranked.order)
    sizes = np.diff(ranked.user_starts)
    return np.arange(n) - np.repeat(ranked.user_starts[:-1], sizes)


def _per_user_positive_counts(ranked: RankedData, labels) -> np.ndarray:
    sorted_labels = np.asarray(labels)[ranked.order]
    cum = np.concatenate([[0], np.cumsum(sorted_labels)])
    return cum[ranked.user_starts[1:]] - cum[ranked.user_starts[:-1]]


def _prefix_mask_by_row(ranked: RankedData, cutoffs: np.ndarray) -> np.ndarray:
    """Boolean per original row: row sits inside its user's top-`cutoff`."""
    sizes = np.diff(ranked.user_starts)
    within = _positions_within_user(ranked) < np.repeat(cutoffs, sizes)
    by_row = np.empty(len(ranked.order), dtype=bool)
    by_row[ranked.order] = within
    return by_row


def user_auc(user_ids, scores, labels) -> tuple[float, int]:
    """Mean per-user AUC; ties count half. Users without both classes are
    skipped; returns (nan, n_users) when every user is skipped."""
    user_ids = np.asarray(user_ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.lexsort((scores, user_ids))
    su, ss, sl = user_ids[order], scores[order], labels[order]
    starts = np.concatenate(
        [[0], np.flatnonzero(su[1:] != su[:-1]) + 1, [len(su)]])
    total = 0.0
    valid = 0
    skipped = 0
    for a, b in zip(starts[:-1], starts[1:]):
        y = sl[a:b]
        n_pos = int(y.sum())
        n_neg = (b - a) - n_pos
        if n_pos == 0 or n_neg == 0:
            skipped += 1
            continue
        ranks = average_ranks(ss[a:b])
        rank_sum = float(ranks[y == 1].sum())
        total += (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        valid += 1
    if valid == 0:
        return float("nan"), skipped
    return total / valid, skipped


def ndcg_at_k(user_ids, scores, labels, item_ids, k: int = DEFAULT_K) -> tuple[float, int]:
    """Mean NDCG@k with binary gains and 1/log2(rank+1) discounts.

    Users with no positive samples are skipped.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ranked = rank_users(user_ids, scores, item_ids)
    labels = np.asarray(labels)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    total = 0.0
    valid = 0
    skipped = 0
    for u in range(ranked.n_users):
        rows = ranked.block(u)
        y = labels[rows]
        n_pos = int(y.sum())
        if n_pos == 0:
            skipped += 1
            continue
        depth = min(k, len(rows))
        dcg = float((y[:depth] * discounts[:depth]).sum())
        ideal_depth = min(k, n_pos)
        idcg = float(discounts[:ideal_depth].sum())
        total += dcg / idcg
        valid += 1
    if valid == 0:
        return float("nan"), skipped
    return total / valid, skipped


def group_exposure_hit_rate(ds: Dataset, scores) -> np.ndarray:
    """EHR per group: exposures inside each user's top-|positives| prefix
    that carry the group's feature, over positive samples carrying it.

    The numerator counts prefix exposures regardless of their own label.
    Groups with no positive samples get NaN.
    """
    ranked = rank_users(ds.user_ids, np.asarray(scores, dtype=np.float64), ds.item_ids)
    k_plus = _per_user_positive_counts(ranked, ds.labels)
    in_prefix = _prefix_mask_by_row(ranked, k_plus)
    rows, groups = ds.bias_memberships()
    g = ds.schema.num_groups
    numerator = np.bincount(groups, weights=in_prefix[rows].astype(np.float64),
                            minlength=g)
    is_pos = ds.labels[rows] == 1
    denominator = np.bincount(groups[is_pos], minlength=g).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denominator > 0, numerator / denominator, np.nan)
    return out


def group_tpr_at_k(ds: Dataset, scores, k: int | None = DEFAULT_K) -> np.ndarray:
    """True-positive rate per group inside each user's top-k.

    k=None means the whole list (every positive is recovered). Groups with
    no positive samples get NaN.
    """
    if k is not None and k < 1:
        raise ConfigError(f"k must be >= 1 or None, got {k}")
    ranked = rank_users(ds.user_ids, np.asarray(scores, dtype=np.float64), ds.item_ids)
    if k is None:
        in_topk = np.ones(len(ds), dtype=bool)
    else:
        cutoffs = np.full(ranked.n_users, k, dtype=np.int64)
        in_topk = _prefix_mask_by_row(ranked, cutoffs)
    rows, groups = ds.bias_memberships()
    g = ds.schema.num_groups
    is_pos = ds.labels[rows] == 1
    hit = in_topk[rows] & is_pos
    numerator = np.bincount(groups[hit], minlength=g).astype(np.float64)
    denominator = np.bincount(groups[is_pos], minlength=g).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denominator > 0, numerator / denominator, np.nan)
    return out


def reo_at_k(ds: Dataset, scores, k: int | None = DEFAULT_K,
             tpr: np.ndarray | None = None) -> float:
    """Ranking equal opportunity: population std over group TPRs divided by
    their mean. Groups without positives are excluded; all-zero TPRs or no
    measurable group at all raise MetricError."""
    if tpr is None:
        tpr = group_tpr_at_k(ds, scores, k)
    values = [float(p) for p in tpr if math.isfinite(p)]
    if not values:
        raise MetricError("no group has positive samples, equal-opportunity "
                          "spread is undefined")
    mean = sum(values) / len(values)
    if mean == 0.0:
        raise MetricError("all group TPRs are zero, relative spread is undefined")
    var = sum((p - mean) ** 2 for p in values) / len(values)
    return math.sqrt(var) / mean


@dataclass
class EvalReport:
    """All metrics of one split at one cutoff, plus undefined-value notes."""

    split_tag: str
    k: int
    n_samples: int
    n_users: int
    uauc: float
    uauc_skipped_users: int
    ndcg: float
    ndcg_skipped_users: int
    reo: float | None
    group_labels: tuple[str, ...]
    group_tpr: list[float]
    group_ehr: list[float]
    group_exposures: list[int]
    group_positives: list[int]
    errors: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return to_jsonable(self.__dict__)

    def write_group_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["group", "exposures", "positives",
                             f"tpr_at_{self.k}", "ehr"])
            for i, label in enumerate(self.group_labels):
                tpr = self.group_tpr[i]
                ehr = self.group_ehr[i]
                writer.writerow([
                    label,
                    self.group_exposures[i],
                    self.group_positives[i],
                    "" if math.isnan(tpr) else repr(tpr),
                    "" if math.isnan(ehr) else repr(ehr),
                ])


def evaluate(ds: Dataset, scores, k: int = DEFAULT_K) -> EvalReport:
    """Compute every supported metric for one split with one score vector."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(ds):
        raise ConfigError("scores length does not match dataset")
    if len(ds) == 0:
        raise ConfigError("cannot evaluate an empty dataset")
    errors: list[str] = []
    uauc, uauc_skipped = user_auc(ds.user_ids, scores, ds.labels)
    if math.isnan(uauc):
        errors.append("uauc undefined: no user has both a positive and a negative")
    ndcg, ndcg_skipped = ndcg_at_k(ds.user_ids, scores, ds.labels, ds.item_ids, k)
    if math.isnan(ndcg):
        errors.append("ndcg undefined: no user has a positive sample")
    tpr = group_tpr_at_k(ds, scores, k)
    ehr = group_exposure_hit_rate(ds, scores)
    try:
        reo = reo_at_k(ds, scores, k, tpr=tpr)
    except MetricError as exc:
        errors.append(f"reo undefined: {exc}")
        reo = None
    rows, groups = ds.bias_memberships()
    g = ds.schema.num_groups
    exposures = np.bincount(groups, minlength=g)
    positives = np.bincount(groups[ds.labels[rows] == 1], minlength=g)
    for i, label in enumerate(ds.bias_labels):
        if positives[i] == 0:
            errors.append(f"group {label}: no positive samples, tpr/ehr undefined")
    return EvalReport(
        split_tag=ds.split_tag,
        k=k,
        n_samples=len(ds),
        n_users=len(np.unique(ds.user_ids)),
        uauc=uauc,
        uauc_skipped_users=uauc_skipped,
        ndcg=ndcg,
        ndcg_skipped_users=ndcg_skipped,
        reo=reo,
        group_labels=ds.bias_labels,
        group_tpr=[float(x) for x in tpr],
        group_ehr=[float(x) for x in ehr],
        group_exposures=[int(x) for x in exposures],
        group_positives=[int(x) for x in positives],
        errors=errors,
    )
