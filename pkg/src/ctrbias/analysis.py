"""Diagnosing how group-level label imbalance reaches the model's output.

The chain under study: groups differ in their positive-sample ratio on
the training log; the model stores that difference almost entirely in the
linear weights of the group features; those weights then shift scores for
every exposure of the group. This module quantifies each link with group
counts, correlation tests, a per-label variance decomposition of the
score's linear vs higher-order parts, and an OLS fit of weights on ratios.

Correlation p-values use the exact two-sided Student-t tail, computed from
the regularized incomplete beta function via a modified Lentz continued
fraction; no statistics package is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, MetricError, NumericalError, UndefinedCorrelationError
from .models import ModelParams, PredictionParts, prediction_parts
from .numeric import average_ranks, sigmoid, to_jsonable

_CF_MAX_ITER = 300
_CF_EPS = 3e-14
_CF_FPMIN = 1e-300


@dataclass
class GroupStats:
    """Per-group sample counts and the positive ratio N_p / (N_p + N_n)."""

    labels: tuple[str, ...]
    n_pos: np.ndarray
    n_neg: np.ndarray

    @property
    def diff(self) -> np.ndarray:
        return self.n_pos - self.n_neg

    @property
    def ratio(self) -> np.ndarray:
        total = self.n_pos + self.n_neg
        with np.errstate(invalid="ignore"):
            return np.where(total > 0, self.n_pos / total, np.nan)

    def to_json_dict(self) -> dict:
        return to_jsonable({
            "labels": self.labels,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "diff": self.diff,
            "ratio": self.ratio,
        })


def group_stats(ds: Dataset) -> GroupStats:
    """Count positives and negatives per bias group over one split."""
    rows, groups = ds.bias_memberships()
    g = ds.schema.num_groups
    is_pos = ds.labels[rows] == 1
    n_pos = np.bincount(groups[is_pos], minlength=g).astype(np.int64)
    n_neg = np.bincount(groups[~is_pos], minlength=g).astype(np.int64)
    return GroupStats(ds.bias_labels, n_pos, n_neg)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta, modified Lentz method."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_FPMIN:
        d = _CF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise NumericalError(
        f"incomplete beta continued fraction failed to converge "
        f"(a={a}, b={b}, x={x})"
    )


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1], accurate to ~1e-14."""
    if a <= 0 or b <= 0:
        raise NumericalError(f"beta parameters must be positive, got a={a} b={b}")
    if not 0.0 <= x <= 1.0:
        raise NumericalError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    # the continued fraction converges fast only on one side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: float) -> float:
    """P(|T| >= t) for Student-t with dof degrees of freedom."""
    if dof <= 0:
        raise NumericalError(f"degrees of freedom must be positive, got {dof}")
    if math.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    return regularized_incomplete_beta(dof / 2.0, 0.5, x)


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_value: float
    n: int
    method: str

    def to_json_dict(self) -> dict:
        return to_jsonable(self.__dict__)


def pearson(x, y) -> CorrelationResult:
    """Pearson r with the exact two-sided t-test p-value.

    Raises UndefinedCorrelationError for fewer than two points or constant
    input; p is NaN when n < 3 (no degrees of freedom for the test).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError("correlation inputs must be 1-d arrays of equal length")
    n = len(x)
    if n < 2:
        raise UndefinedCorrelationError(f"need at least 2 points, got {n}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise UndefinedCorrelationError("correlation inputs contain non-finite values")
    xm = x - x.mean()
    ym = y - y.mean()
    sx = float(np.sqrt((xm ** 2).sum()))
    sy = float(np.sqrt((ym ** 2).sum()))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    r = float(xm @ ym) / (sx * sy)
    r = max(-1.0, min(1.0, r))
    if n < 3:
        p = float("nan")
    elif 1.0 - r * r <= 0.0:
        p = 0.0
    else:
        t = abs(r) * math.sqrt((n - 2) / (1.0 - r * r))
        p = student_t_two_sided_p(t, n - 2)
    return CorrelationResult(r, p, n, "pearson")


def spearman(x, y) -> CorrelationResult:
    """Rank correlation: Pearson over average ranks, t-based p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ConfigError("correlation inputs must be 1-d arrays of equal length")
    if len(x) and not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise UndefinedCorrelationError("correlation inputs contain non-finite values")
    base = pearson(average_ranks(x), average_ranks(y))
    return CorrelationResult(base.r, base.p_value, base.n, "spearman")


@dataclass
class RegressionFit:
    """Ordinary least squares y ~ intercept + X."""

    intercept: float
    coef: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray

    def to_json_dict(self) -> dict:
        return to_jsonable(self.__dict__)


def ols_fit(x, y) -> RegressionFit:
    """Least-squares fit with intercept; x may be (n,) or (n, k)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ConfigError("ols needs x of shape (n,) or (n, k) and y of shape (n,)")
    if len(y) < 2:
        raise ConfigError("ols needs at least 2 points")
    design = np.concatenate([np.ones((len(y), 1)), x], axis=1)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    fitted = design @ coef
    return RegressionFit(float(coef[0]), coef[1:], fitted, y - fitted)


@dataclass
class VarianceDecomposition:
    """Population variance of group means, split by label and score part.

    linear[y] and high_order[y] hold the variance over per-group means of
    the respective score component among samples with label y.
    """

    linear: tuple[float, float]
    high_order: tuple[float, float]

    def to_json_dict(self) -> dict:
        return to_jsonable({
            "linear": {"label_0": self.linear[0], "label_1": self.linear[1]},
            "high_order": {"label_0": self.high_order[0],
                           "label_1": self.high_order[1]},
        })


def variance_decomposition(ds: Dataset, parts: PredictionParts) -> VarianceDecomposition:
    """Variance over group means of the linear and high-order score parts.

    Computed separately for negative and positive samples; a label with
    fewer than two non-empty groups makes the variance meaningless and
    raises MetricError.
    """
    rows, groups = ds.bias_memberships()
    g = ds.schema.num_groups
    out = {"linear": [0.0, 0.0], "high_order": [0.0, 0.0]}
    for part_name, arr in (("linear", parts.linear), ("high_order", parts.high_order)):
        for y in (0, 1):
            mask = ds.labels[rows] == y
            counts = np.bincount(groups[mask], minlength=g)
            nonempty = counts > 0
            if int(nonempty.sum()) < 2:
                raise MetricError(
                    f"label {y}: fewer than two groups have samples, "
                    f"group-mean variance is undefined"
                )
            sums = np.bincount(groups[mask], weights=arr[rows[mask]], minlength=g)
            means = sums[nonempty] / counts[nonempty]
            out[part_name][y] = float(np.mean((means - means.mean()) ** 2))
    return VarianceDecomposition(tuple(out["linear"]), tuple(out["high_order"]))


@dataclass
class BiasChainReport:
    """Every link of the ratio -> weight -> prediction chain in one record."""

    group_labels: tuple[str, ...]
    train_stats: GroupStats
    bias_weights: np.ndarray
    weight_ratio_pearson: CorrelationResult | None
    weight_ratio_spearman: CorrelationResult | None
    score_ratio_pearson: CorrelationResult | None
    ehr_ratio_spearman: CorrelationResult | None
    variances: VarianceDecomposition | None
    weight_on_ratio_fit: RegressionFit | None
    errors: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        def maybe(v):
            return v.to_json_dict() if v is not None else None

        return {
            "group_labels": list(self.group_labels),
            "train_stats": self.train_stats.to_json_dict(),
            "bias_weights": to_jsonable(self.bias_weights),
            "weight_ratio_pearson": maybe(self.weight_ratio_pearson),
            "weight_ratio_spearman": maybe(self.weight_ratio_spearman),
            "score_ratio_pearson": maybe(self.score_ratio_pearson),
            "ehr_ratio_spearman": maybe(self.ehr_ratio_spearman),
            "variances": maybe(self.variances),
            "weight_on_ratio_fit": maybe(self.weight_on_ratio_fit),
            "errors": list(self.errors),
        }


def bias_chain_report(params: ModelParams, train_ds: Dataset,
                      eval_ds: Dataset | None = None) -> BiasChainReport:
    """Trace training-ratio bias through the weights into the scores.

    Weight and score correlations run against per-group training positive
    ratios; the variance decomposition and the exposure-hit-rate link use
    eval_ds when given. Undefined correlations are recorded, not raised.
    """
    from .evaluation import group_exposure_hit_rate
    from .models import predict

    stats = group_stats(train_ds)
    lo, hi = train_ds.schema.bias_range
    w_bias = params.w[lo:hi].copy()
    ratio = stats.ratio
    errors: list[str] = []

    defined = np.isfinite(ratio)
    if not defined.all():
        errors.append(f"{int((~defined).sum())} group(s) have no training exposure")

    def guarded(fn, x, y, label):
        try:
            return fn(np.asarray(x)[defined], np.asarray(y)[defined])
        except UndefinedCorrelationError as exc:
            errors.append(f"{label}: {exc}")
            return None

    wr_pearson = guarded(pearson, ratio, w_bias, "weight-vs-ratio pearson")
    wr_spearman = guarded(spearman, ratio, w_bias, "weight-vs-ratio spearman")

    rows, groups = train_ds.bias_memberships()
    probs = sigmoid(predict(params, train_ds.indices, train_ds.values))
    g = train_ds.schema.num_groups
    counts = np.bincount(groups, minlength=g).astype(np.float64)
    sums = np.bincount(groups, weights=probs[rows], minlength=g)
    with np.errstate(invalid="ignore"):
        mean_score = np.where(counts > 0, sums / counts, np.nan)
    sr_pearson = guarded(pearson, ratio, mean_score, "score-vs-ratio pearson")

    fit = None
    if defined.sum() >= 2:
        fit = ols_fit(ratio[defined], w_bias[defined])

    variances = None
    ehr_spearman = None
    if eval_ds is not None and len(eval_ds):
        parts = prediction_parts(params, eval_ds.indices, eval_ds.values,
                                 eval_ds.schema.bias_range)
        try:
            variances = variance_decomposition(eval_ds, parts)
        except MetricError as exc:
            errors.append(f"variance decomposition: {exc}")
        ehr = group_exposure_hit_rate(eval_ds, parts.logits)
        both = defined & np.isfinite(ehr)
        if both.sum() >= 2:
            try:
                ehr_spearman = spearman(ratio[both], ehr[both])
            except UndefinedCorrelationError as exc:
                errors.append(f"ehr-vs-ratio spearman: {exc}")
        else:
            errors.append("ehr-vs-ratio spearman: fewer than two measurable groups")

    return BiasChainReport(
        group_labels=train_ds.bias_labels,
        train_stats=stats,
        bias_weights=w_bias,
        weight_ratio_pearson=wr_pearson,
        weight_ratio_spearman=wr_spearman,
        score_ratio_pearson=sr_pearson,
        ehr_ratio_spearman=ehr_spearman,
        variances=variances,
        weight_on_ratio_fit=fit,
        errors=errors,
    )
