"""Agreement metrics, influence-pattern labels, training stages, flip detection."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, signal, stats

from .errors import ContractError, UndefinedCorrelationError

log = logging.getLogger(__name__)


# -- correlation metrics -------------------------------------------------------

def _pair(xs, ys, min_len=2):
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < min_len:
        raise ContractError(f"need at least {min_len} values")
    return x, y


def pearson(xs, ys) -> float:
    x, y = _pair(xs, ys)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("Pearson correlation undefined for zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks (handles ties)."""
    x, y = _pair(xs, ys)
    return pearson(stats.rankdata(x), stats.rankdata(y))


def kendall_tau(xs, ys) -> float:
    """Kendall's tau-b."""
    x, y = _pair(xs, ys)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("Kendall tau undefined when one side is all ties")
    tau = stats.kendalltau(x, y, variant="b").statistic
    if not math.isfinite(tau):
        raise UndefinedCorrelationError("Kendall tau undefined for these inputs")
    return float(tau)


def top_indices(values, fraction=0.3, direction="descending"):
    """Indices of the top ``ceil(fraction * n)`` entries; ties go to the smaller index."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if not 0 < fraction <= 1:
        raise ContractError("fraction must lie in (0, 1]")
    k = math.ceil(fraction * v.shape[0])
    if direction == "descending":
        key = -v
    elif direction == "ascending":
        key = v
    elif direction == "absolute":
        key = -np.abs(v)
    else:
        raise ContractError(f"unknown direction {direction!r}")
    return set(int(i) for i in np.argsort(key, kind="stable")[:k])


def jaccard_top(xs, ys, fraction=0.3, direction="descending") -> float:
    x, y = _pair(xs, ys, min_len=1)
    a = top_indices(x, fraction, direction)
    b = top_indices(y, fraction, direction)
    return len(a & b) / len(a | b)


METRICS = {
    "pearson": pearson,
    "spearman": spearman,
    "kendall": kendall_tau,
    "jaccard": jaccard_top,
}


def agreement(estimate, truth) -> dict:
    """All four metrics of an estimate against ground truth."""
    return {name: fn(estimate, truth) for name, fn in METRICS.items()}


# -- influence patterns -----------------------------------------------------------

class PatternLabel(str, enum.Enum):
    STABLE = "StableInfluencer"
    EARLY = "EarlyInfluencer"
    LATE = "LateBloomer"
    FLUCTUATING = "HighlyFluctuating"


@dataclass
class InfluenceSeries:
    """Samples x epochs matrix of influence values."""

    values: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.sample_ids = np.asarray(self.sample_ids)
        if self.values.ndim != 2 or self.values.shape[0] != self.sample_ids.shape[0]:
            raise ContractError("series must be a samples x epochs matrix matching sample_ids")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("series values must be finite")

    @property
    def n_epochs(self):
        return self.values.shape[1]


def standardize_columns(values):
    """Per-epoch z-score across samples (sample std); zero-variance columns become zeros."""
    v = np.asarray(values, dtype=np.float64)
    out = np.zeros_like(v)
    for e in range(v.shape[1]):
        col = v[:, e]
        sd = col.std(ddof=1) if col.shape[0] > 1 else 0.0
        if sd == 0.0:
            log.warning("epoch column %d has no spread across samples; standardized to zeros", e)
            continue
        out[:, e] = (col - col.mean()) / sd
    return out


def trend(series_row):
    """OLS slope of values on epoch index and its two-sided p-value."""
    yv = np.asarray(series_row, dtype=np.float64)
    n = yv.shape[0]
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    sxx = float(tc @ tc)
    slope = float(tc @ (yv - yv.mean())) / sxx
    resid = yv - yv.mean() - slope * tc
    dof = n - 2
    sse = float(resid @ resid)
    if slope == 0.0:
        return 0.0, 1.0
    if sse <= 1e-24 * max(1.0, float(yv @ yv)):
        return slope, 0.0
    se = math.sqrt(sse / dof / sxx)
    tstat = slope / se
    return slope, float(2.0 * stats.t.sf(abs(tstat), dof))


def classify_patterns(series: InfluenceSeries, p_threshold=0.05, fluct_threshold=1.0):
    """Label every sample's trajectory; returns ``(labels, standardized)``.

    ``labels`` maps sample id to :class:`PatternLabel`. A significant
    negative trend is an early influencer, a significant positive trend a
    late bloomer; otherwise a per-sample std above ``fluct_threshold`` marks
    high fluctuation and everything else is stable.
    """
    if series.n_epochs < 3:
        raise ContractError("pattern classification needs at least 3 epochs")
    z = standardize_columns(series.values)
    labels = {}
    for sid, row in zip(series.sample_ids, z):
        slope, p = trend(row)
        if p < p_threshold and slope < 0:
            label = PatternLabel.EARLY
        elif p < p_threshold and slope > 0:
            label = PatternLabel.LATE
        elif row.std(ddof=1) > fluct_threshold:
            label = PatternLabel.FLUCTUATING
        else:
            label = PatternLabel.STABLE
        labels[sid.item() if hasattr(sid, "item") else sid] = label
    return labels, z


def pattern_distribution(labels) -> dict:
    """Percentage of samples per label (all four labels present)."""
    n = len(labels)
    counts = {lab: 0 for lab in PatternLabel}
    for lab in labels.values():
        counts[lab] += 1
    return {lab.value: 100.0 * c / n for lab, c in counts.items()}


def pattern_centroids(labels, standardized, sample_ids) -> dict:
    out = {}
    ids = list(sample_ids.tolist() if hasattr(sample_ids, "tolist") else sample_ids)
    for lab in PatternLabel:
        rows = [standardized[i] for i, sid in enumerate(ids) if labels[sid] == lab]
        if rows:
            out[lab.value] = np.mean(rows, axis=0)
    return out


# -- training stages ----------------------------------------------------------------

@dataclass(frozen=True)
class StageSplit:
    """Two boundaries dividing ``[0, total]`` into early, middle and late stages."""

    b1: int
    b2: int
    total: int
    fallback: bool = False

    def __post_init__(self):
        if not 0 < self.b1 < self.b2 < self.total:
            raise ContractError(f"stage boundaries ({self.b1}, {self.b2}) must satisfy 0 < b1 < b2 < {self.total}")

    def windows(self, scale=1):
        """(early, middle, late, full) as step ranges, boundaries multiplied by ``scale``."""
        b1, b2, T = self.b1 * scale, self.b2 * scale, self.total * scale
        return (0, b1), (b1, b2), (b2, T), (0, T)


def equal_thirds(total):
    b1 = max(1, round(total / 3))
    b2 = max(b1 + 1, round(2 * total / 3))
    return StageSplit(b1, b2, total, fallback=True)


def fit_exponential(curve):
    """Least-squares ``a exp(-b t) + c``: grid over ``b`` with closed-form ``(a, c)``, then refinement."""
    yv = np.asarray(curve, dtype=np.float64)
    t = np.arange(yv.shape[0], dtype=np.float64)

    def solve(b):
        A = np.column_stack([np.exp(-b * t), np.ones_like(t)])
        coef, *_ = np.linalg.lstsq(A, yv, rcond=None)
        r = yv - A @ coef
        return float(r @ r), coef

    grid = np.logspace(-3, 1, 200) * (10.0 / max(1, yv.shape[0] - 1))
    sse = [solve(b)[0] for b in grid]
    k = int(np.argmin(sse))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(lambda b: solve(b)[0], bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-10})
        b = float(res.x) if res.fun <= sse[k] else float(grid[k])
    else:
        b = float(grid[k])
    _, (a, c) = solve(b)
    return float(a), b, float(c)


def segment_stages(loss_curve, rel_tol=1e-6) -> StageSplit:
    """Split epochs at the two largest peaks of |loss - exponential fit|.

    Peaks must be at least ``ceil(E/4)`` epochs apart; among equal peaks the
    earlier epoch wins. Falls back to equal thirds when the loss never
    decreases, the fit leaves no residual structure, or fewer than two peaks
    exist.
    """
    yv = np.asarray(loss_curve, dtype=np.float64)
    E = yv.shape[0]
    if E < 6:
        raise ContractError("stage segmentation needs at least 6 epochs")
    if np.all(np.diff(yv) >= 0):
        log.warning("loss curve never decreases; using equal thirds")
        return equal_thirds(E)
    a, b, c = fit_exponential(yv)
    resid = np.abs(yv - (a * np.exp(-b * np.arange(E)) + c))
    scale = float(np.ptp(yv)) or 1.0
    if resid.max() <= rel_tol * scale:
        log.warning("loss curve matches the exponential fit; using equal thirds")
        return equal_thirds(E)
    min_sep = math.ceil(E / 4)
    # interior local maxima only; plateaus report their middle sample
    peaks, _ = signal.find_peaks(resid)
    order = sorted(peaks.tolist(), key=lambda i: (-resid[i], i))
    chosen = []
    for i in order:
        if all(abs(i - c0) >= min_sep for c0 in chosen):
            chosen.append(i)
        if len(chosen) == 2:
            break
    if len(chosen) < 2:
        log.warning("fewer than two separated residual peaks; using equal thirds")
        return equal_thirds(E)
    b1, b2 = sorted(chosen)
    return StageSplit(b1, b2, E)


STAGE_PAIRS = (
    ("Early-Middle", 0, 1),
    ("Early-Late", 0, 2),
    ("Middle-Late", 1, 2),
    ("Early-Full", 0, 3),
    ("Middle-Full", 1, 3),
    ("Late-Full", 2, 3),
)


def stage_correlation_table(trajectory, dataset, q, stages: StageSplit, steps_per_unit=1) -> dict:
    """Kendall tau between per-stage DIT influence rankings (six stage pairs)."""
    from .dit import TimeWindow, influence_vector

    if len(dataset) < 2:
        raise UndefinedCorrelationError("stage correlations need at least two samples")
    infl = [influence_vector(trajectory, dataset, q, TimeWindow(*w))
            for w in stages.windows(steps_per_unit)]
    return {name: kendall_tau(infl[a], infl[b]) for name, a, b in STAGE_PAIRS}


# -- flipped-label detection ----------------------------------------------------------

def most_negative(values, k):
    """Indices of the ``k`` smallest values; ties go to the smaller index."""
    v = np.asarray(values, dtype=np.float64)
    return [int(i) for i in np.argsort(v, kind="stable")[:k]]


def evaluate_detection(influences, flips) -> int:
    """How many flipped samples rank among the ``k = |flips|`` most negative influences.

    ``influences`` is a list of InfluenceRecord (one per sample) or a plain
    vector indexed by sample.
    """
    if len(influences) and hasattr(influences[0], "Q"):
        n = len(influences)
        by_j = {r.j: r.Q for r in influences}
        if sorted(by_j) != list(range(n)):
            raise ContractError("need exactly one influence per sample 0..N-1")
        values = np.array([by_j[i] for i in range(n)])
    else:
        values = np.asarray(influences, dtype=np.float64)
    flipped = set(flips.flipped_indices)
    if any(not 0 <= i < len(values) for i in flipped):
        raise ContractError("flip record references samples without an influence value")
    k = len(flipped)
    if k == 0:
        return 0
    return len(set(most_negative(values, k)) & flipped)
