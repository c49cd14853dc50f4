"""Human-score aggregation, model rankings, correlation and agreement statistics."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

from .corpus import AGGREGATE_ID, Dataset, Direction, Grade, HumanRating, ScoreMatrix

HUMAN_METRIC = "human"

_GRADE_SCORES = {Grade.A: 1, Grade.B: 2, Grade.C: 3, Grade.D: 4}


class UndefinedStatistic(ValueError):
    """A statistic whose denominator vanishes for the given input."""


def grade_to_score(grade: Grade | str) -> int:
    """A=1 ... D=4; lower is better."""
    return _GRADE_SCORES[Grade(grade)]


# ---------------------------------------------------------------------------
# aggregation + ranking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelMeans:
    means: dict[str, float]
    n_scored: dict[str, int]
    n_unscored: dict[str, int] = field(default_factory=dict)


def mean_score_per_model(
    scores: Mapping[str, Mapping[str, float | None]],
    *,
    expected_records: Iterable[str] | None = None,
) -> ModelMeans:
    """Average each model's scored records.

    ``None`` values, and records listed in ``expected_records`` but absent for
    a model, count as unscored.  A ``"*"`` entry is taken as a precomputed
    model mean and used as-is.
    """
    expected = list(expected_records) if expected_records is not None else None
    means: dict[str, float] = {}
    n_scored: dict[str, int] = {}
    n_unscored: dict[str, int] = {}
    for model in sorted(scores):
        per_record = scores[model]
        if AGGREGATE_ID in per_record:
            if len(per_record) > 1:
                raise ValueError(f"model {model!r} mixes an aggregate with per-record scores")
            agg = per_record[AGGREGATE_ID]
            if agg is None:
                raise ValueError(f"model {model!r} has no scored records")
            means[model] = float(agg)
            n_scored[model] = 1
            n_unscored[model] = 0
            continue
        vals = [v for v in per_record.values() if v is not None]
        missing = sum(1 for v in per_record.values() if v is None)
        if expected is not None:
            missing += sum(1 for rid in expected if rid not in per_record)
        if not vals:
            raise ValueError(f"model {model!r} has no scored records")
        means[model] = math.fsum(vals) / len(vals)
        n_scored[model] = len(vals)
        n_unscored[model] = missing
    return ModelMeans(means, n_scored, n_unscored)


def human_scores(ratings: Iterable[HumanRating]) -> dict[str, dict[str, float]]:
    """Per (model, record) human score; several annotators on one pair are averaged."""
    buckets: dict[tuple[str, str], list[int]] = defaultdict(list)
    for r in ratings:
        buckets[(r.model_id, r.record_id)].append(grade_to_score(r.grade))
    out: dict[str, dict[str, float]] = {}
    for (model, rid), vals in sorted(buckets.items()):
        out.setdefault(model, {})[rid] = math.fsum(vals) / len(vals)
    return out


def human_means(ratings: Iterable[HumanRating]) -> dict[str, float]:
    return mean_score_per_model(human_scores(ratings)).means


def grade_distribution(ratings: Iterable[HumanRating]) -> dict[str, dict[str, float]]:
    """Share of each grade per model (the proportions behind a stacked bar chart)."""
    counts: dict[str, Counter[str]] = defaultdict(Counter)
    for r in ratings:
        counts[r.model_id][Grade(r.grade).value] += 1
    out = {}
    for model in sorted(counts):
        total = sum(counts[model].values())
        out[model] = {g.value: counts[model][g.value] / total for g in Grade}
    return out


@dataclass(frozen=True)
class RankedModel:
    model_id: str
    mean_score: float
    rank: int
    tied: bool = False


@dataclass(frozen=True)
class ModelRanking:
    metric_id: str
    direction: Direction
    rows: tuple[RankedModel, ...]

    def ranks(self) -> dict[str, int]:
        return {r.model_id: r.rank for r in self.rows}

    @property
    def has_ties(self) -> bool:
        return any(r.tied for r in self.rows)


def rank_models(
    means: Mapping[str, float],
    direction: Direction | str,
    metric_id: str = "",
) -> ModelRanking:
    """Rank 1 is best.  Exact ties are ordered by model id and flagged."""
    direction = Direction(direction)
    if not means:
        raise ValueError("nothing to rank")
    sign = 1.0 if direction is Direction.LOWER_BETTER else -1.0
    order = sorted(means, key=lambda m: (sign * means[m], m))
    value_counts = Counter(means.values())
    rows = tuple(
        RankedModel(m, means[m], i, value_counts[means[m]] > 1) for i, m in enumerate(order, start=1)
    )
    return ModelRanking(metric_id, direction, rows)


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------


def _check_pair(x: Sequence[float], y: Sequence[float]) -> int:
    n = len(x)
    if n != len(y):
        raise ValueError(f"length mismatch: {n} vs {len(y)}")
    if n < 2:
        raise ValueError("need at least two observations")
    return n


def _tie_pairs(values: Sequence[float]) -> int:
    return sum(c * (c - 1) // 2 for c in Counter(values).values())


def _merge_count_swaps(a: list[float]) -> int:
    """Sort ``a`` in place (merge sort) and return the number of inversions."""
    n = len(a)
    swaps = 0
    width = 1
    buf = a[:]
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    buf[k] = a[j]
                    swaps += mid - i
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            buf[k : k + mid - i] = a[i:mid]
            k += mid - i
            buf[k : k + hi - j] = a[j:hi]
        a[:], buf[:] = buf[:], a[:]
        width *= 2
    return swaps


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Tie-corrected Kendall rank correlation, O(n log n) (Knight's algorithm)."""
    n = _check_pair(x, y)
    pairs = sorted(zip(x, y))
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(x)
    n2 = _tie_pairs(y)
    # pairs tied in both x and y
    n3 = _tie_pairs(pairs)
    if n1 == n0 or n2 == n0:
        raise UndefinedStatistic("Kendall tau_b is undefined when one side is constant")
    ys = [p[1] for p in pairs]
    discordant = _merge_count_swaps(ys)
    # C - D = n0 - n1 - n2 + n3 - 2D
    s = n0 - n1 - n2 + n3 - 2 * discordant
    tau = s / math.sqrt((n0 - n1) * (n0 - n2))
    return max(-1.0, min(1.0, tau))


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    n = _check_pair(x, y)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedStatistic("Pearson r is undefined for a zero-variance input")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


@dataclass(frozen=True)
class MetricCorrelation:
    metric_id: str
    tau: float | None
    r: float | None
    models: tuple[str, ...]
    excluded_models: tuple[str, ...] = ()
    unscored_records: int = 0

    @property
    def reported_tau(self) -> float | None:
        return None if self.tau is None else abs(self.tau)

    @property
    def reported_r(self) -> float | None:
        return None if self.r is None else abs(self.r)


@dataclass(frozen=True)
class CorrelationReport:
    metrics: dict[str, MetricCorrelation]

    def __getitem__(self, metric_id: str) -> MetricCorrelation:
        return self.metrics[metric_id]

    def __iter__(self):
        return iter(self.metrics.values())

    def sorted_rows(self) -> list[MetricCorrelation]:
        """Rows by decreasing reported tau, then reported r, then metric id; undefined values sort last."""

        def key(c: MetricCorrelation):
            t, r = c.reported_tau, c.reported_r
            return (t is None, -(t or 0.0), r is None, -(r or 0.0), c.metric_id)

        return sorted(self.metrics.values(), key=key)


MIN_MODELS = 3


def _or_none(stat, xs: Sequence[float], ys: Sequence[float]) -> float | None:
    try:
        return stat(xs, ys)
    except UndefinedStatistic:
        return None


def correlation_report(
    human: Mapping[str, float],
    matrix: ScoreMatrix,
    exclusions: Mapping[str, Iterable[str]] | None = None,
    *,
    metrics: Iterable[str] | None = None,
    min_models: int = MIN_MODELS,
    unscored: Mapping[str, int] | None = None,
) -> CorrelationReport:
    """Correlate each metric's per-model means with the human per-model means.

    Signed statistics are kept; absolute values are exposed as ``reported_*``.
    A statistic that is undefined for the data (a constant side) is ``None``.
    ``unscored`` adds per-metric counts of pairs dropped before the matrix was
    built (e.g. unparseable judge replies) to the disclosed totals.
    """
    exclusions = exclusions or {}
    unscored = unscored or {}
    metric_ids = list(metrics) if metrics is not None else [m for m in matrix.metrics if m != HUMAN_METRIC]
    out: dict[str, MetricCorrelation] = {}
    for metric in metric_ids:
        agg = mean_score_per_model(matrix.slice(metric))
        excluded = set(exclusions.get(metric, ()))
        models = sorted(m for m in agg.means if m in human and m not in excluded)
        if len(models) < min_models:
            raise ValueError(
                f"metric {metric!r}: only {len(models)} models shared with human scores (need {min_models})"
            )
        xs = [human[m] for m in models]
        ys = [agg.means[m] for m in models]
        out[metric] = MetricCorrelation(
            metric_id=metric,
            tau=_or_none(kendall_tau_b, xs, ys),
            r=_or_none(pearson_r, xs, ys),
            models=tuple(models),
            excluded_models=tuple(sorted(excluded)),
            unscored_records=sum(agg.n_unscored.get(m, 0) for m in models) + unscored.get(metric, 0),
        )
    return CorrelationReport(out)


@dataclass(frozen=True)
class GroupCorrelation:
    group: str
    n_instances: int
    tau: dict[str, float | None]


def per_group_correlation(
    records: Dataset,
    matrix: ScoreMatrix,
    human: Iterable[HumanRating],
    *,
    models: Sequence[str],
    min_instances: int = 6,
    exclusions: Mapping[str, Iterable[str]] | None = None,
    metrics: Iterable[str] | None = None,
) -> dict[str, GroupCorrelation]:
    """Kendall tau_b per task group between per-model human and metric means.

    A group qualifies when at least ``min_instances`` of its records carry a
    human score for every model in ``models``.  Values are absolute; ``None``
    marks a group where tau_b is undefined (e.g. all models tied).
    """
    exclusions = exclusions or {}
    hs = human_scores(human)
    metric_ids = list(metrics) if metrics is not None else [m for m in matrix.metrics if m != HUMAN_METRIC]
    slices = {m: matrix.slice(m) for m in metric_ids}
    groups: dict[str, list[str]] = defaultdict(list)
    for rec in records:
        groups[rec.task_group].append(rec.record_id)

    out: dict[str, GroupCorrelation] = {}
    for group in sorted(groups):
        rids = [rid for rid in groups[group] if all(rid in hs.get(m, {}) for m in models)]
        if len(rids) < min_instances:
            continue
        taus: dict[str, float | None] = {}
        for metric in metric_ids:
            excluded = set(exclusions.get(metric, ()))
            use = [m for m in models if m not in excluded]
            xs, ys = [], []
            for m in use:
                vals = [slices[metric].get(m, {}).get(rid) for rid in rids]
                vals = [v for v in vals if v is not None]
                if not vals:
                    break
                xs.append(math.fsum(hs[m][rid] for rid in rids) / len(rids))
                ys.append(math.fsum(vals) / len(vals))
            if len(xs) != len(use) or len(use) < 2:
                taus[metric] = None
                continue
            try:
                taus[metric] = abs(kendall_tau_b(xs, ys))
            except UndefinedStatistic:
                taus[metric] = None
        out[group] = GroupCorrelation(group, len(rids), taus)
    if not out:
        raise ValueError(f"no task group has at least {min_instances} fully rated instances")
    return out


# ---------------------------------------------------------------------------
# agreement
# ---------------------------------------------------------------------------


def cohen_kappa(a: Sequence[Grade | str], b: Sequence[Grade | str]) -> float:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    if n == 0:
        raise ValueError("no shared annotations")
    ga = [Grade(g) for g in a]
    gb = [Grade(g) for g in b]
    p_o = sum(1 for x, y in zip(ga, gb) if x == y) / n
    ca, cb = Counter(ga), Counter(gb)
    p_e = math.fsum(ca[g] * cb[g] for g in Grade) / (n * n)
    if p_e == 1.0:
        raise UndefinedStatistic("kappa undefined: both annotators used one identical grade throughout")
    return (p_o - p_e) / (1 - p_e)


def shared_annotations(
    ratings: Iterable[HumanRating], annotator_a: str, annotator_b: str
) -> tuple[list[Grade], list[Grade]]:
    """Grades from two annotators on the (model, record) pairs both rated, in sorted key order."""
    a: dict[tuple[str, str], Grade] = {}
    b: dict[tuple[str, str], Grade] = {}
    for r in ratings:
        if r.annotator_id == annotator_a:
            a[(r.model_id, r.record_id)] = r.grade
        elif r.annotator_id == annotator_b:
            b[(r.model_id, r.record_id)] = r.grade
    keys = sorted(a.keys() & b.keys())
    return [a[k] for k in keys], [b[k] for k in keys]
