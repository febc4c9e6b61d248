"""Metric kernels: overlap ratio, nDCG@k, HR@k, RMSE, JSD, and run aggregation."""

from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

NORMALIZATION_TOL = 1e-9


def _check_range(value: float, lo: float = 0.0, hi: float | None = 1.0) -> float:
    # clamp float dust, then assert
    if lo - 1e-12 <= value < lo:
        value = lo
    if hi is not None and hi < value <= hi + 1e-12:
        value = hi
    assert value >= lo and (hi is None or value <= hi), value
    return value


def overlap_ratio(selected: Iterable[Hashable], positives: Iterable[Hashable]) -> float:
    positives = set(positives)
    if not positives:
        raise ValueError("overlap_ratio needs at least one positive item")
    return _check_range(len(set(selected) & positives) / len(positives))


def _rank(permutation: Sequence[Hashable], positive: Hashable) -> int:
    try:
        return list(permutation).index(positive) + 1
    except ValueError:
        raise ValueError(f"positive item {positive!r} not in permutation") from None


def ndcg_at_k(permutation: Sequence[Hashable], positive: Hashable, k: int) -> float:
    """Single-relevant-item nDCG (ideal DCG is 1)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _rank(permutation, positive)
    return _check_range(1.0 / math.log2(r + 1) if r <= k else 0.0)


def hit_rate_at_k(permutation: Sequence[Hashable], positive: Hashable, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(_rank(permutation, positive) <= k)


def rmse(predictions: Mapping[Hashable, float], truths: Mapping[Hashable, float]) -> float:
    if not truths:
        raise ValueError("rmse of an empty set")
    if set(predictions) != set(truths):
        raise ValueError("predictions and truths cover different items")
    mse = sum((predictions[i] - truths[i]) ** 2 for i in truths) / len(truths)
    return _check_range(math.sqrt(mse), hi=None)


def _validate_distribution(p: Sequence[float], name: str) -> None:
    if any(x < 0 for x in p):
        raise ValueError(f"{name} has negative entries")
    if abs(math.fsum(p) - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"{name} does not sum to 1 (sum={math.fsum(p)!r})")


def _kl2_to_mid(p: Sequence[float], q: Sequence[float]) -> float:
    # KL(p || (p+q)/2); p/m is taken as 2p/(p+q) so a subnormal mid-point cannot underflow to 0
    return math.fsum(pi * math.log2(2 * pi / (pi + qi)) for pi, qi in zip(p, q) if pi > 0)


def jsd(p: Sequence[float], q: Sequence[float]) -> float:
    """Base-2 Jensen-Shannon divergence, in [0, 1]."""
    if len(p) != len(q):
        raise ValueError("distributions differ in length")
    _validate_distribution(p, "p")
    _validate_distribution(q, "q")
    if list(p) == list(q):
        return 0.0
    # symmetric by construction: sum the two halves in sorted order
    halves = sorted((_kl2_to_mid(p, q), _kl2_to_mid(q, p)))
    return _check_range(0.5 * halves[0] + 0.5 * halves[1])


def scale_points(scale: tuple[float, float]) -> list[int]:
    lo, hi = scale
    return list(range(int(math.ceil(lo)), int(math.floor(hi)) + 1))


def _bin(value: float, points: list[int]) -> int:
    # round half up, then clamp onto the scale
    v = int(math.floor(value + 0.5))
    return min(max(v, points[0]), points[-1])


def _histogram(values: Iterable[float], points: list[int]) -> list[float]:
    counts = {p: 0 for p in points}
    n = 0
    for v in values:
        counts[_bin(v, points)] += 1
        n += 1
    return [counts[p] / n for p in points]


def macro_rating_jsd(
    predictions: Mapping[Hashable, float],
    truths: Mapping[Hashable, float],
    scale: tuple[float, float] = (1, 5),
    mode: str = "per_group",
) -> float:
    """Distribution-level rating divergence.

    ``per_group``: items are grouped by ground-truth value g; each group's
    histogram of predicted ratings is compared with the point mass at g and
    the per-group JSDs are averaged without weights. ``global``: one JSD
    between the pooled predicted and pooled true histograms. Predictions are
    binned to the nearest scale point.
    """
    if not truths:
        raise ValueError("macro_rating_jsd of an empty set")
    if set(predictions) != set(truths):
        raise ValueError("predictions and truths cover different items")
    points = scale_points(scale)
    if mode == "global":
        return jsd(_histogram(predictions.values(), points), _histogram(truths.values(), points))
    if mode != "per_group":
        raise ValueError(f"unknown macro JSD mode {mode!r}")
    groups: dict[int, list[float]] = {}
    for item, t in truths.items():
        groups.setdefault(_bin(t, points), []).append(predictions[item])
    values = []
    for g in sorted(groups):
        point_mass = [1.0 if p == g else 0.0 for p in points]
        values.append(jsd(_histogram(groups[g], points), point_mass))
    return _check_range(math.fsum(values) / len(values))


@dataclass
class MetricReport:
    metric: str
    per_run: list[float]
    mean: float
    std: float
    n_runs: int
    config_digest: str = ""
    failures: int = 0
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return asdict(self)


def aggregate_runs(per_run: Sequence[float], metric: str = "", **kwargs) -> MetricReport:
    values = [float(v) for v in per_run]
    if not values:
        raise ValueError("aggregate_runs needs at least one run")
    mean = math.fsum(values) / len(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return MetricReport(metric, values, mean, std, len(values), **kwargs)


# direction used by reports when flagging best/second-best
LOWER_IS_BETTER = frozenset({"rmse", "jsd"})
