"""Negative samplers and robustness probes (position, popularity, isolated attributes)."""

from __future__ import annotations

import bisect
import logging
import math
import random
from dataclasses import dataclass, field, replace
from typing import Sequence

from .data import ItemStats, SplitDataset
from .errors import ConfigError, SamplingError
from .seeds import derive_seed
from .tasks import (
    ATTRIBUTES,
    SkipInstance,
    TaskInstance,
    build_discrimination_instance,
)

logger = logging.getLogger(__name__)

SAMPLER_KINDS = ("uniform", "debias", "popularity_stratified")


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "uniform"
    popularity_tolerance: float = 0.10
    rating_tolerance: float = 0.25
    max_resamples: int = 200
    # popularity_stratified only: which end of the popularity ranking to draw from
    stratum: str = "head"
    stratum_fraction: float = 0.2
    strict: bool = False

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler kind {self.kind!r}")
        if self.popularity_tolerance <= 0 or self.rating_tolerance <= 0:
            raise ConfigError("sampler tolerances must be positive")
        if self.max_resamples < 0:
            raise ConfigError("max_resamples must be >= 0")
        if self.stratum not in ("head", "tail"):
            raise ConfigError("stratum must be 'head' or 'tail'")
        if not 0 < self.stratum_fraction <= 1:
            raise ConfigError("stratum_fraction must lie in (0, 1]")

    @property
    def label(self) -> str:
        if self.kind == "popularity_stratified":
            return f"popularity_{self.stratum}"
        return self.kind


@dataclass
class SampleResult:
    items: list[str]
    warning: bool = False
    mean_popularity: float | None = None
    mean_rating: float | None = None


def uniform_negatives(universe: Sequence[str], k: int, rng: random.Random) -> list[str]:
    if k < 0:
        raise ValueError("k must be >= 0")
    if len(universe) < k:
        raise SamplingError(f"universe of {len(universe)} items cannot supply {k} negatives")
    return rng.sample(list(universe), k)


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def within_tolerance(
    neg_pop: float, neg_rating: float, pos_pop: float, pos_rating: float, spec: SamplerSpec
) -> bool:
    return (
        abs(neg_pop - pos_pop) <= spec.popularity_tolerance * pos_pop
        and abs(neg_rating - pos_rating) <= spec.rating_tolerance
    )


def _rating_bin(r: float) -> int:
    return int(math.floor(r * 2 + 1e-9))


class _Buckets:
    """Universe partitioned into popularity deciles x half-star rating bins."""

    def __init__(self, universe: Sequence[str], stats: ItemStats):
        self.stats = stats
        pops = sorted(stats.popularity.get(i, 0) for i in universe)
        # decile edges over the universe's own popularity distribution
        self.edges = [pops[min(len(pops) - 1, (len(pops) * q) // 10)] for q in range(1, 10)] if pops else []
        self.by_pop = sorted(universe, key=lambda i: (stats.popularity.get(i, 0), i))
        self.sorted_pops = [stats.popularity.get(i, 0) for i in self.by_pop]
        self.cells: dict[tuple[int, int], list[str]] = {}
        for iid in universe:
            self.cells.setdefault(self.key(iid), []).append(iid)

    def decile(self, pop: float) -> int:
        return bisect.bisect_right(self.edges, pop)

    def key_for(self, pop: float, rating: float) -> tuple[int, int]:
        return self.decile(pop), _rating_bin(rating)

    def key(self, iid: str) -> tuple[int, int]:
        return self.key_for(self.stats.popularity.get(iid, 0), self.stats.mean_rating[iid])

    def nearest(
        self, need_pop: float, need_rat: float, pop_scale: float, rat_scale: float, exclude: set[str], rng: random.Random
    ) -> str | None:
        """Random pick among the three unexcluded items closest to (need_pop, need_rat)."""
        idx = bisect.bisect_left(self.sorted_pops, need_pop)
        lo, hi = max(0, idx - 40), idx + 40
        window = [i for i in self.by_pop[lo:hi] if i not in exclude]
        if not window:
            return None
        dist = lambda i: (  # noqa: E731
            abs(self.stats.popularity.get(i, 0) - need_pop) / pop_scale
            + abs(self.stats.mean_rating[i] - need_rat) / rat_scale
        )
        window.sort(key=lambda i: (dist(i), i))
        return rng.choice(window[:3])

    def draw(self, target: tuple[int, int], exclude: set[str], rng: random.Random) -> str | None:
        ordered = sorted(self.cells, key=lambda k: (abs(k[0] - target[0]) + abs(k[1] - target[1]), k))
        for key in ordered:
            pool = [i for i in self.cells[key] if i not in exclude]
            if pool:
                return rng.choice(pool)
        return None


def debias_negatives(
    positives: Sequence[str],
    universe: Sequence[str],
    stats: ItemStats,
    k: int,
    spec: SamplerSpec = SamplerSpec(kind="debias"),
    rng: random.Random | None = None,
) -> SampleResult:
    """Negatives whose mean popularity and mean rating match the positives'.

    Each negative is first drawn from the popularity-decile x rating-bin cell
    of a positive (round robin). While the set misses the tolerances, one
    member is swapped for a proposal near the value that would close the gap
    (alternating a draw from the nearest cell with one of the closest items
    by exact popularity and rating); a swap is kept only if it shrinks the normalised
    deviation. After ``max_resamples`` swaps the best set found is returned
    with ``warning=True`` (or raised in strict mode).
    """
    rng = rng or random.Random(0)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return SampleResult([])
    universe = [i for i in universe if i not in set(positives)]
    if len(universe) < k:
        raise SamplingError(f"universe of {len(universe)} items cannot supply {k} negatives")
    if not positives:
        raise SamplingError("debias sampling needs at least one positive")

    pop = lambda i: float(stats.popularity.get(i, 0))  # noqa: E731
    rat = lambda i: float(stats.mean_rating[i])  # noqa: E731
    target_pop = _mean([pop(i) for i in positives])
    target_rat = _mean([rat(i) for i in positives])
    pop_scale = max(spec.popularity_tolerance * target_pop, 1e-9)

    def deviation(chosen: list[str]) -> float:
        dp = abs(_mean([pop(i) for i in chosen]) - target_pop) / pop_scale
        dr = abs(_mean([rat(i) for i in chosen]) - target_rat) / spec.rating_tolerance
        return max(dp, dr)

    buckets = _Buckets(universe, stats)
    chosen: list[str] = []
    taken: set[str] = set()
    for j in range(k):
        anchor = positives[j % len(positives)]
        iid = buckets.draw(buckets.key_for(pop(anchor), rat(anchor)), taken, rng)
        chosen.append(iid)
        taken.add(iid)

    best = deviation(chosen)
    for attempt in range(spec.max_resamples):
        if best <= 1.0:
            break
        slot = rng.randrange(k)
        rest = [i for n, i in enumerate(chosen) if n != slot]
        need_pop = target_pop * k - sum(pop(i) for i in rest)
        need_rat = target_rat * k - sum(rat(i) for i in rest)
        # alternate coarse cell draws with exact nearest-value proposals
        if attempt % 2 == 0:
            cand = buckets.draw(buckets.key_for(need_pop, need_rat), taken, rng)
        else:
            cand = buckets.nearest(need_pop, need_rat, pop_scale, spec.rating_tolerance, taken, rng)
        if cand is None:
            break
        trial = list(chosen)
        trial[slot] = cand
        score = deviation(trial)
        if score < best:
            taken.discard(chosen[slot])
            taken.add(cand)
            chosen, best = trial, score

    mean_p = _mean([pop(i) for i in chosen])
    mean_r = _mean([rat(i) for i in chosen])
    ok = within_tolerance(mean_p, mean_r, target_pop, target_rat, spec)
    if not ok:
        msg = (
            f"de-bias tolerances unmet: popularity {mean_p:.2f} vs {target_pop:.2f}, "
            f"rating {mean_r:.3f} vs {target_rat:.3f}"
        )
        if spec.strict:
            raise SamplingError(msg)
        logger.warning(msg)
    return SampleResult(chosen, not ok, mean_p, mean_r)


def stratified_negatives(
    universe: Sequence[str], stats: ItemStats, k: int, spec: SamplerSpec, rng: random.Random
) -> SampleResult:
    ranked = sorted(universe, key=lambda i: (-stats.popularity.get(i, 0), i))
    n = max(k, math.ceil(len(ranked) * spec.stratum_fraction))
    pool = ranked[:n] if spec.stratum == "head" else ranked[-n:]
    return SampleResult(uniform_negatives(pool, k, rng))


class NegativeSampler:
    """Adapter giving every sampler kind the ``sample(positives, universe, k, rng)`` shape."""

    def __init__(self, spec: SamplerSpec, stats: ItemStats | None = None):
        if spec.kind != "uniform" and stats is None:
            raise ConfigError(f"{spec.kind} sampling needs item statistics")
        self.spec = spec
        self.stats = stats

    def sample(self, positives, universe, k, rng) -> SampleResult:
        if self.spec.kind == "uniform":
            return SampleResult(uniform_negatives(universe, k, rng))
        if self.spec.kind == "debias":
            return debias_negatives(positives, universe, self.stats, k, self.spec, rng)
        return stratified_negatives(universe, self.stats, k, self.spec, rng)


# ------------------------------------------------------------------ probes

def position_probe(instance: TaskInstance, positions: Sequence[int]) -> list[TaskInstance]:
    """One variant per 1-based position with the positive placed exactly there."""
    if instance.kind != "ranking":
        raise ConfigError("the position probe applies to ranking instances")
    c = len(instance.candidates)
    bad = [p for p in positions if not 1 <= p <= c]
    if bad:
        raise ConfigError(f"positions {bad} outside [1, {c}]")
    pos_idx = instance.candidates.index(instance.positive)
    others = [i for i in instance.presentation_order if i != pos_idx]
    variants = []
    for p in positions:
        order = others[: p - 1] + [pos_idx] + others[p - 1 :]
        variants.append(replace(instance, presentation_order=tuple(order)).with_labels(position=str(p)))
    return variants


@dataclass
class LabeledInstances:
    label: str
    spec: SamplerSpec
    instances: list[TaskInstance] = field(default_factory=list)
    skipped: int = 0


def popularity_probe(
    users: Sequence[str],
    split: SplitDataset,
    stats: ItemStats,
    strategies: Sequence[SamplerSpec],
    *,
    p: int = 3,
    c: int = 10,
    n_instances: int = 1,
    root_rng_seed: int = 0,
) -> list[LabeledInstances]:
    """Discrimination instance sets, one per sampling strategy.

    Every strategy reuses the same per-(user, instance) seed, so positives
    (drawn before any negative) coincide across strategies.
    """
    out = []
    for spec in strategies:
        sampler = NegativeSampler(spec, stats)
        bucket = LabeledInstances(spec.label, spec)
        for user in users:
            for n in range(n_instances):
                seed = _instance_seed(root_rng_seed, user, n)
                rng = random.Random(seed)
                try:
                    inst = build_discrimination_instance(user, split, stats, p, c, sampler, rng, instance_seed=seed)
                except SkipInstance:
                    bucket.skipped += 1
                    continue
                bucket.instances.append(inst.with_labels(strategy=spec.label))
        out.append(bucket)
    return out


def _instance_seed(root: int, user: str, n: int) -> int:
    return derive_seed(root, "user", user, "instance", n)


# the seven attribute combinations of the isolated-metadata probe
DEFAULT_MASKS: tuple[frozenset[str], ...] = (
    frozenset({"title"}),
    frozenset({"genre"}),
    frozenset({"rating"}),
    frozenset({"popularity"}),
    frozenset({"title", "genre"}),
    frozenset({"rating", "popularity"}),
    frozenset({"title", "genre", "rating", "popularity"}),
)
ATTRIBUTE_SETTINGS = ((3, 10), (3, 6))
SAMPLING_TO_SPEC = {"random": SamplerSpec("uniform"), "debias": SamplerSpec("debias")}


@dataclass(frozen=True)
class ProbeCell:
    generator: str
    mask: frozenset[str]
    sampling: str
    p: int
    c: int

    @property
    def mask_label(self) -> str:
        return "+".join(a for a in ATTRIBUTES if a in self.mask)

    @property
    def setting(self) -> str:
        return f"{self.p}:{self.c}"

    @property
    def spec(self) -> SamplerSpec:
        return SAMPLING_TO_SPEC[self.sampling]


def attribute_probe_config(
    masks: Sequence[frozenset[str]] = DEFAULT_MASKS,
    sampling: Sequence[str] | str = ("random", "debias"),
    settings: Sequence[tuple[int, int]] = ATTRIBUTE_SETTINGS,
) -> list[ProbeCell]:
    """Plan of (mask x sampling x setting) cells, all with the empty profile."""
    if isinstance(sampling, str):
        sampling = (sampling,)
    if not masks:
        raise ConfigError("the attribute probe needs at least one mask")
    cells = []
    for s in sampling:
        if s not in SAMPLING_TO_SPEC:
            raise ConfigError(f"sampling must be 'random' or 'debias', got {s!r}")
        for mask in masks:
            mask = frozenset(mask)
            if not mask:
                raise ConfigError("attribute masks must be non-empty")
            if not mask <= set(ATTRIBUTES):
                raise ConfigError(f"unknown attributes {sorted(mask - set(ATTRIBUTES))}")
            for p, c in settings:
                cells.append(ProbeCell("empty", mask, s, p, c))
    return cells
