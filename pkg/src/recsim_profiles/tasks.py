"""Task instances, agent prompt rendering, and decision parsing for the
discrimination, ranking and rating scenarios."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, replace
from typing import Optional, Protocol, Sequence

from . import metrics
from .data import Interaction, Item, ItemStats, SplitDataset
from .errors import DataError, DecisionError, MalformedOutputError
from .llm import Gateway, PromptRequest, ResponseSchema
from .profiles.types import DecisionStep, TaskAlignedProfile
from .prompts import load_template
from .seeds import digest_json

logger = logging.getLogger(__name__)

TASK_KINDS = ("discrimination", "ranking", "rating")
ATTRIBUTES = ("title", "genre", "rating", "popularity")
FULL_MASK = frozenset(ATTRIBUTES)
DEFAULT_CANDIDATES = 10
DEFAULT_RATING_ITEMS = 10


class SkipInstance(DataError):
    """The user cannot supply this instance (too few held-out items)."""


class Sampler(Protocol):
    def sample(self, positives: Sequence[str], universe: Sequence[str], k: int, rng: random.Random): ...


@dataclass(frozen=True)
class TaskInstance:
    kind: str
    user_id: str
    candidates: tuple[str, ...]
    positives: frozenset[str]
    presentation_order: tuple[int, ...]
    attribute_mask: frozenset[str] = FULL_MASK
    instance_seed: int = 0
    truths: tuple[tuple[str, float], ...] = ()
    # bookkeeping labels (sampler strategy, mask, setting); not part of the id
    labels: tuple[tuple[str, str], ...] = ()
    sampler_warning: bool = False

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not self.positives <= set(self.candidates):
            raise ValueError("positives must be a subset of the candidates")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidates must be distinct")
        if sorted(self.presentation_order) != list(range(len(self.candidates))):
            raise ValueError("presentation_order must be a permutation of candidate indices")
        if not self.attribute_mask <= FULL_MASK:
            raise ValueError(f"unknown attributes in mask: {sorted(self.attribute_mask - FULL_MASK)}")
        if self.kind == "ranking" and len(self.positives) != 1:
            raise ValueError("ranking instances carry exactly one positive")
        if self.kind == "rating" and {i for i, _ in self.truths} != set(self.candidates):
            raise ValueError("rating instances need a ground truth per candidate")

    @property
    def presented(self) -> list[str]:
        return [self.candidates[i] for i in self.presentation_order]

    @property
    def truth_map(self) -> dict[str, float]:
        return dict(self.truths)

    @property
    def n_select(self) -> int:
        return len(self.positives)

    @property
    def positive(self) -> str:
        (p,) = self.positives
        return p

    @property
    def label_map(self) -> dict[str, str]:
        return dict(self.labels)

    @property
    def instance_id(self) -> str:
        return digest_json(
            [
                self.kind,
                self.user_id,
                list(self.candidates),
                sorted(self.positives),
                list(self.presentation_order),
                sorted(self.attribute_mask),
                self.instance_seed,
                [list(t) for t in self.truths],
            ]
        )[:16]

    def with_labels(self, **labels: str) -> "TaskInstance":
        merged = dict(self.labels)
        merged.update({k: str(v) for k, v in labels.items()})
        return replace(self, labels=tuple(sorted(merged.items())))

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "kind": self.kind,
            "user_id": self.user_id,
            "candidates": list(self.candidates),
            "positives": sorted(self.positives),
            "presentation_order": list(self.presentation_order),
            "attribute_mask": sorted(self.attribute_mask),
            "instance_seed": self.instance_seed,
            "truths": {i: r for i, r in self.truths},
            "labels": dict(self.labels),
            "sampler_warning": self.sampler_warning,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TaskInstance":
        return cls(
            kind=rec["kind"],
            user_id=rec["user_id"],
            candidates=tuple(rec["candidates"]),
            positives=frozenset(rec["positives"]),
            presentation_order=tuple(rec["presentation_order"]),
            attribute_mask=frozenset(rec["attribute_mask"]),
            instance_seed=rec["instance_seed"],
            truths=tuple(rec.get("truths", {}).items()),
            labels=tuple(sorted(rec.get("labels", {}).items())),
            sampler_warning=rec.get("sampler_warning", False),
        )


@dataclass
class AgentDecision:
    kind: str
    instance_id: str
    selected: Optional[tuple[str, ...]] = None
    permutation: Optional[tuple[str, ...]] = None
    ratings: Optional[dict[str, float]] = None
    raw_response: str = ""
    repair_applied: bool = False

    def payload(self):
        if self.kind == "discrimination":
            return list(self.selected)
        if self.kind == "ranking":
            return list(self.permutation)
        return dict(self.ratings)


# ----------------------------------------------------------------- builders

def _held_out(split: SplitDataset, user: str, source: str) -> list[Interaction]:
    if source == "test":
        events = split.test_by_user.get(user, [])
    elif source == "train":
        events = split.train_by_user.get(user, [])
    else:
        raise ValueError(f"source must be 'test' or 'train', got {source!r}")
    # first occurrence per item, preserving time order
    seen: dict[str, Interaction] = {}
    for ev in events:
        seen.setdefault(ev.item_id, ev)
    return list(seen.values())


def negative_universe(split: SplitDataset, user: str) -> list[str]:
    interacted = split.interacted(user)
    return sorted(i for i in split.items if i not in interacted)


def _shuffled_order(n: int, rng: random.Random) -> tuple[int, ...]:
    order = list(range(n))
    rng.shuffle(order)
    return tuple(order)


def _with_negatives(
    kind: str,
    user: str,
    split: SplitDataset,
    positives: list[str],
    c: int,
    sampler: Sampler,
    rng: random.Random,
    instance_seed: int,
    mask: frozenset[str],
) -> TaskInstance:
    result = sampler.sample(positives, negative_universe(split, user), c - len(positives), rng)
    negatives = list(getattr(result, "items", result))
    candidates = tuple(positives + negatives)
    return TaskInstance(
        kind=kind,
        user_id=user,
        candidates=candidates,
        positives=frozenset(positives),
        presentation_order=_shuffled_order(len(candidates), rng),
        attribute_mask=mask,
        instance_seed=instance_seed,
        sampler_warning=bool(getattr(result, "warning", False)),
    )


def build_discrimination_instance(
    user: str,
    split: SplitDataset,
    stats: ItemStats | None,
    p: int,
    c: int,
    sampler: Sampler,
    rng: random.Random,
    *,
    mask: frozenset[str] = FULL_MASK,
    source: str = "test",
    instance_seed: int | None = None,
) -> TaskInstance:
    if not 0 < p < c:
        raise ValueError(f"need 0 < p < c, got p={p}, c={c}")
    pool = _held_out(split, user, source)
    if len(pool) < p:
        raise SkipInstance(f"user {user} has {len(pool)} held-out items, needs {p}")
    seed = instance_seed if instance_seed is not None else rng.getrandbits(63)
    positives = [ev.item_id for ev in rng.sample(pool, p)]
    return _with_negatives("discrimination", user, split, positives, c, sampler, rng, seed, frozenset(mask))


def build_ranking_instance(
    user: str,
    split: SplitDataset,
    stats: ItemStats | None,
    c: int,
    sampler: Sampler,
    rng: random.Random,
    *,
    mask: frozenset[str] = FULL_MASK,
    source: str = "test",
    instance_seed: int | None = None,
) -> TaskInstance:
    if c < 2:
        raise ValueError("ranking needs at least 2 candidates")
    pool = _held_out(split, user, source)
    if not pool:
        raise SkipInstance(f"user {user} has no held-out items")
    seed = instance_seed if instance_seed is not None else rng.getrandbits(63)
    positives = [rng.choice(pool).item_id]
    return _with_negatives("ranking", user, split, positives, c, sampler, rng, seed, frozenset(mask))


def build_rating_instance(
    user: str,
    split: SplitDataset,
    n: int = DEFAULT_RATING_ITEMS,
    rng: random.Random | None = None,
    *,
    instance_seed: int = 0,
    mask: frozenset[str] = FULL_MASK,
    source: str = "test",
) -> TaskInstance:
    pool = _held_out(split, user, source)
    if not pool:
        raise SkipInstance(f"user {user} has no held-out items")
    rng = rng if rng is not None else random.Random(instance_seed)
    chosen = rng.sample(pool, min(n, len(pool)))
    return TaskInstance(
        kind="rating",
        user_id=user,
        candidates=tuple(ev.item_id for ev in chosen),
        positives=frozenset(ev.item_id for ev in chosen),
        presentation_order=tuple(range(len(chosen))),
        attribute_mask=frozenset(mask),
        instance_seed=instance_seed,
        truths=tuple((ev.item_id, ev.rating) for ev in chosen),
    )


# ---------------------------------------------------------------- rendering

@dataclass(frozen=True)
class AgentSettings:
    model_id: str = "gpt-4o-mini"
    temperature: float = 0.1
    max_tokens: int = 1024
    popularity_mode: str = "count"  # count | quantile
    repair: bool = True
    rating_scale: tuple[float, float] = (1.0, 5.0)


def _fmt_rating(value: float) -> str:
    return f"{value:.2f}"


def render_candidate(item: Item, stats: ItemStats | None, mask: frozenset[str], popularity_mode: str = "count") -> str:
    """One candidate line showing only the masked-in metadata fields."""
    parts = []
    if "title" in mask:
        parts.append(f"title: {item.title}")
    if "genre" in mask:
        parts.append(f"genres: {', '.join(item.genres) if item.genres else 'n/a'}")
    if "rating" in mask:
        value = stats.mean_rating.get(item.item_id, stats.global_mean) if stats else float("nan")
        parts.append(f"rating: {_fmt_rating(value)} average")
    if "popularity" in mask:
        if popularity_mode == "quantile":
            q = stats.popularity_quantile.get(item.item_id, 0.0) if stats else 0.0
            parts.append(f"popularity: {q:.2f} quantile")
        else:
            count = stats.popularity.get(item.item_id, 0) if stats else 0
            parts.append(f"popularity: {count} interactions")
    line = f"[{item.item_id}]"
    return f"{line} {' | '.join(parts)}" if parts else line


def render_history_item(item: Item, rating: float | None = None) -> str:
    line = f"[{item.item_id}] {item.title}"
    if item.genres:
        line += f" | {', '.join(item.genres)}"
    if rating is not None:
        line += f" | rated {rating:g}"
    return line


def render_profile(profile: TaskAlignedProfile) -> str:
    """Profile section of the agent system message (empty string for an empty profile)."""
    sections = []
    if profile.tags:
        sections.append("User attributes:\n" + "\n".join(f"- {k}: {v}" for k, v in sorted(profile.tags.items())))
    if profile.traits:
        lines = []
        for t in sorted(profile.traits, key=lambda t: t.text):
            lines.append(f"- {t.text}" + (f" (because {t.rationale})" if t.rationale else ""))
        sections.append("Traits:\n" + "\n".join(lines))
    if profile.background_traits:
        lines = [f"- {t.text}" for t in sorted(profile.background_traits, key=lambda t: t.text)]
        sections.append("Weaker signals:\n" + "\n".join(lines))
    if profile.decision_path is not None and (profile.policies or profile.generator == "apg4recsim"):
        path = profile.decision_path
        lines = [f"{n}. {s.name}: {s.description}".rstrip(": ") for n, s in enumerate(path.steps, 1)]
        sections.append("Decision path:\n" + "\n".join(lines))
        if profile.policies:
            blocks = []
            for step in path.steps:
                bound = sorted(b.trait.text for b in profile.policies if step.id in b.step_ids)
                if bound:
                    blocks.append(f"{step.name}:\n" + "\n".join(f"- {t}" for t in bound))
            sections.append("Policies by step:\n" + "\n".join(blocks))
    if profile.history_items:
        sections.append("Recently interacted items, oldest first:\n" + "\n".join(f"- {h}" for h in profile.history_items))
    if not sections:
        return "No further information about this user is available."
    return "\n\n".join(sections)


def render_agent_prompt(
    profile: TaskAlignedProfile,
    instance: TaskInstance,
    stats: ItemStats | None,
    items: dict[str, Item],
    settings: AgentSettings = AgentSettings(),
    *,
    focus_step: DecisionStep | None = None,
    request_seed: int | None = None,
) -> PromptRequest:
    system = load_template("agent_system").render_system(profile=render_profile(profile))
    candidates = "\n".join(
        render_candidate(items[i], stats, instance.attribute_mask, settings.popularity_mode)
        for i in instance.presented
    )
    tmpl = load_template(f"agent_{instance.kind}")
    lo, hi = settings.rating_scale
    user = tmpl.render_user(
        candidates=candidates,
        n_candidates=len(instance.candidates),
        n_select=instance.n_select,
        scale_lo=f"{lo:g}",
        scale_hi=f"{hi:g}",
    )
    if focus_step is not None:
        user += f'\n\nReport your decision as it stands right after the step "{focus_step.name}" ({focus_step.id}).'
    return PromptRequest(
        model_id=settings.model_id,
        system_message=system,
        user_message=user,
        temperature=settings.temperature,
        max_tokens=settings.max_tokens,
        request_seed=instance.instance_seed if request_seed is None else request_seed,
        tag=f"agent-{instance.kind}",
    )


def decision_schema(instance: TaskInstance, settings: AgentSettings = AgentSettings()) -> ResponseSchema:
    presented = instance.presented
    if instance.kind == "discrimination":
        c = {"candidates": presented, "max_size": instance.n_select}
        kind = "selection_set"
    elif instance.kind == "ranking":
        c, kind = {"candidates": presented}, "ranking"
    else:
        c, kind = {"candidates": presented, "scale": settings.rating_scale}, "rating_map"
    c["repair"] = settings.repair
    return ResponseSchema(kind, c)


def run_task(
    profile: TaskAlignedProfile,
    instance: TaskInstance,
    stats: ItemStats | None,
    items: dict[str, Item],
    gateway: Gateway,
    settings: AgentSettings = AgentSettings(),
    *,
    focus_step: DecisionStep | None = None,
    request_seed: int | None = None,
) -> AgentDecision:
    request = render_agent_prompt(
        profile, instance, stats, items, settings, focus_step=focus_step, request_seed=request_seed
    )
    try:
        out = gateway.execute_structured(request, decision_schema(instance, settings))
    except MalformedOutputError as exc:
        raise DecisionError(f"instance {instance.instance_id}: {exc}") from exc
    decision = AgentDecision(instance.kind, instance.instance_id, raw_response=out.raw, repair_applied=out.repaired)
    if instance.kind == "discrimination":
        decision.selected = tuple(out.value)
    elif instance.kind == "ranking":
        decision.permutation = tuple(out.value)
    else:
        decision.ratings = dict(out.value)
    return decision


def score_decision(instance: TaskInstance, decision: AgentDecision) -> dict[str, float]:
    """Per-instance metrics. Rating instances are scored by pooling in the caller."""
    if instance.kind == "discrimination":
        return {"overlap": metrics.overlap_ratio(decision.selected, instance.positives)}
    if instance.kind == "ranking":
        perm, pos = decision.permutation, instance.positive
        return {
            "ndcg@5": metrics.ndcg_at_k(perm, pos, 5),
            "ndcg@10": metrics.ndcg_at_k(perm, pos, 10),
            "hr@3": float(metrics.hit_rate_at_k(perm, pos, 3)),
        }
    truths = instance.truth_map
    return {"rmse": metrics.rmse(decision.ratings, truths)}
