"""Three-stage task-aligned profile generator.

Stage 1 extracts an over-complete trait pool from ``n_init`` independent
generations, Stage 2 consolidates it under a dataset/task context, and
Stage 3 binds each trait to the decision steps whose output it changes
under a minimal counterfactual edit.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from ..data import DEFAULT_HISTORY_WINDOW, Interaction, Item, ItemStats, SplitDataset, recent_window
from ..errors import (
    ConfigError,
    DataError,
    DecisionError,
    InsufficientHistoryError,
    MalformedOutputError,
    StageError,
)
from ..llm import Gateway, PromptRequest, ResponseSchema, SchemaViolation
from ..prompts import load_template, template_versions
from ..sampling import NegativeSampler, SamplerSpec
from ..seeds import derive_seed
from ..tasks import (
    AgentDecision,
    AgentSettings,
    SkipInstance,
    TaskInstance,
    build_discrimination_instance,
    build_ranking_instance,
    build_rating_instance,
    render_history_item,
    run_task,
)
from .types import (
    TASK_FAMILIES,
    DecisionPath,
    DecisionStep,
    Evidence,
    GenerationContext,
    PolicyBinding,
    RawAttributePool,
    TaskAlignedProfile,
    TraitDescriptor,
)

logger = logging.getLogger(__name__)

DEFAULT_N_INIT = 3
DEFAULT_DELTA = 0.5
VOCAB_SAMPLE = 30


@dataclass(frozen=True)
class ProfileConfig:
    task_family: str = "discrimination"
    history_window: int = DEFAULT_HISTORY_WINDOW
    n_init: int = DEFAULT_N_INIT
    delta: float = DEFAULT_DELTA
    path_mode: str = "heuristic"  # heuristic | llm
    perturb_mode: str = "negate"  # negate | weaken
    diversify: str = "seed"  # seed | paraphrase
    skip_stage3: bool = False
    probes_per_step: int = 1
    probe_candidates: int = 10
    probe_positives: int = 3
    probe_rating_items: int = 10
    seed: int = 0
    config_digest: str = ""

    def __post_init__(self):
        if self.task_family not in TASK_FAMILIES:
            raise ConfigError(f"unknown task family {self.task_family!r}")
        if self.n_init < 1:
            raise ConfigError("n_init must be >= 1")
        if self.history_window < 1:
            raise ConfigError("history_window must be >= 1")
        if self.delta < 0:
            raise ConfigError("delta must be >= 0")
        if self.path_mode not in ("heuristic", "llm"):
            raise ConfigError(f"path_mode must be 'heuristic' or 'llm', got {self.path_mode!r}")
        if self.perturb_mode not in ("negate", "weaken"):
            raise ConfigError(f"perturb_mode must be 'negate' or 'weaken', got {self.perturb_mode!r}")
        if self.diversify not in ("seed", "paraphrase"):
            raise ConfigError(f"diversify must be 'seed' or 'paraphrase', got {self.diversify!r}")
        if self.probes_per_step < 1:
            raise ConfigError("probes_per_step must be >= 1")


def _request(tmpl_name: str, settings: AgentSettings, tag: str, seed: int | None, **values) -> PromptRequest:
    tmpl = load_template(tmpl_name)
    return PromptRequest(
        model_id=settings.model_id,
        system_message=tmpl.render_system(**values),
        user_message=tmpl.render_user(**values),
        temperature=settings.temperature,
        max_tokens=settings.max_tokens,
        request_seed=seed,
        tag=tag,
    )


def render_history(window: Sequence[Interaction], items: dict[str, Item]) -> str:
    return "\n".join(f"- {render_history_item(items[ev.item_id], ev.rating)}" for ev in window)


def _trait_key(text: str) -> str:
    return " ".join(text.casefold().split())


# ------------------------------------------------------------------ Stage 1

_PARAPHRASES = (
    "",
    "\n\nFocus on what the user consistently seeks out.",
    "\n\nFocus on what the user avoids or rates poorly.",
    "\n\nFocus on habits such as preferred eras, formats, or quality standards.",
)


def extract_raw_attributes(
    window: Sequence[Interaction],
    items: dict[str, Item],
    gateway: Gateway,
    n: int = DEFAULT_N_INIT,
    *,
    settings: AgentSettings = AgentSettings(),
    seed: int = 0,
    diversify: str = "seed",
) -> RawAttributePool:
    if not window:
        raise InsufficientHistoryError("insufficient history: empty interaction window")
    if n < 1:
        raise ConfigError("n must be >= 1")
    history = render_history(window, items)
    schema = ResponseSchema("trait_list", {"min_items": 1})
    pools = []
    for j in range(n):
        req = _request(
            "stage1_extract", settings, "stage1-extract", derive_seed(seed, "stage1", j),
            n_items=len(window), history=history,
        )
        if diversify == "paraphrase":
            req = replace(req, user_message=req.user_message + _PARAPHRASES[j % len(_PARAPHRASES)])
        try:
            out = gateway.execute_structured(req, schema)
        except MalformedOutputError as exc:
            raise StageError("stage1", f"generation {j} failed: {exc}") from exc
        pools.append(tuple(out.value))

    union: dict[str, str] = {}
    for pool in pools:
        for trait in pool:
            union.setdefault(_trait_key(trait), trait)
    return RawAttributePool(tuple(pools), tuple(union.values()))


# ------------------------------------------------------------------ Stage 2

TASK_DESCRIPTIONS = {
    "discrimination": (
        "Discrimination: the simulated user sees a list of candidate items and must pick out the ones they "
        "actually interacted with. Traits must be specific enough to separate items the user engaged with "
        "from plausible distractors (category-level and quality-level preferences)."
    ),
    "ranking": (
        "Ranking: the simulated user orders a list of candidate items by how likely they are to choose each "
        "one next. Traits must support pairwise trade-offs between similar items (relative strength of "
        "preferences, deal-breakers, tie-breakers)."
    ),
    "rating": (
        "Rating: the simulated user assigns an explicit score to each of several items. Traits must describe "
        "how strongly the user likes or dislikes kinds of items and how generous or harsh their scores are."
    ),
}


def dataset_info(split: SplitDataset) -> str:
    ds = split.dataset
    fields = ["item_id", "title"]
    if any(it.genres for it in ds.items.values()):
        fields.append("genres")
    extra = sorted({k for it in ds.items.values() for k in it.extra})
    fields += extra
    lo, hi = ds.rating_scale
    vocab = ds.category_vocabulary()[:VOCAB_SAMPLE]
    lines = [
        f"Dataset: {ds.name}",
        f"Item fields: {', '.join(fields)}",
        "Interaction fields: item, rating, timestamp",
        f"Rating scale: {lo:g} to {hi:g} ({lo:g},{hi:g})",
    ]
    if vocab:
        lines.append(f"Category vocabulary: {', '.join(vocab)}")
    return "\n".join(lines)


def _exemplar_output(family: str, item_id: str, rating: float) -> str:
    if family == "discrimination":
        return f'{{"selected": ["{item_id}"]}}'
    if family == "ranking":
        return f'{{"ranking": ["{item_id}", "..."]}}'
    return f'{{"ratings": {{"{item_id}": {rating:g}}}}}'


def build_context(split: SplitDataset, task_family: str, user: str, seed: int = 0) -> GenerationContext:
    train = split.train_by_user[user]
    ev = random.Random(derive_seed(seed, "exemplar", user)).choice(train)
    item = split.items[ev.item_id]
    exemplar = (
        f"Input candidate: {render_history_item(item)}\n"
        f"Expected output: {_exemplar_output(task_family, item.item_id, ev.rating)}"
    )
    return GenerationContext(dataset_info(split), TASK_DESCRIPTIONS[task_family], exemplar)


def _vocabulary_overlap(traits: Sequence[str], info: str) -> float:
    m = re.search(r"Category vocabulary: (.*)", info)
    if not m or not traits:
        return 0.0
    vocab = {v.strip().casefold() for v in m.group(1).split(",")}
    hits = sum(1 for t in traits if any(v and v in t.casefold() for v in vocab))
    return hits / len(traits)


def consolidate(
    pool: RawAttributePool,
    context: GenerationContext,
    gateway: Gateway,
    *,
    settings: AgentSettings = AgentSettings(),
    seed: int = 0,
) -> list[TraitDescriptor]:
    if not pool.union:
        raise StageError("stage2", "empty raw attribute pool")
    req = _request(
        "stage2_consolidate", settings, "stage2-consolidate", derive_seed(seed, "stage2"),
        dataset_info=context.dataset_info,
        task_desc=context.task_desc,
        exemplar=context.exemplar,
        n_traits=len(pool.union),
        traits="\n".join(f"- {t}" for t in pool.union),
    )
    schema = ResponseSchema("trait_list", {"min_items": 1, "max_items": len(pool.union)})
    try:
        out = gateway.execute_structured(req, schema)
    except MalformedOutputError as exc:
        raise StageError("stage2", str(exc)) from exc
    for note in out.notes:
        logger.info("stage2: %s", note)
    overlap = _vocabulary_overlap(out.value, context.dataset_info)
    logger.debug("stage2 vocabulary overlap %.2f", overlap)
    return [TraitDescriptor(t, source="consolidated") for t in out.value]


# ------------------------------------------------------------------ Stage 3

HEURISTIC_PATHS = {
    "discrimination": (
        DecisionStep("hard-filter", "hard-filter", "discard candidates that violate firm dislikes or constraints"),
        DecisionStep("preference-match", "preference-match", "score remaining candidates against stated tastes"),
        DecisionStep("final-select", "final-select", "choose the requested number of best-matching items"),
    ),
    "ranking": (
        DecisionStep("hard-filter", "hard-filter", "push candidates that violate firm dislikes to the bottom"),
        DecisionStep("pairwise-trade-off", "pairwise trade-off", "compare similar candidates on relative preference strength"),
        DecisionStep("order", "order", "emit the final order from most to least likely"),
    ),
    "rating": (
        DecisionStep("anchor-baseline", "anchor-baseline", "start from the user's habitual score level"),
        DecisionStep("trait-adjustment", "trait-adjustment", "move the score up or down for matched or violated traits"),
        DecisionStep("final-rating", "final-rating", "round to a score on the rating scale"),
    ),
}


def heuristic_path(task_family: str) -> DecisionPath:
    return DecisionPath(task_family, HEURISTIC_PATHS[task_family], "heuristic_template")


def instantiate_decision_path(
    task_family: str,
    mode: str = "heuristic",
    gateway: Gateway | None = None,
    *,
    context: GenerationContext | None = None,
    settings: AgentSettings = AgentSettings(),
    seed: int = 0,
) -> DecisionPath:
    if mode == "heuristic":
        return heuristic_path(task_family)
    if mode != "llm":
        raise ConfigError(f"unknown path mode {mode!r}")
    if gateway is None:
        raise ConfigError("llm path mode needs a gateway")
    if context is None:
        exemplar_input, exemplar_output = "a list of candidate items", "the decision"
    else:
        exemplar_input, _, exemplar_output = context.exemplar.partition("\nExpected output: ")
    req = _request(
        "stage3_path", settings, "stage3-path", derive_seed(seed, "path", task_family),
        task_desc=TASK_DESCRIPTIONS[task_family],
        exemplar_input=exemplar_input,
        exemplar_output=exemplar_output,
        min_steps=2,
        max_steps=6,
    )
    try:
        out = gateway.execute_structured(req, ResponseSchema("decision_path", {"min_steps": 2, "max_steps": 6}))
    except MalformedOutputError as exc:
        logger.warning("LLM decision path rejected (%s); falling back to the heuristic template", exc)
        return heuristic_path(task_family)
    steps = tuple(DecisionStep(sid, name, desc) for sid, name, desc in out.value)
    return DecisionPath(task_family, steps, "llm_generated")


class PerturbationError(StageError):
    def __init__(self, trait: str, message: str):
        self.trait = trait
        super().__init__("stage3", f"could not perturb {trait!r}: {message}")


_STOPWORDS = frozenset(
    """a an the and or of to in on for with by at from as is are be being been it its this that these those
    very more most less least mildly slightly somewhat strongly really quite not no never does do doesn't
    don't who which than then they them their user users""".split()
)
_WORD = re.compile(r"[a-z0-9']+")


def content_words(text: str) -> set[str]:
    return {w for w in _WORD.findall(text.casefold()) if w not in _STOPWORDS and len(w) > 1}


def _perturb_check(original: str) -> Callable[[str], None]:
    def check(value: str) -> None:
        if _trait_key(value) == _trait_key(original):
            raise SchemaViolation("perturbed trait is identical to the original")
        if not content_words(value) & content_words(original):
            raise SchemaViolation("perturbed trait shares no subject words with the original")

    return check


_PERTURB_INSTRUCTIONS = {
    "negate": "expresses the opposite preference",
    "weaken": "expresses a noticeably weaker version of the same preference",
}


def perturb_trait(
    trait: TraitDescriptor,
    gateway: Gateway,
    mode: str = "negate",
    *,
    settings: AgentSettings = AgentSettings(),
    seed: int = 0,
) -> TraitDescriptor:
    if mode not in _PERTURB_INSTRUCTIONS:
        raise ConfigError(f"unknown perturbation mode {mode!r}")
    req = _request(
        "stage3_perturb", settings, f"stage3-perturb-{mode}", derive_seed(seed, "perturb", mode, trait.text),
        trait=trait.text, instruction=_PERTURB_INSTRUCTIONS[mode],
    )
    schema = ResponseSchema("free_text", check=_perturb_check(trait.text))
    try:
        out = gateway.execute_structured(req, schema)
    except MalformedOutputError as exc:
        raise PerturbationError(trait.text, str(exc)) from exc
    return replace(trait, text=out.value)


AgentRunner = Callable[[TaskAlignedProfile, TaskInstance, Optional[DecisionStep]], AgentDecision]


def decision_changed(original: AgentDecision, counterfactual: AgentDecision, delta: float = DEFAULT_DELTA) -> tuple[bool, str]:
    """Change predicate per task kind, with a one-line summary of what moved."""
    if original.kind == "discrimination":
        a, b = set(original.selected), set(counterfactual.selected)
        if a != b:
            return True, f"selection -{sorted(a - b)} +{sorted(b - a)}"
        return False, "selection unchanged"
    if original.kind == "ranking":
        if tuple(original.permutation) != tuple(counterfactual.permutation):
            moved = [i for i, j in zip(original.permutation, counterfactual.permutation) if i != j]
            return True, f"order changed at {len(moved)} position(s)"
        return False, "order unchanged"
    shifts = {
        item: counterfactual.ratings[item] - original.ratings[item]
        for item in original.ratings
        if item in counterfactual.ratings
    }
    fired = {i: d for i, d in shifts.items() if abs(d) > delta}
    if fired:
        item, d = max(fired.items(), key=lambda kv: (abs(kv[1]), kv[0]))
        return True, f"rating of {item} moved by {d:+g} (> {delta:g})"
    biggest = max((abs(d) for d in shifts.values()), default=0.0)
    return False, f"max rating shift {biggest:g} <= {delta:g}"


@dataclass
class CounterfactualResult:
    bindings: list[PolicyBinding]
    background: list[TraitDescriptor]
    untested: list[TraitDescriptor] = field(default_factory=list)
    skipped_probes: int = 0
    trials: int = 0


def designated_probes(path: DecisionPath, probes: Sequence[TaskInstance], per_step: int = 1) -> dict[str, list[TaskInstance]]:
    if not probes:
        raise ConfigError("counterfactual mapping needs at least one probe instance")
    out = {}
    for si, step in enumerate(path.steps):
        chosen = [probes[(si * per_step + j) % len(probes)] for j in range(per_step)]
        out[step.id] = list({p.instance_id: p for p in chosen}.values())
    return out


def counterfactual_map(
    traits: Sequence[TraitDescriptor],
    path: DecisionPath,
    probe_instances: Sequence[TaskInstance],
    agent_runner: AgentRunner,
    gateway: Gateway | None,
    *,
    base_profile: TaskAlignedProfile,
    delta: float = DEFAULT_DELTA,
    probes_per_step: int = 1,
    perturb_mode: str = "negate",
    perturbations: dict[str, TraitDescriptor] | None = None,
    settings: AgentSettings = AgentSettings(),
    seed: int = 0,
) -> CounterfactualResult:
    """Bind each trait to the steps whose designated probe output it changes.

    ``perturbations`` may pre-supply a' per trait text; otherwise each trait
    is perturbed through ``gateway``. Traits that change nothing are returned
    as background; traits that could not be perturbed are returned untested.
    """
    plan = designated_probes(path, probe_instances, probes_per_step)
    baseline: dict[tuple[str, str], AgentDecision] = {}
    skipped = 0
    attempted = 0
    for step in path.steps:
        for inst in plan[step.id]:
            attempted += 1
            try:
                baseline[(step.id, inst.instance_id)] = agent_runner(base_profile, inst, step)
            except DecisionError as exc:
                skipped += 1
                logger.warning("stage3 probe %s/%s skipped: %s", step.id, inst.instance_id, exc)
    if not baseline:
        raise StageError("stage3", f"all {attempted} probe runs failed")

    result = CounterfactualResult([], [], skipped_probes=skipped)
    for trait in traits:
        try:
            if perturbations is not None and trait.text in perturbations:
                variant = perturbations[trait.text]
            else:
                if gateway is None:
                    raise ConfigError("no perturbation supplied and no gateway to generate one")
                variant = perturb_trait(trait, gateway, perturb_mode, settings=settings, seed=seed)
        except PerturbationError as exc:
            logger.warning("%s", exc)
            result.untested.append(trait)
            continue
        cf_traits = [variant if t.key == trait.key else t for t in base_profile.traits]
        cf_profile = replace(base_profile, traits=cf_traits, policies=[])
        evidence = []
        for step in path.steps:
            for inst in plan[step.id]:
                original = baseline.get((step.id, inst.instance_id))
                if original is None:
                    continue
                result.trials += 1
                try:
                    cf = agent_runner(cf_profile, inst, step)
                except DecisionError as exc:
                    result.skipped_probes += 1
                    logger.warning("stage3 counterfactual %s/%s skipped: %s", step.id, inst.instance_id, exc)
                    continue
                fired, summary = decision_changed(original, cf, delta)
                if fired:
                    evidence.append(Evidence(inst.instance_id, step.id, variant.text, summary))
        if evidence:
            steps = tuple(s.id for s in path.steps if any(e.step_id == s.id for e in evidence))
            result.bindings.append(PolicyBinding(replace(trait, status="active"), steps, tuple(evidence)))
        else:
            result.background.append(replace(trait, status="background"))
    return result


def build_probe_instances(
    user: str,
    split: SplitDataset,
    stats: ItemStats,
    config: ProfileConfig,
    n_probes: int,
    sampler,
) -> list[TaskInstance]:
    """Probe instances drawn from the user's train portion only."""
    n_train = len({ev.item_id for ev in split.train_by_user[user]})
    probes = []
    for n in range(n_probes):
        seed = derive_seed(config.seed, "probe", user, config.task_family, n)
        rng = random.Random(seed)
        try:
            if config.task_family == "discrimination":
                p = max(1, min(config.probe_positives, n_train, config.probe_candidates - 1))
                inst = build_discrimination_instance(
                    user, split, stats, p, config.probe_candidates, sampler, rng, source="train", instance_seed=seed
                )
            elif config.task_family == "ranking":
                inst = build_ranking_instance(
                    user, split, stats, config.probe_candidates, sampler, rng, source="train", instance_seed=seed
                )
            else:
                inst = build_rating_instance(
                    user, split, config.probe_rating_items, rng, instance_seed=seed, source="train"
                )
        except (SkipInstance, DataError) as exc:
            raise StageError("stage3", f"cannot build probe instance {n}: {exc}") from exc
        probes.append(inst)
    return probes


# ------------------------------------------------------------ full pipeline

def default_agent_runner(
    gateway: Gateway, stats: ItemStats, items: dict[str, Item], settings: AgentSettings
) -> AgentRunner:
    def runner(profile, instance, step):
        return run_task(profile, instance, stats, items, gateway, settings, focus_step=step)

    return runner


def generate_profile(
    user: str,
    split: SplitDataset,
    stats: ItemStats,
    config: ProfileConfig,
    gateway: Gateway,
    *,
    settings: AgentSettings = AgentSettings(),
    agent_runner: AgentRunner | None = None,
    sampler=None,
) -> TaskAlignedProfile:
    seed = derive_seed(config.seed, "profile", user, config.task_family)
    window = recent_window(split.train_by_user.get(user, []), config.history_window)
    pool = extract_raw_attributes(
        window, split.items, gateway, config.n_init, settings=settings, seed=seed, diversify=config.diversify
    )
    context = build_context(split, config.task_family, user, seed=seed)
    consolidated = consolidate(pool, context, gateway, settings=settings, seed=seed)

    provenance = {
        "config_digest": config.config_digest,
        "root_seed": config.seed,
        "profile_seed": seed,
        "stage1_seeds": [derive_seed(seed, "stage1", j) for j in range(config.n_init)],
        "history_window": config.history_window,
        "n_init": config.n_init,
        "raw_pool_sizes": [len(p) for p in pool.pools],
        "raw_union_size": len(pool.union),
        "template_versions": template_versions(),
    }

    if config.skip_stage3:
        return TaskAlignedProfile(
            user_id=user,
            generator="semantic_merge",
            traits=consolidated,
            task_family=config.task_family,
            provenance=provenance,
        )

    path = instantiate_decision_path(
        config.task_family, config.path_mode, gateway, context=context, settings=settings, seed=seed
    )
    sampler = sampler or NegativeSampler(SamplerSpec("uniform"))
    probes = build_probe_instances(
        user, split, stats, replace(config, seed=seed), len(path.steps) * config.probes_per_step, sampler
    )
    base = TaskAlignedProfile(
        user_id=user, generator="apg4recsim", traits=consolidated, task_family=config.task_family, decision_path=path
    )
    runner = agent_runner or default_agent_runner(gateway, stats, split.items, settings)
    cf = counterfactual_map(
        consolidated, path, probes, runner, gateway,
        base_profile=base,
        delta=config.delta,
        probes_per_step=config.probes_per_step,
        perturb_mode=config.perturb_mode,
        settings=settings,
        seed=seed,
    )
    kept = {b.trait.key for b in cf.bindings} | {t.key for t in cf.untested}
    active = [t for t in consolidated if t.key in kept]
    provenance.update(
        {
            "path_origin": path.origin,
            "probe_instances": [p.instance_id for p in probes],
            "delta": config.delta,
            "perturb_mode": config.perturb_mode,
            "untested_traits": [t.text for t in cf.untested],
            "skipped_probes": cf.skipped_probes,
            "counterfactual_trials": cf.trials,
        }
    )
    return TaskAlignedProfile(
        user_id=user,
        generator="apg4recsim",
        traits=active,
        background_traits=cf.background,
        policies=cf.bindings,
        task_family=config.task_family,
        decision_path=path,
        provenance=provenance,
    )
