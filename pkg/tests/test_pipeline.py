import json
import random

import pytest

from recsim_profiles.errors import ConfigError, InsufficientHistoryError, StageError
from recsim_profiles.profiles.baselines import (
    baseline_agent4rec_style,
    baseline_recagent_style,
    baseline_recent_interaction,
)
from recsim_profiles.profiles.pipeline import (
    ProfileConfig,
    PerturbationError,
    build_context,
    consolidate,
    counterfactual_map,
    decision_changed,
    extract_raw_attributes,
    generate_profile,
    heuristic_path,
    instantiate_decision_path,
    perturb_trait,
)
from recsim_profiles.profiles.store import ProfileStoreWriter, read_store, write_store
from recsim_profiles.profiles.types import (
    GenerationContext,
    RawAttributePool,
    TaskAlignedProfile,
    TraitDescriptor,
)
from recsim_profiles.tasks import AgentDecision, build_rating_instance

from conftest import SequenceResponder, make_dataset, scripted_gateway
from recsim_profiles.data import chronological_split

CTX = GenerationContext("Dataset: toy\nCategory vocabulary: Drama, Horror", "rate things", "Input: x\nExpected output: y")


def traits_json(*texts):
    return json.dumps({"traits": list(texts)})


# ------------------------------------------------------------------ stage 1

def test_stage1_union_dedups_case_insensitively(toy_split):
    window = toy_split.train_by_user["1"]
    responder = SequenceResponder({"stage1-extract": [
        traits_json("Likes Drama", "dislikes horror"),
        traits_json("likes drama", "enjoys 1990s films"),
        traits_json("Dislikes  Horror"),
    ]})
    pool = extract_raw_attributes(window, toy_split.items, scripted_gateway(responder=responder), 3)
    assert len(pool.pools) == 3
    assert pool.union == ("Likes Drama", "dislikes horror", "enjoys 1990s films")
    # each generation gets its own sampling seed
    assert len({r.request_seed for r in responder.seen}) == 3


def test_stage1_single_generation_and_empty_window(toy_split):
    gw = scripted_gateway({("stage1-extract", None): traits_json("a", "b")})
    pool = extract_raw_attributes(toy_split.train_by_user["1"], toy_split.items, gw, 1)
    assert pool.union == tuple(pool.pools[0]) == ("a", "b")
    with pytest.raises(InsufficientHistoryError):
        extract_raw_attributes([], toy_split.items, gw, 3)


# ------------------------------------------------------------------ stage 2

def test_consolidation_merges():
    pool = RawAttributePool((("likes drama", "loves dramas"), ("dislikes horror",)), ("likes drama", "loves dramas", "dislikes horror"))
    gw = scripted_gateway({("stage2-consolidate", None): traits_json("prefers Drama", "avoids Horror")})
    out = consolidate(pool, CTX, gw)
    assert [t.text for t in out] == ["prefers Drama", "avoids Horror"]
    assert all(t.source == "consolidated" for t in out)


def test_consolidation_of_single_trait_pool():
    pool = RawAttributePool((("likes drama",),), ("likes drama",))
    gw = scripted_gateway({("stage2-consolidate", None): traits_json("likes drama")})
    assert len(consolidate(pool, CTX, gw)) == 1


def test_consolidation_cannot_grow_the_pool():
    pool = RawAttributePool((("a", "b"),), ("a", "b"))
    gw = scripted_gateway({("stage2-consolidate", None): traits_json("x", "y", "z")})
    with pytest.raises(StageError):
        consolidate(pool, CTX, gw)


def test_context_mentions_scale_and_is_deterministic(synthetic_split):
    a = build_context(synthetic_split, "rating", "1", seed=4)
    assert "(1,5)" in a.dataset_info
    assert a == build_context(synthetic_split, "rating", "1", seed=4)


def test_single_train_item_is_the_exemplar():
    split = chronological_split(make_dataset({"u": [("7", 4, 1), ("8", 2, 2)]}), 0.5)
    ctx = build_context(split, "discrimination", "u")
    assert "Movie 7" in ctx.exemplar and '"7"' in ctx.exemplar


# -------------------------------------------------------------- decision path

@pytest.mark.parametrize("family,steps", [
    ("discrimination", ["hard-filter", "preference-match", "final-select"]),
    ("ranking", ["hard-filter", "pairwise-trade-off", "order"]),
    ("rating", ["anchor-baseline", "trait-adjustment", "final-rating"]),
])
def test_heuristic_paths(family, steps):
    assert heuristic_path(family).step_ids == steps
    assert instantiate_decision_path(family).origin == "heuristic_template"


def test_llm_path_with_one_step_falls_back():
    gw = scripted_gateway({("stage3-path", None): json.dumps({"steps": ["only one"]})})
    path = instantiate_decision_path("ranking", "llm", gw)
    assert path.origin == "heuristic_template"
    good = scripted_gateway({("stage3-path", None): json.dumps({"steps": ["Screen", "Compare", "Decide"]})})
    assert instantiate_decision_path("ranking", "llm", good).step_ids == ["screen", "compare", "decide"]


# ------------------------------------------------------------ perturbation

def test_perturb_negate_and_weaken():
    trait = TraitDescriptor("enjoys slow-burn dramas")
    gw = scripted_gateway({
        ("stage3-perturb-negate", None): "dislikes slow-burn dramas",
        ("stage3-perturb-weaken", None): "mildly enjoys slow-burn dramas",
    })
    assert perturb_trait(trait, gw, "negate").text == "dislikes slow-burn dramas"
    assert perturb_trait(trait, gw, "weaken").text == "mildly enjoys slow-burn dramas"


def test_perturb_identical_reply_is_rejected():
    gw = scripted_gateway({("stage3-perturb-negate", None): "Enjoys slow-burn dramas"})
    with pytest.raises(PerturbationError):
        perturb_trait(TraitDescriptor("enjoys slow-burn dramas"), gw)
    with pytest.raises(ConfigError):
        perturb_trait(TraitDescriptor("x"), gw, "invert")


# ------------------------------------------------------- counterfactual map

def _rating(instance, value):
    return AgentDecision("rating", instance.instance_id, ratings={c: value for c in instance.candidates})


def _shift_runner(shifts):
    """Rating agent whose score moves by shifts[text] when a perturbed text appears."""

    def runner(profile, instance, step):
        texts = {t.text for t in profile.traits}
        return _rating(instance, 3.0 + sum(d for t, d in shifts.items() if t in texts))

    return runner


@pytest.fixture
def rating_probes(toy_split):
    return [build_rating_instance("1", toy_split, 3, random.Random(n), instance_seed=n, source="train") for n in range(3)]


def _map(traits, perturbed, shifts, probes, delta=0.5):
    base = TaskAlignedProfile("1", "apg4recsim", traits=traits, task_family="rating", decision_path=heuristic_path("rating"))
    return counterfactual_map(
        traits, heuristic_path("rating"), probes, _shift_runner(shifts), None,
        base_profile=base, delta=delta,
        perturbations={t.text: TraitDescriptor(p) for t, p in zip(traits, perturbed)},
    )


def test_trait_that_moves_a_rating_is_bound(rating_probes):
    res = _map([TraitDescriptor("likes drama")], ["dislikes drama"], {"dislikes drama": -1.0}, rating_probes)
    (binding,) = res.bindings
    assert binding.step_ids == ("anchor-baseline", "trait-adjustment", "final-rating")
    assert binding.evidence[0].perturbed_text == "dislikes drama"
    assert res.background == []


def test_small_shift_is_demoted_to_background(rating_probes):
    res = _map([TraitDescriptor("likes drama")], ["dislikes drama"], {"dislikes drama": 0.4}, rating_probes)
    assert res.bindings == [] and [t.status for t in res.background] == ["background"]


def test_change_predicates():
    a = AgentDecision("discrimination", "i", selected=("a", "b"))
    assert not decision_changed(a, AgentDecision("discrimination", "i", selected=("b", "a")))[0]
    assert decision_changed(a, AgentDecision("discrimination", "i", selected=("a", "c")))[0]
    r = AgentDecision("ranking", "i", permutation=("a", "b"))
    assert decision_changed(r, AgentDecision("ranking", "i", permutation=("b", "a")))[0]
    x = AgentDecision("rating", "i", ratings={"a": 3.0})
    assert not decision_changed(x, AgentDecision("rating", "i", ratings={"a": 3.5}), 0.5)[0]
    assert decision_changed(x, AgentDecision("rating", "i", ratings={"a": 3.6}), 0.5)[0]


# ---------------------------------------------------------------- full run

@pytest.mark.parametrize("family", ["discrimination", "ranking", "rating"])
def test_generate_profile_full(synthetic_split, synthetic_stats, heuristic_gateway, family):
    profile = generate_profile("3", synthetic_split, synthetic_stats, ProfileConfig(task_family=family), heuristic_gateway)
    assert profile.generator == "apg4recsim" and profile.decision_path is not None
    assert profile.traits or profile.background_traits
    # nothing consolidated is lost: every trait is active or background
    assert profile.provenance["raw_union_size"] >= len(profile.traits) + len(profile.background_traits)
    active = {t.key for t in profile.traits}
    assert all(b.trait.key in active for b in profile.policies)


def test_skip_stage3_gives_semantic_merge(synthetic_split, synthetic_stats, heuristic_gateway):
    profile = generate_profile("3", synthetic_split, synthetic_stats, ProfileConfig(skip_stage3=True), heuristic_gateway)
    assert profile.generator == "semantic_merge" and profile.policies == [] and profile.decision_path is None


def test_generate_profile_is_deterministic(synthetic_split, synthetic_stats):
    from recsim_profiles.synthetic import HeuristicResponder

    runs = [
        generate_profile("4", synthetic_split, synthetic_stats, ProfileConfig(seed=9), scripted_gateway(responder=HeuristicResponder())).to_record()
        for _ in range(2)
    ]
    assert runs[0] == runs[1]


def test_banned_demographic_tags():
    with pytest.raises(ValueError):
        TaskAlignedProfile("u", "empty", tags={"Age": "30"})


# --------------------------------------------------------------- baselines

def _profile_gw(tag, *answers):
    return scripted_gateway(responder=SequenceResponder({tag: list(answers)}))


def test_recagent_baseline(toy_split):
    reply = json.dumps({"role": "Critic", "personality": "picky", "interests": "Drama", "behaviour_features": "rates harshly"})
    p = baseline_recagent_style("1", toy_split, _profile_gw("baseline-recagent", reply))
    assert p.tags == {"role": "critic"} and len(p.traits) == 3


def test_recagent_unknown_role_fails(toy_split):
    reply = json.dumps({"role": "lurker", "personality": "x", "interests": "y", "behaviour_features": "z"})
    with pytest.raises(StageError):
        baseline_recagent_style("1", toy_split, _profile_gw("baseline-recagent", reply))


def test_recagent_empty_interests_are_dropped(toy_split):
    reply = json.dumps({"role": "watcher", "personality": "calm", "interests": "", "behaviour_features": "binge"})
    p = baseline_recagent_style("1", toy_split, _profile_gw("baseline-recagent", reply))
    assert [t.text.split(":")[0] for t in p.traits] == ["personality", "behaviour"]


def test_agent4rec_baseline_pairs_and_retry(toy_split):
    two = json.dumps({"tastes": [{"taste": "Drama", "rationale": "rated high"}, {"taste": "no Horror", "rationale": "rated low"}]})
    p = baseline_agent4rec_style("1", toy_split, _profile_gw("baseline-agent4rec", two))
    assert [(t.text, t.rationale) for t in p.traits] == [("Drama", "rated high"), ("no Horror", "rated low")]

    missing = json.dumps({"tastes": [{"taste": "Drama"}]})
    one = json.dumps({"tastes": [{"taste": "Drama", "rationale": "rated high"}]})
    gw = _profile_gw("baseline-agent4rec", missing, one)
    assert len(baseline_agent4rec_style("1", toy_split, gw).traits) == 1


def test_recent_interaction_baseline(toy_split):
    p = baseline_recent_interaction("1", toy_split, 3)
    assert len(p.history_items) == 3 and p.traits == []


# ------------------------------------------------------------------- store

def test_store_round_trip_and_resume(tmp_path, toy_split):
    path = tmp_path / "p.jsonl"
    profiles = [baseline_recent_interaction(u, toy_split, 5) for u in ("1", "2", "3")]
    write_store(path, {"digest": "d"}, profiles)
    header, loaded = read_store(path)
    assert header["digest"] == "d"
    assert [p.to_record() for p in loaded.values()] == [p.to_record() for p in profiles]

    # a torn trailing line is dropped before the next append
    with open(path, "a") as fh:
        fh.write('{"user_id": "9", "gen')
    writer = ProfileStoreWriter(path, {"digest": "d"})
    writer.append(baseline_recent_interaction("4", toy_split, 5))
    _, loaded = read_store(path)
    assert len(loaded) == 4
