import random

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from recsim_profiles.data import ItemStats
from recsim_profiles.errors import ConfigError, SamplingError
from recsim_profiles.sampling import (
    DEFAULT_MASKS,
    NegativeSampler,
    SamplerSpec,
    attribute_probe_config,
    debias_negatives,
    popularity_probe,
    position_probe,
    stratified_negatives,
    uniform_negatives,
    within_tolerance,
)
from recsim_profiles.tasks import build_discrimination_instance, build_ranking_instance, negative_universe

DEBIAS = SamplerSpec("debias")


def synthetic_stats(n=1000, seed=0):
    rng = random.Random(seed)
    ids = [f"i{k}" for k in range(n)]
    pop = {i: rng.randint(1, 400) for i in ids}
    rating = {i: round(rng.uniform(1, 5), 2) for i in ids}
    return ids, ItemStats(pop, rating, {i: 0.0 for i in ids})


# ---------------------------------------------------------------- uniform

def test_uniform_negatives():
    universe = [str(i) for i in range(1000)]
    out = uniform_negatives(universe, 9, random.Random(0))
    assert len(set(out)) == 9 and set(out) <= set(universe)
    assert uniform_negatives(universe, 0, random.Random(0)) == []
    with pytest.raises(SamplingError):
        uniform_negatives(universe[:3], 4, random.Random(0))


# ----------------------------------------------------------------- debias

def test_debias_hits_the_stated_window():
    ids, stats = synthetic_stats()
    stats.popularity.update({"p1": 100, "p2": 140})
    stats.mean_rating.update({"p1": 4.0, "p2": 4.4})
    res = debias_negatives(["p1", "p2"], ids, stats, 8, DEBIAS, random.Random(1))
    # mean popularity 120 +/- 10% and mean rating 4.2 +/- 0.25
    assert not res.warning
    assert 108 <= res.mean_popularity <= 132
    assert 3.95 <= res.mean_rating <= 4.45
    assert len(set(res.items)) == 8 and not {"p1", "p2"} & set(res.items)


def test_debias_edge_cases():
    ids, stats = synthetic_stats(10)
    assert debias_negatives([ids[0]], ids, stats, 0, DEBIAS).items == []
    with pytest.raises(SamplingError):
        debias_negatives([ids[0]], [ids[1]], stats, 2, DEBIAS)


def test_debias_warning_and_strict_paths():
    stats = ItemStats({"p": 100, "a": 1, "b": 2, "c": 3}, {"p": 5.0, "a": 1.0, "b": 1.0, "c": 1.5}, {})
    res = debias_negatives(["p"], ["a", "b", "c"], stats, 2, DEBIAS, random.Random(0))
    assert res.warning and len(res.items) == 2
    with pytest.raises(SamplingError):
        debias_negatives(["p"], ["a", "b", "c"], stats, 2, SamplerSpec("debias", strict=True), random.Random(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 9))
def test_debias_accepted_outputs_satisfy_tolerances(seed, n_pos, k):
    ids, stats = synthetic_stats(300, seed % 7)
    rng = random.Random(seed)
    positives = rng.sample(ids, n_pos)
    res = debias_negatives(positives, ids, stats, k, DEBIAS, rng)
    assert not set(res.items) & set(positives)
    if not res.warning:
        pos_pop = sum(stats.popularity[i] for i in positives) / n_pos
        pos_rat = sum(stats.mean_rating[i] for i in positives) / n_pos
        assert within_tolerance(res.mean_popularity, res.mean_rating, pos_pop, pos_rat, DEBIAS)


def test_stratified_head_and_tail():
    ids, stats = synthetic_stats(100)
    ranked = sorted(ids, key=lambda i: (-stats.popularity[i], i))
    head = stratified_negatives(ids, stats, 5, SamplerSpec("popularity_stratified", stratum="head"), random.Random(0))
    tail = stratified_negatives(ids, stats, 5, SamplerSpec("popularity_stratified", stratum="tail"), random.Random(0))
    assert set(head.items) <= set(ranked[:20]) and set(tail.items) <= set(ranked[-20:])


def test_sampler_spec_validation():
    with pytest.raises(ConfigError):
        SamplerSpec("nope")
    with pytest.raises(ConfigError):
        NegativeSampler(SamplerSpec("debias"), None)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["uniform", "debias", "popularity_stratified"]), st.integers(0, 1000))
def test_negatives_never_interacted(synthetic_split, synthetic_stats_fx, kind, seed):
    sampler = NegativeSampler(SamplerSpec(kind), synthetic_stats_fx)
    for user in synthetic_split.users[:5]:
        inst = build_discrimination_instance(user, synthetic_split, synthetic_stats_fx, 1, 10, sampler, random.Random(seed))
        negatives = set(inst.candidates) - inst.positives
        assert not negatives & synthetic_split.interacted(user)


@pytest.fixture(scope="module")
def synthetic_stats_fx(synthetic_stats):
    return synthetic_stats


# ---------------------------------------------------------------- position

@pytest.fixture
def ranking_instance(synthetic_split, synthetic_stats_fx):
    return build_ranking_instance("5", synthetic_split, synthetic_stats_fx, 10, NegativeSampler(SamplerSpec()), random.Random(3))


def test_position_variants(ranking_instance):
    variants = position_probe(ranking_instance, [1, 5, 10])
    assert len(variants) == 3
    for pos, v in zip([1, 5, 10], variants):
        assert v.presented[pos - 1] == ranking_instance.positive
        assert sorted(v.presented) == sorted(ranking_instance.presented)
        assert v.label_map["position"] == str(pos)


def test_position_one_on_positive_first_is_identity(ranking_instance):
    (first,) = position_probe(ranking_instance, [1])
    (again,) = position_probe(first, [1])
    assert again.presentation_order == first.presentation_order


def test_position_out_of_range(ranking_instance):
    with pytest.raises(ConfigError):
        position_probe(ranking_instance, [11])


@settings(suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.integers(1, 10), min_size=1, max_size=10))
def test_position_conservation(ranking_instance, positions):
    for pos, v in zip(positions, position_probe(ranking_instance, positions)):
        assert v.presented[pos - 1] == ranking_instance.positive
        assert sorted(v.presented) == sorted(ranking_instance.presented)


# -------------------------------------------------------------- popularity

def test_popularity_probe_shares_positives(synthetic_split, synthetic_stats_fx):
    users = synthetic_split.users[:6]
    sets = popularity_probe(users, synthetic_split, synthetic_stats_fx, [SamplerSpec("uniform"), SamplerSpec("debias")], p=3, c=10)
    assert [s.label for s in sets] == ["uniform", "debias"]
    a, b = sets
    assert [i.positives for i in a.instances] == [i.positives for i in b.instances]
    assert [i.user_id for i in a.instances] == [i.user_id for i in b.instances]
    assert popularity_probe(users, synthetic_split, synthetic_stats_fx, []) == []


def test_negative_universe_excludes_interactions(synthetic_split):
    universe = negative_universe(synthetic_split, "1")
    assert not set(universe) & synthetic_split.interacted("1")


# -------------------------------------------------------------- attributes

def test_attribute_plan_matches_table_layout():
    cells = attribute_probe_config(DEFAULT_MASKS, ("random", "debias"))
    assert len(cells) == 28
    assert {c.generator for c in cells} == {"empty"}
    labels = {c.mask_label for c in cells}
    assert labels == {"title", "genre", "rating", "popularity", "title+genre", "rating+popularity", "title+genre+rating+popularity"}
    assert {c.setting for c in cells} == {"3:10", "3:6"}


def test_attribute_plan_single_cell_and_errors():
    cells = attribute_probe_config([frozenset({"popularity"})], "random", [(3, 10)])
    assert [(c.mask_label, c.sampling, c.setting) for c in cells] == [("popularity", "random", "3:10")]
    with pytest.raises(ConfigError):
        attribute_probe_config([frozenset()])
    with pytest.raises(ConfigError):
        attribute_probe_config([])
