import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entalign.knowledge import tokenize
from entalign.reports import ExistLabel, parse_report
from entalign.world import (
    DESK_ENTITIES,
    WorldSpec,
    generate_dataset,
    paper_world,
    split,
    split_sizes,
)


@pytest.fixture(scope="module")
def big_dataset(spec, kb, grammar):
    return generate_dataset(spec, 2000, 11, kb, grammar)


def test_generation_is_deterministic(spec, kb, grammar):
    a = generate_dataset(spec, 15, 5, kb, grammar)
    b = generate_dataset(spec, 15, 5, kb, grammar)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.labels, y.labels)
        assert x.report == y.report and x.triplets == y.triplets
        assert x.masks.keys() == y.masks.keys()
        assert all(np.array_equal(x.masks[k], y.masks[k]) for k in x.masks)


def test_samples_depend_only_on_seed_and_index(spec, kb, grammar):
    long = generate_dataset(spec, 12, 5, kb, grammar)
    short = generate_dataset(spec, 4, 5, kb, grammar)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(long, short))


def test_zero_noise_single_entity_mask_is_the_blob_support():
    spec = WorldSpec(entities=DESK_ENTITIES[:1], unseen=(), noise=0.0, prevalence=0.6)
    samples = generate_dataset(spec, 40, 2)
    positives = [s for s in samples if s.labels[0]]
    assert positives
    for s in samples:
        if s.labels[0]:
            assert np.array_equal(s.image[:, :, 0] > 0, s.masks[0])
        else:
            assert not s.image.any()


def test_prevalence_within_three_sigma(big_dataset, spec, kb):
    n = len(big_dataset)
    counts = np.sum([s.labels for s in big_dataset], axis=0)
    for e in range(len(kb.names)):
        if e in kb.unseen:
            p = spec.unseen_prevalence
        else:
            p = spec.prevalence + spec.uncertain_rate * spec.uncertain_render_prob
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(counts[e] - n * p) <= 3 * sigma, (kb.names[e], counts[e], n * p)


def test_label_mask_consistency(big_dataset):
    for s in big_dataset:
        assert set(s.masks) == set(np.flatnonzero(s.labels).tolist())
        assert all(m.any() for m in s.masks.values())


def test_present_findings_are_always_reported(big_dataset):
    for s in big_dataset:
        present = {t.entity for t in s.triplets if t.exist == ExistLabel.PRESENT}
        assert present <= set(s.masks)


def test_reports_parse_back_to_provenance(big_dataset, grammar):
    assert all(parse_report(s.report, grammar) == s.triplets for s in big_dataset)


def test_unseen_entities_stay_out_of_train_and_val(big_dataset, kb, grammar):
    unseen = set(kb.unseen)
    train, val, test = split(big_dataset, (0.6, 0.2, 0.2), 0)
    for s in train + val:
        assert not unseen & set(np.flatnonzero(s.labels).tolist())
        assert not unseen & {t.entity for t in parse_report(s.report, grammar)}
    assert any(s.has_unseen for s in test)


def test_descriptions_list_exactly_the_attribute_words():
    for spec in (WorldSpec(), paper_world()):
        kb = spec.knowledge_base()
        for ent, desc in zip(spec.entities, kb.descriptions):
            words = set(tokenize(desc)) - {"it", "appears", "and"}
            assert words == set(ent.attributes)


@pytest.mark.parametrize("spec", [WorldSpec(), paper_world()], ids=["desk", "paper"])
def test_unseen_entity_recombines_seen_attributes(spec):
    seen = [e for e in spec.entities if e.name not in spec.unseen]
    for e in (x for x in spec.entities if x.name in spec.unseen):
        assert e.attributes not in {s.attributes for s in seen}
        for d, word in enumerate(e.attributes):
            assert word in {s.attributes[d] for s in seen}


def test_paper_world_sizes():
    kb = paper_world().knowledge_base()
    assert (kb.num_queries, kb.num_positions) == (75, 51)


def test_split_sizes_example():
    assert split_sizes(10, (0.6, 0.2, 0.2)) == [6, 2, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.lists(st.integers(1, 10), min_size=2, max_size=4))
def test_split_sizes_sum_to_n(n, weights):
    fr = np.array(weights) / sum(weights)
    sizes = split_sizes(n, fr)
    assert sum(sizes) == n and all(abs(s - f * n) < 1 for s, f in zip(sizes, fr))


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (1.2, -0.1, -0.1)])
def test_bad_fractions(fractions):
    with pytest.raises(ValueError):
        split_sizes(10, fractions)


def test_split_partitions_and_is_reproducible(small_dataset):
    parts = split(small_dataset, (0.6, 0.2, 0.2), 4)
    ids = [sorted(s.index for s in p) for p in parts]
    flat = sum(ids, [])
    assert sorted(flat) == list(range(len(small_dataset))) and len(set(flat)) == len(flat)
    assert [len(p) for p in parts] == [36, 12, 12]
    again = split(small_dataset, (0.6, 0.2, 0.2), 4)
    assert ids == [sorted(s.index for s in p) for p in again]


def test_split_rejects_too_many_unseen(small_dataset):
    with pytest.raises(ValueError):
        split(small_dataset, (0.98, 0.01, 0.01), 0)


@pytest.mark.parametrize("change", [
    dict(grid=(3, 2), position_names=tuple("abcdef")),
    dict(entities=()),
    dict(unseen=("unknown",)),
    dict(position_names=("a", "b", "c", "other")),
    dict(prevalence=0.99),
    dict(noise=-1.0),
    dict(slot=5),
])
def test_spec_validation(change):
    with pytest.raises(ValueError):
        WorldSpec(**change).validate()


def test_generate_needs_at_least_one_sample(spec):
    with pytest.raises(ValueError):
        generate_dataset(spec, 0, 0)


def test_spec_dict_round_trip():
    spec = paper_world()
    assert WorldSpec.from_dict(spec.to_dict()) == spec
    assert WorldSpec.from_dict(spec.to_dict()).spec_hash() == spec.spec_hash()
