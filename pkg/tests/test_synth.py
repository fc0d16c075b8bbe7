from __future__ import annotations

import json

import numpy as np
import pytest

from cikg.errors import ConfigError
from cikg.synth import SyntheticSpec, generate_synthetic


def _topics(data, raw_item):
    return int(data.item_topic[int(raw_item[1:])])


def test_noise_free_interactions_on_topic():
    data = generate_synthetic(SyntheticSpec(n_users=100, noise_rate=0.0, seed=3))
    for u, i in data.interactions:
        assert _topics(data, i) in data.user_topics[int(u[1:])]


def test_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=4))
    b = generate_synthetic(SyntheticSpec(seed=4))
    assert a.interactions == b.interactions and a.triples == b.triples and a.interests == b.interests
    assert generate_synthetic(SyntheticSpec(seed=5)).interactions != a.interactions


def test_within_topic_fraction():
    spec = SyntheticSpec(n_users=3000, n_items=400, n_clusters=20, interactions_per_user=10, noise_rate=0.3, seed=1)
    data = generate_synthetic(spec)
    on = sum(_topics(data, i) in data.user_topics[int(u[1:])] for u, i in data.interactions)
    share = np.mean([sum(np.sum(data.item_topic == t) for t in ts) / spec.n_items for ts in data.user_topics])
    expected = 1 - spec.noise_rate + spec.noise_rate * share
    assert on / len(data.interactions) == pytest.approx(expected, abs=0.01)


def test_structure_and_files(tmp_path):
    spec = SyntheticSpec(n_users=50, n_items=40, n_clusters=5, seed=0)
    data = generate_synthetic(spec)
    assert set(np.bincount(data.item_topic)) == {8}
    assert all(1 <= len(t) <= 3 for t in data.user_topics)
    counts = {}
    for u, _ in data.interactions:
        counts[u] = counts.get(u, 0) + 1
    assert max(counts.values()) <= spec.interactions_per_user
    assert len(set(data.interactions)) == len(data.interactions)
    for h, r, t in data.triples:
        assert r == "has_topic" and t.startswith("topic_")
    paths = data.write(tmp_path)
    rows = [json.loads(x) for x in open(paths["fixture"])]
    assert rows[0]["interests"] == data.interests[rows[0]["user"]]
    assert len(open(paths["ratings"]).readlines()) == len(data.interactions)


@pytest.mark.parametrize("kw", [dict(n_clusters=0), dict(n_clusters=300), dict(noise_rate=1.5), dict(kg_coverage=-1)])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        SyntheticSpec(**kw)
