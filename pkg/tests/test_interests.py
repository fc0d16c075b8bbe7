from __future__ import annotations

import itertools
import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cikg.errors import ContractError
from cikg.interests import (
    FixtureClient,
    InterestAssignment,
    InterestCorpus,
    LiveClient,
    Prompt,
    PromptTemplate,
    build_prompts,
    cluster_interests,
    infer_interests,
    parse_completion,
    render_prompt,
    spherical_kmeans,
    tfidf_matrix,
    tokenize,
)

TMPL = PromptTemplate()


def test_prompt_mentions_titles_and_cap():
    text = render_prompt(TMPL, ["Dune", "Emma"], 5)
    assert "Dune" in text and "Emma" in text and "5" in text
    assert text == render_prompt(TMPL, ["Dune", "Emma"], 5)


def test_prompt_truncates_to_most_recent():
    titles = [f"Title number {k:02d}" for k in range(30)]
    text = render_prompt(TMPL, titles, 5, budget=20)
    kept = [t for t in titles if t in text]
    assert kept == titles[10:]
    assert all(text.count(t) == 1 for t in kept)


def test_prompt_empty_history():
    with pytest.raises(ContractError):
        render_prompt(TMPL, [], 5)


@given(st.lists(st.text("abcdefgh ", min_size=3, max_size=12).map(str.strip).filter(bool),
                min_size=1, max_size=15, unique=True))
def test_prompt_every_title_once(titles):
    lines = render_prompt(TMPL, titles, 3, budget=0).splitlines()
    for t in titles:
        assert lines.count(f"- {t}") == 1


def test_parse_bullets():
    assert parse_completion("- sci-fi\n- cooking") == ["sci-fi", "cooking"]


@pytest.mark.parametrize("text, expected", [
    ('["space opera", "baking"]', ["space opera", "baking"]),
    ('```json\n["a b", "c d"]\n```', ["a b", "c d"]),
    ("1. jazz\n2) opera\n\n* chess", ["jazz", "opera", "chess"]),
    ("", []),
])
def test_parse_formats(text, expected):
    assert parse_completion(text) == expected


def test_fixture_passthrough(tmp_path):
    path = tmp_path / "fx.jsonl"
    path.write_text(json.dumps({"user": "u1", "interests": ["fantasy epics", "military history"]}) + "\n")
    corpus = infer_interests(FixtureClient(path), [Prompt("u1", "", "x")])
    assert corpus.per_user == {"u1": ["fantasy epics", "military history"]}
    assert corpus.provenance["u1"] == "fixture"


def _completion(content):
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


def test_live_http_500_isolated():
    calls = {"bad": 0}

    def handler(request):
        body = json.loads(request.content)
        if "BAD" in body["messages"][1]["content"]:
            calls["bad"] += 1
            return httpx.Response(500, json={"error": "boom"})
        return httpx.Response(200, json=_completion("- sci-fi\n- cooking"))

    client = LiveClient("http://llm.test/v1/chat/completions", backoff=0.0,
                        transport=httpx.MockTransport(handler), api_key="k")
    prompts = [Prompt("u1", "s", "history GOOD"), Prompt("u2", "s", "history BAD"), Prompt("u3", "s", "GOOD")]
    corpus = infer_interests(client, prompts, parallelism=2)
    assert calls["bad"] == 3
    assert set(corpus.failures) == {"u2"}
    assert corpus.per_user == {"u1": ["sci-fi", "cooking"], "u3": ["sci-fi", "cooking"]}
    assert corpus.provenance["u1"] == "llm"


def test_live_request_shape(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=_completion("nothing useful\n"))

    monkeypatch.setenv("CIKG_LLM_API_KEY", "secret")
    client = LiveClient("http://llm.test/v1", transport=httpx.MockTransport(handler))
    corpus = infer_interests(client, [Prompt("u", "sys", "hi")])
    assert seen["auth"] == "Bearer secret"
    assert seen["body"]["model"] == "gpt-3.5-turbo-0125" and seen["body"]["temperature"] == 0.0
    assert corpus.per_user["u"] == ["nothing useful"]


def test_live_unparseable_gives_warning():
    client = LiveClient("http://llm.test/v1", transport=httpx.MockTransport(
        lambda r: httpx.Response(200, json=_completion("   "))))
    corpus = infer_interests(client, [Prompt("u", "s", "t")])
    assert corpus.per_user["u"] == [] and "u" in corpus.warnings


def test_tokenize():
    assert tokenize("Sci-Fi & a B2B World!") == ["sci", "fi", "b2b", "world"]


def _corpus(d):
    c = InterestCorpus()
    for u, ps in d.items():
        c.add(u, ps, "fixture")
    return c


def test_kappa_one():
    a = cluster_interests(_corpus({"a": ["x y", "zz"], "b": ["ww"], "c": []}), 1)
    assert set(a.phrase_cluster.values()) == {0}
    assert a.membership == {"a": frozenset({0}), "b": frozenset({0}), "c": frozenset()}


def test_kappa_clamped():
    a = cluster_interests(_corpus({"a": ["red apples", "blue sky"]}), 5)
    assert a.kappa == 2 and a.warnings


def test_shared_phrase_same_cluster():
    corpus = _corpus({"a": ["self-help motivational", "garden tools"],
                      "b": ["self-help motivational"], "c": ["jazz records"]})
    a = cluster_interests(corpus, 2, seed=3)
    assert a.membership["b"] <= a.membership["a"]


def _objective(X, labels):
    total = 0.0
    for c in set(labels):
        members = X[np.asarray(labels) == c]
        centroid = members.sum(0)
        centroid /= np.linalg.norm(centroid)
        total += float(np.sum(1.0 - members @ centroid))
    return total


def test_disjoint_phrases_each_own_cluster():
    phrases = ["space opera", "french cooking", "jazz music"]
    a = cluster_interests(_corpus({"u": phrases}), 3, seed=0)
    labels = [a.phrase_cluster[p] for p in phrases]
    assert sorted(labels) == [0, 1, 2]
    X = tfidf_matrix(phrases)
    best = _objective(X, labels)
    assert best == pytest.approx(0.0, abs=1e-12)
    # every assignment that merges two phrases has a strictly larger objective
    for assign in itertools.product(range(3), repeat=3):
        if len(set(assign)) < 3:
            assert _objective(X, list(assign)) > best + 0.5


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["sci fi", "space opera", "cooking", "baking bread", "jazz",
                                           "jazz piano", "history", "war history", "poetry"]),
                         max_size=4), min_size=1, max_size=8),
       st.integers(1, 6), st.integers(0, 50))
def test_cluster_properties(lists, kappa, seed):
    corpus = _corpus({f"u{k}": ps for k, ps in enumerate(lists)})
    if not corpus.distinct_phrases():
        return
    a = cluster_interests(corpus, kappa, seed)
    b = cluster_interests(corpus, kappa, seed)
    assert a == b
    assert all(c < a.kappa for m in a.membership.values() for c in m)
    assert len(set(a.phrase_cluster.values())) <= min(kappa, len(corpus.distinct_phrases()))
    for u, ps in corpus.per_user.items():
        assert a.membership[u] == frozenset(a.phrase_cluster[p] for p in ps)
    assert a.n_edges() == sum(len({a.phrase_cluster[p] for p in ps}) for ps in corpus.per_user.values())


def test_kmeans_no_empty_clusters():
    X = tfidf_matrix(["a1 b1", "a1 b1 c1", "a1 c1", "d1 e1", "d1 f1", "g1"])
    labels, _ = spherical_kmeans(X, 4, seed=1)
    assert len(set(labels)) == 4


def test_assignment_round_trip(tmp_path):
    a = cluster_interests(_corpus({"a": ["space opera", "cooking"], "b": ["jazz"]}), 2, seed=0)
    a.write(tmp_path / "c.tsv", tmp_path / "u.tsv")
    b = InterestAssignment.read(tmp_path / "c.tsv", tmp_path / "u.tsv")
    assert b.kappa == a.kappa and b.representatives == a.representatives
    assert b.membership == {u: m for u, m in a.membership.items() if m}


def test_corpus_jsonl_round_trip(tmp_path):
    c = _corpus({"a": ["x", "y"], "b": []})
    c.to_jsonl(tmp_path / "i.jsonl")
    assert InterestCorpus.from_jsonl(tmp_path / "i.jsonl").per_user == c.per_user


def test_build_prompts_skips_empty():
    prompts = build_prompts(TMPL, {"a": ["T1"], "b": []}, 5)
    assert [p.user for p in prompts] == ["a"]
