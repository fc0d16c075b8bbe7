"""Planted-topic synthetic datasets with ground-truth user interests."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

TOPIC_WORDS = (
    "fantasy", "mystery", "romance", "history", "astronomy", "cooking", "travel", "poetry",
    "horror", "biography", "philosophy", "economics", "gardening", "music", "sports",
    "technology", "religion", "painting", "comics", "psychology", "politics", "parenting",
    "fitness", "chemistry", "mythology", "finance", "wildlife", "architecture", "chess", "sailing",
)


def topic_name(t: int) -> str:
    return TOPIC_WORDS[t] if t < len(TOPIC_WORDS) else f"theme{t}"


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 500
    n_items: int = 200
    n_clusters: int = 20
    interactions_per_user: int = 20
    noise_rate: float = 0.2
    seed: int = 0
    kg_coverage: float = 1.0

    def __post_init__(self):
        if not 1 <= self.n_clusters <= self.n_items:
            raise ConfigError("need 1 <= n_clusters <= n_items")
        if not 0 <= self.noise_rate <= 1:
            raise ConfigError("noise_rate must lie in [0, 1]")
        if not 0 <= self.kg_coverage <= 1:
            raise ConfigError("kg_coverage must lie in [0, 1]")


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    item_topic: np.ndarray  # (n_items,)
    user_topics: list[tuple[int, ...]]
    interactions: list[tuple[str, str]]
    triples: list[tuple[str, str, str]]
    projection: list[tuple[str, str]]
    interests: dict[str, list[str]]
    titles: dict[str, str]

    def write(self, out_dir) -> dict[str, str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: str(out / f) for k, f in (
            ("ratings", "ratings.tsv"), ("kg", "kg.tsv"), ("projection", "projection.tsv"),
            ("fixture", "interests.jsonl"), ("titles", "titles.tsv"), ("truth", "truth.json"))}
        with open(paths["ratings"], "w", encoding="utf-8") as fh:
            fh.writelines(f"{u}\t{i}\t1\n" for u, i in self.interactions)
        with open(paths["kg"], "w", encoding="utf-8") as fh:
            fh.writelines(f"{h}\t{r}\t{t}\n" for h, r, t in self.triples)
        with open(paths["projection"], "w", encoding="utf-8") as fh:
            fh.writelines(f"{i}\t{e}\n" for i, e in self.projection)
        with open(paths["fixture"], "w", encoding="utf-8") as fh:
            fh.writelines(json.dumps({"user": u, "interests": p}) + "\n" for u, p in self.interests.items())
        with open(paths["titles"], "w", encoding="utf-8") as fh:
            fh.writelines(f"{i}\t{t}\n" for i, t in self.titles.items())
        with open(paths["truth"], "w", encoding="utf-8") as fh:
            json.dump({"item_topic": self.item_topic.tolist(),
                       "user_topics": [list(t) for t in self.user_topics]}, fh)
        return paths


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Users draw items from their latent topics with prob ``1 - noise_rate``,
    otherwise uniformly. Items are not repeated; a user stops early once the
    pool a draw needs is exhausted."""
    rng = np.random.default_rng(spec.seed)
    item_topic = np.empty(spec.n_items, dtype=np.int64)
    item_topic[rng.permutation(spec.n_items)] = np.arange(spec.n_items) % spec.n_clusters
    topic_items = [np.flatnonzero(item_topic == t) for t in range(spec.n_clusters)]

    user_topics, interactions, interests = [], [], {}
    for u in range(spec.n_users):
        k = int(rng.integers(1, min(3, spec.n_clusters) + 1))
        topics = tuple(sorted(int(t) for t in rng.choice(spec.n_clusters, k, replace=False)))
        user_topics.append(topics)
        pool = set(np.concatenate([topic_items[t] for t in topics]).tolist())
        used: set[int] = set()
        for _ in range(spec.interactions_per_user):
            source = pool if rng.random() >= spec.noise_rate else range(spec.n_items)
            free = sorted(set(source) - used)
            if not free:
                break
            i = free[int(rng.integers(len(free)))]
            used.add(i)
            interactions.append((f"u{u}", f"i{i}"))
        interests[f"u{u}"] = [topic_name(t) for t in topics]

    seen = {int(i[1:]) for _, i in interactions}
    linked = (rng.random(spec.n_items) < spec.kg_coverage) & np.isin(np.arange(spec.n_items), list(seen))
    projection = [(f"i{i}", f"item_ent{i}") for i in range(spec.n_items) if linked[i]]
    triples = [(f"item_ent{i}", "has_topic", f"topic_{topic_name(int(item_topic[i]))}")
               for i in range(spec.n_items) if linked[i]]
    titles = {f"i{i}": f"{topic_name(int(item_topic[i])).title()} volume {i}" for i in range(spec.n_items)}
    return SyntheticData(spec, item_topic, user_topics, interactions, triples, projection, interests, titles)
