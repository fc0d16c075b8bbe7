"""User-interest inference and clustering.

Interest phrases come from an LLM (``LiveClient``) or a JSON Lines fixture
(``FixtureClient``). Phrases are grouped into ``kappa`` canonical interests
with tf-idf vectors and a seeded spherical k-means.
"""
from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import httpx
import numpy as np
from sklearn.feature_extraction.text import TfidfVectorizer

from .errors import ConfigError, ContractError, LLMTransportError

log = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-3.5-turbo-0125"
API_KEY_ENV = "CIKG_LLM_API_KEY"


@dataclass(frozen=True)
class PromptTemplate:
    system_text: str = (
        "You are a recommender-system assistant. Given the items a user has "
        "interacted with, summarise the user's interests as short phrases."
    )
    user_text_template: str = (
        "The user has interacted with the following items:\n{history}\n\n"
        "List at most {max_interests} interests of this user, one per line, "
        "each a short phrase of a few words. Output only the list."
    )
    history_budget: int = 20

    @classmethod
    def from_dict(cls, d: dict) -> "PromptTemplate":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Prompt:
    user: str
    system: str
    text: str


def render_prompt(tmpl: PromptTemplate, history, max_interests: int, budget: int | None = None) -> str:
    """Render the user prompt.

    ``history`` is in chronological order; when it exceeds the budget only the
    most recent titles are kept. Repeated titles are listed once.
    """
    if not history:
        raise ContractError("cannot render a prompt for an empty history")
    budget = tmpl.history_budget if budget is None else budget
    # keep the most recent occurrence of each title
    titles = list(reversed(dict.fromkeys(reversed(list(history)))))
    if budget and len(titles) > budget:
        titles = titles[-budget:]
    lines = "\n".join(f"- {t}" for t in titles)
    return tmpl.user_text_template.format(history=lines, max_interests=max_interests)


_BULLET = re.compile(r"^\s*(?:[-*•]+|\d+[.)]|\(\d+\))\s*")


def parse_completion(text: str) -> list[str]:
    """Parse a completion into interest phrases.

    Accepts a JSON list of strings (optionally wrapped in a code fence) or a
    bulleted/numbered/plain line list.
    """
    body = text.strip()
    fence = re.match(r"^```[a-zA-Z]*\s*(.*?)\s*```$", body, re.S)
    if fence:
        body = fence.group(1)
    if body.startswith("["):
        try:
            data = json.loads(body)
        except json.JSONDecodeError:
            data = None
        if isinstance(data, list):
            return [p for p in (str(x).strip() for x in data if isinstance(x, (str, int, float))) if p]
    phrases = []
    for line in body.splitlines():
        phrase = _BULLET.sub("", line).strip().strip('"').strip()
        if phrase:
            phrases.append(phrase)
    return phrases


@dataclass
class InterestCorpus:
    per_user: dict[str, list[str]] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)  # user -> "llm" | "fixture"
    failures: dict[str, str] = field(default_factory=dict)  # user -> transport error
    warnings: dict[str, str] = field(default_factory=dict)  # user -> parse warning

    def add(self, user: str, phrases, source: str):
        self.per_user[user] = [p.strip() for p in phrases if p and p.strip()]
        self.provenance[user] = source

    def distinct_phrases(self) -> list[str]:
        return list(dict.fromkeys(p for ps in self.per_user.values() for p in ps))

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for user, phrases in self.per_user.items():
                fh.write(json.dumps({"user": user, "interests": phrases}, ensure_ascii=False) + "\n")

    @classmethod
    def from_jsonl(cls, path, source="fixture") -> "InterestCorpus":
        corpus = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    user, phrases = str(rec["user"]), rec["interests"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ConfigError(f"{path}:{lineno}: bad interest record ({exc})") from exc
                corpus.add(user, [str(p) for p in phrases], source)
        return corpus


class FixtureClient:
    """Serves interest lists verbatim from a JSON Lines fixture."""

    source = "fixture"

    def __init__(self, path):
        self.corpus = InterestCorpus.from_jsonl(path)

    def interests(self, prompt: Prompt) -> list[str]:
        return list(self.corpus.per_user.get(prompt.user, []))


class LiveClient:
    """OpenAI-compatible chat completions endpoint with retry."""

    source = "llm"

    def __init__(self, endpoint_url: str, model: str = DEFAULT_MODEL, api_key: str | None = None,
                 temperature: float = 0.0, max_attempts: int = 3, backoff: float = 1.0,
                 timeout: float = 60.0, transport: httpx.BaseTransport | None = None):
        if not endpoint_url:
            raise ConfigError("llm.endpoint_url is required in live mode")
        self.endpoint_url = endpoint_url
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.temperature = temperature
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete(self, prompt: Prompt) -> str:
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.text},
            ],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.endpoint_url, json=payload, headers=headers)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
                log.debug("attempt %d for user %s failed: %s", attempt + 1, prompt.user, exc)
        raise LLMTransportError(f"user {prompt.user}: {last}")

    def interests(self, prompt: Prompt) -> list[str]:
        return parse_completion(self.complete(prompt))


def infer_interests(client, prompts, parallelism: int = 1) -> InterestCorpus:
    """Run every prompt through ``client``; failures are isolated per user."""
    prompts = list(prompts)

    def one(p):
        try:
            return p, client.interests(p), None
        except LLMTransportError as exc:
            return p, None, str(exc)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(one, prompts))
    else:
        results = [one(p) for p in prompts]

    corpus = InterestCorpus()
    for p, phrases, err in results:
        if err is not None:
            corpus.failures[p.user] = err
            continue
        if not phrases and client.source == "llm":
            corpus.warnings[p.user] = "completion could not be parsed into phrases"
        corpus.add(p.user, phrases, client.source)
    return corpus


@dataclass(frozen=True)
class InterestAssignment:
    kappa: int
    representatives: tuple[str, ...]  # one phrase per cluster id
    membership: dict[str, frozenset[int]]  # raw user id -> cluster ids
    phrase_cluster: dict[str, int]
    warnings: tuple[str, ...] = ()

    def n_edges(self) -> int:
        return sum(len(m) for m in self.membership.values())

    def write(self, cluster_path, user_path):
        with open(cluster_path, "w", encoding="utf-8") as fh:
            for cid, rep in enumerate(self.representatives):
                fh.write(f"{cid}\t{rep}\n")
        with open(user_path, "w", encoding="utf-8") as fh:
            for user, cids in self.membership.items():
                for c in sorted(cids):
                    fh.write(f"{user}\t{c}\n")

    @classmethod
    def read(cls, cluster_path, user_path) -> "InterestAssignment":
        reps = []
        with open(cluster_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    cid, rep = line.rstrip("\n").split("\t", 1)
                    if int(cid) != len(reps):
                        raise ConfigError(f"{cluster_path}: cluster ids must be contiguous")
                    reps.append(rep)
        members: dict[str, set[int]] = {}
        with open(user_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    user, cid = line.rstrip("\n").split("\t")
                    members.setdefault(user, set()).add(int(cid))
        return cls(len(reps), tuple(reps), {u: frozenset(c) for u, c in members.items()}, {})


def tokenize(text: str) -> list[str]:
    return [t for t in re.split(r"[^0-9a-z]+", text.lower()) if len(t) > 1]


def tfidf_matrix(phrases) -> np.ndarray:
    """L2-normalised tf-idf rows over token unigrams."""
    vec = TfidfVectorizer(tokenizer=tokenize, lowercase=False, token_pattern=None, norm="l2")
    return vec.fit_transform(phrases).toarray()


def _kmeanspp(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d = 1.0 - X @ X[centers[0]]
    for _ in range(1, k):
        d = np.maximum(d, 0.0)
        total = d.sum()
        nxt = int(rng.choice(n, p=d / total)) if total > 0 else int(rng.integers(n))
        centers.append(nxt)
        d = np.minimum(d, 1.0 - X @ X[nxt])
    return X[centers].copy()


def _normalize_rows(C):
    norms = np.linalg.norm(C, axis=1, keepdims=True)
    return np.divide(C, norms, out=np.zeros_like(C), where=norms > 0)


def spherical_kmeans(X, k, seed=0, max_iter=100):
    """Cosine k-means on unit rows. Returns labels (n,) and centroids (k, d).

    Empty clusters are re-seeded from the point farthest from its centroid.
    """
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    labels = None
    for _ in range(max_iter):
        sim = X @ C.T
        new = np.argmax(sim, axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.flatnonzero(counts == 0):
            dist = 1.0 - sim[np.arange(len(X)), new]
            donors = counts[new] > 1
            if not donors.any():
                break
            far = int(np.argmax(np.where(donors, dist, -np.inf)))
            counts[new[far]] -= 1
            new[far] = c
            counts[c] = 1
            sim[far] = X[far] @ C.T
            sim[far, c] = 1.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = _normalize_rows(np.stack([X[labels == c].sum(0) for c in range(k)]))
    return labels, C


def cluster_interests(corpus: InterestCorpus, kappa: int, seed: int = 0, max_iter: int = 100) -> InterestAssignment:
    if kappa < 1:
        raise ConfigError(f"kappa must be >= 1, got {kappa}")
    phrases = corpus.distinct_phrases()
    if not phrases:
        raise ContractError("interest corpus has no phrases to cluster")
    warnings = []
    if kappa > len(phrases):
        warnings.append(f"kappa={kappa} exceeds {len(phrases)} distinct phrases; clamped")
        log.warning(warnings[-1])
        kappa = len(phrases)
    if kappa == 1:
        labels = np.zeros(len(phrases), dtype=int)
        X = None
    else:
        X = tfidf_matrix(phrases)
        labels, C = spherical_kmeans(X, kappa, seed=seed, max_iter=max_iter)
    reps = []
    for c in range(kappa):
        idx = np.flatnonzero(labels == c)
        if X is None or len(idx) == 0:
            reps.append(phrases[idx[0]] if len(idx) else "")
            continue
        sims = X[idx] @ C[c]
        reps.append(phrases[idx[int(np.argmax(sims))]])
    phrase_cluster = {p: int(labels[n]) for n, p in enumerate(phrases)}
    membership = {u: frozenset(phrase_cluster[p] for p in ps) for u, ps in corpus.per_user.items()}
    return InterestAssignment(kappa, tuple(reps), membership, phrase_cluster, tuple(warnings))


def build_prompts(tmpl: PromptTemplate, histories: dict[str, list[str]], max_interests: int) -> list[Prompt]:
    """One prompt per user with a non-empty history; others are skipped."""
    return [Prompt(u, tmpl.system_text, render_prompt(tmpl, h, max_interests)) for u, h in histories.items() if h]
