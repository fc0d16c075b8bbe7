from __future__ import annotations

import numpy as np
import pytest

from cikg.data import InteractionSet, empty_kg, interactions_from_pairs, split_interactions


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def random_interactions(rng, n_users=20, n_items=15, density=0.3, min_per_user=1) -> InteractionSet:
    pairs = []
    for u in range(n_users):
        items = np.flatnonzero(rng.random(n_items) < density)
        if len(items) < min_per_user:
            items = rng.choice(n_items, size=min_per_user, replace=False)
        pairs += [(f"u{u}", f"i{i}") for i in items]
    return interactions_from_pairs(pairs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_split(rng):
    ix = random_interactions(rng, n_users=30, n_items=25, density=0.35, min_per_user=4)
    return ix, split_interactions(ix, (0.7, 0.1, 0.2), seed=7), empty_kg(ix)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    results = getattr(test_acceptance, "RESULTS", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"[{status}] criterion {n}: {detail}")
