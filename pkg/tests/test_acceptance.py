"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is
printed in the terminal summary (see conftest.py)."""
from __future__ import annotations

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import hypergeom

from cikg import cli
from cikg import pipeline as P
from cikg.data import IdMap, dataset_stats, interactions_from_pairs, load_interactions, load_kg, split_interactions
from cikg.encoder import propagate
from cikg.graph import normalize
from cikg.metrics import evaluate, ndcg_at_k, rank_from_scores, recall_at_k
from cikg.objectives import (
    MaskSchedule,
    bpr_loss,
    delta_exponential,
    delta_linear,
    info_nce,
    reconstruction_loss,
    transe_loss,
)
from cikg.synth import SyntheticSpec, generate_synthetic
from cikg.trainer import fit, gradient_check

from .test_encoder import dense_propagate, random_graph
from .test_metrics import naive_ndcg, naive_rank, naive_recall

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str):
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {n}: {detail}"


def test_c01_scheduler_dominance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_gap, worst_end, n = np.inf, 0.0, 0
    while n < 200:
        omega = rng.uniform(0.0, 1.0)
        alpha = rng.uniform(0.0, omega)
        if not 0 < alpha < omega <= 1:
            continue
        cap = int(rng.integers(10, 501))
        q = np.arange(1, cap)
        gap = delta_linear(alpha, omega, cap, q) - delta_exponential(alpha, omega, cap, q)
        worst_gap = min(worst_gap, float(gap.min()))
        worst_end = max(worst_end, abs(delta_exponential(alpha, omega, cap, 0) - delta_linear(alpha, omega, cap, 0)),
                        abs(delta_exponential(alpha, omega, cap, cap) - delta_linear(alpha, omega, cap, cap)))
        n += 1
    dt = time.perf_counter() - t0
    record(1, worst_gap > 0 and worst_end <= 1e-12 and dt < 1.0,
           f"200 configs, min(lin-exp)={worst_gap:.3e}, endpoint err={worst_end:.1e}, {dt:.2f}s")


def test_c02_scheduler_spot_values():
    lin = MaskSchedule(0.02, 0.95, 150, "linear")
    exp = MaskSchedule(0.02, 0.95, 150, "exponential")
    p75 = exp.rate(75)
    ok = (lin.rate(0) == 0.02 and exp.rate(0) == 0.02 and lin.rate(150) == 0.95 and exp.rate(150) == 0.95
          and abs(p75 - 0.1378405) <= 1e-6)
    record(2, ok, f"p0=({lin.rate(0)}, {exp.rate(0)}) p150=({lin.rate(150)}, {exp.rate(150)}) exp p75={p75:.7f}")


def test_c03_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for loss_id in ("rec", "recon", "contrast", "transe"):
        worst[loss_id] = max(gradient_check(loss_id, seed, tol=1e-4, dim=8).max_rel_error for seed in range(5))
    dt = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and dt < 10
    record(3, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" (5 seeds, D=8, {dt:.1f}s)")


def test_c04_propagation_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        g = random_graph(rng)
        layers = int(rng.integers(0, 5))
        Z = rng.normal(size=(g.n_nodes, 8))
        worst = max(worst, float(np.max(np.abs(propagate(Z, normalize(g), layers) - dense_propagate(g, Z, layers)))))
    dt = time.perf_counter() - t0
    record(4, worst <= 1e-10 and dt < 5, f"50 graphs, max abs err={worst:.1e}, {dt:.2f}s")


def test_c05_metric_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        n_items = int(rng.integers(2, 31))
        scores = np.round(rng.normal(size=n_items), 1)
        exclude = set(rng.choice(n_items, int(rng.integers(0, n_items)), replace=False).tolist())
        rest = [i for i in range(n_items) if i not in exclude]
        test = set(rng.choice(rest, int(rng.integers(1, len(rest) + 1)), replace=False).tolist())
        k = int(rng.integers(1, 40))
        r = rank_from_scores(scores, exclude, k)
        want = naive_rank(scores, exclude, k)
        assert list(r.items) == want
        worst = max(worst, abs(recall_at_k(r, test) - naive_recall(want, test)),
                    abs(ndcg_at_k(r, test) - naive_ndcg(want, test, k)))

    # random embeddings on a 1000-user planted-topic set: each user's hit count
    # is hypergeometric over its eligible (non-excluded) items
    data = generate_synthetic(SyntheticSpec(n_users=1000, seed=5))
    ix = interactions_from_pairs(data.interactions, 5)
    sp = split_interactions(ix, (0.7, 0.1, 0.2), 2024)
    K = 50
    Z = rng.normal(size=(ix.n_users + ix.n_items, 32))
    rep = evaluate(Z, sp, (K,), item_node=ix.n_users + np.arange(ix.n_items))
    excl = sp.train.user_degrees() + sp.valid.user_degrees()
    tdeg = sp.test.user_degrees()
    users = np.flatnonzero(tdeg > 0)
    means, variances = [], []
    for u in users:
        pool, t = int(ix.n_items - excl[u]), int(tdeg[u])
        k = min(K, pool)
        means.append(k / pool)
        variances.append(hypergeom(pool, t, k).var() / t ** 2)
    expected = float(np.mean(means))
    sigma = math.sqrt(np.sum(variances)) / len(users)
    z = (rep.recall[K] - expected) / sigma
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and abs(z) <= 3 and dt < 30
    record(5, ok, f"oracle max err={worst:.1e}; random Recall@50={rep.recall[K]:.4f} vs K/|I_eligible|="
                  f"{expected:.4f} (z={z:+.2f}, K/|I|={K / ix.n_items:.4f}); {dt:.1f}s")


def test_c06_loss_closed_forms():
    tied = bpr_loss(np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]]), [[0, 1, 2]])[0]
    Z = np.array([[1.0, 2.0], [-3.0, 0.5]])
    perfect = reconstruction_loss(Z, Z, [0, 1], 2.0)[0]
    antipodal = reconstruction_loss(Z, -Z, [0, 1], 2.0)[0]
    nce = info_nce(np.eye(2), np.eye(2), 1.0)[0]
    Zt = np.array([[1.0, 0.0], [1.5, 1.0], [1.5, 2.0]])
    te = transe_loss(Zt, np.array([[0.5, 1.0]]), [[0, 0, 1, 2]])[0]
    # exact-valued cases carry the cosine stabiliser's O(1e-12 / ||v||) offset
    exact = 1e-9
    ok = (abs(tied - math.log(2)) <= exact and abs(perfect) <= exact and abs(antipodal - 4) <= exact
          and abs(nce - 0.62652) <= 1e-5 and abs(te - 0.313262) <= 1e-6)
    record(6, ok, f"bpr_tied={tied:.6f} Lu_perfect={perfect:.1e} Lu_antipodal={antipodal:.6f} "
                  f"infonce={nce:.6f} transe={te:.6f}")


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("planted")
    t0 = time.perf_counter()
    paths = generate_synthetic(SyntheticSpec(n_users=500, n_items=200, n_clusters=20, interactions_per_user=20,
                                             noise_rate=0.2, seed=0)).write(out / "data")
    cfg = P.synthetic_config(paths, str(out / "run"), kappa=20)
    (out / "config.json").write_text(json.dumps(cfg))
    variants = "full,w/o UIK,w/o DMR,CG,CIG,CKG,CIKG"
    code = cli.main(["ablate", "--config", str(out / "config.json"), "--variants", variants, "--seeds", "0,1,2,3,4"])
    assert code == 0
    return P.read_ablation(out / "run" / "ablation.tsv"), time.perf_counter() - t0


def test_c07_ablation_directionality(ablation):
    table, dt = ablation
    r = {v: table[(v, "recall@50")] for v in ("full", "w/o UIK", "w/o DMR")}
    ok = r["full"][0] > r["w/o UIK"][0] and r["w/o DMR"][0] <= r["full"][0] and dt < 300
    record(7, ok, " ".join(f"{v}={m:.4f}±{s:.4f}" for v, (m, s) in r.items()) + f" (grid {dt:.0f}s)")


def test_c08_auxiliary_structure(ablation):
    table, dt = ablation
    present = {v for v, _ in table}
    r = {v: table[(v, "recall@50")] for v in P.AUX_VARIANTS if v in present}
    ok = set(P.AUX_VARIANTS) <= present and r["CIG"][0] > r["CG"][0] and dt < 300
    record(8, ok, " ".join(f"{v}={m:.4f}±{s:.4f}" for v, (m, s) in r.items()))


# published dataset statistics; files are looked up under $CIKG_DATA_DIR/<name>/{ratings,kg,projection}.tsv
PUBLISHED_STATS = {
    "dbbook2014": (5, dict(n_users=5576, n_items=2680, n_ratings=65961, n_relations=13, n_entities=8762,
                           n_triples=134223), 0.44),
    "bookcrossing": (5, dict(n_users=6616, n_items=8853, n_ratings=110662, n_relations=4, n_entities=1404,
                             n_triples=1137), 0.19),
    "ml1m": (10, dict(n_users=6040, n_items=3260, n_ratings=998539, n_relations=20, n_entities=14377,
                      n_triples=415104), 5.07),
}


def test_c09_ingestion_fidelity():
    root = os.environ.get("CIKG_DATA_DIR")
    found = {name: Path(root) / name for name in PUBLISHED_STATS if root and (Path(root) / name / "ratings.tsv").exists()}
    if not found:
        RESULTS[9] = (None, "SKIPPED: real datasets absent (set CIKG_DATA_DIR)")
        print("criterion 9: SKIPPED real datasets absent (set CIKG_DATA_DIR)")
        pytest.skip("real DBbook2014 / Book-Crossing / MovieLens-1M files not supplied")
    lines, ok = [], True
    for name, d in found.items():
        t0 = time.perf_counter()
        min_freq, want, density_pct = PUBLISHED_STATS[name]
        ix = load_interactions(d / "ratings.tsv", min_freq)
        kg = load_kg(d / "kg.tsv", d / "projection.tsv", ix, strict=False)
        s = dataset_stats(ix, kg)
        got = {k: getattr(s, k) for k in want}
        good = got == want and round(100 * s.density, 2) == density_pct and time.perf_counter() - t0 < 30
        ok &= good
        lines.append(f"{name}={'ok' if good else got}")
    record(9, ok, " ".join(lines))


def test_c10_training_sanity(tmp_path):
    t0 = time.perf_counter()
    data = generate_synthetic(SyntheticSpec(seed=0))
    keep = {f"u{u}" for u in range(50)}
    data.interactions = [(u, i) for u, i in data.interactions if u in keep]
    data.interests = {u: p for u, p in data.interests.items() if u in keep}
    items = {i for _, i in data.interactions}
    data.projection = [(i, e) for i, e in data.projection if i in items]
    ents = {e for _, e in data.projection}
    data.triples = [t for t in data.triples if t[0] in ents]
    paths = data.write(tmp_path / "data")
    cfg = P.synthetic_config(paths, str(tmp_path / "run_a"), kappa=20, max_epochs=50, patience=1000)
    ds = P.load_dataset(cfg)
    asg = P.run_cluster(cfg, P.run_interests(cfg, ds))
    drops = []
    for seed in range(5):
        tc, graphs = P.graphs_for(ds, asg, "full", P.train_config(P.deep_merge(cfg, {"train": {"seed": seed}})))
        log = fit(tc, ds.split, graphs).log
        drops.append((log[0]["loss_r"], log[49]["loss_r"]))
    decreasing = all(b < a for a, b in drops)

    P.run_pipeline(cfg)
    P.run_pipeline(P.deep_merge(cfg, {"out": str(tmp_path / "run_b")}))
    a, b = tmp_path / "run_a", tmp_path / "run_b"
    same = all((a / f).read_bytes() == (b / f).read_bytes()
               for f in ("metrics.json", "embeddings.tsv", "graph.tsv", "user_interest.tsv"))
    ckpt = sorted(p.name for p in a.glob("checkpoint_*.bin"))
    same &= ckpt == sorted(p.name for p in b.glob("checkpoint_*.bin")) and \
        (a / ckpt[0]).read_bytes() == (b / ckpt[0]).read_bytes()
    dt = time.perf_counter() - t0
    record(10, decreasing and same and dt < 60,
           f"L_r epoch1->50: " + ", ".join(f"{x:.1f}->{y:.1f}" for x, y in drops)
           + f"; rerun byte-identical={same}; {dt:.1f}s")
