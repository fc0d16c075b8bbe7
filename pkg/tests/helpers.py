"""Small synthetic datasets shared by the trainer / pipeline tests."""
from __future__ import annotations

from cikg import pipeline as P
from cikg.synth import SyntheticSpec, generate_synthetic


def synthetic_dataset(out_dir, n_users=20, n_items=30, n_clusters=3, per_user=8, seed=0, **train):
    paths = generate_synthetic(SyntheticSpec(n_users=n_users, n_items=n_items, n_clusters=n_clusters,
                                             interactions_per_user=per_user, seed=seed)).write(out_dir)
    cfg = P.synthetic_config(paths, str(out_dir / "run"), kappa=n_clusters, **train)
    ds = P.load_dataset(cfg)
    assignment = P.run_cluster(cfg, P.run_interests(cfg, ds))
    return cfg, ds, assignment
