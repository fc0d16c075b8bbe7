"""``cikg`` command line: one subcommand per pipeline stage plus utilities.

Every stage shares the same config (JSON file + ``--set key=value``) and
the same ``--out`` directory, where later stages pick up earlier artifacts.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import interests as I
from . import pipeline as P
from .errors import CIKGError, ConfigError
from .metrics import evaluate
from .synth import SyntheticSpec, generate_synthetic
from .trainer import LOSS_IDS, final_embeddings, fit, gradient_check, load_checkpoint, save_checkpoint

def _config(args) -> dict:
    cfg = P.load_config(args.config, args.set or [])
    if args.out:
        cfg["out"] = args.out
    return cfg


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path}; run `cikg {hint}` first")
    return path


def _assignment(out: Path) -> I.InterestAssignment:
    return I.InterestAssignment.read(_require(out / "interest_cluster.tsv", "cluster"),
                                     _require(out / "user_interest.tsv", "cluster"))


def _latest_checkpoint(out: Path) -> Path:
    found = sorted(glob.glob(str(out / "checkpoint_*.bin")),
                   key=lambda p: int(re.search(r"checkpoint_(\d+)\.bin$", p).group(1)))
    if not found:
        raise ConfigError(f"no checkpoint_*.bin in {out}; run `cikg train` first")
    return Path(found[-1])


def cmd_ingest(args):
    cfg = _config(args)
    P.validate_config(cfg, stage="ingest")
    ds = P.load_dataset(cfg)
    out = _out(cfg)
    text = ds.stats.to_json()
    (out / "stats.json").write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_interests(args):
    cfg = _config(args)
    if args.mode:
        cfg["llm"]["mode"] = args.mode
    P.validate_config(cfg, stage="interests", interests=True)
    ds = P.load_dataset(cfg)
    corpus = P.run_interests(cfg, ds)
    out = _out(cfg)
    corpus.to_jsonl(out / "interests.jsonl")
    print(f"{len(corpus.per_user)} users with interests, {len(corpus.failures)} failures")


def cmd_cluster(args):
    cfg = _config(args)
    P.validate_config(cfg, need=(), stage="cluster")
    out = Path(cfg["out"])
    corpus = I.InterestCorpus.from_jsonl(_require(out / "interests.jsonl", "interests"))
    assignment = P.run_cluster(cfg, corpus)
    assignment.write(out / "interest_cluster.tsv", out / "user_interest.tsv")
    print(f"kappa={assignment.kappa} interest edges={assignment.n_edges()}")


def _graphs(cfg, out):
    ds = P.load_dataset(cfg)
    tc, graphs = P.graphs_for(ds, _assignment(out), cfg["variant"], P.train_config(cfg))
    return ds, tc, graphs


def cmd_build_graph(args):
    cfg = _config(args)
    P.validate_config(cfg, stage="build-graph")
    out = Path(cfg["out"])
    _, _, graphs = _graphs(cfg, out)
    name = cfg["variant"] if cfg["variant"] in P.AUX_VARIANTS else "CIKG"
    g = graphs.hetero[name]
    g.dump(out / "graph.tsv", out / "nodes.tsv")
    print(f"{name}: {len(graphs.nodes.namespace)} nodes, {len(g.edges)} edges")


def cmd_train(args):
    cfg = _config(args)
    P.validate_config(cfg, stage="train")
    out = Path(cfg["out"])
    ds, tc, graphs = _graphs(cfg, out)
    result = fit(tc, ds.split, graphs, log_path=out / "train_log.jsonl")
    P.clear_checkpoints(out)
    save_checkpoint(out / f"checkpoint_{result.best_epoch}.bin", result.embeddings, result.best_epoch,
                    {"D": tc.dim, "l": tc.layers, "seed": tc.seed})
    result.embeddings.export(out / "embeddings.tsv", out / "manifest.json", tc.layers, tc.seed, result.best_epoch)
    print(f"best epoch {result.best_epoch}, valid recall@{tc.eval_k} {result.best_valid_metric:.6f}")


def cmd_evaluate(args):
    cfg = _config(args)
    P.validate_config(cfg, stage="evaluate")
    out = Path(cfg["out"])
    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(out)
    _require(ckpt, "train")
    ds, tc, graphs = _graphs(cfg, out)
    emb, _ = load_checkpoint(ckpt)
    if emb.Z.shape[0] != len(graphs.nodes.namespace):
        raise ConfigError(f"checkpoint {ckpt} has {emb.Z.shape[0]} rows but the graph has "
                          f"{len(graphs.nodes.namespace)} nodes")
    report = evaluate(final_embeddings(emb, graphs, tc.layers), ds.split, (50, 100),
                      item_node=graphs.nodes.item_node)
    report.write(out / "metrics.json")
    print(json.dumps(report.to_json_dict(), sort_keys=True))


def cmd_ablate(args):
    cfg = _config(args)
    out = Path(cfg["out"])
    P.validate_config(cfg, stage="ablate", interests=not (out / "user_interest.tsv").exists())
    variants = tuple(v.strip() for v in args.variants.split(",")) if args.variants else P.VARIANTS
    bad = [v for v in variants if v not in P.VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; expected a subset of {P.VARIANTS}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [int(s) for s in cfg["seeds"]]
    ds = P.load_dataset(cfg)
    if (out / "user_interest.tsv").exists():
        assignment = _assignment(out)
    else:
        assignment = P.run_cluster(cfg, P.run_interests(cfg, ds))

    def progress(variant, seed, report):
        print(f"{variant}\tseed={seed}\trecall@50={report.recall[50]:.4f}", flush=True)

    table = P.ablation_suite(ds, assignment, P.train_config(cfg), seeds, variants, progress)
    _out(cfg)
    P.write_ablation(out / "ablation.tsv", table)


def cmd_schedule_preview(args):
    cfg = _config(args)
    s = P.train_config(cfg).schedule
    epochs = args.epochs if args.epochs is not None else s.lambda_cap
    print("epoch\trate_linear\trate_exponential")
    for q in range(epochs + 1):
        lin = replace(s, strategy="linear").rate(q)
        exp = replace(s, strategy="exponential").rate(q)
        print(f"{q}\t{lin:.9f}\t{exp:.9f}")


def cmd_gradcheck(args):
    losses = args.losses.split(",") if args.losses else list(LOSS_IDS)
    failed = 0
    print("loss\tseed\tmax_rel_error\tstatus")
    for loss_id in losses:
        if loss_id not in LOSS_IDS:
            raise ConfigError(f"unknown loss {loss_id!r}; expected one of {LOSS_IDS}")
        for seed in range(args.seeds):
            r = gradient_check(loss_id, seed, tol=args.tol)
            failed += not r.passed
            print(f"{loss_id}\t{seed}\t{r.max_rel_error:.3e}\t{'ok' if r.passed else 'FAIL'}")
    return 4 if failed else 0


def cmd_synth(args):
    spec = SyntheticSpec(n_users=args.n_users, n_items=args.n_items, n_clusters=args.n_clusters,
                         interactions_per_user=args.interactions_per_user, noise_rate=args.noise_rate,
                         seed=args.seed, kg_coverage=args.kg_coverage)
    if not args.out:
        raise ConfigError("synth needs --out")
    out = Path(args.out)
    paths = generate_synthetic(spec).write(out)
    cfg = P.synthetic_config(paths, str(out / "run"), kappa=spec.n_clusters)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote synthetic dataset and {out / 'config.json'}")


def cmd_run(args):
    cfg = _config(args)
    report = P.run_pipeline(cfg)
    print(json.dumps(report.to_json_dict(), sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cikg", description="Interest-augmented knowledge graph recommender")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (dotted path, JSON value)")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", parents=[common], help="load and validate data, write stats.json")
    p = sub.add_parser("interests", parents=[common], help="infer per-user interests")
    p.add_argument("--mode", choices=("live", "fixture"))
    sub.add_parser("cluster", parents=[common], help="cluster interest phrases")
    sub.add_parser("build-graph", parents=[common], help="write graph.tsv and nodes.tsv")
    sub.add_parser("train", parents=[common], help="fit embeddings with early stopping")
    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint, write metrics.json")
    p.add_argument("--checkpoint")
    p = sub.add_parser("ablate", parents=[common], help="variant x seed grid, write ablation.tsv")
    p.add_argument("--variants", help="comma separated variant names")
    p.add_argument("--seeds", help="comma separated seeds")
    p = sub.add_parser("schedule-preview", parents=[common], help="print mask-rate curves")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--losses")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("synth", help="generate a planted-topic dataset")
    p.add_argument("--out")
    p.add_argument("--n-users", type=int, default=500)
    p.add_argument("--n-items", type=int, default=200)
    p.add_argument("--n-clusters", type=int, default=20)
    p.add_argument("--interactions-per-user", type=int, default=20)
    p.add_argument("--noise-rate", type=float, default=0.2)
    p.add_argument("--kg-coverage", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    sub.add_parser("run", parents=[common], help="all stages end to end")
    return parser


COMMANDS = {
    "ingest": cmd_ingest, "interests": cmd_interests, "cluster": cmd_cluster,
    "build-graph": cmd_build_graph, "train": cmd_train, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "schedule-preview": cmd_schedule_preview, "gradcheck": cmd_gradcheck,
    "synth": cmd_synth, "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(COMMANDS[args.command](args) or 0)
    except CIKGError as exc:
        print(f"cikg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        print(f"cikg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
