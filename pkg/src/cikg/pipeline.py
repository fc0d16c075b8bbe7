"""Run configuration, ablation variants and end-to-end orchestration."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data as D
from . import interests as I
from .errors import ConfigError, LLMTransportError
from .metrics import MetricReport, evaluate
from .objectives import MaskSchedule
from .trainer import Graphs, TrainConfig, build_graphs, final_embeddings, fit, save_checkpoint

log = logging.getLogger(__name__)

DEFAULTS = {
    "data": {
        "ratings": None,
        "kg": None,
        "projection": None,
        "titles": None,
        "min_user_freq": 5,
        "split_ratios": [0.7, 0.1, 0.2],
        "split_seed": 2024,
        "strict_projection": True,
    },
    "llm": {
        "mode": "fixture",
        "fixture": None,
        "endpoint_url": None,
        "model": I.DEFAULT_MODEL,
        "temperature": 0.0,
        "max_attempts": 3,
        "parallelism": 4,
        "max_interests": 5,
        "prompt": {},
    },
    "interests": {"kappa": 50, "seed": 0},
    "train": TrainConfig().to_dict(),
    "variant": "full",
    "seeds": [0, 1, 2, 3, 4],
    "out": "runs/default",
}

ABLATION_VARIANTS = ("full", "w/o UIK", "w/o UIR", "w/o CL", "w/o DMR", "w linear")
AUX_VARIANTS = ("CG", "CIG", "CKG", "CIKG")
VARIANTS = ABLATION_VARIANTS + AUX_VARIANTS
ABLATION_METRICS = ("recall@50", "recall@100", "ndcg@50", "ndcg@100")


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = deep_merge(cfg, json.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        keys, value = parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {item!r}: {k} is not a section")
        node[keys[-1]] = value
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def validate_config(cfg: dict, need=("ratings",), stage: str = "", interests: bool = False) -> None:
    """Fail fast, before any output is written.

    Keys in ``need`` must be set; every path that is set must exist. With
    ``interests`` the configured interest source (fixture file or live
    endpoint) is required too.
    """
    prefix = f"{stage}: " if stage else ""
    if cfg.get("llm", {}).get("mode") not in ("live", "fixture"):
        raise ConfigError(f"{prefix}llm.mode must be 'live' or 'fixture'")
    paths = {k: ("data", k) for k in ("ratings", "kg", "projection", "titles")}
    paths["fixture"] = ("llm", "fixture")
    need = set(need)
    if interests and cfg["llm"]["mode"] == "fixture":
        need.add("fixture")
    if interests and cfg["llm"]["mode"] == "live" and not cfg["llm"].get("endpoint_url"):
        raise ConfigError(f"{prefix}llm.endpoint_url is required in live mode")
    for key, (section, name) in paths.items():
        value = cfg[section].get(name)
        if not value:
            if key in need:
                raise ConfigError(f"{prefix}{section}.{name} is not set")
            continue
        if not Path(value).exists():
            raise ConfigError(f"{prefix}{section}.{name} path does not exist: {value}")
    if bool(cfg["data"].get("kg")) != bool(cfg["data"].get("projection")):
        raise ConfigError(f"{prefix}data.kg and data.projection must be given together")
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"{prefix}unknown variant {cfg['variant']!r}; expected one of {VARIANTS}")
    if int(cfg["interests"]["kappa"]) < 1:
        raise ConfigError(f"{prefix}interests.kappa must be >= 1")
    train_config(cfg)


def apply_variant(variant: str, tc: TrainConfig) -> tuple[TrainConfig, bool, str]:
    """Returns (train config, use interest graph, main graph name)."""
    w, s = tc.weights, tc.schedule
    if variant == "full":
        return tc, True, "CIKG"
    if variant == "w/o UIK":
        return replace(tc, weights=replace(w, lambda2=0.0)), False, "CIKG"
    if variant == "w/o UIR":
        return replace(tc, weights=replace(w, lambda2=0.0)), True, "CIKG"
    if variant == "w/o CL":
        return replace(tc, weights=replace(w, lambda3=0.0)), True, "CIKG"
    if variant == "w/o DMR":
        return replace(tc, schedule=replace(s, strategy="fixed")), True, "CIKG"
    if variant == "w linear":
        return replace(tc, schedule=replace(s, strategy="linear")), True, "CIKG"
    if variant in AUX_VARIANTS:
        bpr_only = replace(tc, weights=replace(w, lambda2=0.0, lambda3=0.0), kg_alt_ratio=0)
        return bpr_only, True, variant
    raise ConfigError(f"unknown variant {variant!r}")


@dataclass
class Dataset:
    interactions: D.InteractionSet
    split: D.SplitInteractions
    kg: D.TripleStore
    titles: dict

    @property
    def stats(self) -> D.DatasetStats:
        return D.dataset_stats(self.interactions, self.kg)


def load_dataset(cfg: dict) -> Dataset:
    dc = cfg["data"]
    ix = D.load_interactions(dc["ratings"], int(dc["min_user_freq"]))
    if dc.get("kg") and dc.get("projection"):
        kg = D.load_kg(dc["kg"], dc["projection"], ix, strict=bool(dc.get("strict_projection", True)))
    else:
        kg = D.empty_kg(ix)
    split = D.split_interactions(ix, dc["split_ratios"], int(dc["split_seed"]))
    titles = D.read_titles(dc["titles"]) if dc.get("titles") else {}
    return Dataset(ix, split, kg, titles)


def user_histories(ds: Dataset) -> dict[str, list[str]]:
    train = ds.split.train
    hist: dict[str, list[str]] = {u: [] for u in train.user_map.raw}
    for u, i in train.edges:
        raw_i = train.item_map.raw[i]
        hist[train.user_map.raw[u]].append(ds.titles.get(raw_i, raw_i))
    return hist


def make_client(cfg: dict):
    lc = cfg["llm"]
    if lc["mode"] == "fixture":
        if not lc.get("fixture"):
            raise ConfigError("llm.fixture is required in fixture mode")
        return I.FixtureClient(lc["fixture"])
    return I.LiveClient(lc["endpoint_url"], model=lc["model"], temperature=float(lc["temperature"]),
                        max_attempts=int(lc["max_attempts"]))


def run_interests(cfg: dict, ds: Dataset, client=None) -> I.InterestCorpus:
    client = make_client(cfg) if client is None else client
    tmpl = I.PromptTemplate.from_dict(cfg["llm"].get("prompt") or {})
    prompts = I.build_prompts(tmpl, user_histories(ds), int(cfg["llm"]["max_interests"]))
    corpus = I.infer_interests(client, prompts, parallelism=int(cfg["llm"]["parallelism"]))
    if corpus.failures:
        log.warning("%d user(s) failed LLM inference", len(corpus.failures))
        if not corpus.per_user:
            raise LLMTransportError(f"every LLM request failed ({len(corpus.failures)} users)")
    return corpus


def run_cluster(cfg: dict, corpus: I.InterestCorpus) -> I.InterestAssignment:
    return I.cluster_interests(corpus, int(cfg["interests"]["kappa"]), int(cfg["interests"]["seed"]))


def graphs_for(ds: Dataset, assignment: I.InterestAssignment | None, variant: str, tc: TrainConfig):
    tc, use_interests, main = apply_variant(variant, tc)
    membership = assignment.membership if (assignment is not None and use_interests) else None
    kappa = assignment.kappa if assignment is not None else 0
    return tc, build_graphs(ds.split.train, ds.kg, membership, kappa, main=main)


def train_and_evaluate(ds: Dataset, assignment, variant: str, tc: TrainConfig, out_dir=None,
                       ks=(50, 100)) -> tuple[MetricReport, object, Graphs, TrainConfig]:
    tc, graphs = graphs_for(ds, assignment, variant, tc)
    log_path = Path(out_dir) / "train_log.jsonl" if out_dir else None
    result = fit(tc, ds.split, graphs, log_path=log_path)
    Z_hat = final_embeddings(result.embeddings, graphs, tc.layers)
    report = evaluate(Z_hat, ds.split, ks, item_node=graphs.nodes.item_node)
    return report, result, graphs, tc


def ablation_suite(ds: Dataset, assignment, tc: TrainConfig, seeds=(0, 1, 2, 3, 4), variants=VARIANTS,
                   progress=None) -> dict[str, dict[str, list[float]]]:
    """Train every variant for every seed on a fixed split; returns per-seed metric lists."""
    table: dict[str, dict[str, list[float]]] = {}
    for variant in variants:
        cols = {m: [] for m in ABLATION_METRICS}
        for seed in seeds:
            report, *_ = train_and_evaluate(ds, assignment, variant, replace(tc, seed=int(seed)))
            cols["recall@50"].append(report.recall[50])
            cols["recall@100"].append(report.recall[100])
            cols["ndcg@50"].append(report.ndcg[50])
            cols["ndcg@100"].append(report.ndcg[100])
            if progress:
                progress(variant, seed, report)
        table[variant] = cols
    return table


def write_ablation(path, table: dict[str, dict[str, list[float]]]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant\tmetric\tmean\tstd\n")
        for variant, cols in table.items():
            for metric, vals in cols.items():
                fh.write(f"{variant}\t{metric}\t{np.mean(vals):.6f}\t{np.std(vals):.6f}\n")


def read_ablation(path) -> dict[tuple[str, str], tuple[float, float]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            variant, metric, mean, std = line.rstrip("\n").split("\t")
            out[(variant, metric)] = (float(mean), float(std))
    return out


def clear_checkpoints(out: Path):
    """Drop stale checkpoints so a rerun leaves exactly one behind."""
    for old in Path(out).glob("checkpoint_*.bin"):
        old.unlink()


def run_pipeline(cfg: dict, client=None) -> MetricReport:
    """ingest -> interests -> cluster -> graphs -> fit -> evaluate, writing every artifact."""
    validate_config(cfg, stage="run", interests=True)
    tc = train_config(cfg)
    ds = load_dataset(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(ds.stats.to_json() + "\n", encoding="utf-8")
    corpus = run_interests(cfg, ds, client)
    corpus.to_jsonl(out / "interests.jsonl")
    assignment = run_cluster(cfg, corpus)
    assignment.write(out / "interest_cluster.tsv", out / "user_interest.tsv")
    variant = cfg["variant"]
    tc_v, graphs = graphs_for(ds, assignment, variant, tc)
    graphs.hetero[variant if variant in AUX_VARIANTS else "CIKG"].dump(out / "graph.tsv", out / "nodes.tsv")
    result = fit(tc_v, ds.split, graphs, log_path=out / "train_log.jsonl")
    clear_checkpoints(out)
    save_checkpoint(out / f"checkpoint_{result.best_epoch}.bin", result.embeddings, result.best_epoch,
                    {"D": tc_v.dim, "l": tc_v.layers, "seed": tc_v.seed})
    result.embeddings.export(out / "embeddings.tsv", out / "manifest.json", tc_v.layers, tc_v.seed, result.best_epoch)
    report = evaluate(final_embeddings(result.embeddings, graphs, tc_v.layers), ds.split, (50, 100),
                      item_node=graphs.nodes.item_node)
    report.write(out / "metrics.json")
    return report


def synthetic_config(paths: dict, out: str, kappa: int = 20, **train_overrides) -> dict:
    """Config tuned for the planted-topic synthetic data at desk scale."""
    train = TrainConfig(
        lr=0.01, dim=32, layers=3, max_epochs=400, patience=10, eval_interval=5,
        schedule=MaskSchedule(alpha=0.1, omega=0.9, lambda_cap=80, strategy="exponential"),
        kappa=kappa,
    ).to_dict()
    train.update(train_overrides)
    return deep_merge(DEFAULTS, {
        "data": {"ratings": paths["ratings"], "kg": paths["kg"], "projection": paths["projection"],
                 "titles": paths.get("titles"), "min_user_freq": 5},
        "llm": {"mode": "fixture", "fixture": paths["fixture"]},
        "interests": {"kappa": kappa, "seed": 0},
        "train": train,
        "out": out,
    })
