"""Joint optimisation: sampling, the weighted main loss, alternating TransE
steps, early stopping, checkpoints and finite-difference gradient checks."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import encoder, objectives
from .data import InteractionSet, SplitInteractions, TripleStore
from .encoder import EmbeddingState
from .errors import ConfigError, NumericalError
from .graph import (
    HeteroGraph,
    NodeTable,
    NormalizedAdjacency,
    build_cikg,
    collaborative_graph,
    empty_graph,
    interest_graph,
    map_items_to_entities,
    merge_graphs,
    node_table,
    normalize,
)
from .objectives import LossWeights, MaskSchedule

log = logging.getLogger(__name__)

# per-purpose RNG stream tags
_BPR, _MASK, _NOISE, _KG, _CL_BATCH = 1, 2, 3, 4, 5
AUX_GRAPHS = ("CG", "CIG", "CKG", "CIKG")
MAIN_PARAMS = ("Z", "z_mask", "W", "b")
KG_PARAMS = ("Z", "Zr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    dim: int = 64
    layers: int = 3
    max_epochs: int = 2000
    patience: int = 50
    eval_interval: int = 1
    seed: int = 0
    schedule: MaskSchedule = field(default_factory=MaskSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    kappa: int = 50
    neg_per_pos: int = 1
    kg_alt_ratio: int = 1
    eval_k: int = 50
    infonce_max_full: int = 8192
    infonce_batch: int = 2048
    reduction: str = "sum"  # "sum" or "mean" over BPR triples / InfoNCE anchors

    def __post_init__(self):
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")
        if not 1e-5 <= self.lr <= 1e-1:
            raise ConfigError(f"lr must lie in [1e-5, 1e-1], got {self.lr}")
        if self.max_epochs < 1 or self.patience < 1 or self.eval_interval < 1:
            raise ConfigError("max_epochs, patience and eval_interval must be >= 1")
        if self.dim < 1 or self.layers < 0 or self.neg_per_pos < 1 or self.kg_alt_ratio < 0:
            raise ConfigError("invalid dim/layers/neg_per_pos/kg_alt_ratio")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("schedule"), dict):
            d["schedule"] = MaskSchedule(**d["schedule"])
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Graphs:
    """Everything the training loop needs, precomputed once."""

    nodes: NodeTable
    main: NormalizedAdjacency
    cg: NormalizedAdjacency
    v2: NormalizedAdjacency
    v3: NormalizedAdjacency
    kg_triples: np.ndarray  # (T, 3) global (head gid, relation id, tail gid)
    user_nodes: np.ndarray
    item_nodes: np.ndarray
    interest_nodes: np.ndarray
    hetero: dict = field(default_factory=dict, repr=False)


def build_graphs(train: InteractionSet, kg: TripleStore, membership=None, kappa: int = 0,
                 main: str = "CIKG") -> Graphs:
    """Build the CIKG plus the three contrastive views.

    ``membership`` maps raw user ids to cluster ids; ``None`` drops the
    interest graph everywhere (no interest nodes at all).
    """
    if main not in AUX_GRAPHS:
        raise ConfigError(f"unknown main graph {main!r}; expected one of {AUX_GRAPHS}")
    n_interests = kappa if membership is not None else 0
    nodes = node_table(train, kg, n_interests)
    cg = collaborative_graph(train, nodes)
    ig = interest_graph(membership, nodes, train.user_map.index) if membership is not None else empty_graph(nodes)
    _, mkg = map_items_to_entities(kg, nodes)
    g = {
        "CG": cg,
        "CIG": merge_graphs(cg, ig),
        "CKG": merge_graphs(cg, mkg),
        "CIKG": build_cikg(cg, ig, mkg),
        "IG": ig,
        "KG": mkg,
    }
    return Graphs(
        nodes=nodes,
        main=normalize(g[main]),
        cg=normalize(cg),
        v2=normalize(g["CIG"]),
        v3=normalize(g["CKG"]),
        kg_triples=mkg.edges.copy(),
        user_nodes=nodes.user_nodes,
        item_nodes=nodes.item_nodes(),
        interest_nodes=nodes.interest_nodes,
        hetero=g,
    )


def init_embeddings(n_nodes: int, n_relations: int, dim: int, seed: int = 0, std: float = 0.1) -> EmbeddingState:
    if dim < 1:
        raise ConfigError(f"embedding dimension must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    return EmbeddingState(
        Z=rng.normal(0.0, std, (n_nodes, dim)),
        Zr=rng.normal(0.0, std, (n_relations, dim)),
        z_mask=rng.normal(0.0, std, dim),
        W=np.eye(dim) + rng.normal(0.0, 0.01, (dim, dim)),
        b=np.zeros(dim),
    )


def _pair_keys(a, b, width):
    return np.asarray(a, dtype=np.int64) * width + np.asarray(b, dtype=np.int64)


def sample_bpr_triples(train: InteractionSet, neg_per_pos: int = 1, seed=None, rng=None) -> np.ndarray:
    """(user, pos item, neg item) rows in dense item ids; negatives rejection-sampled."""
    rng = np.random.default_rng(seed) if rng is None else rng
    n_items = train.n_items
    if len(train) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    deg = train.user_degrees()
    full = deg >= n_items
    pos = train.edges
    if full.any():
        log.warning("%d user(s) interacted with every item; skipped for BPR", int(full.sum()))
        pos = pos[~full[pos[:, 0]]]
    pos = np.repeat(pos, neg_per_pos, axis=0)
    known = np.unique(_pair_keys(train.edges[:, 0], train.edges[:, 1], n_items))
    neg = rng.integers(n_items, size=len(pos))
    bad = np.isin(_pair_keys(pos[:, 0], neg, n_items), known)
    while bad.any():
        neg[bad] = rng.integers(n_items, size=int(bad.sum()))
        bad[bad] = np.isin(_pair_keys(pos[bad, 0], neg[bad], n_items), known)
    return np.column_stack([pos, neg])


def sample_transe_quads(kg_triples, entity_pool, seed=None, rng=None, max_rounds: int = 100) -> np.ndarray:
    """(h, r, t, t') with ``t'`` uniform over ``entity_pool`` and (h, r, t') not a KG fact."""
    rng = np.random.default_rng(seed) if rng is None else rng
    kt = np.asarray(kg_triples, dtype=np.int64).reshape(-1, 3)
    pool = np.asarray(entity_pool, dtype=np.int64)
    if len(kt) == 0 or len(pool) == 0:
        return np.zeros((0, 4), dtype=np.int64)
    width = int(max(kt[:, [0, 2]].max(), pool.max())) + 1
    rwidth = int(kt[:, 1].max()) + 1

    def keys(h, r, t):
        return (h * rwidth + r) * width + t

    facts = np.unique(keys(kt[:, 0], kt[:, 1], kt[:, 2]))
    neg = pool[rng.integers(len(pool), size=len(kt))]
    bad = np.isin(keys(kt[:, 0], kt[:, 1], neg), facts)
    for _ in range(max_rounds):
        if not bad.any():
            break
        neg[bad] = pool[rng.integers(len(pool), size=int(bad.sum()))]
        bad[bad] = np.isin(keys(kt[bad, 0], kt[bad, 1], neg[bad]), facts)
    keep = ~bad
    return np.column_stack([kt[keep], neg[keep]])


@dataclass
class Adam:
    lr: float
    names: tuple[str, ...]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: EmbeddingState, grads: EmbeddingState):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name in self.names:
            g = getattr(grads, name)
            p = getattr(params, name)
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def copy(self) -> "Adam":
        return replace(self, m={k: v.copy() for k, v in self.m.items()}, v={k: v.copy() for k, v in self.v.items()})


# --- loss terms: each returns (value, gradient as an EmbeddingState) -------------

def term_rec(state: EmbeddingState, graphs: Graphs, layers: int, bpr_gid):
    Z_hat = encoder.propagate(state.Z, graphs.main, layers)
    value, dZ_hat = objectives.bpr_loss(Z_hat, bpr_gid)
    grad = state.zeros_like()
    grad.Z = encoder.propagate_backward(dZ_hat, graphs.main, layers)
    return value, grad


def term_recon(state: EmbeddingState, graphs: Graphs, layers: int, masked, eta: float):
    Zm = objectives.apply_mask(state.Z, masked, state.z_mask)
    recon, hidden = encoder.gmae_encode_decode(Zm, graphs.main, layers, state.W, state.b, return_hidden=True)
    value, d_orig, d_recon = objectives.reconstruction_loss(state.Z, recon, masked, eta)
    d_masked, dW, db = encoder.gmae_backward(d_recon, hidden, graphs.main, layers, state.W)
    grad = state.zeros_like()
    grad.z_mask = d_masked[masked].sum(axis=0)
    d_masked[masked] = 0.0
    grad.Z = d_orig + d_masked
    grad.W, grad.b = dW, db
    return value, grad


def term_contrast(state: EmbeddingState, graphs: Graphs, layers: int, w: LossWeights, noise_seed,
                  max_full: int = 8192, batch_size: int = 2048, batch_seed=None):
    Z = state.Z
    v1 = encoder.propagate_perturbed(Z, graphs.cg, layers, w.eps, seed=noise_seed)
    v2 = encoder.propagate(Z, graphs.v2, layers)
    v3 = encoder.propagate(Z, graphs.v3, layers)
    value, d1, d2, d3 = objectives.contrastive_loss(
        v1, v2, v3, graphs.user_nodes, graphs.item_nodes, w.tau,
        max_full=max_full, batch_size=batch_size, rng=np.random.default_rng(batch_seed),
    )
    grad = state.zeros_like()
    grad.Z = (encoder.propagate_backward(d1, graphs.cg, layers)
              + encoder.propagate_backward(d2, graphs.v2, layers)
              + encoder.propagate_backward(d3, graphs.v3, layers))
    return value, grad


def term_transe(state: EmbeddingState, quads):
    value, dZ, dZr = objectives.transe_loss(state.Z, state.Zr, quads)
    grad = state.zeros_like()
    grad.Z, grad.Zr = dZ, dZr
    return value, grad


@dataclass
class EpochSamples:
    bpr: np.ndarray  # global ids
    masked: np.ndarray
    noise_seed: list
    batch_seed: list


def epoch_samples(train: InteractionSet, graphs: Graphs, cfg: TrainConfig, rate: float, q: int) -> EpochSamples:
    bpr = sample_bpr_triples(train, cfg.neg_per_pos, rng=np.random.default_rng([cfg.seed, _BPR, q]))
    bpr_gid = np.column_stack([bpr[:, 0], graphs.nodes.item_node[bpr[:, 1]], graphs.nodes.item_node[bpr[:, 2]]]) \
        if len(bpr) else np.zeros((0, 3), dtype=np.int64)
    masked = objectives.sample_mask_set(graphs.interest_nodes, rate, rng=np.random.default_rng([cfg.seed, _MASK, q]))
    return EpochSamples(bpr_gid, masked, [cfg.seed, _NOISE, q], [cfg.seed, _CL_BATCH, q])


def main_objective(state: EmbeddingState, graphs: Graphs, cfg: TrainConfig, s: EpochSamples):
    """Weighted main loss. Terms with zero weight (or nothing to act on) are not computed."""
    w = cfg.weights
    values = {"loss_r": None, "loss_u": None, "loss_c": None}
    total = state.zeros_like()
    mean = cfg.reduction == "mean"
    if w.lambda1 > 0 and len(s.bpr):
        values["loss_r"], g = term_rec(state, graphs, cfg.layers, s.bpr)
        scale = 1.0 / len(s.bpr) if mean else 1.0
        values["loss_r"] *= scale
        total.add_(g, w.lambda1 * scale)
    if w.lambda2 > 0 and len(s.masked):
        values["loss_u"], g = term_recon(state, graphs, cfg.layers, s.masked, w.eta)
        total.add_(g, w.lambda2)
    if w.lambda3 > 0:
        values["loss_c"], g = term_contrast(state, graphs, cfg.layers, w, s.noise_seed,
                                            cfg.infonce_max_full, cfg.infonce_batch, s.batch_seed)
        scale = 1.0 / (len(graphs.user_nodes) + len(graphs.item_nodes)) if mean else 1.0
        values["loss_c"] *= scale
        total.add_(g, w.lambda3 * scale)
    return values, total


def _check_finite(values: dict, grad: EmbeddingState, q: int):
    bad = {k: v for k, v in values.items() if v is not None and not np.isfinite(v)}
    if bad or not grad.all_finite():
        raise NumericalError(f"non-finite loss at epoch {q}: {bad or values} "
                             f"(finite gradient: {grad.all_finite()})")


@dataclass
class TrainState:
    embeddings: EmbeddingState
    main_opt: Adam
    kg_opt: Adam
    epoch: int = 0
    best_valid_metric: float = -np.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0

    @classmethod
    def fresh(cls, graphs: Graphs, cfg: TrainConfig) -> "TrainState":
        emb = init_embeddings(graphs.nodes.n_nodes, len(graphs.nodes.relations), cfg.dim, cfg.seed)
        return cls(emb, Adam(cfg.lr, MAIN_PARAMS), Adam(cfg.lr, KG_PARAMS))


def train_epoch(state: TrainState, train: InteractionSet, graphs: Graphs, rate: float, cfg: TrainConfig):
    """One main Adam step followed by ``kg_alt_ratio`` TransE steps."""
    q = state.epoch
    start = time.perf_counter()
    samples = epoch_samples(train, graphs, cfg, rate, q)
    values, grad = main_objective(state.embeddings, graphs, cfg, samples)
    _check_finite(values, grad, q)
    if any(v is not None for v in values.values()):
        state.main_opt.step(state.embeddings, grad)
    loss_t = None
    for k in range(cfg.kg_alt_ratio):
        quads = sample_transe_quads(graphs.kg_triples, graphs.nodes.entity_nodes,
                                    rng=np.random.default_rng([cfg.seed, _KG, q, k]))
        if not len(quads):
            break
        loss_t, g = term_transe(state.embeddings, quads)
        _check_finite({"loss_t": loss_t}, g, q)
        state.kg_opt.step(state.embeddings, g)
    state.epoch += 1
    report = {"epoch": q, "p_q": rate, **values, "loss_t": loss_t,
              "elapsed_ms": round((time.perf_counter() - start) * 1000, 3)}
    return state, report


def final_embeddings(emb: EmbeddingState, graphs: Graphs, layers: int) -> np.ndarray:
    return encoder.propagate(emb.Z, graphs.main, layers)


@dataclass
class FitResult:
    embeddings: EmbeddingState
    log: list[dict]
    best_epoch: int
    best_valid_metric: float


def fit(cfg: TrainConfig, split: SplitInteractions, graphs: Graphs, metric_fn=None, log_path=None,
        state: TrainState | None = None) -> FitResult:
    """Train with early stopping on validation Recall@K; restores the best checkpoint.

    ``metric_fn(Z_hat) -> float`` overrides the validation metric.
    """
    from .metrics import ValidationRanker

    if metric_fn is None:
        metric_fn = ValidationRanker(split, graphs.nodes.item_node, cfg.eval_k)

    state = TrainState.fresh(graphs, cfg) if state is None else state
    best = state.embeddings.copy()
    history: list[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        while state.epoch < cfg.max_epochs:
            rate = cfg.schedule.rate(state.epoch)
            state, report = train_epoch(state, split.train, graphs, rate, cfg)
            report["valid_recall50"] = None
            if state.epoch % cfg.eval_interval == 0:
                metric = float(metric_fn(final_embeddings(state.embeddings, graphs, cfg.layers)))
                report["valid_recall50"] = metric
                if metric > state.best_valid_metric:
                    state.best_valid_metric = metric
                    state.best_epoch = report["epoch"]
                    state.epochs_since_improvement = 0
                    best = state.embeddings.copy()
                else:
                    state.epochs_since_improvement += 1
            history.append(report)
            if fh:
                fh.write(json.dumps(report) + "\n")
            if state.epochs_since_improvement >= cfg.patience:
                break
    finally:
        if fh:
            fh.close()
    return FitResult(best, history, state.best_epoch, state.best_valid_metric)


# --- checkpoints ------------------------------------------------------------------

CHECKPOINT_ORDER = ("Z", "Zr", "z_mask", "W", "b")


def save_checkpoint(path, emb: EmbeddingState, epoch: int, extra: dict | None = None):
    """8-byte little-endian header length, JSON manifest, then float64 LE arrays."""
    arrays = emb.arrays()
    manifest = {
        "epoch": epoch,
        "order": list(CHECKPOINT_ORDER),
        "shapes": {k: list(arrays[k].shape) for k in CHECKPOINT_ORDER},
        "dtype": "<f8",
        **(extra or {}),
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for k in CHECKPOINT_ORDER:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[EmbeddingState, dict]:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n).decode("utf-8"))
        out = {}
        for k in manifest["order"]:
            shape = tuple(manifest["shapes"][k])
            count = int(np.prod(shape)) if shape else 1
            out[k] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    return EmbeddingState(**out), manifest


# --- gradient verification ----------------------------------------------------------

LOSS_IDS = ("rec", "recon", "contrast", "transe", "quadratic")
_RELEVANT = {
    "rec": ("Z",),
    "recon": ("Z", "z_mask", "W", "b"),
    "contrast": ("Z",),
    "transe": ("Z", "Zr"),
    "quadratic": ("Z",),
}


@dataclass
class GradCheckReport:
    loss_id: str
    max_rel_error: float
    tol: float
    n_probe: int
    seed: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def tiny_instance(seed: int = 0, dim: int = 8, std: float = 0.5):
    """A <= 20 node CIKG with every node type, plus samples for every loss."""
    from .data import IdMap, TripleStore, interactions_from_pairs

    rng = np.random.default_rng(seed)
    n_users, n_items = 5, 6
    pairs = [(f"u{u}", f"i{i}") for u in range(n_users) for i in rng.choice(n_items, 3, replace=False)]
    train = interactions_from_pairs(pairs)
    ents = IdMap.from_sequence(["e0", "e1", "e2", "e3"])
    rels = IdMap.from_sequence(["r0", "r1"])
    triples = np.array([(0, 0, 2), (1, 0, 2), (0, 1, 3), (1, 1, 3), (2, 1, 3)], dtype=np.int64)
    projection = {train.item_map.index[k]: e for k, e in (("i0", 0), ("i1", 1)) if k in train.item_map.index}
    kg = TripleStore(ents, rels, triples, projection,
                     tuple(i for i in train.items if i not in projection))
    membership = {f"u{u}": frozenset({int(c) for c in rng.choice(3, 1 + u % 2, replace=False)}) for u in range(n_users)}
    graphs = build_graphs(train, kg, membership, kappa=3)
    assert graphs.nodes.n_nodes <= 20
    emb = init_embeddings(graphs.nodes.n_nodes, len(graphs.nodes.relations), dim, seed, std=std)
    emb.W = emb.W + rng.normal(0, 0.3, emb.W.shape)
    emb.b = rng.normal(0, std, dim)
    cfg = TrainConfig(dim=dim, layers=3, seed=seed)
    samples = epoch_samples(train, graphs, cfg, 0.67, 0)
    quads = sample_transe_quads(graphs.kg_triples, graphs.nodes.entity_nodes, rng=rng)
    return graphs, emb, cfg, samples, quads


def loss_and_grad(loss_id: str, emb: EmbeddingState, graphs: Graphs, cfg: TrainConfig,
                  samples: EpochSamples, quads):
    if loss_id == "rec":
        return term_rec(emb, graphs, cfg.layers, samples.bpr)
    if loss_id == "recon":
        return term_recon(emb, graphs, cfg.layers, samples.masked, cfg.weights.eta)
    if loss_id == "contrast":
        return term_contrast(emb, graphs, cfg.layers, cfg.weights, samples.noise_seed)
    if loss_id == "transe":
        return term_transe(emb, quads)
    if loss_id == "quadratic":
        g = emb.zeros_like()
        g.Z = emb.Z.copy()
        return 0.5 * float(np.sum(emb.Z ** 2)), g
    raise ConfigError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-8)


def gradient_check(loss_id: str, seed: int = 0, tol: float = 1e-4, n_probe: int = 64, step: float = 1e-4,
                   dim: int = 8, corrupt: float = 1.0) -> GradCheckReport:
    """Compare analytic gradients to central differences on a random probe.

    ``corrupt`` scales the analytic gradient; anything but 1 should fail.
    """
    std = 0.1 if loss_id == "quadratic" else 0.5
    graphs, emb, cfg, samples, quads = tiny_instance(seed, dim, std)
    _, grad = loss_and_grad(loss_id, emb, graphs, cfg, samples, quads)
    coords = [(name, idx) for name in _RELEVANT[loss_id]
              for idx in np.ndindex(getattr(emb, name).shape)]
    rng = np.random.default_rng([seed, 99])
    pick = rng.choice(len(coords), size=min(n_probe, len(coords)), replace=False)
    worst = 0.0
    for k in pick:
        name, idx = coords[k]
        arr = getattr(emb, name)
        orig = arr[idx]
        arr[idx] = orig + step
        f_plus, _ = loss_and_grad(loss_id, emb, graphs, cfg, samples, quads)
        arr[idx] = orig - step
        f_minus, _ = loss_and_grad(loss_id, emb, graphs, cfg, samples, quads)
        arr[idx] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        analytic = corrupt * getattr(grad, name)[idx]
        worst = max(worst, float(relative_error(analytic, numeric)))
    return GradCheckReport(loss_id, worst, tol, len(pick), seed)
