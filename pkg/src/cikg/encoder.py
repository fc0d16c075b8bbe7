"""LightGCN-style linear propagation and the masked-autoencoder encode/decode path.

Propagation is ``mean_{k=0..l} A^k Z`` with ``A`` the symmetric normalised
adjacency. Because ``A`` is symmetric the operator is self-adjoint, so the
backward pass of :func:`propagate` is :func:`propagate` applied to the
upstream gradient.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ContractError
from .graph import NormalizedAdjacency


@dataclass
class EmbeddingState:
    Z: np.ndarray  # (V, D) node embeddings
    Zr: np.ndarray  # (R', D) relation embeddings
    z_mask: np.ndarray  # (D,) learnable mask token
    W: np.ndarray  # (D, D) projection weight
    b: np.ndarray  # (D,) projection bias

    @property
    def dim(self) -> int:
        return self.Z.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def zeros_like(self) -> "EmbeddingState":
        return EmbeddingState(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(**{k: v.copy() for k, v in self.arrays().items()})

    def add_(self, other: "EmbeddingState", scale: float = 1.0) -> "EmbeddingState":
        for k, v in self.arrays().items():
            v += scale * getattr(other, k)
        return self

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.arrays().values())

    def export(self, emb_path, manifest_path, layers: int, seed: int, epoch: int):
        with open(emb_path, "w", encoding="utf-8") as fh:
            for gid, row in enumerate(self.Z):
                fh.write(f"{gid}\t" + " ".join(f"{x:.9g}" for x in row) + "\n")
        manifest = {"D": self.dim, "l": layers, "seed": seed, "checkpoint_epoch": epoch}
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)


def read_embeddings(path) -> np.ndarray:
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                gid, vec = line.rstrip("\n").split("\t")
                rows[int(gid)] = np.array(vec.split(), dtype=np.float64)
    return np.stack([rows[g] for g in range(len(rows))])


def _check(Z, adj: NormalizedAdjacency, layers: int):
    if layers < 0:
        raise ConfigError(f"layers must be >= 0, got {layers}")
    if Z.ndim != 2 or Z.shape[0] != adj.n_nodes:
        raise ContractError(f"embedding shape {Z.shape} does not match {adj.n_nodes} graph nodes")


def propagate(Z, adj: NormalizedAdjacency, layers: int) -> np.ndarray:
    _check(Z, adj, layers)
    E = Z
    acc = np.array(Z, dtype=np.float64, copy=True)
    for _ in range(layers):
        E = adj.matrix @ E
        acc += E
    return acc / (layers + 1)


# self-adjoint: see module docstring
propagate_backward = propagate


def perturbation(E, eps: float, rng) -> np.ndarray:
    """``eps * sign(E) * u/||u||`` per row with ``u ~ U[0,1]^D``."""
    u = rng.random(E.shape)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    u = np.divide(u, norms, out=np.zeros_like(u), where=norms > 0)
    return eps * np.sign(E) * u


def propagate_perturbed(Z, adj: NormalizedAdjacency, layers: int, eps: float, seed=None, rng=None) -> np.ndarray:
    """Propagation with fresh representation noise added after every layer.

    The noise depends on ``Z`` only through ``sign``, which is locally
    constant, so gradients flow exactly as for :func:`propagate`.
    """
    if eps < 0:
        raise ConfigError(f"eps must be >= 0, got {eps}")
    _check(Z, adj, layers)
    if eps == 0:
        return propagate(Z, adj, layers)
    rng = np.random.default_rng(seed) if rng is None else rng
    E = Z
    acc = np.array(Z, dtype=np.float64, copy=True)
    for _ in range(layers):
        E = adj.matrix @ E
        E = E + perturbation(E, eps, rng)
        acc += E
    return acc / (layers + 1)


def project(H, W, b):
    return H @ W + b


def gmae_encode_decode(Z_masked, adj: NormalizedAdjacency, layers: int, W, b, return_hidden=False):
    """Encoder of ``layers - 1`` propagation steps, affine map, one-step decoder."""
    if layers < 2:
        raise ConfigError(f"masked reconstruction needs layers >= 2, got {layers}")
    hidden = propagate(Z_masked, adj, layers - 1)
    out = propagate(project(hidden, W, b), adj, 1)
    return (out, hidden) if return_hidden else out


def gmae_backward(d_out, hidden, adj: NormalizedAdjacency, layers: int, W):
    """Gradients w.r.t. (Z_masked, W, b) given d(loss)/d(decoder output)."""
    d_proj = propagate_backward(d_out, adj, 1)
    dW = hidden.T @ d_proj
    db = d_proj.sum(axis=0)
    d_hidden = d_proj @ W.T
    return propagate_backward(d_hidden, adj, layers - 1), dW, db
