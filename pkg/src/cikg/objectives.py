"""Mask-rate curriculum, masking and all training losses.

Each loss returns its value together with gradients w.r.t. its array
inputs, full-sized so callers can chain them through propagation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

COS_EPS = 1e-12
STRATEGIES = ("linear", "exponential", "fixed")


@dataclass(frozen=True)
class MaskSchedule:
    alpha: float = 0.1
    omega: float = 0.95
    lambda_cap: int = 160
    strategy: str = "exponential"

    def __post_init__(self):
        if not (0 < self.alpha < self.omega <= 1):
            raise ConfigError(f"mask schedule needs 0 < alpha < omega <= 1, got alpha={self.alpha}, omega={self.omega}")
        if self.lambda_cap < 1:
            raise ConfigError(f"lambda_cap must be >= 1, got {self.lambda_cap}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown mask strategy {self.strategy!r}; expected one of {STRATEGIES}")

    def rate(self, q: int) -> float:
        return schedule_mask_rate(self, q)


def delta_linear(alpha, omega, lambda_cap, q):
    return alpha + q * (omega - alpha) / lambda_cap


def delta_exponential(alpha, omega, lambda_cap, q):
    return alpha * (omega / alpha) ** (q / lambda_cap)


def schedule_mask_rate(sched: MaskSchedule, q: int) -> float:
    if q < 0:
        raise ContractError(f"epoch must be >= 0, got {q}")
    if sched.strategy == "fixed":
        return sched.omega
    fn = delta_linear if sched.strategy == "linear" else delta_exponential
    if q >= sched.lambda_cap:
        return sched.omega
    return min(fn(sched.alpha, sched.omega, sched.lambda_cap, q), sched.omega)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.1
    eta: float = 2.0
    tau: float = 0.2
    eps: float = 0.1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.eta < 1:
            raise ConfigError(f"eta must be >= 1, got {self.eta}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.eps < 0:
            raise ConfigError(f"eps must be >= 0, got {self.eps}")


def scatter_add(out, idx, vals):
    """``out[idx] += vals`` with repeated indices accumulated (faster than ``np.add.at``)."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0:
        return out
    sel = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(out.shape[0], len(idx)))
    out += sel @ vals
    return out


def mask_count(n: int, rate: float) -> int:
    if n == 0 or rate <= 0:
        return 0
    return min(n, max(1, int(math.floor(rate * n + 0.5))))


def sample_mask_set(interest_nodes, rate: float, seed=None, rng=None) -> np.ndarray:
    if not 0 <= rate <= 1:
        raise ContractError(f"mask rate must lie in [0, 1], got {rate}")
    nodes = np.asarray(interest_nodes, dtype=np.int64)
    k = mask_count(len(nodes), rate)
    rng = np.random.default_rng(seed) if rng is None else rng
    return np.sort(rng.choice(nodes, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)


def apply_mask(Z, masked, z_mask, interest_nodes=None) -> np.ndarray:
    masked = np.asarray(masked, dtype=np.int64)
    if interest_nodes is not None and len(masked) and not np.isin(masked, interest_nodes).all():
        raise ContractError("mask set contains non-interest nodes")
    out = Z.copy()
    out[masked] = z_mask
    return out


def unit_rows(V):
    """Rows scaled by ``1/(||v|| + eps)``; also returns the norms."""
    n = np.linalg.norm(V, axis=1, keepdims=True)
    return V / (n + COS_EPS), n


def unit_rows_backward(V, n, d_unit):
    d = n + COS_EPS
    inner = np.sum(V * d_unit, axis=1, keepdims=True)
    safe_n = np.where(n > 0, n, 1.0)
    return d_unit / d - V * inner / (d * d * safe_n)


def _warn_zero_rows(n, what):
    if np.any(n == 0):
        log.warning("%d zero-norm row(s) in %s; cosine stabiliser in effect", int(np.sum(n == 0)), what)


def reconstruction_loss(Z_orig, Z_recon, masked, eta: float = 2.0):
    """Mean of ``(1 - cos(z_j, z'''_j))**eta`` over masked rows.

    Returns ``(value, d_Z_orig, d_Z_recon)``.
    """
    masked = np.unique(np.asarray(masked, dtype=np.int64))
    if len(masked) == 0:
        raise ContractError("reconstruction loss needs a non-empty mask set")
    A, B = Z_orig[masked], Z_recon[masked]
    Au, na = unit_rows(A)
    Bu, nb = unit_rows(B)
    _warn_zero_rows(na, "reconstruction targets")
    _warn_zero_rows(nb, "reconstructions")
    cos = np.sum(Au * Bu, axis=1)
    gap = 1.0 - cos
    value = float(np.mean(gap ** eta))
    g = (-eta * gap ** (eta - 1) / len(masked))[:, None]
    dA = np.zeros_like(Z_orig)
    dB = np.zeros_like(Z_recon)
    dA[masked] += unit_rows_backward(A, na, g * Bu)
    dB[masked] += unit_rows_backward(B, nb, g * Au)
    return value, dA, dB


def _logsumexp(S):
    m = S.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(S - m).sum(axis=1, keepdims=True)))[:, 0]


def info_nce(anchors, positives, tau: float = 0.2):
    """Sum over rows of cross-view InfoNCE with cosine similarity.

    Row ``a`` of ``anchors`` is matched with row ``a`` of ``positives``; all
    rows of ``positives`` are candidates. Returns ``(value, d_anchors,
    d_positives)``.
    """
    n = len(anchors)
    if n == 0:
        return 0.0, np.zeros_like(anchors), np.zeros_like(positives)
    Au, na = unit_rows(anchors)
    Pu, npos = unit_rows(positives)
    S = Au @ Pu.T / tau
    lse = _logsumexp(S)
    value = float(np.sum(lse - np.diag(S)))
    G = np.exp(S - lse[:, None])
    G[np.diag_indices(n)] -= 1.0
    dAu = G @ Pu / tau
    dPu = G.T @ Au / tau
    return value, unit_rows_backward(anchors, na, dAu), unit_rows_backward(positives, npos, dPu)


def _side(Za, Zp, ids, tau, max_full, batch_size, rng):
    ids = np.unique(np.asarray(ids, dtype=np.int64))
    if len(ids) > max_full:
        rng = np.random.default_rng() if rng is None else rng
        ids = np.sort(rng.choice(ids, size=min(batch_size, len(ids)), replace=False))
    value, da, dp = info_nce(Za[ids], Zp[ids], tau)
    return value, ids, da, dp


def contrastive_loss(Zv1, Zv2, Zv3, user_ids, item_ids, tau: float = 0.2,
                     max_full: int = 8192, batch_size: int = 2048, rng=None):
    """User side: view 1 vs view 2; item side: view 1 vs view 3.

    Returns ``(value, dZv1, dZv2, dZv3)``.
    """
    d1, d2, d3 = np.zeros_like(Zv1), np.zeros_like(Zv2), np.zeros_like(Zv3)
    vu, uids, da, dp = _side(Zv1, Zv2, user_ids, tau, max_full, batch_size, rng)
    d1[uids] += da
    d2[uids] += dp
    vi, iids, da, dp = _side(Zv1, Zv3, item_ids, tau, max_full, batch_size, rng)
    d1[iids] += da
    d3[iids] += dp
    return vu + vi, d1, d2, d3


def _neg_log_sigmoid(x):
    return np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bpr_loss(Z_hat, triples):
    """``sum -ln sigmoid(z_u.z_i - z_u.z_j)`` over ``(u, i, j)`` rows.

    Returns ``(value, d_Z_hat)``.
    """
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    zu, zi, zj = Z_hat[t[:, 0]], Z_hat[t[:, 1]], Z_hat[t[:, 2]]
    x = np.sum(zu * (zi - zj), axis=1)
    value = float(np.sum(_neg_log_sigmoid(x)))
    g = (-_sigmoid(-x))[:, None]
    dZ = np.zeros_like(Z_hat)
    scatter_add(dZ, t.T.ravel(), np.concatenate([g * (zi - zj), g * zu, -g * zu]))
    return value, dZ


def _safe_unit(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0), n[:, 0]


def transe_loss(Z, Zr, quads):
    """``sum -ln sigmoid(||h + r - t'|| - ||h + r - t||)`` over ``(h, r, t, t')``.

    ``h, t, t'`` index rows of ``Z`` and ``r`` rows of ``Zr``. Returns
    ``(value, dZ, dZr)``.
    """
    qd = np.asarray(quads, dtype=np.int64).reshape(-1, 4)
    h, r, t, tn = qd.T
    base = Z[h] + Zr[r]
    pos, d_pos = _safe_unit(base - Z[t])
    neg, d_neg = _safe_unit(base - Z[tn])
    margin = d_neg - d_pos
    value = float(np.sum(_neg_log_sigmoid(margin)))
    g = (-_sigmoid(-margin))[:, None]
    d_base = g * (neg - pos)
    dZ = np.zeros_like(Z)
    dZr = np.zeros_like(Zr)
    scatter_add(dZ, np.concatenate([h, t, tn]), np.concatenate([d_base, g * pos, -g * neg]))
    scatter_add(dZr, r, d_base)
    return value, dZ, dZr


def combined_loss(lr: float, lu: float, lc: float, w: LossWeights) -> float:
    return w.lambda1 * lr + w.lambda2 * lu + w.lambda3 * lc
