"""Adaptive graph structure learning.

The adjacency is the ReLU of a learned weighted cosine similarity between
projected node features, with three regularisers (Dirichlet smoothness, a
log-barrier on node degrees, and a Frobenius penalty) keeping the learned
graph smooth, connected, and sparse. Non-learned constructors (kNN-RBF and
meta-feature agreement) are provided as ablation baselines.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError, ParameterError

NORM_GUARD = 1e-12  # floor on embedding norms; a degenerate node gets ~0 similarity
DEGREE_GUARD = 1e-8  # keeps the log barrier finite for near-isolated nodes


@dataclass
class AglParams:
    w_a: "nc.Param"  # (d, d_a)

    def all_params(self):
        return [self.w_a]


def init_agl(d, d_a, rng):
    if d_a < 1:
        raise ParameterError(f"projection width d_a must be >= 1, got {d_a}")
    return AglParams(nc.glorot(rng, d, d_a, "w_a"))


@dataclass
class LearnedGraph:
    """Adjacency with provenance; `pre_relu` kept for learned graphs."""

    a: np.ndarray
    provenance: str  # learned | knn | meta | dense
    pre_relu: np.ndarray = None


def _cosine_normalize(tape, z):
    n2 = nc.sum_axis(z * z, axis=0)  # (1, N)
    # guard inside the sqrt: same floored value, but the gradient stays
    # finite for a node whose projection is exactly zero
    norm = nc.sqrt(nc.maximum(n2, NORM_GUARD * NORM_GUARD))
    return z / norm


def learned_adjacency(tape, h, params):
    """Differentiable adjacency node: relu(weighted cosine), unit diagonal."""
    z = tape.leaf(params.w_a).T @ h
    zn = _cosine_normalize(tape, z)
    a_hat = zn.T @ zn
    n = a_hat.value.shape[0]
    off = 1.0 - np.eye(n)
    return nc.relu(a_hat) * off + np.eye(n), a_hat


def learned_graph(h, params):
    """Non-differentiable wrapper: numpy features in, LearnedGraph out."""
    tape = nc.Tape()
    a, a_hat = learned_adjacency(tape, tape.const(np.asarray(h, dtype=np.float64)), params)
    return LearnedGraph(a.value, "learned", a_hat.value)


def smoothness_loss(tape, h, a):
    """Dirichlet energy of the node features over the graph, / (2 N^2)."""
    n = a.value.shape[0]
    if h.value.shape[1] != n:
        raise DimensionError(f"H has {h.value.shape[1]} columns but A is {a.value.shape}")
    sq = nc.sum_axis(h * h, axis=0)  # (1, N)
    gram = h.T @ h
    pairwise = sq + sq.T - 2.0 * gram  # ||h_i - h_j||^2
    return nc.sum_all(a * pairwise) / (2.0 * n * n)


def connectivity_loss(tape, a):
    """Log-barrier on node degrees; zero when every degree is one."""
    n = a.value.shape[0]
    deg = nc.sum_axis(a, axis=1)  # (N, 1)
    return -nc.sum_all(nc.log(deg + DEGREE_GUARD)) / n


def sparsity_reg(tape, a):
    """Mean squared edge weight (Frobenius norm squared over N^2)."""
    n = a.value.shape[0]
    return nc.sum_all(a * a) / (n * n)


def graph_loss(tape, h, a, alpha, beta):
    """Smoothness + alpha * connectivity + beta * sparsity; returns each term."""
    smooth = smoothness_loss(tape, h, a)
    con = connectivity_loss(tape, a)
    reg = sparsity_reg(tape, a)
    return smooth + alpha * con + beta * reg, smooth, con, reg


def knn_graph_rbf(h, k, sigma):
    """RBF-kernel kNN graph on numpy features (d, N); symmetrised by max."""
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[1]
    if not 1 <= k < n:
        raise ParameterError(f"k must be in [1, N), got k={k}, N={n}")
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    sq = (h * h).sum(axis=0)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * h.T @ h, 0.0)
    w = np.exp(-d2 / (2.0 * sigma * sigma))
    np.fill_diagonal(w, -np.inf)  # self excluded from the neighbour ranking
    a = np.zeros((n, n))
    for i in range(n):
        nbrs = np.argpartition(w[i], -k)[-k:]
        a[i, nbrs] = w[i, nbrs]
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 1.0)
    return LearnedGraph(a, "knn")


def meta_graph(meta, threshold):
    """Agreement graph over discrete meta feature rows (n_meta, N).

    Edge weight is the fraction of meta columns two patients agree on, kept
    only when the agreement count reaches `threshold`.
    """
    meta = np.asarray(meta)
    n_meta, n = meta.shape
    if not 1 <= threshold <= n_meta:
        raise ParameterError(f"threshold must be in [1, {n_meta}], got {threshold}")
    agree = np.zeros((n, n))
    for r in range(n_meta):
        agree += meta[r][:, None] == meta[r][None, :]
    a = np.where(agree >= threshold, agree / n_meta, 0.0)
    np.fill_diagonal(a, 1.0)
    return LearnedGraph(a, "meta")


def dense_graph(n):
    """Fully-connected unit-weight graph (trivial fallback)."""
    return LearnedGraph(np.ones((n, n)), "dense")


def identity_graph(n):
    """Self-loops only; turns the GCN into a per-node MLP."""
    return LearnedGraph(np.eye(n), "dense")
