"""Two-layer graph convolutional classifier over the learned patient graph,
plus the single-node graph extension used for inductive prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError, ParameterError


@dataclass
class GcnParams:
    w0: "nc.Param"  # (d, d_h)
    w1: "nc.Param"  # (d_h, C)

    def all_params(self):
        return [self.w0, self.w1]


def init_gcn(d, d_h, n_classes, rng):
    if d_h < 1:
        raise ParameterError(f"hidden width must be >= 1, got {d_h}")
    return GcnParams(nc.glorot(rng, d, d_h, "gcn.w0"), nc.glorot(rng, d_h, n_classes, "gcn.w1"))


def normalize_adj(tape, a, add_self_loops=False):
    """Symmetric degree normalisation D^-1/2 A D^-1/2 (optionally A + I)."""
    n = a.value.shape[0]
    if a.value.shape[1] != n:
        raise DimensionError(f"adjacency must be square, got {a.value.shape}")
    if add_self_loops:
        a = a + np.eye(n)
    deg = nc.maximum(nc.sum_axis(a, axis=1), 1e-12)  # (N, 1)
    s = 1.0 / nc.sqrt(deg)
    return a * s * s.T


def normalize_adj_np(a, add_self_loops=False):
    """Numpy twin of normalize_adj for inference paths."""
    a = np.asarray(a, dtype=np.float64)
    if add_self_loops:
        a = a + np.eye(a.shape[0])
    deg = np.maximum(a.sum(axis=1), 1e-12)
    s = 1.0 / np.sqrt(deg)
    return a * s[:, None] * s[None, :]


def gcn_forward(tape, h, a_norm, params, dropout=0.0, rng=None):
    """Logits (N, C) from fused features (d, N) and a normalised adjacency."""
    x = h.T  # (N, d)
    hidden = nc.relu(a_norm @ (x @ tape.leaf(params.w0)))
    if dropout > 0.0:
        if rng is None:
            raise ParameterError("dropout needs an rng")
        keep = (rng.random(hidden.value.shape) >= dropout) / (1.0 - dropout)
        hidden = hidden * keep
    return a_norm @ (hidden @ tape.leaf(params.w1))


def gcn_forward_np(h, a_norm, params):
    """Numpy twin of gcn_forward (no dropout; inference only)."""
    x = np.asarray(h).T
    hidden = np.maximum(a_norm @ (x @ params.w0.value), 0.0)
    return a_norm @ (hidden @ params.w1.value)


def extend_adjacency(a_train, sims):
    """Attach one node to a trained graph: symmetric row/col of similarities,
    unit self-weight, training edges untouched."""
    n = a_train.shape[0]
    if sims.shape != (n,):
        raise DimensionError(f"similarity row shape {sims.shape} != ({n},)")
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = a_train
    out[n, :n] = sims
    out[:n, n] = sims
    out[n, n] = 1.0
    return out
