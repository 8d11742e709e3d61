"""Modal-attentional feature fusion.

Per patient, each modality is projected to query/key/value vectors of a common
width, an inter-modal score matrix is softmax-normalised into an attention map,
and values are aggregated across modalities with a residual connection before
two projection layers produce the fused feature. Everything is vectorised over
patients; the attention map is patient-specific.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError, ParameterError


@dataclass
class MaffParams:
    w_q: list  # per modality, Param (d_m, d_f)
    w_k: list
    w_v: list
    w_m: list  # per modality, Param (d_f, d_f)
    w_h: "nc.Param"  # (M*d_f, d)
    d_f: int
    d: int
    heads: int
    attention_axis: str = "column"  # "column": normalise over queries, as learned
    #   from the score-map definition; "row": conventional key-axis softmax

    @property
    def tau(self):
        # per-head temperature sqrt(d_f / heads)
        return float(np.sqrt(self.d_f / self.heads))

    def all_params(self):
        return [*self.w_q, *self.w_k, *self.w_v, *self.w_m, self.w_h]


def init_maff(schema, d_f, d, heads, rng, attention_axis="column"):
    if d_f % heads != 0:
        raise ParameterError(f"d_f={d_f} not divisible by head count {heads}")
    if attention_axis not in ("column", "row"):
        raise ParameterError(f"attention_axis must be 'column' or 'row', got {attention_axis!r}")
    w_q, w_k, w_v, w_m = [], [], [], []
    for name, dim in schema.modalities:
        w_q.append(nc.glorot(rng, dim, d_f, f"w_q.{name}"))
        w_k.append(nc.glorot(rng, dim, d_f, f"w_k.{name}"))
        w_v.append(nc.glorot(rng, dim, d_f, f"w_v.{name}"))
        w_m.append(nc.glorot(rng, d_f, d_f, f"w_m.{name}"))
    w_h = nc.glorot(rng, schema.n_modalities * d_f, d, "w_h")
    return MaffParams(w_q, w_k, w_v, w_m, w_h, d_f, d, heads, attention_axis)


class AttentionMaps:
    """Per-patient, per-head M x M attention scores (detached values)."""

    def __init__(self, tensor):
        self.tensor = np.asarray(tensor)  # (heads, M, M, N)

    @property
    def n_patients(self):
        return self.tensor.shape[3]

    def per_patient(self, i):
        """Head-averaged M x M map of one patient."""
        return self.tensor[:, :, :, i].mean(axis=0)

    def global_map(self):
        """Head-averaged map, then averaged over all patients."""
        if self.n_patients == 0:
            raise ParameterError("no patients to average attention maps over")
        return self.tensor.mean(axis=(0, 3))


def project(tape, xs, params):
    """Per-modality q/k/v projections for a batch given as (d_m, N) blocks."""
    if len(xs) != len(params.w_q):
        raise DimensionError(f"expected {len(params.w_q)} modalities, got {len(xs)}")
    qs, ks, vs = [], [], []
    for x, wq, wk, wv in zip(xs, params.w_q, params.w_k, params.w_v):
        x = x if isinstance(x, nc.Node) else tape.const(np.atleast_2d(x))
        if x.value.shape[0] != wq.value.shape[0]:
            raise DimensionError(
                f"modality rows {x.value.shape[0]} do not match projection rows "
                f"{wq.value.shape[0]}"
            )
        qs.append(tape.leaf(wq).T @ x)
        ks.append(tape.leaf(wk).T @ x)
        vs.append(tape.leaf(wv).T @ x)
    return qs, ks, vs


def _attention_rows(qs, ks, params):
    """Attention coefficients P[m][j] as 1 x N nodes, per head.

    Returns (coeff, tensor) where coeff[h][(m, j)] multiplies modality j's
    values in modality m's aggregation, and tensor is the detached
    (heads, M, M, N) score map.
    """
    m_count = len(qs)
    heads, dh = params.heads, params.d_f // params.heads
    tau = params.tau
    coeff = []
    tensor = np.empty((heads, m_count, m_count, qs[0].value.shape[1]))
    for h in range(heads):
        qh = [nc.slice_rows(q, h * dh, (h + 1) * dh) for q in qs]
        kh = [nc.slice_rows(k, h * dh, (h + 1) * dh) for k in ks]
        scores = [
            [nc.sum_axis(qh[i] * kh[j], axis=0) for j in range(m_count)]
            for i in range(m_count)
        ]
        rows = {}
        if params.attention_axis == "column":
            # normalise over the query index i, separately per key j
            for j in range(m_count):
                col = nc.softmax_columns(
                    nc.concat_rows([scores[i][j] for i in range(m_count)]), tau
                )
                tensor[h, :, j, :] = col.value
                for m in range(m_count):
                    rows[(m, j)] = nc.slice_rows(col, m, m + 1)
        else:
            # conventional: normalise over keys j, separately per query i
            for i in range(m_count):
                row = nc.softmax_columns(
                    nc.concat_rows([scores[i][j] for j in range(m_count)]), tau
                )
                tensor[h, i, :, :] = row.value
                for j in range(m_count):
                    rows[(i, j)] = nc.slice_rows(row, j, j + 1)
        coeff.append(rows)
    return coeff, tensor


def fuse_batch(tape, xs, params):
    """Fuse per-modality feature blocks (d_m, N) into (H: d x N, AttentionMaps)."""
    qs, ks, vs = project(tape, xs, params)
    m_count = len(xs)
    heads, dh = params.heads, params.d_f // params.heads
    coeff, tensor = _attention_rows(qs, ks, params)
    vhats = []
    for m in range(m_count):
        head_parts = []
        for h in range(heads):
            vh = [nc.slice_rows(v, h * dh, (h + 1) * dh) for v in vs]
            agg = vh[m]  # residual
            for j in range(m_count):
                agg = agg + coeff[h][(m, j)] * vh[j]
            head_parts.append(agg)
        merged = head_parts[0] if heads == 1 else nc.concat_rows(head_parts)
        vhats.append(tape.leaf(params.w_m[m]).T @ merged)
    h_out = tape.leaf(params.w_h).T @ nc.concat_rows(vhats)
    return h_out, AttentionMaps(tensor)


def fuse_one(tape, x_cols, params):
    """Fuse a single patient given per-modality vectors; returns (d x 1, maps)."""
    xs = [np.asarray(x, dtype=np.float64).reshape(-1, 1) for x in x_cols]
    return fuse_batch(tape, xs, params)


def attention_map(tape, x_cols, params):
    """Head-averaged M x M attention map of one patient."""
    _, maps = fuse_one(tape, x_cols, params)
    return maps.per_patient(0)


def global_attention_map(maps):
    """Dataset-level map: mean over heads, then over patients."""
    return maps.global_map()
