"""Per-filter importance scores: L1-Norm, Beta-Rank and an HRank-style baseline.

Beta-Rank multiplies a filter's L1-Norm by the ratio of the spread of its
output to the spread of its input window, both measured across a batch of
samples at each sliding position and averaged over positions.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine import run_forward

EPS = 1e-12
METHODS = ("L1", "Beta", "HRank")
_ALIASES = {"l1": "L1", "beta": "Beta", "betarank": "Beta", "beta-rank": "Beta", "hrank": "HRank"}


def canonical_method(name):
    key = name.lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown ranking method {name!r}; choose from l1, beta, hrank")
    return _ALIASES[key]


def position_count(geometry, window, stride):
    """Number of complete window placements per spatial axis.

    ``geometry`` is the (padded) layer size (n, m), ``window`` the filter
    size (n', m').
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    (n, m), (wn, wm) = geometry, window
    if wn > n or wm > m:
        raise ValueError(f"window {window} larger than layer {geometry}")
    return (n - wn) // stride + 1, (m - wm) // stride + 1


class _RunningVar:
    """Batch-wise mean/variance along axis 0, merged chunk by chunk."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        nb = x.shape[0]
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return
        tot = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / tot)
        self.m2 = self.m2 + m2b + delta ** 2 * (self.n * nb / tot)
        self.n = tot

    @property
    def var(self):
        return self.m2 / self.n


@dataclass
class WindowStats:
    layer_id: str
    sigma_in: float
    sigma_out: np.ndarray  # one per filter
    position_count: tuple
    n_samples: int
    sigma_in_map: np.ndarray = field(repr=False, default=None)  # per position
    sigma_out_map: np.ndarray = field(repr=False, default=None)  # filter x position

    @property
    def beta(self):
        return self.sigma_out / max(self.sigma_in, EPS)


def _layer_stats(node, in_var, out_var, n):
    a = node.attrs
    k, s, p = a["kernel"], a["stride"], a["padding"]
    per_pixel = in_var.sum(axis=0)  # sum of across-sample variances over channels
    if p:
        per_pixel = np.pad(per_pixel, p)
    box = sliding_window_view(per_pixel, (k, k))[::s, ::s].sum(axis=(2, 3))
    sigma_in_map = np.sqrt(np.maximum(box, 0.0) / (a["in_channels"] * k * k))
    sigma_out_map = np.sqrt(np.maximum(out_var, 0.0))
    counts = position_count(per_pixel.shape, (k, k), s)
    assert sigma_in_map.shape == counts == sigma_out_map.shape[1:], (counts, sigma_out_map.shape)
    return WindowStats(
        layer_id=node.id,
        sigma_in=float(sigma_in_map.mean()),
        sigma_out=sigma_out_map.reshape(sigma_out_map.shape[0], -1).mean(axis=1),
        position_count=counts,
        n_samples=n,
        sigma_in_map=sigma_in_map,
        sigma_out_map=sigma_out_map,
    )


def window_stats(graph, weights, batch, chunk=64):
    """Input/output window standard deviations for every conv layer.

    At each position p the output spread of filter k is the population std
    over the N raw conv outputs; the input spread is the root of the summed
    squared deviation of the N input windows from their element-wise batch
    mean, divided by N times the window size. Padding takes part as zeros.
    Both are averaged over all positions.
    """
    n = batch.shape[0]
    if n < 2:
        raise ValueError(f"window statistics need at least 2 samples, got {n}")
    conv_nodes = [nd for nd in graph.nodes if nd.op == "conv"]
    acc_in = {nd.id: _RunningVar() for nd in conv_nodes}
    acc_out = {nd.id: _RunningVar() for nd in conv_nodes}

    def hook(node, inputs, out):
        if node.op == "conv":
            acc_in[node.id].update(inputs[0])
            acc_out[node.id].update(out)

    for start in range(0, n, chunk):
        run_forward(graph, weights, batch[start:start + chunk], keep=False, hook=hook)
    return {
        nd.id: _layer_stats(nd, acc_in[nd.id].var, acc_out[nd.id].var, n) for nd in conv_nodes
    }


@dataclass
class RankVector:
    method: str
    scores: dict  # layer_id -> float64 array, one entry per filter
    batch_seed: int | None = None

    def __post_init__(self):
        for lid, s in self.scores.items():
            if not np.all(np.isfinite(s)):
                raise ValueError(f"non-finite scores in layer {lid}")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "filter_index", "score", "method", "batch_seed"])
        seed = "" if self.batch_seed is None else self.batch_seed
        for lid, s in self.scores.items():
            for i, v in enumerate(s):
                w.writerow([lid, i, repr(float(v)), self.method, seed])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty rank CSV")
        scores = {}
        methods = {r["method"] for r in rows}
        if len(methods) != 1:
            raise ValueError(f"rank CSV mixes methods {sorted(methods)}")
        for r in rows:
            scores.setdefault(r["layer_id"], []).append((int(r["filter_index"]), float(r["score"])))
        out = {}
        for lid, items in scores.items():
            items.sort()
            if [i for i, _ in items] != list(range(len(items))):
                raise ValueError(f"layer {lid}: filter indices are not 0..{len(items) - 1}")
            out[lid] = np.array([v for _, v in items], dtype=np.float64)
        seed = rows[0]["batch_seed"]
        return cls(methods.pop(), out, int(seed) if seed not in ("", None) else None)


def l1_rank(weight):
    """Sum of absolute filter weights, one score per output filter."""
    if weight is None:
        raise ValueError("conv weights missing")
    w = np.asarray(weight, dtype=np.float64)
    return np.abs(w).reshape(w.shape[0], -1).sum(axis=1)


def l1_rank_all(graph, weights):
    return RankVector("L1", {lid: l1_rank(weights[lid]["weight"]) for lid in graph.conv_ids()})


def beta_rank(graph, weights, batch, seed=None, stats=None):
    """L1-Norm scaled by sigma_out / max(sigma_in, eps) per filter."""
    if stats is None:
        stats = window_stats(graph, weights, batch)
    scores = {}
    for lid in graph.conv_ids():
        st = stats[lid]
        scores[lid] = l1_rank(weights[lid]["weight"]) * (st.sigma_out / max(st.sigma_in, EPS))
    return RankVector("Beta", scores, seed)


def activation_node(graph, conv_id):
    """The ReLU output that carries conv ``conv_id``'s channels (through BN/add)."""
    cur = conv_id
    while True:
        cons = graph.consumers(cur)
        if len(cons) != 1:
            return cur
        nxt = cons[0]
        if nxt.op == "relu":
            return nxt.id
        if nxt.op not in ("bn", "add"):
            return cur
        cur = nxt.id


def matrix_ranks(maps, eps=None):
    """Numerical rank of each trailing H x W matrix.

    A singular value counts when it exceeds max(H, W) * eps * largest
    singular value, eps being the machine epsilon of the source dtype.
    """
    maps = np.asarray(maps)
    if eps is None:
        eps = np.finfo(maps.dtype).eps if maps.dtype.kind == "f" else np.finfo(np.float64).eps
    sv = np.linalg.svd(maps.astype(np.float64), compute_uv=False)
    tol = max(maps.shape[-2:]) * eps * sv[..., :1]
    return (sv > tol).sum(axis=-1)


def hrank_score(graph, weights, batch, seed=None, chunk=64):
    """Mean numerical rank of each filter's post-activation feature maps."""
    n = batch.shape[0]
    if n < 1:
        raise ValueError("HRank needs at least one sample")
    targets = {activation_node(graph, lid): lid for lid in graph.conv_ids()}
    sums = {lid: None for lid in graph.conv_ids()}

    def hook(node, inputs, out):
        lid = targets.get(node.id)
        if lid is None:
            return
        r = matrix_ranks(out).sum(axis=0).astype(np.float64)
        sums[lid] = r if sums[lid] is None else sums[lid] + r

    for start in range(0, n, chunk):
        run_forward(graph, weights, batch[start:start + chunk], keep=False, hook=hook)
    return RankVector("HRank", {lid: sums[lid] / n for lid in graph.conv_ids()}, seed)


def compute_rank(method, graph, weights, batch=None, seed=None):
    method = canonical_method(method) if isinstance(method, str) else method
    if method == "L1":
        rv = l1_rank_all(graph, weights)
        rv.batch_seed = seed
        return rv
    if batch is None:
        raise ValueError(f"{method} ranking needs a calibration batch")
    if method == "Beta":
        return beta_rank(graph, weights, batch, seed)
    if method == "HRank":
        return hrank_score(graph, weights, batch, seed)
    raise ValueError(f"unknown ranking method {method!r}")


@dataclass
class GroupStats:
    l1_major: float
    l1_minor: float
    beta_major: float
    beta_minor: float
    betarank_major: float
    betarank_minor: float
    major: tuple
    minor: tuple


def group_stats(l1_scores, stats, major, minor):
    """Group means of L1, beta fraction and their per-filter product."""
    major, minor = tuple(sorted(set(major))), tuple(sorted(set(minor)))
    if not major or not minor:
        raise ValueError("filter groups must be non-empty")
    if set(major) & set(minor):
        raise ValueError(f"filter groups overlap on {sorted(set(major) & set(minor))}")
    l1 = np.asarray(l1_scores, dtype=np.float64)
    beta = stats.beta
    prod = l1 * beta

    def mean(v, idx):
        return math.fsum(v[i] for i in idx) / len(idx)

    return GroupStats(
        mean(l1, major), mean(l1, minor),
        mean(beta, major), mean(beta, minor),
        mean(prod, major), mean(prod, minor),
        major, minor,
    )
