"""Ranking stability, Grad-CAM heatmaps and the host inference benchmark."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import sample_batch
from .engine import MemoryTracker, backward_from, run_forward, softmax
from .graph import load_model
from .ranking import activation_node, compute_rank

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- stability


@dataclass
class StabilityReport:
    layers: list
    top_fraction: np.ndarray
    least_fraction: np.ndarray
    repetitions: int
    q: float
    seeds: list = field(default_factory=list)
    method: str = ""

    @property
    def top_smoothed(self):
        return moving_average(self.top_fraction)

    @property
    def least_smoothed(self):
        return moving_average(self.least_fraction)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_index", "layer_id", "top_fraction", "least_fraction", "top_smoothed", "least_smoothed"])
        for i, lid in enumerate(self.layers):
            w.writerow([i, lid, f"{self.top_fraction[i]:.6f}", f"{self.least_fraction[i]:.6f}",
                        f"{self.top_smoothed[i]:.6f}", f"{self.least_smoothed[i]:.6f}"])
        return buf.getvalue()


def moving_average(values, window=5):
    """Centred moving average; the window shrinks at the ends."""
    v = np.asarray(values, dtype=np.float64)
    half = window // 2
    return np.array([v[max(0, i - half):i + half + 1].mean() for i in range(v.size)])


def union_fraction(selections, k):
    """|union of the index sets| / (R * k)."""
    union = set()
    for s in selections:
        union.update(int(i) for i in s)
    return len(union) / (len(selections) * k)


def stability_from_ranks(ranks, q=0.25):
    """Top-k and bottom-k union fractions per layer over repeated rankings."""
    if len(ranks) < 2:
        raise ValueError("stability needs at least 2 repetitions")
    if not 0 < q < 0.5:
        raise ValueError("q must be in (0, 0.5)")
    layers, top, least = [], [], []
    for lid in ranks[0].scores:
        c = len(ranks[0].scores[lid])
        k = int(np.floor(q * c))
        if k == 0:
            log.warning("layer %s has %d filters; q=%.2f selects none, skipped", lid, c, q)
            continue
        tops, lows = [], []
        for rv in ranks:
            s = np.asarray(rv.scores[lid])
            tops.append(np.argsort(-s, kind="stable")[:k])
            lows.append(np.argsort(s, kind="stable")[:k])
        layers.append(lid)
        top.append(union_fraction(tops, k))
        least.append(union_fraction(lows, k))
    return layers, np.array(top), np.array(least)


def stability_fraction(graph, weights, method, dataset, R=3, q=0.25, seeds=None, batch_size=64):
    """Re-rank on R independent random batches and measure selection overlap.

    ``method`` is a ranking name (l1, beta, hrank) or a callable
    ``f(graph, weights, batch, seed) -> RankVector``.
    """
    if R < 2:
        raise ValueError("R must be >= 2")
    seeds = list(seeds) if seeds is not None else list(range(R))
    if len(seeds) != R or len(set(seeds)) != R:
        raise ValueError("need R distinct batch seeds")
    ranks = []
    for s in seeds:
        batch, _ = sample_batch(dataset, min(batch_size, len(dataset)), s)
        if callable(method):
            ranks.append(method(graph, weights, batch, s))
        else:
            ranks.append(compute_rank(method, graph, weights, batch, s))
    layers, top, least = stability_from_ranks(ranks, q)
    name = method if isinstance(method, str) else getattr(method, "__name__", "custom")
    return StabilityReport(layers, top, least, R, q, seeds, name)


# ---------------------------------------------------------------- Grad-CAM


@dataclass
class GradCamMap:
    heatmap: np.ndarray  # H x W in [0, 1]
    target_class: int
    probability: float
    channel_weights: np.ndarray = field(repr=False, default=None)
    layer_id: str = ""


def bilinear_resize(img, out_h, out_w):
    """Bilinear resampling with half-pixel centres (edges clamped)."""
    h, w = img.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def gradcam(graph, weights, image, target_class):
    """Class activation map from the last conv layer's post-activation output."""
    if not 0 <= target_class < graph.num_classes:
        raise ValueError(f"target_class {target_class} outside [0, {graph.num_classes})")
    convs = graph.conv_ids()
    if not convs:
        raise ValueError("model has no conv layer")
    feat_id = activation_node(graph, convs[-1])
    x = np.asarray(image)[None]
    fwd = run_forward(graph, weights, x, keep=True)
    seed_grad = np.zeros_like(fwd.logits)
    seed_grad[0, target_class] = 1.0
    _, node_grads = backward_from(graph, weights, fwd, seed_grad, want_nodes=[feat_id])
    acts = fwd.outputs[feat_id][0].astype(np.float64)
    grads = node_grads[feat_id][0].astype(np.float64)
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)
    cam = bilinear_resize(cam, x.shape[2], x.shape[3])
    peak = cam.max()
    cam = cam / peak if peak > 0 else np.zeros_like(cam)
    prob = float(softmax(fwd.logits.astype(np.float64))[0, target_class])
    return GradCamMap(cam, int(target_class), prob, alpha, feat_id)


def write_gradcam(cam, out_dir, stem="gradcam"):
    """PGM (P2, 8-bit) plus a float CSV; file names carry class and probability."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = f"{stem}_class{cam.target_class}_p{cam.probability:.4f}"
    h, w = cam.heatmap.shape
    q = np.round(cam.heatmap * 255).astype(int)
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(str(v) for v in row) for row in q]
    pgm = out_dir / f"{base}.pgm"
    pgm.write_text("\n".join(lines) + "\n", encoding="ascii")
    csv_path = out_dir / f"{base}.csv"
    np.savetxt(csv_path, cam.heatmap, delimiter=",", fmt="%.8f")
    return pgm, csv_path


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchResult:
    name: str
    times_ms: list
    peak_bytes: int

    @property
    def time_mean(self):
        return float(np.mean(self.times_ms))

    @property
    def time_std(self):
        return float(np.std(self.times_ms))

    @property
    def mem_mb(self):
        return self.peak_bytes / 2 ** 20


def _peak_bytes(graph, weights, x):
    tracker = MemoryTracker()
    run_forward(graph, weights, x, keep=False, tracker=tracker)
    return tracker.peak


def bench_model(graph, weights, input_shape=None, repetitions=5, warmup=1, clock=time.perf_counter,
                name="model", seed=0):
    """Time single-image inference ``repetitions`` times after ``warmup`` runs."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    shape = tuple(input_shape or graph.input_shape)
    x = np.random.default_rng(seed).random((1,) + shape, dtype=np.float32)
    for _ in range(warmup):
        run_forward(graph, weights, x, keep=False)
    times = []
    for _ in range(repetitions):
        t0 = clock()
        run_forward(graph, weights, x, keep=False)
        times.append((clock() - t0) * 1000.0)
    return BenchResult(name, times, _peak_bytes(graph, weights, x))


def bench(model_path, input_shape=None, repetitions=5, warmup=1, clock=time.perf_counter):
    graph, weights = load_model(model_path)
    return bench_model(graph, weights, input_shape, repetitions, warmup, clock, name=Path(model_path).stem)


def reduction(baseline, pruned):
    return 100.0 * (1.0 - pruned / baseline) if baseline else 0.0


@dataclass
class BenchReport:
    baseline: BenchResult
    pruned: BenchResult
    dataset: str = ""

    @property
    def time_reduction(self):
        return reduction(self.baseline.time_mean, self.pruned.time_mean)

    @property
    def mem_reduction(self):
        return reduction(self.baseline.peak_bytes, self.pruned.peak_bytes)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "dataset", "time_mean", "time_std", "mem_mean", "mem_std",
                    "time_reduction", "mem_reduction"])
        for r, tr, mr in ((self.baseline, 0.0, 0.0), (self.pruned, self.time_reduction, self.mem_reduction)):
            w.writerow([r.name, self.dataset, f"{r.time_mean:.4f}", f"{r.time_std:.4f}",
                        f"{r.mem_mb:.6f}", "0.000000", f"{tr:.2f}", f"{mr:.2f}"])
        return buf.getvalue()
