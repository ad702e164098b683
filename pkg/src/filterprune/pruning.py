"""Filter selection and structural graph surgery."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .graph import CHANNEL_WISE, ModelGraph, Node, count_flops_params, infer_shapes, param_shapes

log = logging.getLogger(__name__)


class PlanError(ValueError):
    """Pruning plan is inconsistent with the rank vector or graph."""


@dataclass
class PruningPlan:
    rates: dict  # layer_id -> pr in (0, 1)
    kept: dict  # layer_id -> sorted surviving filter indices
    method: str = ""
    counts: dict = field(default_factory=dict)  # layer_id -> original filter count

    def to_text(self):
        lines = [f"# method {self.method}"]
        for lid, kept in self.kept.items():
            pr = self.rates.get(lid, 0.0)
            lines.append(f"{lid} {pr!r} {','.join(str(i) for i in kept)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        rates, kept, method = {}, {}, ""
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if line.startswith("# method"):
                method = line[len("# method"):].strip()
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise PlanError(f"line {lineno}: expected 'layer_id pr kept_index_list'")
            lid, pr, idx = parts
            if float(pr) > 0:
                rates[lid] = float(pr)
            kept[lid] = [int(i) for i in idx.split(",")]
        return cls(rates, kept, method)


def load_rates(path_or_name):
    """Read a ``layer_id pr`` rates file; bare names resolve to shipped presets."""
    p = Path(path_or_name)
    if not p.exists():
        preset = resources.files("filterprune") / "presets" / f"{path_or_name}.rates"
        if not preset.is_file():
            raise FileNotFoundError(f"no rates file or preset named {path_or_name!r}")
        text = preset.read_text(encoding="utf-8")
    else:
        text = p.read_text(encoding="utf-8")
    rates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise PlanError(f"rates line {lineno}: expected 'layer_id pr', got {line!r}")
        rates[parts[0]] = float(parts[1])
    return rates


def keep_count(count, pr):
    return max(1, count - math.floor(pr * count))


def select_top_filters(rank, rates, graph=None):
    """Keep the highest-scoring ``count - floor(pr * count)`` filters per layer.

    Ties keep the lower filter index. Layers with no rate keep every filter.
    When ``graph`` is given, rates on residual-protected layers are dropped
    with a warning.
    """
    protected = protected_layers(graph) if graph is not None else set()
    rates = dict(rates)
    for lid, pr in rates.items():
        if lid not in rank.scores:
            raise PlanError(f"unknown layer id {lid!r}")
        if not 0 < pr < 1:
            raise PlanError(f"pruning rate for {lid} must be in (0, 1), got {pr}")
    for lid in sorted(protected & rates.keys()):
        log.warning("layer %s feeds a residual add and is not pruned; ignoring rate %.3f", lid, rates[lid])
        del rates[lid]
    kept, counts = {}, {}
    for lid, scores in rank.scores.items():
        scores = np.asarray(scores)
        counts[lid] = scores.size
        if lid not in rates:
            kept[lid] = list(range(scores.size))
            continue
        k = keep_count(scores.size, rates[lid])
        # stable sort on -score keeps lower indices first among ties
        order = np.argsort(-scores, kind="stable")
        kept[lid] = sorted(int(i) for i in order[:k])
    return PruningPlan(rates, kept, rank.method, counts)


def keep_all_plan(graph):
    kept = {nd.id: list(range(nd.attrs["out_channels"])) for nd in graph.nodes if nd.op == "conv"}
    return PruningPlan({}, kept, "none", {k: len(v) for k, v in kept.items()})


def protected_layers(graph):
    """Conv layers whose channels reach a residual add or a shortcut."""
    protected = set()
    for lid in graph.conv_ids():
        stack = [lid]
        seen = set()
        while stack:
            cur = stack.pop()
            for c in graph.consumers(cur):
                if c.op in ("add", "shortcut"):
                    protected.add(lid)
                    stack.clear()
                    break
                if c.op in CHANNEL_WISE and c.id not in seen:
                    seen.add(c.id)
                    stack.append(c.id)
    return protected


def _effective_kept(plan, weights):
    """Per conv layer: kept index array, or None when nothing is removed."""
    eff = {}
    for lid, kept in plan.kept.items():
        n_orig = weights[lid]["weight"].shape[0]
        eff[lid] = None if len(kept) == n_orig else np.asarray(kept, dtype=np.int64)
    return eff


def _channel_selection(graph, eff):
    """Surviving channel indices of every node output (None means all)."""
    shapes = infer_shapes(graph)
    sel = {"input": None}
    for node in graph.nodes:
        src = sel[node.inputs[0]] if node.inputs else None
        if node.op == "conv":
            sel[node.id] = eff.get(node.id)
        elif node.op == "dense":
            sel[node.id] = None
        elif node.op == "flatten":
            if src is None:
                sel[node.id] = None
            else:
                spatial = shapes[node.inputs[0]][1:]
                per = int(np.prod(spatial)) if spatial else 1
                sel[node.id] = (src[:, None] * per + np.arange(per)[None]).reshape(-1)
        elif node.op in ("add", "shortcut"):
            if any(sel[s] is not None for s in node.inputs):
                raise PlanError(f"pruned channels reach residual node {node.id}")
            sel[node.id] = None
        else:
            sel[node.id] = src
    return sel


def _validate(graph, plan):
    for lid, kept in plan.kept.items():
        node = graph.node(lid)
        if node.op != "conv":
            raise PlanError(f"{lid} is not a conv layer")
        n = node.attrs["out_channels"]
        if not kept or any(b <= a for a, b in zip(kept, kept[1:])) or kept[0] < 0 or kept[-1] >= n:
            raise PlanError(f"kept indices for {lid} must be strictly increasing within [0, {n})")


def construct_pruned(graph, weights, plan, strict=False):
    """Build the smaller graph and copy the surviving weights into it.

    Rates on residual-protected layers are ignored with a warning, or raise
    when ``strict`` is set.
    """
    _validate(graph, plan)
    protected = protected_layers(graph)
    plan = PruningPlan(dict(plan.rates), {k: list(v) for k, v in plan.kept.items()}, plan.method, dict(plan.counts))
    for lid in sorted(protected):
        kept = plan.kept.get(lid)
        if kept is not None and len(kept) != graph.node(lid).attrs["out_channels"]:
            if strict:
                raise PlanError(f"plan prunes residual-protected layer {lid}")
            log.warning("layer %s feeds a residual add and is not pruned", lid)
            plan.kept[lid] = list(range(graph.node(lid).attrs["out_channels"]))
            plan.rates.pop(lid, None)
    sel = _channel_selection(graph, _effective_kept(plan, weights))
    nodes = []
    for node in graph.nodes:
        a = dict(node.attrs)
        src = sel[node.inputs[0]] if node.inputs else None
        if node.op == "conv":
            if src is not None:
                a["in_channels"] = int(src.size)
            if sel[node.id] is not None:
                a["out_channels"] = int(sel[node.id].size)
        elif node.op == "bn" and src is not None:
            a["channels"] = int(src.size)
        elif node.op == "dense" and src is not None:
            a["in_features"] = int(src.size)
        nodes.append(Node(node.id, node.op, node.inputs, a))
    pruned = ModelGraph(nodes, graph.input_shape, graph.num_classes, graph.family)
    infer_shapes(pruned)
    new_weights = transfer_weights(weights, plan, pruned, _sel=sel)
    before, after = count_flops_params(graph), count_flops_params(pruned).with_baseline(count_flops_params(graph))
    log.info("pruned %s -> %s", before.summary(), after.summary())
    return pruned, new_weights


def transfer_weights(weights, plan, pruned_graph, _sel=None):
    """Copy every surviving weight element of the original into the pruned shapes."""
    sel = _sel if _sel is not None else _channel_selection(pruned_graph, _effective_kept(plan, weights))
    out = {}
    for node in pruned_graph.nodes:
        shapes = param_shapes(node)
        if not shapes:
            continue
        src_sel = sel[node.inputs[0]]
        t = {}
        for name, arr in weights[node.id].items():
            if node.op == "conv":
                own = sel[node.id]
                if name == "weight":
                    if own is not None:
                        arr = arr[own]
                    if src_sel is not None:
                        arr = arr[:, src_sel]
                elif name == "bias" and own is not None:
                    arr = arr[own]
            elif node.op == "bn" and src_sel is not None:
                arr = arr[src_sel]
            elif node.op == "dense" and name == "weight" and src_sel is not None:
                arr = arr[:, src_sel]
            t[name] = np.ascontiguousarray(arr)
            if name in shapes and t[name].shape != shapes[name]:
                raise AssertionError(f"{node.id}.{name}: mapped shape {t[name].shape} != {shapes[name]}")
        out[node.id] = t
    return out
