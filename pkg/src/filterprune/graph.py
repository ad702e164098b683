"""Architecture description, builders, FLOP/parameter accounting and model files."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import ConvParams, ShapeError

FORMAT_VERSION = "1"

# ops whose output channel c depends only on input channel c
CHANNEL_WISE = ("bn", "relu", "maxpool", "avgpool", "gap", "flatten", "softmax")

VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]

# desk-scale members of the same families, used by tests and the synthetic experiments
SMALL_VGG_CFG = {
    "vgg-small": [16, 16, "M", 32, 32, "M", 64, 64, "M"],
    "cnn2": [8, "M", 16, "M"],
}


class ModelFormatError(ValueError):
    """Malformed or inconsistent model manifest/blob."""


@dataclass(frozen=True)
class Node:
    id: str
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict)

    def to_dict(self):
        return {"id": self.id, "op": self.op, "inputs": list(self.inputs), "attrs": dict(self.attrs)}


@dataclass
class ModelGraph:
    nodes: list
    input_shape: tuple
    num_classes: int
    family: str = "custom"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        seen = {"input"}
        for node in self.nodes:
            if node.id in seen:
                raise ShapeError(f"duplicate or reserved node id {node.id!r}")
            for src in node.inputs:
                if src not in seen:
                    raise ShapeError(f"node {node.id!r} reads {src!r} before it is defined")
            if node.op == "add" and len(node.inputs) < 2:
                raise ShapeError(f"add node {node.id!r} needs two inputs")
            seen.add(node.id)
        self._index = {n.id: n for n in self.nodes}

    def node(self, node_id):
        try:
            return self._index[node_id]
        except KeyError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def __contains__(self, node_id):
        return node_id in self._index

    @property
    def output_id(self):
        return self.nodes[-1].id

    def consumers(self, node_id):
        return [n for n in self.nodes if node_id in n.inputs]

    def conv_ids(self):
        return [n.id for n in self.nodes if n.op == "conv"]

    def to_dict(self):
        return {
            "family": self.family,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "nodes": [n.to_dict() for n in self.nodes],
        }

    @classmethod
    def from_dict(cls, d):
        nodes = [Node(n["id"], n["op"], tuple(n["inputs"]), dict(n.get("attrs", {}))) for n in d["nodes"]]
        return cls(nodes, tuple(d["input_shape"]), int(d["num_classes"]), d.get("family", "custom"))

    def __eq__(self, other):
        return isinstance(other, ModelGraph) and self.to_dict() == other.to_dict()


# ---------------------------------------------------------------- builders


class _Builder:
    def __init__(self):
        self.nodes = []
        self.last = "input"

    def add(self, nid, op, inputs=None, **attrs):
        self.nodes.append(Node(nid, op, tuple(inputs or (self.last,)), attrs))
        self.last = nid
        return nid

    def conv_bn_relu(self, prefix, cin, cout, stride=1, relu=True):
        self.add(f"{prefix}.conv", "conv", in_channels=cin, out_channels=cout, kernel=3,
                 stride=stride, padding=1, bias=False)
        self.add(f"{prefix}.bn", "bn", channels=cout, eps=1e-5)
        if relu:
            self.add(f"{prefix}.relu", "relu")
        return self.last


def _build_vgg(cfg, input_shape, num_classes, hidden):
    c, h, w = input_shape
    downs = 2 ** sum(1 for v in cfg if v == "M")
    if h % downs or w % downs:
        raise ShapeError(f"input {h}x{w} not divisible by the downsampling factor {downs}")
    b = _Builder()
    cin, ci, pi = c, 0, 0
    for v in cfg:
        if v == "M":
            b.add(f"pool{pi}", "maxpool", kernel=2, stride=2)
            pi += 1
        else:
            b.conv_bn_relu(f"features.{ci}", cin, v)
            cin = v
            ci += 1
    b.add("gap", "gap")
    if hidden:
        b.add("fc1", "dense", in_features=cin, out_features=hidden, bias=True)
        b.add("fc1.relu", "relu")
        cin = hidden
    b.add("fc", "dense", in_features=cin, out_features=num_classes, bias=True)
    return b.nodes


def _build_resnet(blocks_per_stage, input_shape, num_classes, widths=(16, 32, 64)):
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ShapeError(f"input {h}x{w} not divisible by the downsampling factor 4")
    b = _Builder()
    cin = widths[0]
    b.conv_bn_relu("stem", c, cin)
    for s, width in enumerate(widths):
        for k in range(blocks_per_stage):
            prefix = f"layer{s + 1}.{k}"
            stride = 2 if (s > 0 and k == 0) else 1
            block_in = b.last
            b.conv_bn_relu(f"{prefix}.a", cin, width, stride)
            b.conv_bn_relu(f"{prefix}.b", width, width, relu=False)
            main = b.last
            if stride != 1 or cin != width:
                short = b.add(f"{prefix}.shortcut", "shortcut", inputs=(block_in,), stride=stride,
                              in_channels=cin, out_channels=width)
            else:
                short = block_in
            b.add(f"{prefix}.add", "add", inputs=(main, short))
            b.add(f"{prefix}.relu", "relu")
            cin = width
    b.add("gap", "gap")
    b.add("fc", "dense", in_features=cin, out_features=num_classes, bias=True)
    return b.nodes


RESNET_DEPTHS = {"resnet8": 1, "resnet20": 3, "resnet56": 9, "resnet110": 18}
FAMILIES = ("vgg16-cifar",) + tuple(RESNET_DEPTHS) + tuple(SMALL_VGG_CFG)


def build_architecture(family, input_shape=(3, 32, 32), num_classes=10):
    """Build one of the supported CIFAR-style topologies.

    ``vgg16-cifar``: 13 conv/BN/ReLU layers, global pooling, 512-512-classes head.
    ``resnetN``: three stages of basic blocks (16/32/64 wide) with zero-padded
    identity shortcuts on downsampling. ``vgg-small``/``cnn2`` are desk-scale nets.
    """
    if len(input_shape) != 3:
        raise ShapeError(f"input_shape must be (C, H, W), got {input_shape}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if family == "vgg16-cifar":
        nodes = _build_vgg(VGG16_CFG, input_shape, num_classes, hidden=512)
    elif family in SMALL_VGG_CFG:
        nodes = _build_vgg(SMALL_VGG_CFG[family], input_shape, num_classes, hidden=0)
    elif family in RESNET_DEPTHS:
        nodes = _build_resnet(RESNET_DEPTHS[family], input_shape, num_classes)
    else:
        raise ValueError(f"unknown architecture family {family!r}; choose from {', '.join(FAMILIES)}")
    return ModelGraph(nodes, tuple(input_shape), num_classes, family)


def param_shapes(node):
    a = node.attrs
    if node.op == "conv":
        shapes = {"weight": (a["out_channels"], a["in_channels"], a["kernel"], a["kernel"])}
        if a.get("bias"):
            shapes["bias"] = (a["out_channels"],)
        return shapes
    if node.op == "bn":
        c = (a["channels"],)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    if node.op == "dense":
        shapes = {"weight": (a["out_features"], a["in_features"])}
        if a.get("bias"):
            shapes["bias"] = (a["out_features"],)
        return shapes
    return {}


def init_weights(graph, seed=0, dtype=np.float32):
    """He-normal conv/dense weights, zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    weights = {}
    for node in graph.nodes:
        shapes = param_shapes(node)
        if not shapes:
            continue
        t = {}
        for name, shape in shapes.items():
            if name == "weight":
                fan_in = int(np.prod(shape[1:]))
                t[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
            elif name in ("gamma", "running_var"):
                t[name] = np.ones(shape, dtype=dtype)
            else:
                t[name] = np.zeros(shape, dtype=dtype)
        weights[node.id] = t
    return weights


# ---------------------------------------------------------------- shapes & FLOPs


def infer_shapes(graph):
    """Per-node output shape (without the batch dimension)."""
    shapes = {"input": graph.input_shape}
    for node in graph.nodes:
        ins = [shapes[s] for s in node.inputs]
        x = ins[0]
        a = node.attrs
        op = node.op
        if op == "conv":
            if len(x) != 3 or x[0] != a["in_channels"]:
                raise ShapeError(f"{node.id}: expects {a['in_channels']} input channels, got {x}")
            cp = ConvParams(a["kernel"], a["kernel"], a["stride"], a["padding"], a["in_channels"], a["out_channels"])
            out = (a["out_channels"],) + cp.output_hw(x[1], x[2])
        elif op == "bn":
            if x[0] != a["channels"]:
                raise ShapeError(f"{node.id}: expects {a['channels']} channels, got {x}")
            out = x
        elif op in ("relu", "softmax"):
            out = x
        elif op in ("maxpool", "avgpool"):
            k, s = a["kernel"], a["stride"]
            out = (x[0], (x[1] - k) // s + 1, (x[2] - k) // s + 1)
            if out[1] < 1 or out[2] < 1:
                raise ShapeError(f"{node.id}: pool window larger than input {x}")
        elif op == "gap":
            out = (x[0],)
        elif op == "flatten":
            out = (int(np.prod(x)),)
        elif op == "dense":
            if x != (a["in_features"],):
                raise ShapeError(f"{node.id}: expects ({a['in_features']},) features, got {x}")
            out = (a["out_features"],)
        elif op == "add":
            if any(s != x for s in ins):
                raise ShapeError(f"{node.id}: residual add shapes differ {ins}")
            out = x
        elif op == "shortcut":
            s = a["stride"]
            out = (a["out_channels"], -(-x[1] // s), -(-x[2] // s))
        else:
            raise ShapeError(f"unsupported node type {op!r}")
        shapes[node.id] = tuple(int(v) for v in out)
    return shapes


@dataclass
class FlopReport:
    rows: list  # (node_id, op, flops, params)
    baseline_flops: int | None = None
    baseline_params: int | None = None

    @property
    def total_flops(self):
        return sum(r[2] for r in self.rows)

    @property
    def total_params(self):
        return sum(r[3] for r in self.rows)

    def with_baseline(self, baseline):
        return FlopReport(self.rows, baseline.total_flops, baseline.total_params)

    @property
    def flop_reduction(self):
        if not self.baseline_flops:
            return None
        return 100.0 * (1.0 - self.total_flops / self.baseline_flops)

    @property
    def param_reduction(self):
        if not self.baseline_params:
            return None
        return 100.0 * (1.0 - self.total_params / self.baseline_params)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node_id", "type", "flops", "params"])
        for row in self.rows:
            w.writerow(row)
        w.writerow(["TOTAL", "", self.total_flops, self.total_params])
        return buf.getvalue()

    def summary(self):
        s = f"FLOPs {self.total_flops / 1e6:.2f}M  params {self.total_params / 1e6:.2f}M"
        if self.baseline_flops:
            s += f"  (FLOPs -{self.flop_reduction:.1f}%, params -{self.param_reduction:.1f}%)"
        return s


def count_flops_params(graph):
    """One multiply-accumulate = one FLOP; only conv and dense layers count.

    Parameters are the trainable tensors (conv/dense weights and biases, BN
    scale and shift); BN running statistics are buffers and excluded.
    """
    shapes = infer_shapes(graph)
    rows = []
    for node in graph.nodes:
        a = node.attrs
        flops = params = 0
        if node.op == "conv":
            _, ho, wo = shapes[node.id]
            macs = a["kernel"] * a["kernel"] * a["in_channels"] * a["out_channels"]
            flops = macs * ho * wo
            params = macs + (a["out_channels"] if a.get("bias") else 0)
        elif node.op == "dense":
            flops = a["in_features"] * a["out_features"]
            params = flops + (a["out_features"] if a.get("bias") else 0)
        elif node.op == "bn":
            params = 2 * a["channels"]
        rows.append((node.id, node.op, int(flops), int(params)))
    return FlopReport(rows)


# ---------------------------------------------------------------- model files


def _blob_path(manifest_path):
    p = Path(manifest_path)
    return p.with_suffix(".bin")


def save_model(graph, weights, path):
    """Write ``path`` (JSON text manifest) and a sibling ``.bin`` blob.

    The blob is every tensor as little-endian float32, concatenated in
    manifest order.
    """
    path = Path(path)
    blob = _blob_path(path)
    tensors = []
    chunks = []
    offset = 0
    for node in graph.nodes:
        shapes = param_shapes(node)
        for name in shapes:
            arr = weights[node.id][name]
            if tuple(arr.shape) != shapes[name]:
                raise ModelFormatError(f"tensor {node.id}.{name} has shape {arr.shape}, expected {shapes[name]}")
            tensors.append({"node": node.id, "name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "graph": graph.to_dict(),
        "blob": blob.name,
        "total_elements": offset,
        "tensors": tensors,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(blob, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path, blob


def load_model(path):
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"malformed manifest {path}: {e}") from None
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise ModelFormatError(f"malformed manifest {path}: missing format_version")
    if manifest["format_version"] != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported format_version {manifest['format_version']!r} (expected {FORMAT_VERSION!r})"
        )
    try:
        graph = ModelGraph.from_dict(manifest["graph"])
        specs = manifest["tensors"]
        blob_path = path.parent / manifest["blob"]
    except (KeyError, TypeError) as e:
        raise ModelFormatError(f"malformed manifest {path}: {e}") from None
    raw = np.fromfile(blob_path, dtype="<f4") if os.path.getsize(blob_path) % 4 == 0 else None
    if raw is None:
        raise ModelFormatError(f"blob {blob_path} length {os.path.getsize(blob_path)} is not a multiple of 4")
    weights = {}
    offset = 0
    for t in specs:
        shape = tuple(t["shape"])
        n = int(np.prod(shape))
        if offset + n > raw.size:
            raise ModelFormatError(
                f"blob length mismatch: tensor {t['node']}.{t['name']} shape {list(shape)} needs "
                f"{n} floats at offset {offset}, blob holds {raw.size}"
            )
        weights.setdefault(t["node"], {})[t["name"]] = raw[offset:offset + n].reshape(shape).astype(np.float32)
        offset += n
    if offset != raw.size:
        raise ModelFormatError(f"blob length mismatch: manifest declares {offset} floats, blob holds {raw.size}")
    for node in graph.nodes:
        for name, shape in param_shapes(node).items():
            got = weights.get(node.id, {}).get(name)
            if got is None:
                raise ModelFormatError(f"manifest is missing tensor {node.id}.{name}")
            if got.shape != shape:
                raise ModelFormatError(f"tensor {node.id}.{name} has shape {got.shape}, graph expects {shape}")
    return graph, weights


def weights_equal(a, b):
    if a.keys() != b.keys():
        return False
    for nid in a:
        if a[nid].keys() != b[nid].keys():
            return False
        for k in a[nid]:
            if a[nid][k].shape != b[nid][k].shape or a[nid][k].tobytes() != b[nid][k].tobytes():
                return False
    return True
