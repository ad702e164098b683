import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from filterprune.engine import ShapeError, TRAINABLE, run_forward
from filterprune.graph import (
    ModelFormatError,
    ModelGraph,
    Node,
    build_architecture,
    count_flops_params,
    infer_shapes,
    init_weights,
    load_model,
    save_model,
    weights_equal,
)
from filterprune.pruning import keep_all_plan, construct_pruned

from oracles import random_small_model, tiny_resnet


def test_single_conv_flops():
    g = ModelGraph([Node("c", "conv", ("input",), dict(in_channels=3, out_channels=16, kernel=3, stride=1,
                                                         padding=1, bias=False))], (3, 32, 32), 16)
    rep = count_flops_params(g)
    assert rep.total_flops == 442_368
    assert rep.total_params == 3 * 16 * 9


def test_resnet56_counts():
    g = build_architecture("resnet56", (3, 32, 32), 10)
    convs = [n for n in g.nodes if n.op == "conv"]
    dense = [n for n in g.nodes if n.op == "dense"]
    assert len(convs) == 55 and len(dense) == 1
    rep = count_flops_params(g)
    assert rep.total_flops / 1e6 == pytest.approx(125.49, rel=0.01)
    assert rep.total_params / 1e6 == pytest.approx(0.85, rel=0.01)


def test_vgg16_counts():
    rep = count_flops_params(build_architecture("vgg16-cifar", (3, 32, 32), 10))
    assert sum(1 for r in rep.rows if r[1] == "conv") == 13
    assert rep.total_flops / 1e6 == pytest.approx(313.73, rel=0.01)
    assert rep.total_params / 1e6 == pytest.approx(14.98, rel=0.01)


def test_resnet110_params():
    rep = count_flops_params(build_architecture("resnet110", (3, 32, 32), 10))
    assert rep.total_params / 1e6 == pytest.approx(1.73, rel=0.01)


def test_unknown_family_and_bad_input():
    with pytest.raises(ValueError, match="unknown architecture"):
        build_architecture("alexnet")
    with pytest.raises(ShapeError):
        build_architecture("resnet56", (3, 30, 30))
    with pytest.raises(ShapeError):
        build_architecture("vgg16-cifar", (3, 48, 48))


def test_graph_rejects_forward_references_and_duplicates():
    with pytest.raises(ShapeError):
        ModelGraph([Node("a", "relu", ("b",), {}), Node("b", "relu", ("input",), {})], (1, 2, 2), 1)
    with pytest.raises(ShapeError):
        ModelGraph([Node("a", "relu", ("input",), {}), Node("a", "relu", ("input",), {})], (1, 2, 2), 1)


def test_report_totals_and_csv():
    rep = count_flops_params(build_architecture("vgg-small", (3, 32, 32), 3))
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "node_id,type,flops,params"
    total = lines[-1].split(",")
    assert int(total[2]) == sum(r[2] for r in rep.rows) == rep.total_flops
    assert int(total[3]) == rep.total_params
    assert rep.flop_reduction is None
    assert rep.with_baseline(rep).flop_reduction == 0.0


@pytest.mark.parametrize("family", ["vgg-small", "cnn2", "resnet8", "resnet20"])
def test_count_consistency_with_weights(family):
    g = build_architecture(family, (3, 32, 32), 3)
    w = init_weights(g)
    n = sum(t[name].size for t in w.values() for name in TRAINABLE if name in t)
    assert count_flops_params(g).total_params == n


@pytest.mark.parametrize("family", ["vgg-small", "cnn2", "resnet8"])
def test_shape_inference_matches_forward(family):
    g = build_architecture(family, (3, 16, 16), 4)
    w = init_weights(g)
    fwd = run_forward(g, w, np.random.default_rng(0).random((2, 3, 16, 16), dtype=np.float32))
    for nid, shape in infer_shapes(g).items():
        assert fwd.outputs[nid].shape[1:] == shape, nid


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_graph_shape_inference(seed):
    g = random_small_model(np.random.default_rng(seed))
    fwd = run_forward(g, init_weights(g), np.zeros((1,) + g.input_shape, np.float32))
    shapes = infer_shapes(g)
    assert all(fwd.outputs[nid].shape[1:] == shapes[nid] for nid in shapes)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_removing_a_filter_strictly_decreases_counts(seed):
    rng = np.random.default_rng(seed)
    g = random_small_model(rng)
    w = init_weights(g)
    plan = keep_all_plan(g)
    candidates = [lid for lid, kept in plan.kept.items() if len(kept) > 1]
    lid = candidates[int(rng.integers(len(candidates)))]
    drop = int(rng.integers(len(plan.kept[lid])))
    plan.kept[lid] = [i for i in plan.kept[lid] if i != drop]
    before = count_flops_params(g)
    after = count_flops_params(construct_pruned(g, w, plan)[0])
    assert after.total_params < before.total_params
    assert after.total_flops < before.total_flops


# ---------------------------------------------------------------- model files


@pytest.mark.parametrize("make", [lambda: build_architecture("vgg-small", (3, 32, 32), 3), tiny_resnet])
def test_save_load_round_trip(tmp_path, make):
    g = make()
    w = init_weights(g, seed=3)
    m, blob = save_model(g, w, tmp_path / "model.json")
    g2, w2 = load_model(m)
    assert g2 == g
    assert weights_equal(w, w2)
    m2, blob2 = save_model(g2, w2, tmp_path / "again.json")
    assert blob.read_bytes() == blob2.read_bytes()
    assert json.loads(m.read_text())["tensors"] == json.loads(m2.read_text())["tensors"]


def _saved(tmp_path):
    g = random_small_model(np.random.default_rng(1), n_conv=1)
    return save_model(g, init_weights(g), tmp_path / "m.json")


def test_truncated_blob_reports_length_mismatch(tmp_path):
    m, blob = _saved(tmp_path)
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ModelFormatError, match="length mismatch"):
        load_model(m)


def test_blob_not_multiple_of_four(tmp_path):
    m, blob = _saved(tmp_path)
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(ModelFormatError, match="multiple of 4"):
        load_model(m)


def test_declared_shape_larger_than_blob_names_tensor(tmp_path):
    m = tmp_path / "bad.json"
    (tmp_path / "bad.bin").write_bytes(np.zeros(3, "<f4").tobytes())
    g = ModelGraph([Node("fc", "dense", ("input",), dict(in_features=2, out_features=2, bias=False))], (2,), 2)
    m.write_text(json.dumps({"format_version": "1", "graph": g.to_dict(), "blob": "bad.bin",
                             "tensors": [{"node": "fc", "name": "weight", "shape": [2, 2], "offset": 0}]}))
    with pytest.raises(ModelFormatError, match=r"fc\.weight"):
        load_model(m)


def test_version_mismatch_and_malformed(tmp_path):
    m, _ = _saved(tmp_path)
    d = json.loads(m.read_text())
    d["format_version"] = "2"
    m.write_text(json.dumps(d))
    with pytest.raises(ModelFormatError, match="format_version"):
        load_model(m)
    m.write_text("{not json")
    with pytest.raises(ModelFormatError, match="malformed"):
        load_model(m)
