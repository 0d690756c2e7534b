import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iotfp.compiler import (REG_MAX, CompileError, CompiledTableSet, compile_model,
                            compile_probability_table, export_rules, import_rules,
                            quantize_prob, read_rules, tree_to_rules, write_rules)
from iotfp.neighbors import NeighborProbMatrix
from iotfp.tree import DecisionTree, TreeNode, train_tree


@pytest.mark.parametrize("p,q", [(0.0, 0), (1.0, 255), (0.4, 102), (0.999, 254)])
def test_quantize_examples(p, q):
    assert quantize_prob(p) == q


@pytest.mark.parametrize("p", [-0.01, 1.01])
def test_quantize_contract(p):
    with pytest.raises(CompileError):
        quantize_prob(p)


@given(st.floats(0.0, 1.0))
def test_quantization_error_bound(p):
    err = p - quantize_prob(p) / 255
    assert 0.0 <= err < 1 / 255


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=200))
def test_window_quantization_bound(probs):
    # accumulated integer features stay within m units of the scaled float sum
    total_q = sum(quantize_prob(p) for p in probs)
    assert 0.0 <= 255 * sum(probs) - total_q < len(probs) + 1e-9


def _toy_matrix():
    return NeighborProbMatrix((74, 1574), np.array([[1.0, 0.62], [0.62, 1.0]]))


def test_probability_rows():
    rows, default = compile_probability_table(_toy_matrix(), [74])
    assert rows == {74: (255,), 1574: (158,)}
    assert default == (0,)
    assert 999 not in rows


def test_single_leaf_rule():
    rules = tree_to_rules(DecisionTree(TreeNode((1, 4)), 3))
    assert len(rules) == 1
    assert rules[0].ranges == ((0, REG_MAX),) * 3 and rules[0].label == 1


def test_stump_rules():
    stump = DecisionTree(TreeNode((5, 5), 0, 102.5, TreeNode((5, 0)), TreeNode((0, 5))), 2)
    left, right = tree_to_rules(stump)
    assert left.ranges == ((0, 102), (0, REG_MAX)) and left.label == 0
    assert right.ranges == ((103, REG_MAX), (0, REG_MAX)) and right.label == 1


def _tables_for(tree, n):
    from iotfp.compiler import DirectionRule, RegisterSpec
    return CompiledTableSet("dev", tuple(range(1, n + 1)), 1_000_000,
                            (DirectionRule(0, 0), DirectionRule(1, 1500)), {},
                            tuple(tree_to_rules(tree)), RegisterSpec(32, n, 16))


def test_rules_equal_tree_on_random_vectors():
    rng = np.random.default_rng(2)
    X = rng.integers(0, 400, size=(500, 4))
    y = ((X[:, 0] > 150) ^ (X[:, 2] > 300) | (rng.random(500) < 0.1)).astype(int)
    tree = train_tree(X, y)
    tables = _tables_for(tree, 4)
    V = np.concatenate([rng.integers(0, 500, size=(9_000, 4)),
                        rng.integers(0, 2**32, size=(1_000, 4), dtype=np.uint64).astype(np.int64)])
    assert (tables.lookup_many(V) == tree.predict_many(V)).all()
    for v in V[:2000]:
        hits = [r for r in tables.inference_rules if r.matches(v)]
        assert len(hits) == 1
        assert tables.lookup_inference(v) == hits[0].label == tree.predict(v)


def _chain(n_leaves):
    node = TreeNode((1, 0))
    for i in range(n_leaves - 1):
        node = TreeNode((1, 1), 0, float(i) + 0.5, TreeNode((0, 1)), node)
    return DecisionTree(node, 1)


def test_too_many_leaves():
    assert len(tree_to_rules(_chain(500))) == 500
    with pytest.raises(CompileError, match="500"):
        tree_to_rules(_chain(501))


def test_compiled_structure(small_scenario):
    model = small_scenario.models["plug-a"]
    tables = compile_model(model)
    assert len(tables.direction_rules) == 2
    assert set(tables.prob_rows) == set(model.matrix.sizes)
    assert len(tables.inference_rules) == model.qtree.n_leaves <= 500
    assert tables.register_spec.width == 32 and tables.n_dims == len(model.key_packets)
    missing = next(p for p in range(20, 3001) if p not in tables.prob_rows)
    assert tables.prob_row(missing) == tables.default_row == (0,) * tables.n_dims


def test_quantization_bound_on_trained_model(small_scenario):
    model = small_scenario.models["cam-b"]
    exact = model.prob_lookup()
    quant = compile_model(model).prob_lookup_array()
    err = exact - quant / 255
    assert err.min() >= 0 and err.max() < 1 / 255


def test_rule_file_round_trip(small_scenario, tmp_path):
    tables = small_scenario.tables[0]
    write_rules(tables, tmp_path / "a.rules")
    again = read_rules(tmp_path / "a.rules")
    assert export_rules(again) == export_rules(tables)
    assert again.inference_rules == tables.inference_rules
    assert again.prob_rows == tables.prob_rows
    write_rules(compile_model(small_scenario.models["plug-a"]), tmp_path / "b.rules")
    assert (tmp_path / "a.rules").read_bytes() == (tmp_path / "b.rules").read_bytes()


def test_rule_file_lines(small_scenario):
    text = export_rules(small_scenario.tables[0])
    lines = text.splitlines()
    assert any(l.startswith("table=directional_packet_size priority=1 match=direction:1..1 "
                            "action=set_dir_size(1500)") for l in lines)
    assert any(l.startswith("table=packet_size_to_prob priority=default match=*") for l in lines)
    assert any(l.startswith("table=inference ") and "timeout:1..1" in l for l in lines)


@pytest.mark.parametrize("mutate", [
    lambda t: t.replace("dims=", "dims=9"),
    lambda t: t.replace("table=inference", "table=bogus", 1),
    lambda t: "garbage\n" + t,
])
def test_corrupted_rule_file(small_scenario, mutate):
    with pytest.raises(CompileError):
        import_rules(mutate(export_rules(small_scenario.tables[0])))
