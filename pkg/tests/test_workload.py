import math

import pytest
from hypothesis import given, strategies as st

from tilesim.errors import ConfigError
from tilesim.workload import (
    Mode, OperatorSpec, OpKind, Optimizer, SplitDegrees, flops, footprint, parse_workload, shard_elements,
)


def brute_linear_flops(B, M, N, K):
    # one multiply and one add per (batch, m, n, k) term
    return sum(2 for _ in range(B * M * N * K))


@pytest.mark.parametrize("kind,dims,expected", [
    (OpKind.LINEAR, (1, 2, 2, 2), 16),
    (OpKind.LINEAR, (1, 1, 1, 1), 2),
    (OpKind.TRANSFORMER, (1, 4, 2, 1), 832),
    (OpKind.CONV2, (1, 2, 2, 3, 1, 1, 4), 2 * 4 * 3 * 4),
    (OpKind.POOL, (2, 2, 2, 3, 2, 2), 2 * 2 * 4 * 4 * 3),
])
def test_unsplit_flops(kind, dims, expected):
    assert flops(OperatorSpec("x", kind, dims)) == expected


def test_linear_flops_match_term_count():
    assert flops(OperatorSpec("x", OpKind.LINEAR, (2, 3, 4, 5))) == brute_linear_flops(2, 3, 4, 5)


def test_transformer_flops_against_linear_composition():
    # QKV, projection and two 4H MLP matmuls plus the two attention matmuls
    B, H, S = 2, 8, 4
    lin = lambda m, k: 2 * B * S * m * k
    composed = lin(3 * H, H) + lin(H, H) + lin(4 * H, H) + lin(H, 4 * H) + 2 * (2 * B * S * S * H)
    assert flops(OperatorSpec("t", OpKind.TRANSFORMER, (B, H, S, 2))) == composed


@given(st.sampled_from([1, 2, 4]), st.sampled_from([1, 2]), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2]))
def test_flops_multiplicative_in_split(b, m, n, k):
    op = OperatorSpec("x", OpKind.LINEAR, (4, 4, 8, 8))
    split = SplitDegrees(OpKind.LINEAR, (b, m, n, k))
    assert flops(op, split) * split.product == flops(op)


def test_footprint_examples():
    op = OperatorSpec("x", OpKind.LINEAR, (1, 2, 2, 2))
    inf = footprint(op, mode=Mode.INFERENCE, optimizer=Optimizer.ADAM)
    assert (inf.weight_bytes, inf.gradient_bytes, inf.optimizer_state_bytes) == (8, 0, 0)
    tr = footprint(op, optimizer=Optimizer.ADAM)
    assert (tr.optimizer_state_bytes, tr.gradient_bytes) == (32, 8)
    assert footprint(op, optimizer=Optimizer.SGD).optimizer_state_bytes == 0
    pool = footprint(OperatorSpec("p", OpKind.POOL, (1, 4, 4, 2, 2, 2)))
    assert pool.weight_bytes == 0 and pool.input_bytes == pool.output_bytes == 64


@pytest.mark.parametrize("kind,dims,split,axes", [
    (OpKind.LINEAR, (4, 8, 8, 8), (1, 2, 2, 2), ("m", "k")),
    (OpKind.CONV2, (2, 4, 4, 4, 3, 3, 8), (1, 2, 2, 4), ("c", "k")),
    (OpKind.TRANSFORMER, (2, 8, 4, 4), (1, 4), ("nm",)),
])
def test_weight_shards_tile_the_weight(kind, dims, split, axes):
    op = OperatorSpec("x", kind, dims)
    s = SplitDegrees(kind, split)
    tp_shards = math.prod(s[a] for a in axes)
    assert shard_elements(op, s)[0] * tp_shards == shard_elements(op)[0]


def test_split_validation():
    with pytest.raises(ValueError):
        SplitDegrees(OpKind.LINEAR, (1, 2))
    assert SplitDegrees(OpKind.POOL, (2, 1, 1, 1)).degrees == (2, 1, 1)
    op = OperatorSpec("x", OpKind.LINEAR, (2, 4, 4, 3))
    with pytest.raises(ValueError, match="k=2"):
        SplitDegrees(OpKind.LINEAR, (1, 1, 1, 2)).check_divides(op)
    t = OperatorSpec("t", OpKind.TRANSFORMER, (2, 12, 4, 8))
    SplitDegrees(OpKind.TRANSFORMER, (2, 4)).check_divides(t)
    with pytest.raises(ValueError):
        SplitDegrees(OpKind.TRANSFORMER, (1, 8)).check_divides(t)


def test_parse_chain_and_repeat():
    g = parse_workload("""
operators:
  - {id: a, kind: linear, dims: [1, 2, 2, 2]}
  - {id: b, kind: linear, dims: {B: 1, M: 2, N: 2, K: 2}}
""")
    assert [op.id for op in g.operators] == ["a", "b"] and g.edges == [("a", "b")]
    g = parse_workload("""
operators:
  - id: layer
    kind: transformer
    repeat: 24
    dims: {B: 1, H: 64, S: 16, A: 4}
""")
    assert len(g) == 24 and len(g.edges) == 23


def test_parse_explicit_edges_and_toposort():
    g = parse_workload("""
operators:
  - {id: c, kind: linear, dims: [1, 1, 1, 1]}
  - {id: a, kind: linear, dims: [1, 1, 1, 1]}
edges:
  - [a, c]
""")
    assert [op.id for op in g.operators] == ["a", "c"]


@pytest.mark.parametrize("text,needle", [
    ("operators:\n  - {id: a, kind: linear, dims: [1, 1, 1, 1]}\nedges:\n  - [a, a]\n", "cycle"),
    ("operators:\n  - {id: a, kind: linear, dims: [1, 1, 1, 1]}\nedges:\n  - [a, zz]\n", "unknown operator 'zz'"),
    ("operators:\n  - {id: a, kind: linear, dims: [1, 0, 1, 1]}\n", ":2: operator 'a': dim M"),
    ("operators:\n  - {id: a, kind: blob, dims: [1]}\n", "unknown kind"),
    ("operators: []\n", "non-empty"),
])
def test_parse_errors_name_operator_and_line(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_workload(text, "w.yaml")
