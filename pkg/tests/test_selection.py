import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bail.dataset import selection_size
from bail.selection import (
    NonPositiveEnvelope,
    select,
    select_difference,
    select_ratio,
    select_top_returns,
)

from oracles import brute_force_selection

G = [1.0, 2.0, 3.0, 4.0]
V = [2.0, 2.0, 4.0, 4.0]


def test_ratio_example():
    r = select_ratio(G, V, 50)
    assert r.indices.tolist() == [1, 3] and r.threshold_x == 1.0
    assert r.keys.tolist() == [0.5, 1.0, 0.75, 1.0]


def test_difference_example():
    r = select_difference(G, V, 50)
    assert r.indices.tolist() == [1, 3] and r.threshold_x == 0.0
    assert np.all(np.asarray(G)[r.indices] >= np.asarray(V)[r.indices] - r.threshold_x)


def test_top_returns_examples():
    assert select_top_returns([5.0, 1.0, 9.0], 34).indices.tolist() == [0, 2]
    assert select_top_returns([3.0] * 6, 50).indices.tolist() == [0, 1, 2]
    assert select_top_returns([3.0, 1.0, 2.0], 100).indices.tolist() == [0, 1, 2]


def test_p_full_and_single():
    assert select_ratio(G, V, 100).indices.tolist() == [0, 1, 2, 3]
    assert select_difference(G, V, 1).indices.tolist() == [1]


def test_ratio_rejects_nonpositive():
    with pytest.raises(NonPositiveEnvelope, match="difference"):
        select_ratio([1.0, 2.0], [1.0, 0.0], 50)


def test_auto_rule():
    assert select(G, V, 50).rule == "ratio"
    assert select([-1.0, -2.0], [-0.5, -1.0], 50).rule == "difference"
    with pytest.raises(ValueError):
        select(G, V, 50, rule="softmax")


def test_bad_inputs():
    with pytest.raises(ValueError):
        select_difference([1.0], [1.0, 2.0], 50)
    with pytest.raises(ValueError):
        select_top_returns([1.0], 0)
    with pytest.raises(ValueError):
        select_top_returns([1.0], 101)


def test_selection_csv(tmp_path):
    select_ratio(G, V, 50).to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "index,key,selected,rule,x,p"
    assert [ln.split(",")[2] for ln in lines[1:]] == ["0", "1", "0", "1"]


# dyadic values keep scaling by powers of two and integer shifts exact
_dyadic = st.integers(-64, 64).map(lambda k: k / 4)
_pos = st.integers(1, 64).map(lambda k: k / 4)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(_dyadic, _pos), min_size=1, max_size=40),
       st.floats(0.5, 100.0), st.sampled_from([0.25, 2.0, 8.0]), st.integers(-20, 20))
def test_selection_properties(pairs, p, c, shift):
    g = np.array([a for a, _ in pairs])
    v = np.array([b for _, b in pairs])
    n = selection_size(p, len(g))
    for fn in (select_ratio, select_difference):
        r = fn(g, v, p)
        assert len(r.indices) == n == len(set(r.indices.tolist()))
        keys = r.keys
        assert r.indices.tolist() == brute_force_selection(keys.tolist(), p)
        mask = np.zeros(len(g), bool)
        mask[r.indices] = True
        if (~mask).any():
            assert keys[mask].min() >= keys[~mask].max()
    a, b = select_ratio(g, v, p), select_ratio(c * g, c * v, p)
    assert np.array_equal(a.indices, b.indices) and a.threshold_x == b.threshold_x
    a, b = select_difference(g, v, p), select_difference(g + shift, v + shift, p)
    assert np.array_equal(a.indices, b.indices)
    t = select_top_returns(g, p)
    assert t.indices.tolist() == brute_force_selection(g.tolist(), p)


@settings(max_examples=100, deadline=None)
@given(st.lists(_dyadic, min_size=2, max_size=40), st.floats(1.0, 50.0), st.floats(1.0, 50.0))
def test_nested_in_p(g, p1, extra):
    small = set(select_top_returns(g, p1).indices.tolist())
    big = set(select_top_returns(g, min(100.0, p1 + extra)).indices.tolist())
    assert small <= big
