import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from nextpoi.data import CheckInLog
from nextpoi.social import (
    checkin_vectors,
    cosine_similarity,
    discover_neighbors,
    graph_from_edges,
    neighbor_index,
    neighbor_window,
    read_edges,
)


def log_from(users_ts):
    """One row per (user, ts), POI id equal to the row's index within its user."""
    users, pois, ts = [], [], []
    for u, times in enumerate(users_ts):
        for i, t in enumerate(times):
            users.append(str(u))
            pois.append(str(i))
            ts.append(t)
    k = len(users)
    return CheckInLog.from_raw(users, pois, ts, [0.0] * k, [0.0] * k, [0] * k, ["Park"] * k)


# ---------------------------------------------------------------- vectors and cosine


def test_checkin_vectors_count_multiplicities():
    log = CheckInLog.from_raw(["0", "0", "0", "1"], ["a", "a", "b", "b"], [1, 2, 3, 4], [0] * 4, [0] * 4, [0] * 4,
                              [""] * 4)
    v = checkin_vectors(log).toarray()
    assert v.tolist() == [[2.0, 1.0], [0.0, 1.0]]
    assert checkin_vectors(log, np.array([3])).toarray().tolist() == [[0.0, 0.0], [0.0, 1.0]]


@pytest.mark.parametrize("a, b, expected", [
    ([1, 0, 2], [2, 0, 4], 1.0),
    ([1, 0], [0, 3], 0.0),
    ([1, 1], [1, 0], 0.70711),
])
def test_cosine_examples(a, b, expected):
    assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-5)


def test_cosine_sparse_dicts_and_zero_vector():
    assert cosine_similarity({3: 1, 9: 1}, {3: 1}) == pytest.approx(2 ** -0.5)
    assert cosine_similarity([0, 0], [1, 2]) == 0.0


# ---------------------------------------------------------------- discovery


def test_neighbor_threshold_is_strict():
    vecs = sp.csr_matrix(np.array([[1.0, 1, 1, 1], [1, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 0]]))
    g = discover_neighbors(vecs, 0.5)
    # users 0 and 1 have similarity exactly 0.5; 0 and 2 are identical
    assert g.edges() == {(0, 2)}
    assert g.neighbors[3] == []


def test_three_user_fixture():
    u0 = [1.0, 0.0, 0.0]
    u1 = [0.9, 0.43589, 0.0]
    u2 = [0.4, 0.5506, 0.7326]
    assert cosine_similarity(u0, u1) == pytest.approx(0.9, abs=1e-4)
    assert cosine_similarity(u1, u2) == pytest.approx(0.6, abs=1e-4)
    assert cosine_similarity(u0, u2) == pytest.approx(0.4, abs=1e-4)
    g = discover_neighbors(sp.csr_matrix(np.array([u0, u1, u2])), 0.5)
    assert g.edges() == {(0, 1), (1, 2)}
    assert g.neighbors[1] == [0, 2]  # most similar first


def test_negative_tau_rejected():
    with pytest.raises(ValueError):
        discover_neighbors(sp.csr_matrix(np.eye(2)), -0.1)


def test_tau_above_one_gives_empty_graph():
    g = discover_neighbors(sp.csr_matrix(np.ones((3, 2))), 1.0)
    assert g.edges() == set()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 3), min_size=4, max_size=4), min_size=2, max_size=8),
       st.floats(0.0, 0.95), st.floats(0.0, 0.95))
def test_discovery_symmetric_and_monotone_in_tau(rows, t1, t2):
    vecs = sp.csr_matrix(np.array(rows, dtype=np.float64))
    lo, hi = sorted((t1, t2))
    g_lo, g_hi = discover_neighbors(vecs, lo), discover_neighbors(vecs, hi)
    for g in (g_lo, g_hi):
        for i, ns in enumerate(g.neighbors):
            assert i not in ns
            for j in ns:
                assert i in g.neighbors[j]
    assert g_hi.edges() <= g_lo.edges()


def test_edges_file_passthrough(tmp_path):
    path = tmp_path / "edges.txt"
    path.write_text("u1 u2\nu2 u1\nu3 u3\nu1 ghost\n")
    g = graph_from_edges(read_edges(path), 3, ["u1", "u2", "u3"])
    assert g.edges() == {(0, 1)}
    assert g.provided and g.neighbors[2] == []


def test_export_round_trip(tmp_path):
    g = discover_neighbors(sp.csr_matrix(np.array([[1.0, 0], [1, 0.1], [0, 1]])), 0.5)
    g.export(tmp_path / "n.tsv")
    back = type(g).load_export(tmp_path / "n.tsv", 3)
    assert back.neighbors == g.neighbors
    assert np.allclose(sum(back.similarity, []), sum(g.similarity, []), atol=1e-9)


# ---------------------------------------------------------------- future masking


def test_window_is_latest_suffix():
    log = log_from([list(range(100, 130))])
    rows = neighbor_window(log, 0, cutoff=10_000, n=20)
    assert rows.tolist() == list(range(10, 30))  # check-ins 11..30


def test_window_none_when_all_after_cutoff():
    log = log_from([[500, 600, 700]])
    assert neighbor_window(log, 0, cutoff=100, n=1) is None


def test_window_cutoff_inclusive():
    log = log_from([[100]])
    assert neighbor_window(log, 0, cutoff=100, n=1).tolist() == [0]
    assert neighbor_window(log, 0, cutoff=99, n=1) is None


def test_neighbor_index_masks_future():
    # user 0 targets at rows 2..3; user 1 has check-ins interleaved
    log = log_from([[10, 20, 30, 40], [5, 15, 25, 35, 45]])
    g = graph_from_edges([(0, 1)], 2)
    targets = np.array([2, 3])
    idx = neighbor_index(log, g, targets, n=2, k_max=2)
    s1 = int(log.user_start[1])
    # cutoff ts[1]=20: neighbour rows with ts<=20 are 5,15
    assert idx.end[0].tolist() == [s1 + 2, -1]
    assert idx.end[1].tolist() == [s1 + 3, -1]
    assert idx.mask.tolist() == [[True, False], [True, False]]
    for w, t in enumerate(targets):
        e = idx.end[w, 0]
        assert np.all(log.ts[e - 2:e] <= log.ts[t - 1])


def test_neighbor_index_drops_short_histories():
    log = log_from([[10, 20, 30], [25, 26]])
    idx = neighbor_index(log, graph_from_edges([(0, 1)], 2), np.array([2]), n=2, k_max=1)
    assert idx.end.tolist() == [[-1]]
