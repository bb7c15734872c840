import math
import shutil

import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st

from builders import make_grid
from lvse.grid import GridError, electrical_distance, feeder_of, load_grid, resolve_grid_path, save_grid
from oracles import shortest_path_brute


def test_chain3_counts(chain3):
    assert len(chain3.buses) == 3 and len(chain3.lines) == 2 and len(chain3.prosumers) == 1
    assert [b.id for b in chain3.buses if b.kind == "slack_coupling"] == ["B1"]
    assert len(chain3.feeders) == 1
    assert feeder_of(chain3, "B3") == 0


def test_synth_rural_counts(rural):
    assert len(rural.buses) == 20 and len(rural.cabinets) == 2 and len(rural.prosumers) == 18
    assert len(rural.feeders) == 2
    assert {c.id: c.feeder_count for c in rural.cabinets} == {"C1": 3, "C2": 2}
    # hand count: feeder 0 holds B03..B11, feeder 1 holds B12..B20
    assert rural.feeders[0] == tuple(f"B{i:02d}" for i in range(3, 12))
    assert rural.feeders[1] == tuple(f"B{i:02d}" for i in range(12, 21))
    assert feeder_of(rural, "B06") == 0  # behind cabinet C1
    assert feeder_of(rural, "B15") == 1


@pytest.mark.parametrize("bus", ["B02", "B01"])
def test_feeder_of_rejects_substation(rural, bus):
    with pytest.raises(GridError):
        feeder_of(rural, bus)


def _copy(tmp_path, name="chain3"):
    dst = tmp_path / name
    shutil.copytree(resolve_grid_path(name), dst)
    return dst


def _append(path, line):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def test_unknown_bus_is_named(tmp_path):
    d = _copy(tmp_path)
    _append(d / "lines.csv", "L9,B3,B99,0.1,0.05,200")
    with pytest.raises(GridError, match="unknown bus B99"):
        load_grid(d)


def test_duplicate_id_is_named(tmp_path):
    d = _copy(tmp_path)
    _append(d / "buses.csv", "B3,junction,400")
    with pytest.raises(GridError, match="duplicate bus id B3"):
        load_grid(d)


def test_missing_profile_is_named(tmp_path):
    d = _copy(tmp_path)
    _append(d / "prosumers.csv", "P7,B3,household,3000,0,NOPE")
    with pytest.raises(GridError, match="P7: missing profile NOPE"):
        load_grid(d)


def test_disconnected_grid(tmp_path):
    d = _copy(tmp_path)
    _append(d / "buses.csv", "B4,junction,400")
    with pytest.raises(GridError, match="disconnected"):
        load_grid(d)


def test_schema_violation(tmp_path):
    d = _copy(tmp_path)
    text = (d / "lines.csv").read_text().replace("i_max_a", "imax")
    (d / "lines.csv").write_text(text)
    with pytest.raises(GridError, match="lines.csv"):
        load_grid(d)


def test_bad_number_names_record(tmp_path):
    d = _copy(tmp_path)
    _append(d / "lines.csv", "L9,B3,B2,abc,0.05,200")
    with pytest.raises(GridError, match="L9"):
        load_grid(d)


@pytest.mark.parametrize("name", ["chain3", "synth-rural"])
def test_round_trip(tmp_path, name):
    g = load_grid(name)
    again = load_grid(save_grid(g, tmp_path / name))
    assert again == g


def test_distance_identity(chain3):
    assert electrical_distance(chain3, "B2", "B2") == 0.0


def test_distance_chain():
    g = make_grid([("L1", "B1", "B2", 0.1, 0.05), ("L2", "B2", "B3", 0.2, 0.1)])
    assert electrical_distance(g, "B1", "B3") == pytest.approx(0.33541, abs=5e-6)
    assert electrical_distance(g, "B1", "B3") == pytest.approx(math.hypot(0.1, 0.05) + math.hypot(0.2, 0.1), abs=1e-12)


def test_distance_shorter_route_wins():
    g = make_grid([("L1", "B1", "B2", 0.01, 0.0), ("L2", "B2", "B4", 0.5, 0.0),
                   ("L3", "B2", "B3", 0.2, 0.0), ("L4", "B3", "B4", 0.2, 0.0)])
    assert electrical_distance(g, "B2", "B4") == pytest.approx(0.4, abs=1e-12)


@st.composite
def connected_graphs(draw):
    n = draw(st.integers(2, 8))
    edges = {frozenset((0, 1))}
    for k in range(2, n):  # random spanning tree
        edges.add(frozenset((k, draw(st.integers(0, k - 1)))))
    extra = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=6))
    edges |= {frozenset(e) for e in extra if e[0] != e[1]}
    weights = {}
    for e in sorted(edges, key=sorted):
        weights[e] = (draw(st.floats(0.001, 1.0)), draw(st.floats(-0.5, 0.5)))
    return n, weights


def _graph_grid(n, weights):
    lines = []
    for k, (e, (r, x)) in enumerate(sorted(weights.items(), key=lambda kv: sorted(kv[0]))):
        a, b = sorted(e)
        lines.append((f"L{k}", f"B{a + 1}", f"B{b + 1}", r, x))
    return make_grid(lines)


@settings(max_examples=60, deadline=None)
@given(connected_graphs(), st.data())
def test_distance_matches_exhaustive_paths(graph, data):
    n, weights = graph
    g = _graph_grid(n, weights)
    mags = {e: math.hypot(r, x) for e, (r, x) in weights.items()}
    a = data.draw(st.integers(0, n - 1))
    b = data.draw(st.integers(0, n - 1))
    c = data.draw(st.integers(0, n - 1))
    d_ab = electrical_distance(g, f"B{a + 1}", f"B{b + 1}")
    assert d_ab == pytest.approx(shortest_path_brute(n, mags, a, b), rel=1e-12, abs=1e-15)
    # metric properties
    assert d_ab == pytest.approx(electrical_distance(g, f"B{b + 1}", f"B{a + 1}"), rel=1e-12)
    assert (d_ab == 0) == (a == b)
    d_ac = electrical_distance(g, f"B{a + 1}", f"B{c + 1}")
    d_cb = electrical_distance(g, f"B{c + 1}", f"B{b + 1}")
    assert d_ab <= d_ac + d_cb + 1e-12


@settings(max_examples=40, deadline=None)
@given(connected_graphs(), st.data())
def test_removing_unused_line_keeps_distance(graph, data):
    n, weights = graph
    g = _graph_grid(n, weights)
    a = data.draw(st.integers(0, n - 1))
    b = data.draw(st.integers(0, n - 1))
    path = nx.dijkstra_path(g.graph, f"B{a + 1}", f"B{b + 1}", weight="weight")
    used = {frozenset((int(u[1:]) - 1, int(v[1:]) - 1)) for u, v in zip(path, path[1:])}
    spare = [e for e in weights if e not in used and e != frozenset((0, 1))]
    if not spare:
        return
    drop = data.draw(st.sampled_from(sorted(spare, key=sorted)))
    rest = {e: w for e, w in weights.items() if e != drop}
    try:
        h = _graph_grid(n, rest)
    except GridError:  # the dropped line was a bridge
        return
    before = electrical_distance(g, f"B{a + 1}", f"B{b + 1}")
    assert electrical_distance(h, f"B{a + 1}", f"B{b + 1}") == pytest.approx(before, rel=1e-12, abs=1e-15)
