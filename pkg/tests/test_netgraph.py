import pytest

from sftsim.chainsim import BufferConfig
from sftsim.config import ConfigError, load_sim_config, parse_sim_config
from sftsim.engine import BOUNDARY, CONV, DECONV, ScuConfig
from sftsim.netgraph import (GraphError, bundled_graph_path, extract_chains,
                             frame_latency_estimate, load_netgraph, parse_netgraph,
                             save_netgraph, simulate_graph)

LINEAR = """
node a kind=conv3x3s1 cin=8 cout=8 h=16 w=8
node b kind=conv3x3s1 cin=8 cout=8 h=16 w=8
node c kind=deconv4x4s2 cin=8 cout=4 h=16 w=8
edge a b
edge b c
"""


def test_empty_graph():
    g = parse_netgraph("# nothing here\n")
    assert not g.nodes and not g.edges
    ext = extract_chains(g)
    assert ext.chains == [] and ext.residue == []
    assert frame_latency_estimate(g, ScuConfig(), BufferConfig())[0] == 0


def test_linear_graph_is_one_chain():
    ext = extract_chains(parse_netgraph(LINEAR))
    assert ext.chain_ids() == [["a", "b", "c"]] and ext.residue == []


def test_fan_out_breaks_the_chain():
    g = parse_netgraph(LINEAR + """
node d kind=conv3x3s1 cin=8 cout=8 h=16 w=8
node e kind=conv3x3s1 cin=8 cout=8 h=16 w=8
edge a d
edge d e
""")
    ext = extract_chains(g)
    assert ["a"] == ext.residue
    assert ext.chain_ids() == [["b", "c"], ["d", "e"]]


def test_boundary_nodes_stay_unfused():
    g = parse_netgraph("""
node x kind=boundary cin=8 cout=8 h=16 w=8
node a kind=conv3x3s1 cin=8 cout=8 h=16 w=8
node y kind=boundary cin=16 cout=8 h=16 w=8 boundary_bytes=1000 boundary_cycles=7
edge x a
edge a y
""")
    ext = extract_chains(g)
    assert ext.chains == [] and ext.residue == ["x", "a", "y"]


def test_mismatched_edge_is_named():
    bad = LINEAR.replace("cin=8 cout=4", "cin=6 cout=4")
    with pytest.raises(GraphError, match="b->c"):
        parse_netgraph(bad)


def test_cycles_and_parse_errors():
    with pytest.raises(GraphError, match="cycle"):
        parse_netgraph(LINEAR + "edge c a\n".replace("c a", "b a"))
    with pytest.raises(GraphError, match="unknown key"):
        parse_netgraph("node a kind=conv3x3s1 cin=1 cout=1 h=4 w=4 colour=red\n")
    with pytest.raises(GraphError, match=":1"):
        parse_netgraph("nodes a\n")
    with pytest.raises(GraphError, match="unknown node"):
        parse_netgraph("node a kind=conv3x3s1 cin=1 cout=1 h=4 w=4\nedge a z\n")
    with pytest.raises(GraphError, match="kind"):
        parse_netgraph("node a kind=conv7x7 cin=1 cout=1 h=4 w=4\n")


def test_boundary_channel_budget():
    with pytest.raises(GraphError, match="channels"):
        parse_netgraph("""
node a kind=conv3x3s1 cin=8 cout=8 h=4 w=4
node y kind=boundary cin=4 cout=8 h=4 w=4
edge a y
""")


def structure(g):
    return list(g.nodes.items()), g.edges


def test_round_trip(tmp_path):
    for g in (parse_netgraph(LINEAR), load_netgraph(bundled_graph_path())):
        text = save_netgraph(g, tmp_path / "g.graph")
        back = load_netgraph(tmp_path / "g.graph")
        assert structure(back) == structure(g)
        assert save_netgraph(back) == text


def test_bundled_graph_vocabulary_and_partition():
    g = load_netgraph(bundled_graph_path())
    assert {s.kind for s in g.nodes.values()} == {CONV, DECONV, BOUNDARY}
    assert {s.tag for s in g.nodes.values()} == {
        "motion-decoder", "residual-decoder", "feature-reconstruction", "boundary"}
    ext = extract_chains(g, BufferConfig())
    covered = [n for c in ext.chain_ids() for n in c] + ext.residue
    assert sorted(covered) == sorted(g.nodes)
    for chain in ext.chains:
        kinds = [L.kind for L in chain.layers]
        assert DECONV not in kinds[:-1] and BOUNDARY not in kinds


def test_buffer_aware_extraction_splits_long_runs():
    g = load_netgraph(bundled_graph_path())
    greedy = extract_chains(g)
    fitted = extract_chains(g, BufferConfig())
    assert ["fr_rb1_c1", "fr_rb1_c2", "fr_rb2_c1", "fr_rb2_c2", "fr_rb3_c1",
            "fr_rb3_c2", "fr_up"] in greedy.chain_ids()
    assert ["fr_rb3_c1", "fr_rb3_c2", "fr_up"] in fitted.chain_ids()
    rep = simulate_graph(g, ScuConfig(), BufferConfig(), split=False)
    assert rep.deadlocked == ["fr_rb1_c1..fr_up"]


def test_graph_report_sums_parts_and_ignores_threads():
    g = load_netgraph(bundled_graph_path())
    one = simulate_graph(g, ScuConfig(), BufferConfig())
    four = simulate_graph(g, ScuConfig(), BufferConfig(), threads=4)
    assert one.to_json() == four.to_json()
    assert one.traffic == sum(p.traffic for p in one.parts)
    assert one.traffic < one.baseline_traffic
    mods = one.by_tag()
    assert sum(m["reads"] + m["writes"] for m in mods.values()) == one.traffic


def test_latency_scales_with_area():
    scu, buf = ScuConfig(), BufferConfig()
    fill = (scu.preu_fill + scu.postu_fill) / scu.frequency_hz
    small = parse_netgraph(LINEAR.replace("h=16 w=8", "h=32 w=32"))
    big = parse_netgraph(LINEAR.replace("h=16 w=8", "h=64 w=64"))
    a, _ = frame_latency_estimate(small, scu, buf)
    b, _ = frame_latency_estimate(big, scu, buf)
    assert (b - fill) / (a - fill) == pytest.approx(4, rel=0.05)


def test_config_file(tmp_path):
    scu, buf = parse_sim_config("frequency_hz = 2e8\npif=8\nnum_banks = 12 # more\n")
    assert scu.frequency_hz == 2e8 and scu.pif == 8 and buf.num_banks == 12
    assert load_sim_config(None) == (ScuConfig(), BufferConfig())
    path = bundled_graph_path("default.cfg")
    assert load_sim_config(path) == (ScuConfig(), BufferConfig())
    with pytest.raises(ConfigError, match="unknown key"):
        parse_sim_config("banks = 3\n")
    with pytest.raises(ConfigError, match="bad value"):
        parse_sim_config("pif = many\n")
