"""Network parsing, path enumeration and incidence construction."""

import numpy as np
import pytest

from mate.datagen import load_sioux_falls
from mate.network import (
    Link,
    Network,
    ParseError,
    build_incidences,
    k_shortest_paths,
    parse_tntp,
    paths_from_csv,
    paths_to_csv,
)

from conftest import all_simple_paths, eight_link_net, ring_net, two_route_net


class TestParseTntp:
    def test_bundled_benchmark_dimensions(self):
        net, od = load_sioux_falls()
        assert net.n_nodes == 24
        assert net.n_links == 76
        assert len(od) == 528
        assert sum(od.values()) == pytest.approx(360600.0)

    def test_bundled_benchmark_attributes(self):
        net, _ = load_sioux_falls()
        # spot checks against the published tables
        assert net.free_flow_times.min() == pytest.approx(2.0)
        assert net.free_flow_times.max() == pytest.approx(10.0)
        assert net.capacities.min() > 4800
        assert net.capacities.max() < 26000

    def test_missing_header_is_parse_error(self):
        with pytest.raises(ParseError):
            parse_tntp("no headers here\n", "")

    def test_malformed_link_row_reports_line(self):
        text = (
            "<NUMBER OF NODES> 2\n<NUMBER OF LINKS> 1\n<END OF METADATA>\n"
            "1 2 oops 1.0 1.0 1.0 1.0 0 0 1 ;\n"
        )
        with pytest.raises(ParseError) as exc:
            parse_tntp(text, "<NUMBER OF ZONES> 2\n<END OF METADATA>\nOrigin 1\n")
        assert "line" in str(exc.value).lower()

    def test_nonpositive_capacity_rejected(self):
        text = (
            "<NUMBER OF NODES> 2\n<NUMBER OF LINKS> 1\n<END OF METADATA>\n"
            "1 2 0.0 1.0 1.0 0.15 4 0 0 1 ;\n"
        )
        with pytest.raises((ParseError, ValueError)):
            parse_tntp(text, "<NUMBER OF ZONES> 2\n<END OF METADATA>\nOrigin 1\n")


class TestShortestPaths:
    def test_two_route_paths(self):
        net = two_route_net()
        ps = k_shortest_paths(net, [(0, 3)], 2)
        found = {link_ids for _, link_ids in ps.paths}
        assert found == {(0, 1), (2, 3)}

    def test_matches_bruteforce_oracle(self):
        for seed in range(25):
            rng = np.random.default_rng(seed)
            net = ring_net(int(rng.integers(4, 8)), int(rng.integers(1, 5)), rng)
            cost = net.free_flow_times
            o, d = 0, net.n_nodes // 2
            every = all_simple_paths(net, o, d)
            assert every, "oracle found no path"
            oracle = sorted(every, key=lambda ids: (sum(cost[a] for a in ids), ids))
            for k in (1, 2, 3):
                ps = k_shortest_paths(net, [(o, d)], k)
                got = [link_ids for _, link_ids in ps.paths]
                want_costs = sorted(sum(cost[a] for a in ids) for ids in oracle)[:k]
                got_costs = [sum(cost[a] for a in ids) for ids in got]
                assert len(got) == min(k, len(oracle))
                assert got_costs == pytest.approx(want_costs)
                assert len(set(got)) == len(got)  # loopless and distinct

    def test_declaration_order_invariance(self):
        net = eight_link_net()
        perm = [3, 0, 7, 5, 1, 2, 6, 4]
        relinked = [net.links[j] for j in perm]
        net2 = Network(
            node_labels=list(net.node_labels),
            links=[
                Link(i, lk.tail, lk.head, lk.capacity, lk.free_flow_time)
                for i, lk in enumerate(relinked)
            ],
        )
        pairs = [(0, 3), (0, 4), (1, 4)]
        ps1 = k_shortest_paths(net, pairs, 3)
        ps2 = k_shortest_paths(net2, pairs, 3)

        def node_seqs(net_, ps_):
            seqs = []
            for od, link_ids in ps_.paths:
                nodes = [net_.links[link_ids[0]].tail]
                nodes += [net_.links[a].head for a in link_ids]
                seqs.append((od, tuple(nodes)))
            return seqs

        assert node_seqs(net, ps1) == node_seqs(net2, ps2)

    def test_disconnected_pair_raises(self):
        links = [(0, 1, 10.0, 1.0)]
        net = Network(node_labels=[0, 1, 2],
                      links=[Link(i, a, b, c, t) for i, (a, b, c, t) in enumerate(links)])
        with pytest.raises(ValueError):
            k_shortest_paths(net, [(0, 2)], 1)

    def test_groups_sorted_by_origin_destination(self):
        net = eight_link_net()
        ps = k_shortest_paths(net, [(1, 4), (0, 4), (0, 3)], 2)
        assert ps.od_pairs == sorted(ps.od_pairs)
        assert [od for od, _ in ps.paths] == sorted(od for od, _ in ps.paths)


class TestIncidences:
    def test_column_structure(self, toy):
        net, ps, inc = toy
        D = inc.D.toarray()
        M = inc.M.toarray()
        L = inc.L.toarray()
        for h, (od, link_ids) in enumerate(ps.paths):
            assert D[:, h].sum() == len(link_ids)
            assert set(np.flatnonzero(D[:, h])) == set(link_ids)
        assert (M.sum(axis=0) == 1).all()
        for h, (od, _) in enumerate(ps.paths):
            assert M[od, h] == 1
        assert (L.sum(axis=0) == 1).all()
        for wi, (o, _) in enumerate(ps.od_pairs):
            assert L[o, wi] == 1

    def test_interaction_modes(self, toy):
        net, ps, _ = toy
        diag = build_incidences(net, ps, interaction="diagonal").E.toarray()
        assert (diag == np.eye(net.n_links)).all()
        adj = build_incidences(net, ps, interaction="adjacency").E.toarray()
        assert (np.diag(adj) == 1).all()
        # links 0 (0->1) and 2 (1->2) share node 1
        assert adj[0, 2] == 1 and adj[2, 0] == 1
        # links 1 (0->2) and 6 (3->4) share no node
        assert adj[1, 6] == 0
        ud = build_incidences(net, ps, interaction="upstream_downstream").E.toarray()
        assert ud[0, 2] == 1  # head of 0 is tail of 2
        assert ud[0, 1] == 0  # 0 and 1 only share their tail
        with pytest.raises(ValueError):
            build_incidences(net, ps, interaction="bogus")

    def test_block_index_arrays(self, toy):
        _, ps, inc = toy
        assert inc.od_of_path.tolist() == [od for od, _ in ps.paths]
        assert inc.origin_of_od.tolist() == [o for o, _ in ps.od_pairs]


class TestPathCsv:
    def test_round_trip(self, toy):
        net, ps, _ = toy
        text = paths_to_csv(ps)
        back = paths_from_csv(text, ps.od_pairs)
        assert back.od_pairs == ps.od_pairs
        assert back.paths == ps.paths
