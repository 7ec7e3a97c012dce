"""Shared fixtures: small hand-built networks, random instances and naive
reference implementations used as oracles by the unit tests."""

import numpy as np
import pytest

from mate.network import Link, Network, build_incidences, k_shortest_paths
from mate.observations import ObservationSet, Sample
from mate.params import ModelParams


def two_route_net():
    """4 nodes, both routes 0->1->3 and 0->2->3 for the single O-D pair."""
    links = [(0, 1, 50.0, 2.0), (1, 3, 50.0, 3.0), (0, 2, 40.0, 2.5), (2, 3, 40.0, 3.0)]
    return Network(
        node_labels=[1, 2, 3, 4],
        links=[Link(i, a, b, c, t) for i, (a, b, c, t) in enumerate(links)],
    )


def eight_link_net():
    """5 nodes, 8 links, several O-D pairs with 2-3 alternative paths."""
    links = [
        (0, 1, 100, 2.0), (0, 2, 120, 3.0), (1, 2, 80, 1.0), (1, 3, 90, 4.0),
        (2, 3, 110, 2.5), (2, 4, 70, 3.5), (3, 4, 130, 1.5), (0, 3, 60, 6.0),
    ]
    return Network(
        node_labels=list(range(5)),
        links=[Link(i, a, b, c, t) for i, (a, b, c, t) in enumerate(links)],
    )


def ring_net(n_nodes: int, n_chords: int, rng):
    """Strongly connected ring plus random chords; used for random instances."""
    links = []
    for i in range(n_nodes):
        links.append((i, (i + 1) % n_nodes))
    seen = set(links)
    while len(links) < n_nodes + n_chords:
        a, b = rng.integers(0, n_nodes, 2)
        if a != b and (int(a), int(b)) not in seen:
            seen.add((int(a), int(b)))
            links.append((int(a), int(b)))
    return Network(
        node_labels=list(range(n_nodes)),
        links=[
            Link(i, a, b, float(rng.uniform(20, 200)), float(rng.uniform(1, 8)))
            for i, (a, b) in enumerate(links)
        ],
    )


def random_instance(seed: int, interaction: str = "adjacency"):
    """Random small problem: network, incidences, params, observations."""
    rng = np.random.default_rng(seed)
    net = ring_net(int(rng.integers(4, 7)), int(rng.integers(1, 4)), rng)
    n = net.n_nodes
    pairs = set()
    n_od = int(rng.integers(2, 5))
    while len(pairs) < n_od:
        o, d = rng.integers(0, n, 2)
        if o != d:
            pairs.add((int(o), int(d)))
    ps = k_shortest_paths(net, sorted(pairs), 2)
    inc = build_incidences(net, ps, interaction=interaction)
    A, V, W = net.n_links, net.n_nodes, inc.n_od
    flows = rng.uniform(1, 100, A)
    times = net.free_flow_times * rng.uniform(1.0, 2.0, A)
    flows[rng.random(A) < 0.2] = np.nan
    times[rng.random(A) < 0.2] = np.nan
    sample = Sample("s0", "p0", flows, times)
    obs = ObservationSet(
        [sample],
        Z={"p0": rng.uniform(0, 1, (A, 2))},
        O={"p0": rng.uniform(0, 1, (V, 1))},
        ref_generation={"p0": rng.uniform(5, 50, V)},
        ref_od={"p0": rng.uniform(2, 30, W)},
    )
    params = ModelParams(
        xhat=rng.uniform(0, 80, (1, A)),
        theta=rng.uniform(-2, -0.1, (1, 3)),
        gamma=rng.normal(0, 0.2, A),
        w=rng.uniform(0.1, 2.0, inc.e_rows.size),
        beta=rng.uniform(0.0, 0.5, 4),
        kappa=rng.normal(0, 0.5, (1, 1)),
        delta=rng.uniform(0, 40, (1, V)),
        omega=rng.normal(0, 1.0, (1, W)),
        period_ids=["p0"],
    )
    return net, ps, inc, obs, sample, params


# ---------------------------------------------------------------------------
# naive reference implementations (deliberately loop-based and independent of
# the vectorized library code)
# ---------------------------------------------------------------------------

def naive_blockwise_softmax(values, labels):
    values = np.asarray(values, dtype=float)
    out = np.zeros_like(values)
    for b in sorted(set(labels.tolist())):
        idx = [i for i, lab in enumerate(labels) if lab == b]
        block = values[idx]
        e = np.exp(block - block.max())
        out[idx] = e / e.sum()
    return out


def naive_forward(params, obs, sample, net, ps, inc):
    """Loop-based evaluation of the whole forward chain."""
    A, V = net.n_links, net.n_nodes
    cap = net.capacities
    tmin = net.free_flow_times
    i = params.slice_for(sample.period_id)
    Z = obs.Z_for(sample, A, params.theta.shape[1] - 1)
    O = obs.O_for(sample, V, params.kappa.shape[1])
    W = params.w_dense(inc)
    E = inc.E.toarray()

    def kernel(x):
        return sum(bk * (x / cap) ** (k + 1) for k, bk in enumerate(params.beta))

    def times(x):
        y = kernel(x)
        return np.array([
            tmin[a] * (1.0 + sum(E[a, b] * W[a, b] * y[b] for b in range(A)))
            for a in range(A)
        ])

    t_tilde = times(params.xhat[i])
    link_u = np.array([
        t_tilde[a] * params.theta[i][0]
        + sum(Z[a, k] * params.theta[i][k + 1] for k in range(Z.shape[1]))
        + params.gamma[a]
        for a in range(A)
    ])
    v = np.array([sum(link_u[a] for a in link_ids) for _, link_ids in ps.paths])
    p = naive_blockwise_softmax(v, inc.od_of_path)
    pre = np.array([
        params.delta[i][node]
        + sum(O[node, k] * params.kappa[i][k] for k in range(O.shape[1]))
        for node in range(V)
    ])
    g = np.maximum(0.0, pre)
    phi = naive_blockwise_softmax(params.omega[i], inc.origin_of_od)
    q = np.array([g[o] * phi[wi] for wi, (o, _) in enumerate(ps.od_pairs)])
    f = np.array([q[od] * p[h] for h, (od, _) in enumerate(ps.paths)])
    x = np.zeros(A)
    for h, (_, link_ids) in enumerate(ps.paths):
        for a in link_ids:
            x[a] += f[h]
    t = times(x)
    return {"t_tilde": t_tilde, "v": v, "p": p, "g": g, "phi": phi,
            "q": q, "f": f, "x": x, "t": t}


def all_simple_paths(net, origin, dest, max_len=None):
    """Brute-force DFS enumeration of loopless paths as link-id tuples."""
    out = []
    max_len = max_len or net.n_nodes

    def walk(node, visited, acc):
        if node == dest:
            out.append(tuple(acc))
            return
        if len(visited) > max_len:
            return
        for lk in net.out_links(node):
            if lk.head not in visited:
                walk(lk.head, visited | {lk.head}, acc + [lk.id])

    walk(origin, {origin}, [])
    return out


@pytest.fixture
def toy():
    net = eight_link_net()
    ps = k_shortest_paths(net, [(0, 3), (0, 4), (1, 4)], 3)
    inc = build_incidences(net, ps, interaction="adjacency")
    return net, ps, inc
