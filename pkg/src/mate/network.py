"""Transportation graph, path-set generation and incidence matrices.

The network layer owns everything that is fixed during model training: the
directed graph with link capacities and free-flow times, the path sets per
O-D pair, and the sparse incidence structures that map flows between
aggregation levels (links <-> paths <-> O-D pairs <-> origin nodes).
"""

from __future__ import annotations

import heapq
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Link",
    "Network",
    "PathSet",
    "IncidenceMatrices",
    "ParseError",
    "parse_tntp",
    "parse_tntp_files",
    "k_shortest_paths",
    "build_incidences",
    "paths_to_csv",
    "paths_from_csv",
]


class ParseError(ValueError):
    """Raised on malformed TNTP input; message carries the line number."""


@dataclass(frozen=True)
class Link:
    id: int
    tail: int
    head: int
    capacity: float
    free_flow_time: float
    features: tuple = ()


@dataclass
class Network:
    """Directed graph with per-link capacity and free-flow travel time.

    Node labels are remapped to dense internal indices 0..|V|-1; the original
    labels are kept in ``node_labels`` for reporting. Link ids are dense
    0..|A|-1 in declaration order and define the canonical row ordering of
    every matrix in the model.
    """

    node_labels: list
    links: list  # list[Link], tail/head are internal node indices

    def __post_init__(self):
        n = len(self.node_labels)
        for lk in self.links:
            if not (0 <= lk.tail < n and 0 <= lk.head < n):
                raise ValueError(f"link {lk.id}: endpoint not a declared node")
            if lk.capacity <= 0:
                raise ValueError(f"link {lk.id}: capacity must be > 0")
            if lk.free_flow_time <= 0:
                raise ValueError(f"link {lk.id}: free-flow time must be > 0")
        ids = [lk.id for lk in self.links]
        if ids != list(range(len(self.links))):
            raise ValueError("link ids must be dense 0..|A|-1")
        self._out = [[] for _ in range(n)]
        for lk in self.links:
            self._out[lk.tail].append(lk)

    @property
    def n_nodes(self) -> int:
        return len(self.node_labels)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def capacities(self) -> np.ndarray:
        return np.array([lk.capacity for lk in self.links])

    @property
    def free_flow_times(self) -> np.ndarray:
        return np.array([lk.free_flow_time for lk in self.links])

    def node_index(self, label) -> int:
        try:
            return self.node_labels.index(label)
        except ValueError:
            raise KeyError(f"unknown node label {label!r}") from None

    def out_links(self, node: int) -> list:
        return self._out[node]


@dataclass
class PathSet:
    """Ordered path sets per O-D pair.

    ``od_pairs`` holds (origin, destination) internal node indices, grouped
    by origin. ``paths`` holds (od_index, link-id tuple) with the paths of
    each O-D pair stored contiguously, cheapest first.
    """

    od_pairs: list  # list[(origin, dest)]
    paths: list  # list[(od_index, tuple[int, ...])]

    def __post_init__(self):
        last = -1
        for od_idx, _ in self.paths:
            if od_idx < last:
                raise ValueError("paths must be grouped by od index")
            last = od_idx

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def n_od(self) -> int:
        return len(self.od_pairs)

    def validate(self, net: Network) -> None:
        """Check every path is a connected walk from its origin to its destination."""
        counts = [0] * self.n_od
        for od_idx, link_ids in self.paths:
            o, d = self.od_pairs[od_idx]
            node = o
            seen = {o}
            for a in link_ids:
                lk = net.links[a]
                if lk.tail != node:
                    raise ValueError(f"path {link_ids}: link {a} does not continue the walk")
                node = lk.head
                if node in seen and node != d:
                    raise ValueError(f"path {link_ids}: revisits node {node}")
                seen.add(node)
            if node != d:
                raise ValueError(f"path {link_ids}: ends at {node}, expected {d}")
            counts[od_idx] += 1
        if any(c == 0 for c in counts):
            empty = counts.index(0)
            raise ValueError(f"od pair {self.od_pairs[empty]} owns no path")


@dataclass
class IncidenceMatrices:
    """Sparse 0/1 incidence structures consumed by the forward graph.

    D: |A| x |H| link-in-path; M: |W| x |H| path-in-OD; L: |V| x |W|
    OD-originates-at-node; E: |A| x |A| flow-interaction mask.
    """

    D: sp.csr_matrix
    M: sp.csr_matrix
    L: sp.csr_matrix
    E: sp.csr_matrix
    # block index arrays derived from M and L (contiguous by construction)
    od_of_path: np.ndarray = field(default=None)
    origin_of_od: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.od_of_path is None:
            self.od_of_path = np.asarray(self.M.argmax(axis=0)).ravel()
        if self.origin_of_od is None:
            self.origin_of_od = np.asarray(self.L.argmax(axis=0)).ravel()
        # E support in COO form, reused by the interaction-kernel gradient
        coo = self.E.tocoo()
        self.e_rows = coo.row
        self.e_cols = coo.col
        self.e_diag = np.flatnonzero(self.e_rows == self.e_cols)

    @property
    def n_links(self) -> int:
        return self.D.shape[0]

    @property
    def n_paths(self) -> int:
        return self.D.shape[1]

    @property
    def n_od(self) -> int:
        return self.M.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.L.shape[0]


# ---------------------------------------------------------------------------
# TNTP parsing
# ---------------------------------------------------------------------------

def _read_metadata(lines, pos):
    meta = {}
    while pos < len(lines):
        line = lines[pos].strip()
        pos += 1
        if line == "<END OF METADATA>":
            return meta, pos
        if line.startswith("<"):
            key, _, val = line.partition(">")
            meta[key[1:].strip()] = val.strip()
    return meta, pos


def parse_tntp(net_text: str, trips_text: str):
    """Parse TNTP network/trips text into a Network and a reference O-D table.

    Returns ``(net, od_table)`` where ``od_table`` maps (origin_label,
    dest_label) to trips. Only strictly positive entries are kept.
    """
    lines = net_text.splitlines()
    meta, pos = _read_metadata(lines, 0)
    try:
        n_nodes = int(meta["NUMBER OF NODES"])
    except (KeyError, ValueError):
        raise ParseError("net file: missing or malformed <NUMBER OF NODES> header")

    raw_links = []
    for ln in range(pos, len(lines)):
        line = lines[ln].strip()
        if not line or line.startswith("~") or line.startswith("<"):
            continue
        parts = line.rstrip(";").split()
        if len(parts) < 4:
            raise ParseError(f"net file line {ln + 1}: expected at least 4 columns")
        try:
            tail, head = int(parts[0]), int(parts[1])
            cap, fft = float(parts[2]), float(parts[4] if len(parts) > 4 else parts[3])
        except ValueError:
            raise ParseError(f"net file line {ln + 1}: non-numeric field")
        if cap <= 0:
            raise ParseError(f"net file line {ln + 1}: non-positive capacity")
        if not (1 <= tail <= n_nodes and 1 <= head <= n_nodes):
            raise ParseError(f"net file line {ln + 1}: dangling node reference")
        raw_links.append((tail, head, cap, fft))
    if not raw_links:
        raise ParseError("net file: empty link section")

    labels = list(range(1, n_nodes + 1))
    links = [
        Link(i, t - 1, h - 1, cap, fft)
        for i, (t, h, cap, fft) in enumerate(raw_links)
    ]
    net = Network(labels, links)

    od = {}
    tlines = trips_text.splitlines()
    _, pos = _read_metadata(tlines, 0)
    origin = None
    for ln in range(pos, len(tlines)):
        line = tlines[ln].strip()
        if not line or line.startswith("~"):
            continue
        if line.lower().startswith("origin"):
            try:
                origin = int(line.split()[1])
            except (IndexError, ValueError):
                raise ParseError(f"trips file line {ln + 1}: malformed origin header")
            if not 1 <= origin <= n_nodes:
                raise ParseError(f"trips file line {ln + 1}: dangling node reference")
            continue
        if origin is None:
            raise ParseError(f"trips file line {ln + 1}: demand before any origin header")
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            dest_s, _, val_s = chunk.partition(":")
            try:
                dest, val = int(dest_s), float(val_s)
            except ValueError:
                raise ParseError(f"trips file line {ln + 1}: malformed demand entry {chunk!r}")
            if not 1 <= dest <= n_nodes:
                raise ParseError(f"trips file line {ln + 1}: dangling node reference")
            if val > 0 and dest != origin:
                od[(origin, dest)] = od.get((origin, dest), 0.0) + val
    return net, od


def parse_tntp_files(net_path, trips_path):
    with open(net_path) as f:
        net_text = f.read()
    with open(trips_path) as f:
        trips_text = f.read()
    return parse_tntp(net_text, trips_text)


# ---------------------------------------------------------------------------
# k shortest loopless paths (Yen's scheme on top of Dijkstra)
# ---------------------------------------------------------------------------

def _dijkstra(net: Network, cost, source, target, banned_nodes, banned_links):
    """Cheapest path avoiding banned nodes/links; ties broken by node sequence."""
    n = net.n_nodes
    dist = [np.inf] * n
    dist[source] = 0.0
    prev = [None] * n  # link taken to reach node
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        if u == target:
            break
        for lk in net.out_links(u):
            if lk.id in banned_links or lk.head in banned_nodes:
                continue
            nd = d + cost[lk.id]
            if nd < dist[lk.head] - 1e-15:
                dist[lk.head] = nd
                prev[lk.head] = lk
                heapq.heappush(heap, (nd, lk.head))
    if not np.isfinite(dist[target]):
        return None, np.inf
    path = []
    node = target
    while node != source:
        lk = prev[node]
        path.append(lk.id)
        node = lk.tail
    return tuple(reversed(path)), dist[target]


def _node_seq(net: Network, link_ids):
    if not link_ids:
        return ()
    seq = [net.links[link_ids[0]].tail]
    seq.extend(net.links[a].head for a in link_ids)
    return tuple(seq)


def _yen(net: Network, cost, source, target, k):
    first, c0 = _dijkstra(net, cost, source, target, set(), set())
    if first is None:
        return []
    accepted = [(c0, _node_seq(net, first), first)]
    candidates = []  # heap of (cost, node_seq, link_ids)
    seen = {first}
    while len(accepted) < k:
        _, _, base = accepted[-1]
        base_nodes = _node_seq(net, base)
        root_cost = 0.0
        for i in range(len(base)):
            spur_node = base_nodes[i]
            root = base[:i]
            banned_links = set()
            for _, _, p in accepted:
                if p[:i] == root and len(p) > i:
                    banned_links.add(p[i])
            for _, _, p in candidates:
                if p[:i] == root and len(p) > i:
                    banned_links.add(p[i])
            banned_nodes = set(base_nodes[:i])
            spur, spur_cost = _dijkstra(net, cost, spur_node, target, banned_nodes, banned_links)
            if spur is not None:
                total = root + spur
                if total not in seen:
                    seen.add(total)
                    heapq.heappush(
                        candidates,
                        (root_cost + spur_cost, _node_seq(net, total), total),
                    )
            root_cost += cost[base[i]]
        if not candidates:
            break
        accepted.append(heapq.heappop(candidates))
    return [(p, c) for c, _, p in accepted]


def k_shortest_paths(net: Network, od_pairs, k: int, cost=None) -> PathSet:
    """Up to k loopless cheapest paths per O-D pair.

    ``cost`` defaults to the free-flow travel times. Paths per pair are
    sorted ascending by cost with ties broken by lexicographic node
    sequence, which makes the output invariant to the declaration order of
    links. O-D pairs are sorted by (origin, destination) so that downstream
    incidence blocks are contiguous.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cost = net.free_flow_times if cost is None else np.asarray(cost, dtype=float)
    if np.any(cost <= 0):
        raise ValueError("costs must be > 0")
    pairs = sorted(set(map(tuple, od_pairs)))
    paths = []
    for od_idx, (o, d) in enumerate(pairs):
        found = _yen(net, cost, o, d, k)
        if not found:
            raise ValueError(f"od pair ({o}, {d}) is disconnected")
        for link_ids, _ in found:
            paths.append((od_idx, link_ids))
    ps = PathSet(pairs, paths)
    ps.validate(net)
    return ps


# ---------------------------------------------------------------------------
# incidence construction
# ---------------------------------------------------------------------------

def build_incidences(net: Network, ps: PathSet, interaction: str = "adjacency") -> IncidenceMatrices:
    """Build D, M, L and the flow-interaction mask E.

    ``interaction`` selects the support of E: "adjacency" marks (k, l) when
    links k and l share at least one endpoint node, "upstream_downstream"
    only marks head-to-tail/tail-to-head successions, and "diagonal" turns
    flow interactions off. The diagonal is always included.
    """
    A, H, W, V = net.n_links, ps.n_paths, ps.n_od, net.n_nodes
    d_rows, d_cols = [], []
    for h, (od_idx, link_ids) in enumerate(ps.paths):
        if any(a >= A for a in link_ids):
            raise ValueError(f"path {h} references unknown link")
        for a in link_ids:
            d_rows.append(a)
            d_cols.append(h)
    D = sp.csr_matrix((np.ones(len(d_rows)), (d_rows, d_cols)), shape=(A, H))
    od_of_path = np.array([od for od, _ in ps.paths], dtype=np.int64)
    M = sp.csr_matrix(
        (np.ones(H), (od_of_path, np.arange(H))), shape=(W, H)
    )
    origin_of_od = np.array([o for o, _ in ps.od_pairs], dtype=np.int64)
    L = sp.csr_matrix(
        (np.ones(W), (origin_of_od, np.arange(W))), shape=(V, W)
    )

    e_rows, e_cols = list(range(A)), list(range(A))
    if interaction != "diagonal":
        touched = [[] for _ in range(V)]
        for lk in net.links:
            touched[lk.tail].append(lk.id)
            touched[lk.head].append(lk.id)
        pairs = set()
        for lk in net.links:
            if interaction == "adjacency":
                neighbours = touched[lk.tail] + touched[lk.head]
            elif interaction == "upstream_downstream":
                neighbours = [o.id for o in net.out_links(lk.head)]
                neighbours += [o.id for o in net.links if o.head == lk.tail]
            else:
                raise ValueError(f"unknown interaction mode {interaction!r}")
            for other in neighbours:
                if other != lk.id:
                    pairs.add((lk.id, other))
        for r, c in sorted(pairs):
            e_rows.append(r)
            e_cols.append(c)
    E = sp.csr_matrix((np.ones(len(e_rows)), (e_rows, e_cols)), shape=(A, A))
    E.sum_duplicates()
    E.data[:] = 1.0
    return IncidenceMatrices(D=D, M=M, L=L, E=E)


# ---------------------------------------------------------------------------
# PathSet CSV round-trip
# ---------------------------------------------------------------------------

def paths_to_csv(ps: PathSet) -> str:
    buf = io.StringIO()
    buf.write("path_id,od_index,link_ids\n")
    for h, (od_idx, link_ids) in enumerate(ps.paths):
        buf.write(f"{h},{od_idx},{';'.join(map(str, link_ids))}\n")
    return buf.getvalue()


def paths_from_csv(text: str, od_pairs) -> PathSet:
    paths = []
    lines = text.strip().splitlines()
    for line in lines[1:]:
        pid, od_idx, ids = line.split(",")
        paths.append((int(od_idx), tuple(int(a) for a in ids.split(";") if a)))
    return PathSet(list(map(tuple, od_pairs)), paths)
