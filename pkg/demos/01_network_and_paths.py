"""Load the bundled benchmark network and inspect its path structure.

Walks through parsing, k-shortest-path enumeration and the sparse incidence
matrices that everything downstream consumes.
"""

import numpy as np

from mate import build_incidences, k_shortest_paths, load_sioux_falls

net, od_table = load_sioux_falls()
print(f"network: {net.n_nodes} nodes, {net.n_links} links")
print(f"demand:  {len(od_table)} O-D pairs, {sum(od_table.values()):.0f} trips/h")

# O-D pairs come keyed by node labels; the solver works in internal indices
pairs = sorted((net.node_index(o), net.node_index(d)) for o, d in od_table)

# three cheapest loopless routes per O-D pair at free-flow times
paths = k_shortest_paths(net, pairs, k=3)
print(f"paths:   {paths.n_paths} ({paths.n_paths / paths.n_od:.1f} per pair)")

inc = build_incidences(net, paths, interaction="adjacency")
D, M, L, E = inc.D, inc.M, inc.L, inc.E
print(f"D (link x path)   {D.shape}, nnz {D.nnz}")
print(f"M (od x path)     {M.shape}, nnz {M.nnz}")
print(f"L (node x od)     {L.shape}, nnz {L.nnz}")
print(f"E (link x link)   {E.shape}, nnz {E.nnz} (interaction support)")

# the longest route in the set, as a node sequence
od_idx, link_ids = max(paths.paths, key=lambda p: len(p[1]))
nodes = [net.links[link_ids[0]].tail] + [net.links[a].head for a in link_ids]
labels = [net.node_labels[v] for v in nodes]
print("longest route:", " -> ".join(map(str, labels)))

# free-flow cost of each route of the first O-D pair
tmin = net.free_flow_times
first = [p for p in paths.paths if p[0] == 0]
print("costs of O-D pair 0 routes:",
      np.round([sum(tmin[a] for a in ids) for _, ids in first], 2))
