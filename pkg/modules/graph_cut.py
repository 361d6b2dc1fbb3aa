"""
Graph Cut Module

This module provides the s-t flow network used by GrabCut and an exact minimum cut over it,
solved with the Boykov-Kolmogorov augmenting-path algorithm from PyMaxflow.

Orientation: a node left on the source side of the cut is labeled foreground.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import maxflow
import numpy as np

logger = logging.getLogger(__name__)


class FlowGraphError(ValueError):
    """Raised for graphs with invalid capacities or edge endpoints."""


@dataclass(frozen=True)
class FlowGraph:
    """
    Undirected neighbor graph with terminal links.

    Attributes:
        node_count: Number of non-terminal nodes
        source_caps: Capacity of the source→node link (paid when the node ends on the sink side)
        sink_caps: Capacity of the node→sink link (paid when the node ends on the source side)
        edges: (m, 2) integer node pairs
        edge_caps: (m,) capacity paid when the pair is separated by the cut
    """

    node_count: int
    source_caps: np.ndarray
    sink_caps: np.ndarray
    edges: np.ndarray
    edge_caps: np.ndarray

    def __post_init__(self):
        n = int(self.node_count)
        src = np.asarray(self.source_caps, dtype=np.float64).ravel()
        snk = np.asarray(self.sink_caps, dtype=np.float64).ravel()
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        caps = np.asarray(self.edge_caps, dtype=np.float64).ravel()
        if src.size != n or snk.size != n:
            raise FlowGraphError(f"terminal capacity arrays must have {n} entries")
        if caps.size != edges.shape[0]:
            raise FlowGraphError("one capacity per edge required")
        for name, arr in (('source', src), ('sink', snk), ('edge', caps)):
            if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0):
                raise FlowGraphError(f"{name} capacities must be finite and non-negative")
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise FlowGraphError("edge references a node outside the graph")
        object.__setattr__(self, 'node_count', n)
        object.__setattr__(self, 'source_caps', src)
        object.__setattr__(self, 'sink_caps', snk)
        object.__setattr__(self, 'edges', edges)
        object.__setattr__(self, 'edge_caps', caps)

    def cut_cost(self, source_side: np.ndarray) -> float:
        """Capacity of the cut induced by a boolean source-side assignment."""
        s = np.asarray(source_side, dtype=bool).ravel()
        cost = self.sink_caps[s].sum() + self.source_caps[~s].sum()
        if self.edges.size:
            split = s[self.edges[:, 0]] != s[self.edges[:, 1]]
            cost += self.edge_caps[split].sum()
        return float(cost)


def max_flow_min_cut(g: FlowGraph) -> Tuple[float, np.ndarray]:
    """
    Solve max-flow / min-cut exactly.

    Args:
        g: Flow network

    Returns:
        (flow value, boolean array with True for nodes on the source side)
    """
    graph = maxflow.Graph[float](g.node_count, max(len(g.edges), 1))
    nodes = graph.add_grid_nodes((g.node_count,))
    for (i, j), cap in zip(g.edges, g.edge_caps):
        if cap > 0:
            graph.add_edge(int(nodes[i]), int(nodes[j]), float(cap), float(cap))
    graph.add_grid_tedges(nodes, g.source_caps, g.sink_caps)
    flow = float(graph.maxflow())
    # get_grid_segments marks sink-side nodes True
    sink_side = graph.get_grid_segments(nodes)
    source_side = ~np.asarray(sink_side, dtype=bool)
    logger.debug("max-flow over %d nodes / %d edges: %.6f", g.node_count, len(g.edges), flow)
    return flow, source_side
