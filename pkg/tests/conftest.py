"""Shared test helpers."""

import numpy as np

from chartreason.graph import OperatorNode, OpType, ThoughtGraph

_TYPES = (OpType.LOC, OpType.NUM, OpType.LOG)


def make_random_got(rng: np.random.Generator, max_nodes: int = 8) -> ThoughtGraph:
    """A random valid typed DAG with scrambled sparse node ids.  Edges only go
    from lower to higher positions in a shuffled order, so acyclicity holds by
    construction.  May have several sinks."""
    n = int(rng.integers(1, max_nodes + 1))
    ids = sorted(int(i) for i in rng.choice(np.arange(1, 60), size=n, replace=False))
    order = list(rng.permutation(n))
    nodes = [
        OperatorNode(ids[i], f"step {ids[i]}", _TYPES[int(rng.integers(0, len(_TYPES)))])
        for i in range(n)
    ]
    edges = set()
    for j in range(1, n):
        k = int(rng.integers(0, min(j, 3) + 1))
        for p in rng.choice(j, size=k, replace=False):
            edges.add((ids[order[int(p)]], ids[order[j]]))
    return ThoughtGraph(nodes=nodes, edges=frozenset(edges))
