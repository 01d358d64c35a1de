"""Thought-graph IR: a typed operator DAG compiled from a chart question.

A :class:`ThoughtGraph` is a directed acyclic graph of operator nodes.  Each
node carries a free-text instruction (its *guidance*) and one of five operator
types.  ``Loc`` nodes name a position in the chart, ``Num`` nodes read or
estimate a value, and ``Log`` nodes combine several values arithmetically or
logically.  ``Find`` (a merged locate+read operator) and ``Generic`` exist only
for ablation configurations and never come out of the template compiler.

The wire schema is JSON::

    {"nodes": [{"id": 1, "type": "Loc", "content": "locate p1"}, ...],
     "edges": [[1, 3], [2, 4], ...]}

Node ids are explicit non-negative integers, not positions, so external
producers may emit sparse ids.  ``VIRTUAL_START`` (-1) is a sentinel outside
the id space: it stands for the implicit producer of the initial chart data
flow and is a member of every node's predecessor set.  It never appears in a
graph's nodes or edges.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

VIRTUAL_START = -1

COLLECT_CONTENT = "collect"


class GraphError(Exception):
    pass


class UnknownNode(GraphError):
    pass


class CyclicGraph(GraphError):
    pass


class SchemaError(GraphError):
    """Malformed graph text.  ``where`` points at the offending element."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{message} ({where})" if where else message)
        self.where = where


class OpType(Enum):
    LOC = "Loc"
    NUM = "Num"
    LOG = "Log"
    FIND = "Find"
    GENERIC = "Generic"


_TYPE_BY_NAME = {t.value: t for t in OpType}


@dataclass(frozen=True)
class OperatorNode:
    id: int
    content: str
    op_type: OpType

    def relabeled(self, op_type: OpType) -> "OperatorNode":
        return OperatorNode(self.id, self.content, op_type)


@dataclass(frozen=True)
class ThoughtGraph:
    """Immutable operator DAG.  Construction does not validate; ``validate``
    reports every violation instead of raising on the first."""

    nodes: tuple[OperatorNode, ...]
    edges: frozenset[tuple[int, int]]

    def __init__(self, nodes: Iterable[OperatorNode], edges: Iterable[tuple[int, int]]):
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "edges", frozenset((int(a), int(b)) for a, b in edges))

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(n.id for n in self.nodes)

    def node(self, node_id: int) -> OperatorNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise UnknownNode(f"no node with id {node_id}")

    def in_neighbors(self, node_id: int) -> frozenset[int]:
        return frozenset(a for a, b in self.edges if b == node_id)

    def out_degree(self, node_id: int) -> int:
        return sum(1 for a, _ in self.edges if a == node_id)

    def sinks(self) -> tuple[int, ...]:
        tails = {a for a, _ in self.edges}
        return tuple(n.id for n in self.nodes if n.id not in tails)


@dataclass(frozen=True)
class ExecutionPlan:
    """Stepped schedule: step k holds exactly the nodes whose in-graph
    predecessors all sit in earlier steps; ascending id within a step."""

    steps: tuple[tuple[int, ...], ...]

    def step_of(self, node_id: int) -> int:
        for k, step in enumerate(self.steps):
            if node_id in step:
                return k
        raise UnknownNode(f"node {node_id} not in plan")


@dataclass
class ValidationReport:
    ok: bool
    violations: list[tuple[str, str]] = field(default_factory=list)


def validate(got: ThoughtGraph) -> ValidationReport:
    """Collect every structural violation: empty graph, duplicate ids, empty
    contents, dangling edge endpoints, and cycles (self-edges included)."""
    violations: list[tuple[str, str]] = []
    if not got.nodes:
        violations.append(("EMPTY_GRAPH", "graph has no nodes"))
    seen: set[int] = set()
    for n in got.nodes:
        if n.id in seen:
            violations.append(("DUPLICATE_ID", f"node id {n.id} declared more than once"))
        seen.add(n.id)
        if not n.content.strip():
            violations.append(("EMPTY_CONTENT", f"node {n.id} has empty content"))
        if n.id < 0:
            violations.append(("RESERVED_ID", f"node id {n.id} is negative (reserved for the start sentinel)"))
    ids = {n.id for n in got.nodes}
    for a, b in sorted(got.edges):
        if a not in ids or b not in ids:
            violations.append(("DANGLING_EDGE", f"edge ({a},{b}) references an undeclared node"))
    # Cycle check over the edges whose endpoints exist.
    internal = [(a, b) for a, b in got.edges if a in ids and b in ids]
    if _has_cycle(ids, internal):
        violations.append(("CYCLE", "graph contains a directed cycle"))
    return ValidationReport(ok=not violations, violations=violations)


def _has_cycle(ids: set[int], edges: list[tuple[int, int]]) -> bool:
    indeg = {i: 0 for i in ids}
    out: dict[int, list[int]] = {i: [] for i in ids}
    for a, b in edges:
        if a == b:
            return True
        indeg[b] += 1
        out[a].append(b)
    ready = [i for i in ids if indeg[i] == 0]
    done = 0
    while ready:
        i = ready.pop()
        done += 1
        for j in out[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
    return done != len(ids)


def predecessors(got: ThoughtGraph, node_id: int) -> frozenset[int]:
    """Input set of a node: its in-neighbors plus, always, ``VIRTUAL_START``.

    The start sentinel is a member of every node's predecessor set, whether or
    not the node has in-edges; source nodes receive exactly ``{VIRTUAL_START}``.
    """
    if node_id not in {n.id for n in got.nodes}:
        raise UnknownNode(f"no node with id {node_id}")
    return frozenset({VIRTUAL_START}) | got.in_neighbors(node_id)


def normalize(got: ThoughtGraph) -> ThoughtGraph:
    """Force a unique terminal node.

    A graph with one sink is returned unchanged.  A graph with several sinks
    gains one synthetic ``Log`` node (content ``"collect"``, id = max id + 1)
    fed by every sink, making it the unique terminal.
    """
    sinks = got.sinks()
    if len(sinks) == 1:
        return got
    new_id = max(got.node_ids) + 1
    collect = OperatorNode(new_id, COLLECT_CONTENT, OpType.LOG)
    return ThoughtGraph(
        nodes=got.nodes + (collect,),
        edges=set(got.edges) | {(s, new_id) for s in sinks},
    )


def plan(got: ThoughtGraph) -> ExecutionPlan:
    """Layer the graph for stepped execution (Kahn by levels).

    Step k contains exactly the nodes whose predecessors all lie in steps
    < k, in ascending id order.  The number of steps equals the longest
    directed path length plus one.
    """
    ids = set(got.node_ids)
    indeg = {i: 0 for i in ids}
    out: dict[int, list[int]] = {i: [] for i in ids}
    for a, b in got.edges:
        indeg[b] += 1
        out[a].append(b)
    frontier = sorted(i for i in ids if indeg[i] == 0)
    steps: list[tuple[int, ...]] = []
    seen = 0
    while frontier:
        steps.append(tuple(frontier))
        seen += len(frontier)
        nxt: set[int] = set()
        for i in frontier:
            for j in out[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    nxt.add(j)
        frontier = sorted(nxt)
    if seen != len(ids):
        raise CyclicGraph("cannot schedule a cyclic graph")
    return ExecutionPlan(steps=tuple(steps))


def serialize(got: ThoughtGraph) -> str:
    """Canonical JSON text: nodes in declaration order, edges sorted."""
    doc = {
        "nodes": [{"id": n.id, "type": n.op_type.value, "content": n.content} for n in got.nodes],
        "edges": [list(e) for e in sorted(got.edges)],
    }
    return json.dumps(doc, indent=2)


def deserialize(text: str) -> ThoughtGraph:
    """Parse the JSON schema strictly; raise :class:`SchemaError` on any
    malformed element, with a pointer to where it sits."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"not valid JSON: {e.msg}", where=f"line {e.lineno} col {e.colno}") from e
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object", where="document root")
    extra = set(doc) - {"nodes", "edges"}
    if extra:
        raise SchemaError(f"unknown top-level keys {sorted(extra)}", where="document root")
    if "nodes" not in doc or not isinstance(doc["nodes"], list):
        raise SchemaError("missing or non-list 'nodes'", where="document root")
    if "edges" not in doc or not isinstance(doc["edges"], list):
        raise SchemaError("missing or non-list 'edges'", where="document root")
    nodes: list[OperatorNode] = []
    seen_ids: set[int] = set()
    for i, item in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        if not isinstance(item, dict):
            raise SchemaError("node must be an object", where=where)
        bad = set(item) - {"id", "type", "content"}
        if bad:
            raise SchemaError(f"unknown node keys {sorted(bad)}", where=where)
        for key in ("id", "type", "content"):
            if key not in item:
                raise SchemaError(f"node missing '{key}'", where=where)
        nid, typ, content = item["id"], item["type"], item["content"]
        if not isinstance(nid, int) or isinstance(nid, bool) or nid < 0:
            raise SchemaError(f"node id must be a non-negative integer, got {nid!r}", where=where)
        if nid in seen_ids:
            raise SchemaError(f"duplicate node id {nid}", where=where)
        seen_ids.add(nid)
        if not isinstance(typ, str) or typ not in _TYPE_BY_NAME:
            raise SchemaError(f"unknown operator type {typ!r}", where=where)
        if not isinstance(content, str):
            raise SchemaError("node content must be a string", where=where)
        nodes.append(OperatorNode(nid, content, _TYPE_BY_NAME[typ]))
    edges: set[tuple[int, int]] = set()
    for i, item in enumerate(doc["edges"]):
        where = f"edges[{i}]"
        if (not isinstance(item, list)) or len(item) != 2:
            raise SchemaError("edge must be a [from, to] pair", where=where)
        a, b = item
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in (a, b)):
            raise SchemaError(f"edge endpoints must be integers, got {item!r}", where=where)
        edges.add((a, b))
    return ThoughtGraph(nodes=nodes, edges=edges)


def to_dot(got: ThoughtGraph) -> str:
    """Graphviz export, deterministic: nodes sorted by id, then edges sorted.
    Node label is ``id:type:content``."""
    lines = ["digraph thought_graph {"]
    for n in sorted(got.nodes, key=lambda n: n.id):
        label = f"{n.id}:{n.op_type.value}:{n.content}".replace('"', '\\"')
        lines.append(f'  n{n.id} [label="{label}"];')
    for a, b in sorted(got.edges):
        lines.append(f"  n{a} -> n{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"
