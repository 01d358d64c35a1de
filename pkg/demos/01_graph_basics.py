"""
Operator graphs: building, validating, planning
===============================================

A question like "how many more descendants of p2 than of p1" breaks into
small typed steps: locate two series, read two values, compare.  The graph
IR holds those steps as nodes with explicit data edges, and every node is
also fed from a virtual start so a demand signal can reach it directly.
"""

from chartreason.graph import (
    OperatorNode,
    OpType,
    ThoughtGraph,
    plan,
    predecessors,
    serialize,
    to_dot,
    validate,
)

# two located series, a value read on each, one comparison at the end
got = ThoughtGraph(
    nodes=[
        OperatorNode(1, "locate p1", OpType.LOC),
        OperatorNode(2, "locate p2", OpType.LOC),
        OperatorNode(3, "value at target", OpType.NUM),
        OperatorNode(4, "value at target", OpType.NUM),
        OperatorNode(5, "diff", OpType.LOG),
    ],
    edges=[(1, 3), (2, 4), (3, 5), (4, 5)],
)

report = validate(got)
print("valid:", report.ok)

# the plan groups nodes into layers; everything in one layer only needs
# results from earlier layers
for i, step in enumerate(plan(got).steps):
    print(f"step {i}: nodes {step}")

print("predecessors of node 5:", sorted(predecessors(got, 5)))
print("predecessors of node 1:", sorted(predecessors(got, 1)), "(the -1 is the virtual start)")

print()
print(serialize(got))
print()
print(to_dot(got))
