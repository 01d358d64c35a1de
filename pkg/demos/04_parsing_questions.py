"""
From question text to operator graph
====================================

Questions follow a small set of surface templates.  Each template binds
its slots (series names, aggregations, thresholds) and instantiates a
graph skeleton.  Rules are tried in priority order: more literal words
means a more specific rule, and the first full match wins.
"""

from chartreason.graph import serialize
from chartreason.templates import (
    Unparseable,
    load_default_rules,
    parse_question,
    parse_with_fallback,
)

rules = load_default_rules()
print("shipped rules:", len(rules.by_id))

questions = [
    "What is the title of the graph?",
    "How many rainfall does p1 have?",
    "How many more descendants of p2 than of p1?",
    "What is the average rainfall across the whole graph?",
    "Does p2 have more rainfall than the average?",
]

for q in questions:
    got, rule_id = parse_question(q, rules)
    types = [n.op_type.value for n in got.nodes]
    print(f"{rule_id:>14}  {len(got.nodes)} nodes {types}  <-  {q}")

# one full graph, spelled out
got, _ = parse_question(questions[2], rules)
print()
print(serialize(got))

# no template matches this one, and with no fallback endpoint configured
# the parser says so instead of guessing
try:
    parse_with_fallback("Why is the sky blue?", rules)
except Unparseable as e:
    print("\nunparseable:", e)
