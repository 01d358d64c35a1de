"""Synthetic bar-chart QA corpus with gold graphs and a symbolic executor.

The executor defines the reference semantics of operator-node contents (the
micro-syntax below) and doubles as the answer oracle: every generated example
stores exactly the executor's output as its gold answer, so the learned model
and the oracle can be compared end to end.

Micro-syntax (node content -> meaning):

- Loc  "locate legend|title|x axis|y axis"   chart metadata text
- Loc  "locate NAME"                          series or category coordinates
- Loc  "locate SERIES at CATEGORY"            one cell's coordinates
- Num  "value at target"                      read value(s) at the Loc input
- Num  "value of NAME"                        direct read without a Loc node
- Num  "values of all"                        every value, row-major
- Num  "count of series|categories"           table dimensions
- Num  "literal X"                            the number X (k/m/b suffixes ok)
- Log  "diff|ratio|gt|lt|eq"                  two scalars, ordered by node id
- Log  "sum|avg|max|min|count"                flatten all inputs, reduce
- Log  "collect"                              pass-through / gather (fusion)

Binary Log ops read their two inputs in ascending node id order: diff is
second minus first, ratio second over first, gt/lt/eq compare first against
second.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .charts import ChartSpec, format_number
from .graph import OpType, ThoughtGraph, deserialize, serialize, validate
from .templates import AGG_CANON, RuleSet, TemplateRule

SERIES_POOL = ["p1", "p2", "p3", "p4", "p5", "p6", "p7", "p8"]
MEASURE_POOL = ["descendants", "output", "revenue", "rainfall", "points"]
LEGEND_POSITIONS = ["bottom right", "bottom left", "top right", "top left"]
AGG_SURFACES = {
    "avg": ["avg", "average", "mean"],
    "max": ["max", "maximum"],
    "min": ["min", "minimum"],
    "sum": ["sum", "total"],
}

# Which chart family each rule's bindings make sense on.  "totals" charts
# have a single category, so per-series reads are scalars; "years" charts
# have one row per series across several four-digit categories.
RULE_FAMILY = {
    "S-LEGEND-POS": "any",
    "S-TITLE": "any",
    "S-XLABEL": "any",
    "S-YLABEL": "any",
    "S-SERIES-COUNT": "any",
    "S-CAT-COUNT": "any",
    "S-BAR-COUNT": "any",
    "R-DIFF-OF": "totals",
    "R-DIFF-SERIES": "totals",
    "R-DIFF-CELL": "years",
    "R-RATIO": "totals",
    "R-GT-AVG": "totals",
    "R-GT-SERIES": "totals",
    "R-EQ-SERIES": "totals",
    "R-SUM-2SERIES": "totals",
    "R-GT-NUM-TOTAL": "totals",
    "R-GT-NUM": "years",
    "R-LT-NUM": "years",
    "R-SUM-SERIES": "years",
    "R-AVG-SERIES": "years",
    "R-MAX-SERIES": "years",
    "R-AGG-SERIES": "years",
    "R-AVG-ALL": "any",
    "R-MAX-ALL": "any",
    "R-MIN-ALL": "any",
    "R-SUM-ALL": "any",
    "R-RANGE-ALL": "any",
    "D-CELL": "years",
    "D-CELL-YEARFIRST": "years",
    "D-TOTAL": "totals",
    "D-VALUE-OF": "totals",
}


class ExecutorError(Exception):
    pass


class UnresolvableEntity(ExecutorError):
    pass


class ArityMismatch(ExecutorError):
    pass


class UnknownLogOp(ExecutorError):
    pass


class CorpusError(Exception):
    pass


# ------------------------------------------------------------------ executor

_SCALAR_OPS = ("diff", "ratio", "gt", "lt", "eq")
_REDUCE_OPS = ("sum", "avg", "max", "min", "count")


def _resolve_entity(chart: ChartSpec, name: str) -> tuple[int | None, int | None]:
    if name in chart.series_names:
        return (chart.series_names.index(name), None)
    if name in chart.category_names:
        return (None, chart.category_names.index(name))
    raise UnresolvableEntity(f"{name!r} is neither a series nor a category")


def _read(chart: ChartSpec, coord: tuple[int | None, int | None]):
    s, c = coord
    if s is not None and c is not None:
        return float(chart.values[s, c])
    if s is not None:
        row = chart.values[s, :]
        return float(row[0]) if row.size == 1 else row.copy()
    col = chart.values[:, c]
    return float(col[0]) if col.size == 1 else col.copy()


def _parse_literal(text: str) -> float:
    mult = 1.0
    if text and text[-1] in "kmb":
        mult = {"k": 1e3, "m": 1e6, "b": 1e9}[text[-1]]
        text = text[:-1]
    try:
        return float(text) * mult
    except ValueError as e:
        raise UnresolvableEntity(f"bad numeric literal {text!r}") from e


def _flatten(values: list) -> list[float]:
    out: list[float] = []
    for v in values:
        if isinstance(v, np.ndarray):
            out.extend(float(x) for x in v)
        elif isinstance(v, float):
            out.append(v)
        else:
            raise ArityMismatch(f"cannot aggregate non-numeric input {v!r}")
    return out


def _exec_loc(chart: ChartSpec, content: str):
    if not content.startswith("locate "):
        raise UnresolvableEntity(f"position node content {content!r} not understood")
    rest = content[len("locate "):]
    markers = {
        "legend": chart.legend_pos,
        "title": chart.title,
        "x axis": chart.x_label,
        "y axis": chart.y_label,
    }
    if rest in markers:
        return markers[rest]
    if " at " in rest:
        series, cat = rest.split(" at ", 1)
        s, _ = _resolve_entity(chart, series)
        if s is None:
            raise UnresolvableEntity(f"{series!r} is not a series")
        _, c = _resolve_entity(chart, cat)
        if c is None:
            raise UnresolvableEntity(f"{cat!r} is not a category")
        return (s, c)
    return _resolve_entity(chart, rest)


def _exec_num(chart: ChartSpec, content: str, inputs: list):
    if content == "value at target":
        coords = [v for v in inputs if isinstance(v, tuple)]
        if len(coords) != 1:
            raise ArityMismatch(
                f"'value at target' needs exactly one coordinate input, got {len(coords)}"
            )
        return _read(chart, coords[0])
    if content.startswith("value of "):
        return _read(chart, _resolve_entity(chart, content[len("value of "):]))
    if content == "values of all":
        return chart.values.flatten().copy()
    if content == "count of series":
        return float(len(chart.series_names))
    if content == "count of categories":
        return float(len(chart.category_names))
    if content.startswith("literal "):
        return _parse_literal(content[len("literal "):])
    raise UnresolvableEntity(f"value node content {content!r} not understood")


def _exec_log(content: str, inputs: list):
    if content in _SCALAR_OPS:
        if len(inputs) != 2 or not all(isinstance(v, float) for v in inputs):
            raise ArityMismatch(f"{content!r} needs exactly two scalar inputs, got {inputs!r}")
        v0, v1 = inputs
        if content == "diff":
            return v1 - v0
        if content == "ratio":
            if v0 == 0.0:
                raise ArityMismatch("ratio divisor is zero")
            return v1 / v0
        if content == "gt":
            return v0 > v1
        if content == "lt":
            return v0 < v1
        return v0 == v1
    if content in _REDUCE_OPS:
        flat = _flatten(inputs)
        if not flat:
            raise ArityMismatch(f"{content!r} over an empty input set")
        if content == "sum":
            return float(sum(flat))
        if content == "avg":
            return float(sum(flat) / len(flat))
        if content == "max":
            return float(max(flat))
        if content == "min":
            return float(min(flat))
        return float(len(flat))
    if content == "collect":
        if len(inputs) == 1:
            return inputs[0]
        if all(isinstance(v, float) for v in inputs):
            return np.asarray(inputs)
        raise ArityMismatch(f"collect over mixed inputs {inputs!r}")
    raise UnknownLogOp(f"no inference op named {content!r}")


def format_value(chart: ChartSpec, v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "YES" if v else "NO"
    if isinstance(v, str):
        return v
    if isinstance(v, (float, np.floating)):
        return format_number(v)
    if isinstance(v, np.ndarray):
        return ", ".join(format_number(x) for x in v)
    if isinstance(v, tuple):
        s, c = v
        if s is not None and c is not None:
            return f"{chart.series_names[s]} at {chart.category_names[c]}"
        return chart.series_names[s] if s is not None else chart.category_names[c]
    raise ExecutorError(f"cannot format {v!r}")


def symbolic_execute(chart: ChartSpec, got: ThoughtGraph) -> str:
    """Interpret a graph over the ground-truth table; the unique sink's value,
    formatted, is the gold answer."""
    from .graph import plan  # local name to keep call sites obvious

    report = validate(got)
    if not report.ok:
        raise ExecutorError(f"graph does not validate: {report.violations}")
    sinks = got.sinks()
    if len(sinks) != 1:
        raise ExecutorError(f"graph must have exactly one sink, found {len(sinks)}")
    values: dict[int, object] = {}
    for step in plan(got).steps:
        for node_id in step:
            node = got.node(node_id)
            inputs = [values[p] for p in sorted(got.in_neighbors(node_id))]
            if node.op_type is OpType.LOC:
                values[node_id] = _exec_loc(chart, node.content)
            elif node.op_type is OpType.NUM:
                values[node_id] = _exec_num(chart, node.content, inputs)
            elif node.op_type is OpType.LOG:
                values[node_id] = _exec_log(node.content, inputs)
            else:
                raise ExecutorError(
                    f"node {node_id}: no symbolic semantics for type {node.op_type.value}"
                )
    return format_value(chart, values[sinks[0]])


# ----------------------------------------------------------------- generation


@dataclass
class CorpusConfig:
    n_charts: int = 8
    questions_per_chart: int = 4
    series_range: tuple[int, int] = (2, 4)
    category_range: tuple[int, int] = (2, 4)
    value_range: tuple[int, int] = (1, 50)
    qtype_mix: dict = field(default_factory=lambda: {"S": 0.25, "D": 0.25, "R": 0.5})
    seed: int = 0

    def __post_init__(self):
        if self.n_charts < 1:
            raise CorpusError(f"need at least one chart, got {self.n_charts}")
        if self.questions_per_chart < 1:
            raise CorpusError(f"need at least one question per chart, got "
                              f"{self.questions_per_chart}")
        if self.series_range[0] > self.series_range[1] or self.series_range[0] < 1:
            raise CorpusError(f"bad series range {self.series_range}")
        if self.category_range[0] > self.category_range[1] or self.category_range[0] < 1:
            raise CorpusError(f"bad category range {self.category_range}")
        if self.value_range[0] > self.value_range[1]:
            raise CorpusError(f"bad value range {self.value_range}")
        if abs(sum(self.qtype_mix.values()) - 1.0) > 1e-6:
            raise CorpusError(f"qtype mix must sum to 1, got {self.qtype_mix}")


@dataclass
class QATriple:
    chart: ChartSpec
    question: str
    gold_got: ThoughtGraph
    gold_answer: str
    qtype: str
    rule_id: str


def gen_chart(rng: np.random.Generator, config: CorpusConfig, family: str | None = None) -> ChartSpec:
    """One synthetic bar chart.  'totals' charts have a single category so
    every series is one bar; 'years' charts span consecutive four-digit
    categories."""
    if family is None:
        family = ("totals", "years")[int(rng.integers(0, 2))]
    measure = MEASURE_POOL[int(rng.integers(0, len(MEASURE_POOL)))]
    legend = LEGEND_POSITIONS[int(rng.integers(0, len(LEGEND_POSITIONS)))]
    lo, hi = config.value_range
    if family == "totals":
        n_series = max(2, int(rng.integers(config.series_range[0], config.series_range[1] + 1)))
        series = list(rng.choice(len(SERIES_POOL), size=n_series, replace=False))
        series_names = [SERIES_POOL[i] for i in sorted(series)]
        categories = ["total"]
        x_label = "family"
    else:
        n_series = min(2, config.series_range[1])
        n_series = max(1, int(rng.integers(1, n_series + 1)))
        series = list(rng.choice(len(SERIES_POOL), size=n_series, replace=False))
        series_names = [SERIES_POOL[i] for i in sorted(series)]
        n_cats = max(2, int(rng.integers(config.category_range[0], config.category_range[1] + 1)))
        start_year = 2010 + int(rng.integers(0, 8))
        categories = [str(start_year + i) for i in range(n_cats)]
        x_label = "year"
    values = rng.integers(lo, hi + 1, size=(len(series_names), len(categories))).astype(float)
    return ChartSpec(
        title=f"{measure} by {x_label}",
        x_label=x_label,
        y_label=measure,
        series_names=series_names,
        category_names=categories,
        values=values,
        legend_pos=legend,
    )


def _chart_family(chart: ChartSpec) -> str:
    return "totals" if len(chart.category_names) == 1 else "years"


def _applicable(rule: TemplateRule, chart: ChartSpec) -> bool:
    family = RULE_FAMILY.get(rule.rule_id)
    if family is None:
        return False
    if family != "any" and family != _chart_family(chart):
        return False
    slots = rule.slots()
    if "SERIES2" in slots and len(chart.series_names) < 2:
        return False
    if "YEAR2" in slots and len(chart.category_names) < 2:
        return False
    return True


def _bind(rule: TemplateRule, chart: ChartSpec, rng: np.random.Generator,
          config: CorpusConfig) -> tuple[dict[str, str], dict[str, str]]:
    """(surface bindings for the question, bindings for the gold skeleton)."""
    surface: dict[str, str] = {}
    skeleton: dict[str, str] = {}
    for slot in sorted(rule.slots()):
        base = slot.rstrip("0123456789")
        if base == "ENT":
            val = chart.y_label
        elif base == "SERIES":
            options = [s for s in chart.series_names if s not in surface.values()]
            val = options[int(rng.integers(0, len(options)))]
        elif base == "YEAR":
            options = [c for c in chart.category_names if c not in surface.values()]
            val = options[int(rng.integers(0, len(options)))]
        elif base == "NUM":
            lo, hi = config.value_range
            val = str(int(rng.integers(lo, hi + 1)))
        elif base == "AGG":
            canon = list(AGG_SURFACES)[int(rng.integers(0, len(AGG_SURFACES)))]
            val = AGG_SURFACES[canon][int(rng.integers(0, len(AGG_SURFACES[canon])))]
            surface[slot] = val
            skeleton[slot] = AGG_CANON[val]
            continue
        else:
            raise CorpusError(f"rule {rule.rule_id}: no binding strategy for slot {slot}")
        surface[slot] = val
        skeleton[slot] = val
    return surface, skeleton


def _surface_question(rule: TemplateRule, surface: dict[str, str]) -> str:
    words = []
    for tok in rule.pattern_tokens:
        if tok.startswith("{") and tok.endswith("}"):
            words.append(surface[tok[1:-1]])
        else:
            words.append(tok)
    text = " ".join(words)
    return text[0].upper() + text[1:] + "?"


def gen_questions(chart: ChartSpec, rules: RuleSet, rng: np.random.Generator,
                  config: CorpusConfig, k: int | None = None) -> list[QATriple]:
    """Instantiate k template questions against one chart; gold graphs come
    from the same skeletons the parser uses, gold answers from the executor."""
    k = config.questions_per_chart if k is None else k
    by_qtype: dict[str, list[TemplateRule]] = {"S": [], "D": [], "R": []}
    for rule in rules.rules:
        if _applicable(rule, chart):
            by_qtype[rule.qtype].append(rule)
    qtypes = sorted(config.qtype_mix)
    weights = np.asarray([config.qtype_mix[t] for t in qtypes])
    out: list[QATriple] = []
    for _ in range(k):
        u = rng.uniform()
        qtype = qtypes[int(np.searchsorted(np.cumsum(weights), u))]
        pool = by_qtype[qtype] or [r for rs in by_qtype.values() for r in rs]
        rule = pool[int(rng.integers(0, len(pool)))]
        surface, skeleton_bind = _bind(rule, chart, rng, config)
        question = _surface_question(rule, surface)
        gold_got = rule.instantiate(skeleton_bind)
        gold_answer = symbolic_execute(chart, gold_got)
        out.append(QATriple(chart, question, gold_got, gold_answer, rule.qtype, rule.rule_id))
    return out


def gen_corpus(config: CorpusConfig, rules: RuleSet) -> list[QATriple]:
    """Deterministic corpus: per-chart child seeds derived from the root."""
    root = np.random.default_rng(config.seed)
    chart_seeds = root.integers(0, 2**31 - 1, size=config.n_charts)
    triples: list[QATriple] = []
    for s in chart_seeds:
        rng = np.random.default_rng(int(s))
        chart = gen_chart(rng, config)
        triples.extend(gen_questions(chart, rules, rng, config))
    return triples


# ------------------------------------------------------------------ corpus IO


def triple_to_record(t: QATriple) -> dict:
    return {
        "chart": t.chart.to_record(),
        "question": t.question,
        "gold_got": json.loads(serialize(t.gold_got)),
        "gold_answer": t.gold_answer,
        "qtype": t.qtype,
        "rule_id": t.rule_id,
    }


def triple_from_record(rec: dict) -> QATriple:
    try:
        return QATriple(
            chart=ChartSpec.from_record(rec["chart"]),
            question=rec["question"],
            gold_got=deserialize(json.dumps(rec["gold_got"])),
            gold_answer=rec["gold_answer"],
            qtype=rec["qtype"],
            rule_id=rec.get("rule_id", ""),
        )
    except (KeyError, TypeError) as e:
        raise CorpusError(f"malformed corpus record: {e}") from e


def write_corpus(path: str, triples: list[QATriple]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in triples:
            f.write(json.dumps(triple_to_record(t), sort_keys=True, separators=(",", ":")))
            f.write("\n")


def read_corpus(path: str) -> list[QATriple]:
    triples = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{line_no}: not a JSON record: {e}") from e
            triples.append(triple_from_record(rec))
    if not triples:
        raise CorpusError(f"{path}: empty corpus")
    return triples


def write_split_corpora(out_dir: str, config: CorpusConfig, rules: RuleSet,
                        splits: dict[str, int]) -> dict:
    """Write one corpus file per split plus a manifest recording the derived
    seeds; split seeds are offsets from the root seed in name order."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"seed": config.seed, "splits": {}}
    for offset, name in enumerate(sorted(splits)):
        split_cfg = CorpusConfig(
            n_charts=splits[name],
            questions_per_chart=config.questions_per_chart,
            series_range=config.series_range,
            category_range=config.category_range,
            value_range=config.value_range,
            qtype_mix=dict(config.qtype_mix),
            seed=config.seed + 1 + offset,
        )
        triples = gen_corpus(split_cfg, rules)
        path = os.path.join(out_dir, f"{name}.jsonl")
        write_corpus(path, triples)
        manifest["splits"][name] = {
            "path": f"{name}.jsonl",
            "seed": split_cfg.seed,
            "n_charts": split_cfg.n_charts,
            "n_examples": len(triples),
        }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
