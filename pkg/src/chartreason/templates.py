"""Template rules that compile chart questions into operator DAGs, plus the
client protocol for an external graph provider.

A rule file is line-oriented:

    # comment
    rule <id> | <qtype S|D|R> | <pattern> | <skeleton-name>

    skeleton <name>
    { ...graph JSON with {SLOT} references in node contents... }
    end

Pattern tokens are either literal words or typed slots ``{ENT}`` ``{SERIES}``
``{YEAR}`` ``{NUM}`` ``{AGG}`` (a trailing digit distinguishes repeats, e.g.
``{SERIES2}``).  Matching is case-insensitive over punctuation-stripped,
whitespace-collapsed text.  When several rules match a question, the one with
more literal tokens wins; ties fall back to file order.
"""

from __future__ import annotations

import json
import re
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources

from .graph import SchemaError, ThoughtGraph, deserialize, normalize, validate


class ParserError(Exception):
    pass


class RuleSyntaxError(ParserError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class SlotMismatch(ParserError):
    pass


class NoTemplateMatch(ParserError):
    pass


class Unparseable(ParserError):
    pass


class ProviderError(ParserError):
    pass


class ProviderUnreachable(ProviderError):
    pass


class ProviderSchemaError(ProviderError):
    pass


class ProviderGraphInvalid(ProviderError):
    pass


SLOT_PATTERNS = {
    "ENT": r"\S+(?: \S+)*?",
    "SERIES": r"\S+(?: \S+)*?",
    "YEAR": r"\d{4}",
    "NUM": r"[+-]?\d+(?:\.\d+)?[kmb]?",
    "AGG": r"avg|average|mean|max|maximum|min|minimum|sum|total",
}

AGG_CANON = {
    "avg": "avg", "average": "avg", "mean": "avg",
    "max": "max", "maximum": "max",
    "min": "min", "minimum": "min",
    "sum": "sum", "total": "sum",
}

_SLOT_TOKEN = re.compile(r"^\{([A-Z]+?)(\d*)\}$")
_SLOT_REF = re.compile(r"\{([A-Z]+\d*)\}")


def normalize_question(q: str) -> str:
    """Lowercase, strip punctuation (keeping word chars, dots, signs),
    collapse whitespace."""
    q = re.sub(r"[^\w\s.+-]", " ", q.lower())
    return " ".join(q.split())


@dataclass(frozen=True)
class TemplateRule:
    rule_id: str
    qtype: str  # S | D | R
    pattern_tokens: tuple[str, ...]
    skeleton: ThoughtGraph
    literal_count: int
    order: int  # position in the file, the priority tie-break
    regex: re.Pattern

    def slots(self) -> frozenset[str]:
        names = set()
        for tok in self.pattern_tokens:
            m = _SLOT_TOKEN.match(tok)
            if m:
                names.add(m.group(1) + m.group(2))
        return frozenset(names)

    def instantiate(self, bindings: dict[str, str]) -> ThoughtGraph:
        """Substitute slot bindings into the skeleton's node contents."""
        nodes = []
        for n in self.skeleton.nodes:
            content = n.content
            for name, value in bindings.items():
                content = content.replace("{" + name + "}", value)
            nodes.append(type(n)(n.id, content, n.op_type))
        return ThoughtGraph(nodes=nodes, edges=self.skeleton.edges)


class RuleSet:
    def __init__(self, rules: list[TemplateRule]):
        self.rules = list(rules)
        self.by_id = {r.rule_id: r for r in self.rules}
        self._priority = sorted(self.rules, key=lambda r: (-r.literal_count, r.order))

    def __len__(self) -> int:
        return len(self.rules)

    def in_priority_order(self) -> list[TemplateRule]:
        return list(self._priority)


def _compile_pattern(tokens: list[str], line: int) -> tuple[re.Pattern, int]:
    parts = []
    literals = 0
    for tok in tokens:
        m = _SLOT_TOKEN.match(tok)
        if m:
            base, suffix = m.group(1), m.group(2)
            if base not in SLOT_PATTERNS:
                raise RuleSyntaxError(line, f"unknown slot type {{{base}{suffix}}}")
            parts.append(f"(?P<{base}{suffix}>{SLOT_PATTERNS[base]})")
        elif "{" in tok or "}" in tok:
            raise RuleSyntaxError(line, f"malformed slot token {tok!r}")
        else:
            literals += 1
            parts.append(re.escape(tok))
    try:
        return re.compile(" ".join(parts)), literals
    except re.error as e:
        raise RuleSyntaxError(line, f"pattern does not compile: {e}") from e


def compile_rules(text: str) -> RuleSet:
    """Parse a rule file atomically: the first malformed element raises and
    nothing is returned."""
    raw_rules: list[tuple[int, str, str, str, str]] = []  # line, id, qtype, pattern, ref
    skeletons: dict[str, tuple[int, str]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line_no = i + 1
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        if line.startswith("rule "):
            parts = [p.strip() for p in line.split("|")]
            if len(parts) != 4:
                raise RuleSyntaxError(line_no, f"rule line needs 4 |-separated fields, got {len(parts)}")
            rule_id = parts[0][len("rule "):].strip()
            if not rule_id:
                raise RuleSyntaxError(line_no, "empty rule id")
            qtype, pattern, ref = parts[1], parts[2], parts[3]
            if qtype not in ("S", "D", "R"):
                raise RuleSyntaxError(line_no, f"qtype must be S, D, or R, got {qtype!r}")
            if not pattern:
                raise RuleSyntaxError(line_no, "empty pattern")
            if not ref:
                raise RuleSyntaxError(line_no, "empty skeleton reference")
            raw_rules.append((line_no, rule_id, qtype, pattern, ref))
        elif line.startswith("skeleton "):
            name = line[len("skeleton "):].strip()
            if not name:
                raise RuleSyntaxError(line_no, "empty skeleton name")
            if name in skeletons:
                raise RuleSyntaxError(line_no, f"duplicate skeleton {name!r}")
            body: list[str] = []
            start = line_no
            while i < len(lines) and lines[i].strip() != "end":
                body.append(lines[i])
                i += 1
            if i == len(lines):
                raise RuleSyntaxError(start, f"skeleton {name!r} has no 'end'")
            i += 1  # consume 'end'
            skeletons[name] = (start, "\n".join(body))
        else:
            raise RuleSyntaxError(line_no, f"unrecognized line {line!r}")

    parsed_skeletons: dict[str, tuple[int, ThoughtGraph]] = {}
    for name, (line_no, body) in skeletons.items():
        try:
            g = deserialize(body)
        except SchemaError as e:
            raise RuleSyntaxError(line_no, f"skeleton {name!r}: {e}") from e
        report = validate(g)
        if not report.ok:
            raise RuleSyntaxError(line_no, f"skeleton {name!r} invalid: {report.violations}")
        if len(g.sinks()) != 1:
            raise RuleSyntaxError(line_no, f"skeleton {name!r} must have exactly one sink")
        parsed_skeletons[name] = (line_no, g)

    rules: list[TemplateRule] = []
    seen_ids: set[str] = set()
    for order, (line_no, rule_id, qtype, pattern, ref) in enumerate(raw_rules):
        if rule_id in seen_ids:
            raise RuleSyntaxError(line_no, f"duplicate rule id {rule_id!r}")
        seen_ids.add(rule_id)
        if ref not in parsed_skeletons:
            raise RuleSyntaxError(line_no, f"rule {rule_id!r} references unknown skeleton {ref!r}")
        tokens = pattern.split()
        regex, literals = _compile_pattern(tokens, line_no)
        rule = TemplateRule(
            rule_id=rule_id,
            qtype=qtype,
            pattern_tokens=tuple(tokens),
            skeleton=parsed_skeletons[ref][1],
            literal_count=literals,
            order=order,
            regex=regex,
        )
        skeleton_slots = set()
        for n in rule.skeleton.nodes:
            skeleton_slots.update(_SLOT_REF.findall(n.content))
        missing = skeleton_slots - rule.slots()
        if missing:
            raise SlotMismatch(
                f"rule {rule_id!r}: skeleton references {sorted(missing)} absent from the pattern"
            )
        rules.append(rule)
    return RuleSet(rules)


def load_rules(path: str) -> RuleSet:
    with open(path, encoding="utf-8") as f:
        return compile_rules(f.read())


def load_default_rules() -> RuleSet:
    text = resources.files("chartreason").joinpath("rules/core.rules").read_text("utf-8")
    return compile_rules(text)


def _canonicalize(name: str, value: str) -> str:
    if name.rstrip("0123456789") == "AGG":
        return AGG_CANON[value]
    return value.strip()


def parse_question(q: str, rules: RuleSet) -> tuple[ThoughtGraph, str]:
    """Match the question against the rules in priority order and instantiate
    the winning skeleton; deterministic for a fixed (question, rules)."""
    text = normalize_question(q)
    for rule in rules.in_priority_order():
        m = rule.regex.fullmatch(text)
        if not m:
            continue
        bindings = {name: _canonicalize(name, value) for name, value in m.groupdict().items()}
        return normalize(rule.instantiate(bindings)), rule.rule_id
    raise NoTemplateMatch(f"no template matches {q!r}")


# ------------------------------------------------------------- provider path

SCHEMA_VERSION = 1


def request_got(q: str, endpoint: str, timeout: float = 5.0) -> ThoughtGraph:
    """One request/response exchange with an external graph provider.  The
    provider's output is never trusted: it is re-validated and normalized
    here, and failures map to distinguishable errors."""
    payload = json.dumps({"question": q, "schema_version": SCHEMA_VERSION}).encode("utf-8")
    req = urllib.request.Request(
        endpoint, data=payload, headers={"Content-Type": "application/json"}, method="POST"
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            body = resp.read().decode("utf-8")
    except urllib.error.HTTPError as e:
        raise ProviderSchemaError(f"provider returned HTTP {e.code}") from e
    except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as e:
        raise ProviderUnreachable(f"cannot reach provider at {endpoint}: {e}") from e
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as e:
        raise ProviderSchemaError(f"provider response is not JSON: {e}") from e
    if not isinstance(doc, dict) or not ({"got", "error"} & set(doc)):
        raise ProviderSchemaError("provider response carries neither 'got' nor 'error'")
    if "error" in doc:
        raise ProviderGraphInvalid(f"provider reported: {doc['error']}")
    if not isinstance(doc["got"], str):
        raise ProviderSchemaError("provider 'got' field must be graph text")
    try:
        g = deserialize(doc["got"])
    except SchemaError as e:
        raise ProviderGraphInvalid(f"provider graph text malformed: {e}") from e
    report = validate(g)
    if not report.ok:
        raise ProviderGraphInvalid(f"provider graph invalid: {report.violations}")
    return normalize(g)


def parse_with_fallback(
    q: str, rules: RuleSet, endpoint: str | None = None, timeout: float = 5.0
) -> tuple[ThoughtGraph, str]:
    """Templates first; the provider only on NoTemplateMatch and only when an
    endpoint is configured.  Returns (graph, source) with source 'template'
    or 'provider'."""
    try:
        g, _ = parse_question(q, rules)
        return g, "template"
    except NoTemplateMatch as no_match:
        if endpoint is None:
            raise Unparseable(f"no template matches {q!r} and no provider endpoint set") from no_match
        try:
            return request_got(q, endpoint, timeout), "provider"
        except ProviderError as e:
            raise Unparseable(f"no template matches {q!r} and provider failed: {e}") from e
