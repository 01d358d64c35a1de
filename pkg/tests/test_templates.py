"""Rule compilation, question parsing, priority, and the provider protocol."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartreason.graph import OpType, predecessors, serialize, validate, VIRTUAL_START
from chartreason.templates import (
    NoTemplateMatch,
    ProviderGraphInvalid,
    ProviderSchemaError,
    ProviderUnreachable,
    RuleSyntaxError,
    SlotMismatch,
    Unparseable,
    compile_rules,
    load_default_rules,
    normalize_question,
    parse_question,
    parse_with_fallback,
    request_got,
)

RULES = load_default_rules()

MINI_RULES = """
rule T-ONE | D | how many {ENT} does {SERIES} have | sk
skeleton sk
{"nodes": [{"id": 1, "type": "Num", "content": "value of {SERIES}"}], "edges": []}
end
"""


# ---------------------------------------------------------------- compilation


def test_compile_single_rule():
    rs = compile_rules(MINI_RULES)
    assert len(rs) == 1
    assert rs.rules[0].rule_id == "T-ONE"
    assert rs.rules[0].literal_count == 4


def test_compile_rejects_skeleton_slot_not_in_pattern():
    bad = MINI_RULES.replace("value of {SERIES}", "value of {YEAR}")
    with pytest.raises(SlotMismatch):
        compile_rules(bad)


def test_compile_rejects_duplicate_rule_id():
    dup = MINI_RULES + "\nrule T-ONE | D | how much {ENT} in {SERIES} | sk\n"
    with pytest.raises(RuleSyntaxError) as e:
        compile_rules(dup)
    assert "duplicate rule id" in str(e.value)


def test_compile_rejects_bad_qtype_and_missing_skeleton():
    with pytest.raises(RuleSyntaxError):
        compile_rules("rule X | Q | a {ENT} b | sk\nskeleton sk\n{\"nodes\": [], \"edges\": []}\nend\n")
    with pytest.raises(RuleSyntaxError) as e:
        compile_rules("rule X | D | a b c | nowhere\n")
    assert "unknown skeleton" in str(e.value)


def test_compile_rejects_malformed_lines():
    with pytest.raises(RuleSyntaxError):
        compile_rules("this is not a rule line\n")
    with pytest.raises(RuleSyntaxError):
        compile_rules("rule X | D | a b\n")  # 3 fields
    with pytest.raises(RuleSyntaxError):
        compile_rules("skeleton s\n{\"nodes\": []}\n")  # no end
    with pytest.raises(RuleSyntaxError):
        compile_rules("rule X | D | a {WHAT} b | sk\nskeleton sk\n"
                      '{"nodes": [{"id": 1, "type": "Num", "content": "x"}], "edges": []}\nend\n')


def test_default_rules_compile_and_cover_qtypes():
    qtypes = {r.qtype for r in RULES.rules}
    assert qtypes == {"S", "D", "R"}
    assert len(RULES) >= 20


# ------------------------------------------------------------------- matching


def test_parse_difference_question_exact_shape():
    g, rid = parse_question("How many more descendants of P2 than of P1?", RULES)
    assert rid == "R-DIFF-OF"
    types = sorted(n.op_type.value for n in g.nodes)
    assert types == ["Loc", "Loc", "Log", "Num", "Num"]
    assert len(g.edges) == 4
    assert g.node(1).content == "locate p1"
    assert g.node(2).content == "locate p2"
    assert g.node(5).content == "diff"
    assert g.edges == frozenset({(1, 3), (2, 4), (3, 5), (4, 5)})
    assert predecessors(g, 3) == frozenset({VIRTUAL_START, 1})


def test_parse_legend_question_single_loc():
    g, rid = parse_question("Where does the legend appear in the graph?", RULES)
    assert rid == "S-LEGEND-POS"
    assert len(g.nodes) == 1
    assert g.nodes[0].op_type is OpType.LOC
    assert g.nodes[0].content == "locate legend"


def test_parse_no_match():
    with pytest.raises(NoTemplateMatch):
        parse_question("What color is the sky?", RULES)


def test_parse_deterministic():
    q = "What is the average rainfall of p3?"
    a = parse_question(q, RULES)
    b = parse_question(q, RULES)
    assert a[1] == b[1] and serialize(a[0]) == serialize(b[0])


def test_priority_more_literals_beats_catch_all():
    # fits both S-TITLE (all literal) and D-VALUE-OF ({ENT}=title {SERIES}=the graph)
    g, rid = parse_question("What is the title of the graph?", RULES)
    assert rid == "S-TITLE"
    # fits both D-CELL and D-VALUE-OF; D-CELL has more literals
    g, rid = parse_question("What is the rainfall of p1 in 2014?", RULES)
    assert rid == "D-CELL"
    assert g.node(1).content == "locate p1 at 2014"
    # fits both R-GT-AVG and R-GT-SERIES ({SERIES2}='the average')
    g, rid = parse_question("Does p2 have more points than the average?", RULES)
    assert rid == "R-GT-AVG"


def test_priority_tie_falls_back_to_file_order():
    # R-AVG-SERIES and D-VALUE-OF both have 5 literal tokens and both match;
    # R-AVG-SERIES comes first in the file
    g, rid = parse_question("What is the average rainfall of p1?", RULES)
    assert rid == "R-AVG-SERIES"
    assert g.node(3).content == "avg"


def test_agg_slot_canonicalized():
    g, rid = parse_question("What is the maximum output of p2 over the years?", RULES)
    assert rid == "R-AGG-SERIES"
    assert g.node(3).content == "max"
    g, _ = parse_question("What is the total output of p2 over the years?", RULES)
    assert g.node(3).content == "sum"


def test_normalize_question():
    assert normalize_question("  How MANY,  more?! ") == "how many more"
    assert normalize_question("value 0.414 of p1") == "value 0.414 of p1"


def test_num_slot_with_suffix():
    g, rid = parse_question("Does p1 have more than 10k points?", RULES)
    assert rid == "R-GT-NUM-TOTAL"
    assert g.node(3).content == "literal 10k"


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_any_rule_instantiates_valid_graph(data):
    rule = data.draw(st.sampled_from(RULES.rules))
    word = st.text(alphabet="abcdefghij", min_size=1, max_size=8)
    bindings = {}
    for slot in rule.slots():
        base = slot.rstrip("0123456789")
        if base == "YEAR":
            bindings[slot] = str(data.draw(st.integers(1000, 9999)))
        elif base == "NUM":
            bindings[slot] = str(data.draw(st.integers(0, 999)))
        elif base == "AGG":
            bindings[slot] = data.draw(st.sampled_from(["avg", "max", "min", "sum"]))
        else:
            bindings[slot] = data.draw(word)
    g = rule.instantiate(bindings)
    report = validate(g)
    assert report.ok, report.violations
    assert len(g.sinks()) == 1


# ---------------------------------------------------------------- provider


class _StubHandler(BaseHTTPRequestHandler):
    payload: bytes = b"{}"
    status: int = 200

    def do_POST(self):
        body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
        doc = json.loads(body)
        assert doc["schema_version"] == 1 and "question" in doc
        self.send_response(self.status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(self.payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/got"
    server.shutdown()


GOOD_GOT = json.dumps(
    {
        "nodes": [
            {"id": 1, "type": "Loc", "content": "locate p1"},
            {"id": 2, "type": "Num", "content": "value at target"},
        ],
        "edges": [[1, 2]],
    }
)


def test_provider_round_trip(stub_server):
    _StubHandler.payload = json.dumps({"got": GOOD_GOT}).encode()
    _StubHandler.status = 200
    g = request_got("anything", stub_server)
    assert len(g.nodes) == 2 and validate(g).ok


def test_provider_cycle_rejected(stub_server):
    cyclic = json.dumps(
        {
            "nodes": [
                {"id": 1, "type": "Num", "content": "a"},
                {"id": 2, "type": "Num", "content": "b"},
            ],
            "edges": [[1, 2], [2, 1]],
        }
    )
    _StubHandler.payload = json.dumps({"got": cyclic}).encode()
    _StubHandler.status = 200
    with pytest.raises(ProviderGraphInvalid):
        request_got("q", stub_server)


def test_provider_error_and_schema_failures(stub_server):
    _StubHandler.payload = json.dumps({"error": "cannot parse"}).encode()
    _StubHandler.status = 200
    with pytest.raises(ProviderGraphInvalid):
        request_got("q", stub_server)
    _StubHandler.payload = b"not json"
    with pytest.raises(ProviderSchemaError):
        request_got("q", stub_server)
    _StubHandler.payload = json.dumps({"something": 1}).encode()
    with pytest.raises(ProviderSchemaError):
        request_got("q", stub_server)
    _StubHandler.payload = json.dumps({"got": GOOD_GOT}).encode()
    _StubHandler.status = 500
    with pytest.raises(ProviderSchemaError):
        request_got("q", stub_server)
    _StubHandler.status = 200


def test_provider_unreachable():
    with pytest.raises(ProviderUnreachable):
        request_got("q", "http://127.0.0.1:9/got", timeout=0.5)


def test_fallback_paths(stub_server):
    g, source = parse_with_fallback("Where does the legend appear in the graph?", RULES)
    assert source == "template"
    _StubHandler.payload = json.dumps({"got": GOOD_GOT}).encode()
    _StubHandler.status = 200
    g, source = parse_with_fallback("What color is the sky?", RULES, endpoint=stub_server)
    assert source == "provider"
    with pytest.raises(Unparseable):
        parse_with_fallback("What color is the sky?", RULES)
    with pytest.raises(Unparseable):
        parse_with_fallback("What color is the sky?", RULES, endpoint="http://127.0.0.1:9/x", timeout=0.5)
