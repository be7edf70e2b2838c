import itertools

import pytest
from hypothesis import given, settings, strategies as st

import oracles
from rmlab.core import DEC, DONE, LIVE, Kind, TruthAssignment, bfs_depths, eval_guard, rm_step, validate_rm
from rmlab.tasks import (
    DELIVERY_RM, delivery_bindings, delivery_numeric_rm, office_bindings, office_numeric_rm, task_rm,
)
from rmlab.translate import (
    ParseError, TranslationError, ValidationError, compile_rm, export_dot, format_rm,
    parse_bindings, parse_guard, parse_rm, split_to_coupled, unroll_to_agenda, unroll_to_boolean,
)


class TestParse:
    def test_delivery_template(self):
        rm = delivery_numeric_rm(2)
        assert len(rm.all_states) == 3 and len(rm.terminal) == 1
        assert len(rm.transitions) == 5
        assert rm.kind is Kind.NUMERIC

    def test_empty_document(self):
        with pytest.raises(ParseError):
            parse_rm("")

    def test_error_position(self):
        text = DELIVERY_RM.format(n=2).replace("[!s]", "[!s &]")
        bad_line = text.splitlines().index("  u1 -> u1 [!s &] 0") + 1
        with pytest.raises(ParseError) as info:
            parse_rm(text)
        assert info.value.line == bad_line

    def test_unknown_feature_reported(self):
        text = DELIVERY_RM.format(n=2).replace("[!s]", "[!q]")
        with pytest.raises(ValidationError):
            parse_rm(text)

    @pytest.mark.parametrize("variant", ["numeric", "boolean", "agenda", "coupled"])
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_round_trip(self, variant, n):
        rm = delivery_numeric_rm(n) if variant == "numeric" else task_rm("delivery", n, variant)
        text = format_rm(rm)
        again = parse_rm(text)
        assert format_rm(again) == text
        assert again.kind is rm.kind
        assert validate_rm(again) == []

    def test_bindings(self):
        assert parse_bindings("b: b1 b2\n# comment\n") == {"b": ["b1", "b2"]}


_atoms = st.sampled_from(["a", "!a", "b", "!b", "dec(w)", "done(w)", "live(w)", "true", "false"])


@st.composite
def guard_text(draw, depth=3):
    if depth == 0 or draw(st.booleans()):
        return draw(_atoms)
    op = draw(st.sampled_from([" & ", " | "]))
    return "(" + draw(guard_text(depth - 1)) + op + draw(guard_text(depth - 1)) + ")"


@given(guard_text())
def test_guard_text_round_trip(text):
    g = parse_guard(text)
    again = parse_guard(str(g))
    for a, b, w in itertools.product([False, True], [False, True], [DEC, DONE, LIVE]):
        t = TruthAssignment({"a": a, "b": b}, {"w": w})
        assert eval_guard(g, t) == eval_guard(again, t)


class TestUnroll:
    @pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
    def test_delivery_counts_match_enumerator(self, n):
        num, bind = delivery_numeric_rm(n), delivery_bindings(n)
        assert len(unroll_to_boolean(num, bind).all_states) == oracles.delivery_boolean_count(n)
        assert len(unroll_to_agenda(num, bind).all_states) == oracles.delivery_agenda_count(n)
        assert len(compile_rm(num, bind, "coupled").all_states) == oracles.delivery_coupled_count(n)

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_office_counts_match_enumerator(self, n):
        rm = unroll_to_boolean(office_numeric_rm(n), office_bindings(n))
        assert len(rm.all_states) == oracles.office_boolean_count(n)

    def test_single_box_is_a_chain(self):
        rm = unroll_to_boolean(delivery_numeric_rm(1), delivery_bindings(1))
        assert rm.states == ("u0", "u1") and rm.terminal == ("u2",)
        b1 = TruthAssignment({"s": False, "b1": True})
        s = TruthAssignment({"s": True, "b1": False})
        assert rm_step(rm, "u0", b1).next == "u1"
        assert rm_step(rm, "u1", s) == ("u2", 1, rm.progress_transitions("u1")[0])

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_depths_and_labels(self, n):
        for variant in ("agenda", "coupled"):
            rm = task_rm("delivery", n, variant)
            assert validate_rm(rm) == []
            depths = bfs_depths(rm)
            assert all(rm.labels[u].depth == depths[u] for u in rm.all_states)
            labels = [rm.labels[u] for u in rm.all_states]
            assert len(set(labels)) == len(labels)

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_monotone_counts(self, n):
        b, a, c = (len(task_rm("delivery", n, v).all_states) for v in ("boolean", "agenda", "coupled"))
        assert b >= a and c >= a

    def test_symmetric_histories_merge(self):
        agenda = task_rm("delivery", 2, "agenda")
        ev = {e: TruthAssignment({"s": e == "s", "b1": e == "b1", "b2": e == "b2"}) for e in ("s", "b1", "b2")}

        def run(rm, word):
            u = rm.initial
            for e in word:
                u = rm_step(rm, u, ev[e]).next
            return u

        assert run(agenda, ["b1", "s", "b2"]) == run(agenda, ["b2", "s", "b1"]) == "3{}s"
        boolean = task_rm("delivery", 2, "boolean")
        assert run(boolean, ["b1", "s", "b2"]) != run(boolean, ["b2", "s", "b1"])

    def test_two_decrements_rejected(self):
        text = ("numerics: b 0..1\n  c 0..1\nstates: a\ninitial: a\nterminal: f\ntransitions:\n"
                "  a -> f [done(b) & done(c)] 1\n")
        num = parse_rm(text, validate=False)
        with pytest.raises(TranslationError):
            unroll_to_boolean(num, {"b": ["x"], "c": ["y"]})

    def test_binding_size_checked(self):
        with pytest.raises(TranslationError):
            unroll_to_boolean(delivery_numeric_rm(2), {"b": ["b1"]})

    def test_compile_rejects_unknown_variant(self):
        with pytest.raises(TranslationError):
            compile_rm(delivery_numeric_rm(2), delivery_bindings(2), "ordered")


class TestSplit:
    def test_members_per_agenda(self):
        agenda = task_rm("delivery", 3, "agenda")
        coupled = split_to_coupled(agenda)
        for u in agenda.states:
            lab = agenda.labels[u]
            members = [v for v in coupled.all_states
                       if coupled.labels[v].depth == lab.depth and coupled.labels[v].agenda == lab.agenda]
            expected = len(lab.objective) if lab.whole_agenda else 1
            assert len(members) == expected
        for g in coupled.groups:
            assert len({(coupled.labels[u].depth, coupled.labels[u].agenda) for u in g}) == 1

    def test_nothing_to_split(self):
        agenda = task_rm("delivery", 1, "agenda")
        coupled = split_to_coupled(agenda)
        assert set(coupled.all_states) == set(agenda.all_states)
        assert all(len(g) == 1 for g in coupled.groups)

    def test_requires_agenda(self):
        with pytest.raises(TranslationError):
            split_to_coupled(task_rm("delivery", 2, "boolean"))


class TestDot:
    def test_node_count(self):
        dot = export_dot(task_rm("delivery", 1, "boolean"))
        assert sum(1 for line in dot.splitlines() if line.strip().startswith('"u') and "->" not in line) == 3

    def test_single_cluster(self):
        dot = export_dot(task_rm("delivery", 2, "coupled"))
        assert dot.count("subgraph cluster") == 1
        start = dot.index("subgraph cluster")
        body = dot[start:dot.index("\n  }", start)]
        assert body.count("0{b1,b2}") == 2
        assert "dashed" in body

    def test_deterministic(self):
        assert export_dot(task_rm("delivery", 3, "coupled")) == export_dot(task_rm("delivery", 3, "coupled"))


EVENTS = ("none", "s", "b1", "b2", "b3")


def _run_word(rm, word, n):
    feats = ["s"] + [f"b{i}" for i in range(1, n + 1)]
    u = rm.initial_group if rm.kind is Kind.COUPLED else rm.initial
    total = 0
    for k, e in enumerate(word):
        t = TruthAssignment({f: f == e for f in feats})
        u, r, _ = rm_step(rm, u, t)
        total += r
        if rm.is_terminal(u):
            return k + 1, total
    return None, total


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 3), st.data())
def test_random_words_agree(n, data):
    word = data.draw(st.lists(st.sampled_from(EVENTS[:n + 2]), max_size=4 * n + 2))
    outcomes = {v: _run_word(task_rm("delivery", n, v), word, n) for v in ("boolean", "agenda", "coupled")}
    assert len(set(outcomes.values())) == 1
