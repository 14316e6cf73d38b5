from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oorl.policy import Prompt
from oorl.toylang import (
    ADD,
    END,
    MUL,
    SUB,
    VOCAB_SIZE,
    DecodeError,
    IrProgram,
    MutationExhausted,
    OptLevel,
    PreferenceGroup,
    StackUnderflow,
    apply_mutation,
    build_preference_groups,
    check_group,
    compile_at,
    decode,
    distinct_renderings,
    gen_source,
    grade,
    is_inequivalent,
    make_prompt,
    mutate_inequivalent,
    parse_rpn,
    prompt_value,
    read_groups,
    run,
    write_groups,
)

SEVEN = make_prompt(0, parse_rpn("3 4 +"))


def test_parse_and_evaluate():
    assert parse_rpn("3 4 +").value == 7
    assert parse_rpn("2 3 * 4 −").value == 2
    assert parse_rpn(["2", "3", "*", "4", "-"]).value == 2
    for bad in ["3 +", "3 4", "", "3 4 + +", "12 3 +"]:
        with pytest.raises(ValueError):
            parse_rpn(bad)


def test_gen_source_is_seeded_and_bounded():
    assert gen_source(11) == gen_source(11)
    for s in range(300):
        e = gen_source(s, max_operators=3, value_bound=15)
        assert abs(e.value) <= 15
        assert parse_rpn(e.rpn).value == e.value
        assert 1 <= sum(t in "+-*" for t in e.rpn) <= 3
    with pytest.raises(ValueError):
        gen_source(0, max_operators=0)


def test_compile_examples():
    e = parse_rpn("3 4 +")
    assert compile_at(e, OptLevel.O0).tokens == (3, 4, ADD, END)
    assert compile_at(e, OptLevel.O2).tokens == (7, END)
    f = parse_rpn("2 3 * 4 -")
    o1 = compile_at(f, OptLevel.O1)
    assert o1.tokens == (6, 4, SUB, END)
    assert run(o1.tokens) == 2


def test_run_errors():
    assert run((3, 4, MUL, END)) == 12
    with pytest.raises(StackUnderflow):
        run((4, ADD, END))
    with pytest.raises(DecodeError):
        run((3, 4, END))
    with pytest.raises(DecodeError):
        run((3, 4, ADD))
    with pytest.raises(DecodeError):
        decode((3, END, 4, ADD, END))


def test_grade_examples():
    assert grade(SEVEN, (3, 4, ADD, END)) == 1
    assert grade(SEVEN, (7, END)) == 1
    assert grade(SEVEN, (3, 4, MUL, END)) == 0
    assert grade(SEVEN, (ADD, END)) == 0
    assert grade(SEVEN, ()) == 0
    assert grade(SEVEN, (3, 4, ADD)) == 0
    assert grade(SEVEN, (99, END)) == 0
    assert grade(SEVEN, "garbage") == 0
    assert grade(Prompt(0, (ADD,)), (7, END)) == 0


def test_mutation_examples():
    ir = (3, 4, ADD, END)
    assert run((3, 4, MUL, END)) == 12 and is_inequivalent((3, 4, MUL, END), 7)
    assert run((3, 4, SUB, END)) == -1 and is_inequivalent((3, 4, SUB, END), 7)
    assert is_inequivalent((4, ADD, END), 7)
    assert not is_inequivalent((4, 3, ADD, END), 7)
    rng = np.random.default_rng(0)
    for kind in ("literal", "op", "delete_pair", "swap"):
        m = apply_mutation(ir, kind, rng)
        assert m is not None and m[-1] == END and m != ir
    assert apply_mutation((7, END), "op", rng) is None
    with pytest.raises(ValueError):
        apply_mutation(ir, "bogus", rng)


def test_mutate_inequivalent_exhaustion_and_undefined():
    # a lone PUSH 0 can only be relabelled, which always changes the value
    assert mutate_inequivalent(IrProgram((0, END)), 0).tokens != (0, END)
    with pytest.raises(ValueError):
        mutate_inequivalent(IrProgram((ADD, END)), 0)
    with pytest.raises(MutationExhausted):
        mutate_inequivalent(IrProgram((3, 4, ADD, END)), 0, max_attempts=0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(0, 40))
def test_every_level_preserves_value(seed, ops, bound):
    e = gen_source(seed, ops, bound)
    prompt = make_prompt(0, e)
    assert prompt_value(prompt) == e.value
    for level in OptLevel:
        ir = compile_at(e, level)
        assert ir.value == e.value
        assert grade(prompt, ir.encode()) == 1
        assert decode(ir.encode()) == ir
        assert all(0 <= t < VOCAB_SIZE for t in ir.tokens)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_mutants_grade_zero(seed, mseed):
    e = gen_source(seed, 3, 30)
    prompt = make_prompt(0, e)
    for level in OptLevel:
        try:
            mutant = mutate_inequivalent(compile_at(e, level), mseed)
        except MutationExhausted:
            continue
        assert grade(prompt, mutant.encode()) == 0


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-3, 20), max_size=12))
def test_grade_is_total(tokens):
    g = grade(SEVEN, tokens)
    assert g in (0, 1)
    assert grade(SEVEN, tokens) == g


def test_group_example_two_winners_two_losers():
    (g,) = build_preference_groups([parse_rpn("2 3 * 4 -")], 2, 2, seed=0)
    e = parse_rpn("2 3 * 4 -")
    assert g.winners == [compile_at(e, OptLevel.O0).tokens, compile_at(e, OptLevel.O1).tokens]
    assert g.m == 2
    check_group(g)


def test_collapsed_levels_are_skipped():
    e = parse_rpn("3 4 +")
    assert len(distinct_renderings(e)) == 2  # O1 cannot fold the root
    assert build_preference_groups([e], 3, 1, seed=0) == []
    with pytest.raises(ValueError):
        build_preference_groups([e], 4, 1, seed=0)
    with pytest.raises(ValueError):
        build_preference_groups([e], 1, 0, seed=0)


def test_winner_without_mutants_falls_back_to_other_winners():
    e = parse_rpn("0 0 0 + *")
    o0 = IrProgram(compile_at(e, OptLevel.O0).tokens)
    with pytest.raises(MutationExhausted):
        mutate_inequivalent(o0, 0)
    # only the folded O2 rendering has enough inequivalent mutants
    (g,) = build_preference_groups([e], 3, 3, seed=0)
    check_group(g)
    assert build_preference_groups([e], 2, 3, seed=0) == []


def test_groups_deterministic_and_roundtrip(tmp_path):
    exprs = [gen_source([3, i]) for i in range(40)]
    a = build_preference_groups(exprs, 2, 3, seed=5)
    b = build_preference_groups(exprs, 2, 3, seed=5)
    assert [g.to_json() for g in a] == [g.to_json() for g in b]
    assert [g.prompt.prompt_id for g in a] == list(range(len(a)))
    path = tmp_path / "g.jsonl"
    write_groups(a, path)
    raw = path.read_bytes()
    assert b"\r" not in raw
    back = read_groups(path)
    assert [g.to_json() for g in back] == [g.to_json() for g in a]
    for g in back:
        check_group(g)
        assert set(g.meta) == {"source_rpn", "value"}


def test_check_group_rejects_bad_groups():
    good = (3, 4, ADD, END)
    with pytest.raises(ValueError):
        check_group(PreferenceGroup(SEVEN, [good], [good]))
    with pytest.raises(ValueError):
        check_group(PreferenceGroup(SEVEN, [(3, 4, MUL, END)], [(1, END)]))
    with pytest.raises(ValueError):
        check_group(PreferenceGroup(SEVEN, [good], [(7, END)]))
    with pytest.raises(ValueError):
        check_group(PreferenceGroup(SEVEN, [good], []))
