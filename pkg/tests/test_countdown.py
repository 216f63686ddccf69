import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from verigap import countdown as cd
from verigap import expr as ex
from verigap.countdown import CountdownInstance, Failure, UsagePolicy
from verigap.verdict import Verdict

from oracles import brute_reachable

GOLDEN = Path(__file__).parent / "golden"


def worked_instance():
    return CountdownInstance((2, 3, 5, 7), 19)


# --------------------------------------------------------------------------- verify


def test_worked_example_is_correct():
    rep = cd.verify_solution(worked_instance(), "(7*3)-2")
    assert rep.verdict is Verdict.CORRECT and rep.failure is None and rep.correct


def test_multiset_overuse():
    rep = cd.verify_solution(worked_instance(), "(7*7)-2")
    assert rep.failure is Failure.USAGE_VIOLATION


def test_small_derived_example():
    inst = CountdownInstance((1, 2, 3), 9)
    assert cd.verify_solution(inst, "(1+2)*3").correct
    assert any(ex.to_canonical_string(s) == "(1+2)*3" for s in cd.enumerate_solutions(inst))


@pytest.mark.parametrize("text, failure", [
    ("7*3-", Failure.PARSE_ERROR),
    ("sin(7)", Failure.PARSE_ERROR),
    ("7*4-9", Failure.DISALLOWED_NUMBERS),
    ("7*3-2*1", Failure.DISALLOWED_NUMBERS),
    ("5/(7-7)", Failure.USAGE_VIOLATION),
    ("5/(3-3)", Failure.USAGE_VIOLATION),
    ("2/(5-5)", Failure.USAGE_VIOLATION),
    ("7/(5-2-3)", Failure.DIVISION_BY_ZERO),
    ("7*3", Failure.WRONG_VALUE),
])
def test_failure_kinds(text, failure):
    rep = cd.verify_solution(worked_instance(), text)
    assert rep.verdict is Verdict.INCORRECT
    assert rep.failure is failure


def test_wrong_value_reports_actual():
    rep = cd.verify_solution(worked_instance(), "7/2")
    assert rep.actual == Fraction(7, 2)


def test_exactly_once_policy():
    inst = worked_instance()
    assert not cd.verify_solution(inst, "7*3-2", UsagePolicy.EXACTLY_ONCE).correct
    assert cd.verify_solution(inst, "(3+5*7)/2", UsagePolicy.EXACTLY_ONCE).correct


def test_duplicates_are_a_multiset():
    inst = CountdownInstance((2, 2, 3), 7)
    assert cd.verify_solution(inst, "2*2+3").correct
    assert cd.verify_solution(inst, "2*2*2-1").failure is Failure.DISALLOWED_NUMBERS
    assert cd.verify_solution(inst, "2+2+2+1").failure is Failure.DISALLOWED_NUMBERS
    assert cd.verify_solution(CountdownInstance((2, 3), 8), "2*2*2").failure is Failure.USAGE_VIOLATION


def test_classic_mode_rejects_fractional_intermediates():
    inst = CountdownInstance((2, 3, 4), 6)
    assert cd.verify_solution(inst, "3/2*4").correct
    rep = cd.verify_solution(inst, "3/2*4", classic=True)
    assert rep.failure is Failure.INTERMEDIATE_VIOLATION


def test_multiplication_sign_aliases():
    assert cd.verify_solution(worked_instance(), "7 × 3 − 2".replace("−", "-")).correct


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=64))
def test_verify_total_on_bytes(blob):
    rep = cd.verify_solution(worked_instance(), blob)
    assert rep.verdict in (Verdict.CORRECT, Verdict.INCORRECT)
    assert (rep.failure is None) == (rep.verdict is Verdict.CORRECT)


@settings(max_examples=500, deadline=None)
@given(st.text(alphabet="0123456789+-*/()^ xsin×÷.", max_size=40))
def test_verify_total_on_text(text):
    rep = cd.verify_solution(worked_instance(), text)
    assert (rep.failure is None) == rep.correct


def test_verify_total_on_odd_inputs():
    for junk in (None, 19, "(" * 500 + "2" + ")" * 500, "9" * 5000, "\x00", "2" + "+2" * 300):
        assert not cd.verify_solution(worked_instance(), junk).correct


# --------------------------------------------------------------------------- search


def test_single_atom():
    assert cd.enumerate_solutions(CountdownInstance((5,), 5)) == [ex.Int(5)]
    assert cd.solve(CountdownInstance((2,), 7)) is None


def test_two_numbers_reachable_positive_integers():
    values = cd.reachable_values(CountdownInstance((2, 3), 1))
    assert {v for v in values if v.denominator == 1 and v > 0} == {1, 2, 3, 5, 6}
    assert values == {2, 3, 5, 1, -1, 6, Fraction(2, 3), Fraction(3, 2)}


def test_golden_enumeration():
    expected = (GOLDEN / "countdown_2_3_5_7_to_19.txt").read_text().split()
    got = [ex.to_canonical_string(s) for s in cd.enumerate_solutions(worked_instance())]
    assert got == expected
    assert "3*7-2" in got  # the worked example, canonicalised


def test_solve_returns_first_canonical():
    sol = cd.solve(worked_instance())
    assert ex.to_canonical_string(sol) == "(3+5*7)/2"
    assert cd.verify_solution(worked_instance(), ex.to_canonical_string(sol)).correct
    assert cd.solve(CountdownInstance((1, 2, 3), 7)) is not None


def test_limit_and_order():
    inst = CountdownInstance((1, 2, 3, 4), 10)
    full = cd.enumerate_solutions(inst)
    strings = [ex.to_canonical_string(s) for s in full]
    assert strings == sorted(strings) and len(set(strings)) == len(strings)
    assert cd.enumerate_solutions(inst, limit=3) == full[:3]


def test_commutative_duplicates_collapse():
    sols = [ex.to_canonical_string(s) for s in cd.enumerate_solutions(CountdownInstance((2, 3), 5))]
    assert sols == ["2+3"]


def test_instance_too_large():
    with pytest.raises(cd.InstanceTooLarge):
        cd.enumerate_solutions(CountdownInstance(tuple(range(1, 8)), 100))


def test_instance_validation():
    for bad in (((), 5), ((0, 2), 5), ((2, 3), 0), (tuple(range(1, 10)), 5)):
        with pytest.raises(ValueError):
            CountdownInstance(*bad)


@pytest.mark.parametrize("seed", range(60))
def test_reachable_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    numbers = tuple(int(v) for v in rng.integers(1, 12, size=k))
    inst = CountdownInstance(numbers, 1)
    assert cd.reachable_values(inst) == brute_reachable(numbers)


@pytest.mark.parametrize("seed", range(40))
def test_solvability_agrees_with_enumeration(seed):
    rng = np.random.default_rng(1000 + seed)
    numbers = tuple(int(v) for v in rng.integers(1, 20, size=int(rng.integers(2, 5))))
    target = int(rng.integers(1, 200))
    for policy in UsagePolicy:
        inst = CountdownInstance(numbers, target)
        sols = cd.enumerate_solutions(inst, policy)
        assert cd.is_solvable(inst, policy) == bool(sols) == (cd.solve(inst, policy) is not None)
        assert (Fraction(target) in cd.reachable_values(inst, policy)) == bool(sols)
        for s in sols:
            assert cd.verify_solution(inst, ex.to_canonical_string(s), policy).correct


def test_zero_intermediates_are_found():
    # 0*y and 0/y paths: (3-3)*5+2 needs a zero subexpression
    inst = CountdownInstance((3, 3, 5, 2), 2)
    strings = {ex.to_canonical_string(s) for s in cd.enumerate_solutions(inst)}
    assert "2+(3-3)*5" in strings or "(3-3)*5+2" in strings
    assert "2+(3-3)/5" in strings or "(3-3)/5+2" in strings


# --------------------------------------------------------------------------- generation


def test_generation_forced():
    cfg = cd.GenerationConfig(count_range=(1, 1), value_range=(5, 5), target_range=(5, 5))
    inst = cd.generate_instance(0, cfg)
    assert inst.numbers == (5,) and inst.target == 5


def test_generation_deterministic_and_solvable():
    a = cd.generate_instance(42)
    assert a == cd.generate_instance(42)
    assert cd.solve(a) is not None
    batch = cd.generate_instances(3, 12)
    assert batch == cd.generate_instances(3, 12)
    assert [i.id for i in batch] == [f"cd-{i:05d}" for i in range(12)]
    assert all(cd.is_solvable(i) for i in batch)


def test_generation_exhausted():
    cfg = cd.GenerationConfig(count_range=(1, 1), value_range=(5, 5), target_range=(6, 6), max_attempts=10)
    with pytest.raises(cd.GenerationExhausted):
        cd.generate_instance(0, cfg)


def test_generation_config_validation():
    with pytest.raises(ValueError):
        cd.GenerationConfig(count_range=(7, 7))
    with pytest.raises(ValueError):
        cd.GenerationConfig(value_range=(9, 1))


def test_jsonl_round_trip():
    inst = CountdownInstance((2, 3, 5, 7), 19, "cd-7")
    line = json.dumps(inst.to_json())
    assert json.loads(line) == {"id": "cd-7", "numbers": [2, 3, 5, 7], "target": 19}
    assert CountdownInstance.from_json(json.loads(line)) == inst
