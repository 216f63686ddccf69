"""Countdown: instances, the exact verifier, and the exhaustive solver.

The verifier is the reward function and therefore total: every failure mode is
reported in a :class:`VerifyReport`, nothing is raised. The solver is the
expensive side of the generator/verifier asymmetry and doubles as the test
oracle for the verifier.
"""
from __future__ import annotations

import enum
import itertools
import operator
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from gmpy2 import mpq

from . import expr as ex
from .verdict import Verdict

MAX_NUMBERS = 8
MAX_EXHAUSTIVE = 6
_ZERO = frozenset((mpq(0),))


class UsagePolicy(enum.Enum):
    AT_MOST_ONCE = "at_most_once"
    EXACTLY_ONCE = "exactly_once"


class Failure(enum.Enum):
    PARSE_ERROR = "parse_error"
    DISALLOWED_NUMBERS = "disallowed_numbers"
    USAGE_VIOLATION = "usage_violation"
    DIVISION_BY_ZERO = "division_by_zero"
    WRONG_VALUE = "wrong_value"
    # only produced with classic=True
    INTERMEDIATE_VIOLATION = "intermediate_violation"


class InstanceTooLarge(ValueError):
    pass


class GenerationExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class CountdownInstance:
    numbers: tuple[int, ...]
    target: int
    id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "numbers", tuple(int(n) for n in self.numbers))
        if not 1 <= len(self.numbers) <= MAX_NUMBERS:
            raise ValueError(f"need 1..{MAX_NUMBERS} numbers, got {len(self.numbers)}")
        if any(n < 1 for n in self.numbers):
            raise ValueError("numbers must be positive")
        if self.target < 1:
            raise ValueError("target must be positive")

    def to_json(self) -> dict:
        return {"id": self.id, "numbers": list(self.numbers), "target": self.target}

    @classmethod
    def from_json(cls, obj: dict) -> "CountdownInstance":
        return cls(tuple(obj["numbers"]), int(obj["target"]), obj.get("id"))


@dataclass(frozen=True)
class VerifyReport:
    verdict: Verdict
    failure: Failure | None = None
    actual: Fraction | None = None
    detail: str = ""

    @property
    def correct(self) -> bool:
        return self.verdict is Verdict.CORRECT


def _incorrect(failure: Failure, detail: str = "", actual: Fraction | None = None) -> VerifyReport:
    return VerifyReport(Verdict.INCORRECT, failure, actual, detail)


def verify_solution(instance: CountdownInstance, text, policy: UsagePolicy = UsagePolicy.AT_MOST_ONCE,
                    classic: bool = False) -> VerifyReport:
    """Check an answer against an instance. Accepts arbitrary str or bytes."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("ascii")
        except UnicodeDecodeError:
            return _incorrect(Failure.PARSE_ERROR, "answer is not ASCII")
    if not isinstance(text, str):
        return _incorrect(Failure.PARSE_ERROR, f"answer has type {type(text).__name__}")
    try:
        tree = ex.parse(text, ex.COUNTDOWN)
    except ex.ExprError as exc:
        return _incorrect(Failure.PARSE_ERROR, str(exc))

    used = Counter(ex.integer_literals(tree))
    available = Counter(instance.numbers)
    foreign = sorted(n for n in used if n not in available)
    if foreign:
        return _incorrect(Failure.DISALLOWED_NUMBERS, f"not in the instance: {foreign}")
    over = sorted(n for n, k in used.items() if k > available[n])
    if over:
        return _incorrect(Failure.USAGE_VIOLATION, f"used too often: {over}")
    if policy is UsagePolicy.EXACTLY_ONCE and used != available:
        return _incorrect(Failure.USAGE_VIOLATION, f"unused numbers: {sorted((available - used).elements())}")

    try:
        value = ex.eval_rational(tree, classic=classic)
    except ex.DivisionByZero:
        return _incorrect(Failure.DIVISION_BY_ZERO, "division by zero")
    except ex.NotCountdownExpr as exc:
        return _incorrect(Failure.INTERMEDIATE_VIOLATION, str(exc))
    if value != instance.target:
        return _incorrect(Failure.WRONG_VALUE, f"evaluates to {value}", value)
    return VerifyReport(Verdict.CORRECT)


# --------------------------------------------------------------------------- search
#
# Sub-multisets are keyed by sorted value tuples so duplicate numbers collapse.
# Value sets are computed bottom-up; expressions are rebuilt top-down only for
# the values actually needed, which keeps the full expression space implicit.
# Internally values are gmpy2 rationals: same hash and equality as Fraction,
# several times faster to build and hash.


def _splits(key: tuple[int, ...]):
    """Unordered-distinct ordered pairs (A, B) of nonempty sub-multisets with A+B = key."""
    n = len(key)
    seen = set()
    for mask in range(1, (1 << n) - 1):
        a = tuple(key[i] for i in range(n) if mask >> i & 1)
        b = tuple(key[i] for i in range(n) if not mask >> i & 1)
        if (a, b) not in seen:
            seen.add((a, b))
            yield a, b


def _combine(a: mpq, b: mpq):
    yield "+", a + b
    yield "-", a - b
    yield "*", a * b
    if b != 0:
        yield "/", a / b


@lru_cache(maxsize=4096)
def _values(key: tuple[int, ...]) -> frozenset[mpq]:
    if len(key) == 1:
        return frozenset((mpq(key[0]),))
    out = set()
    for a, b in _splits(key):
        va, vb = _values(a), _values(b)
        # starmap over the product keeps the inner loops in C
        for op in (operator.add, operator.sub, operator.mul):
            out.update(itertools.starmap(op, itertools.product(va, vb)))
        out.update(itertools.starmap(operator.truediv, itertools.product(va, vb - _ZERO)))
    return frozenset(out)


def _sub_multisets(key: tuple[int, ...]):
    seen = set()
    for r in range(1, len(key) + 1):
        for combo in itertools.combinations(key, r):
            if combo not in seen:
                seen.add(combo)
                yield combo


def reachable_values(instance: CountdownInstance, policy: UsagePolicy = UsagePolicy.AT_MOST_ONCE) -> frozenset[Fraction]:
    """Every exact value some expression over the instance can take."""
    key = tuple(sorted(instance.numbers))
    _check_size(key)
    if policy is UsagePolicy.EXACTLY_ONCE:
        return frozenset(Fraction(int(v.numerator), int(v.denominator)) for v in _values(key))
    out = set()
    for sub in _sub_multisets(key):
        out |= _values(sub)
    return frozenset(Fraction(int(v.numerator), int(v.denominator)) for v in out)


def _reaches(key: tuple[int, ...], value: mpq) -> bool:
    if len(key) == 1:
        return key[0] == value
    for a, b in _splits(key):
        va, vb = _values(a), _values(b)
        if not vb.isdisjoint(map(value.__rsub__, va)) or not vb.isdisjoint(map(value.__sub__, va)):
            return True
        nonzero = va - _ZERO
        if not vb.isdisjoint(map(value.__truediv__, nonzero)):
            return True
        if value != 0 and not vb.isdisjoint(map(value.__rtruediv__, nonzero)):
            return True
        if value == 0 and 0 in va and vb:
            return True
    return False


def _pairs(va: frozenset, vb: frozenset, value: mpq):
    """(op, x, y) with x in ``va``, y in ``vb`` and ``x op y == value``.

    Candidates are mapped from the smaller side and intersected with the
    larger, so the Python-level loop only sees actual matches.
    """
    nonzero_a, nonzero_b = va - _ZERO, vb - _ZERO
    if len(va) <= len(vb):
        for y in vb.intersection(map(value.__sub__, va)):
            yield "+", value - y, y
        for y in vb.intersection(map(value.__rsub__, va)):
            yield "-", value + y, y
        for y in nonzero_b.intersection(map(value.__truediv__, nonzero_a)):
            yield "*", value / y, y
        if value != 0:
            for y in nonzero_b.intersection(map(value.__rtruediv__, nonzero_a)):
                yield "/", value * y, y
    else:
        for x in va.intersection(map(value.__sub__, vb)):
            yield "+", x, value - x
        for x in va.intersection(map(value.__add__, vb)):
            yield "-", x, x - value
        for x in nonzero_a.intersection(map(value.__truediv__, nonzero_b)):
            yield "*", x, value / x
        if value != 0:
            for x in nonzero_a.intersection(map(value.__mul__, nonzero_b)):
                yield "/", x, x / value
    if value == 0:
        if 0 in va:
            for y in vb:
                yield "*", mpq(0), y
            for y in nonzero_b:
                yield "/", mpq(0), y
        if 0 in vb:
            for x in nonzero_a:
                yield "*", x, mpq(0)


def is_solvable(instance: CountdownInstance, policy: UsagePolicy = UsagePolicy.AT_MOST_ONCE) -> bool:
    key = tuple(sorted(instance.numbers))
    _check_size(key)
    target = mpq(instance.target)
    subsets = [key] if policy is UsagePolicy.EXACTLY_ONCE else list(_sub_multisets(key))
    return any(_reaches(sub, target) for sub in subsets)


def _canonical_pair(op: str, left: ex.Expr, right: ex.Expr) -> ex.Expr:
    if op in "+*":
        ls, rs = ex.to_canonical_string(left), ex.to_canonical_string(right)
        if rs < ls:
            left, right = right, left
    return ex.BinOp(op, left, right)


class _Builder:
    def __init__(self):
        self.memo: dict[tuple[tuple[int, ...], mpq], frozenset] = {}

    def exprs(self, key: tuple[int, ...], value: mpq) -> frozenset:
        hit = self.memo.get((key, value))
        if hit is not None:
            return hit
        if len(key) == 1:
            out = frozenset((ex.Int(key[0]),)) if key[0] == value else frozenset()
            self.memo[(key, value)] = out
            return out
        out = set()
        for a, b in _splits(key):
            for op, x, y in _pairs(_values(a), _values(b), value):
                lefts = self.exprs(a, x)
                rights = self.exprs(b, y)
                for le in lefts:
                    for re_ in rights:
                        out.add(_canonical_pair(op, le, re_))
        frozen = frozenset(out)
        self.memo[(key, value)] = frozen
        return frozen


def _check_size(key) -> None:
    if len(key) > MAX_EXHAUSTIVE:
        raise InstanceTooLarge(f"exhaustive search supports at most {MAX_EXHAUSTIVE} numbers, got {len(key)}")


def enumerate_solutions(instance: CountdownInstance, policy: UsagePolicy = UsagePolicy.AT_MOST_ONCE,
                        limit: int | None = None) -> list[ex.Expr]:
    """All solutions, distinct up to operand order of + and *, sorted by canonical string."""
    key = tuple(sorted(instance.numbers))
    _check_size(key)
    target = mpq(instance.target)
    subsets = [key] if policy is UsagePolicy.EXACTLY_ONCE else list(_sub_multisets(key))
    builder = _Builder()
    found = set()
    for sub in subsets:
        found |= builder.exprs(sub, target)
    ordered = sorted(found, key=ex.to_canonical_string)
    return ordered if limit is None else ordered[:limit]


def solve(instance: CountdownInstance, policy: UsagePolicy = UsagePolicy.AT_MOST_ONCE) -> ex.Expr | None:
    solutions = enumerate_solutions(instance, policy, limit=1)
    return solutions[0] if solutions else None


# --------------------------------------------------------------------------- generation

# Conventional Countdown-style ranges; nothing here is dictated by the task itself.
@dataclass(frozen=True)
class GenerationConfig:
    count_range: tuple[int, int] = (4, 4)
    value_range: tuple[int, int] = (1, 99)
    target_range: tuple[int, int] = (10, 999)
    policy: UsagePolicy = UsagePolicy.AT_MOST_ONCE
    max_attempts: int = 1000

    def __post_init__(self):
        for name in ("count_range", "value_range", "target_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {lo}..{hi}")
        if self.count_range[1] > MAX_EXHAUSTIVE or self.count_range[0] < 1:
            raise ValueError(f"count_range must lie within 1..{MAX_EXHAUSTIVE}")


def generate_instance(rng, config: GenerationConfig = GenerationConfig(), id: str | None = None) -> CountdownInstance:
    """Rejection-sample a solvable instance. ``rng`` is a seed or numpy Generator."""
    rng = np.random.default_rng(rng)
    for _ in range(config.max_attempts):
        k = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
        numbers = tuple(int(v) for v in rng.integers(config.value_range[0], config.value_range[1] + 1, size=k))
        target = int(rng.integers(config.target_range[0], config.target_range[1] + 1))
        inst = CountdownInstance(numbers, target, id)
        if is_solvable(inst, config.policy):
            return inst
    raise GenerationExhausted(f"no solvable instance in {config.max_attempts} attempts")


def generate_instances(seed: int, n: int, config: GenerationConfig = GenerationConfig()) -> list[CountdownInstance]:
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
    return [generate_instance(r, config, id=f"cd-{i:05d}") for i, r in enumerate(rngs)]
