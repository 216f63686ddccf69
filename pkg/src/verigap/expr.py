"""Expression trees shared by both environments.

One tree type carries Countdown solutions, integrands and antiderivatives.
Nodes are frozen dataclasses, so ``==`` is structural equality and trees can be
hashed, cached and shared between threads freely.

Integer literals are non-negative; a negative constant is spelled ``Neg(Int(n))``
exactly as the parser would produce it from ``-n``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Mapping, Union

import numpy as np

COUNTDOWN = "countdown"
INTEGRATION = "integration"
MODES = (COUNTDOWN, INTEGRATION)

FUNCTIONS = ("sin", "cos", "tan", "exp", "ln", "sqrt")
BINARY_OPS = ("+", "-", "*", "/", "^")
DEFAULT_MAX_DEPTH = 64

Rational = Fraction


class ExprError(Exception):
    """Base class for every error raised by this module."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int, expected: tuple[str, ...] = ()):
        self.position = position
        self.expected = tuple(expected)
        detail = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at position {position}{detail}")


class DisallowedConstruct(ExprError):
    pass


class DepthExceeded(ExprError):
    pass


class DivisionByZero(ExprError, ZeroDivisionError):
    pass


class UnboundVariable(ExprError, KeyError):
    def __str__(self) -> str:
        return f"unbound variable {self.args[0]!r}"


class NotCountdownExpr(ExprError, ValueError):
    """Raised when exact evaluation meets a variable, function or power."""


class _DomainFault:
    """Marker returned by real evaluation outside an operation's domain."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "DOMAIN_FAULT"

    def __bool__(self) -> bool:
        return False


DOMAIN_FAULT = _DomainFault()


# --------------------------------------------------------------------------- nodes


@dataclass(frozen=True)
class Int:
    value: int

    def __post_init__(self):
        if not isinstance(self.value, int) or isinstance(self.value, bool) or self.value < 0:
            raise ValueError(f"integer literal must be a non-negative int, got {self.value!r}")


@dataclass(frozen=True)
class Var:
    name: str

    def __post_init__(self):
        if not _IDENT_RE.fullmatch(self.name) or self.name in FUNCTIONS:
            raise ValueError(f"invalid variable name {self.name!r}")


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown operator {self.op!r}")


@dataclass(frozen=True)
class Func:
    name: str
    arg: "Expr"

    def __post_init__(self):
        if self.name not in FUNCTIONS:
            raise ValueError(f"unknown function {self.name!r}")


Expr = Union[Int, Var, Neg, BinOp, Func]


def Add(a, b):
    return BinOp("+", _lift(a), _lift(b))


def Sub(a, b):
    return BinOp("-", _lift(a), _lift(b))


def Mul(a, b):
    return BinOp("*", _lift(a), _lift(b))


def Div(a, b):
    return BinOp("/", _lift(a), _lift(b))


def Pow(a, b):
    return BinOp("^", _lift(a), _lift(b))


def Sin(a):
    return Func("sin", _lift(a))


def Cos(a):
    return Func("cos", _lift(a))


def Tan(a):
    return Func("tan", _lift(a))


def Exp(a):
    return Func("exp", _lift(a))


def Ln(a):
    return Func("ln", _lift(a))


def Sqrt(a):
    return Func("sqrt", _lift(a))


def const(n: int) -> Expr:
    """Integer constant of either sign."""
    return Int(n) if n >= 0 else Neg(Int(-n))


def _lift(x) -> Expr:
    if isinstance(x, (Int, Var, Neg, BinOp, Func)):
        return x
    if isinstance(x, int):
        return const(x)
    if isinstance(x, str):
        return Var(x)
    raise TypeError(f"cannot build an expression from {x!r}")


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, BinOp):
        return (e.left, e.right)
    if isinstance(e, (Neg,)):
        return (e.operand,)
    if isinstance(e, Func):
        return (e.arg,)
    return ()


def walk(e: Expr) -> Iterator[Expr]:
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def depth(e: Expr) -> int:
    kids = children(e)
    return 1 + (max(depth(k) for k in kids) if kids else 0)


def free_variables(e: Expr) -> frozenset[str]:
    return frozenset(n.name for n in walk(e) if isinstance(n, Var))


def integer_literals(e: Expr) -> list[int]:
    return [n.value for n in walk(e) if isinstance(n, Int)]


def substitute(e: Expr, var: str, replacement: Expr) -> Expr:
    if isinstance(e, Var):
        return replacement if e.name == var else e
    if isinstance(e, Int):
        return e
    if isinstance(e, Neg):
        return Neg(substitute(e.operand, var, replacement))
    if isinstance(e, Func):
        return Func(e.name, substitute(e.arg, var, replacement))
    return BinOp(e.op, substitute(e.left, var, replacement), substitute(e.right, var, replacement))


# --------------------------------------------------------------------------- parsing

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_TOKEN_RE = re.compile(r"\s*(?:(?P<int>[0-9]+)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^()]))")
_ALIASES = {"×": "*", "÷": "/"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    for alias, op in _ALIASES.items():
        text = text.replace(alias, op)
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None or not m.group(0).strip():
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos, ("INTEGER", "IDENT", "operator"))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, mode: str, max_depth: int):
        self.tokens = _tokenize(text)
        self.i = 0
        self.mode = mode
        self.max_depth = max_depth
        self.nesting = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.peek()
        if text != value or kind == "end":
            raise ExprSyntaxError(f"unexpected {text or 'end of input'!r}", pos, (value,))
        self.advance()

    def check_depth(self, d: int) -> int:
        if d > self.max_depth:
            raise DepthExceeded(f"expression deeper than {self.max_depth}")
        return d

    def enter(self):
        self.nesting += 1
        if self.nesting > self.max_depth:
            raise DepthExceeded(f"nesting deeper than {self.max_depth}")

    def parse(self) -> Expr:
        node, _ = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {text!r}", pos, ("+", "-", "*", "/", "end of input"))
        return node

    def expr(self):
        left, d = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.advance()[1]
            right, rd = self.term()
            left, d = BinOp(op, left, right), self.check_depth(1 + max(d, rd))
        return left, d

    def term(self):
        left, d = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.advance()[1]
            right, rd = self.factor()
            left, d = BinOp(op, left, right), self.check_depth(1 + max(d, rd))
        return left, d

    def factor(self):
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            self.enter()
            operand, d = self.factor()
            self.nesting -= 1
            return Neg(operand), self.check_depth(d + 1)
        return self.power()

    def power(self):
        base, d = self.atom()
        kind, text, pos = self.peek()
        if kind == "op" and text == "^":
            if self.mode == COUNTDOWN:
                raise DisallowedConstruct(f"'^' is not allowed in countdown mode (position {pos})")
            self.advance()
            self.enter()
            exponent, ed = self.factor()
            self.nesting -= 1
            return BinOp("^", base, exponent), self.check_depth(1 + max(d, ed))
        return base, d

    def atom(self):
        kind, text, pos = self.advance()
        if kind == "int":
            try:
                return Int(int(text)), 1
            except ValueError as exc:  # over the interpreter's digit limit
                raise ExprSyntaxError(f"integer literal too long ({exc})", pos) from None
        if kind == "ident":
            nxt = self.peek()
            if nxt[0] == "op" and nxt[1] == "(":
                if self.mode == COUNTDOWN:
                    raise DisallowedConstruct(f"function {text!r} is not allowed in countdown mode (position {pos})")
                if text not in FUNCTIONS:
                    raise DisallowedConstruct(f"unknown function {text!r} (position {pos})")
                self.advance()
                self.enter()
                arg, d = self.expr()
                self.nesting -= 1
                self.expect(")")
                return Func(text, arg), self.check_depth(d + 1)
            if self.mode == COUNTDOWN:
                raise DisallowedConstruct(f"variable {text!r} is not allowed in countdown mode (position {pos})")
            if text in FUNCTIONS:
                raise ExprSyntaxError(f"function {text!r} needs an argument", nxt[2], ("(",))
            return Var(text), 1
        if kind == "op" and text == "(":
            self.enter()
            node, d = self.expr()
            self.nesting -= 1
            self.expect(")")
            return node, d
        raise ExprSyntaxError(f"unexpected {text or 'end of input'!r}", pos, ("INTEGER", "IDENT", "(", "-"))


def parse(text: str, mode: str = INTEGRATION, max_depth: int = DEFAULT_MAX_DEPTH) -> Expr:
    """Parse ``text`` into a tree.

    ``mode`` selects the allowed constructs: countdown admits integers, the four
    arithmetic operators, unary minus and parentheses; integration adds
    variables, ``^`` and the functions in ``FUNCTIONS``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return _Parser(text, mode, max_depth).parse()


# --------------------------------------------------------------------------- printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}
_NEG_PREC = 3
_POW_PREC = 4
_ATOM_PREC = 5


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _POW_PREC if e.op == "^" else _PREC[e.op]
    if isinstance(e, Neg):
        return _NEG_PREC
    return _ATOM_PREC


def _wrap(e: Expr, min_prec: int) -> str:
    s = to_canonical_string(e)
    return f"({s})" if _prec(e) < min_prec else s


def to_canonical_string(e: Expr) -> str:
    """Minimal-parentheses infix form; ``parse`` inverts it exactly."""
    if isinstance(e, Int):
        return str(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Func):
        return f"{e.name}({to_canonical_string(e.arg)})"
    if isinstance(e, Neg):
        return "-" + _wrap(e.operand, _NEG_PREC)
    if e.op == "^":
        return _wrap(e.left, _ATOM_PREC) + "^" + _wrap(e.right, _NEG_PREC)
    p = _PREC[e.op]
    return _wrap(e.left, p) + e.op + _wrap(e.right, p + 1)


# --------------------------------------------------------------------------- evaluation


def eval_rational(e: Expr, classic: bool = False) -> Fraction:
    """Exact value of a countdown-mode tree.

    With ``classic=True`` every intermediate result must be a positive integer,
    as in the television rules; a violation raises ``NotCountdownExpr``.
    """
    if isinstance(e, Int):
        return Fraction(e.value)
    if isinstance(e, Neg):
        if classic:
            raise NotCountdownExpr("unary minus is not allowed under classic rules")
        return -eval_rational(e.operand, classic)
    if isinstance(e, BinOp) and e.op != "^":
        a = eval_rational(e.left, classic)
        b = eval_rational(e.right, classic)
        if e.op == "+":
            out = a + b
        elif e.op == "-":
            out = a - b
        elif e.op == "*":
            out = a * b
        else:
            if b == 0:
                raise DivisionByZero("division by zero")
            out = a / b
        if classic and (out.denominator != 1 or out <= 0):
            raise NotCountdownExpr(f"intermediate value {out} is not a positive integer")
        return out
    raise NotCountdownExpr(f"{type(e).__name__} node cannot be evaluated exactly")


_REAL_FUNCS = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "ln": math.log,
    "sqrt": math.sqrt,
}


def _real(e: Expr, bindings: Mapping[str, float]):
    if isinstance(e, Int):
        try:
            return float(e.value)
        except OverflowError:
            return DOMAIN_FAULT
    if isinstance(e, Var):
        try:
            return float(bindings[e.name])
        except KeyError:
            raise UnboundVariable(e.name) from None
    if isinstance(e, Neg):
        v = _real(e.operand, bindings)
        return v if v is DOMAIN_FAULT else -v
    if isinstance(e, Func):
        v = _real(e.arg, bindings)
        if v is DOMAIN_FAULT:
            return v
        if (e.name == "ln" and v <= 0) or (e.name == "sqrt" and v < 0):
            return DOMAIN_FAULT
        try:
            out = _REAL_FUNCS[e.name](v)
        except (ValueError, OverflowError):
            return DOMAIN_FAULT
    else:
        a = _real(e.left, bindings)
        b = _real(e.right, bindings)
        if a is DOMAIN_FAULT or b is DOMAIN_FAULT:
            return DOMAIN_FAULT
        try:
            if e.op == "+":
                out = a + b
            elif e.op == "-":
                out = a - b
            elif e.op == "*":
                out = a * b
            elif e.op == "/":
                if b == 0:
                    return DOMAIN_FAULT
                out = a / b
            else:
                if a < 0 and not float(b).is_integer():
                    return DOMAIN_FAULT
                out = math.pow(a, b)
        except (ValueError, OverflowError, ZeroDivisionError):
            return DOMAIN_FAULT
    return out if math.isfinite(out) else DOMAIN_FAULT


def eval_real(e: Expr, bindings: Mapping[str, float] | None = None):
    """Evaluate in IEEE doubles.

    Returns ``DOMAIN_FAULT`` (never raises) for ln/sqrt outside their domain,
    division by zero, complex powers and any non-finite intermediate.
    Raises ``UnboundVariable`` if a free variable has no binding.
    """
    return _real(e, bindings or {})


def eval_real_array(e: Expr, var: str, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``eval_real`` over one variable.

    Returns ``(values, faulted)``; values are NaN wherever ``faulted`` is set.
    A fault anywhere in a subtree faults the point, matching the scalar path
    even where IEEE arithmetic would recover a finite number (``1/(1/0)``).
    """
    xs = np.asarray(xs, dtype=float)
    with np.errstate(all="ignore"):
        vals, bad = _real_vec(e, var, xs)
    vals = np.where(bad, np.nan, vals)
    return vals, bad


def _real_vec(e: Expr, var: str, xs: np.ndarray):
    shape = xs.shape
    if isinstance(e, Int):
        try:
            v = float(e.value)
        except OverflowError:
            return np.full(shape, np.nan), np.ones(shape, bool)
        return np.full(shape, v), np.zeros(shape, bool)
    if isinstance(e, Var):
        if e.name != var:
            raise UnboundVariable(e.name)
        return xs.copy(), np.zeros(shape, bool)
    if isinstance(e, Neg):
        v, bad = _real_vec(e.operand, var, xs)
        return -v, bad
    if isinstance(e, Func):
        v, bad = _real_vec(e.arg, var, xs)
        if e.name == "ln":
            bad = bad | ~(v > 0)
            out = np.log(np.where(bad, 1.0, v))
        elif e.name == "sqrt":
            bad = bad | ~(v >= 0)
            out = np.sqrt(np.where(bad, 0.0, v))
        else:
            out = getattr(np, e.name)(v)
    else:
        a, bad_a = _real_vec(e.left, var, xs)
        b, bad_b = _real_vec(e.right, var, xs)
        bad = bad_a | bad_b
        if e.op == "+":
            out = a + b
        elif e.op == "-":
            out = a - b
        elif e.op == "*":
            out = a * b
        elif e.op == "/":
            bad = bad | (b == 0)
            out = a / np.where(b == 0, 1.0, b)
        else:
            bad = bad | ((a < 0) & (np.floor(b) != b))
            out = np.power(a, b)
    bad = bad | ~np.isfinite(out)
    return out, bad


# --------------------------------------------------------------------------- calculus


def _is_int(e: Expr, n: int) -> bool:
    return isinstance(e, Int) and e.value == n


def _const_int(e: Expr) -> int | None:
    if isinstance(e, Int):
        return e.value
    if isinstance(e, Neg) and isinstance(e.operand, Int):
        return -e.operand.value
    return None


_MAX_FOLD_BITS = 256


def simplify_basic(e: Expr) -> Expr:
    """Constant folding plus the identity rules x+0, x*1, x*0, x^1, x^0 and --x.

    Division is folded only when exact; ``x^0`` becomes 1 (x != 0 assumed).
    """
    if isinstance(e, (Int, Var)):
        return e
    if isinstance(e, Func):
        return Func(e.name, simplify_basic(e.arg))
    if isinstance(e, Neg):
        inner = simplify_basic(e.operand)
        if isinstance(inner, Neg):
            return inner.operand
        if _is_int(inner, 0):
            return inner
        return Neg(inner)

    a = simplify_basic(e.left)
    b = simplify_basic(e.right)
    ca, cb = _const_int(a), _const_int(b)
    op = e.op

    if ca is not None and cb is not None:
        folded = _fold(op, ca, cb)
        if folded is not None:
            return const(folded)

    if op == "+":
        if cb == 0:
            return a
        if ca == 0:
            return b
    elif op == "-":
        if cb == 0:
            return a
        if ca == 0:
            return simplify_basic(Neg(b))
    elif op == "*":
        if ca == 0 or cb == 0:
            return Int(0)
        if cb == 1:
            return a
        if ca == 1:
            return b
    elif op == "/":
        if cb == 1:
            return a
    else:
        if cb == 1:
            return a
        if cb == 0:
            return Int(1)
    return BinOp(op, a, b)


def _fold(op: str, a: int, b: int) -> int | None:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b != 0 and a % b == 0:
            return a // b
        return None
    if b < 0 or (a == 0 and b == 0):
        return None
    if abs(a) > 1 and b * max(abs(a).bit_length(), 1) > _MAX_FOLD_BITS:
        return None
    return a**b


def differentiate(e: Expr, var: str) -> Expr:
    """d/d``var`` by linearity, product, quotient, power and chain rules.

    The result goes through ``simplify_basic`` to keep it readable; no deeper
    algebra is attempted.
    """
    return simplify_basic(_diff(e, var))


def _diff(e: Expr, var: str) -> Expr:
    if isinstance(e, Int):
        return Int(0)
    if isinstance(e, Var):
        return Int(1 if e.name == var else 0)
    if isinstance(e, Neg):
        return Neg(_diff(e.operand, var))
    if isinstance(e, Func):
        u = e.arg
        du = _diff(u, var)
        if e.name == "sin":
            outer = Cos(u)
        elif e.name == "cos":
            outer = Neg(Sin(u))
        elif e.name == "tan":
            return Div(du, Pow(Cos(u), 2))
        elif e.name == "exp":
            outer = Exp(u)
        elif e.name == "ln":
            return Div(du, u)
        else:
            return Div(du, Mul(2, Sqrt(u)))
        return Mul(outer, du)

    u, v = e.left, e.right
    du, dv = _diff(u, var), _diff(v, var)
    if e.op == "+":
        return Add(du, dv)
    if e.op == "-":
        return Sub(du, dv)
    if e.op == "*":
        return Add(Mul(du, v), Mul(u, dv))
    if e.op == "/":
        return Div(Sub(Mul(du, v), Mul(u, dv)), Pow(v, 2))
    u_const = var not in free_variables(u)
    v_const = var not in free_variables(v)
    if v_const:
        n = _const_int(v)
        lowered = const(n - 1) if n is not None else Sub(v, 1)
        return Mul(Mul(v, Pow(u, lowered)), du)
    if u_const:
        return Mul(Mul(e, Ln(u)), dv)
    return Mul(e, Add(Mul(dv, Ln(u)), Div(Mul(v, du), u)))


# --------------------------------------------------------------------------- random trees


def random_expr(rng: np.random.Generator, mode: str = INTEGRATION, max_depth: int = 4,
                variable: str = "x", max_int: int = 9) -> Expr:
    """Grammar-random tree, used by property tests and demos.

    Countdown trees use only integer literals and + - * /; integration trees
    also draw the variable, functions and small integer powers.
    """
    if max_depth <= 1 or rng.random() < 0.25:
        if mode == INTEGRATION and rng.random() < 0.6:
            return Var(variable)
        return Int(int(rng.integers(1 if mode == COUNTDOWN else 0, max_int + 1)))
    if mode == COUNTDOWN:
        op = ("+", "-", "*", "/")[int(rng.integers(4))]
        return BinOp(op, random_expr(rng, mode, max_depth - 1, variable, max_int),
                     random_expr(rng, mode, max_depth - 1, variable, max_int))
    roll = rng.random()
    sub = lambda: random_expr(rng, mode, max_depth - 1, variable, max_int)  # noqa: E731
    if roll < 0.1:
        return Neg(sub())
    if roll < 0.35:
        return Func(FUNCTIONS[int(rng.integers(len(FUNCTIONS)))], sub())
    if roll < 0.45:
        return Pow(sub(), Int(int(rng.integers(0, 4))))
    op = ("+", "-", "*", "/")[int(rng.integers(4))]
    return BinOp(op, sub(), sub())
