"""Antiderivative tasks, the differentiate-and-compare checker, and variant generation.

Checking an antiderivative needs only differentiation and numeric sampling,
while producing one needs integration; the checker below is the cheap side.
Variants are grown from seed integrands by transformations that each carry
their own antiderivative rule, so every variant ships with a reference answer
that is kept away from agents and judges.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as ex
from .verdict import Verdict

DEFAULT_DOMAIN = (-2.0, 2.0)
TIERS = (0, 1, 2, 3)


class UnsupportedSeed(ValueError):
    pass


@dataclass(frozen=True)
class IntegrationTask:
    integrand: ex.Expr
    variable: str = "x"
    domain: tuple[float, float] = DEFAULT_DOMAIN
    difficulty: int = 0
    lineage: str | None = None
    id: str | None = None
    # Hidden reference antiderivative: tests and metrics only.
    reference: ex.Expr | None = field(default=None, repr=False, compare=False)
    transforms: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        extra = ex.free_variables(self.integrand) - {self.variable}
        if extra:
            raise ValueError(f"integrand has free variables other than {self.variable!r}: {sorted(extra)}")
        lo, hi = self.domain
        if not lo < hi:
            raise ValueError(f"empty domain {self.domain}")
        if self.difficulty not in TIERS:
            raise ValueError(f"difficulty must be one of {TIERS}")

    @classmethod
    def from_text(cls, integrand: str, variable: str = "x", **kw) -> "IntegrationTask":
        return cls(ex.parse(integrand, ex.INTEGRATION), variable, **kw)

    def to_json(self, include_reference: bool = False) -> dict:
        obj = {
            "id": self.id,
            "integrand": ex.to_canonical_string(self.integrand),
            "variable": self.variable,
            "difficulty": self.difficulty,
            "lineage": self.lineage,
        }
        if tuple(self.domain) != DEFAULT_DOMAIN:
            obj["domain"] = list(self.domain)
        if include_reference and self.reference is not None:
            obj["reference"] = ex.to_canonical_string(self.reference)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "IntegrationTask":
        ref = obj.get("reference")
        return cls(
            ex.parse(obj["integrand"], ex.INTEGRATION),
            obj.get("variable", "x"),
            tuple(obj.get("domain", DEFAULT_DOMAIN)),
            int(obj.get("difficulty", 0)),
            obj.get("lineage"),
            obj.get("id"),
            ex.parse(ref, ex.INTEGRATION) if ref else None,
        )


@dataclass(frozen=True)
class Sampling:
    n_points: int = 64
    tolerance: float = 1e-6
    rng_seed: int = 0
    abs_tolerance: float = 1e-9
    min_points: int = 16
    max_rounds: int = 4


@dataclass(frozen=True)
class AntiderivativeReport:
    verdict: Verdict
    max_residual: float
    points_tested: int
    points_faulted: int
    failure: str | None = None

    @property
    def correct(self) -> bool:
        return self.verdict is Verdict.CORRECT


def sample_points(domain: tuple[float, float], n: int, seed: int, round_: int = 0) -> np.ndarray:
    """One jittered point per equal-width stratum of the open interval."""
    lo, hi = domain
    rng = np.random.default_rng(np.random.SeedSequence([seed, round_]))
    width = (hi - lo) / n
    jitter = rng.uniform(0.05, 0.95, size=n)
    return lo + (np.arange(n) + jitter) * width


def check_antiderivative(task: IntegrationTask, candidate_text, sampling: Sampling = Sampling()) -> AntiderivativeReport:
    """Differentiate the candidate and compare with the integrand at sampled points."""
    if not isinstance(candidate_text, str):
        return AntiderivativeReport(Verdict.INCORRECT, float("inf"), 0, 0, "parse_error")
    try:
        candidate = ex.parse(candidate_text, ex.INTEGRATION)
    except ex.ExprError as exc:
        return AntiderivativeReport(Verdict.INCORRECT, float("inf"), 0, 0, f"parse_error: {exc}")
    return check_expr(task, candidate, sampling)


def check_expr(task: IntegrationTask, candidate: ex.Expr, sampling: Sampling = Sampling()) -> AntiderivativeReport:
    extra = ex.free_variables(candidate) - {task.variable}
    if extra:
        return AntiderivativeReport(Verdict.INCORRECT, float("inf"), 0, 0, f"free_variable: {sorted(extra)}")
    var = task.variable
    derivative = ex.differentiate(candidate, var)

    residuals = []
    tested = faulted = 0
    for round_ in range(sampling.max_rounds):
        xs = sample_points(task.domain, sampling.n_points, sampling.rng_seed, round_)
        f, f_bad = ex.eval_real_array(task.integrand, var, xs)
        d, d_bad = ex.eval_real_array(derivative, var, xs)
        _, c_bad = ex.eval_real_array(candidate, var, xs)
        bad = f_bad | d_bad | c_bad
        tested += len(xs)
        faulted += int(bad.sum())
        f, d = f[~bad], d[~bad]
        err = np.abs(d - f)
        scale = np.maximum(np.abs(f), np.abs(d))
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(err <= sampling.abs_tolerance, 0.0, err / scale)
        residuals.append(rel)
        if tested - faulted >= sampling.min_points:
            break

    rel = np.concatenate(residuals)
    max_residual = float(rel.max()) if rel.size else float("nan")
    if tested - faulted < sampling.min_points:
        return AntiderivativeReport(Verdict.INCONCLUSIVE, max_residual, tested, faulted, "too_few_points")
    if max_residual < sampling.tolerance:
        return AntiderivativeReport(Verdict.CORRECT, max_residual, tested, faulted)
    return AntiderivativeReport(Verdict.INCORRECT, max_residual, tested, faulted, "residual")


# --------------------------------------------------------------------------- seeds


def _linear_slope(e: ex.Expr, var: str) -> ex.Expr | None:
    """d e / d var when e is linear in var (constant, nonzero slope), else None."""
    if var not in ex.free_variables(e):
        return None
    slope = ex.differentiate(e, var)
    if var in ex.free_variables(slope) or slope == ex.Int(0):
        return None
    return slope


def _over(e: ex.Expr, slope: ex.Expr) -> ex.Expr:
    return e if slope == ex.Int(1) else ex.Div(e, slope)


def known_antiderivative(f: ex.Expr, var: str = "x") -> ex.Expr:
    """Antiderivative for the small grammar that variants are built from.

    Covers constants, sums, constant multiples and quotients, integer powers of
    a linear argument, and sin/cos/exp/sqrt/sec^2 of a linear argument.
    Anything else raises ``UnsupportedSeed``.
    """
    return ex.simplify_basic(_integrate(f, var))


def _integrate(f: ex.Expr, var: str) -> ex.Expr:
    if var not in ex.free_variables(f):
        return ex.Mul(f, ex.Var(var))
    if isinstance(f, ex.Var):
        return ex.Div(ex.Pow(f, 2), 2)
    if isinstance(f, ex.Neg):
        return ex.Neg(_integrate(f.operand, var))
    if isinstance(f, ex.BinOp):
        if f.op in "+-":
            return ex.BinOp(f.op, _integrate(f.left, var), _integrate(f.right, var))
        left_const = var not in ex.free_variables(f.left)
        right_const = var not in ex.free_variables(f.right)
        if f.op == "*" and left_const:
            return ex.Mul(f.left, _integrate(f.right, var))
        if f.op == "*" and right_const:
            return ex.Mul(_integrate(f.left, var), f.right)
        if f.op == "/" and right_const:
            return ex.Div(_integrate(f.left, var), f.right)
        if f.op == "/" and left_const and isinstance(f.right, ex.BinOp) and f.right.op == "^":
            # c / cos(L)^2
            base, power = f.right.left, f.right.right
            if isinstance(base, ex.Func) and base.name == "cos" and power == ex.Int(2):
                slope = _linear_slope(base.arg, var)
                if slope is not None:
                    return ex.Mul(f.left, _over(ex.Tan(base.arg), slope))
        if f.op == "^" and right_const:
            n = ex._const_int(f.right)
            slope = _linear_slope(f.left, var)
            if n is not None and n != -1 and slope is not None:
                return ex.Div(ex.Pow(f.left, ex.const(n + 1)), _mul_const(n + 1, slope))
    if isinstance(f, ex.Func):
        slope = _linear_slope(f.arg, var)
        if slope is not None:
            u = f.arg
            if f.name == "sin":
                return ex.Neg(_over(ex.Cos(u), slope))
            if f.name == "cos":
                return _over(ex.Sin(u), slope)
            if f.name == "exp":
                return _over(ex.Exp(u), slope)
            if f.name == "sqrt":
                return ex.Div(ex.Mul(2, ex.Pow(ex.Sqrt(u), 3)), _mul_const(3, slope))
    raise UnsupportedSeed(f"no antiderivative rule for {ex.to_canonical_string(f)}")


def _mul_const(n: int, slope: ex.Expr) -> ex.Expr:
    return ex.simplify_basic(ex.Mul(ex.const(n), slope))


SEED_INTEGRANDS = (
    "1",
    "x",
    "x^2",
    "x^3",
    "3*x^2-2*x",
    "x^2+x+1",
    "sin(x)",
    "cos(x)",
    "exp(x)",
    "sin(x)+cos(x)",
    "exp(2*x)",
    "sqrt(x+3)",
    "1/cos(x)^2",
    "2*x+1",
)


def seed_tasks(variable: str = "x") -> list[IntegrationTask]:
    tasks = []
    for i, text in enumerate(SEED_INTEGRANDS):
        f = ex.parse(text.replace("x", variable) if variable != "x" else text, ex.INTEGRATION)
        tasks.append(IntegrationTask(f, variable, id=f"seed-{i:02d}", reference=known_antiderivative(f, variable)))
    return tasks


# --------------------------------------------------------------------------- variants
#
# A transformation maps (integrand, antiderivative) to a new pair whose
# antiderivative relation holds by construction.

_SCALES = (2, 3, 4, 5, 6, 7, 8, 9, -1, -2, -3)


def _t_identity(f, F, var, rng):
    return f, F


def _t_scale(f, F, var, rng):
    k = ex.const(int(rng.choice(_SCALES)))
    return ex.Mul(k, f), ex.Mul(k, F)


def _t_linear(f, F, var, rng):
    a = int(rng.integers(2, 6))
    b = int(rng.integers(-3, 4))
    ax = ex.Mul(a, ex.Var(var))
    inner = ax if b == 0 else ex.Add(ax, b) if b > 0 else ex.Sub(ax, -b)
    return ex.substitute(f, var, inner), ex.Div(ex.substitute(F, var, inner), a)


def _basic_term(var, rng):
    c = int(rng.choice((1, 2, 3, 4, 5, -1, -2, -3)))
    x = ex.Var(var)
    kind = int(rng.integers(4))
    if kind == 0:
        n = int(rng.integers(0, 4))
        g = ex.Pow(x, n)
        G = ex.Div(ex.Pow(x, n + 1), n + 1)
    elif kind == 1:
        g, G = ex.Sin(x), ex.Neg(ex.Cos(x))
    elif kind == 2:
        g, G = ex.Cos(x), ex.Sin(x)
    else:
        g, G = ex.Exp(x), ex.Exp(x)
    return c, g, G


def _t_add_term(f, F, var, rng):
    c, g, G = _basic_term(var, rng)
    if c < 0:
        return ex.Sub(f, ex.Mul(-c, g)), ex.Sub(F, ex.Mul(-c, G))
    return ex.Add(f, ex.Mul(c, g)), ex.Add(F, ex.Mul(c, G))


def _t_wrap_sin(f, F, var, rng):
    return ex.Mul(ex.Cos(F), f), ex.Sin(F)


def _t_wrap_exp(f, F, var, rng):
    return ex.Mul(ex.Exp(F), f), ex.Exp(F)


def _t_wrap_ln(f, F, var, rng):
    # ln(F^2 + 1) keeps the logarithm's argument positive everywhere
    return ex.Div(ex.Mul(ex.Mul(2, F), f), ex.Add(ex.Pow(F, 2), 1)), ex.Ln(ex.Add(ex.Pow(F, 2), 1))


TRANSFORMS = {
    0: {"identity": _t_identity, "scale": _t_scale},
    1: {"linear": _t_linear},
    2: {"add_term": _t_add_term},
    3: {"wrap_sin": _t_wrap_sin, "wrap_exp": _t_wrap_exp, "wrap_ln": _t_wrap_ln},
}

# exp(F) overflows quickly; only wrap when F stays small on the domain
_EXP_WRAP_LIMIT = 20.0


def _bounded(F: ex.Expr, var: str, domain, limit: float) -> bool:
    xs = np.linspace(domain[0], domain[1], 41)[1:-1]
    vals, bad = ex.eval_real_array(F, var, xs)
    good = vals[~bad]
    return good.size > 0 and float(np.max(np.abs(good))) <= limit


def generate_variants(seed_task: IntegrationTask, difficulty: int, count: int, rng,
                      transforms: tuple[str, ...] | None = None) -> list[IntegrationTask]:
    """Grow ``count`` variants of ``seed_task`` at the given difficulty tier.

    Tier t applies one transformation from each of tiers 0..t in order: a
    coefficient change (or identity), a linear inner substitution, an added
    basic term, then a sin/exp/ln wrapper. ``transforms`` restricts which named
    transformations may be drawn at each stage. Deterministic given ``rng``.
    """
    if difficulty not in TIERS:
        raise ValueError(f"difficulty must be one of {TIERS}")
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(rng)
    var = seed_task.variable
    F0 = seed_task.reference if seed_task.reference is not None else known_antiderivative(seed_task.integrand, var)
    f0 = seed_task.integrand

    stages = []
    for tier in range(difficulty + 1):
        names = [n for n in TRANSFORMS[tier] if transforms is None or n in transforms]
        if not names:
            raise ValueError(f"no allowed transformation for tier {tier}")
        stages.append(names)

    out = []
    for i in range(count):
        f, F = f0, F0
        applied = []
        for tier, names in enumerate(stages):
            name = names[int(rng.integers(len(names)))]
            if name == "wrap_exp" and not _bounded(F, var, seed_task.domain, _EXP_WRAP_LIMIT):
                name = "wrap_sin" if transforms is None or "wrap_sin" in transforms else name
            f, F = TRANSFORMS[tier][name](f, F, var, rng)
            applied.append(name)
        base_id = seed_task.id or "task"
        out.append(replace(
            seed_task,
            integrand=ex.simplify_basic(f),
            reference=ex.simplify_basic(F),
            difficulty=difficulty,
            lineage=seed_task.id,
            id=f"{base_id}-t{difficulty}-{i:05d}",
            transforms=tuple(applied),
        ))
    return out


def generate_curriculum(seed: int, count: int, tiers=TIERS, seeds: list[IntegrationTask] | None = None) -> list[IntegrationTask]:
    """``count`` variants spread round-robin over seed tasks and tiers."""
    seeds = seeds if seeds is not None else seed_tasks()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        s = seeds[i % len(seeds)]
        tier = tiers[(i // len(seeds)) % len(tiers)]
        v = generate_variants(s, tier, 1, rng)[0]
        out.append(replace(v, id=f"var-{i:05d}"))
    return out
