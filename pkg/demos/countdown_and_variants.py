"""Tour of the two verifiable environments.

Solves and checks a Countdown instance, then grows integration variants from
one seed and checks a right and a wrong antiderivative for each.

    python3 demos/countdown_and_variants.py
"""
import numpy as np

from verigap import countdown as cd
from verigap import expr as ex
from verigap import integration as ig

inst = cd.CountdownInstance((2, 3, 5, 7), 19)
print(f"numbers {inst.numbers}, target {inst.target}")
for sol in cd.enumerate_solutions(inst):
    print("  solution:", ex.to_canonical_string(sol))
for answer in ("(7*3)-2", "(7*7)-2", "7*3", "5/(3-3)"):
    rep = cd.verify_solution(inst, answer)
    print(f"  {answer:10s} -> {rep.verdict.value:9s} {rep.failure.value if rep.failure else ''}")

print()
rng = np.random.default_rng(0)
seed = next(t for t in ig.seed_tasks() if ex.to_canonical_string(t.integrand) == "sin(x)")
for tier in ig.TIERS:
    v = ig.generate_variants(seed, tier, 1, rng)[0]
    wrong = ex.Mul(2, v.reference)
    good, bad = ig.check_expr(v, v.reference), ig.check_expr(v, wrong)
    print(f"tier {tier}: integrate {ex.to_canonical_string(v.integrand)}")
    print(f"    reference {ex.to_canonical_string(v.reference)} -> {good.verdict.value} "
          f"(max residual {good.max_residual:.1e})")
    print(f"    doubled reference -> {bad.verdict.value} (max residual {bad.max_residual:.2f})")
