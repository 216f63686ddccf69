"""Train the toy policy against a hackable judge and against the verifier.

The flawed judge accepts any answer that ends by asserting the target
("... = 19"). Proxy reward climbs while the formal reward collapses; the
same run scored by the verifier itself learns to solve instead.

    python3 demos/reward_hacking.py [steps]
"""
import sys

from verigap import countdown as cd
from verigap import grpo
from verigap.judge import FormalJudge, ScriptedFlawedJudge
from verigap.metrics import detect_hacking, divergence_series, rates

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 120
tasks = cd.generate_instances(0, 64)
config = grpo.TrainConfig(steps=steps)

for name, judge in (("flawed judge", ScriptedFlawedJudge("assertion")), ("formal judge", FormalJudge())):
    res = grpo.train(tasks, judge, config)
    div = divergence_series(res.series)
    print(f"== {name}")
    print(" step  proxy  formal   tnr   divergence")
    for i in range(0, len(res.series), max(1, steps // 10)):
        r = res.series.records[i]
        tnr = rates(r.confusion).tnr
        print(f"{r.step:5d}  {r.mean_proxy:5.2f}  {r.mean_formal:6.2f}  "
              f"{'  -  ' if tnr is None else f'{tnr:5.2f}'}  {'' if div[i] is None else f'{div[i]:6.2f}'}")
    probs = ", ".join(f"{a.name.lower()} {p:.2f}" for a, p in zip(grpo.Archetype, res.policy.probs))
    print(f"final policy: {probs}")
    print(f"hacking detected at step: {detect_hacking(res.series)}\n")
