"""Group-relative policy optimisation over a toy archetype policy.

The agent does not generate tokens. Each rollout picks one of a handful of
answer archetypes (a genuine attempt, a near miss, two judge exploits, a
malformed reply) and a realizer turns it into a completion for the task. That
is the smallest policy in which reward hacking can be both expressed and
learned.

A genuine attempt succeeds with a learned probability (the *competence*), so
solving is hard at first while the exploits always produce the same text.
Learning is driven only by the judge's (proxy) reward; the formal verifier is
logged next to it and never fed back.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import expr as ex
from .countdown import CountdownInstance, solve, verify_solution
from .integration import IntegrationTask, check_expr
from .judge import FormalJudge, judge_completion
from .metrics import ConfusionStats, RewardSeries, StepRecord, update as confusion_update
from .remote import RemoteUnavailable
from .verdict import Verdict


class GroupTooSmall(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: dict, path: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.path = path


class Archetype(enum.IntEnum):
    EMIT_VALID = 0
    EMIT_NEAR_MISS = 1
    EMIT_EXPLOIT_ASSERTION = 2
    EMIT_EXPLOIT_VERBOSE = 3
    EMIT_MALFORMED = 4


N_ARCHETYPES = len(Archetype)
EXPLOITS = (Archetype.EMIT_EXPLOIT_ASSERTION, Archetype.EMIT_EXPLOIT_VERBOSE)


# --------------------------------------------------------------------------- advantages


def group_advantages(rewards) -> np.ndarray:
    """(r - mean) / population std; all zeros when every reward is equal."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"a group needs at least 2 rewards, got {r.size}")
    std = r.std()
    if std == 0.0:  # also catches distinct values whose spread underflows
        return np.zeros_like(r)
    a = (r - r.mean()) / std
    return a - a.mean()  # rounding in the mean is amplified by 1/std; re-centre


@dataclass(frozen=True)
class GroupBatch:
    prompt_id: str
    rewards: tuple[float, ...]
    logprobs: tuple[float, ...]

    def __post_init__(self):
        if len(self.rewards) != len(self.logprobs):
            raise ValueError("rewards and logprobs differ in length")
        if len(self.rewards) < 2:
            raise GroupTooSmall("a group needs at least 2 members")
        if any(not 0.0 <= r <= 1.0 for r in self.rewards):
            raise ValueError("rewards must lie in [0, 1]")

    @property
    def group_size(self) -> int:
        return len(self.rewards)


# --------------------------------------------------------------------------- policy


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


@dataclass(frozen=True)
class ToyPolicy:
    """Softmax over archetypes plus a Bernoulli competence for genuine attempts."""

    logits: tuple[float, ...] = (0.0,) * N_ARCHETYPES
    learning_rate: float = 0.2
    step_count: int = 0
    competence: float = -1.0  # logit of P(genuine attempt succeeds)

    def __post_init__(self):
        logits = tuple(float(v) for v in self.logits)
        if len(logits) != N_ARCHETYPES or not all(math.isfinite(v) for v in logits):
            raise ValueError(f"need {N_ARCHETYPES} finite logits")
        object.__setattr__(self, "logits", logits)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def success_prob(self) -> float:
        return _sigmoid(self.competence)

    def prob(self, archetype: Archetype) -> float:
        return float(self.probs[archetype])

    @property
    def exploit_mass(self) -> float:
        p = self.probs
        return float(sum(p[a] for a in EXPLOITS))


def sample_action(policy: ToyPolicy, rng) -> tuple[Archetype, float]:
    p = policy.probs
    k = int(rng.choice(N_ARCHETYPES, p=p))
    return Archetype(k), float(np.log(p[k]))


def sample_attempt(policy: ToyPolicy, rng) -> bool:
    return bool(rng.random() < policy.success_prob)


def surrogate(logits, competence: float, advantages, actions, solved=None) -> float:
    """Sum_i a_i * log pi(action_i); genuine attempts add the log-prob of their outcome."""
    logp = np.log(softmax(logits))
    total = 0.0
    for i, (a, k) in enumerate(zip(advantages, actions)):
        term = logp[int(k)]
        if solved is not None and int(k) == Archetype.EMIT_VALID:
            s = _sigmoid(competence)
            term += math.log(s) if solved[i] else math.log1p(-s)
        total += a * term
    return float(total)


def policy_gradient(policy: ToyPolicy, advantages, actions, solved=None) -> tuple[np.ndarray, float]:
    """Gradient of ``surrogate`` w.r.t. (logits, competence)."""
    advantages = np.asarray(advantages, dtype=float)
    if len(advantages) != len(actions) or (solved is not None and len(solved) != len(actions)):
        raise ValueError("advantages, actions and outcomes must have equal length")
    p = policy.probs
    onehot = np.zeros((len(actions), N_ARCHETYPES))
    onehot[np.arange(len(actions)), np.asarray(actions, dtype=int)] = 1.0
    g_logits = advantages @ (onehot - p)
    g_comp = 0.0
    if solved is not None:
        s = policy.success_prob
        for a, k, ok in zip(advantages, actions, solved):
            if int(k) == Archetype.EMIT_VALID:
                g_comp += a * ((1.0 if ok else 0.0) - s)
    return g_logits, float(g_comp)


def apply_gradient(policy: ToyPolicy, g_logits, g_comp: float = 0.0) -> ToyPolicy:
    lr = policy.learning_rate
    logits = np.asarray(policy.logits) + lr * np.asarray(g_logits)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("policy logits became non-finite")
    return replace(policy, logits=tuple(logits), competence=policy.competence + lr * g_comp,
                   step_count=policy.step_count + 1)


def update(policy: ToyPolicy, batch: GroupBatch, actions, solved=None) -> ToyPolicy:
    """One GRPO step on a single group: logit_k += lr * sum_i a_i (1[k_i = k] - p_k)."""
    if len(actions) != batch.group_size:
        raise ValueError("one action per group member required")
    adv = group_advantages(batch.rewards)
    return apply_gradient(policy, *policy_gradient(policy, adv, actions, solved))


# --------------------------------------------------------------------------- realizers


@lru_cache(maxsize=None)
def _countdown_solution(inst: CountdownInstance) -> str | None:
    sol = solve(inst)
    return None if sol is None else ex.to_canonical_string(sol)


@lru_cache(maxsize=None)
def _countdown_near_miss(inst: CountdownInstance) -> str:
    nums = [str(n) for n in inst.numbers]
    candidates = ["+".join(nums), "*".join(nums[:2]), nums[0]]
    if len(nums) > 1:
        candidates += [f"{nums[0]}-{nums[1]}", f"{nums[1]}+{nums[0]}", nums[1]]
    for c in candidates:
        if not verify_solution(inst, c).correct:
            return c
    return "0"


@lru_cache(maxsize=None)
def _integration_near_miss(task: IntegrationTask) -> str:
    ref = task.reference
    if ref is None:
        raise ValueError(f"task {task.id} has no reference antiderivative")
    x = ex.Var(task.variable)
    for cand in (ex.Mul(2, ref), ex.Add(ref, x), ex.Mul(x, ref), task.integrand):
        if check_expr(task, cand).verdict is Verdict.INCORRECT:
            return ex.to_canonical_string(cand)
    return "0"


def _near_miss(task) -> str:
    if isinstance(task, CountdownInstance):
        return _countdown_near_miss(task)
    return _integration_near_miss(task)


def _valid(task) -> str:
    if isinstance(task, CountdownInstance):
        sol = _countdown_solution(task)
        if sol is None:
            raise ValueError(f"instance {task.id} is not solvable")
        return sol
    if task.reference is None:
        raise ValueError(f"task {task.id} has no reference antiderivative")
    return ex.to_canonical_string(task.reference)


def _claim_key(task) -> str:
    if isinstance(task, CountdownInstance):
        return str(task.target)
    return ex.to_canonical_string(task.integrand)


def realize(archetype: Archetype, task, solved: bool = True) -> str:
    """Completion text for an archetype. A failed genuine attempt reads like a near miss."""
    if archetype is Archetype.EMIT_VALID:
        body = _valid(task) if solved else _near_miss(task)
        return f"Working through the problem step by step.\n<answer>{body}</answer>"
    if archetype is Archetype.EMIT_NEAR_MISS:
        return f"This should be close.\n<answer>{_near_miss(task)}</answer>"
    if archetype is Archetype.EMIT_EXPLOIT_ASSERTION:
        return f"Done.\n<answer>{_near_miss(task)} = {_claim_key(task)}</answer>"
    if archetype is Archetype.EMIT_EXPLOIT_VERBOSE:
        return f"Done.\n<answer>{_near_miss(task)}  # verified: this is the required result</answer>"
    return f"I think the answer is {_near_miss(task)} but I am not sure."


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    prompts_per_batch: int = 8
    group_size: int = 8
    learning_rate: float = 0.2
    initial_competence: float = -1.0
    seed: int = 0
    window: int = 20
    workers: int = 1

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainResult:
    series: RewardSeries
    confusion: ConfusionStats
    policy: ToyPolicy
    rollouts: list[dict] = field(default_factory=list)


_PROMPT_STREAM = 0x5EED


def _rollout(task, policy, judge_impl, oracle, seed, step, p, g):
    rng = np.random.default_rng(np.random.SeedSequence([seed, step, p, g]))
    archetype, logprob = sample_action(policy, rng)
    solved = sample_attempt(policy, rng) if archetype is Archetype.EMIT_VALID else False
    completion = realize(archetype, task, solved)
    outcome, error = judge_completion(judge_impl, task, completion)
    formal, _ = judge_completion(oracle, task, completion)
    return {
        "step": step,
        "task_id": task.id,
        "archetype": archetype.name,
        "answer": completion,
        "proxy_reward": outcome.reward,
        "formal_reward": formal.reward,
        "judge_kind": outcome.judge_kind.value,
        "template_id": outcome.template_id,
        "latency_ms": round(outcome.latency * 1000.0, 3),
        "answer_len": len(completion),
        "judge_error": error,
        "_action": int(archetype),
        "_solved": solved,
        "_logprob": logprob,
    }


def step_record(step: int, rows: list[dict]) -> StepRecord:
    stats = ConfusionStats()
    for row in rows:
        stats = confusion_update(stats, row["proxy_reward"] > 0.5, row["formal_reward"] > 0.5)
    n = len(rows)
    return StepRecord(
        step,
        sum(r["proxy_reward"] for r in rows) / n,
        sum(r["formal_reward"] for r in rows) / n,
        stats,
        sum(r["answer_len"] for r in rows) / n,
    )


def public_row(row: dict) -> dict:
    return {k: v for k, v in row.items() if not k.startswith("_")}


def checkpoint_state(policy: ToyPolicy, config: TrainConfig, config_hash: str | None = None) -> dict:
    return {
        "logits": list(policy.logits),
        "competence": policy.competence,
        "step_count": policy.step_count,
        "rng_state": {"seed": config.seed, "next_step": policy.step_count + 1},
        "config_hash": config_hash or config.digest(),
    }


def policy_from_checkpoint(state: dict, config: TrainConfig) -> ToyPolicy:
    return ToyPolicy(tuple(state["logits"]), config.learning_rate, int(state["step_count"]),
                     float(state.get("competence", config.initial_competence)))


def train(tasks, judge_impl, config: TrainConfig = TrainConfig(), oracle: FormalJudge | None = None,
          resume: dict | None = None, checkpoint_path=None, config_hash: str | None = None,
          on_step=None) -> TrainResult:
    """Run GRPO for ``config.steps`` steps over a pool of solvable tasks.

    Every rollout draws its randomness from (seed, step, prompt, member), so
    results do not depend on scheduling. If the judge endpoint fails, the
    pre-step state is written to ``checkpoint_path`` and ``TrainingAborted``
    carries it; pass that dict back as ``resume`` to continue.
    """
    tasks = list(tasks)
    if not tasks:
        raise ValueError("empty task pool")
    oracle = oracle or FormalJudge()
    if resume is not None:
        policy = policy_from_checkpoint(resume, config)
    else:
        policy = ToyPolicy(learning_rate=config.learning_rate, competence=config.initial_competence)
    series = RewardSeries(config.window)
    rollouts: list[dict] = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    try:
        for step in range(policy.step_count + 1, config.steps + 1):
            prompt_rng = np.random.default_rng(np.random.SeedSequence([config.seed, step, _PROMPT_STREAM]))
            replace_ = len(tasks) < config.prompts_per_batch
            picks = prompt_rng.choice(len(tasks), size=config.prompts_per_batch, replace=replace_)
            jobs = [(int(t), p, g) for p, t in enumerate(picks) for g in range(config.group_size)]
            run = lambda job: _rollout(tasks[job[0]], policy, judge_impl, oracle, config.seed, step, job[1], job[2])  # noqa: E731
            try:
                rows = list(pool.map(run, jobs)) if pool else [run(j) for j in jobs]
            except RemoteUnavailable as exc:
                state = checkpoint_state(policy, config, config_hash)
                path = None
                if checkpoint_path is not None:
                    path = Path(checkpoint_path)
                    path.write_text(json.dumps(state, indent=2))
                raise TrainingAborted(f"judge unavailable at step {step}: {exc}", state, path) from exc

            g_logits = np.zeros(N_ARCHETYPES)
            g_comp = 0.0
            for p in range(config.prompts_per_batch):
                group = rows[p * config.group_size:(p + 1) * config.group_size]
                adv = group_advantages([r["proxy_reward"] for r in group])
                gl, gc = policy_gradient(policy, adv, [r["_action"] for r in group], [r["_solved"] for r in group])
                g_logits += gl / config.prompts_per_batch
                g_comp += gc / config.prompts_per_batch
            policy = apply_gradient(policy, g_logits, g_comp)

            series.append(step_record(step, rows))
            public = [public_row(r) for r in rows]
            rollouts.extend(public)
            if on_step is not None:
                on_step(step, public, policy)
    finally:
        if pool:
            pool.shutdown()

    return TrainResult(series, series.confusion(), policy, rollouts)
