"""``verigap`` command line.

Every subcommand takes ``--seed`` and ``--out``. Where a command produces a
file, ``--out`` names it (a directory for ``train``/``run``); without it,
output goes to stdout.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import countdown as cd
from . import expr as ex
from . import harness as hz
from . import integration as ig


def _emit(args, text: str) -> None:
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def _policy(args) -> cd.UsagePolicy:
    return cd.UsagePolicy(args.policy)


def _countdown_instances(args) -> list[cd.CountdownInstance]:
    if args.instances:
        return [hz.task_from_json(r) for r in hz.read_jsonl(args.instances)]
    if args.numbers is None or args.target is None:
        raise hz.ConfigError("give --instances FILE or both --numbers and --target")
    return [cd.CountdownInstance(tuple(args.numbers), args.target, "cli")]


# --------------------------------------------------------------------------- countdown


def cmd_countdown_gen(args) -> int:
    config = cd.GenerationConfig(
        count_range=(args.count, args.count) if args.count else (4, 4),
        value_range=tuple(args.values),
        target_range=tuple(args.targets),
        policy=_policy(args),
    )
    _emit(args, _jsonl(i.to_json() for i in cd.generate_instances(args.seed, args.n, config)))
    return hz.EXIT_OK


def cmd_countdown_solve(args) -> int:
    rows = []
    for inst in _countdown_instances(args):
        sol = cd.solve(inst, _policy(args))
        rows.append({"id": inst.id, "solution": None if sol is None else ex.to_canonical_string(sol)})
    _emit(args, _jsonl(rows))
    return hz.EXIT_OK


def cmd_countdown_verify(args) -> int:
    insts = _countdown_instances(args)
    if args.answers:
        answers = {r["id"]: r.get("solution", r.get("answer", "")) for r in hz.read_jsonl(args.answers)}
    elif args.answer is not None:
        answers = {i.id: args.answer for i in insts}
    else:
        raise hz.ConfigError("give --answer TEXT or --answers FILE")
    rows = []
    for inst in insts:
        rep = cd.verify_solution(inst, answers.get(inst.id) or "", _policy(args), args.classic)
        rows.append({"id": inst.id, "verdict": rep.verdict.value,
                     "failure": rep.failure.value if rep.failure else None,
                     "value": None if rep.actual is None else str(rep.actual), "detail": rep.detail})
    _emit(args, _jsonl(rows))
    return hz.EXIT_OK


def cmd_countdown_enumerate(args) -> int:
    rows = []
    for inst in _countdown_instances(args):
        sols = cd.enumerate_solutions(inst, _policy(args), args.limit)
        rows.append({"id": inst.id, "solutions": [ex.to_canonical_string(s) for s in sols]})
    _emit(args, _jsonl(rows))
    return hz.EXIT_OK


# --------------------------------------------------------------------------- integration


def cmd_integ_make_variants(args) -> int:
    if args.integrand:
        seeds = [ig.IntegrationTask.from_text(args.integrand, args.variable, id="seed-cli")]
    else:
        seeds = ig.seed_tasks(args.variable)
    tiers = tuple(range(args.max_tier + 1)) if args.tier is None else (args.tier,)
    tasks = ig.generate_curriculum(args.seed, args.count, tiers, seeds)
    _emit(args, _jsonl(t.to_json(include_reference=args.with_reference) for t in tasks))
    return hz.EXIT_OK


def cmd_integ_check(args) -> int:
    sampling = ig.Sampling(rng_seed=args.seed)
    if args.tasks:
        tasks = [hz.task_from_json(r) for r in hz.read_jsonl(args.tasks)]
        answers = {r["id"]: r.get("answer", "") for r in hz.read_jsonl(args.answers)} if args.answers else {}
        pairs = [(t, answers.get(t.id) or args.candidate or "") for t in tasks]
    else:
        if not (args.integrand and args.candidate):
            raise hz.ConfigError("give --integrand and --candidate, or --tasks FILE")
        pairs = [(ig.IntegrationTask.from_text(args.integrand, args.variable, id="cli"), args.candidate)]
    rows = []
    for task, cand in pairs:
        rep = ig.check_antiderivative(task, cand, sampling)
        rows.append({"id": task.id, "verdict": rep.verdict.value, "max_residual": rep.max_residual,
                     "points_tested": rep.points_tested, "points_faulted": rep.points_faulted,
                     "failure": rep.failure})
    _emit(args, _jsonl(rows))
    return hz.EXIT_OK


# --------------------------------------------------------------------------- judge / train / report / run


def _judge_spec(args) -> hz.JudgeSpec:
    return hz.JudgeSpec(kind=args.judge, exploit=args.exploit, template=args.template or "",
                        base_url=args.base_url or "", model=args.model, replay=args.replay or "",
                        policy=args.policy)


def cmd_judge_eval(args) -> int:
    spec = _judge_spec(args)
    items = hz.load_labeled(args.dataset)
    judge_impl = hz.build_judge(spec, "integration")
    rep = hz.judge_eval(items, judge_impl, hz.FormalJudge(cd.UsagePolicy(args.policy)))
    _emit(args, json.dumps(rep.to_json(), indent=2, sort_keys=True) + "\n")
    return hz.EXIT_OK


def _train_config(args) -> hz.ExperimentConfig:
    return hz.ExperimentConfig(
        env=args.env, mode="train", seed=args.seed, out=args.out or f"runs/{args.env}",
        judge=_judge_spec(args),
        dataset=hz.DatasetSpec(path=args.dataset or "", pool_size=args.pool_size),
        train=hz.TrainSpec(steps=args.steps, prompts_per_batch=args.prompts, group_size=args.group_size,
                           learning_rate=args.lr),
    )


def _report_run(result: hz.RunResult) -> int:
    if result.exit_code != hz.EXIT_OK:
        print(f"error: {result.message}", file=sys.stderr)
    if result.out_dir is not None:
        print(json.dumps({"out": str(result.out_dir), "exit_code": result.exit_code,
                          "detect_hacking_step": result.manifest.get("detect_hacking_step"),
                          "summary": result.manifest.get("summary") or result.manifest.get("report")},
                         indent=2, sort_keys=True))
    return result.exit_code


def cmd_train(args) -> int:
    return _report_run(hz.run(_train_config(args)))


def cmd_report(args) -> int:
    _emit(args, hz.report(args.rollouts, args.window))
    return hz.EXIT_OK


def cmd_run(args) -> int:
    config = hz.load_config(args.config)
    return _report_run(hz.run(hz.with_overrides(config, args.seed, args.out)))


def cmd_config_dump(args) -> int:
    config = hz.load_config(args.config) if args.config else hz.ExperimentConfig()
    _emit(args, hz.dump_config(hz.with_overrides(config, args.seed)))
    return hz.EXIT_OK


# --------------------------------------------------------------------------- parser


def _common(p, seed_default: int | None = 0) -> None:
    p.add_argument("--seed", type=int, default=seed_default, help="random seed")
    p.add_argument("--out", default=None, help="output file (directory for train/run); stdout if omitted")


def _instances_args(p) -> None:
    p.add_argument("--instances", help="JSONL file of countdown instances")
    p.add_argument("--numbers", type=int, nargs="+")
    p.add_argument("--target", type=int)
    p.add_argument("--policy", choices=[u.value for u in cd.UsagePolicy], default="at_most_once")


def _judge_args(p) -> None:
    p.add_argument("--judge", choices=hz.JUDGE_KINDS, default="formal")
    p.add_argument("--exploit", default="assertion", help="scripted judge predicate: assertion, claimed_evaluation, none")
    p.add_argument("--template", help="builtin template id (P1..P4, I1, I2) or a template file")
    p.add_argument("--base-url", help="chat-completion endpoint (else $VERIGAP_JUDGE_BASE_URL)")
    p.add_argument("--model", default="judge")
    p.add_argument("--replay", help="JSONL replay fixture for a remote judge")
    p.add_argument("--policy", choices=[u.value for u in cd.UsagePolicy], default="at_most_once")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="verigap", description="Self-judging RL at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    cd_p = sub.add_parser("countdown", help="Countdown instances").add_subparsers(dest="action", required=True)
    p = cd_p.add_parser("gen", help="generate solvable instances")
    _common(p)
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--count", type=int, help="numbers per instance (default 4)")
    p.add_argument("--values", type=int, nargs=2, default=(1, 99), metavar=("LO", "HI"))
    p.add_argument("--targets", type=int, nargs=2, default=(10, 999), metavar=("LO", "HI"))
    p.add_argument("--policy", choices=[u.value for u in cd.UsagePolicy], default="at_most_once")
    p.set_defaults(func=cmd_countdown_gen)
    p = cd_p.add_parser("solve", help="find one solution per instance")
    _common(p)
    _instances_args(p)
    p.set_defaults(func=cmd_countdown_solve)
    p = cd_p.add_parser("verify", help="check answers")
    _common(p)
    _instances_args(p)
    p.add_argument("--answer", help="expression text applied to every instance")
    p.add_argument("--answers", help="JSONL with id and solution/answer")
    p.add_argument("--classic", action="store_true", help="positive-integer intermediates only")
    p.set_defaults(func=cmd_countdown_verify)
    p = cd_p.add_parser("enumerate", help="list every canonical solution")
    _common(p)
    _instances_args(p)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_countdown_enumerate)

    in_p = sub.add_parser("integ", help="integration tasks").add_subparsers(dest="action", required=True)
    p = in_p.add_parser("make-variants", help="generate tiered variants")
    _common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--tier", type=int, choices=ig.TIERS)
    p.add_argument("--max-tier", type=int, default=max(ig.TIERS), choices=ig.TIERS)
    p.add_argument("--integrand", help="single seed integrand (default: builtin seeds)")
    p.add_argument("--variable", default="x")
    p.add_argument("--with-reference", action="store_true", help="include hidden reference antiderivatives")
    p.set_defaults(func=cmd_integ_make_variants)
    p = in_p.add_parser("check", help="check candidate antiderivatives")
    _common(p)
    p.add_argument("--integrand")
    p.add_argument("--candidate")
    p.add_argument("--variable", default="x")
    p.add_argument("--tasks", help="JSONL task file")
    p.add_argument("--answers", help="JSONL with id and answer")
    p.set_defaults(func=cmd_integ_check)

    j_p = sub.add_parser("judge", help="judge evaluation").add_subparsers(dest="action", required=True)
    p = j_p.add_parser("eval", help="confusion rates of a judge against the formal oracle")
    _common(p)
    p.add_argument("--dataset", default=str(Path(__file__).parent / "data" / "integration_known_answers.jsonl"))
    _judge_args(p)
    p.set_defaults(func=cmd_judge_eval)

    p = sub.add_parser("train", help="GRPO run with the toy policy")
    _common(p)
    p.add_argument("--env", choices=hz.ENVS, default="countdown")
    p.add_argument("--dataset", help="JSONL task pool (default: generated)")
    p.add_argument("--pool-size", type=int, default=64)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--prompts", type=int, default=8)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.2)
    _judge_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="metrics CSV from a rollout log")
    _common(p)
    p.add_argument("rollouts")
    p.add_argument("--window", type=int, default=20)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="execute a TOML experiment config")
    _common(p, seed_default=None)
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("config", help="print a config in canonical TOML")
    _common(p, seed_default=None)
    p.add_argument("config", nargs="?")
    p.set_defaults(func=cmd_config_dump)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except hz.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return hz.EXIT_CONFIG
    except (hz.DatasetError, cd.InstanceTooLarge, ex.ExprError, ig.UnsupportedSeed) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return hz.EXIT_DATASET
    except hz.RemoteUnavailable as exc:
        print(f"judge endpoint error: {exc}", file=sys.stderr)
        return hz.EXIT_JUDGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return hz.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
