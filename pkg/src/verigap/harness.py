"""Experiment orchestration: configs, datasets, judge evaluation and training runs.

A run reads one TOML config, derives every random stream from its single seed,
and writes into an output directory it locks for itself:

    tasks.jsonl      the task pool used
    rollouts.jsonl   one record per judged episode
    metrics.csv      per-step rewards, judge rates and divergence
    checkpoint.json  final (or last good) policy state
    manifest.json    config, config hash, artifact digests, hacking onset
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import tomli
import tomli_w

from . import countdown as cd
from . import integration as ig
from .grpo import TrainConfig, TrainingAborted, checkpoint_state, train
from .judge import DEFAULT_SYSTEM_PROMPT, FormalJudge, RemoteJudge, ScriptedFlawedJudge, judge_completion, load_template
from .metrics import (ConfusionStats, detect_hacking, divergence, InsufficientHistory, rates,
                      series_from_rollouts, series_to_csv, update)
from .remote import HttpTransport, RemoteUnavailable, ReplayTransport

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_JUDGE = 3
EXIT_DATASET = 4

ENVS = ("countdown", "integration")
JUDGE_KINDS = ("formal", "scripted", "remote")
MODES = ("train", "judge_eval")


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class JudgeSpec:
    kind: str = "formal"
    exploit: str = "assertion"
    template: str = ""
    base_url: str = ""
    model: str = "judge"
    replay: str = ""
    system_prompt: str = ""
    policy: str = "at_most_once"


@dataclass(frozen=True)
class DatasetSpec:
    path: str = ""
    pool_size: int = 64


@dataclass(frozen=True)
class TrainSpec:
    steps: int = 300
    prompts_per_batch: int = 8
    group_size: int = 8
    learning_rate: float = 0.2
    initial_competence: float = -1.0
    window: int = 20
    workers: int = 1
    hack_threshold: float = 0.5
    hack_patience: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "countdown"
    mode: str = "train"
    seed: int = 0
    out: str = "runs/experiment"
    judge: JudgeSpec = JudgeSpec()
    dataset: DatasetSpec = DatasetSpec()
    train: TrainSpec = TrainSpec()

    def validate(self) -> "ExperimentConfig":
        if self.env not in ENVS:
            raise ConfigError(f"env must be one of {ENVS}, got {self.env!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.judge.kind not in JUDGE_KINDS:
            raise ConfigError(f"judge.kind must be one of {JUDGE_KINDS}, got {self.judge.kind!r}")
        if self.judge.kind == "remote" and not self.judge.template:
            raise ConfigError("a remote judge needs judge.template")
        if self.mode == "judge_eval" and not self.dataset.path:
            raise ConfigError("judge_eval mode needs dataset.path")
        t = self.train
        if t.steps < 0 or t.prompts_per_batch < 1 or t.group_size < 2 or t.window < 1:
            raise ConfigError("train: steps >= 0, prompts_per_batch >= 1, group_size >= 2, window >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.steps, t.prompts_per_batch, t.group_size, t.learning_rate, t.initial_competence,
                           substream(self.seed, "train"), t.window, t.workers)


def _section(cls, data: dict, name: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    out = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if isinstance(default, bool) or not isinstance(value, type(default)):
            if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            else:
                raise ConfigError(f"[{name}] {key} should be {type(default).__name__}, got {value!r}")
        out[key] = value
    return cls(**out)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    sections = {
        "judge": _section(JudgeSpec, data.pop("judge", {}), "judge"),
        "dataset": _section(DatasetSpec, data.pop("dataset", {}), "dataset"),
        "train": _section(TrainSpec, data.pop("train", {}), "train"),
    }
    top = _section(_TopLevel, data, "top level")
    return ExperimentConfig(top.env, top.mode, top.seed, top.out, **sections).validate()


@dataclass(frozen=True)
class _TopLevel:
    env: str = "countdown"
    mode: str = "train"
    seed: int = 0
    out: str = "runs/experiment"


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def dump_config(config: ExperimentConfig) -> str:
    return tomli_w.dumps(config.to_dict())


def substream(seed: int, name: str) -> int:
    """Named, independent child seed of the run seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# --------------------------------------------------------------------------- datasets


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return rows


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def task_from_json(obj: dict):
    try:
        if "numbers" in obj:
            return cd.CountdownInstance.from_json(obj)
        return ig.IntegrationTask.from_json(obj)
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError(f"bad task record {obj.get('id')!r}: {exc}") from None


def task_to_json(task, include_reference: bool = True) -> dict:
    if isinstance(task, cd.CountdownInstance):
        return task.to_json()
    return task.to_json(include_reference=include_reference)


def load_tasks(config: ExperimentConfig) -> list:
    if config.dataset.path:
        tasks = [task_from_json(row) for row in read_jsonl(config.dataset.path)]
        if not tasks:
            raise DatasetError(f"dataset {config.dataset.path} is empty")
        for t in tasks:
            if config.env == "countdown" and not isinstance(t, cd.CountdownInstance):
                raise DatasetError("countdown env needs countdown tasks")
            if config.env == "integration" and (not isinstance(t, ig.IntegrationTask) or t.reference is None):
                raise DatasetError("integration env needs tasks with a reference antiderivative")
        return tasks
    seed = substream(config.seed, "dataset")
    if config.env == "countdown":
        return cd.generate_instances(seed, config.dataset.pool_size)
    return ig.generate_curriculum(seed, config.dataset.pool_size)


@dataclass(frozen=True)
class LabeledItem:
    task: object
    completion: str


def load_labeled(path) -> list[LabeledItem]:
    """Tasks paired with answers. ``completion`` is judged as-is; a bare ``answer`` is wrapped in tags."""
    items = []
    for row in read_jsonl(path):
        task = task_from_json(row)
        if "completion" in row:
            completion = row["completion"]
        elif "answer" in row:
            completion = f"<answer>{row['answer']}</answer>"
        else:
            raise DatasetError(f"record {row.get('id')!r} has neither completion nor answer")
        items.append(LabeledItem(task, completion))
    return items


# --------------------------------------------------------------------------- judges


def build_judge(spec: JudgeSpec, env: str):
    policy = cd.UsagePolicy(spec.policy)
    formal = FormalJudge(policy)
    if spec.kind == "formal":
        return formal
    if spec.kind == "scripted":
        try:
            return ScriptedFlawedJudge(spec.exploit, formal)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
    try:
        template = load_template(spec.template)
    except (KeyError, OSError, ValueError) as exc:
        raise ConfigError(f"judge template: {exc}") from None
    if spec.replay:
        if not Path(spec.replay).is_file():
            raise ConfigError(f"replay fixture not found: {spec.replay}")
        transport = ReplayTransport.load(spec.replay)
    else:
        try:
            transport = HttpTransport(spec.base_url or None)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return RemoteJudge(template, transport, spec.model, spec.system_prompt or DEFAULT_SYSTEM_PROMPT)


def is_deterministic(spec: JudgeSpec) -> bool:
    return spec.kind != "remote" or bool(spec.replay)


# --------------------------------------------------------------------------- judge evaluation


@dataclass
class JudgeEvalReport:
    confusion: ConfusionStats
    rows: list[dict] = field(default_factory=list)

    @property
    def rates(self):
        return rates(self.confusion)

    def to_json(self) -> dict:
        return {"confusion": self.confusion.to_json(), "rates": self.rates._asdict(), "n": self.confusion.total}


def judge_eval(items: Iterable[LabeledItem], judge_impl, oracle: FormalJudge | None = None) -> JudgeEvalReport:
    """Judge every item and score the judge against the formal verdict."""
    oracle = oracle or FormalJudge()
    stats = ConfusionStats()
    rows = []
    for item in items:
        outcome, error = judge_completion(judge_impl, item.task, item.completion)
        formal, _ = judge_completion(oracle, item.task, item.completion)
        stats = update(stats, outcome.verdict, formal.verdict)
        rows.append({
            "task_id": item.task.id,
            "judge": outcome.verdict.value,
            "oracle": formal.verdict.value,
            "judge_error": error,
            "raw_response": outcome.raw_response,
        })
    return JudgeEvalReport(stats, rows)


def make_known_answer_fixture(seed: int = 2025, n: int = 200) -> list[dict]:
    """Alternating reference and wrong antiderivatives over distinct integrands."""
    rows, seen = [], set()
    for task in ig.generate_curriculum(seed, 8 * n):
        key = ig.ex.to_canonical_string(task.integrand)
        if key in seen:
            continue
        seen.add(key)
        ref = task.reference
        if len(rows) % 2 == 0:
            answer, label = ref, "correct"
        else:
            x = ig.ex.Var(task.variable)
            answer = next(c for c in (ig.ex.Mul(2, ref), ig.ex.Add(ref, x), ig.ex.Mul(x, ref))
                          if ig.check_expr(task, c).verdict is ig.Verdict.INCORRECT)
            label = "incorrect"
        row = task.to_json()
        row["answer"] = ig.ex.to_canonical_string(answer)
        row["label"] = label
        rows.append(row)
        if len(rows) == n:
            return rows
    raise DatasetError(f"only {len(rows)} distinct integrands available for the fixture")


# --------------------------------------------------------------------------- runs


def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunResult:
    exit_code: int
    out_dir: Path | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    message: str = ""
    manifest: dict = field(default_factory=dict)


class _DirLock:
    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory is locked by another run: {self.path}") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _write(out: Path, name: str, text: str, artifacts: dict) -> None:
    data = text.encode("utf-8")
    (out / name).write_bytes(data)
    artifacts[name] = git_blob_sha1(data)


def run(config: ExperimentConfig) -> RunResult:
    """Execute a config end to end. Never raises for expected failures; see ``exit_code``."""
    try:
        config.validate()
        judge_impl = build_judge(config.judge, config.env)
    except ConfigError as exc:
        return RunResult(EXIT_CONFIG, message=str(exc))
    try:
        if config.mode == "judge_eval":
            items = load_labeled(config.dataset.path)
        else:
            tasks = load_tasks(config)
    except DatasetError as exc:
        return RunResult(EXIT_DATASET, message=str(exc))

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with _DirLock(out):
            if config.mode == "judge_eval":
                return _run_judge_eval(config, judge_impl, items, out)
            return _run_train(config, judge_impl, tasks, out)
    except ConfigError as exc:
        return RunResult(EXIT_CONFIG, message=str(exc))


def _manifest(config: ExperimentConfig, artifacts: dict, **extra) -> dict:
    return {
        "config": config.to_dict(),
        "config_hash": config.digest(),
        "reproducible": is_deterministic(config.judge),
        "artifacts": dict(sorted(artifacts.items())),
        **extra,
    }


def _finish(config, out, artifacts, exit_code, message="", **extra) -> RunResult:
    manifest = _manifest(config, artifacts, status="ok" if exit_code == EXIT_OK else "aborted", **extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(exit_code, out, artifacts, message, manifest)


def _run_judge_eval(config, judge_impl, items, out: Path) -> RunResult:
    artifacts: dict[str, str] = {}
    try:
        report = judge_eval(items, judge_impl, FormalJudge(cd.UsagePolicy(config.judge.policy)))
    except RemoteUnavailable as exc:
        return _finish(config, out, artifacts, EXIT_JUDGE, str(exc))
    _write(out, "judge_eval.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in report.rows), artifacts)
    _write(out, "report.json", json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", artifacts)
    return _finish(config, out, artifacts, EXIT_OK, report=report.to_json())


def _run_train(config, judge_impl, tasks, out: Path) -> RunResult:
    artifacts: dict[str, str] = {}
    _write(out, "tasks.jsonl", "".join(json.dumps(task_to_json(t), sort_keys=True) + "\n" for t in tasks), artifacts)
    tc = config.train_config()
    oracle = FormalJudge(cd.UsagePolicy(config.judge.policy))
    try:
        result = train(tasks, judge_impl, tc, oracle=oracle, config_hash=config.digest())
    except TrainingAborted as exc:
        _write(out, "checkpoint.json", json.dumps(exc.checkpoint, indent=2, sort_keys=True) + "\n", artifacts)
        return _finish(config, out, artifacts, EXIT_JUDGE, str(exc))

    rollouts = "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.rollouts)
    _write(out, "rollouts.jsonl", rollouts, artifacts)
    series = series_from_rollouts(result.rollouts, config.train.window)
    _write(out, "metrics.csv", series_to_csv(series), artifacts)
    state = checkpoint_state(result.policy, tc, config.digest())
    _write(out, "checkpoint.json", json.dumps(state, indent=2, sort_keys=True) + "\n", artifacts)

    summary = {}
    if len(series):
        tail = min(config.train.window, len(series))
        try:
            final_div = divergence(series)
        except InsufficientHistory:
            final_div = None
        summary = {
            "final_mean_proxy": series.tail_mean("mean_proxy", tail),
            "final_mean_formal": series.tail_mean("mean_formal", tail),
            "final_divergence": final_div,
            "final_rates": rates(series.confusion(tail))._asdict(),
            "final_probs": [float(p) for p in result.policy.probs],
        }
    onset = detect_hacking(series, config.train.hack_threshold, config.train.hack_patience)
    return _finish(config, out, artifacts, EXIT_OK, detect_hacking_step=onset, summary=summary)


def report(rollouts_path, window: int = 20) -> str:
    """metrics.csv text from a rollout log."""
    return series_to_csv(series_from_rollouts(read_jsonl(rollouts_path), window))


def with_overrides(config: ExperimentConfig, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    return replace(config, seed=config.seed if seed is None else seed, out=config.out if out is None else out)
