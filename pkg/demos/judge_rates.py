"""Measure judges against the formal oracle on the known-answer fixture.

Covers the three judge kinds: the verifier itself, a scripted flawed judge,
and an HTTP chat judge served locally that agrees with the label 90% of the
time.

    python3 demos/judge_rates.py
"""
from pathlib import Path

import numpy as np

import verigap
from verigap import harness as hz
from verigap.judge import RemoteJudge, builtin_template, extract_answer
from verigap.remote import HttpTransport, MockChatServer, request_hash

fixture = Path(verigap.__file__).parent / "data" / "integration_known_answers.jsonl"
items = hz.load_labeled(fixture)
labels = [row["label"] for row in hz.read_jsonl(fixture)]


def show(name, rep):
    r = rep.rates
    print(f"{name:28s} tp {rep.confusion.tp:3d}  fp {rep.confusion.fp:3d}  tn {rep.confusion.tn:3d}  "
          f"fn {rep.confusion.fn:3d}   FPR {r.fpr:.2f}  FNR {r.fnr:.2f}")


formal = hz.build_judge(hz.JudgeSpec(), "integration")
flawed = hz.build_judge(hz.JudgeSpec(kind="scripted", exploit="claimed_evaluation"), "integration")
show("formal", hz.judge_eval(items, formal))
show("scripted (claimed check)", hz.judge_eval(items, flawed))

# the same wrong answers, now each followed by a claim that it was checked
claimed = [hz.LabeledItem(it.task, it.completion.replace("</answer>", "  # verified</answer>"))
           if label == "incorrect" else it for it, label in zip(items, labels)]
show("formal, claims added", hz.judge_eval(claimed, formal))
show("scripted, claims added", hz.judge_eval(claimed, flawed))

# a grader that flips one answer in ten, picked by a fixed seed
template = builtin_template("I1")
probe = RemoteJudge(template, transport=None, model="local-grader")
rng = np.random.default_rng(0)
answers = {}
for item, label in zip(items, labels):
    flip = rng.random() < 0.1
    verdict = label if not flip else ("incorrect" if label == "correct" else "correct")
    answers[request_hash(probe.request(item.task, extract_answer(item.completion)))] = verdict

with MockChatServer(lambda body: answers[request_hash(body)]) as server:
    remote = RemoteJudge(template, HttpTransport(server.base_url), model="local-grader")
    show("remote (10% noise, HTTP)", hz.judge_eval(items, remote))
