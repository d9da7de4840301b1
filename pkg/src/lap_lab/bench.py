"""Synthetic paraphrase-robustness benchmark, programmatic judge and win-rates.

Vocabulary layout (ids)::

    0..3                      PAD, BOS, EOS, SEP
    4 .. 4+n_tasks-1          one instruction word per task
    next .. vocab-n_payload-1 filler words shared by all templates
    last n_payload ids        payload symbols

A template is a token sequence with one payload slot. Each task has one
original template (instruction word, a few filler words, the slot) and
``n_para`` paraphrases made by swapping some fillers for other fillers and
sometimes inserting one more. The instruction word is kept, so all templates of
a task mean the same thing by construction.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import RngStream
from .model import BOS, EOS, SEP, Example

SLOT = -1
TRANSFORMS = ("copy", "reverse", "sort", "first", "last", "swap-halves")
N_CONTROL = 4


class ValidationError(ValueError):
    """A dataset spec, response set or report input is inconsistent."""


def apply_transform(name: str, payload: Sequence[int]) -> list[int]:
    p = list(payload)
    if name == "copy":
        return p
    if name == "reverse":
        return p[::-1]
    if name == "sort":
        return sorted(p)
    if name == "first":
        return p[:1]
    if name == "last":
        return p[-1:]
    if name == "swap-halves":
        h = len(p) // 2
        return p[h:] + p[:h]
    raise ValidationError(f"unknown transformation {name!r}")


@dataclass(frozen=True)
class BenchSpec:
    tasks: tuple[str, ...] = TRANSFORMS
    n_para: int = 10
    payload_len: int = 4
    n_train: int = 3000
    n_eval: int = 60
    vocab: int = 64
    n_payload_symbols: int = 16
    min_fillers: int = 2
    max_fillers: int = 4
    substitute_prob: float = 0.5
    insert_prob: float = 0.3
    augment: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        self.validate()

    @property
    def filler_ids(self) -> range:
        return range(N_CONTROL + len(self.tasks), self.vocab - self.n_payload_symbols)

    @property
    def payload_ids(self) -> range:
        return range(self.vocab - self.n_payload_symbols, self.vocab)

    def instruction_id(self, task: str) -> int:
        return N_CONTROL + self.tasks.index(task)

    def validate(self) -> None:
        def bad(name: str, why: str):
            raise ValidationError(f"bench.{name}: {why}")

        if not self.tasks:
            bad("tasks", "at least one task is required")
        for t in self.tasks:
            if t not in TRANSFORMS:
                bad("tasks", f"unknown transformation {t!r}")
        if len(set(self.tasks)) != len(self.tasks):
            bad("tasks", "duplicate task")
        if self.n_para < 1:
            bad("n_para", "must be >= 1")
        if self.payload_len < 1:
            bad("payload_len", "must be >= 1")
        if "swap-halves" in self.tasks and self.payload_len % 2:
            bad("payload_len", "swap-halves needs an even payload length")
        if self.n_train < 1 or self.n_eval < 1:
            bad("n_train" if self.n_train < 1 else "n_eval", "must be >= 1")
        if self.n_payload_symbols < 2:
            bad("n_payload_symbols", "must be >= 2")
        if not 0 <= self.min_fillers <= self.max_fillers:
            bad("min_fillers", "need 0 <= min_fillers <= max_fillers")
        for name in ("substitute_prob", "insert_prob"):
            if not 0 <= getattr(self, name) <= 1:
                bad(name, "must lie in [0, 1]")
        n_fill = self.vocab - self.n_payload_symbols - N_CONTROL - len(self.tasks)
        if n_fill < self.max_fillers + 2:
            bad("vocab", f"only {n_fill} filler ids left; need at least max_fillers + 2 = {self.max_fillers + 2}")


@dataclass
class Task:
    task_id: int
    transformation: str
    templates: list[list[int]]  # index 0 is the original

    def instantiate(self, template_index: int, payload: Sequence[int]) -> list[int]:
        out = [BOS]
        for tok in self.templates[template_index]:
            out.extend(payload if tok == SLOT else [tok])
        out.append(SEP)
        return out


@dataclass
class ParaphraseCase:
    case_id: str
    task: str
    payload: list[int]
    prompts: list[list[int]]  # original first
    gold: list[int]


def _make_template(spec: BenchSpec, task: str, gen: np.random.Generator) -> list[int]:
    k = int(gen.integers(spec.min_fillers, spec.max_fillers + 1))
    words = [int(f) for f in gen.choice(np.array(spec.filler_ids), size=k, replace=False)]
    words.insert(int(gen.integers(0, k + 1)), spec.instruction_id(task))
    words.insert(int(gen.integers(0, k + 2)), SLOT)
    return words


def _paraphrase(spec: BenchSpec, original: list[int], gen: np.random.Generator) -> list[int]:
    """Swap some filler words for others and maybe insert one more filler."""
    words = list(original)
    pool = np.array([f for f in spec.filler_ids if f not in original])
    slots = [i for i, w in enumerate(words) if w in spec.filler_ids]
    if slots:
        hit = gen.random(len(slots)) < spec.substitute_prob
        hit[int(gen.integers(len(slots)))] = True
        for i in np.array(slots)[hit]:
            words[i] = int(gen.choice(pool))
    if not slots or gen.random() < spec.insert_prob:
        words.insert(int(gen.integers(0, len(words) + 1)), int(gen.choice(pool)))
    return words


def build_tasks(spec: BenchSpec, seed: int) -> list[Task]:
    """One original template per task plus ``n_para`` distinct edited copies of it."""
    root = RngStream(seed).child("templates")
    tasks = []
    for tid, name in enumerate(spec.tasks):
        gen = root.child(name).generator()
        templates = [_make_template(spec, name, gen)]
        attempts = 0
        while len(templates) < spec.n_para + 1:
            attempts += 1
            if attempts > 10000:
                raise ValidationError(f"bench.n_para: cannot draw {spec.n_para + 1} distinct templates for {name!r}")
            t = _paraphrase(spec, templates[0], gen)
            if t not in templates:
                templates.append(t)
        tasks.append(Task(tid, name, templates))
    return tasks


def gen_dataset(spec: BenchSpec, seed: int) -> tuple[list[Example], list[ParaphraseCase]]:
    """Deterministic (train examples, eval paraphrase cases) for ``spec`` and ``seed``."""
    spec.validate()
    tasks = build_tasks(spec, seed)
    root = RngStream(seed)
    symbols = np.array(spec.payload_ids)

    gen = root.child("train").generator()
    train = []
    for _ in range(spec.n_train):
        task = tasks[int(gen.integers(len(tasks)))]
        payload = [int(s) for s in gen.choice(symbols, size=spec.payload_len)]
        t_idx = int(gen.integers(spec.n_para + 1)) if spec.augment else 0
        train.append(Example(task.instantiate(t_idx, payload), apply_transform(task.transformation, payload) + [EOS]))

    gen = root.child("eval").generator()
    cases = []
    for i in range(spec.n_eval):
        task = tasks[i % len(tasks)]
        payload = [int(s) for s in gen.choice(symbols, size=spec.payload_len)]
        prompts = [task.instantiate(j, payload) for j in range(spec.n_para + 1)]
        cases.append(ParaphraseCase(f"case-{i:04d}", task.transformation, payload, prompts,
                                    apply_transform(task.transformation, payload)))
    return train, cases


# --------------------------------------------------------------------------
# files


def save_cases(path: str | Path, cases: Sequence[ParaphraseCase]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([asdict(c) for c in cases], indent=1) + "\n")
    return path


def load_cases(path: str | Path) -> list[ParaphraseCase]:
    raw = json.loads(Path(path).read_text())
    cases = []
    for i, item in enumerate(raw):
        try:
            cases.append(ParaphraseCase(str(item["case_id"]), item["task"], list(item["payload"]),
                                        [list(p) for p in item["prompts"]], list(item["gold"])))
        except (KeyError, TypeError) as err:
            raise ValidationError(f"eval case {i}: missing or malformed field {err}") from err
    return cases


def save_examples(path: str | Path, examples: Sequence[Example]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([{"x": e.x, "y": e.y} for e in examples]) + "\n")
    return path


def load_examples(path: str | Path) -> list[Example]:
    return [Example(list(e["x"]), list(e["y"])) for e in json.loads(Path(path).read_text())]


# --------------------------------------------------------------------------
# judging


@dataclass(frozen=True)
class Judge:
    kind: str = "exact"
    tie_tolerance: float = 1e-9

    def __post_init__(self):
        if self.kind not in ("exact", "token_f1"):
            raise ValidationError(f"judge.kind must be 'exact' or 'token_f1', got {self.kind!r}")
        if self.tie_tolerance < 0:
            raise ValidationError("judge.tie_tolerance must be >= 0")


def judge_score(judge: Judge, gold: Sequence[int], response: Sequence[int]) -> float:
    gold, response = list(gold), list(response)
    if judge.kind == "exact":
        return 1.0 if gold == response else 0.0
    common = sum((Counter(gold) & Counter(response)).values())
    if common == 0:
        return 0.0
    precision = common / len(response)
    recall = common / len(gold)
    return 2 * precision * recall / (precision + recall)


def pairwise_win(judge: Judge, gold: Sequence[int], y1: Sequence[int], y2: Sequence[int]) -> float:
    """1 if y1 scores higher than y2 beyond the tie tolerance, 0 if lower, else 0.5."""
    s1, s2 = judge_score(judge, gold, y1), judge_score(judge, gold, y2)
    if s1 > s2 + judge.tie_tolerance:
        return 1.0
    if s2 > s1 + judge.tie_tolerance:
        return 0.0
    return 0.5


@dataclass
class CaseResult:
    case_id: str
    wins: list[float]
    scores: list[float]
    worst_index: int


@dataclass
class RobustnessReport:
    per_case: list[CaseResult]
    original: float
    best: float
    worst: float
    average: float
    meta: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict[str, float]:
        return {"original": self.original, "best": self.best, "worst": self.worst, "average": self.average}

    def to_json(self) -> dict:
        return {**self.meta, "per_case": [asdict(c) for c in self.per_case], "aggregates": self.aggregates}

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        if csv_path is not None:
            with Path(csv_path).open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["case_id", "prompt_index", "win", "score"])
                for c in self.per_case:
                    for j, (win, score) in enumerate(zip(c.wins, c.scores)):
                        w.writerow([c.case_id, j, repr(win), repr(score)])


def winrate_report(cases: Sequence[ParaphraseCase], model_responses: Sequence[Sequence[Sequence[int]]],
                   baseline_responses: Sequence[Sequence[int]], judge: Judge) -> RobustnessReport:
    """Original / best / worst / average win-rate of model responses against a baseline."""
    if len(model_responses) != len(cases) or len(baseline_responses) != len(cases):
        raise ValidationError("responses must align with cases")
    if not cases:
        raise ValidationError("no cases to report on")
    per_case = []
    for i, (case, responses, base) in enumerate(zip(cases, model_responses, baseline_responses)):
        if len(responses) != len(case.prompts):
            raise ValidationError(f"case {case.case_id}: {len(responses)} responses for {len(case.prompts)} prompts")
        wins = [pairwise_win(judge, case.gold, y, base) for y in responses]
        scores = [judge_score(judge, case.gold, y) for y in responses]
        worst = min(range(len(wins)), key=lambda j: (wins[j], j))
        per_case.append(CaseResult(case.case_id, wins, scores, worst))
    n = len(per_case)
    return RobustnessReport(
        per_case,
        original=sum(c.wins[0] for c in per_case) / n,
        best=sum(max(c.wins) for c in per_case) / n,
        worst=sum(min(c.wins) for c in per_case) / n,
        average=sum(sum(c.wins) / len(c.wins) for c in per_case) / n,
    )


def accuracy_table(report: RobustnessReport, cases: Sequence[ParaphraseCase]) -> dict[str, float]:
    """Judge-score analogue of the win-rate aggregates, plus ``worst_template``.

    ``worst_template`` takes, for each task, the template slot with the lowest
    mean score over that task's cases, then averages over tasks.
    """
    if len(cases) != len(report.per_case):
        raise ValidationError("cases must align with the report")
    scores = np.array([c.scores for c in report.per_case], dtype=np.float64)
    tasks = sorted({c.task for c in cases})
    labels = np.array([c.task for c in cases])
    worst_template = float(np.mean([scores[labels == t].mean(axis=0).min() for t in tasks]))
    return {
        "original": float(scores[:, 0].mean()),
        "best": float(scores.max(axis=1).mean()),
        "worst": float(scores.min(axis=1).mean()),
        "average": float(scores.mean()),
        "worst_template": worst_template,
    }
