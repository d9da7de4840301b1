"""Embedding-distance observation pipeline, rank correlation and layer sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import RngStream
from .bench import Judge, ParaphraseCase, judge_score
from .model import DecodeConfig, ParameterSet, generate_batch, sequence_embeddings

DISTANCES_HEADER = ["case_id", "avg_distance", "worst_distance", "drop"]
SCATTER_HEADER = ["case_id", "worst_distance", "drop"]
LAYER_SWEEP_HEADER = ["layer", "best_winrate", "average_winrate"]


class UndefinedCorrelation(ValueError):
    """Spearman correlation is undefined (too few points or a constant input)."""


def l2_distance(e1, e2) -> float:
    a = np.asarray(e1, dtype=np.float64)
    b = np.asarray(e2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


@dataclass
class CaseEmbeddings:
    case_id: str
    embeddings: np.ndarray  # (n+1, d), row 0 is the original prompt
    scores: np.ndarray  # (n+1,)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.scores.shape[0]:
            raise ValueError(f"case {self.case_id}: need one embedding row per score")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"case {self.case_id}: scores must be finite")


@dataclass
class DistanceStats:
    case_id: str
    avg_distance: float
    worst_distance: float
    drop: float
    worst_index: int


def distance_stats(case: CaseEmbeddings, include_original: bool = True) -> DistanceStats:
    """Average pairwise distance, distance to the worst-scoring paraphrase, and score drop.

    With ``include_original=False`` the average runs over paraphrase pairs only.
    """
    e, s = case.embeddings, case.scores
    n = e.shape[0] - 1
    if n < 1:
        raise ValueError(f"case {case.case_id}: at least one paraphrase is required")
    first = 0 if include_original else 1
    pairs = [(i, j) for i in range(first, n + 1) for j in range(i + 1, n + 1)]
    avg = sum(l2_distance(e[i], e[j]) for i, j in pairs) / len(pairs) if pairs else 0.0
    worst = 1 + int(np.argmin(s[1:]))  # argmin returns the first minimum
    return DistanceStats(case.case_id, avg, l2_distance(e[0], e[worst]), float(s[0] - s[worst]), worst)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D sequences of equal length")
    if len(x) < 2:
        raise UndefinedCorrelation(f"need at least 2 points, got {len(x)}")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sxx, syy = float(rx @ rx), float(ry @ ry)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("an input has zero rank variance")
    rho = float(rx @ ry) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


@dataclass
class ObservationReport:
    stats: list[DistanceStats]
    rho: float | None
    rho_note: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def avg_distances(self) -> list[float]:
        return [s.avg_distance for s in self.stats]

    @property
    def worst_distances(self) -> list[float]:
        return [s.worst_distance for s in self.stats]

    @property
    def drops(self) -> list[float]:
        return [s.drop for s in self.stats]

    def to_json(self) -> dict:
        return {**self.meta, "rho": self.rho, "rho_note": self.rho_note,
                "avg_distance_mean": float(np.mean(self.avg_distances)),
                "worst_distance_mean": float(np.mean(self.worst_distances))}

    def write_csvs(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dist, scatter = out / "distances.csv", out / "scatter.csv"
        with dist.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DISTANCES_HEADER)
            for s in self.stats:
                w.writerow([s.case_id, repr(s.avg_distance), repr(s.worst_distance), repr(s.drop)])
        with scatter.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCATTER_HEADER)
            for s in self.stats:
                w.writerow([s.case_id, repr(s.worst_distance), repr(s.drop)])
        return dist, scatter


def case_embeddings(params: ParameterSet, cases: Sequence[ParaphraseCase], judge: Judge, layer: int | None = None,
                    decode: DecodeConfig = DecodeConfig(mode="greedy"), rng=0) -> list[CaseEmbeddings]:
    """Respond to every prompt, score against gold and embed at ``layer``."""
    root = rng if isinstance(rng, RngStream) else RngStream(rng)
    out = []
    for i, case in enumerate(cases):
        responses = generate_batch(params, case.prompts, decode, root.child("case", i))
        scores = [judge_score(judge, case.gold, r) for r in responses]
        out.append(CaseEmbeddings(case.case_id, sequence_embeddings(params, case.prompts, layer), np.array(scores)))
    return out


def observation_report(params: ParameterSet, cases: Sequence[ParaphraseCase], judge: Judge, layer: int | None = None,
                       decode: DecodeConfig = DecodeConfig(mode="greedy"), rng=0,
                       include_original: bool = True) -> ObservationReport:
    stats = [distance_stats(c, include_original) for c in case_embeddings(params, cases, judge, layer, decode, rng)]
    try:
        rho, note = spearman([s.worst_distance for s in stats], [s.drop for s in stats]), ""
    except UndefinedCorrelation as err:
        rho, note = None, str(err)
    return ObservationReport(stats, rho, note)


def layer_sweep(train_fn: Callable[[int], object], eval_fn: Callable[[object], dict[str, float]],
                layers: Sequence[int]) -> list[dict[str, float]]:
    """Train one model per injection layer and collect its best/average win-rates.

    ``train_fn(layer)`` returns whatever ``eval_fn`` consumes; ``eval_fn`` returns
    a mapping with at least ``best`` and ``average``.
    """
    rows = []
    for layer in layers:
        agg = eval_fn(train_fn(layer))
        rows.append({"layer": layer, "best_winrate": agg["best"], "average_winrate": agg["average"]})
    return rows


def write_layer_sweep_csv(path: str | Path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LAYER_SWEEP_HEADER)
        for r in rows:
            w.writerow([r["layer"], repr(float(r["best_winrate"])), repr(float(r["average_winrate"]))])
    return path
