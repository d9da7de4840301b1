import csv
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lap_lab.analysis import (DISTANCES_HEADER, LAYER_SWEEP_HEADER, SCATTER_HEADER, CaseEmbeddings,
                              UndefinedCorrelation, distance_stats, l2_distance, layer_sweep, observation_report,
                              spearman, write_layer_sweep_csv)
from lap_lab.bench import BenchSpec, Judge, gen_dataset
from lap_lab.model import ModelConfig, init_params
from oracles import oracle_distance_stats, rank_difference_spearman, tied_spearman


def test_l2_distance_known_values():
    assert l2_distance([0, 0], [3, 4]) == 5.0
    assert l2_distance([1.5, -2.0, 7.0], [1.5, -2.0, 7.0]) == 0.0
    with pytest.raises(ValueError):
        l2_distance([1, 2], [1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=3, max_size=3))
def test_l2_distance_is_a_metric(points):
    a, b, c = (np.array(p) for p in points)
    assert l2_distance(a, b) == l2_distance(b, a) >= 0
    assert l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + 1e-9


def test_distance_stats_matches_brute_force():
    rng = random.Random(0)
    for _ in range(500):
        n = rng.randint(1, 6)
        d = rng.randint(1, 5)
        e = [[rng.gauss(0, 1) for _ in range(d)] for _ in range(n + 1)]
        s = [rng.choice([0.0, 0.5, 1.0, rng.random()]) for _ in range(n + 1)]
        for include in (True, False):
            got = distance_stats(CaseEmbeddings("c", e, s), include)
            avg, worst_d, drop, worst = oracle_distance_stats(e, s, include)
            assert got.avg_distance == pytest.approx(avg, abs=1e-12)
            assert got.worst_distance == pytest.approx(worst_d, abs=1e-12)
            assert got.drop == drop and got.worst_index == worst


def test_distance_stats_tie_picks_lowest_index():
    e = [[0, 0], [1, 0], [0, 2], [3, 0]]
    stats = distance_stats(CaseEmbeddings("c", e, [1.0, 0.0, 1.0, 0.0]))
    assert stats.worst_index == 1 and stats.worst_distance == 1.0 and stats.drop == 1.0
    # average of the six pairwise distances including the original
    expected = (1 + 2 + 3 + math.sqrt(5) + 2 + math.sqrt(13)) / 6
    assert stats.avg_distance == pytest.approx(expected, abs=1e-12)


def test_distance_stats_rejects_bad_input():
    with pytest.raises(ValueError):
        distance_stats(CaseEmbeddings("c", [[0.0, 1.0]], [1.0]))
    with pytest.raises(ValueError):
        CaseEmbeddings("c", [[0.0], [1.0]], [1.0])
    with pytest.raises(ValueError):
        CaseEmbeddings("c", [[0.0], [1.0]], [1.0, float("nan")])


def test_spearman_known_value():
    assert spearman([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-12)
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0


def test_spearman_matches_rank_difference_formula_without_ties():
    rng = random.Random(1)
    for _ in range(500):
        n = rng.randint(2, 30)
        x = rng.sample(range(1000), n)
        y = rng.sample(range(1000), n)
        assert abs(spearman(x, y) - rank_difference_spearman(x, y)) <= 1e-12


def test_spearman_with_ties_uses_average_ranks():
    assert spearman([1, 1, 2, 3], [1, 2, 3, 4]) == pytest.approx(tied_spearman([1, 1, 2, 3], [1, 2, 3, 4]))
    rng = random.Random(2)
    for _ in range(500):
        n = rng.randint(3, 15)
        x = [rng.randint(0, 3) for _ in range(n)]
        y = [rng.randint(0, 3) for _ in range(n)]
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert abs(spearman(x, y) - tied_spearman(x, y)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50)), min_size=2, max_size=20))
def test_spearman_properties(pairs):
    x = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    if len(set(x)) < 2 or len(set(y)) < 2:
        with pytest.raises(UndefinedCorrelation):
            spearman(x, y)
        return
    rho = spearman(x, y)
    assert -1.0 <= rho <= 1.0
    assert spearman(y, x) == pytest.approx(rho, abs=1e-12)
    assert spearman(x, [-v for v in y]) == pytest.approx(-rho, abs=1e-12)
    # strictly increasing transform (exact in integers) keeps ranks
    assert spearman([v ** 3 + 7 * v for v in x], y) == pytest.approx(rho, abs=1e-12)


def test_spearman_undefined_cases():
    with pytest.raises(UndefinedCorrelation):
        spearman([1.0], [2.0])
    with pytest.raises(UndefinedCorrelation):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])


CFG = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=64, max_seq=32)
SPEC = BenchSpec(n_train=10, n_eval=6, n_para=3)


def test_observation_report_untrained_model_is_degenerate(tmp_path):
    _, cases = gen_dataset(SPEC, 0)
    report = observation_report(init_params(CFG, 0), cases, Judge())
    # an untrained model never produces gold, so every drop is 0 and rho is undefined
    assert report.drops == [0.0] * len(cases)
    assert report.rho is None and "variance" in report.rho_note
    assert all(d > 0 for d in report.avg_distances)
    dist, scatter = report.write_csvs(tmp_path)
    rows = list(csv.reader(dist.open()))
    assert rows[0] == DISTANCES_HEADER and len(rows) == len(cases) + 1
    assert list(csv.reader(scatter.open()))[0] == SCATTER_HEADER


def test_observation_report_is_deterministic(tmp_path):
    _, cases = gen_dataset(SPEC, 0)
    params = init_params(CFG, 1)
    a = observation_report(params, cases, Judge("token_f1"), layer=1)
    b = observation_report(params, cases, Judge("token_f1"), layer=1)
    a.write_csvs(tmp_path / "a")
    b.write_csvs(tmp_path / "b")
    for name in ("distances.csv", "scatter.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = observation_report(params, cases, Judge("token_f1"), layer=2)
    assert c.avg_distances != a.avg_distances


def test_layer_sweep_rows(tmp_path):
    rows = layer_sweep(lambda layer: layer, lambda m: {"best": 0.5 + m / 10, "average": 0.5}, [0, 1, 2])
    assert [r["layer"] for r in rows] == [0, 1, 2] and rows[2]["best_winrate"] == pytest.approx(0.7)
    data = list(csv.reader(write_layer_sweep_csv(tmp_path / "s.csv", rows).open()))
    assert data[0] == LAYER_SWEEP_HEADER and len(data) == 4
