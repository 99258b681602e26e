import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tres_iqa.metrics import (LogisticParams, MetricReport, UndefinedCorrelation, evaluate, fit_logistic, logistic,
                              pearson, plcc, srocc, weighted_average)


def average_ranks(v):
    """Rank oracle: 1-based positions, ties share the mean of their positions."""
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and v[order[j + 1]] == v[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson_oracle(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / (va * vb) ** 0.5


def test_srocc_examples():
    g = [1, 2, 3, 4, 5]
    assert srocc(g, g) == pytest.approx(1.0, abs=1e-12)
    assert srocc(g[::-1], g) == pytest.approx(-1.0, abs=1e-12)
    assert abs(srocc([1, 2, 3, 5, 4], g) - 0.9) <= 1e-12


def test_srocc_matches_oracle_with_ties(rng):
    for _ in range(200):
        n = int(rng.integers(3, 21))
        a = rng.integers(0, 6, n).astype(float)
        b = rng.integers(0, 6, n).astype(float)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        assert abs(srocc(a, b) - pearson_oracle(average_ranks(list(a)), average_ranks(list(b)))) <= 1e-9


def test_correlation_errors():
    with pytest.raises(UndefinedCorrelation):
        srocc([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        srocc([1, 2], [1, 2])
    with pytest.raises(ValueError):
        srocc([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        srocc([1, 2, np.nan], [1, 2, 3])
    with pytest.raises(UndefinedCorrelation):
        pearson([1, 2, 3], [2, 2, 2])


def test_fit_logistic_recovers_synthetic(rng):
    beta = np.array([90.0, 10.0, 0.3, 0.2])
    x = rng.uniform(-1, 1, 60)
    y = logistic(x, beta)
    params = fit_logistic(x, y)
    assert np.max(np.abs(params(x) - y)) <= 1e-6
    assert params == fit_logistic(x, y)


def test_fit_logistic_errors():
    with pytest.raises(ValueError):
        fit_logistic([1, 1, 1, 1, 1], [1, 2, 3, 4, 5])
    with pytest.raises(ValueError):
        fit_logistic([1, 2, 3, 4, 5], [2, 2, 2, 2, 2])
    with pytest.raises(ValueError):
        fit_logistic([1, 2, 3, 4], [1, 2, 3, 4])


def test_plcc_linear_cubic_and_antimonotone(rng):
    x = rng.uniform(0, 10, 40)
    assert abs(plcc(x, 2 * x + 3) - 1.0) <= 1e-6
    assert plcc(x, (x - 5) ** 3) >= pearson(x, (x - 5) ** 3) - 1e-9
    assert plcc(x, -np.exp(x / 3)) <= 0


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_plcc_not_below_pearson_for_monotone_data(seed):
    r = np.random.default_rng(seed)
    x = r.uniform(-2, 2, 30)
    y = np.tanh(r.uniform(0.5, 3) * x) + r.normal(0, 0.05, 30)
    assert plcc(x, y) >= pearson(x, y) - 1e-9


def test_logistic_params_orientation():
    assert LogisticParams(1, 0, 0, 1).increasing
    assert not LogisticParams(0, 1, 0, 1).increasing


def test_weighted_average_table_rows():
    sizes = (799, 866, 3000, 10125, 1162, 10073, 39810)
    s = weighted_average((0.969, 0.922, 0.863, 0.859, 0.846, 0.915, 0.554), sizes)
    p = weighted_average((0.968, 0.942, 0.883, 0.858, 0.877, 0.928, 0.625), sizes)
    assert abs(s - 0.685) <= 1e-3 and abs(p - 0.732) <= 1e-3
    assert weighted_average([0.7], [12]) == 0.7
    with pytest.raises(ValueError):
        weighted_average([], [])
    with pytest.raises(ValueError):
        weighted_average([0.5], [0])


def test_metric_report_rendering(rng):
    x = rng.uniform(0, 1, 20)
    rep = evaluate(x, 10 * x + rng.normal(0, 0.1, 20), "toy")
    assert isinstance(rep, MetricReport) and rep.n == 20
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(MetricReport.CSV_HEADER) and lines[1].startswith("toy,20,")
    assert "srocc = " in rep.to_text()
