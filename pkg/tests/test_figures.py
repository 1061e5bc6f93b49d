import xml.etree.ElementTree as ET

import numpy as np
import pytest

from metastab.figures import (
    FigureSettings,
    charts,
    rows_from_csv,
    rows_to_csv,
    summary,
    sweep,
    trend_stats,
)
from metastab.svg import line_chart

SMALL = FigureSettings(dim=4, t_max=300, population=2000)


def _synthetic(which="recurring", a=-1.0, b=-0.5, reps=4):
    rng = np.random.default_rng(0)
    rows = []
    for m in (1, 2, 4, 8):
        for n in (10, 20, 40):
            for rep in range(reps):
                rows.append((which, m, n, rep, 3.0 * m**a * n**b * np.exp(0.01 * rng.normal())))
    return rows


def test_trend_stats_recover_synthetic_slopes():
    t = trend_stats(_synthetic(), "recurring")
    assert t.m_slope == pytest.approx(-1.0, abs=0.02)
    assert t.n_slope == pytest.approx(-0.5, abs=0.02)
    assert t.decreases_in_m and t.decreases_in_n and not t.flat_in_n
    flat = trend_stats(_synthetic(b=0.0), "recurring")
    assert flat.flat_in_n or abs(flat.n_slope) < 0.02


def test_csv_round_trip():
    rows = _synthetic()
    assert rows_from_csv(rows_to_csv(rows)) == rows
    with pytest.raises(ValueError):
        rows_from_csv("a,b\n1,2\n")


def test_summary_mean_and_se():
    rows = [("recurring", 1, 10, r, v) for r, v in enumerate([1.0, 2.0, 3.0])]
    mean, se, reps = summary(rows, "recurring")[(1, 10)]
    assert mean == 2.0 and reps == 3
    assert se == pytest.approx(1 / np.sqrt(3))


def test_charts_are_pure_and_valid_svg():
    rows = _synthetic()
    a, b = charts(rows, "recurring"), charts(list(reversed(rows)), "recurring")
    assert a == b
    for svg in a.values():
        root = ET.fromstring(svg)
        assert root.tag.endswith("svg")
    assert "Test error over recurring tasks" in a["vs_n"]


def test_line_chart_handles_single_point():
    svg = line_chart({"s": [(1.0, 2.0, 0.1)]}, "t", "x", "y", logx=True, logy=True)
    ET.fromstring(svg)


def test_sweep_is_deterministic_and_worker_independent():
    kw = dict(ms=(1, 2), ns=(10, 20), reps=3)
    one = sweep(SMALL, workers=1, **kw)
    assert one == sweep(SMALL, workers=1, **kw)
    assert one == sweep(SMALL, workers=2, **kw)
    assert len(one) == 3 * 2 * 2 * 3
    assert all(err >= -1e-9 for *_, err in one)


def test_sweep_argument_checks():
    with pytest.raises(ValueError):
        sweep(SMALL, ms=(1,), ns=(10,), reps=2)
    with pytest.raises(ValueError):
        sweep(SMALL, ms=(1,), ns=(10,), reps=3, which=("other",))
