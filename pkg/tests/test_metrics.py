import math
from dataclasses import replace

import numpy as np
import pytest

from planlab.geometry import OrientedBox
from planlab.metrics import (MetricsReport, ScenarioMetrics, aggregate_score,
                             collision_check, time_to_collision)


def row(**overrides):
    base = dict(scenario_id="s", scenario_type="lead_follow", mode="non_reactive",
                failed=False, at_fault_collision=False, ttc_ok=True,
                drivable_ok=True, comfort_ok=True, speed_ok=True,
                progress_ratio=1.0)
    base.update(overrides)
    return ScenarioMetrics(**base)


def test_perfect_row_scores_100():
    assert row().score == 100.0


def test_at_fault_collision_zeroes_score():
    assert row(at_fault_collision=True, progress_ratio=1.0).score == 0.0


def test_off_drivable_zeroes_score():
    assert row(drivable_ok=False).score == 0.0


def test_partial_progress_score():
    assert row(progress_ratio=0.6).score == pytest.approx(90.0)


def test_progress_clamped_at_one():
    assert row(progress_ratio=1.7).score == 100.0


def test_score_monotone_in_each_boolean():
    base = row(progress_ratio=0.8)
    for field in ("ttc_ok", "comfort_ok", "speed_ok", "drivable_ok"):
        worse = replace(base, **{field: False})
        assert worse.score <= base.score


def test_aggregate_requires_rows():
    with pytest.raises(ValueError, match="no scenarios"):
        aggregate_score([])


def test_aggregate_is_mean():
    rows = [row(progress_ratio=1.0), row(at_fault_collision=True)]
    assert aggregate_score(rows) == pytest.approx(50.0)


def test_report_by_type():
    rows = [row(scenario_type="stationary"),
            row(scenario_type="lane_change", progress_ratio=0.6)]
    report = MetricsReport(rows=rows)
    assert report.by_type() == {"lane_change": pytest.approx(90.0),
                                "stationary": pytest.approx(100.0)}


def test_report_csv(tmp_path):
    report = MetricsReport(rows=[row(), row(progress_ratio=0.5)])
    path = tmp_path / "m.csv"
    report.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 3
    assert lines[0].startswith("scenario_id,")


def test_collision_front_is_at_fault():
    ego = np.array([0.0, 0.0, 0.0, 5.0])
    box = OrientedBox(3.0, 0.0, 0.0, 4.6, 1.85)
    hit, fault = collision_check(ego, box, np.zeros(2))
    assert hit and fault


def test_rear_strike_not_at_fault():
    ego = np.array([0.0, 0.0, 0.0, 1.0])
    box = OrientedBox(-3.0, 0.0, 0.0, 4.6, 1.85)
    hit, fault = collision_check(ego, box, np.array([6.0, 0.0]))
    assert hit and not fault


def test_rear_contact_while_ego_faster_is_at_fault():
    # backing-into-style contact: the other body is behind but slower
    ego = np.array([0.0, 0.0, 0.0, 5.0])
    box = OrientedBox(-3.0, 0.0, 0.0, 4.6, 1.85)
    hit, fault = collision_check(ego, box, np.array([1.0, 0.0]))
    assert hit and fault


def test_disjoint_boxes_no_collision():
    ego = np.array([0.0, 0.0, 0.0, 5.0])
    hit, fault = collision_check(ego, OrientedBox(50.0, 0.0, 0.0, 4.6, 1.85),
                                 np.zeros(2))
    assert not hit and not fault


def test_ttc_head_on_closed_form():
    ego = np.array([0.0, 0.0, 0.0, 10.0])
    agents = np.array([[20.0, 0.0, math.pi, 0.0, 1.0]])
    sizes = np.array([[5.0, 2.0]])
    # ego box length 4.6 -> half-lengths sum 4.8; adjust: gap 20, closing 10
    t = time_to_collision(ego, agents, sizes)
    assert t == pytest.approx((20.0 - 0.5 * 4.6 - 2.5) / 10.0, abs=1e-9)


def test_ttc_ignores_invalid_agents():
    ego = np.array([0.0, 0.0, 0.0, 10.0])
    agents = np.array([[12.0, 0.0, math.pi, 0.0, 0.0]])
    sizes = np.array([[4.6, 1.85]])
    assert time_to_collision(ego, agents, sizes) == math.inf


def test_ttc_parallel_lanes_infinite():
    ego = np.array([0.0, 0.0, 0.0, 10.0])
    agents = np.array([[-10.0, 3.6, 0.0, 14.0, 1.0]])
    sizes = np.array([[4.6, 1.85]])
    assert time_to_collision(ego, agents, sizes) == math.inf
