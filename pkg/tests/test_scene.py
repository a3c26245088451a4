import json

import numpy as np
import pytest

from planlab import scene
from planlab.scene import (DEFAULT_FRACTIONS, ConfigError, DatasetIOError,
                           GenConfig, apportion_counts, build_record,
                           dominant_types, generate_dataset, load_dataset,
                           save_dataset)


@pytest.fixture(scope="module")
def small_dataset():
    cfg = GenConfig(n_records=36, seed=7)
    return generate_dataset(cfg)


def test_each_type_builds_and_validates():
    cfg = GenConfig(n_records=6, seed=3)
    for i, t in enumerate(scene.SCENARIO_TYPES):
        rec = build_record(t, 100 + i, cfg)
        assert rec.scenario_type == t
        assert rec.ego_history.shape == (20, 4)
        assert rec.ego_future.shape == (80, 4)


def test_apportionment_of_default_fractions():
    counts = apportion_counts(1000, DEFAULT_FRACTIONS)
    assert counts["stationary"] == 450
    assert sum(counts.values()) == 1000


def test_dominant_set_strict_mean():
    assert dominant_types({"A": 5, "B": 1, "C": 3}) == {"A"}
    assert dominant_types({"A": 2, "B": 2}) == set()


def test_default_manifest_dominant_types(small_dataset):
    # 45% and 25% both exceed the 1/6 mean share; the four tail types do not
    _, manifest = small_dataset
    assert manifest.dominant_set == {"stationary", "lead_follow"}


def test_fractions_must_sum_to_one():
    cfg = GenConfig(n_records=10, fractions={"stationary": 0.7, "lead_follow": 0.2})
    with pytest.raises(ConfigError, match="sum"):
        cfg.validate()


def test_generation_is_deterministic(tmp_path):
    cfg = GenConfig(n_records=12, seed=5)
    a, _ = generate_dataset(cfg)
    b, _ = generate_dataset(cfg)
    pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(a, pa)
    save_dataset(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_roundtrip_exact(tmp_path, small_dataset):
    records, _ = small_dataset
    path = tmp_path / "ds.jsonl"
    save_dataset(records, path)
    loaded = load_dataset(path)
    assert len(loaded) == len(records)
    for a, b in zip(records, loaded):
        assert a.record_id == b.record_id
        assert a.scenario_type == b.scenario_type
        assert np.array_equal(a.ego_history, b.ego_history)
        assert np.array_equal(a.ego_future, b.ego_future)
        assert len(a.agents) == len(b.agents)
        for ta, tb in zip(a.agents, b.agents):
            assert np.array_equal(ta.history, tb.history)
            assert np.array_equal(ta.valid_future, tb.valid_future)
        assert np.array_equal(a.route.centerline, b.route.centerline)
        assert a.speed_limit == b.speed_limit


def test_empty_file_is_empty_dataset(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_missing_field_names_it(tmp_path, small_dataset):
    records, _ = small_dataset
    d = scene._record_to_dict(records[0])
    del d["speed_limit"]
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(d) + "\n")
    with pytest.raises(DatasetIOError, match="line 1.*speed_limit"):
        load_dataset(path)


def test_truncated_line_reports_line_number(tmp_path, small_dataset):
    records, _ = small_dataset
    good = json.dumps(scene._record_to_dict(records[0]))
    path = tmp_path / "trunc.jsonl"
    path.write_text(good + "\n" + good[: len(good) // 2] + "\n")
    with pytest.raises(DatasetIOError, match="line 2"):
        load_dataset(path)


def test_schema_version_mismatch(tmp_path, small_dataset):
    records, _ = small_dataset
    d = scene._record_to_dict(records[0])
    d["schema_version"] = 99
    path = tmp_path / "ver.jsonl"
    path.write_text(json.dumps(d) + "\n")
    with pytest.raises(DatasetIOError, match="schema version"):
        load_dataset(path)


def test_kinematic_consistency_enforced(small_dataset):
    records, _ = small_dataset
    for rec in records:
        rec.validate()  # exact by construction
    broken = records[0]
    bad = broken.ego_future.copy()
    bad[:, 3] += 5.0
    with pytest.raises(ValueError, match="finite-difference"):
        scene.ScenarioRecord(
            record_id="x", scenario_type=broken.scenario_type,
            ego_history=broken.ego_history, ego_future=bad,
            agents=[], map_polylines=[], static_obstacles=[],
            route=broken.route, speed_limit=10.0,
        ).validate()


def test_stationary_expert_creeps_but_barely(small_dataset):
    records, _ = small_dataset
    for rec in records:
        if rec.scenario_type != "stationary":
            continue
        dist = np.linalg.norm(rec.ego_future[-1, :2] - rec.ego_history[-1, :2])
        assert 0.1 < dist < 3.0


def test_moving_experts_make_progress(small_dataset):
    records, _ = small_dataset
    for rec in records:
        if rec.scenario_type in ("lead_follow", "lead_brake", "lane_change"):
            dist = np.linalg.norm(rec.ego_future[-1, :2] - rec.ego_history[-1, :2])
            assert dist > 8.0
