import json

import numpy as np
import pytest

from stfoundry import data as D


def test_constants():
    assert D.SLICE_LENGTH_S == 1800
    assert D.STATIC_DIM == 7
    assert D.DYNAMIC_DIM == 3
    assert D.TEMPORAL_DIM == 3


def test_temporal_features_hand_values():
    # 2 days + 1h + 1min + 5s past the epoch
    ts = 2 * 86400 + 3600 + 60 + 5
    tf = D.TemporalFeatures(ts)
    assert tf.slice_index == ts // 1800
    dow, minute, second = tf.features
    assert dow == 2
    assert minute == 61
    assert second == 5


def test_temporal_week_wrap():
    assert D.TemporalFeatures(7 * 86400).features[0] == 0


def test_compute_intervals():
    delta = D.compute_intervals([10, 15, 30])
    assert list(delta) == [0.0, 5.0, 15.0]
    with pytest.raises(D.OrderingError):
        D.compute_intervals([10, 5])
    with pytest.raises(ValueError):
        D.compute_intervals([])


def test_segment_validation():
    with pytest.raises(ValueError):
        D.RoadSegment(0, 0, 0.0, 1, 0, 0, 50.0)
    with pytest.raises(ValueError):
        D.RoadSegment(0, 0, 100.0, 0, 0, 0, 50.0)


def _three_segments():
    return [
        D.RoadSegment(i, 0, 100.0, 1, 0, 0, 50.0) for i in range(3)
    ]


def test_network_validation_errors():
    segs = _three_segments()
    net = D.RoadNetwork.from_edges(segs, [(0, 1), (1, 2), (2, 0)])
    assert net.num_segments == 3
    assert net.segments[0].out_degree == 1

    bad = np.zeros((3, 3), dtype=np.int8)
    bad[0, 1] = 2
    with pytest.raises(D.WorldError):
        D.RoadNetwork(_three_segments(), bad)
    with pytest.raises(D.WorldError):
        D.RoadNetwork(_three_segments(), np.zeros((2, 2), dtype=np.int8))
    # degrees inconsistent with adjacency
    segs = _three_segments()
    segs[0].out_degree = 5
    with pytest.raises(D.WorldError):
        D.RoadNetwork(segs, np.zeros((3, 3), dtype=np.int8))


def test_static_feature_order():
    seg = D.RoadSegment(3, 2, 250.0, 2, 1, 4, 60.0)
    assert list(seg.static_features) == [3, 2, 250.0, 2, 1, 4, 60.0]


def test_store_semantics():
    store = D.TrafficStateStore(num_segments=2, num_slices=4)
    store.put(0, 1, np.array([50.0, 2, 3]))
    assert list(store.get(0, 1)) == [50.0, 2, 3]
    # quiet cell in range reads as zeros
    assert list(store.get(1, 0)) == [0.0, 0.0, 0.0]
    with pytest.raises(LookupError):
        store.get(0, 4)
    with pytest.raises(LookupError):
        store.get(0, -1)
    with pytest.raises(D.WorldError):
        store.put(0, 0, np.array([-1.0, 0, 0]))
    with pytest.raises(D.WorldError):
        store.put(0, 0, np.array([1.0, 0]))


def test_store_window_matches_dense():
    rng = np.random.default_rng(0)
    store = D.TrafficStateStore(num_segments=3, num_slices=8)
    for seg in range(3):
        for sl in range(8):
            if rng.random() < 0.6:
                store.put(seg, sl, rng.uniform(0, 10, size=3))
    w = store.window(5, 2)
    dense = store.dense()
    assert w.shape == (3, 9)
    expect = dense[3:6].transpose(1, 0, 2).reshape(3, -1)
    assert (w == expect).all()
    with pytest.raises(D.WindowError):
        store.window(1, 3)
    with pytest.raises(D.WindowError):
        store.window(8, 2)
    absent = D.TrafficStateStore(2, 4, absent=True)
    with pytest.raises(D.WindowError):
        absent.window(3, 1)


def test_window_locality_bitwise():
    store = D.TrafficStateStore(num_segments=2, num_slices=10)
    store.put(0, 4, np.array([10.0, 1, 1]))
    before = store.window(5, 2).copy()
    # changing a cell outside [3, 5] must not change the window
    store.put(0, 9, np.array([99.0, 9, 9]))
    store.put(1, 0, np.array([42.0, 1, 2]))
    after = store.window(5, 2)
    assert (before == after).all()


def test_sequence_kinds_and_ordering(tiny_world):
    with pytest.raises(ValueError):
        D.STUnitSequence(kind="bogus", units=[], segment_ids=[], timestamps=[1])
    net, store = tiny_world.network, tiny_world.store
    with pytest.raises(D.OrderingError):
        D.trajectory_sequence(net, store, [(0, 10000), (1, 10000)])
    seq = D.trajectory_sequence(net, store, [(0, 10800), (1, 10860)])
    assert seq.intervals[0] == 0.0 and seq.intervals[1] == 60.0
    series = D.traffic_series_sequence(net, store, 2, 6, 4)
    assert len(series) == 4
    assert set(series.segment_ids) == {2}
    assert all(d == D.SLICE_LENGTH_S for d in series.intervals[1:])


def test_build_st_unit_bounds(tiny_world):
    with pytest.raises(IndexError):
        D.build_st_unit(tiny_world.network, tiny_world.store, 99, 10800)


def test_split_dataset_partition():
    split = D.split_dataset(100, (0.6, 0.2, 0.2), seed=3)
    all_idx = split.train + split.valid + split.test
    assert sorted(all_idx) == list(range(100))
    assert (len(split.train), len(split.valid), len(split.test)) == (60, 20, 20)
    # remainders go to parts in declaration order
    split = D.split_dataset(11, (0.6, 0.2, 0.2), seed=3)
    assert (len(split.train), len(split.valid), len(split.test)) == (7, 2, 2)
    # deterministic per seed
    assert D.split_dataset(50, (0.8, 0.1, 0.1), seed=1).train == D.split_dataset(
        50, (0.8, 0.1, 0.1), seed=1
    ).train
    with pytest.raises(ValueError):
        D.split_dataset(10, (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        D.split_dataset(2, (0.6, 0.2, 0.2))


def test_world_generation_properties(tiny_world):
    w = tiny_world
    adj = w.network.adjacency
    for seq in w.trajectories:
        assert all(b > a for a, b in zip(seq.timestamps, seq.timestamps[1:]))
        for u, v in zip(seq.segment_ids, seq.segment_ids[1:]):
            assert adj[u, v] == 1
        assert seq.timestamps[0] >= w.config.min_departure_s
        assert seq.label == (seq.seq_id % w.config.num_users)
        for u in seq.units:
            assert 0 <= u.temporal.slice_index < w.store.num_slices


def test_world_generation_deterministic():
    cfg = D.WorldConfig(num_segments=8, num_trajectories=10, num_users=2, seed=11)
    a = D.generate_synthetic_world(cfg)
    b = D.generate_synthetic_world(cfg)
    assert a.raw_points == b.raw_points
    assert (a.network.adjacency == b.network.adjacency).all()


def test_generation_guards():
    with pytest.raises(D.GenerationError):
        D.generate_synthetic_world(D.WorldConfig(num_segments=1))
    with pytest.raises(D.GenerationError):
        D.generate_synthetic_world(D.WorldConfig(time_span_s=9000))


def test_reaggregation_oracle(tiny_world):
    """Traffic state must be exactly re-derivable from the saved points."""
    w = tiny_world
    speeds, inflow, outflow = {}, {}, {}
    for rec in w.raw_points:
        pts = rec["points"]
        for l, (seg, ts) in enumerate(pts):
            sl = ts // 1800
            inflow[(seg, sl)] = inflow.get((seg, sl), 0) + 1
            if l + 1 < len(pts):
                exit_ts = pts[l + 1][1]
                outflow[(seg, exit_ts // 1800)] = outflow.get((seg, exit_ts // 1800), 0) + 1
                speeds.setdefault((seg, sl), []).append(
                    w.network.segments[seg].length_m / (exit_ts - ts) * 3.6
                )
    table = dict(w.store.items())
    assert set(table) == set(speeds) | set(inflow) | set(outflow)
    for key, v in table.items():
        expect_speed = float(np.mean(speeds[key])) if key in speeds else 0.0
        assert v[0] == expect_speed
        assert v[1] == inflow.get(key, 0)
        assert v[2] == outflow.get(key, 0)


def test_world_round_trip(tiny_world, tmp_path):
    D.save_world(tiny_world, tmp_path)
    loaded = D.load_world(tmp_path)
    assert (loaded.network.adjacency == tiny_world.network.adjacency).all()
    assert (loaded.network.static_matrix == tiny_world.network.static_matrix).all()
    assert loaded.raw_points == tiny_world.raw_points
    assert (loaded.store.dense() == tiny_world.store.dense()).all()
    assert loaded.config == tiny_world.config


def test_network_parse_errors(tmp_path):
    p = tmp_path / "network.csv"
    p.write_text("wrong,header\n")
    with pytest.raises(D.ParseError):
        D.load_road_network(p)
    header = ",".join(D.NETWORK_HEADER)
    p.write_text(header + "\n0,5,0,100.0,1,0,1,50.0\n")
    with pytest.raises(D.ReferentialError):
        D.load_road_network(p)
    p.write_text(header + "\n0,,0,abc,1,0,0,50.0\n")
    with pytest.raises(D.ParseError, match=":2"):
        D.load_road_network(p)
    p.write_text(header + "\n0,,0,100.0\n")
    with pytest.raises(D.ParseError, match=":2"):
        D.load_road_network(p)
    with pytest.raises(FileNotFoundError):
        D.load_road_network(tmp_path / "nope.csv")


def test_traffic_parse_error(tiny_world, tmp_path):
    D.save_world(tiny_world, tmp_path)
    (tmp_path / "traffic_state.csv").write_text("bogus,header\n")
    with pytest.raises(D.ParseError):
        D.load_world(tmp_path)


def test_world_config_from_json(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"num_segments": 5, "unknown_key": 1}))
    cfg = D.WorldConfig.from_json(p)
    assert cfg.num_segments == 5


def test_absent_dynamics():
    cfg = D.WorldConfig(num_segments=6, num_trajectories=5, num_users=2,
                        dynamics_absent=True, seed=2)
    w = D.generate_synthetic_world(cfg)
    assert w.store.absent
    assert w.store.get(0, 0) is None
    assert all(u.dynamic is None for s in w.trajectories for u in s.units)
