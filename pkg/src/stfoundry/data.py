"""Road-network worlds: segments, ST-units, synthetic generation, splits, I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

SLICE_LENGTH_S = 1800  # 30-minute slices
STATIC_DIM = 7         # id, type, length, lanes, in-degree, out-degree, speed limit
DYNAMIC_DIM = 3        # avg speed (km/h), inflow, outflow
TEMPORAL_DIM = 3       # day-of-week, minute-of-day, second-of-minute


class WorldError(Exception):
    pass


class ParseError(WorldError):
    pass


class ReferentialError(WorldError):
    pass


class OrderingError(WorldError):
    pass


class WindowError(WorldError):
    pass


class GenerationError(WorldError):
    pass


@dataclass
class RoadSegment:
    segment_id: int
    road_type: int
    length_m: float
    lanes: int
    in_degree: int
    out_degree: int
    speed_limit_kmh: float

    def __post_init__(self):
        if self.length_m <= 0:
            raise ValueError(f"segment {self.segment_id}: length must be > 0")
        if self.lanes < 1:
            raise ValueError(f"segment {self.segment_id}: lane count must be >= 1")

    @property
    def static_features(self) -> np.ndarray:
        return np.array(
            [
                self.segment_id,
                self.road_type,
                self.length_m,
                self.lanes,
                self.in_degree,
                self.out_degree,
                self.speed_limit_kmh,
            ],
            dtype=np.float64,
        )


class RoadNetwork:
    """Directed segment graph with per-segment static features."""

    def __init__(self, segments: list[RoadSegment], adjacency: np.ndarray):
        self.segments = sorted(segments, key=lambda s: s.segment_id)
        self.adjacency = np.asarray(adjacency, dtype=np.int8)
        self.static_matrix = np.stack([s.static_features for s in self.segments])
        self.validate()

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    def validate(self):
        I = self.num_segments
        if self.adjacency.shape != (I, I):
            raise WorldError(f"adjacency shape {self.adjacency.shape} != ({I},{I})")
        if not np.isin(self.adjacency, (0, 1)).all():
            raise WorldError("adjacency entries must be 0/1")
        for i, seg in enumerate(self.segments):
            if seg.segment_id != i:
                raise WorldError(f"segment ids must be 0..{I - 1}, got {seg.segment_id} at {i}")
            if seg.out_degree != int(self.adjacency[i].sum()):
                raise WorldError(f"segment {i}: out_degree inconsistent with adjacency")
            if seg.in_degree != int(self.adjacency[:, i].sum()):
                raise WorldError(f"segment {i}: in_degree inconsistent with adjacency")

    @classmethod
    def from_edges(cls, segments: list[RoadSegment], edges: list[tuple[int, int]]) -> "RoadNetwork":
        I = len(segments)
        adj = np.zeros((I, I), dtype=np.int8)
        for u, v in edges:
            adj[u, v] = 1
        for i, seg in enumerate(sorted(segments, key=lambda s: s.segment_id)):
            seg.out_degree = int(adj[i].sum())
            seg.in_degree = int(adj[:, i].sum())
        return cls(segments, adj)


@dataclass(frozen=True)
class TemporalFeatures:
    timestamp_s: int
    slice_length_s: int = SLICE_LENGTH_S

    @property
    def slice_index(self) -> int:
        return self.timestamp_s // self.slice_length_s

    @property
    def features(self) -> np.ndarray:
        day_s = self.timestamp_s % 86400
        return np.array(
            [
                (self.timestamp_s // 86400) % 7,  # day of week (epoch day 0 = day 0)
                day_s // 60,                      # minute of day
                self.timestamp_s % 60,            # second of minute
            ],
            dtype=np.float64,
        )


class TrafficStateStore:
    """(segment, slice) -> dynamic vector table; may be wholly absent."""

    def __init__(self, num_segments: int, num_slices: int, absent: bool = False):
        self.num_segments = num_segments
        self.num_slices = num_slices
        self.absent = absent
        self._table: dict[tuple[int, int], np.ndarray] = {}
        self._dense: Optional[np.ndarray] = None

    def put(self, segment_id: int, slice_index: int, value: np.ndarray):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != (DYNAMIC_DIM,):
            raise WorldError(f"dynamic vector must have length {DYNAMIC_DIM}")
        if value[0] < 0 or value[1] < 0 or value[2] < 0:
            raise WorldError("speeds and counts must be nonnegative")
        self._table[(segment_id, slice_index)] = value
        self._dense = None

    def get(self, segment_id: int, slice_index: int) -> Optional[np.ndarray]:
        if self.absent:
            return None
        if not 0 <= slice_index < self.num_slices:
            raise LookupError(f"slice {slice_index} outside store range [0, {self.num_slices})")
        # cells with no recorded traffic read as zero state
        return self._table.get((segment_id, slice_index), np.zeros(DYNAMIC_DIM))

    def dense(self) -> np.ndarray:
        """(num_slices, num_segments, DYNAMIC_DIM) array; missing cells are zero."""
        if self._dense is None:
            arr = np.zeros((self.num_slices, self.num_segments, DYNAMIC_DIM))
            for (seg, sl), v in self._table.items():
                if 0 <= sl < self.num_slices:
                    arr[sl, seg] = v
            self._dense = arr
        return self._dense

    def window(self, slice_index: int, history: int) -> np.ndarray:
        """Concatenated per-segment features over slices [t-history, t]."""
        if self.absent:
            raise WindowError("store has no dynamic features")
        lo = slice_index - history
        if lo < 0 or slice_index >= self.num_slices:
            missing = lo if lo < 0 else slice_index
            raise WindowError(f"slice {missing} outside store range [0, {self.num_slices})")
        return self.dense()[lo : slice_index + 1].transpose(1, 0, 2).reshape(self.num_segments, -1)

    def items(self):
        return self._table.items()


@dataclass
class STUnit:
    static: np.ndarray
    dynamic: Optional[np.ndarray]
    temporal: TemporalFeatures


@dataclass
class STUnitSequence:
    kind: str  # "trajectory" | "traffic_series"
    units: list[STUnit]
    segment_ids: list[int]
    timestamps: list[int]
    label: Optional[int] = None
    seq_id: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("trajectory", "traffic_series"):
            raise ValueError(f"unknown sequence kind {self.kind!r}")
        if self.kind == "trajectory":
            for a, b in zip(self.timestamps, self.timestamps[1:]):
                if b <= a:
                    raise OrderingError("trajectory timestamps must be strictly increasing")
        self.intervals = compute_intervals(self.timestamps)

    def __len__(self):
        return len(self.units)


def compute_intervals(timestamps: list[int]) -> np.ndarray:
    if not len(timestamps):
        raise ValueError("timestamp list is empty")
    ts = np.asarray(timestamps, dtype=np.float64)
    if (np.diff(ts) < 0).any():
        raise OrderingError("timestamps must be non-decreasing")
    delta = np.empty_like(ts)
    delta[0] = 0.0
    delta[1:] = np.diff(ts)
    return delta


def build_st_unit(
    net: RoadNetwork, store: TrafficStateStore, segment_id: int, timestamp_s: int
) -> STUnit:
    if not 0 <= segment_id < net.num_segments:
        raise IndexError(f"segment {segment_id} outside [0, {net.num_segments})")
    temporal = TemporalFeatures(int(timestamp_s))
    dynamic = store.get(segment_id, temporal.slice_index) if not store.absent else None
    return STUnit(net.static_matrix[segment_id], dynamic, temporal)


def trajectory_sequence(
    net: RoadNetwork,
    store: TrafficStateStore,
    points: list[tuple[int, int]],
    label: Optional[int] = None,
    seq_id: Optional[int] = None,
) -> STUnitSequence:
    units = [build_st_unit(net, store, seg, ts) for seg, ts in points]
    return STUnitSequence(
        kind="trajectory",
        units=units,
        segment_ids=[p[0] for p in points],
        timestamps=[p[1] for p in points],
        label=label,
        seq_id=seq_id,
    )


def traffic_series_sequence(
    net: RoadNetwork,
    store: TrafficStateStore,
    segment_id: int,
    start_slice: int,
    length: int,
    seq_id: Optional[int] = None,
) -> STUnitSequence:
    timestamps = [(start_slice + k) * SLICE_LENGTH_S for k in range(length)]
    units = [build_st_unit(net, store, segment_id, ts) for ts in timestamps]
    return STUnitSequence(
        kind="traffic_series",
        units=units,
        segment_ids=[segment_id] * length,
        timestamps=timestamps,
        seq_id=seq_id,
    )


# ---------------------------------------------------------------------------
# Dataset splits


@dataclass
class DatasetSplit:
    train: list[int]
    valid: list[int]
    test: list[int]
    ratios: tuple[float, ...]

    @property
    def parts(self):
        return (self.train, self.valid, self.test)


def split_dataset(n: int, ratios: tuple[float, ...], seed: int = 0) -> DatasetSplit:
    if len(ratios) != 3:
        raise ValueError("expected (train, valid, test) ratios")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be positive and sum to 1")
    if n < len(ratios):
        raise ValueError(f"n={n} smaller than number of parts")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n).tolist()
    sizes = [int(math.floor(n * r)) for r in ratios]
    # floor each part, hand remainders out in declaration order
    for i in range(n - sum(sizes)):
        sizes[i % 3] += 1
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(order[:a], order[a:b], order[b:], tuple(ratios))


# ---------------------------------------------------------------------------
# Synthetic world generation


@dataclass
class WorldConfig:
    num_segments: int = 50
    num_trajectories: int = 500
    traj_len_min: int = 10
    traj_len_max: int = 30
    num_users: int = 10
    time_span_s: int = 172800
    slice_length_s: int = SLICE_LENGTH_S
    min_departure_s: int = 10800
    extra_edges_per_segment: float = 1.5
    dynamics_absent: bool = False
    seed: int = 0

    @classmethod
    def from_json(cls, path) -> "WorldConfig":
        with open(path) as f:
            raw = json.load(f)
        known = {k: v for k, v in raw.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class World:
    network: RoadNetwork
    trajectories: list[STUnitSequence]
    store: TrafficStateStore
    config: WorldConfig
    # raw points kept so serialization does not depend on unit objects
    raw_points: list[dict] = field(default_factory=list)


def _congestion(timestamp_s: float, phase: float) -> float:
    # sinusoidal daily profile, range [0.4, 1.0]
    return 0.7 + 0.3 * math.sin(2 * math.pi * (timestamp_s % 86400) / 86400 + phase)


def generate_synthetic_world(config: WorldConfig, seed: Optional[int] = None) -> World:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    I = config.num_segments
    if I < 2:
        raise GenerationError("need at least 2 segments")

    # ring backbone guarantees walks of any length; extra edges add branching
    edges = {(i, (i + 1) % I) for i in range(I)}
    n_extra = int(config.extra_edges_per_segment * I)
    while len(edges) < I + n_extra:
        u, v = rng.integers(0, I, size=2)
        if u != v:
            edges.add((int(u), int(v)))
    segments = [
        RoadSegment(
            segment_id=i,
            road_type=int(rng.integers(0, 5)),
            length_m=float(rng.integers(100, 1001)),
            lanes=int(rng.integers(1, 5)),
            in_degree=0,
            out_degree=0,
            speed_limit_kmh=float(rng.choice([30, 50, 60, 80, 90])),
        )
        for i in range(I)
    ]
    net = RoadNetwork.from_edges(segments, sorted(edges))

    num_slices = math.ceil(config.time_span_s / config.slice_length_s)
    phases = rng.uniform(0, 2 * math.pi, size=I)
    out_neighbors = [np.flatnonzero(net.adjacency[i]) for i in range(I)]

    # per-user home regions: contiguous segment blocks
    region = max(1, I // config.num_users)
    homes = [
        list(range(u * region, min(I, (u + 1) * region))) or [I - 1]
        for u in range(config.num_users)
    ]

    max_departure = config.time_span_s - config.traj_len_max * 300 - 1
    if max_departure <= config.min_departure_s:
        raise GenerationError("time span too short for configured trajectory lengths")

    raw_points: list[dict] = []
    traversals: list[tuple[int, int, int]] = []  # (segment, entry_ts, exit_ts)
    for traj_id in range(config.num_trajectories):
        user = traj_id % config.num_users
        length = int(rng.integers(config.traj_len_min, config.traj_len_max + 1))
        seg = int(rng.choice(homes[user]))
        ts = int(rng.integers(config.min_departure_s, max_departure))
        points = [(seg, ts)]
        for _ in range(length - 1):
            speed_mps = (
                segments[seg].speed_limit_kmh / 3.6 * _congestion(ts, phases[seg])
            )
            travel = max(1, round(segments[seg].length_m / speed_mps))
            traversals.append((seg, ts, ts + travel))
            ts += travel
            seg = int(rng.choice(out_neighbors[seg]))
            points.append((seg, ts))
        raw_points.append(
            {"traj_id": traj_id, "user_id": user, "label": user, "points": points}
        )

    store = aggregate_traffic_state(
        raw_points, net, num_slices, config.slice_length_s, absent=config.dynamics_absent
    )
    trajectories = [
        trajectory_sequence(net, store, rec["points"], label=rec["label"], seq_id=rec["traj_id"])
        for rec in raw_points
    ]
    return World(net, trajectories, store, config, raw_points)


def aggregate_traffic_state(
    raw_points: list[dict],
    net: RoadNetwork,
    num_slices: int,
    slice_length_s: int = SLICE_LENGTH_S,
    absent: bool = False,
) -> TrafficStateStore:
    """Mean traversal speed + entry/exit counts per (segment, slice).

    Derivable purely from trajectory points, so a saved world can be
    re-aggregated for verification.
    """
    store = TrafficStateStore(net.num_segments, num_slices, absent=absent)
    if absent:
        return store
    speeds: dict[tuple[int, int], list[float]] = {}
    inflow: dict[tuple[int, int], int] = {}
    outflow: dict[tuple[int, int], int] = {}
    for rec in raw_points:
        pts = rec["points"]
        for l, (seg, ts) in enumerate(pts):
            entry_slice = ts // slice_length_s
            inflow[(seg, entry_slice)] = inflow.get((seg, entry_slice), 0) + 1
            if l + 1 < len(pts):
                exit_ts = pts[l + 1][1]
                exit_slice = exit_ts // slice_length_s
                outflow[(seg, exit_slice)] = outflow.get((seg, exit_slice), 0) + 1
                kmh = net.segments[seg].length_m / (exit_ts - ts) * 3.6
                speeds.setdefault((seg, entry_slice), []).append(kmh)
    for key in set(speeds) | set(inflow) | set(outflow):
        mean_speed = float(np.mean(speeds[key])) if key in speeds else 0.0
        store.put(key[0], key[1], np.array([mean_speed, inflow.get(key, 0), outflow.get(key, 0)], dtype=np.float64))
    return store


# ---------------------------------------------------------------------------
# Serialization

NETWORK_HEADER = [
    "segment_id",
    "out_neighbors",
    "road_type",
    "length_m",
    "lanes",
    "in_degree",
    "out_degree",
    "speed_limit",
]

TRAFFIC_HEADER = ["segment_id", "slice_index", "avg_speed", "inflow", "outflow"]


def save_road_network(net: RoadNetwork, path):
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(NETWORK_HEADER)
        for i, seg in enumerate(net.segments):
            nbrs = ";".join(str(j) for j in np.flatnonzero(net.adjacency[i]))
            w.writerow(
                [
                    seg.segment_id,
                    nbrs,
                    seg.road_type,
                    repr(seg.length_m),
                    seg.lanes,
                    seg.in_degree,
                    seg.out_degree,
                    repr(seg.speed_limit_kmh),
                ]
            )


def load_road_network(path) -> RoadNetwork:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    segments = []
    neighbor_lists = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != NETWORK_HEADER:
            raise ParseError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(NETWORK_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(NETWORK_HEADER)} fields")
            try:
                segments.append(
                    RoadSegment(
                        segment_id=int(row[0]),
                        road_type=int(row[2]),
                        length_m=float(row[3]),
                        lanes=int(row[4]),
                        in_degree=int(row[5]),
                        out_degree=int(row[6]),
                        speed_limit_kmh=float(row[7]),
                    )
                )
                neighbor_lists.append(
                    [int(x) for x in row[1].split(";")] if row[1] else []
                )
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: {e}") from e
    I = len(segments)
    adj = np.zeros((I, I), dtype=np.int8)
    for seg, nbrs in zip(segments, neighbor_lists):
        for j in nbrs:
            if not 0 <= j < I:
                raise ReferentialError(
                    f"segment {seg.segment_id} references unknown neighbor {j}"
                )
            adj[seg.segment_id, j] = 1
    return RoadNetwork(segments, adj)


def save_world(world: World, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_road_network(world.network, out_dir / "network.csv")
    with open(out_dir / "trajectories.jsonl", "w", newline="\n") as f:
        for rec in world.raw_points:
            f.write(
                json.dumps(
                    {
                        "traj_id": rec["traj_id"],
                        "user_id": rec["user_id"],
                        "label": rec["label"],
                        "points": [
                            {"segment_id": s, "timestamp_s": t} for s, t in rec["points"]
                        ],
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with open(out_dir / "traffic_state.csv", "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRAFFIC_HEADER)
        for (seg, sl), v in sorted(world.store.items()):
            w.writerow([seg, sl, repr(float(v[0])), int(v[1]), int(v[2])])
    cfg = asdict(world.config)
    cfg["num_slices"] = world.store.num_slices
    with open(out_dir / "world_config.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def load_world(in_dir) -> World:
    in_dir = Path(in_dir)
    net = load_road_network(in_dir / "network.csv")
    with open(in_dir / "world_config.json") as f:
        raw_cfg = json.load(f)
    num_slices = raw_cfg.pop("num_slices")
    config = WorldConfig(**{k: v for k, v in raw_cfg.items() if k in WorldConfig.__dataclass_fields__})

    store = TrafficStateStore(net.num_segments, num_slices, absent=config.dynamics_absent)
    with open(in_dir / "traffic_state.csv", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != TRAFFIC_HEADER:
            raise ParseError(f"traffic_state.csv: bad header {header}")
        for row in reader:
            store.put(
                int(row[0]),
                int(row[1]),
                np.array([float(row[2]), float(row[3]), float(row[4])]),
            )

    raw_points = []
    with open(in_dir / "trajectories.jsonl") as f:
        for line in f:
            rec = json.loads(line)
            raw_points.append(
                {
                    "traj_id": rec["traj_id"],
                    "user_id": rec["user_id"],
                    "label": rec["label"],
                    "points": [(p["segment_id"], p["timestamp_s"]) for p in rec["points"]],
                }
            )
    trajectories = [
        trajectory_sequence(net, store, rec["points"], label=rec["label"], seq_id=rec["traj_id"])
        for rec in raw_points
    ]
    return World(net, trajectories, store, config, raw_points)
