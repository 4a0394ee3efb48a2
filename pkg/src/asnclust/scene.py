"""Multi-room acoustic scenes: constellations, impulse responses, rendering.

Rooms are axis-aligned rectangles on a shared floor plan. Impulse
responses use a stochastic model: a direct-path impulse with 1/distance
attenuation plus an exponentially decaying Gaussian tail whose energy is
set from the room's critical distance, so the direct-to-reverberant ratio
follows (d_c / d)^2. Node signals are sums of source signals convolved
with their responses; sound crossing room boundaries loses a fixed
insertion loss per boundary on the direct path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import convolve as _convolve

from .features import AudioSignal

SPEED_OF_SOUND = 343.0  # m/s
ROOM_HEIGHT = 2.6  # m, used for volume in the critical-distance formula
DEFAULT_INSERTION_LOSS_DB = 6.0
SOURCE_SEGMENT_S = 10.0


class ConstellationError(RuntimeError):
    """Raised when rejection sampling cannot satisfy placement constraints."""


@dataclass(frozen=True)
class Room:
    name: str
    origin: tuple  # (x, y) of the lower-left corner, meters
    size: tuple  # (width, depth), meters
    t60: float

    def __post_init__(self):
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise ValueError(f"room {self.name} has non-positive size {self.size}")
        if self.t60 <= 0:
            raise ValueError(f"room {self.name} needs T60 > 0, got {self.t60}")

    @property
    def area(self) -> float:
        return self.size[0] * self.size[1]

    @property
    def volume(self) -> float:
        return self.area * ROOM_HEIGHT

    def contains(self, point, margin: float = 0.0) -> bool:
        x, y = float(point[0]), float(point[1])
        return (
            self.origin[0] + margin <= x <= self.origin[0] + self.size[0] - margin
            and self.origin[1] + margin <= y <= self.origin[1] + self.size[1] - margin
        )

    def sample_point(self, rng, margin: float = 0.0) -> np.ndarray:
        lo = np.array(self.origin) + margin
        hi = np.array(self.origin) + np.array(self.size) - margin
        return rng.uniform(lo, hi)


def critical_distance(room: Room) -> float:
    """Sabine critical distance 0.057 * sqrt(V / T60), V in cubic meters."""
    return 0.057 * np.sqrt(room.volume / room.t60)


@dataclass(frozen=True)
class Source:
    id: int
    position: tuple
    class_name: str
    room: str


@dataclass(frozen=True)
class Node:
    id: int
    position: tuple
    room: str


@dataclass
class Scene:
    rooms: list
    sources: list
    nodes: list
    sample_rate: int = 16000
    seed: int | None = None

    def __post_init__(self):
        if len(self.nodes) < 2:
            raise ValueError("a scene needs at least two nodes")
        if len(self.sources) < 1:
            raise ValueError("a scene needs at least one source")
        for src in self.sources:
            if self.room_of(src.position) is None:
                raise ValueError(f"source {src.id} at {src.position} lies outside every room")
        for node in self.nodes:
            if self.room_of(node.position) is None:
                raise ValueError(f"node {node.id} at {node.position} lies outside every room")

    def room_by_name(self, name: str) -> Room:
        for room in self.rooms:
            if room.name == name:
                return room
        raise KeyError(f"no room named {name!r}")

    def room_of(self, point) -> Room | None:
        for room in self.rooms:
            if room.contains(point):
                return room
        return None

    @property
    def node_ids(self):
        return tuple(node.id for node in self.nodes)

    def node_positions(self) -> dict:
        return {node.id: np.asarray(node.position, dtype=np.float64) for node in self.nodes}

    def source_positions(self) -> dict:
        return {src.id: np.asarray(src.position, dtype=np.float64) for src in self.sources}


@dataclass
class Rir:
    """Finite impulse response from one source to one node.

    first_peak_delay_s stores the exact distance / c travel time; the
    direct tap in `taps` sits on the nearest sample of that instant.
    """

    taps: np.ndarray
    first_peak_delay_s: float
    source_id: int
    node_id: int


# ---------------------------------------------------------------------------
# Source signal classes


@dataclass(frozen=True)
class SourceClass:
    """Synthetic stand-in for a speaker category.

    kind "harmonic": complexes with a fundamental drawn from (low, high) Hz
    and 1/h amplitude roll-off. kind "noise": white noise band-passed to
    (low, high) Hz. Each 10 s segment redraws its parameters.
    """

    name: str
    kind: str  # "harmonic" | "noise"
    low_hz: float
    high_hz: float
    label: int


SOURCE_CLASSES = {
    "low-f0": SourceClass("low-f0", "harmonic", 90.0, 130.0, 0),
    "high-f0": SourceClass("high-f0", "harmonic", 210.0, 300.0, 1),
    "noise-low": SourceClass("noise-low", "noise", 300.0, 900.0, 2),
    "noise-high": SourceClass("noise-high", "noise", 2000.0, 4500.0, 3),
}


def class_label(class_name: str) -> int:
    return _get_class(class_name).label


def _get_class(class_name: str) -> SourceClass:
    try:
        return SOURCE_CLASSES[class_name]
    except KeyError:
        raise ValueError(
            f"unknown source class {class_name!r}; available: {sorted(SOURCE_CLASSES)}"
        ) from None


def _harmonic_segment(rng, spec: SourceClass, n: int, sr: int) -> np.ndarray:
    f0 = rng.uniform(spec.low_hz, spec.high_hz)
    t = np.arange(n) / sr
    n_harm = min(24, int(4000.0 // f0))
    out = np.zeros(n)
    for h in range(1, n_harm + 1):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        out += np.sin(2.0 * np.pi * h * f0 * t + phase) / h
    # slow amplitude modulation so frames differ over time
    am_rate = rng.uniform(0.5, 2.0)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    out *= 1.0 + 0.3 * np.sin(2.0 * np.pi * am_rate * t + am_phase)
    return out


def _noise_segment(rng, spec: SourceClass, n: int, sr: int) -> np.ndarray:
    noise = rng.standard_normal(n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spectrum[(freqs < spec.low_hz) | (freqs > spec.high_hz)] = 0.0
    return np.fft.irfft(spectrum, n)


def make_source_signal(
    class_name: str, duration_s: float, seed, sample_rate: int = 16000
) -> AudioSignal:
    """Deterministic class-typed signal built from 10 s segments."""
    spec = _get_class(class_name)
    total = int(round(duration_s * sample_rate))
    seg_len = int(round(SOURCE_SEGMENT_S * sample_rate))
    pieces = []
    seg_index = 0
    while sum(p.size for p in pieces) < total:
        rng = np.random.default_rng(np.random.SeedSequence([_seed_int(seed), 17, seg_index]))
        if spec.kind == "harmonic":
            seg = _harmonic_segment(rng, spec, seg_len, sample_rate)
        elif spec.kind == "noise":
            seg = _noise_segment(rng, spec, seg_len, sample_rate)
        else:
            raise ValueError(f"unknown source kind {spec.kind!r}")
        rms = np.sqrt(np.mean(seg**2))
        pieces.append(0.05 * seg / max(rms, 1e-12))
        seg_index += 1
    samples = np.concatenate(pieces)[:total]
    return AudioSignal(samples=samples, sample_rate=sample_rate)


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    raise TypeError(f"seed must be an integer, got {type(seed).__name__}")


# ---------------------------------------------------------------------------
# Templates and constellation sampling


@dataclass(frozen=True)
class SourceTemplate:
    room: str
    class_name: str
    position: tuple | None = None  # None: drawn uniformly inside the room
    min_nodes_within_critical: int = 0


@dataclass(frozen=True)
class SceneTemplate:
    name: str
    rooms: tuple
    sources: tuple
    nodes_per_room: tuple  # ((room_name, count), ...)
    sample_rate: int = 16000
    source_margin: float = 0.3
    node_margin: float = 0.1
    min_source_separation: float = 0.0
    max_attempts: int = 50000

    @property
    def node_count(self) -> int:
        return sum(count for _, count in self.nodes_per_room)

    @property
    def class_names(self) -> tuple:
        return tuple(sorted({s.class_name for s in self.sources}))


@dataclass(frozen=True)
class Constraints:
    """Optional per-call overrides of a template's placement constraints."""

    min_nodes_within_critical: int | None = None
    min_source_separation: float | None = None
    max_attempts: int | None = None


TEMPLATES = {
    "2SL": SceneTemplate(
        name="2SL",
        rooms=(Room("living", (0.0, 0.0), (4.0, 5.0), 0.3),),
        sources=(
            SourceTemplate("living", "low-f0", min_nodes_within_critical=3),
            SourceTemplate("living", "high-f0", min_nodes_within_critical=3),
        ),
        nodes_per_room=(("living", 10),),
        min_source_separation=2.0,
    ),
    "4SA": SceneTemplate(
        name="4SA",
        rooms=(
            Room("living", (0.0, 0.0), (5.0, 7.0), 0.4),
            Room("kitchen", (5.0, 0.0), (4.0, 3.0), 0.6),
            Room("bedroom", (5.0, 3.0), (4.0, 4.0), 0.5),
            Room("hall", (9.0, 0.0), (2.0, 7.0), 0.7),
        ),
        sources=(
            SourceTemplate("living", "low-f0", min_nodes_within_critical=3),
            SourceTemplate("kitchen", "high-f0"),
            SourceTemplate("bedroom", "low-f0"),
            SourceTemplate("hall", "high-f0"),
        ),
        nodes_per_room=(("living", 7), ("kitchen", 3), ("bedroom", 3), ("hall", 3)),
        min_source_separation=1.5,
    ),
}


def generate_constellation(
    template: SceneTemplate, seed, constraints: Constraints | None = None
) -> Scene:
    """Sample a scene by rejection so constraints hold but positions stay
    uniform inside their rooms.

    Raises ConstellationError naming the violated constraint when no valid
    sample is found within the attempt budget.
    """
    constraints = constraints or Constraints()
    min_sep = (
        template.min_source_separation
        if constraints.min_source_separation is None
        else constraints.min_source_separation
    )
    max_attempts = (
        template.max_attempts if constraints.max_attempts is None else constraints.max_attempts
    )
    rooms = {room.name: room for room in template.rooms}
    rng = np.random.default_rng(np.random.SeedSequence([_seed_int(seed), 23]))
    last_violation = "no attempt made"

    for _ in range(max_attempts):
        source_positions = []
        for st in template.sources:
            room = rooms[st.room]
            pos = (
                np.asarray(st.position, dtype=np.float64)
                if st.position is not None
                else room.sample_point(rng, template.source_margin)
            )
            source_positions.append(pos)

        if min_sep > 0 and len(source_positions) > 1:
            pts = np.array(source_positions)
            dists = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            np.fill_diagonal(dists, np.inf)
            if dists.min() < min_sep:
                last_violation = f"source separation below {min_sep} m"
                continue

        node_positions = []
        node_rooms = []
        for room_name, count in template.nodes_per_room:
            room = rooms[room_name]
            for _ in range(count):
                node_positions.append(room.sample_point(rng, template.node_margin))
                node_rooms.append(room_name)
        node_arr = np.array(node_positions)

        ok = True
        for si, st in enumerate(template.sources):
            required = (
                st.min_nodes_within_critical
                if constraints.min_nodes_within_critical is None
                else constraints.min_nodes_within_critical
            )
            if required <= 0:
                continue
            d_c = critical_distance(rooms[st.room])
            within = np.linalg.norm(node_arr - source_positions[si], axis=1) < d_c
            if within.sum() < required:
                last_violation = (
                    f"source {si} in {st.room}: {int(within.sum())} of required "
                    f"{required} nodes within critical distance {d_c:.2f} m"
                )
                ok = False
                break
        if not ok:
            continue

        sources = [
            Source(i, tuple(source_positions[i]), st.class_name, st.room)
            for i, st in enumerate(template.sources)
        ]
        nodes = [
            Node(i, tuple(node_positions[i]), node_rooms[i]) for i in range(len(node_positions))
        ]
        return Scene(
            rooms=list(template.rooms),
            sources=sources,
            nodes=nodes,
            sample_rate=template.sample_rate,
            seed=_seed_int(seed),
        )

    raise ConstellationError(
        f"template {template.name}: constraint unsatisfied after {max_attempts} attempts "
        f"(last violation: {last_violation})"
    )


def boundary_crossings(scene: Scene, a, b, step: float = 0.05) -> int:
    """Count room transitions along the straight segment from a to b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    length = float(np.linalg.norm(b - a))
    n = max(2, int(np.ceil(length / step)) + 1)
    ts = np.linspace(0.0, 1.0, n)
    crossings = 0
    prev = None
    for t in ts:
        room = scene.room_of(a + t * (b - a))
        name = room.name if room is not None else None
        if name is not None:
            if prev is not None and name != prev:
                crossings += 1
            prev = name
    return crossings


def synthesize_rir(
    room: Room,
    source_pos,
    node_pos,
    seed,
    sample_rate: int = 16000,
    direct_gain: float = 1.0,
    source_id: int = 0,
    node_id: int = 0,
) -> Rir:
    """Stochastic impulse response inside `room` (the receiving room).

    Direct path: one impulse at distance/c with amplitude
    direct_gain / max(d, 0.1). Tail: seeded Gaussian noise starting one
    sample later, shaped by exp(-t * 3 ln10 / T60) and scaled so the
    direct-to-reverberant energy ratio equals (d_c / d)^2.
    """
    source_pos = np.asarray(source_pos, dtype=np.float64)
    node_pos = np.asarray(node_pos, dtype=np.float64)
    distance = float(np.linalg.norm(source_pos - node_pos))
    delay_s = distance / SPEED_OF_SOUND
    delay_samples = int(round(delay_s * sample_rate))
    tail_len = int(np.ceil(room.t60 * sample_rate))
    taps = np.zeros(delay_samples + 1 + tail_len)
    direct_amp = direct_gain / max(distance, 0.1)
    taps[delay_samples] = direct_amp

    rng = np.random.default_rng(seed)
    t = (np.arange(tail_len) + 1) / sample_rate
    envelope = np.exp(-t * (3.0 * np.log(10.0) / room.t60))
    tail = rng.standard_normal(tail_len) * envelope
    d_c = critical_distance(room)
    target_energy = (direct_amp**2) * (distance / d_c) ** 2
    raw_energy = float(np.sum(tail**2))
    if raw_energy > 0:
        tail *= np.sqrt(target_energy / raw_energy)
    taps[delay_samples + 1 :] = tail
    return Rir(
        taps=taps, first_peak_delay_s=delay_s, source_id=source_id, node_id=node_id
    )


def scene_rirs(scene: Scene, seed, insertion_loss_db: float = DEFAULT_INSERTION_LOSS_DB) -> dict:
    """All (source_id, node_id) impulse responses of a scene.

    The tail always uses the receiving node's room; every room boundary on
    the direct segment attenuates the direct tap by insertion_loss_db.
    """
    rirs = {}
    for node in scene.nodes:
        node_room = scene.room_of(node.position)
        for src in scene.sources:
            crossings = 0
            if scene.room_of(src.position).name != node_room.name:
                crossings = max(1, boundary_crossings(scene, src.position, node.position))
            gain = 10.0 ** (-insertion_loss_db * crossings / 20.0)
            rir_seed = np.random.SeedSequence([_seed_int(seed), 29, src.id, node.id])
            rirs[(src.id, node.id)] = synthesize_rir(
                node_room,
                src.position,
                node.position,
                rir_seed,
                sample_rate=scene.sample_rate,
                direct_gain=gain,
                source_id=src.id,
                node_id=node.id,
            )
    return rirs


def convolve_mix(source_signals: dict, rirs: dict, node_ids, duration_s: float, sample_rate: int) -> dict:
    """Per-node sum over sources of source signal convolved with its RIR."""
    total = int(round(duration_s * sample_rate))
    out = {}
    for node_id in node_ids:
        acc = np.zeros(total)
        for src_id, signal in source_signals.items():
            taps = rirs[(src_id, node_id)].taps
            conv = _convolve(signal.samples, taps, mode="full", method="auto")[:total]
            acc[: conv.size] += conv
        out[node_id] = AudioSignal(samples=acc, sample_rate=sample_rate)
    return out


@dataclass
class RenderResult:
    node_signals: dict  # node_id -> AudioSignal
    source_signals: dict  # source_id -> AudioSignal
    rirs: dict  # (source_id, node_id) -> Rir


def render_node_signals(
    scene: Scene,
    duration_s: float,
    seed,
    insertion_loss_db: float = DEFAULT_INSERTION_LOSS_DB,
    only_sources=None,
) -> RenderResult:
    """Render what every node microphone captures over `duration_s` seconds.

    Deterministic for a given seed. `only_sources` restricts rendering to a
    subset of source ids without changing any per-source randomness.
    """
    base = _seed_int(seed)
    keep = set(scene.source_positions() if only_sources is None else only_sources)
    source_signals = {}
    for src in scene.sources:
        if src.id not in keep:
            continue
        sig_seed = np.random.SeedSequence([base, 31, src.id]).generate_state(1)[0]
        source_signals[src.id] = make_source_signal(
            src.class_name, duration_s, int(sig_seed), scene.sample_rate
        )
    for src_id, sig in source_signals.items():
        if sig.duration_s < duration_s:
            raise ValueError(f"source {src_id} signal shorter than {duration_s} s")
    rirs = scene_rirs(scene, base, insertion_loss_db)
    node_signals = convolve_mix(
        source_signals, rirs, scene.node_ids, duration_s, scene.sample_rate
    )
    return RenderResult(node_signals=node_signals, source_signals=source_signals, rirs=rirs)


# ---------------------------------------------------------------------------
# JSON template (de)serialization for experiment configs


def template_to_json(template: SceneTemplate) -> dict:
    return {
        "name": template.name,
        "rooms": [
            {"name": r.name, "origin": list(r.origin), "size": list(r.size), "t60": r.t60}
            for r in template.rooms
        ],
        "sources": [
            {
                "room": s.room,
                "class": s.class_name,
                "position": None if s.position is None else list(s.position),
                "min_nodes_within_critical": s.min_nodes_within_critical,
            }
            for s in template.sources
        ],
        "nodes_per_room": [list(pair) for pair in template.nodes_per_room],
        "sample_rate": template.sample_rate,
        "min_source_separation": template.min_source_separation,
        "max_attempts": template.max_attempts,
    }


def template_from_json(payload: dict) -> SceneTemplate:
    rooms = tuple(
        Room(r["name"], tuple(r["origin"]), tuple(r["size"]), r["t60"]) for r in payload["rooms"]
    )
    sources = tuple(
        SourceTemplate(
            s["room"],
            s["class"],
            None if s.get("position") is None else tuple(s["position"]),
            s.get("min_nodes_within_critical", 0),
        )
        for s in payload["sources"]
    )
    return SceneTemplate(
        name=payload["name"],
        rooms=rooms,
        sources=sources,
        nodes_per_room=tuple((name, int(count)) for name, count in payload["nodes_per_room"]),
        sample_rate=payload.get("sample_rate", 16000),
        min_source_separation=payload.get("min_source_separation", 0.0),
        max_attempts=payload.get("max_attempts", 50000),
    )


def resolve_template(spec) -> SceneTemplate:
    """Template by registry name, JSON dict, or passthrough instance."""
    if isinstance(spec, SceneTemplate):
        return spec
    if isinstance(spec, str):
        if spec in TEMPLATES:
            return TEMPLATES[spec]
        raise KeyError(f"unknown template {spec!r}; available: {sorted(TEMPLATES)}")
    if isinstance(spec, dict):
        return template_from_json(spec)
    raise TypeError(f"cannot resolve template from {type(spec).__name__}")
