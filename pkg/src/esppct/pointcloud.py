"""Point-cloud data model, synthetic sequence generation, occlusion, and file I/O.

A frame stores its points as an (N, 5) float64 array with columns
(x, y, z, velocity, intensity); sequences are ordered frames with strictly
increasing timestamp indices.  The synthetic generator emits one moving
semantic cluster per sequence (class = motion pattern) inside uniform noise,
and records ground-truth membership in the sequence meta so region selection
can be scored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .validation import DataError, check_finite

__all__ = [
    "FEATURE_COLUMNS",
    "SEQUENCE_HEADER",
    "SEMANTIC_MASK_KEY",
    "Point",
    "Frame",
    "Sequence",
    "SynthConfig",
    "OcclusionModel",
    "OCCLUSION_PRESETS",
    "LabeledDataset",
    "synth_generate",
    "apply_occlusion",
    "semantic_masks",
    "sequence_to_text",
    "sequence_from_text",
    "write_sequence",
    "load_sequence",
    "write_dataset",
    "load_dataset",
    "load_splits",
]

FEATURE_COLUMNS = ("x", "y", "z", "velocity", "intensity")
SEQUENCE_HEADER = "ESPPCT-SEQ v1"
SEMANTIC_MASK_KEY = "semantic_mask"

VALID_SPLITS = ("train", "val", "test")

# Feature scales for generated noise/clutter returns.
_NOISE_VELOCITY_SIGMA = 0.25
_VELOCITY_JITTER_SIGMA = 0.05
_FRAME_RATE_HZ = 10.0


@dataclass(frozen=True)
class Point:
    """A single radar return: position (m), radial velocity, reflection intensity."""

    x: float
    y: float
    z: float
    velocity: float
    intensity: float

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.velocity, self.intensity)
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"point fields must be finite, got {vals}")
        if self.intensity < 0:
            raise DataError(f"intensity must be >= 0, got {self.intensity}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.velocity, self.intensity])


class Frame:
    """One time slice of a sequence; immutable once constructed.

    `points` is an (N, 5) float64 array in FEATURE_COLUMNS order.  N may be
    zero (fully occluded frames are legal and padded downstream).
    """

    __slots__ = ("timestamp_index", "points")

    def __init__(self, timestamp_index: int, points):
        if not isinstance(timestamp_index, (int, np.integer)):
            raise DataError(f"timestamp_index must be an int, got {timestamp_index!r}")
        arr = np.asarray(points, dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(0, 5)
        if arr.ndim != 2 or arr.shape[1] != 5:
            raise DataError(f"frame points must have shape (N, 5), got {arr.shape}")
        check_finite("frame points", arr)
        if arr.shape[0] and arr[:, 4].min() < 0:
            raise DataError("intensity column must be >= 0")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "timestamp_index", int(timestamp_index))
        object.__setattr__(self, "points", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Frame is immutable")

    @classmethod
    def from_points(cls, timestamp_index: int, points: list[Point]) -> "Frame":
        data = np.array([p.as_array() for p in points]).reshape(len(points), 5)
        return cls(timestamp_index, data)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.points[:, 0:3]

    @property
    def velocities(self) -> np.ndarray:
        return self.points[:, 3]

    @property
    def intensities(self) -> np.ndarray:
        return self.points[:, 4]

    def point(self, i: int) -> Point:
        row = self.points[i]
        return Point(*row.tolist())

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.timestamp_index == other.timestamp_index
                and np.array_equal(self.points, other.points))

    def __repr__(self):
        return f"Frame(t={self.timestamp_index}, n_points={self.n_points})"


@dataclass(frozen=True)
class Sequence:
    """An ordered run of frames with optional class label and string meta."""

    frames: tuple[Frame, ...]
    label: int | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not frames:
            raise DataError("a sequence needs at least one frame")
        ts = [f.timestamp_index for f in frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError(f"timestamps must be strictly increasing, got {ts}")
        if self.label is not None:
            if not isinstance(self.label, (int, np.integer)) or self.label < 0:
                raise DataError(f"label must be a non-negative int, got {self.label!r}")
            object.__setattr__(self, "label", int(self.label))
        for k, v in self.meta.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise DataError("meta must map str to str")
            if "\n" in k or "\n" in v or "=" in k or not k:
                raise DataError(f"bad meta key/value: {k!r}={v!r}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def total_points(self) -> int:
        return sum(f.n_points for f in self.frames)


@dataclass(frozen=True)
class SynthConfig:
    """Geometry and size knobs for the synthetic desk-scene generator."""

    classes: int = 5
    sequences_per_class: int = 40
    frames_per_sequence: int = 25
    points_per_frame: int = 100
    semantic_cluster_points: int = 60
    noise_points: int = 40
    motion_amplitude: float = 0.25
    cluster_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1:
            raise DataError("classes must be >= 1")
        if self.sequences_per_class < 1:
            raise DataError("sequences_per_class must be >= 1")
        if self.frames_per_sequence < 1:
            raise DataError("frames_per_sequence must be >= 1")
        if self.semantic_cluster_points < 0 or self.noise_points < 0:
            raise DataError("point counts must be >= 0")
        if self.semantic_cluster_points + self.noise_points != self.points_per_frame:
            raise DataError(
                "semantic_cluster_points + noise_points must equal points_per_frame "
                f"({self.semantic_cluster_points} + {self.noise_points} != "
                f"{self.points_per_frame})")
        if self.motion_amplitude < 0 or self.cluster_sigma < 0:
            raise DataError("motion_amplitude and cluster_sigma must be >= 0")
        if not (0 <= self.seed < 2 ** 64):
            raise DataError("seed must fit in an unsigned 64-bit int")


@dataclass(frozen=True)
class OcclusionModel:
    """Degradation model: random dropout, positional jitter, clutter, attenuation."""

    dropout_prob: float = 0.0
    clutter_points: int = 0
    jitter_sigma: float = 0.0
    attenuation: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise DataError(f"dropout_prob must be in [0, 1], got {self.dropout_prob}")
        if self.clutter_points < 0:
            raise DataError("clutter_points must be >= 0")
        if self.jitter_sigma < 0:
            raise DataError("jitter_sigma must be >= 0")
        if not 0.0 < self.attenuation <= 1.0:
            raise DataError(f"attenuation must be in (0, 1], got {self.attenuation}")


OCCLUSION_PRESETS: dict[str, OcclusionModel] = {
    "none": OcclusionModel(),
    "wood": OcclusionModel(dropout_prob=0.15, clutter_points=10,
                           jitter_sigma=0.01, attenuation=0.8),
    "brick": OcclusionModel(dropout_prob=0.30, clutter_points=20,
                            jitter_sigma=0.01, attenuation=0.8),
    "combined": OcclusionModel(dropout_prob=0.40, clutter_points=30,
                               jitter_sigma=0.01, attenuation=0.8),
}


@dataclass
class LabeledDataset:
    """Sequences plus the class-name table their labels index into."""

    sequences: list[Sequence]
    class_names: list[str]
    split: str = "train"

    def __post_init__(self):
        if self.split not in VALID_SPLITS:
            raise DataError(f"split must be one of {VALID_SPLITS}, got {self.split!r}")
        if not self.class_names:
            raise DataError("class_names must be non-empty")
        for i, seq in enumerate(self.sequences):
            if seq.label is None:
                raise DataError(f"sequence {i} has no label")
            if seq.label >= len(self.class_names):
                raise DataError(
                    f"sequence {i} label {seq.label} out of range for "
                    f"{len(self.class_names)} classes")

    def __len__(self) -> int:
        return len(self.sequences)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _class_motion(class_index: int, n_classes: int) -> tuple[np.ndarray, float]:
    """Unit motion direction and oscillation frequency for one class."""
    angle = 2.0 * math.pi * class_index / n_classes
    direction = np.array([math.cos(angle), math.sin(angle), 0.3 * math.sin(2 * angle)])
    direction /= np.linalg.norm(direction)
    frequency = 1.0 + 0.5 * (class_index % 3)
    return direction, frequency


def class_name(class_index: int) -> str:
    return f"motion_{class_index:02d}"


def synth_generate(config: SynthConfig, split: str = "train") -> LabeledDataset:
    """Deterministically generate a labeled dataset of moving-cluster sequences.

    Each sequence contains one semantic cluster following its class's motion
    template through uniform background noise.  Ground-truth cluster
    membership is stored per frame in ``meta["semantic_mask"]`` as '1'/'0'
    characters joined by ';'.
    """
    root = np.random.SeedSequence(config.seed)
    children = root.spawn(config.classes * config.sequences_per_class)
    s = config.frames_per_sequence
    n_sem = config.semantic_cluster_points
    n_noise = config.noise_points

    sequences = []
    for c in range(config.classes):
        direction, frequency = _class_motion(c, config.classes)
        for q in range(config.sequences_per_class):
            rng = np.random.default_rng(children[c * config.sequences_per_class + q])
            base = rng.uniform(0.35, 0.65, size=3)
            phase = rng.uniform(0.0, 0.4 * math.pi)
            t_norm = np.arange(s) / max(s - 1, 1)
            disp = config.motion_amplitude * np.sin(2 * math.pi * frequency * t_norm + phase)
            # per-frame scalar speed along the motion direction, in box units/s
            step = np.diff(disp, append=disp[-1] if s == 1 else 2 * disp[-1] - disp[-2])
            speed = step * _FRAME_RATE_HZ

            frames = []
            masks = []
            for t in range(s):
                center = base + disp[t] * direction
                sem_pos = center + rng.normal(0.0, config.cluster_sigma, size=(n_sem, 3))
                sem_vel = speed[t] + rng.normal(0.0, _VELOCITY_JITTER_SIGMA, size=n_sem)
                sem_int = rng.uniform(0.6, 1.0, size=n_sem)
                noise_pos = rng.uniform(0.0, 1.0, size=(n_noise, 3))
                noise_vel = rng.normal(0.0, _NOISE_VELOCITY_SIGMA, size=n_noise)
                noise_int = rng.uniform(0.0, 1.0, size=n_noise)

                pts = np.empty((n_sem + n_noise, 5))
                pts[:n_sem, 0:3] = sem_pos
                pts[:n_sem, 3] = sem_vel
                pts[:n_sem, 4] = sem_int
                pts[n_sem:, 0:3] = noise_pos
                pts[n_sem:, 3] = noise_vel
                pts[n_sem:, 4] = noise_int
                flags = np.zeros(n_sem + n_noise, dtype=bool)
                flags[:n_sem] = True

                order = rng.permutation(n_sem + n_noise)
                frames.append(Frame(t, pts[order]))
                masks.append("".join("1" if f else "0" for f in flags[order]))

            meta = {
                "frame_rate_hz": repr(_FRAME_RATE_HZ),
                "motion_class": class_name(c),
                SEMANTIC_MASK_KEY: ";".join(masks),
            }
            sequences.append(Sequence(tuple(frames), label=c, meta=meta))

    names = [class_name(c) for c in range(config.classes)]
    return LabeledDataset(sequences, names, split=split)


def semantic_masks(seq: Sequence) -> list[np.ndarray] | None:
    """Parse ground-truth membership from meta; None when absent."""
    raw = seq.meta.get(SEMANTIC_MASK_KEY)
    if raw is None:
        return None
    parts = raw.split(";")
    if len(parts) != seq.n_frames:
        raise DataError(
            f"semantic_mask has {len(parts)} frame entries, sequence has {seq.n_frames}")
    masks = []
    for frame, part in zip(seq.frames, parts):
        if len(part) != frame.n_points or set(part) - {"0", "1"}:
            raise DataError("semantic_mask entry does not match frame point count")
        masks.append(np.frombuffer(part.encode("ascii"), dtype=np.uint8) == ord("1"))
    return masks


# ---------------------------------------------------------------------------
# occlusion
# ---------------------------------------------------------------------------

def _scene_bounds(seq: Sequence) -> tuple[np.ndarray, np.ndarray]:
    all_pos = [f.positions for f in seq.frames if f.n_points]
    if not all_pos:
        return np.zeros(3), np.ones(3)
    stacked = np.vstack(all_pos)
    lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    degenerate = hi - lo < 1e-12
    lo = np.where(degenerate, lo - 0.5, lo)
    hi = np.where(degenerate, hi + 0.5, hi)
    return lo, hi


def apply_occlusion(seq: Sequence, model: OcclusionModel, seed: int) -> Sequence:
    """Degrade a sequence: drop, jitter, attenuate survivors; append clutter.

    Deterministic for a given (sequence, model, seed).  Timestamps, label and
    meta are preserved; the semantic mask (when present) is updated so
    survivors keep their flags and clutter is marked non-semantic.
    """
    rng = np.random.default_rng(seed)
    lo, hi = _scene_bounds(seq)
    masks = semantic_masks(seq)

    frames = []
    new_masks = []
    for idx, frame in enumerate(seq.frames):
        n = frame.n_points
        keep = rng.random(n) >= model.dropout_prob
        pts = frame.points[keep].copy()
        pts[:, 0:3] += rng.normal(0.0, model.jitter_sigma, size=(pts.shape[0], 3))
        pts[:, 4] *= model.attenuation

        k = model.clutter_points
        clutter = np.empty((k, 5))
        clutter[:, 0:3] = rng.uniform(lo, hi, size=(k, 3))
        clutter[:, 3] = rng.normal(0.0, _NOISE_VELOCITY_SIGMA, size=k)
        clutter[:, 4] = rng.uniform(0.0, 1.0, size=k)

        frames.append(Frame(frame.timestamp_index, np.vstack([pts, clutter])))
        if masks is not None:
            kept_flags = masks[idx][keep]
            flags = np.concatenate([kept_flags, np.zeros(k, dtype=bool)])
            new_masks.append("".join("1" if f else "0" for f in flags))

    meta = dict(seq.meta)
    if masks is not None:
        meta[SEMANTIC_MASK_KEY] = ";".join(new_masks)
    return Sequence(tuple(frames), label=seq.label, meta=meta)


# ---------------------------------------------------------------------------
# sequence text format
# ---------------------------------------------------------------------------

def sequence_to_text(seq: Sequence) -> str:
    """Canonical text form: header, frame blocks, sorted meta, then label."""
    lines = [SEQUENCE_HEADER]
    for frame in seq.frames:
        lines.append(f"F {frame.timestamp_index} {frame.n_points}")
        for row in frame.points:
            lines.append(" ".join(repr(float(v)) for v in row))
    for key in sorted(seq.meta):
        lines.append(f"M {key}={seq.meta[key]}")
    if seq.label is not None:
        lines.append(f"L {seq.label}")
    return "\n".join(lines) + "\n"


def _parse_floats(line: str, lineno: int, source: str) -> list[float]:
    parts = line.split()
    if len(parts) != 5:
        raise DataError(
            f"{source}:{lineno}: expected 5 point fields, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise DataError(f"{source}:{lineno}: malformed point line: {exc}") from None


def sequence_from_text(text: str, source: str = "<text>") -> Sequence:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != SEQUENCE_HEADER:
        got = lines[0] if lines else "<empty>"
        raise DataError(f"{source}:1: expected header {SEQUENCE_HEADER!r}, got {got!r}")

    frames: list[Frame] = []
    meta: dict[str, str] = {}
    label: int | None = None
    i = 1
    n_lines = len(lines)
    while i < n_lines:
        line = lines[i]
        lineno = i + 1
        if label is not None:
            raise DataError(f"{source}:{lineno}: content after label line")
        if line.startswith("F "):
            if meta:
                raise DataError(f"{source}:{lineno}: frame block after meta lines")
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{source}:{lineno}: malformed frame header {line!r}")
            try:
                ts, count = int(parts[1]), int(parts[2])
            except ValueError:
                raise DataError(
                    f"{source}:{lineno}: malformed frame header {line!r}") from None
            if count < 0:
                raise DataError(f"{source}:{lineno}: negative point count")
            if i + count >= n_lines:
                raise DataError(
                    f"{source}:{lineno}: frame declares {count} points but file ends early")
            rows = [_parse_floats(lines[i + 1 + j], lineno + 1 + j, source)
                    for j in range(count)]
            try:
                frames.append(Frame(ts, np.array(rows).reshape(count, 5)))
            except DataError as exc:
                raise DataError(f"{source}:{lineno}: {exc}") from None
            i += count
        elif line.startswith("M "):
            body = line[2:]
            if "=" not in body:
                raise DataError(f"{source}:{lineno}: meta line without '='")
            key, value = body.split("=", 1)
            if not key:
                raise DataError(f"{source}:{lineno}: empty meta key")
            if key in meta:
                raise DataError(f"{source}:{lineno}: duplicate meta key {key!r}")
            meta[key] = value
        elif line.startswith("L "):
            try:
                label = int(line[2:])
            except ValueError:
                raise DataError(f"{source}:{lineno}: malformed label {line!r}") from None
        else:
            raise DataError(f"{source}:{lineno}: unrecognized line {line!r}")
        i += 1

    try:
        return Sequence(tuple(frames), label=label, meta=meta)
    except DataError as exc:
        raise DataError(f"{source}: {exc}") from None


def write_sequence(seq: Sequence, path: str | Path) -> None:
    Path(path).write_text(sequence_to_text(seq), encoding="utf-8", newline="\n")


def load_sequence(path: str | Path) -> Sequence:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read sequence file {path}: {exc}") from None
    return sequence_from_text(text, source=str(path))


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

def write_dataset(ds: LabeledDataset, out_dir: str | Path) -> Path:
    """Write sequence files plus a manifest.json; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rel_paths = []
    for i, seq in enumerate(ds.sequences):
        rel = f"seq_{i:04d}.txt"
        write_sequence(seq, out / rel)
        rel_paths.append(rel)
    manifest = {
        "class_names": list(ds.class_names),
        "split": ds.split,
        "sequences": rel_paths,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return manifest_path


def load_dataset(path: str | Path) -> LabeledDataset:
    """Load a dataset from a manifest.json or the directory holding one."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.is_file():
        raise DataError(f"no manifest found at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON: {exc}") from None
    for key in ("class_names", "split", "sequences"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: manifest missing key {key!r}")
    base = manifest_path.parent
    seqs = [load_sequence(base / rel) for rel in manifest["sequences"]]
    return LabeledDataset(seqs, list(manifest["class_names"]), split=manifest["split"])


def load_splits(root: str | Path, required: tuple[str, ...] = ("train", "val")
                ) -> dict[str, LabeledDataset]:
    """Load the split subdirectories under a dataset root."""
    root = Path(root)
    splits = {}
    for name in VALID_SPLITS:
        sub = root / name
        if (sub / "manifest.json").is_file():
            splits[name] = load_dataset(sub)
    if not splits and (root / "manifest.json").is_file():
        ds = load_dataset(root)
        splits[ds.split] = ds
    missing = [name for name in required if name not in splits]
    if missing:
        raise DataError(f"dataset at {root} is missing required splits: {missing}")
    return splits
