"""Synthetic quasiperiodic signals with known static and dynamic factors.

Every subject owns a fixed pulse morphology (three Gaussian bumps per beat,
loosely P/QRS/T) and a base rate.  Each record follows a state schedule:
state 0 is a regular rhythm, state 1 drops the first bump and draws the
inter-beat intervals from a gamma distribution.  Outputs are pure functions
of the seeds, so the whole corpus can be regenerated bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import write_manifest, write_samples

FS = 100
WINDOW_S = 10

# morphology layout
T_AMP, QRS_AMP, P_AMP, P_WIDTH, QRS_WIDTH, T_WIDTH, P_OFFSET, T_OFFSET = range(8)

REGULAR_CV = 0.02
IRREGULAR_SHAPE = 16.0  # gamma shape k, cv = 1/sqrt(k) = 0.25
NOISE_FRACTION = 0.05
MIN_RECORD_S = 30


@dataclass(frozen=True)
class SubjectSpec:
    subject_id: int
    morphology: np.ndarray
    base_rate: float
    static_class: int

    def __eq__(self, other):
        if not isinstance(other, SubjectSpec):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and np.array_equal(self.morphology, other.morphology)
            and self.base_rate == other.base_rate
            and self.static_class == other.static_class
        )


@dataclass
class StateSchedule:
    segments: list[tuple[float, int]]
    total_duration_s: float

    def __post_init__(self):
        if not self.segments or self.segments[0][0] != 0:
            raise ValueError("schedule must start at 0 s")
        starts = [s for s, _ in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("segment starts must be strictly increasing")
        if starts[-1] >= self.total_duration_s:
            raise ValueError("segment starts beyond the record end")
        if any(state not in (0, 1) for _, state in self.segments):
            raise ValueError("states must be 0 or 1")

    @classmethod
    def constant(cls, duration_s: float, state: int = 0) -> StateSchedule:
        return cls([(0.0, state)], float(duration_s))

    def bounds(self) -> list[tuple[float, float, int]]:
        ends = [s for s, _ in self.segments[1:]] + [self.total_duration_s]
        return [(s, e, st) for (s, st), e in zip(self.segments, ends)]

    def state_at(self, t: np.ndarray | float) -> np.ndarray:
        starts = np.array([s for s, _ in self.segments])
        states = np.array([st for _, st in self.segments])
        idx = np.searchsorted(starts, t, side="right") - 1
        return states[np.clip(idx, 0, len(states) - 1)]

    def state_seconds(self, t0: float, t1: float) -> float:
        """Seconds spent in state 1 inside [t0, t1)."""
        total = 0.0
        for s, e, st in self.bounds():
            if st == 1:
                total += max(0.0, min(e, t1) - max(s, t0))
        return total

    def window_labels(self, window_s: float = WINDOW_S) -> np.ndarray:
        """Majority state per non-overlapping window; exact ties go to 1."""
        n = int(self.total_duration_s // window_s)
        labels = np.zeros(n, dtype=np.int64)
        for k in range(n):
            irregular = self.state_seconds(k * window_s, (k + 1) * window_s)
            labels[k] = int(irregular >= window_s / 2)
        return labels

    def to_json(self) -> dict:
        return {
            "segments": [[float(s), int(st)] for s, st in self.segments],
            "total_duration_s": float(self.total_duration_s),
        }

    @classmethod
    def from_json(cls, obj: dict) -> StateSchedule:
        return cls([(float(s), int(st)) for s, st in obj["segments"]], float(obj["total_duration_s"]))


@dataclass
class SynthRecord:
    subject_id: int
    record_id: int
    samples: np.ndarray
    window_labels: np.ndarray
    schedule: StateSchedule
    beat_times: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    fs: int = FS


def make_subject(seed: int, subject_id: int | None = None) -> SubjectSpec:
    rng = np.random.default_rng([seed, 0x5EED])
    morphology = rng.uniform(0.2, 2.0, size=8)
    base_rate = float(rng.uniform(50.0, 100.0))
    # a ratio survives per-record gain and z-scoring, an absolute amplitude does not
    static_class = int(morphology[T_AMP] > morphology[QRS_AMP])
    return SubjectSpec(
        subject_id=seed if subject_id is None else subject_id,
        morphology=morphology,
        base_rate=base_rate,
        static_class=static_class,
    )


def _bumps(morph: np.ndarray) -> list[tuple[float, float, float]]:
    """(offset_s, width_s, amplitude) for the P, QRS and T bumps."""
    return [
        (-(0.12 + 0.06 * morph[P_OFFSET]), 0.02 + 0.02 * morph[P_WIDTH], morph[P_AMP]),
        (0.0, 0.012 + 0.008 * morph[QRS_WIDTH], morph[QRS_AMP]),
        (0.20 + 0.10 * morph[T_OFFSET], 0.04 + 0.04 * morph[T_WIDTH], morph[T_AMP]),
    ]


def _beat_times(spec: SubjectSpec, schedule: StateSchedule, rng: np.random.Generator) -> np.ndarray:
    mean_ibi = 60.0 / spec.base_rate
    t = -rng.uniform(0.0, mean_ibi)
    times = []
    while t < schedule.total_duration_s + 1.0:
        times.append(t)
        if schedule.state_at(max(t, 0.0)) == 1:
            ibi = mean_ibi * rng.gamma(IRREGULAR_SHAPE, 1.0 / IRREGULAR_SHAPE)
        else:
            ibi = mean_ibi * (1.0 + REGULAR_CV * rng.standard_normal())
        t += max(ibi, 0.3)
    return np.asarray(times)


def synthesize_record(
    spec: SubjectSpec, schedule: StateSchedule, record_seed: int, record_id: int = 0
) -> SynthRecord:
    if schedule.total_duration_s < MIN_RECORD_S:
        raise ValueError(f"schedule shorter than {MIN_RECORD_S} s")
    rng = np.random.default_rng([spec.subject_id, record_seed, 0xECC])
    n = int(round(schedule.total_duration_s * FS))
    t = np.arange(n) / FS

    # small per-record morphology drift, same subject still recognisable
    morph = spec.morphology * (1.0 + 0.03 * rng.standard_normal(8))
    beats = _beat_times(spec, schedule, rng)
    states = schedule.state_at(np.clip(beats, 0.0, None))

    clean = np.zeros(n)
    for bt, st in zip(beats, states):
        for k, (offset, width, amp) in enumerate(_bumps(morph)):
            if k == 0 and st == 1:
                continue
            centre = bt + offset
            lo = max(int((centre - 5 * width) * FS), 0)
            hi = min(int((centre + 5 * width) * FS) + 2, n)
            if hi <= lo:
                continue
            seg = t[lo:hi]
            clean[lo:hi] += amp * np.exp(-0.5 * ((seg - centre) / width) ** 2)

    scale = np.max(np.abs(clean)) if np.any(clean) else 1.0
    signal = clean + NOISE_FRACTION * scale * rng.standard_normal(n)
    # device gain and offset; preprocessing is expected to remove both
    signal = rng.uniform(0.5, 2.0) * signal + rng.uniform(-1.0, 1.0)

    return SynthRecord(
        subject_id=spec.subject_id,
        record_id=record_id,
        samples=signal.astype(np.float64),
        window_labels=schedule.window_labels(),
        schedule=schedule,
        beat_times=beats,
    )


def _mixed_schedule(duration_s: int, rng: np.random.Generator) -> StateSchedule:
    """One irregular episode covering roughly 35-55% of the record."""
    length = int(rng.integers(int(0.35 * duration_s), int(0.55 * duration_s) + 1))
    latest = duration_s - length - 10
    start = int(rng.integers(10, max(latest, 11)))
    segments = [(0.0, 0), (float(start), 1)]
    if start + length < duration_s:
        segments.append((float(start + length), 0))
    return StateSchedule(segments, float(duration_s))


def write_record(record: SynthRecord, path: Path, extra: dict | None = None) -> None:
    """Raw float32 little-endian samples plus a JSON sidecar next to them."""
    meta = {
        "subject_id": int(record.subject_id),
        "record_id": int(record.record_id),
        "fs": int(record.fs),
        "window_labels": [int(v) for v in record.window_labels],
        "schedule": record.schedule.to_json(),
    }
    meta.update(extra or {})
    write_samples(path, record.samples, meta)


def generate_dataset(
    n_subjects: int,
    records_per_subject: int,
    duration_s: int,
    seed: int,
    out_dir: str | Path,
) -> Path:
    """Write records and ``manifest.csv``; return the manifest path.

    Record 0 of each subject contains an irregular episode, every other
    record is regular throughout.
    """
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects")
    if records_per_subject < 2:
        raise ValueError("need at least 2 records per subject")
    if duration_s < MIN_RECORD_S:
        raise ValueError(f"duration must be at least {MIN_RECORD_S} s")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in range(n_subjects):
        spec = make_subject(seed * 100_003 + s, subject_id=s)
        sched_rng = np.random.default_rng([seed, s, 0x5C4ED])
        for r in range(records_per_subject):
            if r == 0:
                schedule = _mixed_schedule(duration_s, sched_rng)
            else:
                schedule = StateSchedule.constant(duration_s, 0)
            rec = synthesize_record(spec, schedule, record_seed=seed * 1000 + r, record_id=r)
            rel = Path("records") / f"s{s:03d}_r{r:02d}.f32"
            write_record(
                rec,
                out_dir / rel,
                extra={
                    "static_class": spec.static_class,
                    "morphology": [float(v) for v in spec.morphology],
                    "base_rate": spec.base_rate,
                },
            )
            rows.append((s, r, rel.as_posix(), duration_s))

    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
