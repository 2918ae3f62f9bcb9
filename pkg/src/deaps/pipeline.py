"""Preprocessing: resample to 100 Hz, 0.5 Hz high-pass, z-score, 10 s tiling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .io import config_hash, read_manifest, read_samples, write_manifest, write_samples

TARGET_FS = 100
WINDOW_LEN = 1000
HIGHPASS_HZ = 0.5
HIGHPASS_ORDER = 5
MIN_FS = 50

FLATLINE_STD = 0.05
CLIP_FRACTION = 0.05

PIPELINE_CONFIG = {
    "fs": TARGET_FS,
    "window_len": WINDOW_LEN,
    "highpass_hz": HIGHPASS_HZ,
    "highpass_order": HIGHPASS_ORDER,
    "zero_phase": True,
    "normalize": "record",
    "flatline_std": FLATLINE_STD,
    "clip_fraction": CLIP_FRACTION,
}
PIPELINE_HASH = config_hash(PIPELINE_CONFIG)


@dataclass
class SignalRecord:
    subject_id: int
    record_id: int
    fs: float
    samples: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise ValueError("fs must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")


@dataclass
class WindowSet:
    windows: np.ndarray
    start_times_s: np.ndarray
    labels: np.ndarray | None = None
    subject_id: int | None = None
    record_id: int | None = None

    def __len__(self) -> int:
        return self.windows.shape[0]

    def subset(self, keep: np.ndarray) -> WindowSet:
        return replace(
            self,
            windows=self.windows[keep],
            start_times_s=self.start_times_s[keep],
            labels=None if self.labels is None else self.labels[keep],
        )


def resample_to_100hz(record: SignalRecord) -> SignalRecord:
    if record.fs < MIN_FS:
        raise ValueError(f"fs={record.fs} Hz below {MIN_FS} Hz; refusing to upsample an aliased signal")
    if record.fs == TARGET_FS:
        return replace(record, samples=record.samples.copy())
    ratio = Fraction(TARGET_FS / record.fs).limit_denominator(1000)
    out = sps.resample_poly(record.samples, ratio.numerator, ratio.denominator)
    return replace(record, fs=TARGET_FS, samples=out)


def _highpass_sos() -> np.ndarray:
    return sps.butter(HIGHPASS_ORDER, HIGHPASS_HZ, btype="highpass", fs=TARGET_FS, output="sos")


def highpass(record: SignalRecord) -> SignalRecord:
    if record.fs != TARGET_FS:
        raise ValueError("highpass expects a 100 Hz record; resample first")
    out = sps.sosfiltfilt(_highpass_sos(), record.samples)
    return replace(record, samples=out)


def normalize(record: SignalRecord) -> SignalRecord:
    x = record.samples
    std = x.std(ddof=1) if x.size > 1 else 0.0
    if not std > 0:
        raise ValueError("cannot normalize a zero-variance record")
    return replace(record, samples=(x - x.mean()) / std)


def windowize(record: SignalRecord, labels: np.ndarray | None = None) -> WindowSet:
    n = record.samples.size // WINDOW_LEN
    if n < 1:
        raise ValueError("record shorter than one 10 s window")
    windows = record.samples[: n * WINDOW_LEN].reshape(n, WINDOW_LEN).copy()
    starts = np.arange(n) * (WINDOW_LEN / TARGET_FS)
    if labels is not None:
        labels = np.asarray(labels)[:n]
    return WindowSet(windows, starts, labels, record.subject_id, record.record_id)


def quality_mask(windows: np.ndarray, record_min: float | None = None, record_max: float | None = None) -> np.ndarray:
    """True for windows that are neither flat nor clipped.

    Clipping counts samples sitting at the record extremes (or the window's
    own extremes when no record bounds are given).
    """
    windows = np.atleast_2d(windows)
    flat = windows.std(axis=1) < FLATLINE_STD
    lo = windows.min(axis=1) if record_min is None else np.full(len(windows), record_min)
    hi = windows.max(axis=1) if record_max is None else np.full(len(windows), record_max)
    tol = 1e-6 * np.maximum(np.abs(hi - lo), 1.0)
    at_rail = (np.abs(windows - lo[:, None]) <= tol[:, None]) | (np.abs(windows - hi[:, None]) <= tol[:, None])
    clipped = at_rail.mean(axis=1) >= CLIP_FRACTION
    return ~(flat | clipped)


def quality_filter(windows: WindowSet, record_min: float | None = None, record_max: float | None = None) -> WindowSet:
    return windows.subset(quality_mask(windows.windows, record_min, record_max))


def preprocess_record(record: SignalRecord) -> SignalRecord:
    """resample -> highpass -> normalize, in that order."""
    return normalize(highpass(resample_to_100hz(record)))


def preprocess_windows(record: SignalRecord, labels: np.ndarray | None = None) -> WindowSet:
    clean = preprocess_record(record)
    ws = windowize(clean, labels)
    return quality_filter(ws, clean.samples.min(), clean.samples.max())


def load_record(path: str | Path) -> SignalRecord:
    samples, meta = read_samples(path)
    return SignalRecord(int(meta["subject_id"]), int(meta["record_id"]), float(meta["fs"]), samples, meta)


def preprocess_manifest(in_manifest: str | Path, out_dir: str | Path) -> Path:
    """Preprocess every record of a manifest into ``out_dir``.

    Processed records keep their full length (training samples triplets at
    arbitrary second offsets); the sidecar lists the tiling windows that
    passed the quality check.
    """
    out_dir = Path(out_dir)
    rows = []
    for row in read_manifest(in_manifest):
        rec = load_record(row.path)
        clean = preprocess_record(rec)
        ws = windowize(clean, rec.meta.get("window_labels"))
        keep = quality_mask(ws.windows, clean.samples.min(), clean.samples.max())
        meta = dict(rec.meta)
        meta.update(
            fs=TARGET_FS,
            kept_windows=[int(k) for k in np.flatnonzero(keep)],
            pipeline_hash=PIPELINE_HASH,
        )
        if "window_labels" in meta:
            meta["window_labels"] = [int(v) for v in meta["window_labels"][: len(ws)]]
        rel = Path("records") / row.path.name
        write_samples(out_dir / rel, clean.samples, meta)
        rows.append((row.subject_id, row.record_id, rel.as_posix(), clean.samples.size / TARGET_FS))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
