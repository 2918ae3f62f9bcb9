"""Four-window training batches: one window from record A, a time-ordered
triplet from record B of the same subject."""

from __future__ import annotations

import copy
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import read_manifest
from .pipeline import TARGET_FS, WINDOW_LEN, load_record

WINDOW_S = WINDOW_LEN // TARGET_FS
MAX_PREFETCH = 4


@dataclass
class CorpusRecord:
    subject_id: int
    record_id: int
    samples: np.ndarray
    kept_windows: np.ndarray
    window_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def duration_s(self) -> float:
        return self.samples.size / TARGET_FS


class Corpus:
    """Preprocessed 100 Hz records grouped by subject."""

    def __init__(self, records: list[CorpusRecord]):
        self.records = list(records)
        self.by_subject: dict[int, list[CorpusRecord]] = {}
        for rec in self.records:
            self.by_subject.setdefault(rec.subject_id, []).append(rec)

    @classmethod
    def from_manifest(cls, manifest: str | Path) -> Corpus:
        records = []
        for row in read_manifest(manifest):
            rec = load_record(row.path)
            if rec.fs != TARGET_FS:
                raise ValueError(f"{row.path}: expected a preprocessed 100 Hz record, got fs={rec.fs}")
            n_windows = rec.samples.size // WINDOW_LEN
            kept = np.asarray(rec.meta.get("kept_windows", range(n_windows)), dtype=np.int64)
            labels = rec.meta.get("window_labels")
            records.append(
                CorpusRecord(
                    rec.subject_id,
                    rec.record_id,
                    rec.samples.astype(np.float32),
                    kept,
                    None if labels is None else np.asarray(labels, dtype=np.int64),
                    rec.meta,
                )
            )
        return cls(records)

    @classmethod
    def from_arrays(cls, arrays: dict[int, list[np.ndarray]]) -> Corpus:
        records = []
        for sid, recs in arrays.items():
            for rid, x in enumerate(recs):
                x = np.asarray(x, dtype=np.float32)
                records.append(CorpusRecord(sid, rid, x, np.arange(x.size // WINDOW_LEN)))
        return cls(records)

    @property
    def subject_ids(self) -> list[int]:
        return sorted(self.by_subject)

    def eligible_subjects(self, window_size_s: int = 120) -> list[int]:
        out = []
        for sid, recs in sorted(self.by_subject.items()):
            if len(recs) >= 2 and any(r.duration_s >= window_size_s for r in recs):
                out.append(sid)
        return out


@dataclass
class QuadItem:
    x1: np.ndarray
    x_tmi: np.ndarray
    x_t: np.ndarray
    x_tpj: np.ndarray
    i_s: int
    j_s: int
    subject_id: int
    t_s: int
    record_a: int
    record_b: int


@dataclass
class QuadBatch:
    x1: np.ndarray
    x_tmi: np.ndarray
    x_t: np.ndarray
    x_tpj: np.ndarray
    i_s: np.ndarray
    j_s: np.ndarray
    subject_ids: np.ndarray
    t_s: np.ndarray
    sampler_state: dict | None = None  # RNG state right after this batch was drawn

    def __len__(self) -> int:
        return self.x1.shape[0]


def offset_bounds(window_size_s: int = 120, min_offset_s: int = WINDOW_S) -> tuple[int, int]:
    """Inclusive integer-second range for each of the two offsets."""
    if min_offset_s < WINDOW_S:
        raise ValueError("offsets below 10 s would make triplet windows overlap")
    hi = (window_size_s - WINDOW_S) // 2
    if hi < min_offset_s:
        raise ValueError(f"window_size_s={window_size_s} leaves no room for offsets >= {min_offset_s}")
    return min_offset_s, hi


def _window(x: np.ndarray, start_s: int) -> np.ndarray:
    lo = start_s * TARGET_FS
    return x[lo : lo + WINDOW_LEN]


def sample_quad(
    corpus: Corpus,
    subject_id: int,
    rng: np.random.Generator,
    window_size_s: int = 120,
    min_offset_s: int = WINDOW_S,
) -> QuadItem:
    recs = corpus.by_subject.get(subject_id, [])
    if len(recs) < 2:
        raise ValueError(f"subject {subject_id} has {len(recs)} record(s); need 2 for cross-record pairing")
    lo, hi = offset_bounds(window_size_s, min_offset_s)
    b_candidates = [k for k, r in enumerate(recs) if r.duration_s >= window_size_s]
    if not b_candidates:
        raise ValueError(f"subject {subject_id}: no record spans {window_size_s} s")

    b = b_candidates[rng.integers(len(b_candidates))]
    a_candidates = [k for k in range(len(recs)) if k != b and len(recs[k].kept_windows)]
    if not a_candidates:
        raise ValueError(f"subject {subject_id}: no usable window in a second record")
    a = a_candidates[rng.integers(len(a_candidates))]
    rec_a, rec_b = recs[a], recs[b]

    i_s = int(rng.integers(lo, hi + 1))
    j_s = int(rng.integers(lo, hi + 1))
    last = int(rec_b.duration_s) - j_s - WINDOW_S
    t_s = int(rng.integers(i_s, last + 1))
    k1 = int(rec_a.kept_windows[rng.integers(len(rec_a.kept_windows))])

    return QuadItem(
        x1=rec_a.samples[k1 * WINDOW_LEN : (k1 + 1) * WINDOW_LEN],
        x_tmi=_window(rec_b.samples, t_s - i_s),
        x_t=_window(rec_b.samples, t_s),
        x_tpj=_window(rec_b.samples, t_s + j_s),
        i_s=i_s,
        j_s=j_s,
        subject_id=subject_id,
        t_s=t_s,
        record_a=rec_a.record_id,
        record_b=rec_b.record_id,
    )


def build_batch(
    corpus: Corpus,
    batch_size: int,
    rng: np.random.Generator,
    window_size_s: int = 120,
    min_offset_s: int = WINDOW_S,
    max_redraws: int = 8,
) -> QuadBatch:
    eligible = corpus.eligible_subjects(window_size_s)
    if not eligible:
        raise ValueError("no subject with two records long enough for the configured window")
    items: list[QuadItem] = []
    seen: set[tuple[int, int, int]] = set()
    for _ in range(batch_size):
        for _attempt in range(max_redraws):
            sid = eligible[rng.integers(len(eligible))]
            item = sample_quad(corpus, sid, rng, window_size_s, min_offset_s)
            key = (item.subject_id, item.record_b, item.t_s)
            if key not in seen:
                break
        seen.add(key)
        items.append(item)
    return QuadBatch(
        x1=np.stack([it.x1 for it in items]).astype(np.float32),
        x_tmi=np.stack([it.x_tmi for it in items]).astype(np.float32),
        x_t=np.stack([it.x_t for it in items]).astype(np.float32),
        x_tpj=np.stack([it.x_tpj for it in items]).astype(np.float32),
        i_s=np.array([it.i_s for it in items], dtype=np.int64),
        j_s=np.array([it.j_s for it in items], dtype=np.int64),
        subject_ids=np.array([it.subject_id for it in items], dtype=np.int64),
        t_s=np.array([it.t_s for it in items], dtype=np.int64),
    )


class BatchSampler:
    """Owns the RNG; yields batches in a fixed order for a given seed."""

    def __init__(self, corpus: Corpus, batch_size: int, seed: int, window_size_s: int = 120, min_offset_s: int = WINDOW_S):
        self.corpus = corpus
        self.batch_size = batch_size
        self.window_size_s = window_size_s
        self.min_offset_s = min_offset_s
        self.rng = np.random.default_rng(seed)

    def next_batch(self) -> QuadBatch:
        batch = build_batch(self.corpus, self.batch_size, self.rng, self.window_size_s, self.min_offset_s)
        batch.sampler_state = copy.deepcopy(self.rng.bit_generator.state)
        return batch

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


class Prefetcher:
    """Builds batches on one side thread through a bounded queue.

    With a single producer the batch order is the same as calling
    ``sampler.next_batch()`` inline.
    """

    def __init__(self, sampler: BatchSampler, n_batches: int, depth: int = 2):
        if not 1 <= depth <= MAX_PREFETCH:
            raise ValueError(f"prefetch depth must be in [1, {MAX_PREFETCH}]")
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(sampler, n_batches), daemon=True)
        self._thread.start()

    def _run(self, sampler: BatchSampler, n_batches: int) -> None:
        try:
            for _ in range(n_batches):
                if self._stop.is_set():
                    return
                self._queue.put(sampler.next_batch())
        except Exception as exc:  # surfaced on the consumer side
            self._queue.put(exc)
            return
        self._queue.put(None)

    def __iter__(self):
        return self

    def __next__(self) -> QuadBatch:
        item = self._queue.get()
        if item is None:
            raise StopIteration
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        while not self._queue.empty():
            self._queue.get_nowait()
