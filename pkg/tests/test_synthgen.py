import csv
import json

import numpy as np
import pytest
from scipy import signal as sps
from scipy import stats

from deaps.synthgen import (
    FS,
    StateSchedule,
    generate_dataset,
    make_subject,
    synthesize_record,
)


def test_make_subject_deterministic():
    assert make_subject(0) == make_subject(0)


def test_make_subject_distinct_seeds():
    assert not np.array_equal(make_subject(0).morphology, make_subject(1).morphology)


def test_subject_invariants():
    for seed in range(50):
        s = make_subject(seed)
        assert 50 <= s.base_rate <= 100
        assert np.all((s.morphology >= 0.2) & (s.morphology <= 2.0))
        assert s.morphology.shape == (8,)


def test_static_class_balance():
    classes = np.array([make_subject(seed).static_class for seed in range(1000)])
    assert 0.4 <= classes.mean() <= 0.6


@pytest.mark.parametrize(
    "segments",
    [
        [(5.0, 0)],
        [(0.0, 0), (10.0, 1), (10.0, 0)],
        [(0.0, 2)],
        [(0.0, 0), (70.0, 1)],
    ],
)
def test_schedule_rejects_invalid(segments):
    with pytest.raises(ValueError):
        StateSchedule(segments, 60.0)


def test_regular_record_labels_all_zero():
    rec = synthesize_record(make_subject(3), StateSchedule.constant(60), record_seed=1)
    assert rec.samples.size == 60 * FS
    assert rec.window_labels.tolist() == [0] * 6


def test_short_schedule_rejected():
    with pytest.raises(ValueError):
        synthesize_record(make_subject(3), StateSchedule.constant(20), record_seed=1)


def _mean_template(x: np.ndarray) -> np.ndarray:
    """Average of pulses aligned on their dominant peak (independent of the generator's beat list)."""
    x = (x - np.median(x)) / np.std(x)
    peaks, _ = sps.find_peaks(x, distance=int(0.45 * FS), height=np.percentile(x, 99) * 0.5)
    half = int(0.3 * FS)
    peaks = peaks[(peaks > half) & (peaks < x.size - half)]
    return np.mean([x[p - half : p + half] for p in peaks], axis=0)


def test_same_subject_templates_correlate():
    spec = make_subject(11)
    sched = StateSchedule.constant(120)
    a = synthesize_record(spec, sched, record_seed=1).samples
    b = synthesize_record(spec, sched, record_seed=2).samples
    r = np.corrcoef(_mean_template(a), _mean_template(b))[0, 1]
    assert r > 0.9


def _ibi_cv(beats: np.ndarray, t0: float, t1: float) -> float:
    inside = beats[(beats >= t0) & (beats < t1)]
    ibi = np.diff(inside)
    return ibi.std() / ibi.mean()


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_irregular_segment_cv(seed):
    spec = make_subject(seed)
    sched = StateSchedule([(0.0, 0), (60.0, 1)], 180.0)
    rec = synthesize_record(spec, sched, record_seed=seed)
    assert _ibi_cv(rec.beat_times, 60.0, 180.0) >= 0.15
    assert _ibi_cv(rec.beat_times, 0.0, 60.0) <= 0.05


def test_irregular_drops_first_bump():
    """Regular and irregular windows differ in the energy just before each beat."""
    spec = make_subject(5)
    sched = StateSchedule([(0.0, 0), (60.0, 1)], 120.0)
    rec = synthesize_record(spec, sched, record_seed=0)
    pre = []
    for bt in rec.beat_times[(rec.beat_times > 1) & (rec.beat_times < 119)]:
        k = int(round(bt * FS))
        pre.append((bt >= 60, np.abs(rec.samples[k - 20 : k - 8] - rec.samples[k - 30]).mean()))
    regular = np.mean([v for irr, v in pre if not irr])
    irregular = np.mean([v for irr, v in pre if irr])
    assert irregular < regular


def test_window_labels_majority_and_ties():
    sched = StateSchedule([(0.0, 0), (15.0, 1), (34.0, 0)], 40.0)
    # windows: [0,10)->0, [10,20)->5 s irregular tie->1, [20,30)->1, [30,40)->4 s->0
    assert sched.window_labels().tolist() == [0, 1, 1, 0]


def test_generate_dataset_counts(tmp_path):
    manifest = generate_dataset(4, 2, 300, seed=7, out_dir=tmp_path)
    with open(manifest) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert list(rows[0]) == ["subject_id", "record_id", "path", "duration_s"]
    n_windows = 0
    for row in rows:
        meta = json.loads((tmp_path / row["path"]).with_suffix(".json").read_text())
        assert meta["fs"] == 100 and meta["n_samples"] == 30000
        data = np.fromfile(tmp_path / row["path"], dtype="<f4")
        assert data.size == meta["n_samples"]
        n_windows += len(meta["window_labels"])
    assert n_windows == 240


def test_generate_dataset_record_kinds(tmp_path):
    manifest = generate_dataset(3, 3, 120, seed=1, out_dir=tmp_path)
    with open(manifest) as fh:
        rows = list(csv.DictReader(fh))
    for sid in range(3):
        labels = [
            json.loads((tmp_path / r["path"]).with_suffix(".json").read_text())["window_labels"]
            for r in rows
            if int(r["subject_id"]) == sid
        ]
        assert any(0 in lab and 1 in lab for lab in labels)
        assert any(set(lab) == {0} for lab in labels)


def test_generate_dataset_deterministic(tmp_path):
    m1 = generate_dataset(2, 2, 60, seed=3, out_dir=tmp_path / "a")
    m2 = generate_dataset(2, 2, 60, seed=3, out_dir=tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    for f in (tmp_path / "a" / "records").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "records" / f.name).read_bytes()


@pytest.mark.parametrize("args", [(1, 2, 60), (2, 1, 60)])
def test_generate_dataset_rejects(tmp_path, args):
    with pytest.raises(ValueError):
        generate_dataset(*args, seed=0, out_dir=tmp_path)


def test_label_histogram_matches_schedule(tmp_path):
    manifest = generate_dataset(6, 2, 300, seed=2, out_dir=tmp_path)
    with open(manifest) as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        meta = json.loads((tmp_path / row["path"]).with_suffix(".json").read_text())
        sched = StateSchedule.from_json(meta["schedule"])
        irregular_s = sum(e - s for s, e, st in sched.bounds() if st == 1)
        n_transitions = len(sched.segments) - 1
        assert abs(sum(meta["window_labels"]) - irregular_s / 10) <= n_transitions


def test_morphology_independent_of_state(tmp_path):
    manifest = generate_dataset(24, 2, 300, seed=4, out_dir=tmp_path)
    with open(manifest) as fh:
        rows = list(csv.DictReader(fh))
    feats, labels = [], []
    for row in rows:
        meta = json.loads((tmp_path / row["path"]).with_suffix(".json").read_text())
        for lab in meta["window_labels"]:
            feats.append(meta["morphology"])
            labels.append(lab)
    feats, labels = np.asarray(feats), np.asarray(labels)
    for k in range(feats.shape[1]):
        p = stats.ttest_ind(feats[labels == 0, k], feats[labels == 1, k], equal_var=False).pvalue
        assert p > 0.001
