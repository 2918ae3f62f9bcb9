"""Downstream evaluation of frozen encoders.

Representations are extracted once per checkpoint, then probed with an
RBF support-vector classifier under subject-disjoint protocols (single
split, leave-one-subject-out, subject k-fold, few-record transfer).  A
PCA report checks which principal directions carry subject identity and
which carry the per-window state.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np
import pandas as pd
import torch
from scipy import stats
from sklearn.model_selection import StratifiedGroupKFold
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVC

from .model import encode, list_checkpoints, network_from_checkpoint
from .pipeline import WINDOW_LEN
from .sampling import Corpus

log = logging.getLogger(__name__)

POSITIVE_CLASS = 1
EFFECT_THRESHOLD = 0.8
N_PCA_COMPONENTS = 6

Selector = Union[np.ndarray, Callable[["RepresentationTable"], np.ndarray]]


@dataclass
class RepresentationTable:
    subject_id: np.ndarray
    record_id: np.ndarray
    window_start_s: np.ndarray
    h: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.h.shape[0]

    def select(self, mask: np.ndarray) -> RepresentationTable:
        mask = np.asarray(mask)
        return RepresentationTable(
            self.subject_id[mask],
            self.record_id[mask],
            self.window_start_s[mask],
            self.h[mask],
            {k: v[mask] for k, v in self.labels.items()},
        )

    def to_frame(self) -> pd.DataFrame:
        cols = {
            "subject_id": self.subject_id,
            "record_id": self.record_id,
            "window_start_s": self.window_start_s,
        }
        for name, values in self.labels.items():
            cols[f"label.{name}"] = values
        for k in range(self.h.shape[1]):
            cols[f"h_{k}"] = self.h[:, k]
        return pd.DataFrame(cols)

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: str | Path) -> RepresentationTable:
        df = pd.read_csv(path)
        h_cols = sorted((c for c in df.columns if c.startswith("h_")), key=lambda c: int(c[2:]))
        return cls(
            df["subject_id"].to_numpy(),
            df["record_id"].to_numpy(),
            df["window_start_s"].to_numpy(dtype=float),
            df[h_cols].to_numpy(dtype=np.float64),
            {c[len("label.") :]: df[c].to_numpy() for c in df.columns if c.startswith("label.")},
        )


@torch.no_grad()
def embed_windows(net, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    net.eval()
    out = []
    for lo in range(0, len(windows), batch_size):
        x = torch.as_tensor(windows[lo : lo + batch_size], dtype=torch.float32)
        out.append(encode(net, x).double().numpy())
    return np.concatenate(out) if out else np.empty((0, net.cfg.model_dim))


def embed_corpus(net, corpus: Corpus, batch_size: int = 256) -> RepresentationTable:
    """One row per quality-checked 10 s window of every record."""
    sids, rids, starts, wins = [], [], [], []
    labels: dict[str, list] = {"state": [], "static_class": [], "subject": []}
    for rec in corpus.records:
        for k in rec.kept_windows:
            sids.append(rec.subject_id)
            rids.append(rec.record_id)
            starts.append(float(k * WINDOW_LEN // 100))
            wins.append(rec.samples[k * WINDOW_LEN : (k + 1) * WINDOW_LEN])
            labels["state"].append(-1 if rec.window_labels is None else int(rec.window_labels[k]))
            labels["static_class"].append(int(rec.meta.get("static_class", -1)))
            labels["subject"].append(rec.subject_id)
    h = embed_windows(net, np.asarray(wins, dtype=np.float32).reshape(-1, WINDOW_LEN), batch_size)
    return RepresentationTable(
        np.asarray(sids),
        np.asarray(rids),
        np.asarray(starts),
        h,
        {k: np.asarray(v) for k, v in labels.items()},
    )


def embed(checkpoint: str | Path, manifest: str | Path, batch_size: int = 256) -> RepresentationTable:
    net, meta = network_from_checkpoint(checkpoint)
    corpus = Corpus.from_manifest(manifest)
    expected = meta.get("pipeline_hash")
    if expected is not None:
        found = {r.meta.get("pipeline_hash") for r in corpus.records}
        if found != {expected}:
            raise ValueError(f"pipeline hash mismatch: checkpoint trained on {expected}, data has {sorted(map(str, found))}")
    return embed_corpus(net, corpus, batch_size)


# ---------------------------------------------------------------- metrics


@dataclass
class FoldResult:
    test_subjects: list[int]
    accuracy: float
    n_test: int


@dataclass
class ProbeResult:
    """Probe metrics.  For cross-validation ``accuracy`` is the mean of the
    per-fold accuracies and ``confusion`` is pooled over folds."""

    accuracy: float
    sensitivity: float | None
    specificity: float | None
    confusion: np.ndarray
    classes: list
    per_class_accuracy: dict
    folds: list[FoldResult] = field(default_factory=list)
    accuracy_std: float = 0.0

    def summary(self) -> str:
        def pct(v):
            return "n/a" if v is None else f"{100 * v:.1f}"

        acc = f"{100 * self.accuracy:.1f}"
        if self.folds:
            acc += f"±{100 * self.accuracy_std:.1f}"
        return f"acc {acc}  sens {pct(self.sensitivity)}  spec {pct(self.specificity)}"


def binary_metrics(tp: int, fn: int, tn: int, fp: int) -> tuple[float, float | None, float | None]:
    """Accuracy, sensitivity, specificity; undefined ratios come back as None."""
    total = tp + fn + tn + fp
    acc = (tp + tn) / total if total else float("nan")
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return acc, sens, spec


def _result_from_predictions(y_true: np.ndarray, y_pred: np.ndarray, classes: list) -> ProbeResult:
    idx = {c: k for k, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        conf[idx[t], idx[p]] += 1
    per_class = {c: (conf[k, k] / conf[k].sum() if conf[k].sum() else None) for c, k in idx.items()}
    acc = float(np.trace(conf) / conf.sum()) if conf.sum() else float("nan")
    sens = spec = None
    if set(classes) <= {0, 1} and len(classes) == 2:
        p, n = idx[POSITIVE_CLASS], idx[1 - POSITIVE_CLASS]
        _, sens, spec = binary_metrics(conf[p, p], conf[p, n], conf[n, n], conf[n, p])
    return ProbeResult(acc, sens, spec, conf, list(classes), per_class)


# ---------------------------------------------------------------- probes


class _ConstantClassifier:
    def __init__(self, value):
        self.value = value

    def predict(self, x):
        return np.full(len(x), self.value)


@dataclass
class Probe:
    model: object
    label_name: str
    train_subjects: frozenset
    classes: list


def _mask(table: RepresentationTable, selector: Selector | None) -> np.ndarray:
    if selector is None:
        return np.ones(len(table), dtype=bool)
    mask = selector(table) if callable(selector) else np.asarray(selector)
    if mask.dtype != bool:
        full = np.zeros(len(table), dtype=bool)
        full[mask] = True
        mask = full
    return mask


def fit_probe(table: RepresentationTable, label_name: str, train_selector: Selector | None = None) -> Probe:
    """Standardize on the training rows, then RBF SVC with C=1."""
    train = table.select(_mask(table, train_selector))
    y = train.labels[label_name]
    classes = sorted(np.unique(table.labels[label_name]).tolist())
    if len(np.unique(y)) < 2:
        model = _ConstantClassifier(y[0])
    else:
        model = make_pipeline(StandardScaler(), SVC(kernel="rbf", C=1.0))
        model.fit(train.h, y)
    return Probe(model, label_name, frozenset(train.subject_id.tolist()), classes)


def score_probe(probe: Probe, table: RepresentationTable, test_selector: Selector | None = None) -> ProbeResult:
    test = table.select(_mask(table, test_selector))
    overlap = probe.train_subjects & set(test.subject_id.tolist())
    if overlap:
        raise ValueError(f"subject leak: {sorted(overlap)} appear in both train and test")
    y = test.labels[probe.label_name]
    pred = probe.model.predict(test.h)
    return _result_from_predictions(y, pred, probe.classes)


def _aggregate(folds: list[tuple[ProbeResult, list[int]]], classes: list) -> ProbeResult:
    conf = sum(r.confusion for r, _ in folds)
    pooled = ProbeResult(0.0, None, None, conf, classes, {})
    accs = np.array([r.accuracy for r, _ in folds])
    idx = {c: k for k, c in enumerate(classes)}
    sens = spec = None
    if set(classes) <= {0, 1} and len(classes) == 2:
        p, n = idx[POSITIVE_CLASS], idx[1 - POSITIVE_CLASS]
        _, sens, spec = binary_metrics(conf[p, p], conf[p, n], conf[n, n], conf[n, p])
    pooled.accuracy = float(accs.mean())
    pooled.accuracy_std = float(accs.std())
    pooled.sensitivity, pooled.specificity = sens, spec
    pooled.per_class_accuracy = {c: (conf[k, k] / conf[k].sum() if conf[k].sum() else None) for c, k in idx.items()}
    pooled.folds = [FoldResult(subjects, r.accuracy, int(r.confusion.sum())) for r, subjects in folds]
    return pooled


def _run_folds(table: RepresentationTable, label_name: str, test_groups: list[list[int]]) -> ProbeResult:
    classes = sorted(np.unique(table.labels[label_name]).tolist())
    results = []
    for subjects in test_groups:
        test_mask = np.isin(table.subject_id, subjects)
        probe = fit_probe(table, label_name, ~test_mask)
        if probe.train_subjects & set(subjects):
            raise AssertionError("fold construction leaked a subject")
        res = score_probe(probe, table, test_mask)
        res.classes = classes
        results.append((res, list(subjects)))
    return _aggregate(results, classes)


def loo_cv(table: RepresentationTable, label_name: str) -> ProbeResult:
    subjects = sorted(np.unique(table.subject_id).tolist())
    if len(subjects) < 2:
        raise ValueError("leave-one-subject-out needs at least 2 subjects")
    return _run_folds(table, label_name, [[s] for s in subjects])


def kfold_cv(table: RepresentationTable, label_name: str, k: int = 5, seed: int = 0) -> ProbeResult:
    """Subject-level k-fold, stratified on each subject's majority label."""
    subjects = np.unique(table.subject_id)
    if len(subjects) < k:
        raise ValueError(f"{k}-fold needs at least {k} subjects, got {len(subjects)}")
    y = table.labels[label_name]
    majority = {s: stats.mode(y[table.subject_id == s], keepdims=False).mode for s in subjects}
    subj_y = np.array([majority[s] for s in subjects])
    try:
        splitter = StratifiedGroupKFold(n_splits=k, shuffle=True, random_state=seed)
        splits = list(splitter.split(subjects, subj_y, groups=subjects))
    except ValueError:
        perm = np.random.default_rng(seed).permutation(len(subjects))
        splits = [(None, fold) for fold in np.array_split(perm, k)]
    groups = [sorted(subjects[test].tolist()) for _, test in splits]
    return _run_folds(table, label_name, groups)


def few_record_probe(table: RepresentationTable, label_name: str, n_records: int = 4, seed: int = 0) -> ProbeResult:
    """Fit on a handful of records that contain both classes, test on every
    window of the remaining subjects."""
    rng = np.random.default_rng(seed)
    y = table.labels[label_name]
    candidates = []
    for s in np.unique(table.subject_id):
        for r in np.unique(table.record_id[table.subject_id == s]):
            m = (table.subject_id == s) & (table.record_id == r)
            if len(np.unique(y[m])) > 1:
                candidates.append((s, r))
    if len(candidates) < n_records:
        raise ValueError(f"only {len(candidates)} records contain both classes; asked for {n_records}")
    order = rng.permutation(len(candidates))
    chosen, used_subjects = [], set()
    for k in order:
        s, r = candidates[k]
        if s not in used_subjects:
            chosen.append((s, r))
            used_subjects.add(s)
        if len(chosen) == n_records:
            break
    train = np.zeros(len(table), dtype=bool)
    for s, r in chosen:
        train |= (table.subject_id == s) & (table.record_id == r)
    test = ~np.isin(table.subject_id, list(used_subjects))
    return score_probe(fit_probe(table, label_name, train), table, test)


PROTOCOLS = {
    "loo": loo_cv,
    "kfold": kfold_cv,
    "few_record": few_record_probe,
}


# ---------------------------------------------------------------- PCA


@dataclass
class ComponentStats:
    index: int
    explained_variance: float
    explained_variance_ratio: float
    subject_f: float
    static_d: float
    state_d: float
    static_discriminative: bool
    state_discriminative: bool


@dataclass
class PCAReport:
    components: list[ComponentStats]
    loadings: np.ndarray
    scores: np.ndarray

    @property
    def state_flagged(self) -> list[int]:
        return [c.index for c in self.components if c.state_discriminative]

    @property
    def static_flagged(self) -> list[int]:
        return [c.index for c in self.components if c.static_discriminative]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.__dict__ for c in self.components])


def cohens_d(x: np.ndarray, labels: np.ndarray) -> float:
    """Standardized mean difference between label 1 and label 0 (pooled sd)."""
    a, b = x[labels == 1], x[labels == 0]
    if len(a) < 2 or len(b) < 2:
        return float("nan")
    pooled = np.sqrt(((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2))
    if pooled == 0:
        return 0.0
    return float((a.mean() - b.mean()) / pooled)


def pca(h: np.ndarray, n_components: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scores, loadings and variances; each loading's largest entry is positive."""
    centred = h - h.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-10)) if s.size and s[0] > 0 else 0
    n = min(n_components, rank)
    vt = vt[:n]
    signs = np.sign(vt[np.arange(n), np.argmax(np.abs(vt), axis=1)])
    vt = vt * signs[:, None]
    var = s[:n] ** 2 / max(len(h) - 1, 1)
    total = (s**2).sum() / max(len(h) - 1, 1)
    return centred @ vt.T, vt, np.stack([var, var / total]) if total > 0 else np.zeros((2, n))


def pca_report(
    table: RepresentationTable,
    static_label: str = "static_class",
    state_label: str = "state",
    n_components: int = N_PCA_COMPONENTS,
    plot_path: str | Path | None = None,
) -> PCAReport:
    if len(np.unique(table.subject_id)) < 2:
        raise ValueError("PCA report needs at least 2 subjects")
    if len(np.unique(table.labels[state_label])) < 2:
        raise ValueError("PCA report needs both states present")
    scores, loadings, var = pca(table.h, n_components)
    static_y, state_y = table.labels[static_label], table.labels[state_label]
    subjects = np.unique(table.subject_id)
    comps = []
    for k in range(scores.shape[1]):
        x = scores[:, k]
        groups = [x[table.subject_id == s] for s in subjects]
        f = float(stats.f_oneway(*groups).statistic) if np.ptp(x) > 0 else 0.0
        d_static, d_state = cohens_d(x, static_y), cohens_d(x, state_y)
        comps.append(
            ComponentStats(
                index=k + 1,
                explained_variance=float(var[0, k]),
                explained_variance_ratio=float(var[1, k]),
                subject_f=f,
                static_d=d_static,
                state_d=d_state,
                static_discriminative=bool(abs(d_static) > EFFECT_THRESHOLD),
                state_discriminative=bool(abs(d_state) > EFFECT_THRESHOLD),
            )
        )
    report = PCAReport(comps, loadings, scores)
    if plot_path is not None:
        plot_component_densities(report, state_y, plot_path)
    return report


def plot_component_densities(report: PCAReport, labels: np.ndarray, path: str | Path, names=("regular", "irregular")) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(report.components)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 2.6), squeeze=False)
    for k, ax in enumerate(axes[0]):
        x = report.scores[:, k]
        grid = np.linspace(x.min(), x.max(), 200)
        for cls, name in enumerate(names):
            xs = x[labels == cls]
            if len(xs) > 2 and np.ptp(xs) > 0:
                ax.plot(grid, stats.gaussian_kde(xs)(grid), label=name)
        c = report.components[k]
        ax.set_title(f"PC{c.index}  d={c.state_d:+.2f}", fontsize=9)
        ax.set_yticks([])
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------- curves


def curve(
    checkpoint_dir: str | Path,
    manifest: str | Path,
    protocol: str = "loo",
    label_name: str = "state",
    out_dir: str | Path | None = None,
) -> list[tuple[int, float]]:
    """Probe accuracy for every checkpoint in a run directory."""
    ckpts = list_checkpoints(checkpoint_dir)
    if not ckpts:
        raise ValueError(f"no checkpoints in {checkpoint_dir}")
    if len(ckpts) < 2:
        raise ValueError("a curve needs at least 2 checkpoints")
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    rows = []
    for path in ckpts:
        table = embed(path, manifest)
        it = int(path.stem.split("_")[1])
        rows.append((it, PROTOCOLS[protocol](table, label_name).accuracy))
    rows.sort()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "accuracy"])
            w.writerows(rows)
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([r[0] for r in rows], [r[1] for r in rows], marker="o")
        ax.set_xlabel("iteration")
        ax.set_ylabel(f"{protocol} accuracy")
        fig.tight_layout()
        fig.savefig(out_dir / "curve.png", dpi=100)
        plt.close(fig)
    return rows
