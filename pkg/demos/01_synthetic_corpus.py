"""Build a small synthetic corpus and look at what the pipeline does to it.

Writes raw records, runs the preprocessing pipeline and saves a figure with
one regular and one irregular stretch of the same subject.

    python demos/01_synthetic_corpus.py --out demo_out
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from deaps.io import read_manifest
from deaps.pipeline import load_record, preprocess_manifest
from deaps.sampling import Corpus
from deaps.synthgen import generate_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--subjects", type=int, default=16)
    ap.add_argument("--duration", type=int, default=300)
    args = ap.parse_args()
    out = Path(args.out)

    raw = generate_dataset(args.subjects, 2, args.duration, seed=0, out_dir=out / "raw")
    proc = preprocess_manifest(raw, out / "processed")
    rows = read_manifest(raw)
    print(f"{len(rows)} raw records -> {proc}")

    corpus = Corpus.from_manifest(proc)
    per_subject = {r.subject_id: r.meta["static_class"] for r in corpus.records}
    print("static class counts:", np.bincount(list(per_subject.values())).tolist())

    mixed = next(r for r in corpus.records if r.record_id == 0)
    irregular = np.flatnonzero(mixed.window_labels == 1)
    print(f"subject {mixed.subject_id} record 0: {len(irregular)} of {len(mixed.window_labels)} windows irregular")

    # raw vs processed around the start of the irregular episode
    raw_rec = load_record(next(r.path for r in rows if r.subject_id == mixed.subject_id and r.record_id == 0))
    t0 = max(int(irregular[0]) * 10 - 10, 0)
    fs_raw = int(raw_rec.fs)
    fig, axes = plt.subplots(2, 1, figsize=(10, 5), sharex=True)
    t = np.arange(30 * 100) / 100 + t0
    axes[0].plot(np.arange(30 * fs_raw) / fs_raw + t0, raw_rec.samples[t0 * fs_raw : (t0 + 30) * fs_raw], lw=0.6)
    axes[0].set_ylabel("raw")
    axes[1].plot(t, mixed.samples[t0 * 100 : (t0 + 30) * 100], lw=0.6)
    axes[1].axvline(t0 + 10, color="r", ls="--", lw=0.8)
    axes[1].set_ylabel("processed")
    axes[1].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(out / "corpus_example.png", dpi=120)
    print("figure:", out / "corpus_example.png")


if __name__ == "__main__":
    main()
