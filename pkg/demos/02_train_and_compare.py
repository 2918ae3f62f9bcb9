"""Train DEAPS and the two baselines on the synthetic corpus, then compare.

For each method: smoke-preset training, frozen representations for every
window, a subject-held-out SVC probe for the rhythm state (on the records that
contain an irregular episode) and for the static class, and a PCA report.

    python demos/01_synthetic_corpus.py --out demo_out
    python demos/02_train_and_compare.py --data demo_out/processed/manifest.csv

The full smoke schedule takes about half an hour on one CPU core; pass
``--iterations 300`` for a quick look.
"""

import argparse
from pathlib import Path

from deaps import evalkit
from deaps.model import network_from_checkpoint
from deaps.sampling import Corpus
from deaps.trainer import fit, preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="demo_out/processed/manifest.csv")
    ap.add_argument("--out", default="demo_out/runs")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--methods", default="deaps,byol,contrastive")
    args = ap.parse_args()

    corpus = Corpus.from_manifest(args.data)
    summary = []
    for method in args.methods.split(","):
        cfg = preset("smoke", method=method, iterations=args.iterations, checkpoint_every=args.iterations)
        ckpt = fit(cfg, corpus, Path(args.out) / method)
        net, _ = network_from_checkpoint(ckpt)
        table = evalkit.embed_corpus(net, corpus)

        state = evalkit.loo_cv(table.select(table.record_id == 0), "state")
        static = evalkit.loo_cv(table, "static_class")
        report = evalkit.pca_report(table, plot_path=Path(args.out) / method / "pca_densities.png")
        print(f"\n[{method}]")
        print("  state probe  ", state.summary())
        print("  static probe ", static.summary())
        print(report.to_frame().round(3).to_string(index=False))
        summary.append((method, state.accuracy, static.accuracy, len(report.state_flagged)))

    print("\nmethod        state   static  flagged PCs")
    for method, st, sc, flagged in summary:
        print(f"{method:<12} {100 * st:6.1f}  {100 * sc:6.1f}  {flagged}")


if __name__ == "__main__":
    main()
