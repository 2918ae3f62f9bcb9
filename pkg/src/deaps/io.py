"""Raw record files, JSON sidecars and CSV manifests."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MANIFEST_COLUMNS = ["subject_id", "record_id", "path", "duration_s"]


@dataclass
class ManifestRow:
    subject_id: int
    record_id: int
    path: Path
    duration_s: float


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
        rows = [
            ManifestRow(
                subject_id=int(r["subject_id"]),
                record_id=int(r["record_id"]),
                path=(path.parent / r["path"]),
                duration_s=float(r["duration_s"]),
            )
            for r in reader
        ]
    return rows


def write_manifest(path: str | Path, rows: list[tuple[int, int, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)


def read_samples(path: str | Path) -> tuple[np.ndarray, dict]:
    """Load float32 LE samples and the sidecar metadata of one record."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    samples = np.fromfile(path, dtype="<f4").astype(np.float64)
    if samples.size != meta["n_samples"]:
        raise ValueError(f"{path}: {samples.size} samples on disk, sidecar says {meta['n_samples']}")
    return samples, meta


def write_samples(path: str | Path, samples: np.ndarray, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.asarray(samples).astype("<f4").tofile(path)
    meta = dict(meta, n_samples=int(np.asarray(samples).size))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
