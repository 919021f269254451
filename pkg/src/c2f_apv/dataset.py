"""Phantom datasets: in-memory synthesis, on-disk layout and manifest loading."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from .volume import (
    CTVolume,
    LabelMap,
    ManifestEntry,
    PhantomSpec,
    load_sample,
    read_manifest,
    save_labels,
    save_volume,
    synth_phantom,
    write_manifest,
)


@dataclass
class Sample:
    id: str
    volume: CTVolume
    labels: LabelMap
    split: str


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synth_dataset(spec: PhantomSpec, num_samples: int, test_fraction: float, seed: int) -> List[Sample]:
    """``num_samples`` phantoms; a seeded shuffle puts ``round(M * test_fraction)`` in the test split."""
    n_test = int(round(num_samples * test_fraction))
    test_idx = set(np.random.default_rng([seed, 1]).permutation(num_samples)[:n_test].tolist())
    out = []
    for i in range(num_samples):
        v, y = synth_phantom(spec, sample_seed(seed, i))
        sid = f"case{i:03d}"
        v.id = y.id = sid
        out.append(Sample(sid, v, y, "test" if i in test_idx else "train"))
    return out


def write_dataset(samples: List[Sample], data_dir) -> Path:
    data_dir = Path(data_dir)
    entries = []
    for s in samples:
        save_volume(s.volume, data_dir / f"{s.id}.vol")
        save_labels(s.labels, data_dir / f"{s.id}.lab")
        entries.append(ManifestEntry(s.id, f"{s.id}.vol", f"{s.id}.lab", s.split))
    manifest = data_dir / "manifest.json"
    write_manifest(entries, manifest)
    return manifest


def load_dataset(manifest_path) -> List[Sample]:
    out = []
    for entry in read_manifest(manifest_path):
        v, y = load_sample(entry)
        out.append(Sample(entry.id, v, y, entry.split))
    return out
