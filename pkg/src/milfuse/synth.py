"""Synthetic bag-of-instances benchmark with planted signal instances.

Stands in for a private slide cohort at desk scale: negative bags draw
every instance from a background Gaussian; positive bags replace a
fraction of instances with background plus a fixed offset vector. The
offset direction is drawn once per dataset and split evenly across the
extractor blocks, so each extractor alone carries ``offset_norm /
sqrt(n_extractors)`` of the signal and fusing extractors is strictly
more informative than any single one.

The default cohort shape (152 patients, 73% positive) mirrors a
realistic class imbalance; the data itself is Gaussian noise with no
claim of clinical realism. Everything is generated from derived Philox
seeds, so the same spec always writes byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import DatasetManifest, SlideEntry
from .embedding import file_sha256, write_embeddings
from .model import Bag
from .rng import make_rng

DEFAULT_EXTRACTOR_DIMS = {"synthA": 512, "synthB": 384}


@dataclass(frozen=True)
class SynthSpec:
    """Shape and signal parameters of a synthetic cohort."""

    n_patients: int = 152
    positive_fraction: float = 0.73
    bags_per_patient: int = 1
    k_min: int = 200
    k_max: int = 800
    extractor_dims: dict = field(default_factory=lambda: dict(DEFAULT_EXTRACTOR_DIMS))
    signal_rate: float = 0.1
    offset_norm: float = 2.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must be in (0, 1)")
        if not 0.0 <= self.signal_rate <= 1.0:
            raise ValueError("signal_rate must be in [0, 1]")
        if self.n_patients < 2:
            raise ValueError("need at least 2 patients")
        if self.bags_per_patient < 1:
            raise ValueError("bags_per_patient must be >= 1")
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")
        if not self.extractor_dims:
            raise ValueError("need at least one extractor")

    @property
    def n_positive(self) -> int:
        return int(round(self.n_patients * self.positive_fraction))

    @property
    def fused_dim(self) -> int:
        return sum(self.extractor_dims.values())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SynthSpec keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def signal_offsets(spec: SynthSpec) -> dict[str, np.ndarray]:
    """Per-extractor blocks of the fixed planted-signal offset vector.

    Each block is a random direction scaled to offset_norm/sqrt(n), so
    the fused offset has norm offset_norm with equal energy per block.
    """
    rng = make_rng(spec.seed, "signal-offset")
    n = len(spec.extractor_dims)
    blocks = {}
    for name, dim in spec.extractor_dims.items():
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        blocks[name] = direction * (spec.offset_norm / np.sqrt(n))
    return blocks


def generate_bag_matrices(
    spec: SynthSpec, slide_id: str, label: int, offsets: dict[str, np.ndarray]
) -> tuple[dict[str, np.ndarray], tuple[int, ...]]:
    """One bag's per-extractor matrices and its planted signal row indices."""
    rng = make_rng(spec.seed, "bag", slide_id)
    n_instances = int(rng.integers(spec.k_min, spec.k_max + 1))
    n_signal = int(round(spec.signal_rate * n_instances)) if label == 1 else 0
    signal_rows = tuple(
        sorted(int(i) for i in rng.choice(n_instances, size=n_signal, replace=False))
    )
    matrices = {}
    for name, dim in spec.extractor_dims.items():
        matrix = rng.normal(scale=spec.noise_scale, size=(n_instances, dim))
        if signal_rows:
            matrix[list(signal_rows)] += offsets[name]
        matrices[name] = matrix
    return matrices, signal_rows


def generate_dataset(spec: SynthSpec, out_dir: str | Path) -> DatasetManifest:
    """Write WEMB files and a dataset manifest for a synthetic cohort.

    Patients are ``patient_0000``..; the first ``n_positive`` are
    positive responders. One slide per (patient, bag index).
    """
    out_dir = Path(out_dir)
    embed_dir = out_dir / "embeddings"
    embed_dir.mkdir(parents=True, exist_ok=True)

    offsets = signal_offsets(spec)
    entries = []
    for patient_index in range(spec.n_patients):
        patient_id = f"patient_{patient_index:04d}"
        label = 1 if patient_index < spec.n_positive else 0
        for bag_index in range(spec.bags_per_patient):
            slide_id = f"{patient_id}_slide_{bag_index}"
            matrices, signal_rows = generate_bag_matrices(spec, slide_id, label, offsets)
            keys = [(i, 0) for i in range(next(iter(matrices.values())).shape[0])]
            files = {}
            checksums = {}
            for name, matrix in matrices.items():
                rel = f"embeddings/{slide_id}.{name}.wemb"
                write_embeddings(out_dir / rel, name, keys, matrix)
                files[name] = rel
                checksums[name] = file_sha256(out_dir / rel)
            entries.append(
                SlideEntry(
                    slide_id=slide_id,
                    patient_id=patient_id,
                    label=label,
                    embeddings=files,
                    checksums=checksums,
                    signal_rows=signal_rows,
                )
            )

    manifest = DatasetManifest(
        entries=entries,
        extractor_dims=dict(spec.extractor_dims),
        config_hash=spec.config_hash(),
        extra={"synth_spec": spec.to_dict()},
        root=out_dir,
    )
    manifest.save(out_dir / "dataset_manifest.json")
    return manifest


def in_memory_bags(spec: SynthSpec, order: list[str] | None = None) -> list[Bag]:
    """Generate fused bags directly, skipping file I/O (for tests/experiments)."""
    order = order or list(spec.extractor_dims.keys())
    offsets = signal_offsets(spec)
    bags = []
    for patient_index in range(spec.n_patients):
        patient_id = f"patient_{patient_index:04d}"
        label = 1 if patient_index < spec.n_positive else 0
        for bag_index in range(spec.bags_per_patient):
            slide_id = f"{patient_id}_slide_{bag_index}"
            matrices, signal_rows = generate_bag_matrices(spec, slide_id, label, offsets)
            features = np.concatenate([matrices[name] for name in order], axis=1)
            # Match the file route: WEMB stores float32, bags load as float64.
            features = features.astype(np.float32).astype(np.float64)
            bags.append(
                Bag(
                    slide_id=slide_id,
                    patient_id=patient_id,
                    features=features,
                    label=label,
                    signal_rows=signal_rows,
                )
            )
    return bags
