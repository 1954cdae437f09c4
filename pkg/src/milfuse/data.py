"""Dataset manifests binding labels to embedding files, and bag assembly.

A dataset manifest is a JSON index with one entry per slide: patient id,
binary label, and the WEMB file path for each extractor. Loading a
manifest verifies that every referenced file exists; assembling bags
loads the WEMB matrices, fuses them per the configured route, and yields
the Bag objects the training module consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embedding import (
    FusionParams,
    SlideEmbeddingSet,
    file_sha256,
    fuse,
    load_embeddings,
)
from .model import Bag

DATASET_MANIFEST_VERSION = 1


@dataclass
class SlideEntry:
    """One slide's identifiers, label, and file references."""

    slide_id: str
    patient_id: str
    label: int
    embeddings: dict[str, str]  # extractor name -> WEMB path (manifest-relative)
    checksums: dict[str, str] = field(default_factory=dict)
    patch_manifest: str | None = None
    signal_rows: tuple[int, ...] = ()  # synthetic ground truth; empty otherwise

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"slide {self.slide_id}: label must be 0 or 1")
        if not self.embeddings:
            raise ValueError(f"slide {self.slide_id}: no embedding files")


@dataclass
class DatasetManifest:
    """All slides of a dataset plus generating-config provenance."""

    entries: list[SlideEntry]
    extractor_dims: dict[str, int]
    config_hash: str = ""
    extra: dict = field(default_factory=dict)
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.slide_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate slide ids in dataset manifest")

    def extractor_names(self) -> list[str]:
        return list(self.extractor_dims.keys())

    def resolve(self, relative: str) -> Path:
        return self.root / relative

    def to_dict(self) -> dict:
        return {
            "format": "milfuse-dataset-manifest",
            "version": DATASET_MANIFEST_VERSION,
            "config_hash": self.config_hash,
            "extractor_dims": self.extractor_dims,
            "extra": self.extra,
            "slides": [
                {
                    "slide_id": e.slide_id,
                    "patient_id": e.patient_id,
                    "label": e.label,
                    "embeddings": e.embeddings,
                    "checksums": e.checksums,
                    "patch_manifest": e.patch_manifest,
                    "signal_rows": list(e.signal_rows),
                }
                for e in self.entries
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, verify_checksums: bool = False) -> "DatasetManifest":
        """Load and validate a manifest; referenced files must exist."""
        path = Path(path)
        payload = json.loads(path.read_text())
        if payload.get("format") != "milfuse-dataset-manifest":
            raise ValueError(f"{path}: not a dataset manifest")
        if payload.get("version") != DATASET_MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version")
        root = path.parent
        entries = []
        for record in payload["slides"]:
            entry = SlideEntry(
                slide_id=record["slide_id"],
                patient_id=record["patient_id"],
                label=record["label"],
                embeddings=dict(record["embeddings"]),
                checksums=dict(record.get("checksums", {})),
                patch_manifest=record.get("patch_manifest"),
                signal_rows=tuple(record.get("signal_rows", [])),
            )
            entries.append(entry)
        manifest = cls(
            entries=entries,
            extractor_dims={k: int(v) for k, v in payload["extractor_dims"].items()},
            config_hash=payload.get("config_hash", ""),
            extra=payload.get("extra", {}),
            root=root,
        )
        missing = [
            str(manifest.resolve(rel))
            for entry in entries
            for rel in entry.embeddings.values()
            if not manifest.resolve(rel).exists()
        ]
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {missing[:5]}")
        if verify_checksums:
            manifest.verify_checksums()
        return manifest

    def verify_checksums(self) -> None:
        for entry in self.entries:
            for name, rel in entry.embeddings.items():
                recorded = entry.checksums.get(name)
                if recorded is None:
                    continue
                actual = file_sha256(self.resolve(rel))
                if actual != recorded:
                    raise ValueError(
                        f"checksum mismatch for {entry.slide_id}/{name}: "
                        f"recorded {recorded[:12]}.., file {actual[:12]}.."
                    )


def load_slide_embeddings(manifest: DatasetManifest, entry: SlideEntry) -> SlideEmbeddingSet:
    paths = [manifest.resolve(entry.embeddings[name]) for name in entry.embeddings]
    return load_embeddings(paths, slide_id=entry.slide_id)


def assemble_bags(
    manifest: DatasetManifest,
    order: list[str] | None = None,
    fusion: str = "concat",
    fusion_params: FusionParams | None = None,
) -> list[Bag]:
    """Load, fuse, and wrap every slide of a manifest into Bag objects."""
    order = order or manifest.extractor_names()
    bags = []
    for entry in manifest.entries:
        embeddings = load_slide_embeddings(manifest, entry)
        features = fuse(embeddings, order, mode=fusion, fusion_params=fusion_params)
        bags.append(
            Bag(
                slide_id=entry.slide_id,
                patient_id=entry.patient_id,
                features=features,
                label=entry.label,
                signal_rows=entry.signal_rows,
            )
        )
    return bags


def merge_patient_bags(bags: list[Bag]) -> list[Bag]:
    """Concatenate each patient's bags into one bag (patient granularity)."""
    by_patient: dict[str, list[Bag]] = {}
    for bag in bags:
        by_patient.setdefault(bag.patient_id, []).append(bag)
    merged = []
    for patient_id, group in by_patient.items():
        labels = {bag.label for bag in group}
        if len(labels) != 1:
            raise ValueError(f"patient {patient_id}: conflicting labels across bags")
        signal_rows = []
        offset = 0
        for bag in group:
            signal_rows.extend(r + offset for r in bag.signal_rows)
            offset += bag.n_instances
        merged.append(
            Bag(
                slide_id=f"{patient_id}:merged",
                patient_id=patient_id,
                features=np.concatenate([bag.features for bag in group], axis=0),
                label=group[0].label,
                signal_rows=tuple(signal_rows),
            )
        )
    return merged
