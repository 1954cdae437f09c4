"""Per-patch embeddings: extraction, WEMB file I/O, and fusion.

Real foundation-model extractors are out of scope; embeddings either come
from the deterministic synthetic extractor below (mean-pool the patch to
an 8x8x3 block, then a fixed seeded random projection) or are imported
from WEMB files computed elsewhere.

WEMB is a little-endian binary format, one file per (slide, extractor):

    magic   4 bytes  "WEMB"
    version u16      1
    nlen    u16      extractor name length, then nlen bytes UTF-8
    dim     u32
    count   u32
    count records of (row u32, col u32, dim x float32)

Fusion combines the per-extractor embeddings of one patch into a single
vector: either concatenation in a fixed extractor order, or a learned
gated-attention convex combination of per-extractor projections to a
common width.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng
from .tiling import PatchRecord

WEMB_MAGIC = b"WEMB"
WEMB_VERSION = 1

POOL_GRID = 8  # patches are mean-pooled to POOL_GRID x POOL_GRID x 3 before projection

EXTRACTOR_KINDS = ("synthetic", "imported")


class WembFormatError(ValueError):
    """Bad magic, version, or structure in a WEMB file."""


class WembDataError(ValueError):
    """Non-finite values in a WEMB file."""


@dataclass(frozen=True)
class ExtractorSpec:
    """One feature extractor: a synthetic stand-in or an import source."""

    name: str
    dim: int
    kind: str = "synthetic"
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"extractor dim must be >= 1, got {self.dim}")
        if self.kind not in EXTRACTOR_KINDS:
            raise ValueError(f"unknown extractor kind {self.kind!r}")


@dataclass
class SlideEmbeddingSet:
    """Per-extractor embedding matrices for one slide's patch sequence.

    Every matrix has one row per patch, aligned with ``patch_keys``.
    """

    slide_id: str
    patch_keys: list[tuple[int, int]]
    matrices: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, matrix in self.matrices.items():
            self._check_matrix(name, matrix)

    def _check_matrix(self, name: str, matrix: np.ndarray) -> None:
        if matrix.ndim != 2:
            raise ValueError(f"extractor {name!r}: expected a 2-D matrix")
        if matrix.shape[0] != len(self.patch_keys):
            raise ValueError(
                f"extractor {name!r}: {matrix.shape[0]} rows for "
                f"{len(self.patch_keys)} patches"
            )

    def add(self, name: str, matrix: np.ndarray) -> None:
        matrix = np.asarray(matrix, dtype=np.float64)
        self._check_matrix(name, matrix)
        self.matrices[name] = matrix

    @property
    def n_patches(self) -> int:
        return len(self.patch_keys)

    def dims(self) -> dict[str, int]:
        return {name: int(matrix.shape[1]) for name, matrix in self.matrices.items()}


# --------------------------------------------------------------------------
# Synthetic extraction
# --------------------------------------------------------------------------


def _projection_matrix(spec: ExtractorSpec) -> np.ndarray:
    """Fixed random projection for a synthetic extractor, from its seed."""
    rng = make_rng(spec.seed, "extractor-projection", spec.name)
    size = POOL_GRID * POOL_GRID * 3
    return rng.normal(size=(spec.dim, size)) / np.sqrt(size)


def _mean_pool_block(pixels: np.ndarray) -> np.ndarray:
    """Mean-pool a (p, p, 3) uint8 patch to a POOL_GRID^2 * 3 float vector."""
    p = pixels.shape[0]
    if pixels.shape != (p, p, 3):
        raise ValueError(f"expected a square (p, p, 3) patch, got {pixels.shape}")
    if p < POOL_GRID:
        raise ValueError(f"patch size must be >= {POOL_GRID}, got {p}")
    block = pixels.astype(np.float64) / 255.0
    edges = np.linspace(0, p, POOL_GRID + 1).astype(np.int64)
    pooled = np.empty((POOL_GRID, POOL_GRID, 3), dtype=np.float64)
    for i in range(POOL_GRID):
        for j in range(POOL_GRID):
            cell = block[edges[i] : edges[i + 1], edges[j] : edges[j + 1]]
            pooled[i, j] = cell.mean(axis=(0, 1))
    return pooled.ravel()


def synthetic_extract(patch: PatchRecord, spec: ExtractorSpec) -> np.ndarray:
    """Deterministic embedding of one patch under a synthetic extractor."""
    if spec.kind != "synthetic":
        raise ValueError(f"extractor {spec.name!r} has kind {spec.kind!r}, not synthetic")
    return _projection_matrix(spec) @ _mean_pool_block(patch.pixels)


def extract_slide(
    slide_id: str, patches: list[PatchRecord], spec: ExtractorSpec
) -> SlideEmbeddingSet:
    """Embed every patch of a slide with one synthetic extractor."""
    keys = [(p.row, p.col) for p in patches]
    projection = _projection_matrix(spec)
    if patches:
        blocks = np.stack([_mean_pool_block(p.pixels) for p in patches])
        matrix = blocks @ projection.T
    else:
        matrix = np.zeros((0, spec.dim), dtype=np.float64)
    embeddings = SlideEmbeddingSet(slide_id=slide_id, patch_keys=keys)
    embeddings.add(spec.name, matrix)
    return embeddings


# --------------------------------------------------------------------------
# WEMB I/O
# --------------------------------------------------------------------------


def write_embeddings(
    path: str | Path,
    extractor_name: str,
    patch_keys: list[tuple[int, int]],
    matrix: np.ndarray,
) -> None:
    """Write one (slide, extractor) embedding matrix as a WEMB file."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    if matrix.shape[0] != len(patch_keys):
        raise ValueError(
            f"{matrix.shape[0]} embedding rows for {len(patch_keys)} patch keys"
        )
    if not np.all(np.isfinite(matrix)):
        raise WembDataError("refusing to write non-finite embeddings")

    name_bytes = extractor_name.encode("utf-8")
    count, dim = matrix.shape
    parts = [
        WEMB_MAGIC,
        struct.pack("<HH", WEMB_VERSION, len(name_bytes)),
        name_bytes,
        struct.pack("<II", dim, count),
    ]
    for (row, col), values in zip(patch_keys, matrix):
        parts.append(struct.pack("<II", row, col))
        parts.append(values.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path: str | Path) -> tuple[str, list[tuple[int, int]], np.ndarray]:
    """Read a WEMB file -> (extractor name, patch keys, float64 matrix)."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != WEMB_MAGIC:
        raise WembFormatError(f"{path}: bad magic, not a WEMB file")
    if len(data) < 8:
        raise WembFormatError(f"{path}: truncated header")
    version, name_len = struct.unpack_from("<HH", data, 4)
    if version != WEMB_VERSION:
        raise WembFormatError(f"{path}: unsupported WEMB version {version}")
    offset = 8
    if len(data) < offset + name_len + 8:
        raise WembFormatError(f"{path}: truncated header")
    name = data[offset : offset + name_len].decode("utf-8")
    offset += name_len
    dim, count = struct.unpack_from("<II", data, offset)
    offset += 8

    record_size = 8 + 4 * dim
    expected = offset + count * record_size
    if len(data) != expected:
        raise WembFormatError(
            f"{path}: expected {expected} bytes for {count} records of dim {dim}, "
            f"got {len(data)}"
        )

    keys = []
    matrix = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        row, col = struct.unpack_from("<II", data, offset)
        offset += 8
        values = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += 4 * dim
        keys.append((int(row), int(col)))
        matrix[i] = values
    if not np.all(np.isfinite(matrix)):
        raise WembDataError(f"{path}: non-finite embedding values")
    return name, keys, matrix


def load_embeddings(paths: list[str | Path], slide_id: str) -> SlideEmbeddingSet:
    """Load one slide's WEMB files (one per extractor) into a set.

    All files must agree on the patch key sequence.
    """
    embeddings: SlideEmbeddingSet | None = None
    for path in paths:
        name, keys, matrix = read_embeddings(path)
        if embeddings is None:
            embeddings = SlideEmbeddingSet(slide_id=slide_id, patch_keys=keys)
        elif keys != embeddings.patch_keys:
            raise WembFormatError(
                f"{path}: patch keys disagree with other extractors for {slide_id}"
            )
        if name in embeddings.matrices:
            raise WembFormatError(f"{path}: duplicate extractor {name!r}")
        embeddings.add(name, matrix)
    if embeddings is None:
        raise ValueError(f"no embedding files given for {slide_id}")
    return embeddings


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_embedding_manifest(
    path: str | Path, slide_id: str, files: dict[str, str | Path]
) -> None:
    """Sidecar JSON listing a slide's WEMB files with dims and checksums."""
    entries = {}
    for name, wemb_path in files.items():
        stored_name, keys, matrix = read_embeddings(wemb_path)
        if stored_name != name:
            raise WembFormatError(
                f"{wemb_path}: stores extractor {stored_name!r}, expected {name!r}"
            )
        entries[name] = {
            "file": str(wemb_path),
            "dim": int(matrix.shape[1]),
            "count": int(matrix.shape[0]),
            "sha256": file_sha256(wemb_path),
        }
    payload = {
        "format": "milfuse-embedding-manifest",
        "version": 1,
        "slide_id": slide_id,
        "extractors": entries,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Fusion
# --------------------------------------------------------------------------


def concat_fuse(embeddings: SlideEmbeddingSet, order: list[str]) -> np.ndarray:
    """Concatenate per-extractor embeddings per patch, in the given order.

    Returns a (K, sum of dims) float64 matrix. Slicing the output at the
    cumulative dim offsets recovers each input matrix exactly.
    """
    if not order:
        raise ValueError("extractor order is empty")
    missing = [name for name in order if name not in embeddings.matrices]
    if missing:
        raise ValueError(f"extractors missing from slide {embeddings.slide_id}: {missing}")
    counts = {name: embeddings.matrices[name].shape[0] for name in order}
    if len(set(counts.values())) > 1:
        raise ValueError(f"row-count mismatch between extractors: {counts}")
    return np.concatenate([embeddings.matrices[name] for name in order], axis=1)


@dataclass
class FusionParams:
    """Gated-attention fusion over extractors, per patch.

    Each extractor's embedding is projected to a common width, then the
    projections compete through the same tanh/sigmoid gated scoring used
    for instance attention, and the output is their convex combination.
    """

    order: list[str]
    projections: dict[str, np.ndarray]  # name -> (proj_dim, dim_j)
    tanh_proj: np.ndarray  # (attn_dim, proj_dim)
    gate_proj: np.ndarray  # (attn_dim, proj_dim)
    score: np.ndarray  # (attn_dim,)

    @property
    def proj_dim(self) -> int:
        return self.tanh_proj.shape[1]

    @classmethod
    def create(
        cls,
        dims: dict[str, int],
        order: list[str],
        proj_dim: int = 256,
        attn_dim: int = 128,
        seed: int = 0,
    ) -> "FusionParams":
        rng = make_rng(seed, "fusion-init")
        projections = {}
        for name in order:
            bound = 1.0 / np.sqrt(dims[name])
            projections[name] = rng.uniform(-bound, bound, size=(proj_dim, dims[name]))
        bound = 1.0 / np.sqrt(proj_dim)
        tanh_proj = rng.uniform(-bound, bound, size=(attn_dim, proj_dim))
        gate_proj = rng.uniform(-bound, bound, size=(attn_dim, proj_dim))
        score = rng.uniform(-1.0 / np.sqrt(attn_dim), 1.0 / np.sqrt(attn_dim), size=attn_dim)
        return cls(
            order=list(order),
            projections=projections,
            tanh_proj=tanh_proj,
            gate_proj=gate_proj,
            score=score,
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


def attention_fuse(
    embeddings: SlideEmbeddingSet, params: FusionParams, return_weights: bool = False
):
    """Fuse per-extractor embeddings by gated attention across extractors.

    Returns a (K, proj_dim) matrix; with ``return_weights`` also the
    (K, n_extractors) attention weights, which are nonnegative and sum
    to 1 per patch.
    """
    missing = [name for name in params.order if name not in embeddings.matrices]
    if missing:
        raise ValueError(f"extractors missing from slide {embeddings.slide_id}: {missing}")
    counts = {name: embeddings.matrices[name].shape[0] for name in params.order}
    if len(set(counts.values())) > 1:
        raise ValueError(f"row-count mismatch between extractors: {counts}")

    # (K, n, proj_dim) stack of per-extractor projections
    projected = np.stack(
        [embeddings.matrices[name] @ params.projections[name].T for name in params.order],
        axis=1,
    )
    gated = np.tanh(projected @ params.tanh_proj.T) * _sigmoid(projected @ params.gate_proj.T)
    logits = gated @ params.score  # (K, n)
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    fused = np.einsum("kn,knd->kd", weights, projected)
    if return_weights:
        return fused, weights
    return fused


def fuse(
    embeddings: SlideEmbeddingSet,
    order: list[str],
    mode: str = "concat",
    fusion_params: FusionParams | None = None,
) -> np.ndarray:
    """Dispatch to the configured fusion route."""
    if mode == "concat":
        return concat_fuse(embeddings, order)
    if mode == "attention":
        if fusion_params is None:
            raise ValueError("attention fusion requires fusion_params")
        return attention_fuse(embeddings, fusion_params)
    raise ValueError(f"unknown fusion mode {mode!r}")
