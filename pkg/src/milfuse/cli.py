"""Command-line pipeline orchestration.

Subcommands:
    synth   generate a synthetic planted-signal cohort (WEMB + manifest)
    tile    segment and tile raster slide images into patch manifests
    embed   run synthetic extractors over patch manifests, write WEMB files
    cv      k-fold cross-validation from a dataset manifest
    report  tabulate several metrics reports into one comparison CSV

Every command is deterministic given its arguments and seed; reruns
write byte-identical outputs. Errors go to stderr with exit code 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import __version__, tiling
from .data import DatasetManifest, SlideEntry, assemble_bags, merge_patient_bags
from .embedding import (
    EXTRACTOR_KINDS,
    ExtractorSpec,
    FusionParams,
    extract_slide,
    file_sha256,
    write_embedding_manifest,
    write_embeddings,
)
from .metrics import MetricsReport
from .rng import derive_seed
from .synth import SynthSpec, generate_dataset
from .training import TrainConfig, run_cross_validation


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    spec_dict = {}
    if args.config:
        spec_dict = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    if args.patients is not None:
        spec_dict["n_patients"] = args.patients
    if args.signal_rate is not None:
        spec_dict["signal_rate"] = args.signal_rate
    spec = SynthSpec.from_dict(spec_dict)

    out_dir = Path(args.out)
    manifest = generate_dataset(spec, out_dir)
    n_pos = sum(1 for e in manifest.entries if e.label == 1)
    print(
        f"wrote {len(manifest.entries)} bags for {spec.n_patients} patients "
        f"({n_pos} positive) to {out_dir / 'dataset_manifest.json'}"
    )
    return 0


# --------------------------------------------------------------------------
# tile
# --------------------------------------------------------------------------


def cmd_tile(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_path in args.images:
        image_path = Path(image_path)
        if not image_path.exists():
            raise FileNotFoundError(f"no such image: {image_path}")
        slide_id = image_path.stem
        image = tiling.load_image(image_path)
        mask, patches = tiling.tile_slide(
            image, patch_size=args.patch_size, min_coverage=args.min_coverage
        )
        manifest = tiling.patch_manifest_dict(
            slide_id=slide_id,
            patches=patches,
            patch_size=args.patch_size,
            min_coverage=args.min_coverage,
            magnification=args.magnification,
            image_path=str(image_path),
        )
        manifest_path = out_dir / f"{slide_id}.patches.json"
        tiling.write_patch_manifest(manifest_path, manifest)
        if args.save_patches:
            tiling.write_patch_images(out_dir / "patches", slide_id, patches)
        print(f"{slide_id}: {len(patches)} patches -> {manifest_path}")
    return 0


# --------------------------------------------------------------------------
# embed
# --------------------------------------------------------------------------


def _load_extractor_config(path: str) -> list[ExtractorSpec]:
    payload = json.loads(Path(path).read_text())
    specs = []
    for record in payload["extractors"]:
        kind = record.get("kind", "synthetic")
        if kind not in EXTRACTOR_KINDS:
            raise ValueError(f"unknown extractor kind {kind!r}")
        if kind != "synthetic":
            raise ValueError(
                f"extractor {record['name']!r}: only synthetic extractors can be "
                "run by `embed`; imported embeddings are referenced directly "
                "from a dataset manifest"
            )
        specs.append(
            ExtractorSpec(
                name=record["name"],
                dim=int(record["dim"]),
                kind=kind,
                seed=int(record.get("seed", 0)),
            )
        )
    if not specs:
        raise ValueError("extractor config lists no extractors")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError("extractor names must be unique")
    return specs


def _read_labels_csv(path: str) -> dict[str, tuple[str, int]]:
    """slide_id -> (patient_id, label) from a CSV with those columns."""
    labels = {}
    with open(path, newline="") as handle:
        for row in csv.DictReader(handle):
            labels[row["slide_id"]] = (row["patient_id"], int(row["label"]))
    return labels


def _patches_from_manifest(manifest: dict) -> list[tiling.PatchRecord]:
    """Rebuild patch pixel blocks by re-reading the source image."""
    image_path = manifest.get("image")
    if not image_path:
        raise ValueError(
            f"patch manifest for {manifest['slide_id']} records no source image"
        )
    image = tiling.load_image(image_path)
    size = manifest["patch_size"]
    patches = []
    for record in manifest["patches"]:
        y, x = record["origin_y"], record["origin_x"]
        patches.append(
            tiling.PatchRecord(
                row=record["row"],
                col=record["col"],
                origin_x=x,
                origin_y=y,
                size=size,
                coverage=record["coverage"],
                pixels=image[y : y + size, x : x + size].copy(),
            )
        )
    return patches


def cmd_embed(args: argparse.Namespace) -> int:
    specs = _load_extractor_config(args.config)
    labels = _read_labels_csv(args.labels) if args.labels else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    dataset_entries = []
    for manifest_path in args.manifests:
        manifest = tiling.read_patch_manifest(manifest_path)
        slide_id = manifest["slide_id"]
        patches = _patches_from_manifest(manifest)
        files: dict[str, str] = {}
        checksums: dict[str, str] = {}
        for spec in specs:
            embeddings = extract_slide(slide_id, patches, spec)
            rel = f"{slide_id}.{spec.name}.wemb"
            write_embeddings(
                out_dir / rel, spec.name, embeddings.patch_keys, embeddings.matrices[spec.name]
            )
            files[spec.name] = rel
            checksums[spec.name] = file_sha256(out_dir / rel)
        write_embedding_manifest(
            out_dir / f"{slide_id}.embeddings.json",
            slide_id,
            {name: out_dir / rel for name, rel in files.items()},
        )
        print(f"{slide_id}: {len(patches)} patches x {len(specs)} extractors")
        if labels is not None:
            if slide_id not in labels:
                raise ValueError(f"labels file has no row for slide {slide_id}")
            patient_id, label = labels[slide_id]
            dataset_entries.append(
                SlideEntry(
                    slide_id=slide_id,
                    patient_id=patient_id,
                    label=label,
                    embeddings=files,
                    checksums=checksums,
                    patch_manifest=str(manifest_path),
                )
            )

    if labels is not None:
        dataset = DatasetManifest(
            entries=dataset_entries,
            extractor_dims={spec.name: spec.dim for spec in specs},
            root=out_dir,
        )
        dataset.save(out_dir / "dataset_manifest.json")
        print(f"dataset manifest: {out_dir / 'dataset_manifest.json'}")
    return 0


# --------------------------------------------------------------------------
# cv
# --------------------------------------------------------------------------


def cmd_cv(args: argparse.Namespace) -> int:
    manifest = DatasetManifest.load(args.manifest)

    config_dict = {}
    if args.config:
        config_dict = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        config_dict["seed"] = args.seed
    if args.cap is not None:
        config_dict["patches_per_bag"] = args.cap
    if args.k is not None:
        config_dict["k"] = args.k
    config = TrainConfig.from_dict(config_dict)

    order = args.extractors.split(",") if args.extractors else manifest.extractor_names()
    unknown = [name for name in order if name not in manifest.extractor_dims]
    if unknown:
        raise ValueError(f"extractors not in manifest: {unknown}")

    fusion_params = None
    if args.fusion == "attention":
        fusion_params = FusionParams.create(
            dims={name: manifest.extractor_dims[name] for name in order},
            order=order,
            proj_dim=args.fusion_dim,
            seed=derive_seed(config.seed, "fusion"),
        )

    bags = assemble_bags(manifest, order=order, fusion=args.fusion, fusion_params=fusion_params)
    if config.bag_granularity == "patient":
        bags = merge_patient_bags(bags)

    provenance = {
        "name": args.name or Path(args.manifest).parent.name,
        "fusion": args.fusion,
        "extractor_order": order,
        "dataset_manifest": str(args.manifest),
        "dataset_config_hash": manifest.config_hash,
    }
    result = run_cross_validation(bags, config, provenance)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_json = out_dir / "report.json"
    report_csv = out_dir / "report.csv"
    result.report.save(report_json)
    result.report.save_csv(report_csv)
    mean_auc = result.report.mean["roc_auc"]
    std_auc = result.report.std["roc_auc"]
    print(f"{provenance['name']}: mean ROC AUC {mean_auc:.4f} ({std_auc:.4f}) over k={config.k}")
    print(f"reports: {report_json}, {report_csv}")
    return 0


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def cmd_report(args: argparse.Namespace) -> int:
    if not args.reports:
        raise ValueError("no report files given")
    rows = []
    metric_names: list[str] | None = None
    for path in args.reports:
        report = MetricsReport.load(path)
        names = sorted(report.mean.keys())
        if metric_names is None:
            metric_names = names
        elif names != metric_names:
            raise ValueError(
                f"{path}: metric set {names} does not match {metric_names}"
            )
        label = report.provenance.get("name") or Path(path).stem
        rows.append((label, report))

    lines = [["configuration"] + metric_names]
    for label, report in rows:
        lines.append(
            [label]
            + [f"{report.mean[name]:.6f}({report.std[name]:.6f})" for name in metric_names]
        )
    out = "\n".join(",".join(line) for line in lines) + "\n"
    if args.out:
        Path(args.out).write_text(out)
        print(f"wrote comparison table for {len(rows)} configurations to {args.out}")
    else:
        print(out, end="")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="milfuse",
        description="Tiling, embedding fusion, and gated-attention MIL cross-validation.",
    )
    parser.add_argument("--version", action="version", version=f"milfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic planted-signal cohort")
    p_synth.add_argument("--config", help="SynthSpec JSON file")
    p_synth.add_argument("--seed", type=int, help="override the spec seed")
    p_synth.add_argument("--patients", type=int, help="override n_patients")
    p_synth.add_argument("--signal-rate", type=float, help="override signal_rate")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.set_defaults(func=cmd_synth)

    p_tile = sub.add_parser("tile", help="tile raster slides into patch manifests")
    p_tile.add_argument("images", nargs="+", help="PNG or TIFF slide rasters")
    p_tile.add_argument("--out", required=True, help="output directory")
    p_tile.add_argument("--patch-size", type=int, default=tiling.DEFAULT_PATCH_SIZE)
    p_tile.add_argument("--min-coverage", type=float, default=tiling.DEFAULT_MIN_COVERAGE)
    p_tile.add_argument("--magnification", default="x20", help="magnification tag for manifests")
    p_tile.add_argument("--save-patches", action="store_true", help="also write patch PNGs")
    p_tile.set_defaults(func=cmd_tile)

    p_embed = sub.add_parser("embed", help="run synthetic extractors over patch manifests")
    p_embed.add_argument("manifests", nargs="+", help="patch manifest JSON files")
    p_embed.add_argument("--config", required=True, help="extractor config JSON")
    p_embed.add_argument("--labels", help="CSV (slide_id,patient_id,label) -> dataset manifest")
    p_embed.add_argument("--out", required=True, help="output directory")
    p_embed.set_defaults(func=cmd_embed)

    p_cv = sub.add_parser("cv", help="k-fold cross-validation from a dataset manifest")
    p_cv.add_argument("manifest", help="dataset manifest JSON")
    p_cv.add_argument("--config", help="TrainConfig JSON file")
    p_cv.add_argument("--seed", type=int, help="override the config seed")
    p_cv.add_argument("--cap", type=int, help="patches per bag cap")
    p_cv.add_argument("--k", type=int, help="number of folds")
    p_cv.add_argument("--fusion", choices=["concat", "attention"], default="concat")
    p_cv.add_argument("--fusion-dim", type=int, default=256, help="attention-fusion width")
    p_cv.add_argument("--extractors", help="comma-separated extractor order")
    p_cv.add_argument("--name", help="configuration label stored in the report")
    p_cv.add_argument("--out", required=True, help="output directory")
    p_cv.set_defaults(func=cmd_cv)

    p_report = sub.add_parser("report", help="tabulate metrics reports side by side")
    p_report.add_argument("reports", nargs="*", help="report JSON files")
    p_report.add_argument("--out", help="comparison CSV path (default: stdout)")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: report cleanly, nonzero exit
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
