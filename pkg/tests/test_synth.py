import dataclasses
import json

import numpy as np
import pytest

from milfuse.data import (
    DatasetManifest,
    SlideEntry,
    assemble_bags,
    merge_patient_bags,
)
from milfuse.embedding import FusionParams
from milfuse.model import Bag
from milfuse.synth import (
    SynthSpec,
    generate_bag_matrices,
    generate_dataset,
    in_memory_bags,
    signal_offsets,
)

SMALL = SynthSpec(
    n_patients=6,
    positive_fraction=0.5,
    k_min=4,
    k_max=8,
    extractor_dims={"a": 5, "b": 3},
    signal_rate=0.25,
    offset_norm=2.0,
    seed=3,
)


class TestSynthSpec:
    def test_default_cohort_shape(self):
        spec = SynthSpec()
        assert spec.n_patients == 152
        assert spec.n_positive == 111  # round(152 * 0.73)
        assert spec.fused_dim == 512 + 384
        assert list(spec.extractor_dims) == ["synthA", "synthB"]

    def test_validation(self):
        with pytest.raises(ValueError):
            SynthSpec(positive_fraction=0.0)
        with pytest.raises(ValueError):
            SynthSpec(signal_rate=1.5)
        with pytest.raises(ValueError):
            SynthSpec(n_patients=1)
        with pytest.raises(ValueError):
            SynthSpec(k_min=10, k_max=5)
        with pytest.raises(ValueError):
            SynthSpec(extractor_dims={})

    def test_round_trip_and_unknown_keys(self):
        again = SynthSpec.from_dict(SMALL.to_dict())
        assert again == SMALL
        with pytest.raises(ValueError, match="unknown SynthSpec keys"):
            SynthSpec.from_dict({"n_patience": 10})

    def test_config_hash_tracks_fields(self):
        assert SynthSpec().config_hash() == SynthSpec().config_hash()
        assert SynthSpec().config_hash() != SynthSpec(seed=1).config_hash()


class TestSignalOffsets:
    def test_block_norms_split_the_energy(self):
        offsets = signal_offsets(SMALL)
        assert set(offsets) == {"a", "b"}
        for name, dim in SMALL.extractor_dims.items():
            assert offsets[name].shape == (dim,)
            assert np.linalg.norm(offsets[name]) == pytest.approx(
                2.0 / np.sqrt(2), abs=1e-12
            )
        fused = np.concatenate([offsets["a"], offsets["b"]])
        assert np.linalg.norm(fused) == pytest.approx(2.0, abs=1e-12)

    def test_deterministic_per_seed(self):
        one = signal_offsets(SMALL)
        two = signal_offsets(SMALL)
        np.testing.assert_array_equal(one["a"], two["a"])
        other = signal_offsets(dataclasses.replace(SMALL, seed=4))
        assert not np.array_equal(one["a"], other["a"])


class TestGenerateBagMatrices:
    def test_negative_bag_has_no_signal(self):
        offsets = signal_offsets(SMALL)
        matrices, signal_rows = generate_bag_matrices(SMALL, "sl0", 0, offsets)
        assert signal_rows == ()
        k = matrices["a"].shape[0]
        assert SMALL.k_min <= k <= SMALL.k_max
        assert matrices["a"].shape[1] == 5 and matrices["b"].shape[1] == 3

    def test_positive_bag_signal_row_count(self):
        spec = dataclasses.replace(SMALL, k_min=40, k_max=40, signal_rate=0.1)
        offsets = signal_offsets(spec)
        _, signal_rows = generate_bag_matrices(spec, "sl1", 1, offsets)
        assert len(signal_rows) == 4  # round(0.1 * 40)
        assert list(signal_rows) == sorted(set(signal_rows))
        assert all(0 <= r < 40 for r in signal_rows)

    def test_offset_is_added_exactly_at_signal_rows(self):
        # identical rng stream with the offset scaled to zero isolates the shift
        spec = dataclasses.replace(SMALL, k_min=30, k_max=30)
        null_spec = dataclasses.replace(spec, offset_norm=0.0)
        with_signal, rows = generate_bag_matrices(spec, "sx", 1, signal_offsets(spec))
        without, rows_null = generate_bag_matrices(
            null_spec, "sx", 1, signal_offsets(null_spec)
        )
        assert rows == rows_null
        offsets = signal_offsets(spec)
        for name in ("a", "b"):
            delta = with_signal[name] - without[name]
            background = np.ones(30, dtype=bool)
            background[list(rows)] = False
            assert np.abs(delta[background]).max() == 0.0
            np.testing.assert_allclose(
                delta[list(rows)], np.tile(offsets[name], (len(rows), 1)), atol=1e-12
            )

    def test_deterministic_per_slide(self):
        offsets = signal_offsets(SMALL)
        one, rows_one = generate_bag_matrices(SMALL, "sl2", 1, offsets)
        two, rows_two = generate_bag_matrices(SMALL, "sl2", 1, offsets)
        assert rows_one == rows_two
        np.testing.assert_array_equal(one["a"], two["a"])
        other, _ = generate_bag_matrices(SMALL, "sl3", 1, offsets)
        assert other["a"].shape != one["a"].shape or not np.array_equal(
            other["a"], one["a"]
        )


class TestInMemoryBags:
    def test_cohort_layout(self):
        bags = in_memory_bags(SMALL)
        assert len(bags) == 6
        labels = [bag.label for bag in bags]
        assert labels == [1, 1, 1, 0, 0, 0]  # round(6 * 0.5) positives first
        for bag in bags:
            assert bag.features.shape[1] == 8
            assert SMALL.k_min <= bag.n_instances <= SMALL.k_max
            if bag.label == 0:
                assert bag.signal_rows == ()
            else:
                assert len(bag.signal_rows) >= 1

    def test_features_are_float32_quantized(self):
        # matches the WEMB file route, which stores float32
        bags = in_memory_bags(SMALL)
        features = bags[0].features
        np.testing.assert_array_equal(
            features, features.astype(np.float32).astype(np.float64)
        )

    def test_respects_extractor_order(self):
        forward_bags = in_memory_bags(SMALL, order=["a", "b"])
        reversed_bags = in_memory_bags(SMALL, order=["b", "a"])
        np.testing.assert_array_equal(
            forward_bags[0].features[:, :5], reversed_bags[0].features[:, 3:]
        )

    def test_single_extractor_selection(self):
        bags = in_memory_bags(SMALL, order=["b"])
        assert bags[0].features.shape[1] == 3


class TestGenerateDataset:
    def test_file_route_matches_in_memory(self, tmp_path):
        manifest = generate_dataset(SMALL, tmp_path)
        from_files = assemble_bags(manifest, order=["a", "b"])
        from_memory = in_memory_bags(SMALL, order=["a", "b"])
        assert len(from_files) == len(from_memory)
        for fb, mb in zip(from_files, from_memory):
            assert fb.slide_id == mb.slide_id
            assert fb.patient_id == mb.patient_id
            assert fb.label == mb.label
            assert fb.signal_rows == mb.signal_rows
            np.testing.assert_array_equal(fb.features, mb.features)

    def test_manifest_round_trip_with_checksums(self, tmp_path):
        generate_dataset(SMALL, tmp_path)
        manifest = DatasetManifest.load(
            tmp_path / "dataset_manifest.json", verify_checksums=True
        )
        assert len(manifest.entries) == 6
        assert manifest.extractor_dims == {"a": 5, "b": 3}
        assert manifest.config_hash == SMALL.config_hash()
        assert manifest.extra["synth_spec"]["n_patients"] == 6
        entry = manifest.entries[0]
        assert entry.slide_id == "patient_0000_slide_0"
        assert entry.patient_id == "patient_0000"
        assert entry.label == 1
        assert len(entry.signal_rows) >= 1

    def test_corrupted_file_fails_checksum(self, tmp_path):
        generate_dataset(SMALL, tmp_path)
        manifest = DatasetManifest.load(tmp_path / "dataset_manifest.json")
        victim = manifest.resolve(manifest.entries[0].embeddings["a"])
        data = bytearray(victim.read_bytes())
        data[-1] ^= 0xFF
        victim.write_bytes(bytes(data))
        with pytest.raises(ValueError, match="checksum mismatch"):
            manifest.verify_checksums()

    def test_missing_file_fails_load(self, tmp_path):
        generate_dataset(SMALL, tmp_path)
        manifest = DatasetManifest.load(tmp_path / "dataset_manifest.json")
        manifest.resolve(manifest.entries[0].embeddings["a"]).unlink()
        with pytest.raises(FileNotFoundError, match="missing"):
            DatasetManifest.load(tmp_path / "dataset_manifest.json")

    def test_wrong_format_rejected(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"format": "other"}))
        with pytest.raises(ValueError, match="not a dataset manifest"):
            DatasetManifest.load(path)

    def test_generation_is_reproducible(self, tmp_path):
        generate_dataset(SMALL, tmp_path / "one")
        generate_dataset(SMALL, tmp_path / "two")
        rel = "embeddings/patient_0000_slide_0.a.wemb"
        assert (tmp_path / "one" / rel).read_bytes() == (
            tmp_path / "two" / rel
        ).read_bytes()


class TestAssembleAndMerge:
    def test_attention_fusion_route(self, tmp_path):
        manifest = generate_dataset(SMALL, tmp_path)
        params = FusionParams.create(
            {"a": 5, "b": 3}, ["a", "b"], proj_dim=6, attn_dim=4, seed=0
        )
        bags = assemble_bags(
            manifest, order=["a", "b"], fusion="attention", fusion_params=params
        )
        assert bags[0].features.shape[1] == 6

    def test_merge_patient_bags(self):
        spec = dataclasses.replace(SMALL, bags_per_patient=2)
        bags = in_memory_bags(spec)
        assert len(bags) == 12
        merged = merge_patient_bags(bags)
        assert len(merged) == 6
        by_patient = {}
        for bag in bags:
            by_patient.setdefault(bag.patient_id, []).append(bag)
        for bag in merged:
            group = by_patient[bag.patient_id]
            assert bag.slide_id == f"{bag.patient_id}:merged"
            assert bag.n_instances == sum(b.n_instances for b in group)
            np.testing.assert_array_equal(
                bag.features, np.concatenate([b.features for b in group])
            )
            expected_rows = list(group[0].signal_rows) + [
                r + group[0].n_instances for r in group[1].signal_rows
            ]
            assert list(bag.signal_rows) == expected_rows

    def test_merge_rejects_conflicting_labels(self):
        bags = [
            Bag(slide_id="s1", patient_id="p", features=np.zeros((2, 3)), label=0),
            Bag(slide_id="s2", patient_id="p", features=np.zeros((2, 3)), label=1),
        ]
        with pytest.raises(ValueError, match="conflicting"):
            merge_patient_bags(bags)

    def test_slide_entry_validation(self):
        with pytest.raises(ValueError, match="label"):
            SlideEntry(
                slide_id="s", patient_id="p", label=5, embeddings={"a": "x.wemb"}
            )
        with pytest.raises(ValueError, match="no embedding"):
            SlideEntry(slide_id="s", patient_id="p", label=1, embeddings={})

    def test_duplicate_slide_ids_rejected(self):
        entry = SlideEntry(
            slide_id="s", patient_id="p", label=1, embeddings={"a": "x.wemb"}
        )
        with pytest.raises(ValueError, match="duplicate"):
            DatasetManifest(
                entries=[entry, entry], extractor_dims={"a": 4}
            )
