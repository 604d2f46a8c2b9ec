from fractions import Fraction

import numpy as np
import pytest

from conftest import small_spec
from wsisearch.archive import (
    DimensionMismatchError,
    ManifestError,
    MissingWsiError,
    NonFiniteFeatureError,
    PatchRef,
    decode_feature_file,
    encode_feature_file,
    generate_synthetic_archive,
    load_features,
    load_manifest,
    parse_manifest,
    stable_seed,
    validate_archive,
    write_manifest,
)


def _manifest_dict(records, classes=("A", "B"), dim=4):
    return {"classes": list(classes), "feature_dim": dim, "wsis": records}


def _rec(wsi_id, label="A", patient="P1", w=4, h=3):
    return {"wsi_id": wsi_id, "patient_id": patient, "label": label, "grid_w": w, "grid_h": h}


class TestManifest:
    def test_two_records(self, tmp_path):
        m = parse_manifest(_manifest_dict([_rec("W1"), _rec("W2", "B", "P2")]), tmp_path)
        assert m.wsi_ids == ["W1", "W2"]
        assert m.record("W2").label == "B"
        assert m.record("W1").patch_count == 12

    def test_duplicate_id_named(self, tmp_path):
        with pytest.raises(ManifestError, match="W1"):
            parse_manifest(_manifest_dict([_rec("W1"), _rec("W1")]), tmp_path)

    def test_unknown_label(self, tmp_path):
        with pytest.raises(ManifestError, match="X"):
            parse_manifest(_manifest_dict([_rec("W1", "X")]), tmp_path)

    def test_round_trip_through_file(self, tmp_path):
        m = parse_manifest(_manifest_dict([_rec("W1"), _rec("W2", "B", "P2")]), tmp_path / "features")
        write_manifest(m, tmp_path / "manifest.json")
        again = load_manifest(tmp_path)
        assert again.to_json() == m.to_json()

    def test_malformed_json_reports_line(self, tmp_path):
        (tmp_path / "manifest.json").write_text('{\n  "classes": [\n')
        with pytest.raises(ManifestError, match="line"):
            load_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "nothing")

    def test_patch_ref_defaults(self):
        ref = PatchRef("W1", 2, 3)
        assert ref.patch_px == 256 and ref.magnification == Fraction(20)


class TestFeatureStore:
    def test_encode_decode_exact(self):
        rng = np.random.default_rng(0)
        coords = np.array([[0, 0], [1, 0], [2, 1]], dtype=np.uint32)
        feats = rng.standard_normal((3, 5)).astype(np.float32)
        stain = rng.random((3, 6)).astype(np.float32)
        out = decode_feature_file("W", encode_feature_file(coords, feats, stain), 5)
        assert np.array_equal(out.coords, coords)
        assert out.features.tobytes() == feats.tobytes()
        assert np.array_equal(out.stain, stain)

    def test_nan_rejected(self):
        feats = np.zeros((2, 3), np.float32)
        feats[1, 2] = np.nan
        blob = encode_feature_file(np.zeros((2, 2), np.uint32), feats)
        with pytest.raises(NonFiniteFeatureError):
            decode_feature_file("W", blob, 3)

    def test_dimension_mismatch(self):
        blob = encode_feature_file(np.zeros((1, 2), np.uint32), np.zeros((1, 3), np.float32))
        with pytest.raises(DimensionMismatchError):
            decode_feature_file("W", blob, 4)

    def test_missing_wsi(self, small_archive):
        rec = small_archive.records[0]
        m = parse_manifest(
            {"classes": small_archive.classes, "feature_dim": small_archive.feature_dim,
             "wsis": [{"wsi_id": "W9", "patient_id": "P", "label": rec.label, "grid_w": 2, "grid_h": 2}]},
            small_archive.feature_store,
        )
        with pytest.raises(MissingWsiError):
            load_features(m, "W9")

    def test_patch_count_and_dim(self, small_archive):
        wsi = small_archive.wsi_ids[0]
        f = load_features(small_archive, wsi)
        assert len(f) == 300
        assert f.features.shape == (300, small_archive.feature_dim)
        assert len(f.as_dict()) == 300


class TestSynthetic:
    def test_counts_and_patients(self, tmp_path):
        m = generate_synthetic_archive(small_spec(wsis_per_class=10, grid_w=4, grid_h=3), tmp_path)
        assert len(m.records) == 30
        assert len({r.patient_id for r in m.records}) == 9

    def test_deterministic_store(self, tmp_path):
        spec = small_spec(grid_w=5, grid_h=4)
        generate_synthetic_archive(spec, tmp_path / "a")
        generate_synthetic_archive(spec, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_zero_noise_collapses_to_centroid(self, tmp_path):
        m = generate_synthetic_archive(small_spec(noise_sigma=0.0, grid_w=4, grid_h=3), tmp_path)
        by_class = {}
        for r in m.records:
            by_class.setdefault(r.label, []).append(load_features(m, r.wsi_id).features)
        for vecs in by_class.values():
            allv = np.concatenate(vecs)
            assert np.all(allv == allv[0])

    def test_fresh_archive_validates(self, small_archive):
        assert validate_archive(small_archive) == []

    def test_single_class_flagged(self, tmp_path):
        m = parse_manifest(_manifest_dict([_rec("W1"), _rec("W2")], classes=("A",)), tmp_path)
        assert any("fewer than 2 classes" in p for p in validate_archive(m, check_store=False))

    def test_empty_wsi_flagged(self, tmp_path):
        m = parse_manifest(_manifest_dict([_rec("W1", w=0, h=0), _rec("W2", "B")]), tmp_path)
        assert any("empty WSI" in p for p in validate_archive(m, check_store=False))

    def test_stable_seed_is_order_sensitive(self):
        assert stable_seed(0, "a", "b") == stable_seed(0, "a", "b")
        assert stable_seed(0, "a", "b") != stable_seed(0, "b", "a")
        assert stable_seed(0, "a") != stable_seed(1, "a")
