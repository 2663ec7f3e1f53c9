import json

import numpy as np
import pytest
from conftest import tiny_config

from jointdudo.dataset import (
    DatasetManifest,
    build_dataset,
    case_seed,
    load_split,
    normalized_case,
    prior_gain,
)
from jointdudo.errors import ConfigurationError, ValidationError
from jointdudo.geometry import ScannerGeometry, central_column_mask
from jointdudo.metrics import projection_metrics


class TestDatasetBuild:
    def test_layout(self, tiny_manifest):
        root = tiny_manifest.root
        doc = json.loads((root / "manifest.json").read_text())
        assert doc["format"] == "jointdudo-dataset/1"
        assert tiny_manifest.split_sizes() == (4, 2, 2)
        assert ScannerGeometry.from_json((root / "geometry.json").read_text()).geometry_id == doc["geometry_id"]
        rec = doc["cases"][0]
        assert {"file", "sha256", "tensors", "seed", "dose_ratio", "phantom", "fd_sha256"} <= set(rec)
        tensor = rec["tensors"][0]
        assert tensor["dtype"] == "float32" and "shape" in tensor and "offset" in tensor
        tiny_manifest.verify()

    def test_case_contents(self, tiny_manifest):
        g = tiny_manifest.geometry()
        outer = list(central_column_mask(g).complement().indices)
        c = tiny_manifest.load_case("train-0000")
        assert c.p_fd_19a.shape == g.projection_shape
        assert not c.p_fd_9a[..., outer].any() and not c.p_ld_9a[..., outer].any()
        np.testing.assert_array_equal(c.p_fd_9a[..., 5:14], c.p_fd_19a[..., 5:14])
        assert np.all(c.p_ld_9a <= c.p_fd_9a)
        assert c.i_fd_19a.min() >= 0 and c.i_ld_9a.min() >= 0

    def test_deterministic(self, tiny_cfg, tiny_manifest, tmp_path):
        m2 = build_dataset(tiny_cfg, tmp_path / "again")
        for cid, rec in tiny_manifest.cases.items():
            assert m2.cases[cid]["sha256"] == rec["sha256"]

    def test_dose_changes_only_low_dose(self, tiny_cfg, tiny_manifest, tmp_path):
        m2 = build_dataset(tiny_cfg, tmp_path / "d5", dose_ratio=0.5)
        for cid, rec in tiny_manifest.cases.items():
            assert m2.cases[cid]["fd_sha256"] == rec["fd_sha256"]
            assert m2.cases[cid]["sha256"] != rec["sha256"]

    def test_seeds_distinct(self):
        ids = [f"{s}-{i:04d}" for s in ("train", "val", "test") for i in range(200)]
        assert len({case_seed(0, c) for c in ids}) == len(ids)
        assert case_seed(0, "train-0000") != case_seed(1, "train-0000")

    def test_nonempty_output_rejected(self, tiny_cfg, tmp_path):
        (tmp_path / "x").mkdir()
        (tmp_path / "x" / "junk").write_text("")
        with pytest.raises(ConfigurationError):
            build_dataset(tiny_cfg, tmp_path / "x")

    def test_failure_leaves_no_partial_output(self, tmp_path, monkeypatch):
        import jointdudo.dataset as ds

        def boom(*a, **k):
            raise RuntimeError("simulated failure")

        monkeypatch.setattr(ds, "simulate_case", boom)
        with pytest.raises(RuntimeError):
            build_dataset(tiny_config(), tmp_path / "out")
        assert not (tmp_path / "out").exists()
        assert list(tmp_path.iterdir()) == []

    def test_bad_dose(self, tiny_cfg, tmp_path):
        with pytest.raises(ValidationError):
            build_dataset(tiny_cfg, tmp_path / "o", dose_ratio=0.0)

    def test_checksum_detected(self, tiny_cfg, tmp_path):
        m = build_dataset(tiny_cfg, tmp_path / "c")
        f = m.root / m.cases["val-0000"]["file"]
        blob = bytearray(f.read_bytes())
        blob[-1] ^= 0xFF
        f.write_bytes(bytes(blob))
        with pytest.raises(ValidationError):
            m.verify()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ValidationError):
            DatasetManifest.load(tmp_path)


class TestNormalization:
    def test_scales(self, tiny_manifest):
        n = tiny_manifest.normalization
        g = tiny_manifest.geometry()
        totals = [tiny_manifest.load_case(c).p_fd_19a.sum() for c in tiny_manifest.cases]
        assert n["mean_fd_total_counts"] == pytest.approx(np.mean(totals))
        assert n["projection_scale"] == pytest.approx(np.mean(totals) / np.prod(g.projection_shape))
        assert prior_gain(tiny_manifest) == pytest.approx(n["volume_scale"] / n["projection_scale"])

    def test_dose_compensation(self, tiny_manifest):
        c = tiny_manifest.load_case("train-0001")
        t = normalized_case(tiny_manifest, c)
        s = tiny_manifest.normalization["projection_scale"]
        np.testing.assert_allclose(t["p_ld_9a"], c.p_ld_9a / (s * c.dose_ratio), rtol=1e-6)
        assert all(v.dtype == np.float32 for v in t.values())

    def test_load_split(self, tiny_manifest):
        ids, arr = load_split(tiny_manifest, "test")
        assert ids == ["test-0000", "test-0001"]
        assert arr["p_fd_19a"].shape == (2, 8, 8, 19)
        with pytest.raises(ValidationError):
            load_split(tiny_manifest, "holdout")

    def test_scale_invariant_metrics(self, tiny_manifest):
        # one global constant per tensor kind leaves relative metrics unchanged
        c = tiny_manifest.load_case("test-0000")
        t = normalized_case(tiny_manifest, c)
        a = projection_metrics(c.p_fd_9a, c.p_fd_19a)
        b = projection_metrics(t["p_fd_9a"], t["p_fd_19a"])
        assert a["nmse"] == pytest.approx(b["nmse"], rel=1e-5)
