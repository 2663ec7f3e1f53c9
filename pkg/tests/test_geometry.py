import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointdudo.errors import ConfigurationError, ShapeError
from jointdudo.geometry import (
    AngleMask,
    ScannerGeometry,
    apply_angle_mask,
    build_default_geometry,
    central_column_mask,
)


class TestDefaultGeometry:
    def test_column_structure(self, geometry):
        assert geometry.n_detectors == 19
        tags = geometry.column_tags
        assert tags[:5] == ("bottom",) * 5
        assert tags[5:14] == ("central",) * 9
        assert tags[14:] == ("top",) * 5

    def test_minimal_geometry_same_structure(self, small_geometry, geometry):
        assert small_geometry.column_tags == geometry.column_tags
        assert small_geometry.projection_shape == (8, 8, 19)

    @pytest.mark.parametrize("image,bins", [((4, 4, 4), (8, 8)), ((8, 8, 8), (4, 8)), ((8, 7, 8), (8, 8))])
    def test_below_minimum(self, image, bins):
        with pytest.raises(ConfigurationError):
            build_default_geometry(image, bins)

    def test_on_cylinder_and_unit_aims(self, geometry):
        for d in geometry.detectors:
            r = np.hypot(*d.pinhole_position[:2])
            assert abs(r - geometry.radius_mm) <= 1e-9 * geometry.radius_mm
            assert abs(np.linalg.norm(d.aim_direction) - 1) < 1e-9

    def test_outer_columns_tilted_central_in_plane(self, geometry):
        for d in geometry.detectors:
            if d.column_tag == "central":
                assert d.pinhole_position[2] == 0.0
                assert abs(d.aim_direction[2]) < 1e-12
            elif d.column_tag == "bottom":
                assert d.aim_direction[2] > 0.1
            else:
                assert d.aim_direction[2] < -0.1

    def test_central_column_spans_arc(self, geometry):
        az = [np.degrees(np.arctan2(d.pinhole_position[1], d.pinhole_position[0])) for d in geometry.detectors[5:14]]
        assert np.all(np.diff(az) > 0)
        assert az[-1] - az[0] == pytest.approx(180.0)

    def test_deterministic(self):
        assert build_default_geometry() == build_default_geometry()

    def test_json_roundtrip(self, geometry):
        text = geometry.to_json()
        doc = json.loads(text)
        assert {"radius_mm", "image_grid", "detectors"} <= set(doc)
        assert set(doc["detectors"][0]) >= {"pinhole_position", "aim_direction", "column_tag"}
        assert ScannerGeometry.from_json(text) == geometry
        assert ScannerGeometry.from_json(text).geometry_id == geometry.geometry_id


class TestMask:
    def test_central_mask_indices(self, geometry):
        m = central_column_mask(geometry)
        assert m.indices == tuple(range(5, 14))
        assert m.count == 9
        assert m.complement().count == 10

    def test_all_central_geometry_gives_full_mask(self, geometry):
        from dataclasses import replace

        dets = tuple(replace(d, column_tag="central") for d in geometry.detectors)
        g = replace(geometry, detectors=dets)
        assert central_column_mask(g).count == 19

    def test_zero_fill_and_drop(self, geometry, rng):
        p = rng.random(geometry.projection_shape)
        m = central_column_mask(geometry)
        z = apply_angle_mask(p, m, "zero_fill")
        assert z.shape == p.shape
        assert np.all(z[..., list(m.complement().indices)] == 0)
        np.testing.assert_array_equal(z[..., 5:14], p[..., 5:14])
        d = apply_angle_mask(p, m, "drop")
        assert d.shape == (32, 32, 9)
        np.testing.assert_array_equal(d, p[..., 5:14])

    @pytest.mark.parametrize("mode", ["zero_fill", "drop"])
    def test_full_mask_identity(self, rng, mode):
        p = rng.random((4, 4, 19))
        np.testing.assert_array_equal(apply_angle_mask(p, AngleMask.full(19), mode), p)

    def test_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            apply_angle_mask(rng.random((4, 4, 18)), AngleMask.full(19))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.booleans(), min_size=19, max_size=19), st.integers(0, 2**31))
    def test_zero_fill_idempotent_and_sum_preserved(self, flags, seed):
        p = np.random.default_rng(seed).random((3, 2, 19))
        m = AngleMask(tuple(flags))
        once = apply_angle_mask(p, m, "zero_fill")
        np.testing.assert_array_equal(apply_angle_mask(once, m, "zero_fill"), once)
        assert np.isclose(once.sum(), p[..., m.as_array()].sum(), rtol=1e-12, atol=0)
