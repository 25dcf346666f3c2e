"""Image IO, dataset loading, and the synthetic generator."""

import json
import shutil

import numpy as np
import pytest

from rose.errors import DatasetError, DomainError
from rose.scene import (
    IllumField,
    Sphere,
    assign_splits,
    generate_synthetic,
    load_dataset,
    load_image,
    make_spec,
    save_image,
    spec_cameras,
    trace_view,
)

RNG = np.random.default_rng(7)


def quantize(x):
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5) / 255.0


class TestImageIO:
    def test_extremes_round_trip(self, tmp_path):
        for img in (np.zeros((4, 5, 3)), np.ones((4, 5, 3))):
            save_image(tmp_path / "x.png", img)
            np.testing.assert_array_equal(load_image(tmp_path / "x.png"), img)

    def test_half_maps_to_byte_128(self, tmp_path):
        save_image(tmp_path / "g.png", np.full((3, 3), 0.5))
        got = load_image(tmp_path / "g.png")
        np.testing.assert_allclose(got, 128.0 / 255.0, atol=1e-15)

    def test_random_round_trip_bound(self, tmp_path):
        img = RNG.random((16, 16, 3))
        save_image(tmp_path / "r.png", img)
        got = load_image(tmp_path / "r.png")
        assert np.max(np.abs(got - img)) <= 1.0 / 510.0 + 1e-12

    def test_quantized_values_round_trip_exactly(self, tmp_path):
        img = quantize(RNG.random((8, 8, 3)))
        save_image(tmp_path / "q.png", img)
        np.testing.assert_array_equal(load_image(tmp_path / "q.png"), img)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            load_image(tmp_path / "nope.png")


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    spec = make_spec("constant02", resolution=24, n_views=8, seed=3)
    ds = generate_synthetic(spec, out)
    return spec, ds, out


class TestGenerator:
    def test_constant_transition_scales_pixels(self, small_scene):
        _, ds, _ = small_scene
        # low = 0.2 * nor pre-quantization; after independent 8-bit
        # quantization of both sides the gap stays within one level.
        gap = np.abs(ds.images_low - 0.2 * ds.images_nor)
        assert gap.max() <= 1.0 / 255.0

    def test_identity_transition_is_lossless(self, tmp_path):
        spec = make_spec("constant02", resolution=16, n_views=6)
        spec.illum = IllumField(kind="constant", value=1.0)
        ds = generate_synthetic(spec, tmp_path / "id")
        np.testing.assert_array_equal(ds.images_low, ds.images_nor)

    def test_generator_consistency_pre_quantization(self):
        spec = make_spec("ramp", resolution=16, n_views=3)
        cam = spec_cameras(spec)[0]
        nor, hit, pts = trace_view(spec, cam)
        illum = spec.illum(pts)
        illum[~hit] = 1.0
        low = nor * illum[..., None]
        np.testing.assert_array_equal(low, nor * illum[..., None])
        assert np.all((illum > 0.0) & (illum <= 1.0))

    def test_ramp_ratio_matches_analytic_field(self, tmp_path):
        spec = make_spec("ramp", resolution=24, n_views=4, seed=1)
        ds = generate_synthetic(spec, tmp_path / "ramp")
        for vi, cam in enumerate(spec_cameras(spec)):
            nor, hit, pts = trace_view(spec, cam)
            expect = spec.illum(pts)
            gap = np.abs(ds.images_low[vi] - ds.images_nor[vi] * expect[..., None])
            assert gap[hit].max() <= 2.0 / 255.0

    def test_noise_respects_seed(self, tmp_path):
        a = generate_synthetic(make_spec("ramp", noise_sigma=0.05, resolution=16, n_views=3, seed=9), tmp_path / "a")
        b = generate_synthetic(make_spec("ramp", noise_sigma=0.05, resolution=16, n_views=3, seed=9), tmp_path / "b")
        np.testing.assert_array_equal(a.images_low, b.images_low)

    def test_noise_independent_across_views(self, tmp_path):
        ds = generate_synthetic(make_spec("constant02", noise_sigma=0.05, resolution=16, n_views=3, seed=2), tmp_path / "n")
        resid = ds.images_low - np.clip(0.2 * ds.images_nor, 0, 1)
        c = np.corrcoef(resid[0].reshape(-1), resid[1].reshape(-1))[0, 1]
        assert abs(c) < 0.1

    def test_camera_inside_primitive_rejected(self, tmp_path):
        spec = make_spec("constant02", resolution=8, n_views=2)
        spec.primitives.append(Sphere(center=(0.0, 0.55, 3.1), radius=1.0, albedo=(1, 1, 1)))
        with pytest.raises(DomainError):
            generate_synthetic(spec, tmp_path / "bad")

    def test_split_assignment(self):
        splits = assign_splits(16)
        assert splits.count("test") == 3
        assert splits.count("val") == 1
        assert splits.count("train") == 12

    def test_illuminance_summary_range(self, small_scene):
        _, ds, _ = small_scene
        assert ds.illum_gt is not None
        assert ds.illum_gt.min() > 0.0 and ds.illum_gt.max() <= 1.0


class TestLoader:
    def test_cameras_match_spec_within_tolerance(self, small_scene):
        spec, ds, _ = small_scene
        for cam, expect in zip(ds.cameras, spec_cameras(spec)):
            np.testing.assert_allclose(cam.c2w, expect.c2w, atol=1e-6)
            assert cam.camera_angle_x == pytest.approx(spec.cam_fov_x, abs=1e-9)

    def test_loader_is_inverse_of_writer(self, small_scene):
        spec, ds, out = small_scene
        cam = spec_cameras(spec)[0]
        nor, hit, pts = trace_view(spec, cam)
        illum = spec.illum(pts)
        illum[~hit] = 1.0
        low = np.clip(nor * illum[..., None], 0.0, 1.0)
        np.testing.assert_array_equal(ds.images_low[0], quantize(low))
        np.testing.assert_array_equal(ds.images_nor[0], quantize(nor))

    def test_missing_image_names_frame(self, small_scene, tmp_path):
        _, _, out = small_scene
        broken = tmp_path / "broken"
        shutil.copytree(out, broken)
        (broken / "images" / "low" / "f_002.png").unlink()
        with pytest.raises(DatasetError) as ei:
            load_dataset(broken)
        assert "f_002" in str(ei.value)

    def test_resolution_mismatch_names_frame(self, small_scene, tmp_path):
        _, _, out = small_scene
        broken = tmp_path / "res"
        shutil.copytree(out, broken)
        save_image(broken / "images" / "low" / "f_001.png", np.zeros((4, 4, 3)))
        with pytest.raises(DatasetError) as ei:
            load_dataset(broken)
        assert "frame 1" in str(ei.value)

    def test_non_orthonormal_rotation_rejected(self, small_scene, tmp_path):
        _, _, out = small_scene
        broken = tmp_path / "rot"
        shutil.copytree(out, broken)
        meta = json.loads((broken / "poses.json").read_text())
        meta["frames"][0]["transform_matrix"][0][0] *= 2.0
        (broken / "poses.json").write_text(json.dumps(meta))
        with pytest.raises(DomainError):
            load_dataset(broken)

    def test_missing_poses_json(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_missing_keys_rejected(self, tmp_path):
        (tmp_path / "poses.json").write_text(json.dumps({"frames": []}))
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_pixel_range_and_counts(self, small_scene):
        _, ds, _ = small_scene
        assert ds.images_low.min() >= 0.0 and ds.images_low.max() <= 1.0
        assert ds.n_frames == len(ds.cameras) == len(ds.splits) == 8
