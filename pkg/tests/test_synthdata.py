import numpy as np
import pytest

from errors import ConfigError, ParseError
from formats import read_ply
from synthdata import (Scene, Sphere, Texture, camera_rig, depth_range, generate_scene, load_scene,
                       load_views, raycast_render, read_dataset, scene_dirs, write_dataset, render_views)

from conftest import make_cam


def flat_texture() -> Texture:
    return Texture([0.8, 0.8, 0.8], [[1.0, 0.0, 0.0, 0.0, 1.0]], 0.5, 0.5)


class TestScenes:
    def test_same_seed_same_scene(self):
        assert generate_scene(5, 3).to_dict() == generate_scene(5, 3).to_dict()
        assert generate_scene(5, 3).to_dict() != generate_scene(6, 3).to_dict()

    def test_minimal_scene_is_one_rectangle(self):
        scene = generate_scene(0, complexity=0)
        assert [p.kind for p in scene.primitives] == ["rectangle"]

    def test_complexity_adds_objects(self):
        assert len(generate_scene(0, complexity=4).primitives) == 5

    def test_box_kind(self):
        scene = generate_scene(9, kind="box")
        assert [p.kind for p in scene.primitives] == ["rectangle", "box"]
        assert Scene.from_dict(scene.to_dict()).kind == "box"
        with pytest.raises(ConfigError):
            generate_scene(9, kind="teapot")

    def test_dict_roundtrip_keeps_geometry(self, rng):
        scene = generate_scene(11, 3)
        X = rng.normal(size=(20, 3))
        np.testing.assert_allclose(Scene.from_dict(scene.to_dict()).distance(X), scene.distance(X))

    def test_sphere_distance(self):
        sphere = Sphere([0.0, 0.0, 0.0], 0.5, flat_texture())
        assert sphere.distance(np.array([[1.5, 0.0, 0.0]]))[0] == pytest.approx(1.0)

    def test_texture_in_unit_range(self, rng):
        albedo = generate_scene(2, 2).primitives[0].texture.albedo(rng.normal(size=(50, 3)))
        assert ((albedo >= 0) & (albedo <= 1)).all()


class TestRendering:
    def test_fronto_plane_has_constant_depth(self):
        scene = generate_scene(0, complexity=0)
        rgb, depth, hit = raycast_render(scene, make_cam(size=16, focal_ratio=2.0))
        assert hit.all()
        np.testing.assert_allclose(depth, 4.0, atol=1e-9)
        assert rgb.shape == (16, 16, 3)

    def test_misses_have_zero_depth(self):
        scene = Scene(0, 1, [Sphere([0.0, 0.0, 0.0], 0.3, flat_texture())])
        rgb, depth, hit = raycast_render(scene, make_cam(size=16))
        assert not hit.all() and hit.any()
        assert (depth[~hit] == 0).all()
        np.testing.assert_array_equal(rgb[~hit], 0.0)

    def test_rig_looks_at_the_scene(self):
        scene = generate_scene(1, 2)
        cams = camera_rig(scene, 6, jitter_seed=4)
        assert len(cams) == 6
        for cam in cams:
            assert project_z(cam, scene.centroid) > 0

    def test_rig_needs_two_views(self):
        with pytest.raises(ConfigError):
            camera_rig(generate_scene(1, 1), 1)

    def test_depth_range_has_margin(self):
        views = render_views(generate_scene(0, 0), [make_cam(size=8)])
        d_min, d_max = depth_range(views, margin=0.1)
        assert d_min == pytest.approx(4.0 / 1.1)
        assert d_max == pytest.approx(4.4)

    @pytest.mark.parametrize("seed", range(5))
    def test_rig_sees_the_whole_table(self, seed):
        scene = generate_scene(seed, 2)
        views = render_views(scene, camera_rig(scene, 5, jitter_seed=seed, width=32, height=32))
        for view in views:
            hit = view.depth > 0
            assert hit.mean() >= 0.5
            # table edges stay inside the frame
            assert not (hit[0].any() or hit[-1].any() or hit[:, 0].any() or hit[:, -1].any())
        d_min, d_max = depth_range(views)
        assert d_max / d_min <= 10


def project_z(cam, X):
    return float((cam.R @ X + cam.t)[2])


class TestDatasetLayout:
    def test_written_scene_reads_back(self, tmp_path):
        scene = generate_scene(3, 1)
        views = render_views(scene, camera_rig(scene, 3, width=16, height=16))
        scene_dir = write_dataset(tmp_path, 0, scene, views, M1=16)
        index = read_dataset(scene_dir, M1=16)
        assert len(index) == 3
        d_min, d_max = depth_range(views)
        assert index.d_min == pytest.approx(d_min)
        assert index.d_max == pytest.approx(d_max)
        loaded = load_views(index)
        for view, back in zip(views, loaded):
            np.testing.assert_allclose(back.image, view.image, atol=0.5 / 255 + 1e-12)
            np.testing.assert_allclose(back.depth, view.depth, rtol=1e-6)
            np.testing.assert_allclose(back.camera.center, view.camera.center, atol=1e-12)
        assert load_scene(scene_dir).to_dict() == scene.to_dict()
        points, _ = read_ply(scene_dir / "gt_points.ply")
        assert len(points) > 0
        assert scene.distance(points.astype(np.float64)).max() < 1e-4

    def test_missing_depth_file(self, tmp_path):
        scene = generate_scene(3, 0)
        scene_dir = write_dataset(tmp_path, 0, scene, render_views(scene, camera_rig(scene, 2, width=8, height=8)),
                                  with_surface=False)
        (scene_dir / "depths" / "00000001.pfm").unlink()
        with pytest.raises(ParseError):
            read_dataset(scene_dir)

    def test_scene_dirs(self, tiny_dataset, tmp_path):
        dirs = scene_dirs(tiny_dataset)
        assert [d.name for d in dirs] == ["scene_0000"]
        assert scene_dirs(dirs[0]) == dirs
        with pytest.raises(ParseError):
            scene_dirs(tmp_path)
