import numpy as np
import pytest

from camera import Camera
from pose_utils import PoseUtils
from synthdata import camera_rig, generate_dataset, generate_scene, render_views


def make_cam(center=(0.0, 0.0, -4.0), target=(0.0, 0.0, 0.0), size:int = 16, focal_ratio:float = 1.0) -> Camera:
    return Camera(PoseUtils.default_intrinsics(size, size, focal_ratio),
                  PoseUtils.look_at(np.asarray(center, dtype=np.float64), np.asarray(target, dtype=np.float64)),
                  size, size)


@pytest.fixture
def cam():
    return make_cam()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def plane_views():
    ''' Five 32x32 views of a single textured rectangle '''
    scene = generate_scene(7, complexity=0)
    return scene, render_views(scene, camera_rig(scene, 5, width=32, height=32))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    generate_dataset(root, seed=0, n_scenes=1, n_views=5, size=32, complexity=1)
    return root
