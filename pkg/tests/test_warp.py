import numpy as np
import pytest
import torch

from camera import plane_homography
from errors import GeometryError, ShapeError
from warp import DTYPE, bilinear_sample, bilinear_sample_grad, depth_warp, forward_splat, homography_warp

from conftest import make_cam


@pytest.fixture
def fmap():
    return torch.arange(2 * 4 * 5, dtype=DTYPE).reshape(2, 4, 5)


class TestBilinearSample:
    def test_integer_coordinates_are_exact(self, fmap):
        coords = torch.tensor([[0.0, 0.0], [4.0, 3.0], [2.0, 1.0]], dtype=DTYPE)
        out = bilinear_sample(fmap, coords)
        np.testing.assert_array_equal(out.values.numpy(), fmap[:, [0, 3, 1], [0, 4, 2]].numpy())
        assert out.mask.all()

    def test_midpoint_averages_neighbours(self, fmap):
        out = bilinear_sample(fmap, torch.tensor([[1.5, 2.5]], dtype=DTYPE))
        expected = fmap[:, 2:4, 1:3].mean(dim=(1, 2))
        np.testing.assert_allclose(out.values[:, 0].numpy(), expected.numpy(), atol=1e-12)

    def test_out_of_bounds_is_zero_and_masked(self, fmap):
        coords = torch.tensor([[-0.5, 1.0], [4.5, 1.0], [1.0, 3.01]], dtype=DTYPE)
        out = bilinear_sample(fmap, coords)
        assert not out.mask.any()
        assert torch.count_nonzero(out.values) == 0

    def test_nan_coordinates_rejected(self, fmap):
        with pytest.raises(GeometryError):
            bilinear_sample(fmap, torch.tensor([[float("nan"), 0.0]], dtype=DTYPE))

    def test_bad_shapes_rejected(self, fmap):
        with pytest.raises(ShapeError):
            bilinear_sample(fmap[0], torch.zeros(1, 2, dtype=DTYPE))
        with pytest.raises(ShapeError):
            bilinear_sample(fmap, torch.zeros(1, 3, dtype=DTYPE))

    def test_analytic_gradient_matches_autograd(self, fmap, rng):
        coords = torch.tensor(rng.uniform(0.1, 2.9, size=(6, 2)), dtype=DTYPE, requires_grad=True)
        source = fmap.clone().requires_grad_(True)
        upstream = torch.tensor(rng.normal(size=(2, 6)), dtype=DTYPE)
        (bilinear_sample(source, coords).values * upstream).sum().backward()
        grad_map, grad_coords = bilinear_sample_grad(fmap, coords, upstream)
        np.testing.assert_allclose(grad_map.numpy(), source.grad.numpy(), atol=1e-12)
        np.testing.assert_allclose(grad_coords.numpy(), coords.grad.numpy(), atol=1e-12)

    def test_linear_in_the_map(self, fmap, rng):
        other = torch.tensor(rng.normal(size=(2, 4, 5)), dtype=DTYPE)
        coords = torch.tensor(rng.uniform(0, 3, size=(7, 2)), dtype=DTYPE)
        mixed = bilinear_sample(2.5 * fmap - 0.75 * other, coords).values
        separate = 2.5 * bilinear_sample(fmap, coords).values - 0.75 * bilinear_sample(other, coords).values
        np.testing.assert_allclose(mixed.numpy(), separate.numpy(), atol=1e-10)


class TestWarps:
    def test_identity_homography(self, fmap):
        out = homography_warp(fmap, np.eye(3), (4, 5))
        np.testing.assert_allclose(out.values.numpy(), fmap.numpy(), atol=1e-12)
        assert out.mask.all()

    def test_batched_homographies(self, fmap):
        H = np.stack([np.eye(3), np.eye(3)])
        H[1, 0, 2] = 1.0
        out = homography_warp(fmap, H, (4, 5))
        assert tuple(out.values.shape) == (2, 2, 4, 5)
        np.testing.assert_allclose(out.values[:, 1, :, :4].numpy(), fmap[:, :, 1:].numpy(), atol=1e-12)
        assert not out.mask[1, :, 4].any()

    def test_depth_warp_into_same_camera(self, rng):
        cam = make_cam(size=8)
        source = torch.tensor(rng.uniform(size=(3, 8, 8)), dtype=DTYPE)
        depth = torch.tensor(rng.uniform(2, 6, size=(8, 8)), dtype=DTYPE)
        out = depth_warp(source, depth, cam, cam)
        assert out.visible.all()
        np.testing.assert_allclose(out.sampled.values.numpy(), source.numpy(), atol=1e-9)
        np.testing.assert_allclose(out.z.numpy(), depth.numpy(), atol=1e-9)

    def test_depth_warp_masks_empty_depth(self, rng):
        cam = make_cam(size=8)
        depth = torch.full((8, 8), 4.0, dtype=DTYPE)
        depth[0, 0] = 0.0
        out = depth_warp(torch.ones(1, 8, 8, dtype=DTYPE), depth, cam, cam)
        assert not out.visible[0, 0]
        assert out.sampled.values[0, 0, 0] == 0

    def test_depth_warp_checks_shape(self):
        with pytest.raises(ShapeError):
            depth_warp(torch.ones(1, 8, 8, dtype=DTYPE), torch.ones(4, 4, dtype=DTYPE), make_cam(size=8), make_cam(size=8))

    @pytest.mark.parametrize("d", [2.5, 4.0, 7.0])
    def test_constant_depth_matches_plane_homography(self, rng, d):
        tgt = make_cam(size=8)
        src = make_cam(center=(0.7, 0.3, -3.8), target=(0.1, 0.0, 0.0), size=8)
        source = torch.tensor(rng.uniform(size=(3, 8, 8)), dtype=DTYPE)
        by_depth = depth_warp(source, torch.full((8, 8), d, dtype=DTYPE), tgt, src)
        by_plane = homography_warp(source, plane_homography(src, tgt, d), (8, 8))
        both = by_depth.visible & by_plane.mask
        assert both.sum() > 0.5 * both.numel()
        np.testing.assert_allclose(by_depth.sampled.values[:, both].numpy(), by_plane.values[:, both].numpy(),
                                   atol=1e-9)


class TestForwardSplat:
    def test_same_camera_is_identity(self, rng):
        cam = make_cam(size=8)
        prev = torch.tensor(rng.normal(size=(4, 8, 8)), dtype=DTYPE)
        out = forward_splat(prev, np.full((8, 8), 3.0), cam, cam)
        assert out.mask.all()
        np.testing.assert_array_equal(out.values.numpy(), prev.numpy())

    def test_holes_stay_zero(self, rng):
        cam = make_cam(size=8)
        depth = np.full((8, 8), 3.0)
        depth[2, 5] = 0.0
        out = forward_splat(torch.ones(1, 8, 8, dtype=DTYPE), depth, cam, cam)
        assert not out.mask[2, 5]
        assert out.values[0, 2, 5] == 0

    def test_sideways_move_shifts_content(self, rng):
        cam = make_cam(size=8)
        # f = 8 and depth 4: moving half a unit right shifts the image one pixel left
        moved = make_cam(center=(0.5, 0.0, -4.0), target=(0.5, 0.0, 0.0), size=8)
        prev = torch.tensor(rng.normal(size=(2, 8, 8)), dtype=DTYPE)
        out = forward_splat(prev, np.full((8, 8), 4.0), cam, moved)
        np.testing.assert_array_equal(out.values[:, :, :7].numpy(), prev[:, :, 1:].numpy())
        assert not out.mask[:, 7].any()

    def test_nearer_point_wins_a_collision(self, rng):
        cam = make_cam(size=8)
        moved = make_cam(center=(0.5, 0.0, -4.0), target=(0.5, 0.0, 0.0), size=8)
        prev = torch.tensor(rng.normal(size=(2, 8, 8)), dtype=DTYPE)
        depth = np.full((8, 8), 4.0)
        # column 3 at depth 2 shifts two pixels and lands on column 1 with column 2
        depth[:, 3] = 2.0
        out = forward_splat(prev, depth, cam, moved)
        np.testing.assert_array_equal(out.values[:, :, 1].numpy(), prev[:, :, 3].numpy())
        assert not out.mask[:, 2].any()
