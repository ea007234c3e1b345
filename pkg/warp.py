"""Bilinear sampling and the warps built on it.

Out-of-bounds samples are zero with an explicit mask; no border clamping.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch
from torch.autograd.function import once_differentiable

from camera import Camera, pixel_grid, relative_pose
from errors import GeometryError, ShapeError

DTYPE = torch.float64
W_EPS = 1e-12
# round-off slack on the image border
BOUND_EPS = 1e-9


@dataclass
class SampledMap:
    values: torch.Tensor  # (C, *S)
    mask: torch.Tensor    # (*S) bool


@dataclass
class DepthWarpResult:
    sampled: SampledMap
    z: torch.Tensor
    visible: torch.Tensor


def as_tensor(x:Union[np.ndarray, torch.Tensor, float]) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def _neighbors(coords:torch.Tensor, height:int, width:int):
    x = coords[..., 0]
    y = coords[..., 1]
    valid = ((x >= -BOUND_EPS) & (x <= width - 1 + BOUND_EPS)
             & (y >= -BOUND_EPS) & (y <= height - 1 + BOUND_EPS))
    xs = torch.where(valid, x, torch.zeros_like(x)).clamp(0, width - 1)
    ys = torch.where(valid, y, torch.zeros_like(y)).clamp(0, height - 1)
    # x0 stops at W-2 so the right and bottom borders interpolate with weight 1
    x0 = torch.clamp(torch.floor(xs), 0, max(width - 2, 0)).long()
    y0 = torch.clamp(torch.floor(ys), 0, max(height - 2, 0)).long()
    x1 = torch.clamp(x0 + 1, max=width - 1)
    y1 = torch.clamp(y0 + 1, max=height - 1)
    wx = xs - x0.to(xs.dtype)
    wy = ys - y0.to(ys.dtype)
    idx = (y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1)
    return valid, wx, wy, idx


def _gather(flat:torch.Tensor, idx:torch.Tensor) -> torch.Tensor:
    return flat[:, idx.reshape(-1)].reshape((flat.shape[0],) + tuple(idx.shape))


def _bilinear_backward(fmap:torch.Tensor, coords:torch.Tensor, upstream:torch.Tensor):
    C, H, W = fmap.shape
    valid, wx, wy, idx = _neighbors(coords, H, W)
    flat = fmap.reshape(C, H * W)
    I00, I01, I10, I11 = (_gather(flat, i) for i in idx)
    g = torch.where(valid, upstream, torch.zeros_like(upstream))

    grad_map = torch.zeros_like(flat)
    weights = ((1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy)
    for i, w in zip(idx, weights):
        grad_map.index_add_(1, i.reshape(-1), (g * w).reshape(C, -1))

    dx = (1 - wy) * (I01 - I00) + wy * (I11 - I10)
    dy = (1 - wx) * (I10 - I00) + wx * (I11 - I01)
    grad_coords = torch.stack([(g * dx).sum(0), (g * dy).sum(0)], dim=-1)
    return grad_map.reshape(C, H, W), grad_coords


class _BilinearSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, fmap, coords):
        C, H, W = fmap.shape
        valid, wx, wy, idx = _neighbors(coords, H, W)
        flat = fmap.reshape(C, H * W)
        I00, I01, I10, I11 = (_gather(flat, i) for i in idx)
        out = ((1 - wx) * (1 - wy) * I00 + wx * (1 - wy) * I01
               + (1 - wx) * wy * I10 + wx * wy * I11)
        out = torch.where(valid, out, torch.zeros_like(out))
        ctx.save_for_backward(fmap, coords)
        ctx.mark_non_differentiable(valid)
        return out, valid

    @staticmethod
    @once_differentiable
    def backward(ctx, grad_out, _grad_valid):
        fmap, coords = ctx.saved_tensors
        grad_map, grad_coords = _bilinear_backward(fmap, coords, grad_out)
        return (grad_map if ctx.needs_input_grad[0] else None,
                grad_coords if ctx.needs_input_grad[1] else None)


def _check_inputs(fmap:torch.Tensor, coords:torch.Tensor) -> None:
    if fmap.dim() != 3:
        raise ShapeError(f"expected a (C, H, W) map, got shape {tuple(fmap.shape)}")
    if coords.shape[-1] != 2:
        raise ShapeError(f"coordinates need a trailing (x, y) axis, got shape {tuple(coords.shape)}")
    if torch.isnan(coords).any():
        raise GeometryError("NaN sampling coordinates")


def bilinear_sample(fmap:torch.Tensor, coords:torch.Tensor) -> SampledMap:
    ''' Sample a (C, H, W) map at (*S, 2) continuous (x, y) coordinates '''
    fmap = as_tensor(fmap)
    coords = as_tensor(coords)
    _check_inputs(fmap, coords)
    values, mask = _BilinearSample.apply(fmap, coords)
    return SampledMap(values, mask)


def bilinear_sample_grad(fmap:torch.Tensor, coords:torch.Tensor,
                         upstream:torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    ''' Analytic gradients of bilinear_sample wrt the map and the coordinates '''
    fmap = as_tensor(fmap).detach()
    coords = as_tensor(coords).detach()
    _check_inputs(fmap, coords)
    return _bilinear_backward(fmap, coords, as_tensor(upstream).detach())


def _grid(height:int, width:int) -> torch.Tensor:
    u, v = pixel_grid(height, width)
    return torch.as_tensor(np.stack([u, v, np.ones_like(u)], axis=-1), dtype=DTYPE)


def homography_coords(H:Union[np.ndarray, torch.Tensor], out_size:Sequence[int]) -> torch.Tensor:
    ''' Source coordinates (*B, h, w, 2) for every output pixel; -1 where w <= 1e-12 '''
    H = as_tensor(H)
    h, w = out_size
    p = _grid(h, w)
    batch = H.shape[:-2]
    q = torch.einsum("...ij,hwj->...hwi", H, p) if batch else torch.einsum("ij,hwj->hwi", H, p)
    wq = q[..., 2]
    ok = wq > W_EPS
    safe = torch.where(ok, wq, torch.ones_like(wq))
    xy = q[..., :2] / safe.unsqueeze(-1)
    return torch.where(ok.unsqueeze(-1), xy, torch.full_like(xy, -1.0))


def homography_warp(fmap:torch.Tensor, H:Union[np.ndarray, torch.Tensor], out_size:Sequence[int]) -> SampledMap:
    ''' Output pixel p takes the map value at dehomogenize(H·p); H may carry leading batch axes '''
    return bilinear_sample(fmap, homography_coords(H, out_size))


def depth_warp_coords(D_tgt:torch.Tensor, tgt_cam:Camera, src_cam:Camera):
    ''' Source-view sampling coordinates and depths for a target depth map (*B, H, W) '''
    D = as_tensor(D_tgt)
    h, w = D.shape[-2:]
    if (h, w) != tgt_cam.size:
        raise ShapeError(f"depth map {h}x{w} does not match target camera {tgt_cam.size}")
    rays = torch.as_tensor(np.einsum("ij,hwj->hwi", tgt_cam.K_inv, _grid(h, w).numpy()), dtype=DTYPE)
    R_rel, t_rel = relative_pose(src_cam, tgt_cam)
    M = torch.as_tensor(src_cam.K @ R_rel, dtype=DTYPE)
    b = torch.as_tensor(src_cam.K @ t_rel, dtype=DTYPE)
    # K_s (R_rel·(D·ray) + t_rel)
    q = D.unsqueeze(-1) * torch.einsum("ij,hwj->hwi", M, rays) + b
    z = q[..., 2]
    ok = (z > 0) & (D > 0) & torch.isfinite(D)
    safe = torch.where(ok, z, torch.ones_like(z))
    xy = q[..., :2] / safe.unsqueeze(-1)
    xy = torch.where(ok.unsqueeze(-1), xy, torch.full_like(xy, -1.0))
    return xy, z, ok


def depth_warp(src_map:torch.Tensor, D_tgt:torch.Tensor, tgt_cam:Camera, src_cam:Camera) -> DepthWarpResult:
    ''' Backward-warp a source map into the target view through per-pixel target depths '''
    xy, z, ok = depth_warp_coords(D_tgt, tgt_cam, src_cam)
    sampled = bilinear_sample(src_map, xy)
    visible = sampled.mask & ok
    sampled = SampledMap(torch.where(visible, sampled.values, torch.zeros_like(sampled.values)), visible)
    return DepthWarpResult(sampled, z, visible)


@torch.no_grad()
def forward_splat(prev_map:torch.Tensor, D_prev:torch.Tensor, prev_cam:Camera, cur_cam:Camera) -> SampledMap:
    ''' Z-buffered nearest-pixel splat of a previous view into the current one; holes stay zero '''
    prev = as_tensor(prev_map).detach()
    D = as_tensor(D_prev).detach().numpy()
    C = prev.shape[0]
    h, w = cur_cam.size
    if D.shape != prev.shape[1:]:
        raise ShapeError(f"depth {D.shape} does not match map {tuple(prev.shape[1:])}")
    out = torch.zeros((C, h, w), dtype=DTYPE)
    mask = torch.zeros((h, w), dtype=torch.bool)

    src_ok = np.isfinite(D) & (D > 0)
    if not src_ok.any():
        return SampledMap(out, mask)
    u, v = pixel_grid(*D.shape)
    scan = np.flatnonzero(src_ok)
    R_rel, t_rel = relative_pose(cur_cam, prev_cam)
    rays = np.stack([u.ravel()[scan], v.ravel()[scan], np.ones(scan.size)], axis=-1) @ prev_cam.K_inv.T
    Xc = rays * D.ravel()[scan, None] @ R_rel.T + t_rel
    z = Xc[:, 2]
    front = z > 0
    safe = np.where(front, z, 1.0)
    uc = np.floor(cur_cam.intrinsics.fx * Xc[:, 0] / safe + cur_cam.intrinsics.cx + 0.5)
    vc = np.floor(cur_cam.intrinsics.fy * Xc[:, 1] / safe + cur_cam.intrinsics.cy + 0.5)
    keep = front & (uc >= 0) & (uc <= w - 1) & (vc >= 0) & (vc <= h - 1)
    if not keep.any():
        return SampledMap(out, mask)
    target = (vc[keep] * w + uc[keep]).astype(np.int64)
    source = scan[keep]
    # nearest z wins, ties go to the earlier scan position
    order = np.lexsort((source, z[keep], target))
    target, source = target[order], source[order]
    first = np.unique(target, return_index=True)[1]
    tgt_idx = torch.as_tensor(target[first])
    src_idx = torch.as_tensor(source[first])
    out.view(C, -1)[:, tgt_idx] = prev.reshape(C, -1)[:, src_idx]
    mask.view(-1)[tgt_idx] = True
    return SampledMap(out, mask)
