"""Inverse-z blending of per-view features warped into the target view."""

from dataclasses import dataclass
from typing import Sequence

import torch

from camera import Camera
from errors import ShapeError
from warp import as_tensor, depth_warp


@dataclass
class FusedFeature:
    W: torch.Tensor         # (C, H, W)
    coverage: torch.Tensor  # (H, W) bool
    alpha: torch.Tensor     # (N, H, W)


def blend_weights(z:torch.Tensor, visible:torch.Tensor) -> torch.Tensor:
    ''' α_n = (1/z_n) / Σ_visible (1/z); zero for invisible views and uncovered pixels '''
    safe = torch.where(visible, z, torch.ones_like(z))
    inv = torch.where(visible, 1.0 / safe, torch.zeros_like(z))
    total = inv.sum(0, keepdim=True)
    covered = total > 0
    return torch.where(covered, inv / torch.where(covered, total, torch.ones_like(total)), torch.zeros_like(inv))


def fuse_features(features:Sequence[torch.Tensor], depth:torch.Tensor, tgt_cam:Camera,
                  src_cams:Sequence[Camera]) -> FusedFeature:
    if len(features) == 0 or len(features) != len(src_cams):
        raise ShapeError(f"need matching, non-empty views, got {len(features)} features and {len(src_cams)} cameras")
    depth = as_tensor(depth)
    if tuple(depth.shape) != tgt_cam.size:
        raise ShapeError(f"depth {tuple(depth.shape)} does not match target camera {tgt_cam.size}")
    warped = [depth_warp(f, depth, tgt_cam, c) for f, c in zip(features, src_cams)]
    z = torch.stack([r.z for r in warped])
    visible = torch.stack([r.visible for r in warped])
    alpha = blend_weights(z, visible)
    fused = sum(a.unsqueeze(0) * r.sampled.values for a, r in zip(alpha, warped))
    return FusedFeature(fused, visible.any(dim=0), alpha)
