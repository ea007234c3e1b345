"""Plane-sweep volumes, cost-to-probability backends, soft-argmax and the cascaded depth regression."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from camera import Camera, plane_homography, scale_camera
from errors import ConfigError, ShapeError
from planes import (CascadeSchedule, DepthScaling, PlaneSet, initial_planes,
                    resample_planes, upsample_depth)
from warp import DTYPE, as_tensor, depth_warp, homography_warp

logger = logging.getLogger(__name__)

BACKENDS = ("photometric", "learned")
DEFAULT_BETA = 1e5
DEFAULT_WINDOW = 3
REGULARIZER_WIDTH = 8


@dataclass
class PSV:
    volume: torch.Tensor  # (C, M, H, W)
    valid: torch.Tensor   # (M, H, W)


@dataclass
class MeanPSV:
    volume: torch.Tensor


@dataclass
class ProbabilityVolume:
    V: torch.Tensor  # (M, H, W)

    def confidence(self) -> torch.Tensor:
        ''' Peak probability per pixel '''
        return self.V.max(dim=0).values


@dataclass
class CascadeResult:
    depth: torch.Tensor
    stage_depths: List[torch.Tensor]
    volumes: List[ProbabilityVolume]
    planes: List[PlaneSet]
    f: float
    scaling: Optional[DepthScaling] = field(default=None, repr=False)

    @property
    def confidence(self) -> torch.Tensor:
        return self.volumes[-1].confidence()


def to_gray(image:torch.Tensor) -> torch.Tensor:
    ''' (3, H, W) RGB to (1, H, W) luma '''
    image = as_tensor(image)
    if image.shape[0] == 1:
        return image
    w = torch.tensor([0.299, 0.587, 0.114], dtype=DTYPE).view(3, 1, 1)
    return (image * w).sum(0, keepdim=True)


def build_psv(feature:torch.Tensor, src_cam:Camera, tgt_cam:Camera, planes:PlaneSet, out_size) -> PSV:
    feature = as_tensor(feature)
    if tuple(feature.shape[1:]) != src_cam.size:
        raise ShapeError(f"feature {tuple(feature.shape[1:])} does not match source camera {src_cam.size}")
    h, w = out_size
    if planes.is_uniform:
        H = np.stack([plane_homography(src_cam, tgt_cam, float(d)) for d in planes.uniform])
        sampled = homography_warp(feature, H, (h, w))
        return PSV(sampled.values, sampled.mask)
    warped = depth_warp(feature, planes.depth_maps(h, w), tgt_cam, src_cam)
    return PSV(warped.sampled.values, warped.visible)


def mean_psv(psvs:Sequence[PSV]) -> MeanPSV:
    ''' Entrywise sum over views divided by N; invalid entries contribute zero '''
    if len(psvs) == 0:
        raise ShapeError("mean of an empty PSV list")
    shape = psvs[0].volume.shape
    for p in psvs[1:]:
        if p.volume.shape != shape:
            raise ShapeError(f"PSV shapes differ: {tuple(p.volume.shape)} vs {tuple(shape)}")
    total = psvs[0].volume
    for p in psvs[1:]:
        total = total + p.volume
    return MeanPSV(total / len(psvs))


def _box(x:torch.Tensor, kernel:int, stride:int) -> torch.Tensor:
    return F.avg_pool2d(x.unsqueeze(0), kernel_size=kernel, stride=stride,
                        padding=kernel // 2, count_include_pad=True)[0]


def _aggregate(cost:torch.Tensor, valid:torch.Tensor, kernel:int, stride:int):
    weight = valid.to(DTYPE)
    num = _box(cost * weight, kernel, stride)
    den = _box(weight, kernel, stride)
    ok = den > 0
    return torch.where(ok, num / torch.where(ok, den, torch.ones_like(den)), torch.zeros_like(num)), ok


def cost_to_prob_photometric(values:torch.Tensor, validity:torch.Tensor, beta:float = DEFAULT_BETA,
                             pool:int = 1, window:int = 1) -> ProbabilityVolume:
    ''' Softmax over planes of −β·(variance of the valid views)

    values, validity: (N, M, H, W) warped grayscale PSVs. Entries seen by fewer
    than two views are excluded; pixels without any such entry get a uniform
    distribution. pool > 1 averages the cost over pool-sized cells centred on
    every pool-th pixel, window > 1 adds a box aggregation at the output size.
    '''
    values = as_tensor(values)
    weight = validity.to(DTYPE)
    count = weight.sum(0)
    safe = torch.clamp(count, min=1)
    mean = (values * weight).sum(0) / safe
    cost = (weight * (values - mean) ** 2).sum(0) / safe
    ok = count >= 2
    if pool > 1:
        cost, ok = _aggregate(cost, ok, 2 * (pool // 2) + 1, pool)
    if window > 1:
        cost, ok = _aggregate(cost, ok, window, 1)
    logits = torch.where(ok, -beta * cost, torch.full_like(cost, -float("inf")))
    covered = ok.any(dim=0, keepdim=True)
    logits = torch.where(covered, logits, torch.zeros_like(logits))
    return ProbabilityVolume(torch.softmax(logits, dim=0))


class CostRegularizer(nn.Module):
    ''' Three 3x3x3 convolutions (in→8→8→1), SiLU after each, softmax over planes '''
    def __init__(self, in_channels:int, width:int = REGULARIZER_WIDTH):
        super().__init__()
        self.in_channels = in_channels
        self.layers = nn.ModuleList([
            nn.Conv3d(in_channels, width, 3, padding=1),
            nn.Conv3d(width, width, 3, padding=1),
            nn.Conv3d(width, 1, 3, padding=1),
        ])

    def forward(self, volume:torch.Tensor) -> torch.Tensor:
        x = volume.unsqueeze(0)
        for layer in self.layers:
            x = F.silu(layer(x))
        return torch.softmax(x[0, 0], dim=0)


class RegularizerStack(nn.Module):
    ''' One regularizer per cascade stage '''
    def __init__(self, channels:Sequence[int], width:int = REGULARIZER_WIDTH):
        super().__init__()
        self.stages = nn.ModuleList([CostRegularizer(c, width) for c in channels])

    def __getitem__(self, k:int) -> CostRegularizer:
        return self.stages[k]

    def __len__(self) -> int:
        return len(self.stages)


def cost_to_prob_learned(mean:MeanPSV, params:CostRegularizer) -> ProbabilityVolume:
    volume = mean.volume
    if volume.dim() != 4 or volume.shape[0] != params.in_channels:
        raise ShapeError(f"regularizer expects {params.in_channels} channels, got volume {tuple(volume.shape)}")
    return ProbabilityVolume(params(volume.to(next(params.parameters()).dtype)))


def soft_argmax(prob:ProbabilityVolume, planes:PlaneSet) -> torch.Tensor:
    V = prob.V
    M, h, w = V.shape
    if M != planes.count:
        raise ShapeError(f"volume has {M} planes, plane set has {planes.count}")
    if planes.is_uniform:
        return torch.einsum("m,mhw->hw", planes.uniform.to(V.dtype), V)
    return (planes.depth_maps(h, w).to(V.dtype) * V).sum(0)


def regress_depth_cascade(images:Sequence[torch.Tensor], cams:Sequence[Camera], tgt_cam:Camera,
                          schedule:CascadeSchedule, scaling:DepthScaling,
                          backend:str = "photometric", params:Optional[RegularizerStack] = None,
                          features:Optional[Sequence[Sequence[torch.Tensor]]] = None,
                          beta:float = DEFAULT_BETA, window:int = DEFAULT_WINDOW) -> CascadeResult:
    ''' Coarse-to-fine depth of the target view, in scaled units

    images: full-resolution (3, H, W) source images; features: per view, one
    map per stage at that stage's resolution (learned backend only).
    '''
    if backend not in BACKENDS:
        raise ConfigError("backend", f"unknown backend `{backend}`")
    if len(images) == 0 or len(images) != len(cams):
        raise ShapeError(f"need matching, non-empty views, got {len(images)} images and {len(cams)} cameras")
    if backend == "learned" and (params is None or features is None):
        raise ConfigError("backend", "learned backend needs regularizer parameters and feature pyramids")

    f = scaling.f
    src = [c.scale_world(f) for c in cams]
    tgt = tgt_cam.scale_world(f)
    H, W = tgt.size
    gray = [to_gray(im) for im in images] if backend == "photometric" else None

    stage_depths, volumes, plane_sets = [], [], []
    depth = None
    for k in range(schedule.K):
        div = schedule.res_divisors[k]
        h, w = H // div, W // div
        if k == 0:
            planes = initial_planes(scaling.C, schedule.delta[0], schedule.M[0])
        else:
            D_up = upsample_depth(depth.detach(), schedule.res_divisors[k - 1] // div)
            planes = resample_planes(D_up, schedule.M[k], schedule.delta[k], scaling.plane_floor, stage=k + 1)

        if backend == "photometric":
            if planes.is_uniform:
                full = planes
            else:
                full = PlaneSet(planes.stage, planes.count, planes.delta,
                                d_min_map=upsample_depth(planes.d_min_map, div), floor=planes.floor)
            psvs = [build_psv(g, c, tgt, full, (H, W)) for g, c in zip(gray, src)]
            values = torch.stack([p.volume[0] for p in psvs])
            valid = torch.stack([p.valid for p in psvs])
            prob = cost_to_prob_photometric(values, valid, beta, pool=div, window=window)
        else:
            tgt_k = scale_camera(tgt, div)
            psvs = [build_psv(feat[k], scale_camera(c, div), tgt_k, planes, (h, w))
                    for feat, c in zip(features, src)]
            prob = cost_to_prob_learned(mean_psv(psvs), params[k])

        depth = soft_argmax(prob, planes)
        logger.debug(f"stage {k + 1}/{schedule.K}: {planes}, depth range [{float(depth.min()):.3f}, {float(depth.max()):.3f}]")
        stage_depths.append(depth)
        volumes.append(prob)
        plane_sets.append(planes)
    return CascadeResult(depth, stage_depths, volumes, plane_sets, f, scaling)
