"""Depth hypotheses: adaptive scaling, uniform planes, per-pixel resampling, cascade schedule."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from errors import ConfigError, ShapeError
from warp import DTYPE, as_tensor, bilinear_sample

DEFAULT_C = 100.0
DEFAULT_M1 = 48
# ε_d relative to C
PLANE_FLOOR_RATIO = 1e-3


@dataclass(frozen=True)
class DepthScaling:
    d_min: float
    d_max: float
    C: float
    f: float

    def scale(self, d):
        ''' Scene-unit depth to scaled units; scale(d_min) == C exactly '''
        return self.C * (d / self.d_min)

    def unscale(self, d):
        return d / self.f

    @property
    def scaled_min(self) -> float:
        return self.scale(self.d_min)

    @property
    def scaled_max(self) -> float:
        return self.scale(self.d_max)

    @property
    def plane_floor(self) -> float:
        return PLANE_FLOOR_RATIO * self.C


@dataclass(frozen=True)
class CascadeSchedule:
    K: int
    M: Tuple[int, ...]
    delta: Tuple[float, ...]
    res_divisors: Tuple[int, ...]

    def to_dict(self) -> dict:
        return {"K": self.K, "M": list(self.M), "delta": list(self.delta),
                "res_divisors": list(self.res_divisors),
                "resolutions": [f"1/{d}" if d > 1 else "1" for d in self.res_divisors]}


class PlaneSet:
    ''' Stage-1 uniform planes or stage-k per-pixel planes d_min(p) + i·Δ, i = 1..M '''
    def __init__(self, stage:int, count:int, delta:float,
                 uniform:Optional[torch.Tensor] = None,
                 d_min_map:Optional[torch.Tensor] = None,
                 floor:float = 0.0):
        self.stage = stage
        self.count = count
        self.delta = delta
        self.uniform = uniform
        self.d_min_map = d_min_map
        self.floor = floor

    def __repr__(self) -> str:
        kind = "uniform" if self.is_uniform else f"per-pixel {tuple(self.d_min_map.shape)}"
        return f"PlaneSet(stage={self.stage}, M={self.count}, Δ={self.delta:g}, {kind})"

    @property
    def is_uniform(self) -> bool:
        return self.uniform is not None

    def depth_maps(self, height:int, width:int) -> torch.Tensor:
        ''' (M, H, W) plane depth per pixel '''
        if self.is_uniform:
            return self.uniform.view(-1, 1, 1).expand(self.count, height, width)
        if tuple(self.d_min_map.shape) != (height, width):
            raise ShapeError(f"plane map {tuple(self.d_min_map.shape)} requested at {height}x{width}")
        steps = torch.arange(1, self.count + 1, dtype=DTYPE).view(-1, 1, 1) * self.delta
        return torch.clamp(self.d_min_map.unsqueeze(0) + steps, min=self.floor)


def adaptive_scale(d_min:float, d_max:float, C:float = DEFAULT_C, M1:int = DEFAULT_M1) -> Tuple[DepthScaling, float]:
    ''' f = C/d_min and the scaled stage-1 interval Δ1 = (f·d_max − C)/M1 '''
    if not 0 < d_min < d_max:
        raise ConfigError("scaling.d_min", f"need 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}")
    if not C > 0:
        raise ConfigError("scaling.C", f"must be positive, got {C}")
    if M1 < 2:
        raise ConfigError("schedule.M1", f"need at least 2 planes, got {M1}")
    scaling = DepthScaling(float(d_min), float(d_max), float(C), float(C) / float(d_min))
    delta1 = (scaling.scaled_max - scaling.C) / M1
    return scaling, delta1


def preset_range(d1_min:float, delta1:float, M1:int = DEFAULT_M1) -> Tuple[DepthScaling, float]:
    ''' Scaling disabled: the literal d1_min and Δ1 of a dataset preset, f = 1 '''
    if not d1_min > 0 or not delta1 > 0:
        raise ConfigError("scaling.d1_min", f"preset needs positive d1_min and delta1, got {d1_min}, {delta1}")
    if M1 < 2:
        raise ConfigError("schedule.M1", f"need at least 2 planes, got {M1}")
    d1_min = float(d1_min)
    return DepthScaling(d1_min, d1_min + M1 * float(delta1), d1_min, 1.0), float(delta1)


def initial_planes(d1_min:float, delta1:float, M1:int) -> PlaneSet:
    if not delta1 > 0:
        raise ConfigError("schedule.delta1", f"must be positive, got {delta1}")
    if M1 < 2:
        raise ConfigError("schedule.M1", f"need at least 2 planes, got {M1}")
    i = torch.arange(1, M1 + 1, dtype=DTYPE)
    return PlaneSet(1, M1, float(delta1), uniform=d1_min + i * delta1)


def resample_planes(D_prev:torch.Tensor, M_k:int, delta_k:float, floor:float = PLANE_FLOOR_RATIO * DEFAULT_C,
                    stage:int = 2) -> PlaneSet:
    ''' Per-pixel planes centred on the previous estimate, clamped below at floor '''
    if M_k < 2 or not delta_k > 0:
        raise ConfigError("schedule", f"stage {stage} needs M >= 2 and Δ > 0, got {M_k}, {delta_k}")
    D = as_tensor(D_prev).detach()
    d_min_map = D - M_k * delta_k / 2
    return PlaneSet(stage, M_k, float(delta_k), d_min_map=d_min_map, floor=floor)


def cascade_schedule(M1:int, delta1:float, K:int) -> CascadeSchedule:
    ''' Halve M and Δ per stage; resolution divisors 4^(K-k) (16, 4, 1 for K = 3) '''
    if K < 1:
        raise ConfigError("schedule.K", f"need at least one stage, got {K}")
    if M1 % (2 ** (K - 1)):
        raise ConfigError("schedule.M1", f"{M1} is not divisible by 2^(K-1) = {2 ** (K - 1)}")
    M = tuple(M1 // 2 ** k for k in range(K))
    if M[-1] < 2:
        raise ConfigError("schedule.M1", f"last stage would have {M[-1]} planes")
    if not delta1 > 0:
        raise ConfigError("schedule.delta1", f"must be positive, got {delta1}")
    delta = tuple(delta1 / 2 ** k for k in range(K))
    res_divisors = tuple(4 ** (K - 1 - k) for k in range(K))
    return CascadeSchedule(K, M, delta, res_divisors)


def upsample_depth(D:torch.Tensor, factor:int) -> torch.Tensor:
    ''' Bilinear upsampling consistent with scale_camera: fine pixel x reads coarse x/factor '''
    D = as_tensor(D)
    if factor == 1:
        return D
    h, w = D.shape
    ys, xs = np.meshgrid(np.arange(h * factor) / factor, np.arange(w * factor) / factor, indexing="ij")
    coords = torch.as_tensor(np.stack([np.minimum(xs, w - 1), np.minimum(ys, h - 1)], axis=-1), dtype=DTYPE)
    return bilinear_sample(D.unsqueeze(0), coords).values[0]
