"""Depth-aware refinement network: feature pyramid, SPADE decoder, depth-warped ConvLSTM bottleneck.

Layout of the desk-scale network (channels at each resolution):

    extractor   1: rgb + 13 = 16   1/4: 24   1/16: 32
    encoder     1/2: 24   1/4: 32 (+ fused 1/4)   1/8: 48 (+ fused 1/16, upsampled)
    ConvLSTM    1/8: 48
    decoder     1/4: 32   1/2: 24   1: 16, each stage followed by a SPADE block
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from camera import Camera, scale_camera
from errors import ConfigError, ShapeError
from warp import DTYPE, as_tensor, forward_splat

PYRAMID_DIVISORS = (16, 4, 1)
PYRAMID_CHANNELS = (32, 24, 16)
BOTTLENECK_DIVISOR = 8
NORM_EPS = 1e-5
SPADE_HIDDEN = 16


@dataclass
class FeaturePyramid:
    levels: List[torch.Tensor]  # coarse to fine, (C_k, H/div_k, W/div_k)
    divisors: Tuple[int, ...]


@dataclass
class RecurrentState:
    C: Optional[torch.Tensor] = None
    H: Optional[torch.Tensor] = None
    last_depth: Optional[torch.Tensor] = None
    last_cam: Optional[Camera] = None

    @property
    def is_initial(self) -> bool:
        return self.H is None


def _conv(cin:int, cout:int, stride:int = 1, **kwargs) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, **kwargs)


class FeatureExtractor(nn.Module):
    ''' Strided-convolution pyramid; the finest level carries the raw colour '''
    def __init__(self, divisors:Sequence[int] = PYRAMID_DIVISORS, channels:Sequence[int] = PYRAMID_CHANNELS):
        super().__init__()
        if len(divisors) != len(channels) or divisors[-1] != 1:
            raise ConfigError("model.channels", f"need one channel count per level ending at full resolution, got {divisors}, {channels}")
        self.divisors = tuple(divisors)
        self.channels = tuple(channels)
        self.stem = _conv(3, channels[-1] - 3)
        self.downs = nn.ModuleList()
        # fine → coarse
        for k in range(len(divisors) - 1, 0, -1):
            ratio = divisors[k - 1] // divisors[k]
            steps = int(round(math.log2(ratio)))
            if 2 ** steps != ratio:
                raise ConfigError("schedule.res_divisors", f"level ratio {ratio} is not a power of two")
            layers, cin = [], channels[k]
            for _ in range(steps):
                layers += [_conv(cin, channels[k - 1], stride=2), nn.SiLU()]
                cin = channels[k - 1]
            self.downs.append(nn.Sequential(*layers))

    def forward(self, image:torch.Tensor) -> List[torch.Tensor]:
        x = image.unsqueeze(0)
        x = torch.cat([x, F.silu(self.stem(x))], dim=1)
        levels = [x[0]]
        for down in self.downs:
            x = down(x)
            levels.append(x[0])
        return levels[::-1]


class SpadeBlock(nn.Module):
    ''' Per-channel normalisation modulated by γ(D), β(D) from a two-layer convolution on the depth map '''
    def __init__(self, channels:int, hidden:int = SPADE_HIDDEN):
        super().__init__()
        self.shared = _conv(1, hidden, padding_mode="replicate")
        self.gamma = _conv(hidden, channels, padding_mode="replicate")
        self.beta = _conv(hidden, channels, padding_mode="replicate")

    @torch.no_grad()
    def reset_identity(self) -> None:
        for conv in (self.gamma, self.beta):
            conv.weight.zero_()
        self.gamma.bias.fill_(1.0)
        self.beta.bias.zero_()

    def modulation(self, depth:torch.Tensor, size) -> Tuple[torch.Tensor, torch.Tensor]:
        d = depth.reshape(1, 1, *depth.shape[-2:])
        if tuple(d.shape[-2:]) != tuple(size):
            d = F.interpolate(d, size=tuple(size), mode="bilinear", align_corners=False)
        hidden = F.silu(self.shared(d))
        return self.gamma(hidden), self.beta(hidden)

    def forward(self, x:torch.Tensor, depth:torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(-2, -1), keepdim=True)
        var = x.var(dim=(-2, -1), keepdim=True, unbiased=False)
        x_hat = (x - mean) / torch.sqrt(var + NORM_EPS)
        gamma, beta = self.modulation(depth, x.shape[-2:])
        return gamma * x_hat + beta


class ConvLSTMCell(nn.Module):
    ''' Gates i, f, o, g from one 3x3 convolution of the encoding and the warped hidden state '''
    def __init__(self, in_channels:int, hidden:int):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.gates = _conv(in_channels + hidden, 4 * hidden)

    def hidden_path(self) -> torch.Tensor:
        ''' Weights acting on the warped hidden state '''
        return self.gates.weight[:, self.in_channels:]

    def forward(self, O:torch.Tensor, C_prev:torch.Tensor, H_hat:torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if O.shape[1] != self.in_channels or H_hat.shape[1] != self.hidden or C_prev.shape != H_hat.shape:
            raise ShapeError(f"ConvLSTM got O {tuple(O.shape)}, C {tuple(C_prev.shape)}, H_hat {tuple(H_hat.shape)}")
        i, f, o, g = self.gates(torch.cat([O, H_hat], dim=1)).chunk(4, dim=1)
        C = torch.sigmoid(f) * C_prev + torch.sigmoid(i) * torch.tanh(g)
        H = torch.sigmoid(o) * torch.tanh(C)
        return C, H


class DepthAwareGenerator(nn.Module):
    def __init__(self, fused_channels:Sequence[int] = PYRAMID_CHANNELS, use_spade:bool = True):
        super().__init__()
        c16, c4, c1 = fused_channels
        self.use_spade = use_spade
        self.enc1 = nn.Sequential(_conv(c1, 24, 2), nn.SiLU(), _conv(24, 24), nn.SiLU())
        self.enc2 = nn.Sequential(_conv(24, 32, 2), nn.SiLU())
        self.enc2_fuse = nn.Sequential(_conv(32 + c4, 32), nn.SiLU())
        self.enc3 = nn.Sequential(_conv(32, 48, 2), nn.SiLU())
        self.enc3_fuse = nn.Sequential(_conv(48 + c16, 48), nn.SiLU())
        self.cell = ConvLSTMCell(48, 48)
        self.dec = nn.ModuleList([
            nn.Sequential(_conv(48 + 32, 32), nn.SiLU()),
            nn.Sequential(_conv(32 + 24, 24), nn.SiLU()),
            nn.Sequential(_conv(24 + c1, 16), nn.SiLU()),
        ])
        self.spade = nn.ModuleList([SpadeBlock(32), SpadeBlock(24), SpadeBlock(16)])
        self.out = _conv(16, 3)

    def encode(self, fused:Sequence[torch.Tensor]):
        ''' Bottleneck encoding and the skip features from the fused features (coarse to fine) '''
        f16, f4, f1 = (x.unsqueeze(0) for x in fused)
        e1 = self.enc1(f1)
        e2 = self.enc2_fuse(torch.cat([self.enc2(e1), f4], dim=1))
        e3 = self.enc3(e2)
        up16 = F.interpolate(f16, size=e3.shape[-2:], mode="bilinear", align_corners=False)
        O = self.enc3_fuse(torch.cat([e3, up16], dim=1))
        return O, (f1, e1, e2)

    def decode(self, H:torch.Tensor, skips, depth_norm:torch.Tensor) -> torch.Tensor:
        x = H
        for dec, spade, skip in zip(self.dec, self.spade, reversed(skips)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = dec(torch.cat([x, skip], dim=1))
            if self.use_spade:
                x = spade(x, depth_norm)
        return torch.sigmoid(self.out(x))[0]


class GeneratorParams(nn.Module):
    ''' Named parameters of the extractor and the refinement network '''
    def __init__(self, divisors:Sequence[int] = PYRAMID_DIVISORS, channels:Sequence[int] = PYRAMID_CHANNELS,
                 use_spade:bool = True, use_recurrence:bool = True):
        super().__init__()
        if tuple(divisors) != PYRAMID_DIVISORS:
            raise ConfigError("schedule.K", f"the generator needs pyramid levels {PYRAMID_DIVISORS}, got {tuple(divisors)}")
        self.use_recurrence = use_recurrence
        self.extractor = FeatureExtractor(divisors, channels)
        self.generator = DepthAwareGenerator(channels, use_spade)


def extract_features(image:torch.Tensor, params:GeneratorParams) -> FeaturePyramid:
    image = as_tensor(image)
    h, w = image.shape[-2:]
    top = max(params.extractor.divisors)
    if h % top or w % top:
        raise ShapeError(f"image size {h}x{w} is not divisible by {top}")
    return FeaturePyramid(params.extractor(image.to(DTYPE)), params.extractor.divisors)


def spade_block(x:torch.Tensor, depth:torch.Tensor, params:SpadeBlock) -> torch.Tensor:
    ''' (C, h, w) features modulated by a depth map of any size '''
    return params(x.unsqueeze(0), as_tensor(depth))[0]


def recurrent_cell(O_q:torch.Tensor, state:RecurrentState, H_hat:torch.Tensor,
                   params:ConvLSTMCell) -> Tuple[torch.Tensor, torch.Tensor]:
    C_prev = state.C if state.C is not None else torch.zeros_like(H_hat)
    return params(O_q, C_prev, H_hat)


def normalize_depth(depth:torch.Tensor, depth_range:Tuple[float, float]) -> torch.Tensor:
    lo, hi = depth_range
    return torch.clamp((depth - lo) / (hi - lo), 0.0, 1.0)


def warp_hidden(state:RecurrentState, tgt_cam:Camera, shape) -> torch.Tensor:
    ''' Previous hidden state splatted into the current view; zeros on the first frame '''
    if state.is_initial or state.last_depth is None:
        return torch.zeros(shape, dtype=DTYPE)
    b = BOTTLENECK_DIVISOR
    depth_b = state.last_depth[::b, ::b]
    splat = forward_splat(state.H[0], depth_b, scale_camera(state.last_cam, b), scale_camera(tgt_cam, b))
    return splat.values.unsqueeze(0)


def render_view(fused:Sequence[torch.Tensor], depth:torch.Tensor, tgt_cam:Camera, state:RecurrentState,
                params:GeneratorParams, depth_range:Tuple[float, float]) -> Tuple[torch.Tensor, RecurrentState]:
    ''' Rendered image in [0, 1] and the state to hand to the next view

    fused: fused features per stage, coarse to fine; depth: full-resolution depth in the same
    units as tgt_cam's world (scaled); depth_range: scaled (min, max) used to
    normalise the depth fed to SPADE.
    '''
    depth = as_tensor(depth)
    if tuple(depth.shape) != tgt_cam.size or tuple(fused[-1].shape[-2:]) != tgt_cam.size:
        raise ShapeError(f"depth {tuple(depth.shape)} / features {tuple(fused[-1].shape)} do not match target {tgt_cam.size}")
    net = params.generator
    O, skips = net.encode(fused)
    if not params.use_recurrence:
        state = RecurrentState()
    H_hat = warp_hidden(state, tgt_cam, O.shape[:1] + (net.cell.hidden,) + O.shape[2:])
    C, H = recurrent_cell(O, state, H_hat.to(O.dtype), net.cell)
    image = net.decode(H, skips, normalize_depth(depth, depth_range))
    return image, RecurrentState(C, H, depth.detach(), tgt_cam)


def render_sequence(targets:Sequence[Tuple[Sequence[torch.Tensor], torch.Tensor, Camera]],
                    params:GeneratorParams, depth_range:Tuple[float, float]) -> List[torch.Tensor]:
    ''' Render (fused, depth, camera) targets in order, threading the recurrent state '''
    if len(targets) == 0:
        raise ShapeError("empty target sequence")
    state = RecurrentState()
    images = []
    for fused, depth, cam in targets:
        image, state = render_view(fused, depth, cam, state, params, depth_range)
        images.append(image)
    return images
