"""Wires depth regression, feature fusion and the generator into one view-synthesis pipeline.

Everything between cameras and tensors happens in scaled units: the
pipeline scales the world by f = C/d_min on the way in and divides depths
by f on the way out, so callers only ever see scene units.
"""

import logging
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from camera import Camera, scale_camera
from config import RunConfig
from costvol import CascadeResult, RegularizerStack, regress_depth_cascade
from errors import ConfigError, ParseError
from featfuse import fuse_features
from formats import read_checkpoint, write_checkpoint
from generator import (PYRAMID_CHANNELS, PYRAMID_DIVISORS, FeaturePyramid, GeneratorParams,
                       RecurrentState, extract_features, render_view)
from pcfuse import ranked_views
from planes import DepthScaling, adaptive_scale, cascade_schedule, preset_range
from synthdata import View
from warp import DTYPE

logger = logging.getLogger(__name__)


class DepthEstimate(NamedTuple):
    depth: np.ndarray              # (H, W) scene units
    confidence: np.ndarray         # (H, W) peak probability of the last stage
    stage_depths: List[np.ndarray]


class RenderedView(NamedTuple):
    image: np.ndarray              # (H, W, 3) in [0, 1]
    depth: np.ndarray
    confidence: np.ndarray
    stage_depths: List[np.ndarray]
    camera: Camera
    sources: List[int]


def build_generator(config:RunConfig) -> GeneratorParams:
    return GeneratorParams(PYRAMID_DIVISORS, PYRAMID_CHANNELS, config.model.use_spade,
                           config.model.use_recurrence).to(DTYPE)


def build_regularizers() -> RegularizerStack:
    return RegularizerStack(PYRAMID_CHANNELS).to(DTYPE)


def save_checkpoint(path, generator:GeneratorParams, regularizers:Optional[RegularizerStack] = None) -> Path:
    arrays = {f"generator.{k}": v.detach().cpu().numpy() for k, v in generator.state_dict().items()}
    if regularizers is not None:
        arrays.update({f"regularizer.{k}": v.detach().cpu().numpy() for k, v in regularizers.state_dict().items()})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(path, arrays)
    return path


def load_checkpoint(path, config:RunConfig) -> Tuple[GeneratorParams, Optional[RegularizerStack]]:
    arrays = read_checkpoint(path)
    generator = build_generator(config)
    regularizers = build_regularizers() if any(k.startswith("regularizer.") for k in arrays) else None
    for prefix, module in (("generator.", generator), ("regularizer.", regularizers)):
        if module is None:
            continue
        state = {k[len(prefix):]: torch.from_numpy(v).to(DTYPE) for k, v in arrays.items() if k.startswith(prefix)}
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise ParseError(path, 0, f"checkpoint does not match the model: {str(e).splitlines()[0]}") from None
    logger.info(f"loaded {len(arrays)} arrays from {path}")
    return generator, regularizers


def image_tensor(image:np.ndarray) -> torch.Tensor:
    ''' (H, W, 3) array to a (3, H, W) tensor '''
    return torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float64).transpose(2, 0, 1)))


class ViewSynthesisPipeline:
    ''' Depth regression R, inverse-z fusion and generator G for one scene's depth range

    Without a generator, colour comes from inverse-z blending of the source
    images. The learned backend needs both a generator (its extractor feeds
    the plane sweeps) and regularizers.
    '''
    def __init__(self, config:RunConfig, d_min:float, d_max:float,
                 generator:Optional[GeneratorParams] = None,
                 regularizers:Optional[RegularizerStack] = None):
        self.config = config
        self.generator = generator
        self.regularizers = regularizers
        self.backend = config.model.backend
        self.scaling, delta1 = self._scaling(config, d_min, d_max)
        self.schedule = cascade_schedule(config.schedule.M1, delta1, config.schedule.K)
        if self.backend == "learned" and (generator is None or regularizers is None):
            raise ConfigError("model.backend", "the learned backend needs a checkpoint with generator and regularizer parameters")
        if generator is not None and self.schedule.res_divisors != PYRAMID_DIVISORS:
            raise ConfigError("schedule.K", f"the generator needs stage resolutions {PYRAMID_DIVISORS}, got {self.schedule.res_divisors}")

    def __repr__(self) -> str:
        return (f"ViewSynthesisPipeline({self.backend}, f={self.scaling.f:g}, M={self.schedule.M}, "
                f"renderer={'generator' if self.generator is not None else 'blend'})")

    @staticmethod
    def _scaling(config:RunConfig, d_min:float, d_max:float) -> Tuple[DepthScaling, float]:
        sc, s = config.scaling, config.schedule
        if not sc.adaptive:
            return preset_range(sc.d1_min, s.delta1, s.M1)
        d_min = sc.d_min if sc.d_min is not None else d_min
        d_max = sc.d_max if sc.d_max is not None else d_max
        scaling, delta1 = adaptive_scale(d_min, d_max, sc.C, s.M1)
        return scaling, (s.delta1 if s.delta1 is not None else delta1)

    @property
    def depth_range(self) -> Tuple[float, float]:
        ''' Scaled range used to normalise the depth fed to the generator '''
        return self.scaling.scaled_min, self.scaling.scaled_max

    @property
    def delta_K(self) -> float:
        ''' Finest plane spacing in scene units '''
        return self.scaling.unscale(self.schedule.delta[-1])

    def pyramid(self, view:View) -> Optional[FeaturePyramid]:
        if self.generator is None:
            return None
        return extract_features(image_tensor(view.image), self.generator)

    def regress(self, sources:Sequence[View], tgt_cam:Camera,
                pyramids:Optional[Sequence[FeaturePyramid]] = None) -> CascadeResult:
        if self.backend == "learned" and pyramids is None:
            pyramids = [self.pyramid(v) for v in sources]
        m = self.config.model
        return regress_depth_cascade([image_tensor(v.image) for v in sources], [v.camera for v in sources],
                                     tgt_cam, self.schedule, self.scaling, backend=self.backend,
                                     params=self.regularizers,
                                     features=[p.levels for p in pyramids] if self.backend == "learned" else None,
                                     beta=m.beta, window=m.window)

    def regress_depth(self, sources:Sequence[View], tgt_cam:Camera) -> DepthEstimate:
        with torch.no_grad():
            result = self.regress(sources, tgt_cam)
        return self._estimate(result)

    def _estimate(self, result:CascadeResult) -> DepthEstimate:
        unscale = lambda d: self.scaling.unscale(d.detach().numpy())
        return DepthEstimate(unscale(result.depth), result.confidence.detach().numpy(),
                             [unscale(d) for d in result.stage_depths])

    def render_target(self, sources:Sequence[View], tgt_cam:Camera, state:RecurrentState,
                      pyramids:Optional[Sequence[FeaturePyramid]] = None
                      ) -> Tuple[torch.Tensor, CascadeResult, RecurrentState]:
        ''' One target: (3, H, W) image, the depth cascade and the recurrent state for the next target '''
        if self.generator is not None and pyramids is None:
            pyramids = [self.pyramid(v) for v in sources]
        result = self.regress(sources, tgt_cam, pyramids)
        f = self.scaling.f
        tgt = tgt_cam.scale_world(f)
        srcs = [v.camera.scale_world(f) for v in sources]
        if self.generator is None:
            fused = fuse_features([image_tensor(v.image) for v in sources], result.depth, tgt, srcs)
            return torch.clamp(fused.W, 0.0, 1.0), result, state
        fused = []
        for k, div in enumerate(self.schedule.res_divisors):
            fused.append(fuse_features([p.levels[k] for p in pyramids], result.stage_depths[k],
                                       scale_camera(tgt, div), [scale_camera(c, div) for c in srcs]).W)
        image, state = render_view(fused, result.depth, tgt, state, self.generator, self.depth_range)
        return image, result, state

    def render(self, views:Sequence[View], targets:Sequence[Camera], n:int,
               pyramids:Optional[Dict[int, FeaturePyramid]] = None) -> List[RenderedView]:
        ''' Render targets in order with the recurrent state threaded; each uses its n nearest views '''
        cams = [v.camera for v in views]
        pyramids = dict(pyramids or {})
        state = RecurrentState()
        out = []
        with torch.no_grad():
            for tgt in targets:
                picks = ranked_views(tgt, cams)[:n]
                if not picks:
                    raise ConfigError("N", f"no source view available for target {tgt}")
                if self.generator is not None:
                    for i in picks:
                        if i not in pyramids:
                            pyramids[i] = self.pyramid(views[i])
                image, result, state = self.render_target([views[i] for i in picks], tgt, state,
                                                          [pyramids[i] for i in picks] if self.generator is not None else None)
                est = self._estimate(result)
                out.append(RenderedView(image.numpy().transpose(1, 2, 0), est.depth, est.confidence,
                                        est.stage_depths, tgt, picks))
        return out
