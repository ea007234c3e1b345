"""Losses, initialisation, the Adam step, finite-difference gradient checks and the toy training loop."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn

from config import RunConfig
from costvol import CostRegularizer, MeanPSV, RegularizerStack, cost_to_prob_learned
from errors import ConfigError, ShapeError, TrainingDivergedError
from evalmetrics import depth_errors, psnr
from generator import (ConvLSTMCell, GeneratorParams, RecurrentState, SpadeBlock,
                       extract_features, recurrent_cell, spade_block)
from pcfuse import ranked_views
from pipeline import (ViewSynthesisPipeline, build_generator, build_regularizers,
                      image_tensor, load_checkpoint, save_checkpoint)
from synthdata import View, load_views, read_dataset, scene_dirs
from warp import DTYPE, bilinear_sample

logger = logging.getLogger(__name__)

BETAS = (0.0, 0.9)
ADAM_EPS = 1e-8
FD_STEP = 1e-5
GRAD_TOL = 1e-4
# recorded for completeness; no discriminator is trained
DISCRIMINATOR_LR = 4e-3
METRICS_NAME = "metrics.jsonl"
CHECKPOINT_NAME = "checkpoint.bin"


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    p: float = 10.0
    G: float = 1.0
    d: float = 1.0

    def __post_init__(self):
        for name in ("l1", "p", "G", "d"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.lambda_{name}", "loss weights must be >= 0")

    @staticmethod
    def from_config(config:RunConfig) -> "LossWeights":
        t = config.train
        return LossWeights(t.lambda_l1, t.lambda_p, t.lambda_G, t.lambda_d)


class DepthLoss(NamedTuple):
    value: torch.Tensor
    empty: bool


def l1_image_loss(pred:torch.Tensor, gt:torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def scaled_depth_loss(D_hat:torch.Tensor, D_gt:torch.Tensor, f:float, valid:torch.Tensor) -> DepthLoss:
    ''' Mean |D_hat − f·D_gt| over valid pixels; D_hat in scaled units, D_gt in scene units '''
    if D_hat.shape != D_gt.shape or valid.shape != D_gt.shape:
        raise ShapeError(f"depth shapes differ: {tuple(D_hat.shape)}, {tuple(D_gt.shape)}, mask {tuple(valid.shape)}")
    if not bool(valid.any()):
        logger.warning("scaled depth loss over an empty mask; using 0")
        return DepthLoss(D_hat.sum() * 0.0, True)
    return DepthLoss((D_hat[valid] - f * D_gt[valid]).abs().mean(), False)


def total_loss(components:Mapping[str, torch.Tensor], weights:LossWeights = LossWeights()) -> torch.Tensor:
    ''' λ_l1·L_l1 + λ_d·L_d; the perceptual and adversarial terms are always zero here '''
    total = weights.l1 * components["l1"]
    if "depth" in components and weights.d != 0:
        total = total + weights.d * components["depth"]
    return total


@torch.no_grad()
def init_params(module:nn.Module, seed:int) -> nn.Module:
    ''' Fan-in uniform convolutions, zero biases, identity SPADE, zero final regularizer layer '''
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            bound = math.sqrt(3.0 / m.weight[0].numel())
            m.weight.copy_((torch.rand(m.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
            if m.bias is not None:
                m.bias.zero_()
    for m in module.modules():
        if isinstance(m, SpadeBlock):
            m.reset_identity()
        elif isinstance(m, CostRegularizer):
            m.layers[-1].weight.zero_()
            m.layers[-1].bias.zero_()
    return module


class OptimState:
    ''' Adam over named parameters, (β1, β2) = (0, 0.9) '''
    def __init__(self, params:Mapping[str, torch.Tensor], lr:float = 1e-3, betas=BETAS, eps:float = ADAM_EPS):
        self.names = list(params.keys())
        self.optimizer = torch.optim.Adam(list(params.values()), lr=lr, betas=betas, eps=eps, foreach=False)
        self.step = 0

    def moments(self) -> Dict[str, tuple]:
        out = {}
        for name, p in zip(self.names, self.optimizer.param_groups[0]["params"]):
            s = self.optimizer.state.get(p, {})
            out[name] = (s.get("exp_avg"), s.get("exp_avg_sq"))
        return out


def adam_step(params:Mapping[str, torch.Tensor], grads:Mapping[str, Optional[torch.Tensor]],
              state:OptimState) -> OptimState:
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if not bool(torch.isfinite(g).all()):
            raise TrainingDivergedError(state.step, name)
        p.grad = g.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return state


@dataclass
class GradCheckReport:
    name: str
    errors: Dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> dict:
        return {"name": self.name, "max_error": self.max_error, "passed": self.passed, "errors": self.errors}


def grad_check(fn:Callable[[], torch.Tensor], tensors:Mapping[str, torch.Tensor], tolerance:float = GRAD_TOL,
               step:float = FD_STEP, max_entries:int = 24, seed:int = 0, name:str = "operation") -> GradCheckReport:
    ''' Analytic gradients of a random projection of fn() against central differences, per named block

    The error of a block is ‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8) over at most
    max_entries sampled entries. fn must read the leaf tensors it is given.
    '''
    gen = torch.Generator().manual_seed(seed)
    leaves = list(tensors.items())
    for _, t in leaves:
        t.requires_grad_(True)
    out = fn()
    weight = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    grads = torch.autograd.grad((out * weight).sum(), [t for _, t in leaves], allow_unused=True)
    errors = {}
    with torch.no_grad():
        objective = lambda: float((fn() * weight).sum())
        for (key, t), g in zip(leaves, grads):
            g = torch.zeros_like(t) if g is None else g
            flat = t.data.view(-1)
            n = flat.numel()
            idx = torch.randperm(n, generator=gen)[:max_entries] if n > max_entries else torch.arange(n)
            numeric = []
            for i in idx.tolist():
                orig = float(flat[i])
                flat[i] = orig + step
                plus = objective()
                flat[i] = orig - step
                minus = objective()
                flat[i] = orig
                numeric.append((plus - minus) / (2 * step))
            a = g.reshape(-1)[idx].to(torch.float64)
            num = torch.tensor(numeric, dtype=torch.float64)
            scale = max(float(a.abs().max()), float(num.abs().max()), 1e-8)
            errors[key] = float((a - num).abs().max()) / scale
    report = GradCheckReport(name, errors, tolerance)
    logger.debug(f"grad check {name}: max error {report.max_error:.3e}")
    return report


def _randomize(module:nn.Module, gen:torch.Generator, scale:float = 0.5) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_((torch.rand(p.shape, generator=gen, dtype=DTYPE) * 2 - 1) * scale)
    return module


def gradient_suite(seed:int = 0, shapes:int = 20, tolerance:float = GRAD_TOL) -> List[GradCheckReport]:
    ''' Every trainable operation on `shapes` random small shapes '''
    gen = torch.Generator().manual_seed(seed)
    rand = lambda *s: torch.rand(s, generator=gen, dtype=DTYPE)
    size = lambda lo, hi: int(torch.randint(lo, hi + 1, (1,), generator=gen))
    reports = []
    for s in range(shapes):
        c, h, w = size(1, 3), size(3, 6), size(3, 6)

        fmap = rand(c, h, w)
        p = size(2, 6)
        coords = torch.stack([torch.randint(0, w - 1, (p,), generator=gen) + 0.1 + 0.8 * rand(p),
                              torch.randint(0, h - 1, (p,), generator=gen) + 0.1 + 0.8 * rand(p)], dim=-1).to(DTYPE)
        reports.append(grad_check(lambda: bilinear_sample(fmap, coords).values, {"fmap": fmap, "coords": coords},
                                  tolerance, seed=seed + s, name=f"bilinear_sample[{s}]"))

        block = _randomize(SpadeBlock(c).to(DTYPE), gen)
        x, depth = rand(c, h, w), rand(size(2, 8), size(2, 8))
        reports.append(grad_check(lambda: spade_block(x, depth, block),
                                  {"x": x, "depth": depth, **dict(block.named_parameters())},
                                  tolerance, seed=seed + s, name=f"spade_block[{s}]"))

        hidden = size(1, 3)
        cell = _randomize(ConvLSTMCell(c, hidden).to(DTYPE), gen)
        O, C_prev, H_hat = rand(1, c, h, w), rand(1, hidden, h, w), rand(1, hidden, h, w)
        state = RecurrentState(C=C_prev)
        reports.append(grad_check(lambda: torch.cat([t.flatten() for t in recurrent_cell(O, state, H_hat, cell)]),
                                  {"O": O, "C": C_prev, "H_hat": H_hat, **dict(cell.named_parameters())},
                                  tolerance, seed=seed + s, name=f"recurrent_cell[{s}]"))

        reg = _randomize(CostRegularizer(c, width=size(2, 4)).to(DTYPE), gen)
        volume = rand(c, size(2, 4), size(2, 4), size(2, 4))
        reports.append(grad_check(lambda: cost_to_prob_learned(MeanPSV(volume), reg).V,
                                  {"volume": volume, **dict(reg.named_parameters())},
                                  tolerance, seed=seed + s, name=f"cost_to_prob_learned[{s}]"))

        pred, gt = rand(3, h, w), rand(3, h, w)
        D_hat, D_gt = rand(h, w) * 100 + 100, rand(h, w) * 2 + 1
        valid = rand(h, w) > 0.3
        valid[0, 0] = True
        f = 1 + float(rand(1)) * 50
        reports.append(grad_check(lambda: total_loss({"l1": l1_image_loss(pred, gt),
                                                      "depth": scaled_depth_loss(D_hat, D_gt, f, valid).value}),
                                  {"pred": pred, "D_hat": D_hat}, tolerance, seed=seed + s, name=f"losses[{s}]"))

    extractor = _randomize(GeneratorParams().to(DTYPE), gen, scale=0.2)
    image = rand(3, 16, 16)
    reports.append(grad_check(lambda: torch.cat([l.flatten() for l in extract_features(image, extractor).levels]),
                              {"image": image, **dict(extractor.extractor.named_parameters())},
                              tolerance, seed=seed, name="extract_features"))
    return reports


@dataclass
class TrainResult:
    generator: GeneratorParams
    regularizers: Optional[RegularizerStack]
    log: List[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None


class SceneData(NamedTuple):
    views: List[View]
    d_min: float
    d_max: float
    train_idx: List[int]
    holdout_idx: List[int]


def split_views(n_views:int, holdout_every:int) -> tuple:
    ''' Every holdout_every-th view is a target only; at least two training views remain '''
    holdout = [i for i in range(n_views) if i % holdout_every == 0]
    if n_views - len(holdout) < 2:
        holdout = []
    train = [i for i in range(n_views) if i not in holdout]
    return train, holdout


def sample_step(rng:np.random.Generator, views:Sequence[View], train_idx:Sequence[int], N:int, Q:int,
                candidates:int) -> tuple:
    ''' (targets, sources): an anchor with its Q−1 nearest training views, then 1..N sources among the nearest others '''
    cams = [v.camera for v in views]
    anchor = int(rng.choice(train_idx))
    ranked = [i for i in ranked_views(cams[anchor], cams) if i in train_idx]
    q = max(1, min(Q, len(train_idx) - 1))
    targets = [anchor] + ranked[:q - 1]
    pool = [i for i in ranked if i not in targets][:candidates]
    n = min(int(rng.integers(1, N + 1)), len(pool))
    sources = sorted(int(i) for i in rng.choice(pool, size=n, replace=False))
    return targets, sources


def _load_scenes(dataset, holdout_every:int) -> List[SceneData]:
    scenes = []
    for d in scene_dirs(dataset):
        index = read_dataset(d)
        views = load_views(index)
        train, holdout = split_views(len(views), holdout_every)
        scenes.append(SceneData(views, index.d_min, index.d_max, train, holdout))
    return scenes


def _evaluate(pipeline:ViewSynthesisPipeline, scene:SceneData, N:int) -> tuple:
    ''' Held-out PSNR and depth MAE, each target rendered from its N nearest training views '''
    cams = [v.camera for v in scene.views]
    scores, maes = [], []
    with torch.no_grad():
        for h in scene.holdout_idx:
            picks = [i for i in ranked_views(cams[h], cams) if i in scene.train_idx][:N]
            image, result, _ = pipeline.render_target([scene.views[i] for i in picks], cams[h], RecurrentState())
            gt = scene.views[h]
            scores.append(psnr(image.numpy().transpose(1, 2, 0), gt.image))
            mask = gt.depth > 0
            if mask.any():
                maes.append(depth_errors(pipeline.scaling.unscale(result.depth.numpy()), gt.depth, mask).mae)
    return scores, maes


def _mean(values) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def train_toy(dataset, config:RunConfig, epochs:int, seed:int, out_dir) -> TrainResult:
    ''' Train G (and the regularizers for the learned backend) on a synthetic dataset

    Writes one JSON line of metrics per epoch and a checkpoint after every
    epoch. Epoch 0 is the untrained model's held-out evaluation.
    '''
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = LossWeights.from_config(config)
    tr = config.train
    scenes = _load_scenes(dataset, tr.holdout_every)
    if len(scenes) < 8:
        logger.warning(f"training on {len(scenes)} scenes; the toy set is meant to have at least 8")

    deterministic = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        if tr.init_checkpoint:
            generator, regularizers = load_checkpoint(tr.init_checkpoint, config)
            if config.model.backend == "learned" and regularizers is None:
                regularizers = init_params(build_regularizers(), seed + 1)
        else:
            generator = init_params(build_generator(config), seed)
            regularizers = init_params(build_regularizers(), seed + 1) if config.model.backend == "learned" else None
        params = {f"generator.{k}": p for k, p in generator.named_parameters()}
        if regularizers is not None:
            params.update({f"regularizer.{k}": p for k, p in regularizers.named_parameters()})
        optim = OptimState(params, lr=tr.lr)
        rng = np.random.default_rng(seed)
        pipelines = [ViewSynthesisPipeline(config, s.d_min, s.d_max, generator, regularizers) for s in scenes]

        checkpoint = save_checkpoint(out_dir / CHECKPOINT_NAME, generator, regularizers)
        metrics_path = out_dir / METRICS_NAME
        log = []
        with open(metrics_path, "w") as metrics:
            def emit(entry):
                log.append(entry)
                metrics.write(json.dumps(entry, sort_keys=True) + "\n")
                metrics.flush()
                logger.info(f"{entry['epoch']}/{epochs} epochs completed: {entry}")

            held = [_evaluate(p, s, config.N) for p, s in zip(pipelines, scenes)]
            emit({"epoch": 0, "heldout_psnr_db": _mean([x for h in held for x in h[0]]),
                  "depth_mae": _mean([x for h in held for x in h[1]])})

            for epoch in range(1, epochs + 1):
                l1s, depths, totals, scores = [], [], [], []
                for pipeline, scene in zip(pipelines, scenes):
                    for _ in range(tr.steps_per_scene):
                        targets, sources = sample_step(rng, scene.views, scene.train_idx, config.N, config.Q, tr.candidates)
                        loss, terms = _step_loss(pipeline, scene, targets, sources, weights)
                        if not math.isfinite(float(loss)):
                            raise TrainingDivergedError(optim.step, "loss", checkpoint=str(checkpoint))
                        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
                        try:
                            adam_step(params, dict(zip(params.keys(), grads)), optim)
                        except TrainingDivergedError as e:
                            raise TrainingDivergedError(e.step, e.name, checkpoint=str(checkpoint)) from None
                        l1s += terms["l1"]
                        depths += terms["depth"]
                        totals.append(float(loss))
                        scores += terms["psnr"]
                held = [_evaluate(p, s, config.N) for p, s in zip(pipelines, scenes)]
                checkpoint = save_checkpoint(out_dir / CHECKPOINT_NAME, generator, regularizers)
                emit({"epoch": epoch, "l1": _mean(l1s), "depth_loss": _mean(depths), "total": _mean(totals),
                      "psnr_db": _mean(scores), "heldout_psnr_db": _mean([x for h in held for x in h[0]]),
                      "depth_mae": _mean([x for h in held for x in h[1]])})
    finally:
        torch.use_deterministic_algorithms(deterministic)
    return TrainResult(generator, regularizers, log, checkpoint)


def _step_loss(pipeline:ViewSynthesisPipeline, scene:SceneData, targets:Sequence[int],
               sources:Sequence[int], weights:LossWeights) -> tuple:
    ''' Mean total loss over the Q targets rendered as one sequence from shared sources '''
    src = [scene.views[i] for i in sources]
    pyramids = [pipeline.pyramid(v) for v in src]
    state = RecurrentState()
    losses, terms = [], {"l1": [], "depth": [], "psnr": []}
    for t in targets:
        gt = scene.views[t]
        image, result, state = pipeline.render_target(src, gt.camera, state, pyramids)
        l1 = l1_image_loss(image, image_tensor(gt.image))
        D_gt = torch.from_numpy(gt.depth)
        stage_losses = []
        for k, div in enumerate(pipeline.schedule.res_divisors):
            d = D_gt[::div, ::div]
            stage_losses.append(scaled_depth_loss(result.stage_depths[k], d, pipeline.scaling.f, d > 0).value)
        depth = torch.stack(stage_losses).mean()
        losses.append(total_loss({"l1": l1, "depth": depth}, weights))
        terms["l1"].append(float(l1))
        terms["depth"].append(float(depth))
        terms["psnr"].append(psnr(image.detach().numpy().transpose(1, 2, 0), gt.image))
    return torch.stack(losses).mean(), terms
