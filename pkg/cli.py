import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, List, Optional

import numpy as np

from config import PRESETS, RunConfig, apply_threads
from errors import CascadeNVSError, ConfigError, ParseError
from evalmetrics import nvs_report
from exit_code import ExitCode
from formats import read_pfm, read_ply, read_png, write_camera, write_pfm, write_png
from learn import gradient_suite, train_toy
from manager import RenderManager
from pcfuse import FusionRecord, PointCloud, eval_pointcloud, fuse_records, predict_reference_depths
from pipeline import ViewSynthesisPipeline, load_checkpoint
from planes import cascade_schedule, preset_range, adaptive_scale
from pose_utils import PoseUtils
from synthdata import SCENE_KINDS, generate_dataset, load_views, read_dataset, scene_dirs

logger = logging.getLogger("cascade_nvs")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# flag, dotted config field, type
CONFIG_FLAGS = [
    ("--dataset", "dataset", str), ("--output", "output", str),
    ("-N", "N", int), ("-Q", "Q", int), ("--seed", "seed", int),
    ("--K", "schedule.K", int), ("--M1", "schedule.M1", int), ("--delta1", "schedule.delta1", float),
    ("--C", "scaling.C", float), ("--d-min", "scaling.d_min", float), ("--d-max", "scaling.d_max", float),
    ("--d1-min", "scaling.d1_min", float),
    ("--backend", "model.backend", str), ("--beta", "model.beta", float), ("--window", "model.window", int),
    ("--tau-p", "thresholds.tau_p", float), ("--tau-px", "thresholds.tau_px", float),
    ("--tau-rel", "thresholds.tau_rel", float), ("--S", "thresholds.S", int), ("--tau-f", "thresholds.tau_f", float),
    ("--epochs", "train.epochs", int), ("--steps-per-scene", "train.steps_per_scene", int),
    ("--lr", "train.lr", float), ("--lambda-l1", "train.lambda_l1", float), ("--lambda-d", "train.lambda_d", float),
    ("--holdout-every", "train.holdout_every", int), ("--init-checkpoint", "train.init_checkpoint", str),
]
# flag, dotted config field; setting the flag stores False
SWITCH_FLAGS = [
    ("--no-adaptive", "scaling.adaptive"), ("--no-spade", "model.use_spade"),
    ("--no-recurrence", "model.use_recurrence"),
]


class CommandResponse:
    '''Returned by every command

    Attributes:
    status - Exit code of the command
    data - JSON-serialisable report printed on stdout
    '''
    def __init__(self, status:ExitCode, data:Optional[Any] = None):
        self.status = status
        self.data = data


class ArgumentParser(argparse.ArgumentParser):
    ''' Usage errors raise instead of exiting with argparse's status 2 '''
    def error(self, message:str):
        raise ConfigError("arguments", message)


class CascadeNVS:
    ''' Runs one command against a resolved configuration '''
    def __init__(self, config:RunConfig, checkpoint:Optional[str] = None):
        self.config = config
        self.checkpoint = checkpoint
        self.output = Path(config.output)

    def _scene(self, scene:int):
        if self.config.dataset is None:
            raise ConfigError("dataset", "this command needs --dataset")
        dirs = scene_dirs(self.config.dataset)
        if not 0 <= scene < len(dirs):
            raise ConfigError("scene", f"index {scene} out of range, dataset has {len(dirs)} scenes")
        index = read_dataset(dirs[scene], self.config.schedule.M1)
        return index, load_views(index)

    def _pipeline(self, index) -> ViewSynthesisPipeline:
        generator, regularizers = (load_checkpoint(self.checkpoint, self.config)
                                   if self.checkpoint else (None, None))
        pipeline = ViewSynthesisPipeline(self.config, index.d_min, index.d_max, generator, regularizers)
        logger.info(f"{pipeline}")
        return pipeline

    def _write_views(self, outdir:Path, rendered, names:List[int], index, dump_stages:bool = False) -> None:
        outdir.mkdir(parents=True, exist_ok=True)
        interval = (index.d_max - index.d_min) / self.config.schedule.M1
        for name, view in zip(names, rendered):
            write_png(outdir / f"{name:08d}.png", view.image)
            write_pfm(outdir / f"{name:08d}.pfm", view.depth)
            write_camera(outdir / f"{name:08d}.txt", view.camera, index.d_min, interval)
            if dump_stages:
                for k, depth in enumerate(view.stage_depths):
                    write_pfm(outdir / f"{name:08d}_stage{k + 1}.pfm", depth)

    def synth_gen(self, scenes:int, views:int, size:int, complexity:int, kind:str = "relief") -> CommandResponse:
        if self.config.dataset is None:
            raise ConfigError("dataset", "synth-gen needs --dataset as the output directory")
        dirs = generate_dataset(self.config.dataset, self.config.seed, scenes, views, size, complexity, kind)
        return CommandResponse(ExitCode.SUCCESS, {"scenes": [str(d) for d in dirs]})

    def train(self) -> CommandResponse:
        if self.config.dataset is None:
            raise ConfigError("dataset", "train needs --dataset")
        self.config.write_resolved(self.output)
        result = train_toy(self.config.dataset, self.config, self.config.train.epochs, self.config.seed, self.output)
        return CommandResponse(ExitCode.SUCCESS, {"checkpoint": str(result.checkpoint), "last_epoch": result.log[-1]})

    def render(self, scene:int, targets:Optional[List[int]], dump_stages:bool) -> CommandResponse:
        index, views = self._scene(scene)
        self.config.write_resolved(self.output)
        pipeline = self._pipeline(index)
        targets = list(range(len(views))) if targets is None else targets
        for t in targets:
            if not 0 <= t < len(views):
                raise ConfigError("targets", f"view {t} out of range, scene has {len(views)} views")
        rendered = pipeline.render(views, [views[t].camera for t in targets], self.config.N)
        self._write_views(self.output / "render", rendered, targets, index, dump_stages)
        return CommandResponse(ExitCode.SUCCESS, {"rendered": len(rendered), "directory": str(self.output / "render")})

    def render_path(self, scene:int, steps:int, max_groups:int) -> CommandResponse:
        index, views = self._scene(scene)
        self.config.write_resolved(self.output)
        pipeline = self._pipeline(index)
        path = PoseUtils.interpolate_path([v.camera for v in views], steps)
        manager = RenderManager(self.config.Q, max_groups, pipeline, views, self.config.N)
        rendered = asyncio.run(manager.render_path(path))
        self._write_views(self.output / "path", rendered, list(range(len(rendered))), index)
        return CommandResponse(ExitCode.SUCCESS, {"rendered": len(rendered), "directory": str(self.output / "path")})

    def fuse(self, scene:int) -> CommandResponse:
        index, views = self._scene(scene)
        self.config.write_resolved(self.output)
        pipeline = self._pipeline(index)
        th = self.config.thresholds
        references = predict_reference_depths(views, pipeline, self.config.N)
        midpoints = PoseUtils.interpolate_path([v.camera for v in views], 2)[1::2]
        novel = pipeline.render(views, midpoints, self.config.N) if midpoints else []
        records = [FusionRecord(r.image, r.depth, r.camera, r.confidence) for r in novel]
        records += [FusionRecord(v.image, est.depth, v.camera, est.confidence) for v, est in zip(views, references)]
        cloud = fuse_records(records, th.tau_p, th.tau_px, th.tau_rel, th.S)
        self.output.mkdir(parents=True, exist_ok=True)
        cloud.write(self.output / "fused.ply")
        return CommandResponse(ExitCode.SUCCESS, {"points": len(cloud), "ply": str(self.output / "fused.ply")})

    def eval_nvs(self, scene:int, pred_dir:Optional[str]) -> CommandResponse:
        index, views = self._scene(scene)
        pred_dir = Path(pred_dir) if pred_dir else self.output / "render"
        tolerance = 1.5 * ViewSynthesisPipeline(self.config, index.d_min, index.d_max).delta_K
        per_view = {}
        for png in sorted(pred_dir.glob("[0-9]" * 8 + ".png")):
            i = int(png.stem)
            if i >= len(views):
                raise ParseError(png, 0, f"no reference view {i} in {index.scene_dir}")
            depth_path = png.with_suffix(".pfm")
            depth = read_pfm(depth_path) if depth_path.exists() else None
            per_view[png.stem] = nvs_report(read_png(png), views[i].image, depth, views[i].depth, tolerance=tolerance)
        if not per_view:
            raise ParseError(pred_dir, 0, "no rendered views found")
        means = {}
        for key in next(iter(per_view.values())):
            values = [r[key] for r in per_view.values() if isinstance(r.get(key), float)]
            if values:
                means[key] = float(np.mean(values))
        report = {"mean": {**means, "lpips": "not supported"}, "views": per_view, "tolerance": tolerance}
        self._write_json("eval_nvs.json", report)
        return CommandResponse(ExitCode.SUCCESS, report)

    def eval_pc(self, pred:Optional[str], gt:Optional[str], scene:int) -> CommandResponse:
        pred_path = Path(pred) if pred else self.output / "fused.ply"
        if gt is None:
            if self.config.dataset is None:
                raise ConfigError("gt", "eval-pc needs --gt or --dataset")
            gt = scene_dirs(self.config.dataset)[scene] / "gt_points.ply"
        pred_cloud, gt_cloud = PointCloud(*read_ply(pred_path)), PointCloud(*read_ply(gt))
        tau_f = self.config.thresholds.tau_f or 0.01 * gt_cloud.diameter
        scores = eval_pointcloud(pred_cloud, gt_cloud, tau_f).to_dict()
        self._write_json("eval_pc.json", scores)
        return CommandResponse(ExitCode.SUCCESS, scores)

    def grad_check(self, shapes:int) -> CommandResponse:
        reports = [r.to_dict() for r in gradient_suite(self.config.seed, shapes)]
        failed = [r["name"] for r in reports if not r["passed"]]
        report = {"checks": len(reports), "failed": failed,
                  "max_error": max(r["max_error"] for r in reports)}
        self._write_json("grad_check.json", {**report, "reports": reports})
        for name in failed:
            logger.error(f"gradient check failed: {name}")
        return CommandResponse(ExitCode.RUNTIME_ERROR if failed else ExitCode.SUCCESS, report)

    def schedule(self) -> CommandResponse:
        c = self.config
        if not c.scaling.adaptive:
            scaling, delta1 = preset_range(c.scaling.d1_min, c.schedule.delta1, c.schedule.M1)
        elif c.scaling.d_min is not None or c.dataset is not None:
            d_min, d_max = c.scaling.d_min, c.scaling.d_max
            if d_min is None:
                index = read_dataset(scene_dirs(c.dataset)[0], c.schedule.M1)
                d_min, d_max = index.d_min, index.d_max
            scaling, delta1 = adaptive_scale(d_min, d_max, c.scaling.C, c.schedule.M1)
            delta1 = c.schedule.delta1 or delta1
        elif c.schedule.delta1 is not None:
            scaling = None
            delta1 = c.schedule.delta1
        else:
            raise ConfigError("schedule.delta1", "give --delta1, a depth range or a dataset")
        report = cascade_schedule(c.schedule.M1, delta1, c.schedule.K).to_dict()
        if scaling is not None:
            report.update(f=scaling.f, d1_min=scaling.C)
        return CommandResponse(ExitCode.SUCCESS, report)

    def _write_json(self, name:str, data) -> None:
        self.output.mkdir(parents=True, exist_ok=True)
        (self.output / name).write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--checkpoint", help="parameter checkpoint; without it colour comes from inverse-z blending")
    common.add_argument("--verbose", action="store_true")
    for flag, dest, kind in CONFIG_FLAGS:
        common.add_argument(flag, dest=dest, type=kind, default=None)
    for flag, dest in SWITCH_FLAGS:
        common.add_argument(flag, dest=dest, action="store_const", const=False, default=None)

    parser = ArgumentParser(prog="cli.py", description="Cascaded depth regression and depth-aware novel view synthesis")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth-gen", parents=[common])
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--complexity", type=int, default=2)
    p.add_argument("--kind", choices=SCENE_KINDS, default="relief", help="relief objects on a table, or a single box")
    sub.add_parser("train", parents=[common])
    for name in ("render", "render-path", "fuse", "eval-nvs", "eval-pc"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--scene", type=int, default=0)
        if name == "render":
            p.add_argument("--targets", type=lambda s: [int(x) for x in s.split(",") if x != ""])
            p.add_argument("--dump-stages", action="store_true")
        elif name == "render-path":
            p.add_argument("--steps", type=int, default=4, help="path cameras per rig segment")
        elif name == "eval-nvs":
            p.add_argument("--pred", help="directory of rendered %%08d.png / .pfm files")
        elif name == "eval-pc":
            p.add_argument("--pred", help="predicted PLY")
            p.add_argument("--gt", help="ground-truth PLY")
    p = sub.add_parser("grad-check", parents=[common])
    p.add_argument("--shapes", type=int, default=20)
    sub.add_parser("schedule", parents=[common])
    return parser


def load_config(args:argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.preset:
        config = config.with_overrides(PRESETS[args.preset])
    overrides = {dest: getattr(args, dest) for _, dest, _ in CONFIG_FLAGS}
    overrides.update({dest: getattr(args, dest) for _, dest in SWITCH_FLAGS})
    return config.with_overrides(overrides).validate()


def configure_logging(verbose:bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


def run(args:argparse.Namespace) -> CommandResponse:
    front = CascadeNVS(load_config(args), args.checkpoint)
    max_groups = apply_threads()
    command = args.command
    if command == "synth-gen":
        return front.synth_gen(args.scenes, args.views, args.size, args.complexity, args.kind)
    if command == "train":
        return front.train()
    if command == "render":
        return front.render(args.scene, args.targets, args.dump_stages)
    if command == "render-path":
        return front.render_path(args.scene, args.steps, max_groups)
    if command == "fuse":
        return front.fuse(args.scene)
    if command == "eval-nvs":
        return front.eval_nvs(args.scene, args.pred)
    if command == "eval-pc":
        return front.eval_pc(args.pred, args.gt, args.scene)
    if command == "grad-check":
        return front.grad_check(args.shapes)
    return front.schedule()


def main(argv:Optional[List[str]] = None) -> int:
    verbose = "--verbose" in (sys.argv[1:] if argv is None else argv)
    configure_logging(verbose)
    try:
        args = build_parser().parse_args(argv)
        response = run(args)
    except (ConfigError, ParseError, ValueError) as e:
        logger.error(str(e), exc_info=verbose)
        return int(ExitCode.USAGE_ERROR)
    except (CascadeNVSError, OSError, RuntimeError) as e:
        logger.error(str(e), exc_info=verbose)
        return int(ExitCode.RUNTIME_ERROR)
    if response.data is not None:
        print(json.dumps(response.data, sort_keys=True, indent=2))
    return int(response.status)


if __name__ == "__main__":
    sys.exit(main())
