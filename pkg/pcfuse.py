"""Point-cloud generation from predicted views: view selection, two-step filtering, median fusion, metrics."""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from camera import Camera, backproject, pixel_grid, project
from errors import ConfigError, EvaluationError, GeometryError, ShapeError
from formats import write_ply

logger = logging.getLogger(__name__)

COINCIDENT_TOL = 1e-9


@dataclass
class FusionRecord:
    image: np.ndarray       # (H, W, 3)
    depth: np.ndarray       # (H, W) scene units, 0 = no estimate
    camera: Camera
    confidence: np.ndarray  # (H, W)

    def __post_init__(self):
        shape = self.camera.size
        if self.depth.shape != shape or self.confidence.shape != shape or self.image.shape[:2] != shape:
            raise ShapeError(f"record image {self.image.shape}, depth {self.depth.shape}, "
                             f"confidence {self.confidence.shape} do not match camera {shape}")


class GeometricCheck(NamedTuple):
    mask: np.ndarray        # (H, W) bool
    consistent: np.ndarray  # (V-1, H, W) reprojected depths, NaN where inconsistent


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ShapeError(f"{len(self.points)} points but {len(self.colors)} colours")
        if not np.isfinite(self.points).all():
            raise GeometryError("point cloud has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    def write(self, path) -> None:
        write_ply(path, self.points, self.colors)

    @property
    def diameter(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(0) - self.points.min(0)))


class CloudScores(NamedTuple):
    accuracy: float
    completeness: float
    overall: float
    precision: float
    recall: float
    f_score: float
    tau_f: float

    def to_dict(self) -> dict:
        return self._asdict()


def ranked_views(target:Camera, cams:Sequence[Camera]) -> List[int]:
    ''' Every camera not coincident with the target, nearest centre first, ties by index '''
    dist = np.array([np.linalg.norm(c.center - target.center) for c in cams])
    candidates = np.flatnonzero(dist > COINCIDENT_TOL)
    order = np.argsort(dist[candidates], kind="stable")
    return [int(i) for i in candidates[order]]


def select_views(target:Camera, cams:Sequence[Camera], n:int) -> List[int]:
    ''' The n cameras nearest to the target centre '''
    ranked = ranked_views(target, cams)
    if n > len(ranked):
        raise ConfigError("N", f"asked for {n} source views, only {len(ranked)} available")
    return ranked[:n]


def predict_reference_depths(views:Sequence, pipeline, n:int) -> list:
    ''' Depth of every reference view regressed from its n nearest other views '''
    cams = [v.camera for v in views]
    results = []
    for i, cam in enumerate(cams):
        picks = select_views(cam, cams, min(n, len(cams) - 1))
        results.append(pipeline.regress_depth([views[j] for j in picks], cam))
        logger.debug(f"reference {i}: sources {picks}")
    return results


def photometric_filter(confidences:Sequence[np.ndarray], tau_p:float) -> List[np.ndarray]:
    return [np.asarray(c) >= tau_p for c in confidences]


def _reproject(ref:FusionRecord, other:FusionRecord, tau_px:float, tau_rel:float) -> np.ndarray:
    ''' Reference-frame depth of the other view's surface where both views agree; NaN elsewhere '''
    h, w = ref.camera.size
    u, v = pixel_grid(h, w)
    out = np.full((h, w), np.nan)
    has = ref.depth > 0
    if not has.any():
        return out
    X = backproject(ref.camera, (u[has], v[has]), ref.depth[has])
    proj = project(other.camera, X)
    oh, ow = other.camera.size
    with np.errstate(invalid="ignore"):
        ui = np.round(proj.u)
        vi = np.round(proj.v)
        inside = proj.valid & (ui >= 0) & (ui <= ow - 1) & (vi >= 0) & (vi <= oh - 1)
    ui = np.where(inside, ui, 0).astype(int)
    vi = np.where(inside, vi, 0).astype(int)
    d_other = other.depth[vi, ui]
    inside &= d_other > 0
    back = backproject(other.camera, (ui[inside], vi[inside]), d_other[inside])
    reproj = project(ref.camera, back)
    pix_err = np.hypot(reproj.u - u[has][inside], reproj.v - v[has][inside])
    d_ref = ref.depth[has][inside]
    ok = reproj.valid & (pix_err < tau_px) & (np.abs(reproj.z - d_ref) / d_ref < tau_rel)
    depths = np.full(inside.shape, np.nan)
    depths[np.flatnonzero(inside)[ok]] = reproj.z[ok]
    out[has] = depths
    return out


def geometric_filter(records:Sequence[FusionRecord], tau_px:float = 1.0, tau_rel:float = 0.01,
                     S:int = 3) -> List[GeometricCheck]:
    ''' Keep pixels whose surface point reprojects consistently into at least S other views '''
    checks = []
    for r, ref in enumerate(records):
        consistent = np.stack([_reproject(ref, other, tau_px, tau_rel)
                               for o, other in enumerate(records) if o != r]) if len(records) > 1 \
            else np.full((0,) + ref.camera.size, np.nan)
        count = np.isfinite(consistent).sum(0)
        mask = (ref.depth > 0) & (count >= S) & (S <= len(records) - 1)
        checks.append(GeometricCheck(mask, consistent))
        logger.debug(f"view {r}: {int(mask.sum())}/{mask.size} pixels geometrically consistent")
    return checks


def median_fuse(records:Sequence[FusionRecord], checks:Sequence[GeometricCheck]) -> List[np.ndarray]:
    ''' Kept pixels take the median of their own and their consistent depths; others become 0 '''
    fused = []
    for rec, check in zip(records, checks):
        stack = np.concatenate([rec.depth[None], check.consistent], axis=0)
        out = np.zeros_like(rec.depth, dtype=np.float64)
        # own depth is finite on kept pixels, so no slice is all-NaN
        out[check.mask] = np.nanmedian(stack[:, check.mask], axis=0)
        fused.append(out)
    return fused


def build_pointcloud(records:Sequence[FusionRecord], depths:Sequence[np.ndarray],
                     masks:Optional[Sequence[np.ndarray]] = None) -> PointCloud:
    points, colors = [], []
    for i, (rec, depth) in enumerate(zip(records, depths)):
        keep = depth > 0 if masks is None else masks[i] & (depth > 0)
        if not keep.any():
            continue
        u, v = pixel_grid(*rec.camera.size)
        points.append(backproject(rec.camera, (u[keep], v[keep]), depth[keep]))
        colors.append(rec.image[keep])
    if not points:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return PointCloud(np.concatenate(points), np.concatenate(colors))


def fuse_records(records:Sequence[FusionRecord], tau_p:float = 0.3, tau_px:float = 1.0,
                 tau_rel:float = 0.01, S:int = 3) -> PointCloud:
    ''' Photometric then geometric filtering, median fusion and back-projection '''
    photometric = photometric_filter([r.confidence for r in records], tau_p)
    filtered = [FusionRecord(r.image, np.where(m, r.depth, 0.0), r.camera, r.confidence)
                for r, m in zip(records, photometric)]
    checks = geometric_filter(filtered, tau_px, tau_rel, S)
    fused = median_fuse(filtered, checks)
    cloud = build_pointcloud(filtered, fused, [c.mask for c in checks])
    logger.info(f"fused {len(cloud)} points from {len(records)} views")
    return cloud


def eval_pointcloud(pred:PointCloud, gt:PointCloud, tau_f:float) -> CloudScores:
    ''' Accuracy (pred→gt), completeness (gt→pred), their mean, and the F-score at tau_f '''
    if len(pred) == 0 or len(gt) == 0:
        raise EvaluationError(f"cannot score empty clouds ({len(pred)} predicted, {len(gt)} ground-truth points)")
    if not tau_f > 0:
        raise EvaluationError(f"F-score threshold must be positive, got {tau_f}")
    to_gt, _ = cKDTree(gt.points).query(pred.points)
    to_pred, _ = cKDTree(pred.points).query(gt.points)
    accuracy = float(to_gt.mean())
    completeness = float(to_pred.mean())
    precision = float(np.mean(to_gt < tau_f))
    recall = float(np.mean(to_pred < tau_f))
    f_score = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return CloudScores(accuracy, completeness, (accuracy + completeness) / 2, precision, recall, f_score, float(tau_f))
