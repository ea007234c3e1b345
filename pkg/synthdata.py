"""Procedural desk-scale scenes, exact ray-cast ground truth, camera rigs and the on-disk dataset layout.

A scene is a textured table rectangle with relief objects (boxes,
spherical caps, tilted panels) standing on it, or for the `box` kind a
single box on the table. The table fits inside every rig camera's view, so
each foreground pixel is seen by the whole ring. Textures are solid: colour
is a function of the 3-D surface point, so every view of a point sees the
same albedo and renders are photoconsistent up to Lambertian shading.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from camera import Camera, Intrinsics, pixel_grid
from errors import ConfigError, ParseError
from formats import (read_camera, read_pfm, read_png, write_camera, write_pfm,
                     write_ply, write_png)
from planes import DEFAULT_M1
from pose_utils import PoseUtils

logger = logging.getLogger(__name__)

RIG_DISTANCE = 4.0
RIG_RADIUS = 1.0
JITTER = 0.1
# depth bracket: nearest hit / (1 + m) to farthest hit · (1 + m)
DEPTH_MARGIN = 0.8
LIGHT = np.array([0.3, -0.4, -1.0]) / np.linalg.norm([0.3, -0.4, -1.0])
AMBIENT = 0.3
GT_UPSAMPLE = 2
TABLE_HALF = 1.7
TEXTURE_GAIN = 2.0
SCENE_KINDS = ("relief", "box")


@dataclass
class Texture:
    base: List[float]                 # rgb albedo
    waves: List[List[float]]          # (kx, ky, kz, phase, amplitude) per sinusoid
    checker_period: float
    checker_weight: float

    def albedo(self, X:np.ndarray) -> np.ndarray:
        ''' (..., 3) surface points to (..., 3) albedo in [0, 1] '''
        w = np.asarray(self.waves, dtype=np.float64)
        pattern = np.zeros(X.shape[:-1])
        for kx, ky, kz, phase, amp in w:
            pattern += amp * np.sin(X[..., 0] * kx + X[..., 1] * ky + X[..., 2] * kz + phase)
        p = np.pi / self.checker_period
        checker = np.tanh(1.5 * np.sin(p * X[..., 0]) * np.sin(p * X[..., 1]))
        pattern += self.checker_weight * checker
        scale = np.abs(w[:, 4]).sum() + self.checker_weight
        t = 0.5 + 0.5 * np.tanh(TEXTURE_GAIN * pattern / scale)
        return np.asarray(self.base) * (0.15 + 0.85 * t)[..., None]


@dataclass
class Rectangle:
    center: List[float]
    axis_u: List[float]
    axis_v: List[float]
    half_u: float
    half_v: float
    texture: Texture
    kind: str = "rectangle"

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.axis_u, self.axis_v)
        return n / np.linalg.norm(n)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        corners = np.array([c + su * self.half_u * np.asarray(self.axis_u) + sv * self.half_v * np.asarray(self.axis_v)
                            for su in (-1, 1) for sv in (-1, 1)])
        return corners.min(0), corners.max(0)

    def intersect(self, origin, dirs):
        n = self.normal
        c = np.asarray(self.center)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        X = origin + t[..., None] * dirs
        rel = X - c
        inside = (np.abs(rel @ np.asarray(self.axis_u)) <= self.half_u) & (np.abs(rel @ np.asarray(self.axis_v)) <= self.half_v)
        hit = (denom != 0) & (t > 0) & inside
        normals = np.broadcast_to(np.where(denom[..., None] < 0, n, -n), X.shape)
        return np.where(hit, t, np.inf), normals

    def distance(self, X:np.ndarray) -> np.ndarray:
        rel = X - np.asarray(self.center)
        du = np.maximum(np.abs(rel @ np.asarray(self.axis_u)) - self.half_u, 0)
        dv = np.maximum(np.abs(rel @ np.asarray(self.axis_v)) - self.half_v, 0)
        return np.sqrt((rel @ self.normal) ** 2 + du ** 2 + dv ** 2)


@dataclass
class Box:
    lo: List[float]
    hi: List[float]
    texture: Texture
    kind: str = "box"

    def bounds(self):
        return np.asarray(self.lo, dtype=np.float64), np.asarray(self.hi, dtype=np.float64)

    def intersect(self, origin, dirs):
        lo, hi = self.bounds()
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        near = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
        far = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
        t_near = near.max(-1)
        t_far = far.min(-1)
        hit = (t_near <= t_far) & (t_near > 0)
        axis = near.argmax(-1)
        normals = np.zeros(dirs.shape)
        np.put_along_axis(normals, axis[..., None], -np.sign(np.take_along_axis(dirs, axis[..., None], -1)), -1)
        return np.where(hit, t_near, np.inf), normals

    def distance(self, X:np.ndarray) -> np.ndarray:
        lo, hi = self.bounds()
        q = np.abs(X - (lo + hi) / 2) - (hi - lo) / 2
        signed = np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(-1), 0)
        return np.abs(signed)


@dataclass
class Sphere:
    center: List[float]
    radius: float
    texture: Texture
    kind: str = "sphere"

    def bounds(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        a = (dirs * dirs).sum(-1)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0))
        t = (-b - root) / (2 * a)
        hit = (disc >= 0) & (t > 0)
        X = origin + t[..., None] * dirs
        normals = (X - np.asarray(self.center)) / self.radius
        return np.where(hit, t, np.inf), normals

    def distance(self, X:np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(X - np.asarray(self.center), axis=-1) - self.radius)


PRIMITIVES = {"rectangle": Rectangle, "box": Box, "sphere": Sphere}


@dataclass
class Scene:
    seed: int
    complexity: int
    primitives: list
    background: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    rig_distance: float = RIG_DISTANCE
    kind: str = "relief"

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        boxes = [p.bounds() for p in self.primitives]
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)

    @property
    def centroid(self) -> np.ndarray:
        lo, hi = self.bounds()
        return (lo + hi) / 2

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data:dict) -> "Scene":
        prims = []
        for p in data["primitives"]:
            p = dict(p)
            cls = PRIMITIVES[p["kind"]]
            p["texture"] = Texture(**p["texture"])
            prims.append(cls(**p))
        return Scene(data["seed"], data["complexity"], prims, list(data["background"]), data["rig_distance"],
                     data.get("kind", "relief"))

    def distance(self, X:np.ndarray) -> np.ndarray:
        ''' Unsigned distance of points to the nearest primitive surface '''
        return np.min([p.distance(X) for p in self.primitives], axis=0)


class View(NamedTuple):
    image: np.ndarray            # (H, W, 3) in [0, 1]
    depth: Optional[np.ndarray]  # (H, W) scene units, 0 where nothing was hit
    camera: Camera


@dataclass
class DatasetIndex:
    scene_dir: Path
    image_paths: List[Path]
    depth_paths: List[Path]
    cam_paths: List[Path]
    d_min: float
    d_max: float

    def __len__(self) -> int:
        return len(self.image_paths)


def _texture(rng:np.random.Generator) -> Texture:
    waves = []
    for _ in range(3):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        wavelength = rng.uniform(0.6, 1.2)
        waves.append([*(direction * 2 * np.pi / wavelength), rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 1.0)])
    base = rng.uniform(0.45, 1.0, size=3)
    return Texture(base.tolist(), waves, float(rng.uniform(0.5, 0.8)), float(rng.uniform(0.5, 1.0)))


def _table(rng:np.random.Generator) -> Rectangle:
    return Rectangle([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], TABLE_HALF, TABLE_HALF, _texture(rng))


def generate_scene(seed:int, complexity:int = 2, kind:str = "relief") -> Scene:
    ''' Deterministic scene from a seed

    complexity 0 is the bare table; `box` ignores complexity and places one
    box near the table centre.
    '''
    if kind not in SCENE_KINDS:
        raise ConfigError("kind", f"unknown scene kind `{kind}`, expected one of {', '.join(SCENE_KINDS)}")
    rng = np.random.default_rng(seed)
    ey = [0.0, 1.0, 0.0]
    prims = [_table(rng)]
    if kind == "box":
        x, y = rng.uniform(-0.3, 0.3, size=2)
        half = rng.uniform(0.5, 0.7, size=2)
        thickness = rng.uniform(0.15, 0.25)
        prims.append(Box([x - half[0], y - half[1], -thickness], [x + half[0], y + half[1], 0.0], _texture(rng)))
        return Scene(seed, 1, prims, kind=kind)
    for _ in range(max(complexity, 0)):
        x, y = rng.uniform(-1.0, 1.0, size=2)
        shape = rng.choice(["box", "sphere", "rectangle"])
        if shape == "box":
            half = rng.uniform(0.25, 0.45, size=2)
            thickness = rng.uniform(0.1, 0.25)
            prims.append(Box([x - half[0], y - half[1], -thickness], [x + half[0], y + half[1], 0.0], _texture(rng)))
        elif shape == "sphere":
            # centred on the table: a bump whose depth is continuous at the rim
            prims.append(Sphere([x, y, 0.0], float(rng.uniform(0.2, 0.35)), _texture(rng)))
        else:
            tilt = rng.uniform(-0.25, 0.25)
            axis_u = [np.cos(tilt), 0.0, np.sin(tilt)]
            prims.append(Rectangle([x, y, -0.15], axis_u, ey, float(rng.uniform(0.3, 0.5)), float(rng.uniform(0.3, 0.5)), _texture(rng)))
    return Scene(seed, max(complexity, 0), prims, kind=kind)


def camera_rig(scene:Scene, n_views:int, radius:float = RIG_RADIUS, jitter_seed:Optional[int] = None,
               width:int = 64, height:int = 64, jitter:float = JITTER) -> List[Camera]:
    ''' Cameras on a ring in front of the scene, all looking at its centroid; no jitter without a seed '''
    if n_views < 2:
        raise ConfigError("views", f"a rig needs at least 2 views, got {n_views}")
    rng = np.random.default_rng(jitter_seed) if jitter_seed is not None else None
    target = scene.centroid
    intrinsics = PoseUtils.default_intrinsics(width, height)
    cams = []
    for i in range(n_views):
        angle = 2 * np.pi * i / n_views
        center = target + np.array([radius * np.cos(angle), radius * np.sin(angle), -scene.rig_distance])
        if rng is not None:
            center = center + rng.uniform(-jitter, jitter, size=3) * radius
        cams.append(Camera(intrinsics, PoseUtils.look_at(center, target), width, height))
    return cams


def camera_rays(cam:Camera) -> Tuple[np.ndarray, np.ndarray]:
    ''' Centre and per-pixel world directions scaled to unit camera-frame z '''
    u, v = pixel_grid(cam.height, cam.width)
    intr = cam.intrinsics
    d_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    return cam.center, d_cam @ cam.R


def raycast_render(scene:Scene, cam:Camera) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ''' (rgb, depth, hit) from nearest-hit ray casting; depth is the camera-frame z '''
    origin, dirs = camera_rays(cam)
    best = np.full(dirs.shape[:-1], np.inf)
    normal = np.zeros(dirs.shape)
    owner = np.full(dirs.shape[:-1], -1)
    for k, prim in enumerate(scene.primitives):
        t, n = prim.intersect(origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        normal = np.where(closer[..., None], n, normal)
        owner = np.where(closer, k, owner)
    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    X = origin + depth[..., None] * dirs
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), dirs.shape).copy()
    shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT, 0, None)
    for k, prim in enumerate(scene.primitives):
        sel = owner == k
        if sel.any():
            rgb[sel] = prim.texture.albedo(X[sel]) * shade[sel, None]
    return np.clip(rgb, 0.0, 1.0), depth, hit


def render_views(scene:Scene, cams:Sequence[Camera]) -> List[View]:
    views = []
    for cam in cams:
        rgb, depth, _ = raycast_render(scene, cam)
        views.append(View(rgb, depth, cam))
    return views


def depth_range(views:Sequence[View], margin:float = DEPTH_MARGIN) -> Tuple[float, float]:
    ''' Sweep bracket around the rendered hits, widened by the factor 1 + margin on both ends '''
    hits = np.concatenate([v.depth[v.depth > 0] for v in views])
    return float(hits.min() / (1 + margin)), float(hits.max() * (1 + margin))


def surface_samples(scene:Scene, cams:Sequence[Camera], upsample:int = GT_UPSAMPLE) -> Tuple[np.ndarray, np.ndarray]:
    ''' Rig-visible surface points and colours, ray cast at `upsample`× resolution '''
    points, colors = [], []
    for cam in cams:
        intr = cam.intrinsics
        fine = Camera(Intrinsics(intr.fx * upsample, intr.fy * upsample,
                                 intr.cx * upsample + (upsample - 1) / 2, intr.cy * upsample + (upsample - 1) / 2),
                      cam.extrinsics, cam.width * upsample, cam.height * upsample)
        rgb, depth, hit = raycast_render(scene, fine)
        origin, dirs = camera_rays(fine)
        points.append((origin + depth[..., None] * dirs)[hit])
        colors.append(rgb[hit])
    return np.concatenate(points), np.concatenate(colors)


def write_dataset(root, index:int, scene:Scene, views:Sequence[View], M1:int = DEFAULT_M1,
                  with_surface:bool = True) -> Path:
    ''' scene_xxxx/{images/%08d.png, depths/%08d.pfm, cams/%08d.txt} plus scene.json and gt_points.ply '''
    scene_dir = Path(root) / f"scene_{index:04d}"
    for sub in ("images", "depths", "cams"):
        (scene_dir / sub).mkdir(parents=True, exist_ok=True)
    d_min, d_max = depth_range(views)
    d_interval = (d_max - d_min) / M1
    for i, view in enumerate(views):
        write_png(scene_dir / "images" / f"{i:08d}.png", view.image)
        write_pfm(scene_dir / "depths" / f"{i:08d}.pfm", view.depth)
        write_camera(scene_dir / "cams" / f"{i:08d}.txt", view.camera, d_min, d_interval)
    (scene_dir / "scene.json").write_text(json.dumps(scene.to_dict(), sort_keys=True, indent=2) + "\n")
    if with_surface:
        points, colors = surface_samples(scene, [v.camera for v in views])
        write_ply(scene_dir / "gt_points.ply", points, colors)
    logger.debug(f"wrote {len(views)} views to {scene_dir}")
    return scene_dir


def read_dataset(scene_dir, M1:int = DEFAULT_M1) -> DatasetIndex:
    ''' Index of one scene directory; every referenced file is checked to parse '''
    scene_dir = Path(scene_dir)
    images = sorted((scene_dir / "images").glob("*.png"))
    if not images:
        raise ParseError(scene_dir / "images", 0, "no images found")
    depths, cams, ranges = [], [], []
    for image in images:
        depth = scene_dir / "depths" / f"{image.stem}.pfm"
        cam = scene_dir / "cams" / f"{image.stem}.txt"
        for p in (depth, cam):
            if not p.exists():
                raise ParseError(p, 0, "missing file")
        h, w = read_pfm(depth).shape
        record = read_camera(cam, w, h)
        ranges.append((record.d_min, record.d_min + M1 * record.d_interval))
        depths.append(depth)
        cams.append(cam)
    d_min = min(r[0] for r in ranges)
    d_max = max(r[1] for r in ranges)
    return DatasetIndex(scene_dir, images, depths, cams, d_min, d_max)


def load_views(index:DatasetIndex, with_depth:bool = True) -> List[View]:
    views = []
    for image_path, depth_path, cam_path in zip(index.image_paths, index.depth_paths, index.cam_paths):
        image = read_png(image_path)
        h, w = image.shape[:2]
        depth = read_pfm(depth_path).astype(np.float64) if with_depth else None
        if depth is not None and depth.shape != (h, w):
            raise ParseError(depth_path, 0, f"depth {depth.shape} does not match image {h}x{w}")
        views.append(View(image, depth, read_camera(cam_path, w, h).camera))
    return views


def load_scene(scene_dir) -> Scene:
    path = Path(scene_dir) / "scene.json"
    try:
        return Scene.from_dict(json.loads(path.read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ParseError(path, 0, f"malformed scene description: {e}") from None


def scene_dirs(root) -> List[Path]:
    ''' A single scene directory or every scene_xxxx below a dataset root '''
    root = Path(root)
    if (root / "images").is_dir():
        return [root]
    found = sorted(p for p in root.glob("scene_*") if (p / "images").is_dir())
    if not found:
        raise ParseError(root, 0, "no scene directories found")
    return found


def generate_dataset(root, seed:int, n_scenes:int = 1, n_views:int = 5, size:int = 64,
                     complexity:int = 2, kind:str = "relief") -> List[Path]:
    out = []
    for i in range(n_scenes):
        scene = generate_scene(seed * 1000 + i, complexity, kind)
        cams = camera_rig(scene, n_views, jitter_seed=seed * 1000 + i, width=size, height=size)
        out.append(write_dataset(root, i, scene, render_views(scene, cams)))
        logger.info(f"{i + 1}/{n_scenes} scenes completed")
    return out
