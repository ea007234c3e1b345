"""Pinhole camera model.

Conventions: right-handed, the camera looks down +z, image origin top-left
with u to the right and v down. Pixel (i, j) samples the continuous
coordinate (i, j). Extrinsics map world to camera: X_c = R·X_w + t.
"""

from dataclasses import dataclass, replace
from typing import NamedTuple, Tuple, Union

import numpy as np

from errors import GeometryError

ORTHO_TOL = 1e-9

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]], dtype=np.float64)

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Extrinsics:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal with det 1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Extrinsics":
        return Extrinsics(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4, dtype=np.float64)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be positive, got {self.width}x{self.height}")

    def __repr__(self) -> str:
        c = self.center
        return f"Camera({self.width}x{self.height}, f=({self.intrinsics.fx:g},{self.intrinsics.fy:g}), C=({c[0]:.3f},{c[1]:.3f},{c[2]:.3f}))"

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics.K

    @property
    def K_inv(self) -> np.ndarray:
        return self.intrinsics.K_inv

    @property
    def R(self) -> np.ndarray:
        return self.extrinsics.R

    @property
    def t(self) -> np.ndarray:
        return self.extrinsics.t

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def size(self) -> Tuple[int, int]:
        return self.height, self.width

    def scale_world(self, f:float) -> "Camera":
        ''' The same camera observing a world scaled by f (depths scale by f) '''
        return replace(self, extrinsics=Extrinsics(self.R, self.t * f))

    def same_pose(self, other:"Camera", tol:float = 1e-12) -> bool:
        return (np.abs(self.R - other.R).max() <= tol and np.abs(self.t - other.t).max() <= tol
                and np.allclose(self.K, other.K, rtol=0.0, atol=tol))


class Projection(NamedTuple):
    u: ArrayLike
    v: ArrayLike
    z: ArrayLike
    valid: Union[bool, np.ndarray]


def project(cam:Camera, X:np.ndarray) -> Projection:
    ''' Project world points (..., 3); z <= 0 marks points behind or on the camera plane '''
    X = np.asarray(X, dtype=np.float64)
    Xc = X @ cam.R.T + cam.t
    z = Xc[..., 2]
    degenerate = z == 0
    safe_z = np.where(degenerate, 1.0, z)
    u = cam.intrinsics.fx * Xc[..., 0] / safe_z + cam.intrinsics.cx
    v = cam.intrinsics.fy * Xc[..., 1] / safe_z + cam.intrinsics.cy
    u = np.where(degenerate, np.nan, u)
    v = np.where(degenerate, np.nan, v)
    valid = z > 0
    if X.ndim == 1:
        return Projection(float(u), float(v), float(z), bool(valid))
    return Projection(u, v, z, valid)


def backproject(cam:Camera, uv:Tuple[ArrayLike, ArrayLike], d:ArrayLike) -> np.ndarray:
    ''' World point(s) seen at pixel uv with camera-frame depth d '''
    u, v = uv
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("backprojection depth must be positive")
    intr = cam.intrinsics
    Xc = np.stack(np.broadcast_arrays((u - intr.cx) / intr.fx * d,
                                      (v - intr.cy) / intr.fy * d,
                                      d), axis=-1)
    return (Xc - cam.t) @ cam.R


def relative_pose(src:Camera, tgt:Camera) -> Tuple[np.ndarray, np.ndarray]:
    ''' (R_rel, t_rel) with X_src = R_rel·X_tgt + t_rel '''
    R_rel = np.eye(3) if np.array_equal(src.R, tgt.R) else src.R @ tgt.R.T
    t_rel = src.t - R_rel @ tgt.t
    return R_rel, t_rel


def plane_homography(src:Camera, tgt:Camera, d:float) -> np.ndarray:
    ''' Maps homogeneous target pixels to source pixels through the plane z = d of the target frame '''
    if not d > 0:
        raise GeometryError(f"plane depth must be positive, got {d}")
    R_rel, t_rel = relative_pose(src, tgt)
    n = np.array([0.0, 0.0, 1.0])
    # points on the plane satisfy n·X/d = 1, so t_rel enters with a plus sign
    return src.K @ (R_rel + np.outer(t_rel, n) / d) @ tgt.K_inv


def scale_camera(cam:Camera, s:int) -> Camera:
    ''' Camera of an image downsampled by s; a world point projects to (u/s, v/s) '''
    if s < 1 or cam.width % s or cam.height % s:
        raise GeometryError(f"scale {s} does not divide image size {cam.width}x{cam.height}")
    if s == 1:
        return cam
    intr = cam.intrinsics
    return Camera(Intrinsics(intr.fx / s, intr.fy / s, intr.cx / s, intr.cy / s),
                  cam.extrinsics, cam.width // s, cam.height // s)


def pixel_grid(height:int, width:int) -> Tuple[np.ndarray, np.ndarray]:
    v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                       np.arange(width, dtype=np.float64), indexing="ij")
    return u, v


def make_camera(K:np.ndarray, T:np.ndarray, width:int, height:int) -> Camera:
    ''' Camera from a 3x3 intrinsic and a 4x4 world-to-camera matrix '''
    K = np.asarray(K, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    return Camera(Intrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2]),
                  Extrinsics(T[:3, :3], T[:3, 3]), int(width), int(height))
