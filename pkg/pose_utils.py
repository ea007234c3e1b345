from typing import List, Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from camera import Camera, Extrinsics, Intrinsics


class PoseUtils:
    @staticmethod
    def look_at(center:np.ndarray, target:np.ndarray, down:Sequence[float] = (0.0, 1.0, 0.0)) -> Extrinsics:
        ''' World-to-camera pose at `center` looking at `target`, image v along `down` '''
        center = np.asarray(center, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - center
        z /= np.linalg.norm(z)
        x = np.cross(np.asarray(down, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return Extrinsics(R, -R @ center)

    @staticmethod
    def default_intrinsics(width:int, height:int, focal_ratio:float = 1.0) -> Intrinsics:
        ''' Square pixels, focal = focal_ratio·width, principal point at the image centre '''
        f = focal_ratio * width
        return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)

    @staticmethod
    def interpolate_path(cams:Sequence[Camera], steps_per_segment:int) -> List[Camera]:
        ''' Smooth path through consecutive cameras: slerp on rotation, lerp on centre '''
        if len(cams) < 2 or steps_per_segment < 1:
            return list(cams)
        path = []
        for a, b in zip(cams[:-1], cams[1:]):
            slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([a.R, b.R])))
            for s in np.arange(steps_per_segment) / steps_per_segment:
                R = slerp([s]).as_matrix()[0]
                center = (1 - s) * a.center + s * b.center
                path.append(Camera(a.intrinsics, Extrinsics(R, -R @ center), a.width, a.height))
        path.append(cams[-1])
        return path
