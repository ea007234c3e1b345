from typing import List

from camera import Camera
from errors import ConfigError

class ViewGroup:
    '''A run of consecutive path cameras rendered with one threaded recurrent state'''
    def __init__(self, size:int, start:int=0):
        if size < 1:
            raise ConfigError("Q", f"group size must be >= 1, got {size}")
        self.size = size
        self.start = start
        self.cameras:List[Camera] = []

    def full(self) -> bool:
        return len(self.cameras) == self.size

    def add(self, camera:Camera) -> bool:
        if self.full():
            return False
        self.cameras.append(camera)
        return True

    def indices(self) -> List[int]:
        return list(range(self.start, self.start + len(self.cameras)))

    def __len__(self) -> int:
        return len(self.cameras)

    def __repr__(self) -> str:
        return f"ViewGroup({self.start}..{self.start + len(self.cameras) - 1})"

    @staticmethod
    def chunk(cameras:List[Camera], size:int) -> List["ViewGroup"]:
        groups:List[ViewGroup] = []
        for i, camera in enumerate(cameras):
            if len(groups) == 0 or groups[-1].full():
                groups.append(ViewGroup(size, start=i))
            groups[-1].add(camera)
        return groups
