from typing import List

from camera import Camera

class RenderRequest:
    ''' One novel camera of a path, with the source views it will be rendered from '''
    def __init__(self, index:int, camera:Camera, sources:List[int]):
        self.index = index
        self.camera = camera
        self.sources = sources

    def pyramid_ids(self) -> List[str]:
        return [f"pyramid/{i}" for i in self.sources]

    def __repr__(self) -> str:
        return f"RenderRequest({self.index}, sources={self.sources})"
