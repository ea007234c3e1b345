from typing import Dict, List, Optional, Sequence

import asyncio
import logging
from functools import partial

import torch

from async_cache import AsyncCache
from camera import Camera
from pcfuse import ranked_views
from pipeline import RenderedView, ViewSynthesisPipeline
from render_request import RenderRequest
from synthdata import View
from view_group import ViewGroup

logger = logging.getLogger(__name__)

class RenderManager:
    ''' Renders a camera path in groups, several groups at a time

    Attributes:
    group_size - Consecutive cameras sharing one recurrent state (Q)
    max_active_groups - Groups rendered simultaneously
    pipeline - The scene's view synthesis pipeline
    views - Source views of the rig
    n_sources - Source views per target (N)
    cache - AsyncCache sharing source feature pyramids between groups
    '''
    def __init__(self, group_size:int, max_active_groups:int, pipeline:ViewSynthesisPipeline,
                 views:Sequence[View], n_sources:int, cache:Optional[AsyncCache]=None):
        self.group_size = group_size
        self.max_active_groups = max(1, max_active_groups)
        self.pipeline = pipeline
        self.views = list(views)
        self.n_sources = n_sources
        self.cache = cache if cache is not None else AsyncCache()

    async def render_path(self, cameras:List[Camera]) -> List[RenderedView]:
        groups = ViewGroup.chunk(cameras, self.group_size)
        semaphore = asyncio.Semaphore(self.max_active_groups)
        callback = group_callback_generator(groups)
        rendered = await asyncio.gather(*[self._render_group(g, semaphore, callback) for g in groups])
        logger.debug(f"pyramid cache: {self.cache.misses} computed, {self.cache.hits} reused")
        return [view for group in rendered for view in group]

    def _requests(self, group:ViewGroup) -> List[RenderRequest]:
        rig = [v.camera for v in self.views]
        return [RenderRequest(i, cam, ranked_views(cam, rig)[:self.n_sources])
                for i, cam in zip(group.indices(), group.cameras)]

    def _pyramid(self, i:int):
        with torch.no_grad():
            return self.pipeline.pyramid(self.views[i])

    async def _pyramids(self, requests:List[RenderRequest]) -> Dict[int, object]:
        if self.pipeline.generator is None:
            return {}
        pyramids = {}
        for request in requests:
            for i, call_id in zip(request.sources, request.pyramid_ids()):
                if i not in pyramids:
                    pyramids[i] = await self.cache.get(call_id, partial(self._pyramid, i))
        return pyramids

    async def _render_group(self, group:ViewGroup, semaphore:asyncio.Semaphore, callback) -> List[RenderedView]:
        async with semaphore:
            requests = self._requests(group)
            pyramids = await self._pyramids(requests)
            rendered = await asyncio.to_thread(self.pipeline.render, self.views, group.cameras,
                                               self.n_sources, pyramids)
        callback(group)
        return rendered

def group_callback_generator(groups:List[ViewGroup]):
    counter = {"groups": groups, "completed_groups": 0}
    def mng_cbk(group:ViewGroup):
        counter['completed_groups'] += 1
        logger.debug(f"Finished {group}")
        logger.info(f"{counter['completed_groups']}/{len(counter['groups'])} render groups completed")
    return mng_cbk
