from typing import Any, Awaitable, Callable
import asyncio

class AsyncCacheCall:
    ''' A single cacheable asynchronous computation '''
    def __init__(self, call_id:str, f:Awaitable):
        self.id = call_id
        self.f = f

    def __repr__(self) -> str:
        return f"`{self.id}`"

class AsyncCache:
    ''' Caches results by call id and blocks duplicate calls,
        returning the cached result once the original call returns '''
    def __init__(self):
        self.past_calls = {}
        self.active_calls = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self.past_calls)

    def is_done(self, call_id:str) -> bool:
        return call_id in self.past_calls

    def is_active(self, call_id:str) -> bool:
        return call_id in self.active_calls

    def is_new(self, call_id:str) -> bool:
        return not (self.is_done(call_id) or self.is_active(call_id))

    async def queue_call(self, call:AsyncCacheCall) -> Any:
        if self.is_active(call.id):
            # Another task is computing it, wait for that result
            self.hits += 1
            await self.active_calls[call.id].wait()
        elif self.is_done(call.id):
            self.hits += 1
        else:
            self.misses += 1
            call_event = asyncio.Event()
            self.active_calls[call.id] = call_event
            try:
                self.past_calls[call.id] = await call.f
            finally:
                self.active_calls.pop(call.id)
                call_event.set()
        if asyncio.iscoroutine(call.f):
            # Close the coroutine when it was never awaited
            call.f.close()
        if call.id not in self.past_calls:
            raise RuntimeError(f"cached call {call!r} failed")
        return self.past_calls[call.id]

    async def get(self, call_id:str, compute:Callable[[], Any]) -> Any:
        ''' Run a blocking compute() in a worker thread once per call id '''
        if self.is_done(call_id):
            self.hits += 1
            return self.past_calls[call_id]
        return await self.queue_call(AsyncCacheCall(call_id, asyncio.to_thread(compute)))
