from typing import Optional


class CascadeNVSError(Exception):
    ''' Base class for every error raised by the pipeline '''


class ConfigError(CascadeNVSError):
    ''' A configuration value is missing, malformed or inconsistent '''
    def __init__(self, field:str, message:str):
        super().__init__(f"config field `{field}`: {message}")
        self.field = field
        self.message = message


class ParseError(CascadeNVSError):
    ''' A file could not be decoded '''
    def __init__(self, path:str, offset:int, message:str):
        super().__init__(f"{path} (byte {offset}): {message}")
        self.path = str(path)
        self.offset = offset
        self.message = message


class GeometryError(CascadeNVSError):
    ''' Invalid depth, plane or projection '''


class ShapeError(CascadeNVSError):
    ''' Tensor shapes do not line up '''


class TrainingDivergedError(CascadeNVSError):
    ''' A loss or gradient became non-finite '''
    def __init__(self, step:int, name:str, checkpoint:Optional[str] = None):
        detail = f"non-finite value in `{name}` at step {step}"
        if checkpoint:
            detail += f"; last good checkpoint: {checkpoint}"
        super().__init__(detail)
        self.step = step
        self.name = name
        self.checkpoint = checkpoint


class EvaluationError(CascadeNVSError):
    ''' Metric inputs are empty or mismatched '''
