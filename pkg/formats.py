"""File codecs: PFM depth, PNG colour, camera text, binary PLY and the parameter checkpoint."""

import re
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, NamedTuple, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from plyfile import PlyData, PlyElement, PlyParseError

from camera import ORTHO_TOL, Camera, Extrinsics, Intrinsics
from errors import ParseError

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"RGBDP1"
# rotations read from text are re-orthonormalised within this tolerance
ROTATION_TOL = 1e-5


def read_pfm(path:PathLike) -> np.ndarray:
    ''' Grayscale PFM to a (H, W) float32 array, top row first '''
    data = Path(path).read_bytes()
    offset = 0
    lines = []
    for _ in range(3):
        end = data.find(b"\n", offset)
        if end < 0:
            raise ParseError(path, offset, "truncated PFM header")
        lines.append((offset, data[offset:end].decode("ascii", errors="replace").strip()))
        offset = end + 1
    (o0, magic), (o1, dims), (o2, scale) = lines
    if magic != "Pf":
        raise ParseError(path, o0, f"expected grayscale `Pf` header, got `{magic[:8]}`")
    match = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not match:
        raise ParseError(path, o1, f"malformed dimensions `{dims[:32]}`")
    width, height = map(int, match.groups())
    try:
        scale = float(scale)
    except ValueError:
        raise ParseError(path, o2, f"malformed scale `{scale[:32]}`") from None
    if scale == 0:
        raise ParseError(path, o2, "scale must be nonzero")
    expected = width * height * 4
    if len(data) - offset != expected:
        raise ParseError(path, offset, f"expected {expected} payload bytes, found {len(data) - offset}")
    dtype = "<f4" if scale < 0 else ">f4"
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=offset).reshape(height, width)
    return np.flipud(pixels).astype(np.float32)


def write_pfm(path:PathLike, depth:np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError(f"PFM writer takes a (H, W) map, got shape {depth.shape}")
    height, width = depth.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(depth).astype("<f4").tobytes())


def read_png(path:PathLike) -> np.ndarray:
    ''' 8-bit RGB PNG to (H, W, 3) float64 in [0, 1] '''
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as e:
        raise ParseError(path, 0, f"unreadable PNG: {e}") from None
    return rgb / 255.0


def write_png(path:PathLike, image:np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    quantized = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


class CameraRecord(NamedTuple):
    camera: Camera
    d_min: float
    d_interval: float


def _numbers(path, line_offsets, lines, index, count) -> np.ndarray:
    if index >= len(lines):
        raise ParseError(path, line_offsets[-1] if line_offsets else 0, "unexpected end of camera file")
    tokens = lines[index].split()
    if len(tokens) != count:
        raise ParseError(path, line_offsets[index], f"expected {count} numbers, got `{lines[index][:40]}`")
    try:
        return np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError:
        raise ParseError(path, line_offsets[index], f"non-numeric value in `{lines[index][:40]}`") from None


def read_camera(path:PathLike, width:int, height:int) -> CameraRecord:
    ''' MVS camera text: extrinsic 4x4, intrinsic 3x3, then `d_min d_interval` '''
    text = Path(path).read_bytes().decode("ascii", errors="replace")
    lines, offsets, pos = [], [], 0
    for raw in text.splitlines(keepends=True):
        if raw.strip():
            lines.append(raw.strip())
            offsets.append(pos)
        pos += len(raw.encode("ascii", errors="replace"))
    if not lines or lines[0] != "extrinsic":
        raise ParseError(path, offsets[0] if offsets else 0, "camera file must start with `extrinsic`")
    T = np.stack([_numbers(path, offsets, lines, 1 + r, 4) for r in range(4)])
    if len(lines) < 6 or lines[5] != "intrinsic":
        raise ParseError(path, offsets[min(5, len(offsets) - 1)], "missing `intrinsic` section")
    K = np.stack([_numbers(path, offsets, lines, 6 + r, 3) for r in range(3)])
    d_min, d_interval = _numbers(path, offsets, lines, 9, 2)

    R = T[:3, :3]
    drift = np.abs(R.T @ R - np.eye(3)).max()
    if drift > ROTATION_TOL or np.linalg.det(R) < 0:
        raise ParseError(path, offsets[1], "extrinsic rotation is not a proper rotation")
    if drift > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        # short decimal files: snap to the nearest rotation
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
    try:
        cam = Camera(Intrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2]), Extrinsics(R, T[:3, 3]), width, height)
    except Exception as e:
        raise ParseError(path, offsets[6], str(e)) from None
    return CameraRecord(cam, float(d_min), float(d_interval))


def write_camera(path:PathLike, cam:Camera, d_min:float, d_interval:float) -> None:
    fmt = lambda row: " ".join(repr(float(x)) for x in row)
    rows = ["extrinsic"] + [fmt(r) for r in cam.extrinsics.matrix]
    rows += ["", "intrinsic"] + [fmt(r) for r in cam.K]
    rows += ["", fmt((d_min, d_interval))]
    Path(path).write_text("\n".join(rows) + "\n")


def write_ply(path:PathLike, points:np.ndarray, colors:np.ndarray) -> None:
    ''' Binary little-endian PLY: x, y, z float32 and red, green, blue uint8; colours in [0, 1] '''
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    rgb = np.round(np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3), 0, 1) * 255).astype(np.uint8)
    vertex = np.empty(len(points), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                          ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    vertex["x"], vertex["y"], vertex["z"] = points.T
    vertex["red"], vertex["green"], vertex["blue"] = rgb.T
    PlyData([PlyElement.describe(vertex, "vertex")], text=False, byte_order="<").write(str(path))


def read_ply(path:PathLike) -> Tuple[np.ndarray, np.ndarray]:
    ''' Points (N, 3) float32 and colours (N, 3) float64 in [0, 1] '''
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"]
        points = np.stack([v["x"], v["y"], v["z"]], axis=-1).astype(np.float32)
        colors = np.stack([v["red"], v["green"], v["blue"]], axis=-1).astype(np.float64) / 255.0
    except (PlyParseError, KeyError, ValueError, struct.error, EOFError) as e:
        raise ParseError(path, 0, f"unreadable PLY: {e}") from None
    return points, colors


def write_checkpoint(path:PathLike, arrays:Dict[str, np.ndarray]) -> None:
    ''' `RGBDP1`, then per entry: name length, name, rank, dims (u32 LE) and the f32 LE payload '''
    chunks = [CHECKPOINT_MAGIC]
    for name, array in arrays.items():
        array = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        chunks.append(array.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path:PathLike) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError(path, 0, "missing RGBDP1 magic")
    offset = len(CHECKPOINT_MAGIC)
    arrays = OrderedDict()

    def take(n:int, what:str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise ParseError(path, offset, f"truncated {what}")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    while offset < len(data):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        start = offset
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(path, start, "entry name is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = take(4 * count, f"payload of `{name}`")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return arrays
