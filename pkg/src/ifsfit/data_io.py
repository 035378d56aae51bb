"""Reading and writing images, IDX digit files, and synthetic fractal targets."""

from __future__ import annotations

import gzip
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFile, DegenerateSystem, NonFiniteTrajectory, UnsupportedFormat
from .ifs import (
    FractalSystem,
    IndexSequence,
    fit_to_canvas,
    iterate_ifs,
    random_system,
    sample_index_sequence,
    sample_start_points,
)
from .render import Canvas, rasterize_hard

try:
    from PIL import Image
except ImportError:  # pragma: no cover - Pillow ships in every supported environment
    Image = None

PNG_SUPPORTED = Image is not None
PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
IDX_UBYTE_IMAGES = 0x00000803
IDX_UBYTE_LABELS = 0x00000801
MAX_GENERATION_RETRIES = 100


@dataclass
class TargetImage:
    canvas: Canvas
    source: str

    @property
    def pixels(self) -> np.ndarray:
        return self.canvas.pixels


@dataclass
class FractalTarget:
    """A synthetic target together with everything that produced it."""

    image: TargetImage
    system: FractalSystem
    sequence: IndexSequence
    v0: np.ndarray

    def __iter__(self):
        # unpacks as (image, system)
        return iter((self.image, self.system))


# -- PGM ---------------------------------------------------------------------

_PGM_HEADER = re.compile(rb"(P[25])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _strip_comments(data: bytes) -> bytes:
    return re.sub(rb"#[^\n]*", b"", data)


def read_pgm(path) -> np.ndarray:
    """Decode a P2 or P5 PGM into floats in [0, 1]."""
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        if data[:2] in (b"P2", b"P5"):
            raise CorruptFile(f"{path}: malformed PGM header")
        raise UnsupportedFormat(f"{path}: not a PGM file")
    kind, width, height, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 65536 or width < 1 or height < 1:
        raise CorruptFile(f"{path}: bad PGM dimensions or maxval")
    body = data[m.end():]
    n = width * height
    if kind == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(body) < n * dtype.itemsize:
            raise CorruptFile(f"{path}: truncated PGM raster")
        values = np.frombuffer(body, dtype=dtype, count=n).astype(float)
    else:
        tokens = _strip_comments(body).split()
        if len(tokens) < n:
            raise CorruptFile(f"{path}: truncated PGM raster")
        try:
            values = np.array([int(t) for t in tokens[:n]], dtype=float)
        except ValueError as err:
            raise CorruptFile(f"{path}: non-integer sample in PGM") from err
    if values.max(initial=0) > maxval:
        raise CorruptFile(f"{path}: sample exceeds maxval")
    return values.reshape(height, width) / maxval


def _to_bytes(pixels) -> np.ndarray:
    return np.rint(np.clip(np.asarray(pixels, dtype=float), 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path, pixels, binary: bool = True) -> None:
    """Write values in [0, 1] as an 8-bit PGM (P5 if ``binary`` else P2)."""
    img = _to_bytes(pixels.pixels if isinstance(pixels, Canvas) else pixels)
    h, w = img.shape
    if binary:
        Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
    else:
        rows = "\n".join(" ".join(str(v) for v in row) for row in img)
        Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n")


# -- PNG / IDX ---------------------------------------------------------------

def read_png(path) -> np.ndarray:
    if not PNG_SUPPORTED:
        raise UnsupportedFormat("PNG support requires Pillow")
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=float) / 65535.0
            else:
                arr = np.asarray(im.convert("L"), dtype=float) / 255.0
    except (OSError, SyntaxError) as err:
        raise CorruptFile(f"{path}: {err}") from err
    return arr


def _open_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file (images ``0x803`` or labels ``0x801``), optionally gzipped."""
    raw = _open_maybe_gzip(path)
    if len(raw) < 4:
        raise CorruptFile(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08:
        raise UnsupportedFormat(f"{path}: IDX magic {magic:#010x} is not an unsigned-byte array")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise CorruptFile(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise CorruptFile(f"{path}: truncated IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    """``(count, rows, cols)`` intensities in [0, 1]."""
    arr = read_idx(path)
    if arr.ndim != 3:
        raise UnsupportedFormat(f"{path}: expected magic {IDX_UBYTE_IMAGES:#010x} (3-d image array)")
    return arr.astype(float) / 255.0


# -- targets -----------------------------------------------------------------

def resize_nearest(img: np.ndarray, h: int, w: int) -> np.ndarray:
    src_h, src_w = img.shape
    if (src_h, src_w) == (h, w):
        return img.copy()
    rows = np.minimum(((np.arange(h) + 0.5) * src_h / h).astype(int), src_h - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * src_w / w).astype(int), src_w - 1)
    return img[np.ix_(rows, cols)]


def binarize(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(img) >= threshold).astype(float)


def target_from_array(img, h: int = 32, w: int = 32, threshold: float = 0.5, source: str = "array") -> TargetImage:
    return TargetImage(Canvas(binarize(resize_nearest(np.asarray(img, dtype=float), h, w), threshold)), source)


def read_image(path) -> np.ndarray:
    path = Path(path)
    head = path.read_bytes()[:8]
    if head[:2] in (b"P2", b"P5"):
        return read_pgm(path)
    if head == PNG_MAGIC:
        return read_png(path)
    raise UnsupportedFormat(f"{path}: unrecognised image format")


def load_target(path, h: int = 32, w: int = 32, threshold: float = 0.5) -> TargetImage:
    """Decode a PGM/PNG, resize by nearest neighbour and binarize."""
    return target_from_array(read_image(path), h, w, threshold, source=str(path))


def load_idx_target(path, index: int, h: int = 32, w: int = 32, threshold: float = 0.5) -> TargetImage:
    images = read_idx_images(path)
    return target_from_array(images[index], h, w, threshold, source=f"{path}#{index}")


def generate_fractaldb_target(seed: int, h: int = 32, w: int = 32, n: int = 10, t_len: int = 300) -> FractalTarget:
    """Sample a random system and hard-rasterize one chaos-game run of it."""
    if n < 1 or t_len < 1:
        raise ValueError("n and t_len must be >= 1")
    rng = np.random.default_rng(seed)
    last = None
    for _ in range(MAX_GENERATION_RETRIES):
        try:
            system = random_system(rng, n)
            seq = sample_index_sequence(system, t_len, rng)
            v0 = sample_start_points(rng, 1)[0]
            traj = iterate_ifs(system, seq, v0)
        except (DegenerateSystem, NonFiniteTrajectory) as err:
            last = err
            continue
        pix, _ = fit_to_canvas(traj.points, h, w)
        image = TargetImage(rasterize_hard(pix, h, w), source=f"fractaldb:seed={seed}")
        return FractalTarget(image, system, seq, v0)
    raise DegenerateSystem(f"no usable system after {MAX_GENERATION_RETRIES} attempts") from last
