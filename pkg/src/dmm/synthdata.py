"""Synthetic multi-label datasets, the ``DMMD`` container format and P5
graymap I/O.

Two generators are provided:

* ``shapes``: a filled triangle with four derived labels (shrunk triangle,
  the triangle itself, a pentagon cut from the completing parallelogram,
  and the full parallelogram).
* ``twomode``: two elliptical "lungs" with a bright occlusion; one label is
  the full mask and the other removes the occluded part.

Every entry is generated from its own ``(seed, index)`` stream, so datasets
are reproducible and independent of generation order.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

MAGIC = b"DMMD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIII")  # magic, version, H, W, count


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(DatasetFormatError):
    pass


@dataclass
class DmmDataset:
    inputs: List[np.ndarray]  # float32 [H, W] in [0, 1]
    labels: List[List[np.ndarray]]  # uint8 [H, W] binary, >= 1 per entry
    dims: Tuple[int, int]
    task: str = ""
    seed: int = 0

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and label lists differ in length")
        for i, (x, ys) in enumerate(zip(self.inputs, self.labels)):
            if not ys:
                raise ValueError(f"entry {i} has no labels")
            if x.shape != tuple(self.dims) or any(y.shape != tuple(self.dims) for y in ys):
                raise ValueError(f"entry {i} does not match dims {self.dims}")

    def __len__(self) -> int:
        return len(self.inputs)

    def pairs(self) -> List[Tuple[int, int]]:
        """All (entry, label) index pairs."""
        return [(i, k) for i, ys in enumerate(self.labels) for k in range(len(ys))]

    def subset(self, idx: Sequence[int]) -> "DmmDataset":
        return DmmDataset([self.inputs[i] for i in idx], [self.labels[i] for i in idx],
                          self.dims, self.task, self.seed)


# ---------------------------------------------------------------- rasterization


def rasterize_polygon(vertices, size: int) -> np.ndarray:
    """Even-odd fill: a pixel is set iff its center lies inside the polygon.

    ``vertices`` are (x, y) pairs in pixel coordinates, x along columns.
    """
    v = np.asarray(vertices, dtype=np.float64)
    c = np.arange(size) + 0.5
    px, py = np.meshgrid(c, c)  # px: column centers, py: row centers
    inside = np.zeros((size, size), dtype=bool)
    n = len(v)
    for i in range(n):
        x0, y0 = v[i]
        x1, y1 = v[(i + 1) % n]
        crosses = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (px < x_at)
    return inside


def rasterize_ellipse(center, radii, angle: float, size: int) -> np.ndarray:
    c = np.arange(size) + 0.5
    px, py = np.meshgrid(c, c)
    dx, dy = px - center[0], py - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / radii[0]
    w = (-sa * dx + ca * dy) / radii[1]
    return u * u + w * w <= 1.0


def triangle_area(p) -> float:
    (ax, ay), (bx, by), (cx, cy) = p
    return 0.5 * abs((bx - ax) * (cy - ay) - (cx - ax) * (by - ay))


# ---------------------------------------------------------------- shapes task


@dataclass
class ShapeEntry:
    triangle: np.ndarray  # 3 x 2, vertex 0 is the reflected vertex A
    parallelogram_vertex: np.ndarray
    shrink: float
    cut: Tuple[float, float]


def _sample_shape(rng: np.random.Generator, size: int, tries: int = 100) -> ShapeEntry:
    lo, hi = 0.1 * size, 0.9 * size
    for _ in range(tries):
        p = rng.uniform(lo, hi, size=(3, 2))
        if triangle_area(p) < 0.05 * size * size:
            continue
        # A is the lower-left-most vertex so the completing vertex lands upper-right
        a = int(np.argmax(p[:, 1] - p[:, 0]))
        p = np.roll(p, -a, axis=0)
        d = p[1] + p[2] - p[0]
        if not (0.0 <= d[0] <= size and 0.0 <= d[1] <= size):
            continue
        shrink = rng.uniform(0.4, 0.8)
        cut = tuple(rng.uniform(0.4, 0.7, size=2))
        return ShapeEntry(p, d, float(shrink), cut)
    raise GenerationError(f"no admissible triangle after {tries} samples")


def shape_masks(entry: ShapeEntry, size: int) -> tuple[np.ndarray, list]:
    """Input image and the four labels for one triangle."""
    a, b, c = entry.triangle
    d = entry.parallelogram_vertex
    tri = rasterize_polygon(entry.triangle, size)
    centroid = entry.triangle.mean(axis=0)
    small = rasterize_polygon(centroid + entry.shrink * (entry.triangle - centroid), size) & tri
    para = rasterize_polygon([a, b, d, c], size) | tri
    s1, s2 = entry.cut
    cut = rasterize_polygon([d, d + s1 * (b - d), d + s2 * (c - d)], size)
    pent = (para & ~cut) | tri
    labels = [m.astype(np.uint8) for m in (small, tri, pent, para)]
    return tri.astype(np.float32), labels


def gen_shapes(n: int, size: int = 32, seed: int = 0) -> DmmDataset:
    if size < 16 or n < 1:
        raise ValueError(f"gen_shapes needs size >= 16 and n >= 1, got size={size}, n={n}")
    inputs, labels = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        x, ys = shape_masks(_sample_shape(rng, size), size)
        inputs.append(x)
        labels.append(ys)
    return DmmDataset(inputs, labels, (size, size), "shapes", seed)


# ---------------------------------------------------------------- two-mode task

BACKGROUND = 0.15
TISSUE = 0.55
OCCLUSION_ALPHA = 0.7


def _twomode_entry(rng: np.random.Generator, size: int, tries: int = 100):
    lungs = np.zeros((size, size), dtype=bool)
    for side in (0.3, 0.7):
        center = (size * (side + rng.uniform(-0.04, 0.04)), size * (0.5 + rng.uniform(-0.05, 0.05)))
        radii = (size * rng.uniform(0.1, 0.15), size * rng.uniform(0.25, 0.35))
        lungs |= rasterize_ellipse(center, radii, rng.uniform(-0.2, 0.2), size)
    rows, cols = np.nonzero(lungs)
    occ = np.zeros_like(lungs)
    for _ in range(tries):
        k = rng.integers(len(rows))
        center = (cols[k] + 0.5, rows[k] + 0.5)
        radii = (size * rng.uniform(0.08, 0.15), size * rng.uniform(0.08, 0.15))
        occ = rasterize_ellipse(center, radii, rng.uniform(0, np.pi), size)
        if np.any(occ & lungs):
            break
    x = np.where(lungs, TISSUE, BACKGROUND)
    x = np.where(occ, (1 - OCCLUSION_ALPHA) * x + OCCLUSION_ALPHA, x).astype(np.float32)
    full = lungs.astype(np.uint8)
    partial = (lungs & ~occ).astype(np.uint8)
    return x, [full, partial]


def gen_twomode(n: int, size: int = 32, seed: int = 0) -> DmmDataset:
    if size < 16 or n < 1:
        raise ValueError(f"gen_twomode needs size >= 16 and n >= 1, got size={size}, n={n}")
    inputs, labels = [], []
    for i in range(n):
        x, ys = _twomode_entry(np.random.default_rng([seed, i]), size)
        inputs.append(x)
        labels.append(ys)
    return DmmDataset(inputs, labels, (size, size), "twomode", seed)


GENERATORS = {"shapes": gen_shapes, "twomode": gen_twomode}


# ---------------------------------------------------------------- DMMD format


def dumps_dataset(ds: DmmDataset) -> bytes:
    h, w = ds.dims
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, h, w, len(ds)))
    tag = ds.task.encode("utf-8")
    buf.write(struct.pack("<H", len(tag)) + tag)
    buf.write(struct.pack("<q", ds.seed))
    for x, ys in zip(ds.inputs, ds.labels):
        buf.write(struct.pack("<I", len(ys)))
        for y in ys:
            buf.write(np.packbits(y.reshape(-1).astype(bool), bitorder="little").tobytes())
        buf.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_dataset(raw: bytes) -> DmmDataset:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise DatasetFormatError(f"truncated payload while reading {what}", pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    magic, version, h, w, count = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported DMMD version {version}", 4)
    (tag_len,) = struct.unpack("<H", take(2, "task tag length"))
    task = take(tag_len, "task tag").decode("utf-8")
    (seed,) = struct.unpack("<q", take(8, "seed"))
    npix = h * w
    nbytes = (npix + 7) // 8
    inputs, labels = [], []
    for i in range(count):
        (nlab,) = struct.unpack("<I", take(4, f"label count of entry {i}"))
        if nlab == 0:
            raise DatasetFormatError(f"entry {i} declares no labels", pos - 4)
        ys = []
        for _ in range(nlab):
            bits = np.frombuffer(take(nbytes, f"mask of entry {i}"), dtype=np.uint8)
            ys.append(np.unpackbits(bits, count=npix, bitorder="little").reshape(h, w))
        x = np.frombuffer(take(4 * npix, f"input of entry {i}"), dtype="<f4").reshape(h, w)
        inputs.append(x.astype(np.float32))
        labels.append(ys)
    if pos != len(raw):
        raise DatasetFormatError(f"{len(raw) - pos} trailing bytes", pos)
    return DmmDataset(inputs, labels, (h, w), task, seed)


def save_dataset(ds: DmmDataset, path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path) -> DmmDataset:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset file not found: {p}")
    return loads_dataset(p.read_bytes())


# ---------------------------------------------------------------- P5 graymaps


def write_pgm(path, image) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim != 2:
        raise ValueError(f"graymap needs a 2-D image, got shape {img.shape}")
    pixels = np.round(img * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) graymap as floats in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError("truncated graymap header", pos)
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DatasetFormatError(f"not a P5 graymap (magic {tokens[0]!r})", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetFormatError("malformed graymap header", pos) from None
    pos += 1
    depth = 2 if maxval > 255 else 1
    body = raw[pos:pos + w * h * depth]
    if len(body) != w * h * depth:
        raise DatasetFormatError("truncated graymap pixels", pos + len(body))
    arr = np.frombuffer(body, dtype=">u2" if depth == 2 else np.uint8).reshape(h, w)
    return arr.astype(np.float32) / maxval

