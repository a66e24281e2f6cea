"""Voxelized colored point clouds: PLY I/O, validation, synthetic content.

A cloud is an ordered list of unique integer voxel coordinates with 8-bit
RGB colors. Point order is significant and preserved across save/load.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, UnsupportedContentError, ValidationError

_COORD_TYPES = {
    "int": np.int32,
    "int32": np.int32,
    "uint": np.uint32,
    "uint32": np.uint32,
    "float": np.float32,
    "float32": np.float32,
    "double": np.float64,
    "float64": np.float64,
}
_COLOR_TYPES = {"uchar": np.uint8, "uint8": np.uint8}
_SIZES = {
    "char": 1, "uchar": 1, "int8": 1, "uint8": 1,
    "short": 2, "ushort": 2, "int16": 2, "uint16": 2,
    "int": 4, "uint": 4, "int32": 4, "uint32": 4, "float": 4, "float32": 4,
    "double": 8, "float64": 8,
}
_NP_BY_SIZE = {1: "u1", 2: "u2", 4: "u4", 8: "u8"}

SYNTH_KINDS = ("cube_shell", "sphere_shell", "gradient_slab")


@dataclass(eq=False)
class PointCloud:
    """Ordered voxel points with colors.

    coords: (N, 3) int32, each in [0, 2**bit_depth - 1], rows unique.
    colors: (N, 3) uint8.
    """

    coords: np.ndarray
    colors: np.ndarray
    bit_depth: int = field(default=10)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int32)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.uint8)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValidationError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.colors.shape != self.coords.shape:
            raise ValidationError(
                f"colors shape {self.colors.shape} != coords shape {self.coords.shape}")
        if len(self.coords) and self.coords.min() < 0:
            raise ValidationError("negative voxel coordinate")
        if len(self.coords) and self.coords.max() >= (1 << self.bit_depth):
            raise ValidationError(
                f"coordinate {self.coords.max()} exceeds {self.bit_depth}-bit grid")
        if len(self.coords) != len(_unique_rows(self.coords)):
            raise ValidationError("duplicate voxel coordinates")

    def __len__(self) -> int:
        return len(self.coords)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.bit_depth == other.bit_depth
            and self.coords.shape == other.coords.shape
            and bool(np.array_equal(self.coords, other.coords))
            and bool(np.array_equal(self.colors, other.colors))
        )


def _unique_rows(a: np.ndarray) -> np.ndarray:
    view = np.ascontiguousarray(a).view([("", a.dtype)] * a.shape[1])
    return np.unique(view)


def infer_bit_depth(coords: np.ndarray) -> int:
    """Smallest b with all coordinates < 2**b, floored at 8."""
    if len(coords) == 0 or coords.max() <= 0:
        return 8
    return max(8, int(coords.max()).bit_length())


def _dedup_first(coords: np.ndarray, colors: np.ndarray):
    view = np.ascontiguousarray(coords).view([("", coords.dtype)] * 3).ravel()
    _, first = np.unique(view, return_index=True)
    if len(first) == len(coords):
        return coords, colors
    keep = np.sort(first)
    warnings.warn(
        f"dropped {len(coords) - len(keep)} duplicate-coordinate points "
        "(first occurrence kept)")
    return coords[keep], colors[keep]


def _parse_header(raw: bytes, path):
    """Returns (is_binary, vertex_count, property list, data offset)."""
    end = raw.find(b"end_header\n")
    if end < 0:
        raise FormatError(f"{path}: missing end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    offset = end + len(b"end_header\n")

    if not header or header[0].strip() != "ply":
        raise FormatError(f"{path}: first line must be 'ply', got {header[0]!r}")
    fmt = None
    vertex_count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if line.strip() == "format ascii 1.0":
                fmt = "ascii"
            elif line.strip() == "format binary_little_endian 1.0":
                fmt = "binary"
            else:
                raise FormatError(f"{path}: unsupported format line {line!r}")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError(f"{path}: malformed element line {line!r}")
            if tok[1] == "vertex":
                try:
                    vertex_count = int(tok[2])
                except ValueError:
                    raise FormatError(f"{path}: bad vertex count in {line!r}") from None
                in_vertex = True
            else:
                if vertex_count is None:
                    raise UnsupportedContentError(
                        f"{path}: element {tok[1]!r} before vertex is not supported")
                in_vertex = False
        elif tok[0] == "property":
            if not in_vertex:
                continue
            if tok[1] == "list":
                raise UnsupportedContentError(f"{path}: list properties not supported")
            if len(tok) != 3:
                raise FormatError(f"{path}: malformed property line {line!r}")
            if tok[1] not in _SIZES:
                raise FormatError(f"{path}: unknown property type in {line!r}")
            props.append((tok[1], tok[2]))
        else:
            raise FormatError(f"{path}: unrecognized header line {line!r}")
    if fmt is None:
        raise FormatError(f"{path}: missing format line")
    if vertex_count is None:
        raise FormatError(f"{path}: missing 'element vertex' line")
    return fmt == "binary", vertex_count, props, offset


def _property_columns(props, path):
    names = [name for _, name in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise FormatError(f"{path}: missing coordinate property {axis!r}")
    if names.index("x") + 1 != names.index("y") or names.index("y") + 1 != names.index("z"):
        raise FormatError(f"{path}: coordinate properties must appear in x,y,z order")
    for c in ("red", "green", "blue"):
        if c not in names:
            raise UnsupportedContentError(f"{path}: missing color property {c!r}")
    if names.index("red") + 1 != names.index("green") or \
            names.index("green") + 1 != names.index("blue"):
        raise UnsupportedContentError(
            f"{path}: color properties must appear in red,green,blue order")
    for _, name in props:
        ptype = dict((n, t) for t, n in props)[name]
        if name in ("x", "y", "z") and ptype not in _COORD_TYPES:
            raise UnsupportedContentError(
                f"{path}: coordinate property {name!r} has unsupported type {ptype!r}")
        if name in ("red", "green", "blue") and ptype not in _COLOR_TYPES:
            raise UnsupportedContentError(
                f"{path}: color property {name!r} must be uchar, got {ptype!r}")
    return names


def _coords_to_int(arr: np.ndarray, path) -> np.ndarray:
    if np.issubdtype(arr.dtype, np.floating):
        if not np.all(arr == np.floor(arr)):
            raise ValidationError(f"{path}: float coordinates with fractional parts")
    out = arr.astype(np.int64)
    if len(out) and out.min() < 0:
        raise ValidationError(f"{path}: negative coordinates are not supported")
    return out.astype(np.int32)


def load_ply(path) -> PointCloud:
    """Parse an ascii or binary little-endian PLY with xyz + RGB vertices.

    Duplicate coordinates are dropped (first occurrence wins, with a
    warning). bit_depth is inferred from the coordinate range.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    binary, n, props, offset = _parse_header(raw, path)
    names = _property_columns(props, path)
    body = raw[offset:]

    if binary:
        fields = [(f"f{i}", "<" + ("f4" if t in ("float", "float32")
                                   else "f8" if t in ("double", "float64")
                                   else ("i4" if t in ("int", "int32")
                                         else _NP_BY_SIZE[_SIZES[t]])))
                  for i, (t, _) in enumerate(props)]
        rec = np.dtype(fields)
        need = rec.itemsize * n
        if len(body) < need:
            raise FormatError(f"{path}: truncated binary body "
                              f"({len(body)} bytes, need {need})")
        table = np.frombuffer(body[:need], dtype=rec)
        col = {name: table[f"f{i}"] for i, name in enumerate(names)}
    else:
        text = body.decode("ascii", errors="replace").split()
        ncol = len(names)
        if len(text) < n * ncol:
            raise FormatError(f"{path}: truncated ascii body "
                              f"({len(text)} values, need {n * ncol})")
        flat = np.array(text[: n * ncol], dtype=np.float64).reshape(n, ncol)
        col = {name: flat[:, i] for i, name in enumerate(names)}

    coords = np.stack([_coords_to_int(np.asarray(col[a]), path) for a in "xyz"], axis=1)
    colors = np.stack([np.asarray(col[c]).astype(np.uint8) for c in ("red", "green", "blue")],
                      axis=1)
    coords, colors = _dedup_first(coords, colors)
    return PointCloud(coords, colors, bit_depth=infer_bit_depth(coords))


def save_ply(pc: PointCloud, path, binary: bool = True) -> None:
    """Write a canonical PLY: int32 xyz + uchar RGB, one vertex element."""
    coord_type = "int"
    header = (
        "ply\n"
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n"
        f"element vertex {len(pc)}\n"
        + "".join(f"property {coord_type} {a}\n" for a in "xyz")
        + "".join(f"property uchar {c}\n" for c in ("red", "green", "blue"))
        + "end_header\n"
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            if binary:
                rec = np.dtype([("x", "<i4"), ("y", "<i4"), ("z", "<i4"),
                                ("r", "u1"), ("g", "u1"), ("b", "u1")])
                table = np.empty(len(pc), dtype=rec)
                for i, f in enumerate(("x", "y", "z")):
                    table[f] = pc.coords[:, i]
                for i, f in enumerate(("r", "g", "b")):
                    table[f] = pc.colors[:, i]
                fh.write(table.tobytes())
            else:
                lines = [
                    f"{x} {y} {z} {r} {g} {b}\n"
                    for (x, y, z), (r, g, b) in zip(pc.coords.tolist(), pc.colors.tolist())
                ]
                fh.write("".join(lines).encode("ascii"))
    except OSError as exc:
        raise OSError(f"failed to write PLY to {path}: {exc}") from exc


def _smooth_color_field(coords: np.ndarray, bit_depth: int, seed: int) -> np.ndarray:
    """Smooth per-point color: low-frequency random cosines plus mild noise.

    The spatial pattern depends only on the seed, so two clouds with the
    same coordinates and different seeds differ in color alone.
    """
    rng = np.random.default_rng(seed)
    span = float(1 << bit_depth)
    p = coords.astype(np.float64) / span
    channels = []
    for _ in range(3):
        freq = rng.uniform(1.0, 3.0, size=(2, 3))
        phase = rng.uniform(0.0, 2 * math.pi, size=2)
        amp = rng.uniform(40.0, 70.0, size=2)
        base = rng.uniform(90.0, 160.0)
        v = base + sum(a * np.cos(2 * math.pi * (p @ f) + ph)
                       for a, f, ph in zip(amp, freq, phase))
        channels.append(v)
    rgb = np.stack(channels, axis=1)
    rgb += rng.normal(0.0, 2.0, size=rgb.shape)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def synth_cloud(kind: str, size: int, seed: int = 0) -> PointCloud:
    """Deterministic surface-like test cloud.

    cube_shell: all voxels of [0, size)^3 minus the interior.
    sphere_shell: voxels within half a voxel of the inscribed sphere.
    gradient_slab: a one-voxel-thick gently waved heightfield plane.
    """
    if size < 2:
        raise ValidationError(f"synth size must be >= 2, got {size}")
    if kind == "cube_shell":
        g = np.arange(size)
        x, y, z = np.meshgrid(g, g, g, indexing="ij")
        interior = ((x > 0) & (x < size - 1) & (y > 0) & (y < size - 1)
                    & (z > 0) & (z < size - 1))
        coords = np.stack([x[~interior], y[~interior], z[~interior]], axis=1)
    elif kind == "sphere_shell":
        g = np.arange(size)
        x, y, z = np.meshgrid(g, g, g, indexing="ij")
        c = (size - 1) / 2.0
        r = (size - 1) / 2.0
        d = np.sqrt((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2)
        shell = np.abs(d - r) <= 0.5
        coords = np.stack([x[shell], y[shell], z[shell]], axis=1)
    elif kind == "gradient_slab":
        g = np.arange(size)
        x, y = np.meshgrid(g, g, indexing="ij")
        zbase = size // 2
        wave = np.rint(1.5 * np.sin(2 * math.pi * x / size)
                       + 1.5 * np.cos(2 * math.pi * y / size)).astype(np.int64)
        z = np.clip(zbase + wave, 0, size - 1)
        coords = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    else:
        raise ValidationError(f"unknown synth kind {kind!r}; choose from {SYNTH_KINDS}")

    coords = np.ascontiguousarray(coords, dtype=np.int32)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    coords = coords[order]
    bit_depth = infer_bit_depth(coords)
    colors = _smooth_color_field(coords, bit_depth, seed)
    return PointCloud(coords, colors, bit_depth=bit_depth)
