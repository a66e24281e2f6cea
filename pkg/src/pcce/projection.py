"""Deterministic 3D→2D projection and color back-projection.

A simplified patch projector: repeated multi-pass axial capture. Per pass
and per axis, each (u,v) cell of the not-yet-assigned points contributes
its minimum-coordinate point to a "near" patch and the deepest point
within the surface thickness of that minimum to a "far" patch. Patches are
stacked vertically into one atlas with block-aligned origins. Geometry is
carried losslessly: every point is either mapped to exactly one pixel or
listed as a leftover, so colors round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ATLAS_FORMAT_VERSION, pngio
from .errors import CapacityError, ContractError, FormatError, ValidationError
from .pointcloud import PointCloud

NONE_INDEX = np.uint32(0xFFFFFFFF)

_AXES = ("X", "Y", "Z")
# (u, v) are the two non-projection coordinates in x,y,z order.
_UV_OF_AXIS = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


@dataclass(frozen=True)
class ProjectionConfig:
    surface_thickness: int = 4
    max_passes: int = 4
    block_align: int = 16
    atlas_max_dim: int = 8192

    def __post_init__(self):
        for name in ("surface_thickness", "max_passes", "block_align", "atlas_max_dim"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")


@dataclass
class PatchPlacement:
    axis: str                    # "X" | "Y" | "Z"
    direction: str               # "near" | "far"
    pass_index: int
    atlas_origin: tuple[int, int]       # (u0, v0) in atlas pixels
    source_box: tuple[tuple[int, int, int], tuple[int, int, int]]  # min, max corner
    depth_offset: int

    def to_json(self) -> dict:
        return {
            "axis": self.axis,
            "direction": self.direction,
            "pass_index": self.pass_index,
            "atlas_origin": list(self.atlas_origin),
            "source_box": [list(self.source_box[0]), list(self.source_box[1])],
            "depth_offset": self.depth_offset,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PatchPlacement":
        return cls(
            axis=d["axis"],
            direction=d["direction"],
            pass_index=d["pass_index"],
            atlas_origin=tuple(d["atlas_origin"]),
            source_box=(tuple(d["source_box"][0]), tuple(d["source_box"][1])),
            depth_offset=d["depth_offset"],
        )


@dataclass
class AtlasBundle:
    width: int
    height: int
    occupancy: np.ndarray        # H×W bool
    geometry: np.ndarray         # H×W uint16
    attribute: np.ndarray        # H×W×3 uint8
    correspondence: np.ndarray   # H×W uint32, NONE_INDEX where unoccupied
    leftovers: np.ndarray        # point indices never captured
    placements: list[PatchPlacement]
    source_point_count: int
    block_align: int = 16

    def validate(self) -> None:
        h, w = self.height, self.width
        if self.occupancy.shape != (h, w) or self.geometry.shape != (h, w) \
                or self.correspondence.shape != (h, w) \
                or self.attribute.shape != (h, w, 3):
            raise ValidationError("atlas map shapes disagree")
        if w % self.block_align or h % self.block_align:
            raise ValidationError("atlas dimensions not block-aligned")
        occ = self.occupancy
        if not np.array_equal(occ, self.correspondence != NONE_INDEX):
            raise ValidationError("occupancy does not match correspondence")
        mapped = self.correspondence[occ]
        allidx = np.concatenate([mapped.astype(np.int64),
                                 np.asarray(self.leftovers, dtype=np.int64)])
        if len(allidx) != self.source_point_count:
            raise ValidationError(
                f"{len(allidx)} mapped+leftover indices for "
                f"{self.source_point_count} points")
        if len(np.unique(allidx)) != len(allidx):
            raise ValidationError("point index mapped more than once")
        if len(allidx) and (allidx.min() < 0 or allidx.max() >= self.source_point_count):
            raise ValidationError("point index out of range")


def _capture_cells(coords, unassigned_idx, axis, thickness):
    """One near+far capture over the currently unassigned points.

    Returns (near_idx, far_idx): point indices taken by the near map (cell
    minimum along the axis) and the far map (deepest remaining point within
    `thickness` of that minimum).
    """
    ua, va = _UV_OF_AXIS[axis]
    pts = coords[unassigned_idx]
    u, v, d = pts[:, ua], pts[:, va], pts[:, axis]
    # Sort by (u, v, depth); cell boundaries then give the near point directly.
    order = np.lexsort((d, v, u))
    su, sv, sd = u[order], v[order], d[order]
    sidx = unassigned_idx[order]
    new_cell = np.ones(len(order), dtype=bool)
    if len(order) > 1:
        new_cell[1:] = (su[1:] != su[:-1]) | (sv[1:] != sv[:-1])
    cell_start = np.nonzero(new_cell)[0]
    near_pos = cell_start
    near_idx = sidx[near_pos]

    # Far: deepest point in the cell with depth − near_depth ≤ thickness,
    # excluding the near point itself.
    cell_of = np.cumsum(new_cell) - 1
    near_depth = sd[near_pos][cell_of]
    eligible = (sd - near_depth <= thickness)
    eligible[near_pos] = False
    if not eligible.any():
        return near_idx, sidx[:0]
    pos = np.arange(len(order))
    far_pos_per_cell = np.full(len(cell_start), -1, dtype=np.int64)
    np.maximum.at(far_pos_per_cell, cell_of[eligible], pos[eligible])
    far_pos = far_pos_per_cell[far_pos_per_cell >= 0]
    return near_idx, sidx[far_pos]


def _align_up(v: int, a: int) -> int:
    return -(-v // a) * a


def project(pc: PointCloud, cfg: ProjectionConfig = ProjectionConfig()) -> AtlasBundle:
    """Project a cloud into occupancy/geometry/attribute maps.

    Deterministic: passes run in order, axes X→Y→Z within a pass, near
    before far, and patches are stacked top to bottom in capture order at
    block-aligned origins. Every point lands in exactly one pixel or in the
    leftover list.
    """
    if len(pc) == 0:
        raise ContractError("cannot project an empty point cloud")
    coords = pc.coords.astype(np.int64)
    n = len(pc)

    unassigned = np.ones(n, dtype=bool)
    patches = []  # (axis, direction, pass_index, point indices)
    for pass_index in range(cfg.max_passes):
        if not unassigned.any():
            break
        for axis in range(3):
            idx = np.nonzero(unassigned)[0]
            if len(idx) == 0:
                break
            near_idx, far_idx = _capture_cells(coords, idx, axis,
                                               cfg.surface_thickness)
            if len(near_idx):
                patches.append((axis, "near", pass_index, near_idx))
                unassigned[near_idx] = False
            if len(far_idx):
                patches.append((axis, "far", pass_index, far_idx))
                unassigned[far_idx] = False
    leftovers = np.nonzero(unassigned)[0].astype(np.int64)

    # Vertical shelf packing at block-aligned origins.
    align = cfg.block_align
    placements: list[PatchPlacement] = []
    layouts = []
    v_cursor = 0
    width = align
    for axis, direction, pass_index, pidx in patches:
        ua, va = _UV_OF_AXIS[axis]
        pu = coords[pidx, ua]
        pv = coords[pidx, va]
        pd = coords[pidx, axis]
        u0, v0 = int(pu.min()), int(pv.min())
        box_min = tuple(int(coords[pidx, a].min()) for a in range(3))
        box_max = tuple(int(coords[pidx, a].max()) for a in range(3))
        pw = int(pu.max()) - u0 + 1
        ph = int(pv.max()) - v0 + 1
        depth_offset = int(pd.min())
        if int(pd.max()) - depth_offset > 0xFFFF:
            raise CapacityError("patch depth range exceeds 16-bit geometry map")
        origin = (0, v_cursor)
        placements.append(PatchPlacement(
            axis=_AXES[axis], direction=direction, pass_index=pass_index,
            atlas_origin=origin, source_box=(box_min, box_max),
            depth_offset=depth_offset))
        layouts.append((pidx, pu - u0, pv - v0, pd - depth_offset, origin))
        width = max(width, _align_up(pw, align))
        v_cursor = _align_up(v_cursor + ph, align)
    height = max(v_cursor, align)
    if width > cfg.atlas_max_dim or height > cfg.atlas_max_dim:
        raise CapacityError(
            f"atlas {width}×{height} exceeds max dimension {cfg.atlas_max_dim}")

    occupancy = np.zeros((height, width), dtype=bool)
    geometry = np.zeros((height, width), dtype=np.uint16)
    attribute = np.zeros((height, width, 3), dtype=np.uint8)
    correspondence = np.full((height, width), NONE_INDEX, dtype=np.uint32)
    for pidx, lu, lv, ld, (au, av) in layouts:
        rows = av + lv
        colsv = au + lu
        occupancy[rows, colsv] = True
        geometry[rows, colsv] = ld.astype(np.uint16)
        attribute[rows, colsv] = pc.colors[pidx]
        correspondence[rows, colsv] = pidx.astype(np.uint32)

    bundle = AtlasBundle(
        width=width, height=height, occupancy=occupancy, geometry=geometry,
        attribute=attribute, correspondence=correspondence,
        leftovers=leftovers, placements=placements,
        source_point_count=n, block_align=align)
    bundle.validate()
    return bundle


def back_project(pc: PointCloud, atlas: AtlasBundle,
                 enhanced_attribute: np.ndarray) -> PointCloud:
    """Recolor the cloud from an (enhanced) attribute map.

    Coordinates and point order are untouched; points with a pixel take
    that pixel's color, leftovers keep their original color.
    """
    enhanced_attribute = np.asarray(enhanced_attribute)
    if enhanced_attribute.shape != atlas.attribute.shape:
        raise ContractError(
            f"attribute map shape {enhanced_attribute.shape} != atlas "
            f"{atlas.attribute.shape}")
    if atlas.source_point_count != len(pc):
        raise ContractError(
            f"atlas was built from {atlas.source_point_count} points, "
            f"cloud has {len(pc)}")
    colors = pc.colors.copy()
    occ = atlas.occupancy
    colors[atlas.correspondence[occ].astype(np.int64)] = enhanced_attribute[occ]
    return PointCloud(pc.coords.copy(), colors, bit_depth=pc.bit_depth)


def render_ortho(pc: PointCloud, axis: str, out_path) -> None:
    """Orthographic dump: nearest point along the axis wins each pixel."""
    if len(pc) == 0:
        raise ContractError("cannot render an empty point cloud")
    axis_i = {"X": 0, "Y": 1, "Z": 2}.get(str(axis).upper())
    if axis_i is None:
        raise ContractError(f"axis must be X, Y or Z, got {axis!r}")
    ua, va = _UV_OF_AXIS[axis_i]
    u = pc.coords[:, ua].astype(np.int64)
    v = pc.coords[:, va].astype(np.int64)
    d = pc.coords[:, axis_i].astype(np.int64)
    img = np.zeros((int(v.max()) + 1, int(u.max()) + 1, 3), dtype=np.uint8)
    # Z-buffer: group by pixel with depth ascending, keep the first of each.
    order = np.lexsort((d, u, v))
    sv, su = v[order], u[order]
    first = np.ones(len(order), dtype=bool)
    if len(order) > 1:
        first[1:] = (sv[1:] != sv[:-1]) | (su[1:] != su[:-1])
    img[sv[first], su[first]] = pc.colors[order][first]
    pngio.write_rgb(img, out_path)


def save_atlas(atlas: AtlasBundle, out_dir) -> None:
    """Write the on-disk atlas: PNG maps, raw correspondence, JSON header."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pngio.write_mask(atlas.occupancy, out / "occupancy.png")
    pngio.write_depth16(atlas.geometry, out / "geometry.png")
    pngio.write_rgb(atlas.attribute, out / "attribute.png")
    (out / "correspondence.bin").write_bytes(
        atlas.correspondence.astype("<u4").tobytes())
    meta = {
        "format_version": ATLAS_FORMAT_VERSION,
        "width": atlas.width,
        "height": atlas.height,
        "block_align": atlas.block_align,
        "source_point_count": atlas.source_point_count,
        "leftovers": np.asarray(atlas.leftovers).tolist(),
        "placements": [p.to_json() for p in atlas.placements],
    }
    (out / "atlas.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_atlas(in_dir) -> AtlasBundle:
    src = Path(in_dir)
    meta_path = src / "atlas.json"
    if not meta_path.exists():
        raise FormatError(f"{src}: missing atlas.json")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != ATLAS_FORMAT_VERSION:
        raise FormatError(
            f"{meta_path}: unsupported atlas format version "
            f"{meta.get('format_version')!r}")
    h, w = meta["height"], meta["width"]
    occupancy = pngio.read_mask(src / "occupancy.png")
    geometry = pngio.read_depth16(src / "geometry.png")
    attribute = pngio.read_rgb(src / "attribute.png")
    raw = (src / "correspondence.bin").read_bytes()
    if len(raw) != h * w * 4:
        raise FormatError(
            f"{src}/correspondence.bin has {len(raw)} bytes, expected {h * w * 4}")
    correspondence = np.frombuffer(raw, dtype="<u4").reshape(h, w).astype(np.uint32)
    bundle = AtlasBundle(
        width=w, height=h, occupancy=occupancy, geometry=geometry,
        attribute=attribute, correspondence=correspondence,
        leftovers=np.asarray(meta["leftovers"], dtype=np.int64),
        placements=[PatchPlacement.from_json(p) for p in meta["placements"]],
        source_point_count=meta["source_point_count"],
        block_align=meta["block_align"])
    bundle.validate()
    return bundle
