"""Luma PSNR measurements in 2D (map pixels) and 3D (point clouds).

The 3D metric follows the symmetric nearest-neighbor convention: each
point of one cloud is matched to its geometrically nearest point in the
other (ties broken toward the lowest point index), squared luma errors are
averaged in both directions, and the worse direction sets the PSNR.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError
from .pointcloud import PointCloud

PEAK = 255.0


def rgb_to_y(r, g, b):
    """BT.709 full-range luma. Accepts scalars or arrays."""
    return 0.2126 * np.asarray(r, dtype=np.float64) \
        + 0.7152 * np.asarray(g, dtype=np.float64) \
        + 0.0722 * np.asarray(b, dtype=np.float64)


def _luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected H×W×3 image, got shape {img.shape}")
    return rgb_to_y(img[:, :, 0], img[:, :, 1], img[:, :, 2])


def mse_to_psnr(mse: float) -> float:
    return math.inf if mse == 0.0 else 10.0 * math.log10(PEAK * PEAK / mse)


def psnr_2d(ref: np.ndarray, test: np.ndarray, mask: np.ndarray) -> float:
    """Masked Y-PSNR between two RGB maps; +inf when they agree."""
    ref = np.asarray(ref)
    test = np.asarray(test)
    if ref.shape != test.shape:
        raise ContractError(f"shape mismatch: {ref.shape} vs {test.shape}")
    mask = np.asarray(mask).astype(bool)
    if mask.shape != ref.shape[:2]:
        raise ContractError(f"mask shape {mask.shape} != image {ref.shape[:2]}")
    if not mask.any():
        raise ContractError("psnr_2d needs a nonempty mask")
    diff = _luma(ref)[mask] - _luma(test)[mask]
    return mse_to_psnr(float(np.mean(diff * diff)))


def nearest_indices(query: np.ndarray, data: np.ndarray) -> np.ndarray:
    """Index of the nearest data point per query point, lowest index on ties.

    Coordinates are integers, so squared distances are exact and ties can
    be resolved exactly: candidate ties flagged by the second neighbor are
    re-checked with an integer ball query.
    """
    query = np.asarray(query, dtype=np.float64)
    data = np.asarray(data, dtype=np.float64)
    tree = cKDTree(data)
    dist, idx = tree.query(query, k=1)
    idx = idx.astype(np.int64)
    d2 = np.rint(dist * dist).astype(np.int64)
    if len(data) < 2:
        return idx
    dist2, _ = tree.query(query, k=2)
    tie = np.rint(dist2[:, 1] ** 2).astype(np.int64) == d2
    if tie.any():
        qi = np.asarray(query, dtype=np.int64)
        di = np.asarray(data, dtype=np.int64)
        for i in np.nonzero(tie)[0]:
            r = math.sqrt(d2[i]) + 0.5 / (math.sqrt(d2[i]) + 1.0)
            cand = tree.query_ball_point(query[i], r)
            delta = di[cand] - qi[i]
            exact = np.einsum("ij,ij->i", delta, delta) == d2[i]
            idx[i] = min(int(c) for c, e in zip(cand, exact) if e)
    return idx


def _directed_y_mse(src: PointCloud, dst: PointCloud) -> float:
    nn = nearest_indices(src.coords, dst.coords)
    ys = rgb_to_y(src.colors[:, 0], src.colors[:, 1], src.colors[:, 2])
    yd = rgb_to_y(dst.colors[:, 0], dst.colors[:, 1], dst.colors[:, 2])[nn]
    diff = ys - yd
    return float(np.mean(diff * diff))


def psnr_3d_color(ref: PointCloud, test: PointCloud) -> float:
    """Symmetric nearest-neighbor Y-PSNR between two clouds."""
    if len(ref) == 0 or len(test) == 0:
        raise ContractError("psnr_3d_color needs nonempty clouds")
    mse = max(_directed_y_mse(ref, test), _directed_y_mse(test, ref))
    return mse_to_psnr(mse)


@dataclass
class QualityRow:
    """One sequence×QP measurement; improvement columns are derived."""

    sequence: str
    qp: int
    psnr2d_noisy: float | None = None
    psnr2d_enhanced: float | None = None
    psnr3d_input: float | None = None
    psnr3d_output: float | None = None

    @property
    def improvement_2d(self) -> float | None:
        if self.psnr2d_noisy is None or self.psnr2d_enhanced is None:
            return None
        return self.psnr2d_enhanced - self.psnr2d_noisy

    @property
    def improvement_3d(self) -> float | None:
        if self.psnr3d_input is None or self.psnr3d_output is None:
            return None
        return self.psnr3d_output - self.psnr3d_input

    def to_json(self) -> dict:
        return {
            "sequence": self.sequence,
            "qp": self.qp,
            "psnr2d_noisy": _num_json(self.psnr2d_noisy),
            "psnr2d_enhanced": _num_json(self.psnr2d_enhanced),
            "improvement_2d": _num_json(self.improvement_2d),
            "psnr3d_input": _num_json(self.psnr3d_input),
            "psnr3d_output": _num_json(self.psnr3d_output),
            "improvement_3d": _num_json(self.improvement_3d),
        }

    @classmethod
    def from_json(cls, d: dict) -> "QualityRow":
        return cls(
            sequence=d["sequence"],
            qp=int(d["qp"]),
            psnr2d_noisy=_num_parse(d.get("psnr2d_noisy")),
            psnr2d_enhanced=_num_parse(d.get("psnr2d_enhanced")),
            psnr3d_input=_num_parse(d.get("psnr3d_input")),
            psnr3d_output=_num_parse(d.get("psnr3d_output")),
        )


def _num_json(v):
    if v is None:
        return None
    if math.isinf(v):
        return "inf"
    return v


def _num_parse(v):
    if v is None or v == "":
        return None
    if v == "inf":
        return math.inf
    return float(v)


def _fmt(v) -> str:
    if v is None:
        return ""
    if math.isinf(v):
        return "inf"
    return f"{v:.4f}"


_CSV_COLUMNS = ("sequence", "qp", "psnr2d_noisy", "psnr2d_enhanced",
                "improvement_2d", "psnr3d_input", "psnr3d_output",
                "improvement_3d")


def make_report(rows, out_dir, basename: str = "results") -> tuple[Path, Path]:
    """Emit rows as CSV and JSON; improvements are recomputed on emit."""
    rows = list(rows)
    if not rows:
        raise ContractError("make_report needs at least one row")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{basename}.csv"
    json_path = out / f"{basename}.json"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for row in rows:
            writer.writerow([
                row.sequence, row.qp,
                _fmt(row.psnr2d_noisy), _fmt(row.psnr2d_enhanced),
                _fmt(row.improvement_2d),
                _fmt(row.psnr3d_input), _fmt(row.psnr3d_output),
                _fmt(row.improvement_3d),
            ])
    json_path.write_text(json.dumps([r.to_json() for r in rows],
                                    indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
