"""Deterministic stand-in for intra video compression of attribute maps.

Blockwise orthonormal DCT with uniform scalar quantization in YCbCr,
using the standard qp→qstep law so the usual rate points (QP 42/37/32)
map to meaningfully spaced distortion levels. A hook for shelling out to
a real external encoder is provided; it never falls back silently.
"""

from __future__ import annotations

import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from .errors import ContractError, ExternalToolError
from . import pngio

# BT.709 full-range analysis coefficients.
_KR, _KG, _KB = 0.2126, 0.7152, 0.0722


@dataclass(frozen=True)
class CodecConfig:
    qp: int
    block: int = 8
    color_space: str = "ycbcr709_full"
    chroma_qp_offset: int = 0

    def __post_init__(self):
        if not 0 <= self.qp <= 51:
            raise ContractError(f"qp must be in [0, 51], got {self.qp}")
        if self.block not in (4, 8, 16):
            raise ContractError(f"block must be 4, 8 or 16, got {self.block}")
        if self.color_space != "ycbcr709_full":
            raise ContractError(f"unsupported color space {self.color_space!r}")
        if not 0 <= self.qp + self.chroma_qp_offset <= 51:
            raise ContractError("chroma qp out of [0, 51]")


def qstep(qp: int) -> float:
    """Quantization step 2**((qp - 4) / 6); doubles every 6 QP."""
    if not 0 <= qp <= 51:
        raise ContractError(f"qp must be in [0, 51], got {qp}")
    return float(2.0 ** ((qp - 4) / 6.0))


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """uint8 RGB → float YCbCr (BT.709 full range, chroma centered at 128)."""
    rgb = rgb.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = (b - y) / (2.0 * (1.0 - _KB)) + 128.0
    cr = (r - y) / (2.0 * (1.0 - _KR)) + 128.0
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    """float YCbCr → uint8 RGB with clipping."""
    y, cb, cr = ycc[..., 0], ycc[..., 1], ycc[..., 2]
    r = y + 2.0 * (1.0 - _KR) * (cr - 128.0)
    b = y + 2.0 * (1.0 - _KB) * (cb - 128.0)
    g = (y - _KR * r - _KB * b) / _KG
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _to_blocks(plane: np.ndarray, n: int) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // n, n, w // n, n).transpose(0, 2, 1, 3)


def _from_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    n = blocks.shape[-1]
    return blocks.transpose(0, 2, 1, 3).reshape(h, w)


def _quantize_plane(plane: np.ndarray, n: int, step: float) -> np.ndarray:
    blocks = _to_blocks(plane, n)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.rint(coef / step) * step
    return _from_blocks(idctn(coef, axes=(-2, -1), norm="ortho"),
                        plane.shape[0], plane.shape[1])


def degrade(img: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Simulated compression round trip of an RGB attribute map.

    RGB → YCbCr, per plane blockwise orthonormal DCT-II, uniform scalar
    quantization (chroma at qp + chroma_qp_offset), inverse transform,
    back to RGB with clipping. Deterministic; all planes full resolution.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ContractError(f"expected uint8 H×W×3 image, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    n = cfg.block
    ph, pw = -h % n, -w % n
    work = img
    if ph or pw:
        work = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")

    ycc = rgb_to_ycbcr(work)
    steps = (qstep(cfg.qp),
             qstep(cfg.qp + cfg.chroma_qp_offset),
             qstep(cfg.qp + cfg.chroma_qp_offset))
    out = np.stack(
        [_quantize_plane(ycc[:, :, ch], n, steps[ch]) for ch in range(3)], axis=-1)
    return ycbcr_to_rgb(out)[:h, :w]


def _validate_template(template: str) -> None:
    for key in ("{input}", "{output}", "{qp}"):
        if key not in template:
            raise ContractError(f"encoder command template lacks {key}")


def degrade_external(img_path, cfg: CodecConfig, encoder_cmd: str,
                     out_path=None) -> np.ndarray:
    """Run an external encode/decode command instead of the simulator.

    The template must contain {input}, {output} and {qp}. Failures raise;
    there is no silent fallback to the built-in simulator.
    """
    _validate_template(encoder_cmd)
    img_path = Path(img_path)
    src = pngio.read_rgb(img_path)
    if out_path is None:
        out_path = img_path.with_name(img_path.stem + f".qp{cfg.qp}.png")
    out_path = Path(out_path)
    cmd = [part.format(input=str(img_path), output=str(out_path), qp=cfg.qp)
           for part in encoder_cmd.split()]
    if shutil.which(cmd[0]) is None:
        raise ExternalToolError(f"external encoder not found: {cmd[0]!r}")
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ExternalToolError(
            f"external encoder {cmd[0]!r} exited {proc.returncode}: "
            f"{proc.stderr.strip() or proc.stdout.strip()}")
    if not out_path.exists():
        raise ExternalToolError(f"external encoder produced no output at {out_path}")
    out = pngio.read_rgb(out_path)
    if out.shape != src.shape:
        raise ExternalToolError(
            f"external encoder changed dimensions: {src.shape} → {out.shape}")
    return out
