"""Background fill for partially occupied maps.

Two stages, matching the usual smooth-padding recipe for projection
atlases: a push-pull mip pyramid gives every empty pixel an initial value,
then a discrete Laplace solve relaxes the fill with occupied pixels held
fixed. Occupied pixels are never modified by either stage.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ValidationError


@dataclass
class MaskedImage:
    """8-bit image plus occupancy mask; mask=1 pixels are ground truth."""

    pixels: np.ndarray  # H×W×C uint8, C in {1, 3}; H×W accepted as C=1
    mask: np.ndarray    # H×W bool

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        if self.pixels.dtype != np.uint8:
            raise ValidationError(f"pixels must be uint8, got {self.pixels.dtype}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise ValidationError(f"pixels must be H×W×C with C in (1,3), got {self.pixels.shape}")
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != self.pixels.shape[:2]:
            raise ValidationError(
                f"mask shape {self.mask.shape} != image shape {self.pixels.shape[:2]}")


def _downsample(values: np.ndarray, weights: np.ndarray):
    """2×2 weighted average; weight = occupied-pixel count under the cell."""
    h, w, c = values.shape
    ph, pw = (h + 1) // 2 * 2, (w + 1) // 2 * 2
    if (ph, pw) != (h, w):
        v = np.zeros((ph, pw, c), dtype=values.dtype)
        v[:h, :w] = values
        wt = np.zeros((ph, pw), dtype=weights.dtype)
        wt[:h, :w] = weights
    else:
        v, wt = values, weights
    vw = v * wt[:, :, None]
    vsum = vw[0::2, 0::2] + vw[1::2, 0::2] + vw[0::2, 1::2] + vw[1::2, 1::2]
    wsum = wt[0::2, 0::2] + wt[1::2, 0::2] + wt[0::2, 1::2] + wt[1::2, 1::2]
    out = np.zeros_like(vsum)
    nz = wsum > 0
    out[nz] = vsum[nz] / wsum[nz][:, None]
    return out, wsum


def _upsample_bilinear(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear 2× upsample to (h, w) with pixel-center alignment."""
    ch, cw, _ = coarse.shape
    ys = (np.arange(h) + 0.5) / 2.0 - 0.5
    xs = (np.arange(w) + 0.5) / 2.0 - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, ch - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, cw - 1)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    tl = coarse[np.ix_(y0, x0)]
    tr = coarse[np.ix_(y0, x1)]
    bl = coarse[np.ix_(y1, x0)]
    br = coarse[np.ix_(y1, x1)]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def pushpull_fill(img: MaskedImage) -> np.ndarray:
    """Fill empty pixels from a mip pyramid of the occupied content.

    Push: repeated 2×2 occupancy-weighted averaging down to 1×1. Pull:
    walk back up, replacing pixels with no occupied coverage by the
    bilinear upsample of the (already complete) coarser level. Occupied
    pixels pass through bit-exact.
    """
    if not img.mask.any():
        raise ContractError("pushpull_fill requires at least one occupied pixel")
    values = img.pixels.astype(np.float64)
    weights = img.mask.astype(np.float64)

    levels = [(values, weights)]
    while levels[-1][0].shape[0] > 1 or levels[-1][0].shape[1] > 1:
        levels.append(_downsample(*levels[-1]))

    coarse_v, coarse_w = levels[-1]
    filled = coarse_v  # 1×1 level is covered because the mask is nonempty
    for values, weights in reversed(levels[:-1]):
        up = _upsample_bilinear(filled, values.shape[0], values.shape[1])
        hole = weights == 0
        out = values.copy()
        out[hole] = up[hole]
        filled = out

    result = np.clip(np.rint(filled), 0, 255).astype(np.uint8)
    result[img.mask] = img.pixels[img.mask]
    return result


def _laplace_system(mask: np.ndarray):
    """Sparse 5-point Laplace operator over the empty pixels of `mask`.

    Image borders are mirrored, so a border unknown couples only to its
    in-image neighbors. Returns (A, rhs_builder, (yy, xx)) where
    rhs_builder(channel_plane) assembles the Dirichlet contributions of
    occupied neighbors.
    """
    from scipy import sparse

    h, w = mask.shape
    empty = ~mask
    yy, xx = np.nonzero(empty)
    m = len(yy)
    unknown_id = np.full((h, w), -1, dtype=np.int64)
    unknown_id[yy, xx] = np.arange(m)

    diag = np.zeros(m)
    rows, cols, vals = [], [], []
    occ_nbrs = []  # (unknown index, ny, nx) per occupied neighbor
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = yy + dy, xx + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        diag += inside  # mirrored off-image neighbors drop out entirely
        ny, nx = ny[inside], nx[inside]
        src = np.nonzero(inside)[0]
        nid = unknown_id[ny, nx]
        is_unknown = nid >= 0
        rows.append(src[is_unknown])
        cols.append(nid[is_unknown])
        vals.append(-np.ones(int(is_unknown.sum())))
        occ_nbrs.append((src[~is_unknown], ny[~is_unknown], nx[~is_unknown]))

    rows = np.concatenate(rows + [np.arange(m)])
    cols = np.concatenate(cols + [np.arange(m)])
    vals = np.concatenate(vals + [diag])
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(m, m))

    def rhs(plane: np.ndarray) -> np.ndarray:
        b = np.zeros(m)
        for src, ny, nx in occ_nbrs:
            np.add.at(b, src, plane[ny, nx])
        return b

    return A, rhs, (yy, xx)


def harmonic_refine(
    img: MaskedImage,
    filled: np.ndarray,
    tol: float = 1e-5,
    max_iter: int = 2000,
    residual_history: list | None = None,
) -> np.ndarray:
    """Relax the filled background toward the discrete harmonic solution.

    Solves the 5-point Laplace system on empty pixels with occupied pixels
    as Dirichlet data and mirrored image borders, by the minimum-residual
    Krylov iteration started from `filled`. Stops when the residual norm
    falls below `tol` relative to the right-hand side, or at `max_iter`
    iterations (then the best iterate is returned with a warning); the
    residual norm is non-increasing across iterations by construction. The
    result is kept inside the occupied value range per channel and
    quantized to 8 bits once, at the end.
    """
    from scipy.sparse.linalg import minres

    filled = np.asarray(filled)
    squeeze = filled.ndim == 2
    if squeeze:
        filled = filled[:, :, None]
    if filled.shape != img.pixels.shape:
        raise ContractError(
            f"filled shape {filled.shape} != image shape {img.pixels.shape}")
    empty = ~img.mask
    if not empty.any():
        return img.pixels.copy() if not squeeze else img.pixels[:, :, 0].copy()

    A, rhs, (yy, xx) = _laplace_system(img.mask)
    u = filled.astype(np.float64)
    u[img.mask] = img.pixels[img.mask]

    class _Converged(Exception):
        pass

    converged = True
    for ch in range(u.shape[2]):
        plane = u[:, :, ch]
        b = rhs(plane)
        x0 = plane[yy, xx]
        bnorm = float(np.linalg.norm(b))
        history = [float(np.linalg.norm(b - A @ x0))]
        best = {"x": x0}

        def track(xk, b=b, history=history, best=best, bnorm=bnorm):
            history.append(float(np.linalg.norm(b - A @ xk)))
            best["x"] = np.array(xk, copy=True)
            if history[-1] <= tol * bnorm:
                raise _Converged

        if history[0] <= tol * bnorm:
            x = x0
        else:
            try:
                # Stopping is handled in the callback so that the advertised
                # criterion (‖r‖ ≤ tol·‖b‖) is exactly what is applied.
                x, _ = minres(A, b, x0=x0, rtol=1e-16, maxiter=max_iter,
                              callback=track)
            except _Converged:
                x = best["x"]
            if float(np.linalg.norm(b - A @ x)) > tol * bnorm:
                converged = False
        if residual_history is not None:
            residual_history.append(history)
        occ_vals = img.pixels[:, :, ch][img.mask]
        plane[yy, xx] = np.clip(x, occ_vals.min(), occ_vals.max())
    if not converged:
        warnings.warn(
            f"harmonic_refine did not reach tol={tol} in {max_iter} iterations; "
            "returning best iterate")

    result = np.clip(np.rint(u), 0, 255).astype(np.uint8)
    result[img.mask] = img.pixels[img.mask]
    return result[:, :, 0] if squeeze else result


def pad_image(pixels: np.ndarray, mask: np.ndarray, refine: bool = True,
              tol: float = 1e-5, max_iter: int = 2000) -> np.ndarray:
    """Convenience composition: push-pull fill, optionally harmonic refine."""
    img = MaskedImage(pixels, mask)
    filled = pushpull_fill(img)
    if not refine:
        return filled
    return harmonic_refine(img, filled, tol=tol, max_iter=max_iter)
