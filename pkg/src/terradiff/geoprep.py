"""Raster preprocessing math: resampling, mask union, histogram matching.

Coordinate handling is a pluggable transform interface (affine plus a
projective variant for tests) rather than real map projections: the
interpolation behaviour under a transform is what matters here, and it
is transform-agnostic.  Pixel (col, row) maps to world coordinates at
the pixel center (col + 0.5, row + 0.5).

The valid-pixel mask of a tile is the complement of the union of its
bad-pixel masks (no-data and cloud).  Shadow correction transfers a
reference color distribution onto a source channel by exact empirical
CDF mapping over valid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError


class Affine2D:
    """world = (a*col + b*row + c, d*col + e*row + f)."""

    def __init__(self, a, b, c, d, e, f):
        self.coeffs = (float(a), float(b), float(c), float(d), float(e), float(f))
        det = a * e - b * d
        if abs(det) < 1e-300:
            raise ParameterError("singular affine transform")
        self._det = det

    @classmethod
    def scale_offset(cls, sx, sy, ox=0.0, oy=0.0):
        return cls(sx, 0.0, ox, 0.0, sy, oy)

    def apply(self, col, row):
        a, b, c, d, e, f = self.coeffs
        return a * col + b * row + c, d * col + e * row + f

    def inverse(self) -> "Affine2D":
        a, b, c, d, e, f = self.coeffs
        det = self._det
        ia, ib = e / det, -b / det
        id_, ie = -d / det, a / det
        ic = -(ia * c + ib * f)
        if_ = -(id_ * c + ie * f)
        return Affine2D(ia, ib, ic, id_, ie, if_)


class Projective2D:
    """Homography on (col, row, 1); exercises non-affine code paths in tests."""

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(m)) < 1e-300:
            raise ParameterError("singular projective transform")
        self.matrix = m

    def apply(self, col, row):
        m = self.matrix
        w = m[2, 0] * col + m[2, 1] * row + m[2, 2]
        x = (m[0, 0] * col + m[0, 1] * row + m[0, 2]) / w
        y = (m[1, 0] * col + m[1, 1] * row + m[1, 2]) / w
        return x, y

    def inverse(self) -> "Projective2D":
        return Projective2D(np.linalg.inv(self.matrix))


@dataclass
class Raster:
    """2-D [H, W] or 3-D [C, H, W] data with a pixel->world transform.

    ``nodata`` is a boolean [H, W] array, True where the pixel carries no
    data.
    """

    data: np.ndarray
    transform: Affine2D
    nodata: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ShapeError(f"raster data must be 2-D or 3-D, got {self.data.shape}")
        h, w = self.data.shape[1:]
        if self.nodata is None:
            self.nodata = np.zeros((h, w), dtype=bool)
        else:
            self.nodata = np.asarray(self.nodata, dtype=bool)
            if self.nodata.shape != (h, w):
                raise ShapeError(f"nodata {self.nodata.shape} != spatial dims {(h, w)}")

    @property
    def shape(self):
        return self.data.shape


def _target_source_coords(src: Raster, target_transform, target_shape):
    th, tw = target_shape
    rows, cols = np.mgrid[0:th, 0:tw].astype(np.float64)
    wx, wy = target_transform.apply(cols + 0.5, rows + 0.5)
    inv = src.transform.inverse()
    sx, sy = inv.apply(wx, wy)
    # continuous array indices of the sample point (pixel centers at integers)
    return sx - 0.5, sy - 0.5


def resample_bilinear(src: Raster, target_transform, target_shape) -> Raster:
    """Resample onto a target grid with bilinear interpolation.

    A target pixel is no-data when its sample point falls outside the
    source pixel-center hull or any of its 4 contributing pixels is
    no-data.  Bilinear reproduces functions linear in each coordinate
    exactly, which is what keeps smooth elevation fields free of the
    stairway artifact that nearest-neighbor introduces.
    """
    u, v = _target_source_coords(src, target_transform, target_shape)
    c, h, w = src.shape
    j0 = np.floor(u).astype(int)
    i0 = np.floor(v).astype(int)
    fj = u - j0
    fi = v - i0
    inb = (i0 >= 0) & (i0 + 1 <= h - 1) & (j0 >= 0) & (j0 + 1 <= w - 1)
    i0c = np.clip(i0, 0, h - 2)
    j0c = np.clip(j0, 0, w - 2)
    out = np.empty((c, *target_shape), dtype=np.float64)
    for ch in range(c):
        band = src.data[ch]
        v00 = band[i0c, j0c]
        v01 = band[i0c, j0c + 1]
        v10 = band[i0c + 1, j0c]
        v11 = band[i0c + 1, j0c + 1]
        top = v00 * (1.0 - fj) + v01 * fj
        bot = v10 * (1.0 - fj) + v11 * fj
        out[ch] = top * (1.0 - fi) + bot * fi
    bad = (
        src.nodata[i0c, j0c]
        | src.nodata[i0c, j0c + 1]
        | src.nodata[i0c + 1, j0c]
        | src.nodata[i0c + 1, j0c + 1]
    )
    nodata = ~inb | bad
    out[:, nodata] = 0.0
    return Raster(data=out, transform=_as_transform(target_transform), nodata=nodata)


def resample_nearest(src: Raster, target_transform, target_shape) -> Raster:
    """Nearest-neighbor counterpart of resample_bilinear (comparison baseline)."""
    u, v = _target_source_coords(src, target_transform, target_shape)
    c, h, w = src.shape
    j = np.round(u).astype(int)
    i = np.round(v).astype(int)
    inb = (i >= 0) & (i <= h - 1) & (j >= 0) & (j <= w - 1)
    ic = np.clip(i, 0, h - 1)
    jc = np.clip(j, 0, w - 1)
    out = np.empty((c, *target_shape), dtype=np.float64)
    for ch in range(c):
        out[ch] = src.data[ch][ic, jc]
    nodata = ~inb | src.nodata[ic, jc]
    out[:, nodata] = 0.0
    return Raster(data=out, transform=_as_transform(target_transform), nodata=nodata)


def _as_transform(t):
    if isinstance(t, (Affine2D, Projective2D)):
        return t
    raise ParameterError(f"not a transform: {t!r}")


def union_masks(nodata: np.ndarray, cloud: np.ndarray) -> np.ndarray:
    """Valid-pixel mask from two bad-pixel masks (1 = bad in, 1 = valid out)."""
    nodata = np.asarray(nodata)
    cloud = np.asarray(cloud)
    if nodata.shape != cloud.shape:
        raise ShapeError(f"mask shapes differ: {nodata.shape} vs {cloud.shape}")
    valid = (nodata == 0) & (cloud == 0)
    return valid.astype(np.uint8)


def histogram_match(source: np.ndarray, reference: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Map ``source`` through Q_ref(F_src(.)) over valid pixels.

    Exact empirical-CDF mapping: for tie-free equal-sized inputs the
    k-th smallest valid source value becomes the k-th smallest valid
    reference value, so the valid output multiset equals the valid
    reference multiset.  Invalid pixels pass through unchanged.
    """
    source = np.asarray(source, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    valid = np.asarray(valid)
    if source.shape != reference.shape or valid.shape != source.shape:
        raise ShapeError(
            f"shapes differ: source {source.shape}, reference {reference.shape}, valid {valid.shape}"
        )
    sel = valid != 0
    if not sel.any():
        raise ParameterError("histogram_match needs at least one valid pixel")

    src_vals = source[sel]
    ref_vals = reference[sel]
    s_values, bin_idx, s_counts = np.unique(src_vals, return_inverse=True, return_counts=True)
    r_values, r_counts = np.unique(ref_vals, return_counts=True)
    s_quantiles = np.cumsum(s_counts).astype(np.float64)
    s_quantiles /= s_quantiles[-1]
    r_quantiles = np.cumsum(r_counts).astype(np.float64)
    r_quantiles /= r_quantiles[-1]
    mapped = np.interp(s_quantiles, r_quantiles, r_values)

    out = source.copy()
    out[sel] = mapped[bin_idx]
    return out


def match_channels(source: np.ndarray, reference: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-channel histogram_match over [C, H, W] images."""
    source = np.asarray(source, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if source.shape != reference.shape:
        raise ShapeError(f"shapes differ: {source.shape} vs {reference.shape}")
    return np.stack(
        [histogram_match(source[c], reference[c], valid) for c in range(source.shape[0])]
    )


def second_difference_energy(grid: np.ndarray) -> float:
    """Sum of squared second differences along both axes (stairway metric)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 3:
        grid = grid[0]
    dxx = grid[:, 2:] - 2.0 * grid[:, 1:-1] + grid[:, :-2]
    dyy = grid[2:, :] - 2.0 * grid[1:-1, :] + grid[:-2, :]
    return float((dxx**2).sum() + (dyy**2).sum())
