"""Regular-grid field containers, derivative stencils, Gaussian filtering,
and the image pyramid used by the rest of the package.

Conventions
-----------
ScalarGrid data is stored as an (ny, nx) float array, VectorGrid data as
(ny, nx, 2) with components (u1, u2) = (x, y), and Volume data as
(nz, ny, nx).  Index order is therefore row-major with x fastest, matching
the on-disk F64GRID layout.  The y axis points from row 0 ("bottom") to row
ny-1 ("top"); displacements are measured in pixels unless a physical
spacing is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ConstantField, DomainError, FormatError, GridTooSmall, ShapeMismatch

__all__ = [
    "ScalarGrid",
    "VectorGrid",
    "Volume",
    "normalize_intensity",
    "gaussian_filter",
    "pyramid_sigma",
    "downsample",
    "prolong",
    "spatial_gradient",
    "temporal_difference",
    "bilinear_sample",
    "read_f64grid",
    "write_f64grid",
]


def _check_finite(data, what):
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{what} contains non-finite values")


@dataclass
class ScalarGrid:
    """Scalar field sampled on a regular nx-by-ny pixel grid."""

    nx: int
    ny: int
    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise DomainError("grid extents must be positive")
        if self.spacing <= 0:
            raise DomainError("spacing must be positive")
        self.data = np.asarray(self.data, dtype=np.float64).reshape(self.ny, self.nx)
        _check_finite(self.data, "ScalarGrid")

    @classmethod
    def from_array(cls, arr, spacing=1.0):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeMismatch(f"expected 2-D array, got shape {arr.shape}")
        return cls(nx=arr.shape[1], ny=arr.shape[0], data=arr, spacing=spacing)

    def copy(self):
        return ScalarGrid(self.nx, self.ny, self.data.copy(), self.spacing)


@dataclass
class VectorGrid:
    """Two-component displacement field on a regular pixel grid."""

    nx: int
    ny: int
    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise DomainError("grid extents must be positive")
        if self.spacing <= 0:
            raise DomainError("spacing must be positive")
        self.data = np.asarray(self.data, dtype=np.float64).reshape(self.ny, self.nx, 2)
        _check_finite(self.data, "VectorGrid")

    @classmethod
    def from_arrays(cls, ux, uy, spacing=1.0):
        ux = np.asarray(ux, dtype=np.float64)
        uy = np.asarray(uy, dtype=np.float64)
        if ux.shape != uy.shape or ux.ndim != 2:
            raise ShapeMismatch("component arrays must be 2-D with equal shape")
        return cls(nx=ux.shape[1], ny=ux.shape[0],
                   data=np.stack([ux, uy], axis=-1), spacing=spacing)

    @classmethod
    def zeros(cls, nx, ny, spacing=1.0):
        return cls(nx, ny, np.zeros((ny, nx, 2)), spacing)

    @property
    def ux(self):
        return self.data[:, :, 0]

    @property
    def uy(self):
        return self.data[:, :, 1]

    def copy(self):
        return VectorGrid(self.nx, self.ny, self.data.copy(), self.spacing)


@dataclass
class Volume:
    """Scalar voxel volume; nz = 1 is the 2-D degenerate case."""

    nx: int
    ny: int
    nz: int
    data: np.ndarray

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise DomainError("volume extents must be positive")
        self.data = np.asarray(self.data, dtype=np.float64).reshape(self.nz, self.ny, self.nx)
        _check_finite(self.data, "Volume")

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise ShapeMismatch(f"expected 2-D or 3-D array, got shape {arr.shape}")
        return cls(nx=arr.shape[2], ny=arr.shape[1], nz=arr.shape[0], data=arr)

    def copy(self):
        return Volume(self.nx, self.ny, self.nz, self.data.copy())


# ---------------------------------------------------------------------------
# intensity pre-processing


def normalize_intensity(v: Volume, log_scale: bool) -> Volume:
    """Rescale a volume's brightness to span exactly [0, 1].

    With ``log_scale`` the data is mapped through log10 first, which
    requires strictly positive input.  Constant input has no dynamic range
    and is rejected.
    """
    data = v.data
    if log_scale:
        if np.any(data <= 0):
            raise DomainError("log scaling requires strictly positive values")
        data = np.log10(data)
    lo = data.min()
    hi = data.max()
    if hi == lo:
        raise ConstantField("cannot rescale a constant field to [0, 1]")
    return Volume(v.nx, v.ny, v.nz, (data - lo) / (hi - lo))


def _kernel_radius(sigma: float) -> int:
    return int(math.ceil(4.0 * sigma))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Discrete Gaussian, truncated at radius ceil(4*sigma), renormalized."""
    r = _kernel_radius(sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(v: Volume, sigma: float) -> Volume:
    """Separable Gaussian smoothing with reflect padding.

    The kernel is truncated at radius ceil(4*sigma) and renormalized to unit
    sum, so constant fields pass through unchanged.  sigma = 0 is the
    identity.
    """
    if sigma < 0:
        raise DomainError("sigma must be nonnegative")
    if sigma == 0:
        return v.copy()
    out = v.data
    r = _kernel_radius(sigma)
    for axis in range(3):
        if out.shape[axis] > 1:
            out = gaussian_filter1d(out, sigma, axis=axis, mode="reflect", radius=r)
    return Volume(v.nx, v.ny, v.nz, out)


def gaussian_filter2d(g: ScalarGrid, sigma: float) -> ScalarGrid:
    """2-D convenience wrapper around :func:`gaussian_filter`."""
    vol = gaussian_filter(Volume.from_array(g.data), sigma)
    return ScalarGrid(g.nx, g.ny, vol.data[0], g.spacing)


# ---------------------------------------------------------------------------
# image pyramid


def pyramid_sigma(eta: float, sigma0: float) -> float:
    """Smoothing width used before downsampling by the factor eta."""
    if not 0.0 < eta < 1.0:
        raise DomainError("eta must lie in (0, 1)")
    if sigma0 <= 0:
        raise DomainError("sigma0 must be positive")
    return sigma0 * math.sqrt(eta ** -2 - 1.0)


def bilinear_sample(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a 2-D array at fractional pixel coordinates.

    Coordinates are clamped to the valid range, so queries outside the grid
    return the nearest border value.
    """
    ny, nx = arr.shape[:2]
    xs = np.clip(xs, 0.0, nx - 1.0)
    ys = np.clip(ys, 0.0, ny - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    fx = xs - x0
    fy = ys - y0
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    return ((1 - fx) * (1 - fy) * arr[y0, x0]
            + fx * (1 - fy) * arr[y0, x1]
            + (1 - fx) * fy * arr[y1, x0]
            + fx * fy * arr[y1, x1])


def downsample(g: ScalarGrid, eta: float, sigma0: float) -> ScalarGrid:
    """One pyramid level: Gaussian pre-smoothing, then bilinear resampling
    to round(eta * n) extents.

    Target pixel j maps to source coordinate j * (n_src / n_dst), i.e. the
    grids are corner-aligned and the coarse image at position eta*x samples
    the smoothed fine image at x.
    """
    if not 0.0 < eta < 1.0:
        raise DomainError("eta must lie in (0, 1)")
    mx = int(round(eta * g.nx))
    my = int(round(eta * g.ny))
    if mx < 2 or my < 2:
        raise GridTooSmall(f"downsampled extents {mx}x{my} are below 2x2")
    smoothed = gaussian_filter2d(g, pyramid_sigma(eta, sigma0))
    xs = np.arange(mx) * (g.nx / mx)
    ys = np.arange(my) * (g.ny / my)
    gx, gy = np.meshgrid(xs, ys)
    return ScalarGrid(mx, my, bilinear_sample(smoothed.data, gx, gy), g.spacing / eta)


def prolong(u: VectorGrid, nx: int, ny: int, scale: float) -> VectorGrid:
    """Transfer a displacement field to a finer grid.

    Both components are interpolated bilinearly (corner-aligned, matching
    :func:`downsample`) and the vectors are multiplied by ``scale`` so that
    pixel-unit displacements stay consistent across levels.
    """
    if nx < u.nx or ny < u.ny:
        raise DomainError("prolongation target must not be smaller than the source")
    xs = np.arange(nx) * (u.nx / nx)
    ys = np.arange(ny) * (u.ny / ny)
    gx, gy = np.meshgrid(xs, ys)
    return VectorGrid(nx, ny, scale * bilinear_sample(u.data, gx, gy), u.spacing)


# ---------------------------------------------------------------------------
# derivatives


def spatial_gradient(g: ScalarGrid) -> VectorGrid:
    """Gradient by central differences, one-sided at the borders."""
    dy, dx = np.gradient(g.data, g.spacing)
    return VectorGrid(g.nx, g.ny, np.stack([dx, dy], axis=-1), g.spacing)


def temporal_difference(i1: ScalarGrid, i2: ScalarGrid) -> ScalarGrid:
    """Backward difference quotient between two frames: I2 - I1."""
    if (i1.nx, i1.ny) != (i2.nx, i2.ny):
        raise ShapeMismatch(
            f"extent mismatch: {i1.nx}x{i1.ny} vs {i2.nx}x{i2.ny}")
    return ScalarGrid(i1.nx, i1.ny, i2.data - i1.data, i1.spacing)


# ---------------------------------------------------------------------------
# F64GRID file format
#
# ASCII header `F64GRID <ncomp> <nx> <ny> <nz>\n` followed by
# ncomp*nx*ny*nz little-endian float64, component-innermost, row-major,
# z outermost.

_MAGIC = b"F64GRID"


def write_f64grid(path, obj) -> None:
    """Serialize a ScalarGrid (ncomp=1, nz=1), VectorGrid (ncomp=2) or
    Volume (ncomp=1) to the F64GRID binary format."""
    if isinstance(obj, ScalarGrid):
        ncomp, nx, ny, nz = 1, obj.nx, obj.ny, 1
        payload = obj.data
    elif isinstance(obj, VectorGrid):
        ncomp, nx, ny, nz = 2, obj.nx, obj.ny, 1
        payload = obj.data
    elif isinstance(obj, Volume):
        ncomp, nx, ny, nz = 1, obj.nx, obj.ny, obj.nz
        payload = obj.data
    else:
        raise DomainError(f"cannot serialize {type(obj).__name__} as F64GRID")
    header = f"F64GRID {ncomp} {nx} {ny} {nz}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def read_f64grid(path):
    """Read an F64GRID file; returns ScalarGrid, VectorGrid or Volume
    depending on the header.  Malformed input raises FormatError carrying
    the byte offset of the failure."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing header newline", offset=len(raw))
    header = raw[:nl]
    parts = header.split(b" ")
    if len(parts) != 5 or parts[0] != _MAGIC:
        raise FormatError("bad F64GRID header", offset=0)
    try:
        ncomp, nx, ny, nz = (int(p) for p in parts[1:])
    except ValueError:
        raise FormatError("non-integer extent in header", offset=len(_MAGIC) + 1)
    if ncomp not in (1, 2) or min(nx, ny, nz) < 1:
        raise FormatError("inadmissible extents in header", offset=len(_MAGIC) + 1)
    start = nl + 1
    count = ncomp * nx * ny * nz
    need = count * 8
    got = len(raw) - start
    if got < need:
        raise FormatError(
            f"payload truncated: expected {need} bytes, found {got}",
            offset=start + got)
    if got > need:
        raise FormatError("trailing bytes after payload", offset=start + need)
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise FormatError("non-finite value in payload", offset=start + 8 * bad)
    if ncomp == 2:
        return VectorGrid(nx, ny, data.reshape(ny, nx, 2).copy())
    if nz == 1:
        return ScalarGrid(nx, ny, data.reshape(ny, nx).copy())
    return Volume(nx, ny, nz, data.reshape(nz, ny, nx).copy())
