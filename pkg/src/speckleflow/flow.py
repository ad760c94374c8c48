"""Speckle-augmented optical-flow estimation.

The displacement field u minimizes the quadratic functional

    F(u) = sum_p (grad I . u + I_t)^2            (brightness constancy)
         + alpha * sum_edges |du|^2              (gradient smoothness)
         + beta  * sum_i sum_p g_i(p) |u - u_i|^2  (bubble pull)
         + gamma * sum_cells (div u)^2           (optional incompressibility)

discretized per pixel (midpoint quadrature, forward-difference stencils,
which is the bilinear-element / 5-point-Laplacian discretization on the
pixel grid).  Minimization reduces to one sparse SPD solve A u = y; the
matrix couples the two components through the image-gradient products and
through the divergence stencil.

All flow computations are carried out in pixel units: sample positions,
displacements, and the Gaussian width sigma_g are measured in pixels, and
the quadrature weight per pixel is 1.  Unknowns are interleaved as
(u1, u2) per pixel in row-major order, matching ``VectorGrid.data.ravel()``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import check_keys, read_kv_config
from .errors import DomainError, NotConverged, NotSPD, ShapeMismatch
from .grids import (ScalarGrid, VectorGrid, bilinear_sample, downsample,
                    prolong, temporal_difference)
from .speckle import DisplacementSample

__all__ = [
    "FlowParams",
    "FlowSystem",
    "gaussian_weight",
    "evaluate_functional",
    "assemble",
    "solve_flow",
    "gradient",
    "gradient_descent_flow",
    "multiscale_flow",
]

# below this width the Gaussian peak 1/(2 pi sigma^2) exceeds 1 and the
# bubble term's scaling guarantees break down
MIN_SIGMA_G = 1.0 / math.sqrt(2.0 * math.pi)

_SOLVERS = ("direct", "cg", "gradient_descent")


@dataclass
class FlowParams:
    """Weights and solver settings for the flow functional."""

    alpha: float = 0.8
    beta: float = 0.0
    gamma: float = 0.0
    sigma_g: float = 5.0
    levels: int = 1
    eta: float = 0.5
    sigma0: float = 0.6
    solver: str = "direct"
    tol: float = 1e-8
    max_iter: int = 0  # 0 = automatic (10 * unknowns)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise DomainError("alpha, beta, gamma must be nonnegative")
        if self.alpha + self.beta <= 0:
            raise DomainError("alpha + beta must be positive for a well-posed system")
        if self.beta > 0 and self.sigma_g < MIN_SIGMA_G:
            raise DomainError(f"sigma_g must be at least {MIN_SIGMA_G:.6f}")
        if self.levels < 1:
            raise DomainError("levels must be at least 1")
        if not 0.0 < self.eta < 1.0:
            raise DomainError("eta must lie in (0, 1)")
        if self.sigma0 <= 0:
            raise DomainError("sigma0 must be positive")
        if self.solver not in _SOLVERS:
            raise DomainError(f"solver must be one of {_SOLVERS}")
        if self.tol <= 0:
            raise DomainError("tol must be positive")
        if self.max_iter < 0:
            raise DomainError("max_iter must be nonnegative")

    @classmethod
    def from_config(cls, path) -> "FlowParams":
        cfg = read_kv_config(path)
        check_keys(cfg, {"alpha", "beta", "gamma", "sigma_g", "levels", "eta",
                         "sigma0", "solver", "tol", "max_iter"}, "flow")
        kwargs = {}
        for key, raw in cfg.items():
            if key in ("levels", "max_iter"):
                kwargs[key] = int(raw)
            elif key == "solver":
                kwargs[key] = raw
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


@dataclass
class FlowSystem:
    """Assembled sparse system A u = y with the constant term of the
    quadratic expansion F(u) = u'Au/2 - y'u + const."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    nx: int
    ny: int
    constant: float = 0.0


def gaussian_weight(x, xhat, sigma: float) -> float:
    """Isotropic 2-D Gaussian bump of total mass one centered at xhat."""
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    d2 = float(np.sum((x[:2] - xhat[:2]) ** 2))
    return math.exp(-d2 / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)


def _sample_fields(nx, ny, samples, sigma):
    """Accumulated Gaussian weight fields over the pixel grid.

    Returns (W, WU, wu2) with W(p) = sum_i g_i(p), WU(p) = sum_i g_i(p) u_i
    and wu2 = sum_i sum_p g_i(p) |u_i|^2.  The Gaussians are separable, so
    each sample costs two 1-D exponentials and one outer product.
    """
    W = np.zeros((ny, nx))
    WU = np.zeros((ny, nx, 2))
    wu2 = 0.0
    if not samples:
        return W, WU, wu2
    xs = np.arange(nx, dtype=np.float64)
    ys = np.arange(ny, dtype=np.float64)
    peak = 1.0 / (2.0 * math.pi * sigma * sigma)
    inv = 1.0 / (2.0 * sigma * sigma)
    for s in samples:
        px, py = float(s.position[0]), float(s.position[1])
        gx = np.exp(-((xs - px) ** 2) * inv)
        gy = np.exp(-((ys - py) ** 2) * inv)
        g = peak * np.outer(gy, gx)
        u = np.asarray(s.displacement[:2], dtype=np.float64)
        W += g
        WU += g[:, :, None] * u
        wu2 += float(g.sum()) * float(u @ u)
    return W, WU, wu2


def _check_fields(gradI: VectorGrid, It: ScalarGrid):
    if (gradI.nx, gradI.ny) != (It.nx, It.ny):
        raise ShapeMismatch("gradient and temporal-derivative extents differ")


def evaluate_functional(u: VectorGrid, gradI: VectorGrid, It: ScalarGrid,
                        samples, p: FlowParams) -> float:
    """Value of the discrete flow functional at u (always >= 0)."""
    _check_fields(gradI, It)
    if (u.nx, u.ny) != (It.nx, It.ny):
        raise ShapeMismatch("field extents differ")
    u1, u2 = u.data[:, :, 0], u.data[:, :, 1]
    gx, gy = gradI.data[:, :, 0], gradI.data[:, :, 1]

    data = float(np.sum((gx * u1 + gy * u2 + It.data) ** 2))

    rough = 0.0
    for comp in (u1, u2):
        rough += float(np.sum(np.diff(comp, axis=1) ** 2))
        rough += float(np.sum(np.diff(comp, axis=0) ** 2))

    bubble = 0.0
    if p.beta > 0 and samples:
        W, WU, wu2 = _sample_fields(u.nx, u.ny, samples, p.sigma_g)
        uu = u1 * u1 + u2 * u2
        bubble = float(np.sum(W * uu) - 2.0 * np.sum(WU[:, :, 0] * u1 + WU[:, :, 1] * u2) + wu2)

    div_term = 0.0
    if p.gamma > 0:
        div = np.diff(u1, axis=1)[:-1, :] + np.diff(u2, axis=0)[:, :-1]
        div_term = float(np.sum(div ** 2))

    return data + p.alpha * rough + p.beta * bubble + p.gamma * div_term


def assemble(gradI: VectorGrid, It: ScalarGrid, samples, p: FlowParams) -> FlowSystem:
    """Assemble the sparse SPD system whose solution minimizes the flow
    functional.

    The matrix is the Hessian of the discrete functional: pixelwise 2x2
    image-gradient blocks, the 5-point Laplacian per component scaled by
    2*alpha, a diagonal bubble-weight term scaled by 2*beta, and the
    divergence-stencil normal matrix scaled by 2*gamma.
    """
    _check_fields(gradI, It)
    nx, ny = It.nx, It.ny
    N = nx * ny
    gx = gradI.data[:, :, 0].ravel()
    gy = gradI.data[:, :, 1].ravel()
    it = It.data.ravel()
    idx = np.arange(N).reshape(ny, nx)

    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(np.asarray(r).ravel())
        cols.append(np.asarray(c).ravel())
        vals.append(np.asarray(v, dtype=np.float64).ravel())

    # data term: 2 * outer(grad I, grad I) per pixel
    base = 2 * np.arange(N)
    add(base, base, 2.0 * gx * gx)
    add(base + 1, base + 1, 2.0 * gy * gy)
    add(base, base + 1, 2.0 * gx * gy)
    add(base + 1, base, 2.0 * gx * gy)

    # smoothness: graph Laplacian on the 4-neighborhood, per component
    if p.alpha > 0:
        w = 2.0 * p.alpha
        for comp in (0, 1):
            for a, b in (((2 * idx[:, :-1] + comp), (2 * idx[:, 1:] + comp)),
                         ((2 * idx[:-1, :] + comp), (2 * idx[1:, :] + comp))):
                ones = np.full(a.size, w)
                add(a, a, ones)
                add(b, b, ones)
                add(a, b, -ones)
                add(b, a, -ones)

    # bubble term: diagonal Gaussian weights, rhs pulls toward the samples
    W = WU = None
    wu2 = 0.0
    if p.beta > 0 and samples:
        W, WU, wu2 = _sample_fields(nx, ny, samples, p.sigma_g)
        wflat = 2.0 * p.beta * W.ravel()
        add(base, base, wflat)
        add(base + 1, base + 1, wflat)

    # divergence penalty on forward-difference cells
    if p.gamma > 0:
        c00 = idx[:-1, :-1]
        dofs = np.stack([2 * c00, 2 * (c00 + 1), 2 * c00 + 1,
                         2 * idx[1:, :-1] + 1], axis=-1).reshape(-1, 4)
        sign = np.array([-1.0, 1.0, -1.0, 1.0])
        block = 2.0 * p.gamma * np.outer(sign, sign)
        ncell = dofs.shape[0]
        r = np.repeat(dofs, 4, axis=1).reshape(ncell, 4, 4)
        c = np.tile(dofs, (1, 4)).reshape(ncell, 4, 4)
        add(r, c, np.broadcast_to(block, (ncell, 4, 4)))

    A = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(2 * N, 2 * N))
    A.sum_duplicates()

    y = np.zeros(2 * N)
    y[0::2] = -2.0 * it * gx
    y[1::2] = -2.0 * it * gy
    constant = float(np.sum(it * it))
    if W is not None:
        y[0::2] += 2.0 * p.beta * WU[:, :, 0].ravel()
        y[1::2] += 2.0 * p.beta * WU[:, :, 1].ravel()
        constant += p.beta * wu2

    return FlowSystem(matrix=A, rhs=y, nx=nx, ny=ny, constant=constant)


def _solve_system(sys: FlowSystem, p: FlowParams, init: np.ndarray | None = None) -> np.ndarray:
    n = sys.rhs.size
    if p.solver == "direct":
        try:
            lu = spla.splu(sys.matrix.tocsc())
            x = lu.solve(sys.rhs)
        except RuntimeError as exc:
            raise NotSPD(f"sparse factorization failed: {exc}")
        if not np.all(np.isfinite(x)):
            raise NotSPD("sparse factorization produced non-finite values")
        return x
    max_iter = p.max_iter if p.max_iter > 0 else 10 * n
    if p.solver == "cg":
        x, info = spla.cg(sys.matrix, sys.rhs, x0=init, rtol=p.tol, atol=0.0,
                          maxiter=max_iter)
        if info > 0:
            res = float(np.linalg.norm(sys.matrix @ x - sys.rhs))
            raise NotConverged(f"cg hit the iteration cap ({max_iter})", residual=res)
        if info < 0:
            raise NotSPD("cg reported an invalid system")
        return x
    return _gradient_descent(sys, p, init, max_iter)


def _gradient_descent(sys: FlowSystem, p: FlowParams, init, max_iter,
                      callback=None) -> np.ndarray:
    A, y = sys.matrix, sys.rhs
    u = np.zeros_like(y) if init is None else np.array(init, dtype=np.float64)
    ynorm = np.linalg.norm(y)
    stop = p.tol * ynorm if ynorm > 0 else p.tol
    for _ in range(max_iter):
        r = A @ u - y
        rnorm = np.linalg.norm(r)
        if callback is not None:
            callback(u.copy(), rnorm)
        if rnorm <= stop:
            return u
        rAr = float(r @ (A @ r))
        if rAr <= 0:
            raise NotSPD("descent direction has nonpositive curvature")
        u = u - (rnorm * rnorm / rAr) * r
    r = A @ u - y
    rnorm = float(np.linalg.norm(r))
    if rnorm <= stop:
        return u
    raise NotConverged(
        f"gradient descent did not reach tol within {max_iter} iterations",
        residual=rnorm)


def solve_flow(sys: FlowSystem, p: FlowParams) -> VectorGrid:
    """Solve the assembled system and reshape to a displacement field."""
    x = _solve_system(sys, p)
    return VectorGrid(sys.nx, sys.ny, x.reshape(sys.ny, sys.nx, 2))


def gradient(u: VectorGrid, gradI: VectorGrid, It: ScalarGrid, samples,
             p: FlowParams) -> VectorGrid:
    """Euclidean gradient of the discrete functional: A u - y."""
    if (u.nx, u.ny) != (It.nx, It.ny):
        raise ShapeMismatch("field extents differ")
    sys = assemble(gradI, It, samples, p)
    g = sys.matrix @ u.data.ravel() - sys.rhs
    return VectorGrid(u.nx, u.ny, g.reshape(u.ny, u.nx, 2))


def gradient_descent_flow(init: VectorGrid, gradI: VectorGrid, It: ScalarGrid,
                          samples, p: FlowParams, callback=None) -> VectorGrid:
    """Minimize the functional by steepest descent with exact line search.

    The step length ||r||^2 / (r'Ar) is optimal for the quadratic, so the
    functional decreases monotonically.  Raises NotConverged if the
    iteration cap is reached before the relative-residual tolerance.
    """
    sys = assemble(gradI, It, samples, p)
    max_iter = p.max_iter if p.max_iter > 0 else 10 * sys.rhs.size
    x = _gradient_descent(sys, p, init.data.ravel(), max_iter, callback=callback)
    return VectorGrid(init.nx, init.ny, x.reshape(init.ny, init.nx, 2))


def _scaled_samples(samples, factor):
    return [DisplacementSample(position=s.position * factor,
                               displacement=s.displacement * factor)
            for s in samples]


def _warp(img: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Sample img at x + disp(x) (bilinear, border-clamped)."""
    ny, nx = img.shape
    gx, gy = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64))
    return bilinear_sample(img, gx + disp[:, :, 0], gy + disp[:, :, 1])


def multiscale_flow(i1: ScalarGrid, i2: ScalarGrid, samples, p: FlowParams) -> VectorGrid:
    """Coarse-to-fine flow estimation.

    Image pyramids are built by repeated smoothing/downsampling; sample
    positions and displacements shrink by eta per level.  The coarsest
    level is solved outright; on each finer level the prolonged estimate
    linearizes the data term (the second frame is warped by it) and the
    level's system is solved for the correction, which is added.  With
    levels = 1 this is exactly the single-scale solve.
    """
    if (i1.nx, i1.ny) != (i2.nx, i2.ny):
        raise ShapeMismatch("image extents differ")
    levels = [(i1, i2)]
    for _ in range(p.levels - 1):
        a, b = levels[-1]
        levels.append((downsample(a, p.eta, p.sigma0),
                       downsample(b, p.eta, p.sigma0)))

    u = None
    for s in range(p.levels - 1, -1, -1):
        a, b = levels[s]
        grad_a = _pixel_gradient(a)
        lvl_samples = _scaled_samples(samples, p.eta ** s)
        if u is None:
            sys = assemble(grad_a, temporal_difference(a, b), lvl_samples, p)
            u = _solve_system(sys, p)
            shape = (a.ny, a.nx)
        else:
            coarse = VectorGrid(shape[1], shape[0], u.reshape(shape[0], shape[1], 2))
            up = prolong(coarse, a.nx, a.ny, 1.0 / p.eta).data
            warped = _warp(b.data, up)
            # temporal term re-centered at the prolonged estimate
            it_eff = (warped - a.data) - (grad_a.data[:, :, 0] * up[:, :, 0]
                                          + grad_a.data[:, :, 1] * up[:, :, 1])
            sys = assemble(grad_a, ScalarGrid(a.nx, a.ny, it_eff), lvl_samples, p)
            up_flat = up.ravel()
            corr_sys = FlowSystem(matrix=sys.matrix,
                                  rhs=sys.rhs - sys.matrix @ up_flat,
                                  nx=a.nx, ny=a.ny)
            h = _solve_system(corr_sys, p)
            u = up_flat + h
            shape = (a.ny, a.nx)

    return VectorGrid(i1.nx, i1.ny, u.reshape(i1.ny, i1.nx, 2))


def _pixel_gradient(g: ScalarGrid) -> VectorGrid:
    """Gradient in index units regardless of the grid's physical spacing."""
    dy, dx = np.gradient(g.data)
    return VectorGrid(g.nx, g.ny, np.stack([dx, dy], axis=-1))
