"""Linearized-elasticity forward solver and its linearization.

The displacement u of a sample with Lame fields (lambda, mu) under mixed
displacement/traction boundary conditions solves

    integral( lambda div u div v + 2 mu E(u):E(v) ) = l(v)

for all test fields v vanishing on the Dirichlet boundary, with
E(u) = (grad u + grad u^T) / 2.  The domain is the pixel grid: bilinear
quadrilateral elements on the cells between pixels, 2x2 Gauss quadrature,
and the Lame fields treated as piecewise constant per cell (corner
average).  Dirichlet data enters through a nodal lift, so the returned
displacement includes the prescribed boundary values.

The parameter-to-solution map (lambda, mu) -> u is differentiable; its
directional derivative and the adjoint of that derivative are one extra
linear solve each with the same stiffness matrix.  Discrete L2 pairings
use plain pixel sums weighted by the cell area, and the adjoint is the
exact transpose of the derivative under those pairings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DivisionByZero, DomainError, FormatError, ShapeMismatch, SingularSystem
from .grids import ScalarGrid, VectorGrid

__all__ = [
    "LameField",
    "BoundaryConditions",
    "forward_solve",
    "frechet_apply",
    "frechet_adjoint",
    "young_modulus",
    "ElasticModel",
    "read_bc_config",
    "write_bc_config",
]

MU_FLOOR = 1e-6

_SIDES = ("top", "bottom", "left", "right")
_COMPS = ("ux", "uy", "both")


@dataclass
class LameField:
    """Pointwise-admissible Lame parameter pair on the pixel grid."""

    lam: ScalarGrid
    mu: ScalarGrid
    mu_floor: float = MU_FLOOR

    def __post_init__(self):
        if (self.lam.nx, self.lam.ny) != (self.mu.nx, self.mu.ny):
            raise ShapeMismatch("lambda and mu extents differ")
        if np.any(self.lam.data < 0):
            raise DomainError("lambda must be nonnegative everywhere")
        if np.any(self.mu.data < self.mu_floor):
            raise DomainError(f"mu must be at least {self.mu_floor} everywhere")

    @classmethod
    def constant(cls, nx, ny, lam, mu, spacing=1.0):
        return cls(ScalarGrid(nx, ny, np.full((ny, nx), float(lam)), spacing),
                   ScalarGrid(nx, ny, np.full((ny, nx), float(mu)), spacing))

    def copy(self):
        return LameField(self.lam.copy(), self.mu.copy(), self.mu_floor)


@dataclass
class BoundaryConditions:
    """Mixed displacement/traction boundary data.

    dirichlet entries are (side, components, value) with components one of
    'ux', 'uy', 'both'; value may be a scalar or an array over the side's
    nodes.  traction entries are (side, (tx, ty)).  A side may not carry
    both kinds.  The y axis runs from the bottom row (0) to the top row.
    """

    dirichlet: list
    traction: list = field(default_factory=list)
    body_force: VectorGrid | None = None

    def __post_init__(self):
        if not self.dirichlet:
            raise DomainError("at least one Dirichlet side is required")
        d_sides = set()
        for side, comps, _ in self.dirichlet:
            if side not in _SIDES:
                raise DomainError(f"unknown side '{side}'")
            if comps not in _COMPS:
                raise DomainError(f"unknown component selector '{comps}'")
            d_sides.add(side)
        for side, value in self.traction:
            if side not in _SIDES:
                raise DomainError(f"unknown side '{side}'")
            if side in d_sides:
                raise DomainError(f"side '{side}' has both Dirichlet and traction data")
            if len(value) != 2:
                raise DomainError("traction value must be a 2-vector")


def _side_nodes(side, nx, ny):
    if side == "bottom":
        return np.arange(nx)
    if side == "top":
        return (ny - 1) * nx + np.arange(nx)
    if side == "left":
        return np.arange(ny) * nx
    return np.arange(ny) * nx + (nx - 1)


def _element_matrices(h):
    """8x8 element stiffness for unit lambda and unit mu on a square cell."""
    gp = 1.0 / np.sqrt(3.0)
    corners = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])
    k_lam = np.zeros((8, 8))
    k_mu = np.zeros((8, 8))
    det_j = (h / 2.0) ** 2
    for xi in (-gp, gp):
        for eta in (-gp, gp):
            dn_dxi = 0.25 * corners[:, 0] * (1.0 + eta * corners[:, 1])
            dn_deta = 0.25 * corners[:, 1] * (1.0 + xi * corners[:, 0])
            dn_dx = dn_dxi * 2.0 / h
            dn_dy = dn_deta * 2.0 / h
            div = np.zeros(8)
            div[0::2] = dn_dx
            div[1::2] = dn_dy
            b = np.zeros((3, 8))
            b[0, 0::2] = dn_dx
            b[1, 1::2] = dn_dy
            b[2, 0::2] = dn_dy
            b[2, 1::2] = dn_dx
            k_lam += det_j * np.outer(div, div)
            k_mu += det_j * 2.0 * (b.T @ np.diag([1.0, 1.0, 0.5]) @ b)
    return k_lam, k_mu


class ElasticModel:
    """Discretization of one boundary-value problem.

    Holds the grid geometry, the Dirichlet partition, the lift and the load
    vector; stiffness assembly and factorization are per Lame field so the
    factorization can be reused for the derivative and adjoint solves.
    """

    def __init__(self, nx, ny, bc: BoundaryConditions, spacing=1.0):
        if nx < 2 or ny < 2:
            raise DomainError("elasticity needs at least a 2x2 grid")
        self.nx, self.ny, self.h = nx, ny, float(spacing)
        self.n_nodes = nx * ny
        self.bc = bc
        self.k_lam_e, self.k_mu_e = _element_matrices(self.h)

        idx = np.arange(self.n_nodes).reshape(ny, nx)
        n00 = idx[:-1, :-1].ravel()
        n10 = idx[:-1, 1:].ravel()
        n11 = idx[1:, 1:].ravel()
        n01 = idx[1:, :-1].ravel()
        self.cell_nodes = np.stack([n00, n10, n11, n01], axis=1)
        dofs = np.empty((self.cell_nodes.shape[0], 8), dtype=np.int64)
        dofs[:, 0::2] = 2 * self.cell_nodes
        dofs[:, 1::2] = 2 * self.cell_nodes + 1
        self.cell_dofs = dofs
        self._rows = np.repeat(dofs, 8, axis=1).ravel()
        self._cols = np.tile(dofs, (1, 8)).ravel()

        self._build_dirichlet()
        self._build_load()

    # -- boundary handling -------------------------------------------------

    def _build_dirichlet(self):
        lift = np.zeros(2 * self.n_nodes)
        fixed = np.zeros(2 * self.n_nodes, dtype=bool)
        for side, comps, value in self.bc.dirichlet:
            nodes = _side_nodes(side, self.nx, self.ny)
            sel = (0, 1) if comps == "both" else ((0,) if comps == "ux" else (1,))
            value = np.asarray(value, dtype=np.float64)
            for j, comp in enumerate(sel):
                if value.ndim == 0:
                    vals = np.full(nodes.size, float(value))
                elif value.ndim == 1:
                    if value.size != nodes.size:
                        raise ShapeMismatch(
                            f"Dirichlet value length {value.size} != side nodes {nodes.size}")
                    vals = value
                else:
                    vals = value[:, j]
                lift[2 * nodes + comp] = vals
                fixed[2 * nodes + comp] = True
        if not fixed.any():
            raise DomainError("Dirichlet boundary is empty")
        self.lift = lift
        self.fixed = fixed
        self.free = ~fixed

    def _build_load(self):
        load = np.zeros(2 * self.n_nodes)
        h = self.h
        for side, value in self.bc.traction:
            nodes = _side_nodes(side, self.nx, self.ny)
            t = np.asarray(value, dtype=np.float64)
            # trapezoidal edge quadrature: end nodes carry half an edge
            w = np.full(nodes.size, h)
            w[0] = w[-1] = h / 2.0
            load[2 * nodes] += w * t[0]
            load[2 * nodes + 1] += w * t[1]
        if self.bc.body_force is not None:
            f = self.bc.body_force
            if (f.nx, f.ny) != (self.nx, self.ny):
                raise ShapeMismatch("body force extents differ from the grid")
            load += (h * h) * self._node_weights_dof() * f.data.ravel()
        self.load = load

    def _node_weights_dof(self):
        w = self._node_weights()
        return np.repeat(w, 2)

    def _node_weights(self):
        """Fraction of a full cell area owned by each node (lumped mass)."""
        w = np.zeros(self.n_nodes)
        np.add.at(w, self.cell_nodes.ravel(), 0.25)
        return w

    # -- parameter handling -------------------------------------------------

    def cell_values(self, grid_data: np.ndarray) -> np.ndarray:
        """Per-cell value of a nodal field: average of the 4 corners."""
        return grid_data.ravel()[self.cell_nodes].mean(axis=1)

    def spread_to_nodes(self, cell_vals: np.ndarray) -> np.ndarray:
        """Exact transpose of :meth:`cell_values` (cell -> corner quarters)."""
        out = np.zeros(self.n_nodes)
        np.add.at(out, self.cell_nodes.ravel(),
                  np.repeat(cell_vals, 4) * 0.25)
        return out

    def assemble(self, p: LameField) -> sp.csc_matrix:
        lam_e = self.cell_values(p.lam.data)
        mu_e = self.cell_values(p.mu.data)
        data = (lam_e[:, None, None] * self.k_lam_e
                + mu_e[:, None, None] * self.k_mu_e).ravel()
        K = sp.csr_matrix((data, (self._rows, self._cols)),
                          shape=(2 * self.n_nodes, 2 * self.n_nodes))
        K.sum_duplicates()
        return K.tocsc()

    def factorize(self, p: LameField) -> "ElasticFactors":
        K = self.assemble(p)
        K_ff = K[self.free][:, self.free]
        try:
            lu = spla.splu(K_ff)
        except RuntimeError as exc:
            raise SingularSystem(f"stiffness factorization failed: {exc}")
        return ElasticFactors(self, p, K, K_ff, lu)


class ElasticFactors:
    """Factorized stiffness for one Lame field; supports the forward solve
    and any number of homogeneous-Dirichlet solves."""

    def __init__(self, model: ElasticModel, p: LameField, K, K_ff, lu):
        self.model = model
        self.p = p
        self.K = K
        self.K_ff = K_ff
        self._lu = lu

    def solve_forward(self) -> VectorGrid:
        m = self.model
        rhs = (m.load - self.K @ m.lift)[m.free]
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystem("forward solve produced non-finite values")
        rnorm = np.linalg.norm(self.K_ff @ x - rhs)
        scale = np.linalg.norm(rhs)
        if scale > 0 and rnorm > 1e-10 * scale:
            raise SingularSystem(f"reduced residual {rnorm / scale:.2e} too large")
        u = m.lift.copy()
        u[m.free] += x
        return VectorGrid(m.nx, m.ny, u.reshape(m.ny, m.nx, 2), m.h)

    def solve_homogeneous(self, rhs_full: np.ndarray) -> np.ndarray:
        """Solve K w = rhs with w = 0 on the Dirichlet nodes."""
        m = self.model
        w = np.zeros(2 * m.n_nodes)
        x = self._lu.solve(rhs_full[m.free])
        if not np.all(np.isfinite(x)):
            raise SingularSystem("solve produced non-finite values")
        w[m.free] = x
        return w

    # -- linearization -----------------------------------------------------

    def parameter_stiffness_apply(self, dlam, dmu, u_flat) -> np.ndarray:
        """K(dlam, dmu) @ u for a parameter direction (may be negative)."""
        m = self.model
        lam_e = m.cell_values(dlam)
        mu_e = m.cell_values(dmu)
        ue = u_flat[m.cell_dofs]
        contrib = (lam_e[:, None] * (ue @ m.k_lam_e.T)
                   + mu_e[:, None] * (ue @ m.k_mu_e.T))
        out = np.zeros(2 * m.n_nodes)
        np.add.at(out, m.cell_dofs.ravel(), contrib.ravel())
        return out

    def derivative_apply(self, dlam: np.ndarray, dmu: np.ndarray,
                         u: VectorGrid) -> VectorGrid:
        m = self.model
        rhs = -self.parameter_stiffness_apply(dlam, dmu, u.data.ravel())
        w = self.solve_homogeneous(rhs)
        return VectorGrid(m.nx, m.ny, w.reshape(m.ny, m.nx, 2), m.h)

    def derivative_adjoint(self, u: VectorGrid, w: VectorGrid):
        m = self.model
        q = self.solve_homogeneous((m.h * m.h) * w.data.ravel())
        u_flat = u.data.ravel()
        ue = u_flat[m.cell_dofs]
        qe = q[m.cell_dofs]
        cell_lam = np.einsum("ei,ij,ej->e", ue, m.k_lam_e, qe)
        cell_mu = np.einsum("ei,ij,ej->e", ue, m.k_mu_e, qe)
        inv_area = 1.0 / (m.h * m.h)
        g_lam = -inv_area * m.spread_to_nodes(cell_lam)
        g_mu = -inv_area * m.spread_to_nodes(cell_mu)
        return (ScalarGrid(m.nx, m.ny, g_lam.reshape(m.ny, m.nx), m.h),
                ScalarGrid(m.nx, m.ny, g_mu.reshape(m.ny, m.nx), m.h))


# ---------------------------------------------------------------------------
# public operations


def forward_solve(p: LameField, bc: BoundaryConditions) -> VectorGrid:
    """Displacement of the sample with Lame field p under bc."""
    model = ElasticModel(p.lam.nx, p.lam.ny, bc, p.lam.spacing)
    return model.factorize(p).solve_forward()


def frechet_apply(p: LameField, u: VectorGrid, dlam: ScalarGrid,
                  dmu: ScalarGrid, bc: BoundaryConditions) -> VectorGrid:
    """Directional derivative of the parameter-to-solution map at p in the
    direction (dlam, dmu), given u = forward_solve(p, bc)."""
    if (dlam.nx, dlam.ny) != (p.lam.nx, p.lam.ny):
        raise ShapeMismatch("direction extents differ from the parameter grid")
    model = ElasticModel(p.lam.nx, p.lam.ny, bc, p.lam.spacing)
    return model.factorize(p).derivative_apply(dlam.data, dmu.data, u)


def frechet_adjoint(p: LameField, u: VectorGrid, w: VectorGrid,
                    bc: BoundaryConditions):
    """Adjoint of the derivative applied to a displacement-space field w.

    One homogeneous solve with the same stiffness gives q; the gradient
    pair is the per-pixel evaluation of (-div u div q, -2 E(u):E(q)),
    realized as the average of the adjacent cells' Gauss means so that the
    discrete adjoint identity holds exactly.
    """
    if (w.nx, w.ny) != (p.lam.nx, p.lam.ny):
        raise ShapeMismatch("w extents differ from the parameter grid")
    model = ElasticModel(p.lam.nx, p.lam.ny, bc, p.lam.spacing)
    return model.factorize(p).derivative_adjoint(u, w)


def young_modulus(p: LameField) -> ScalarGrid:
    """Young's modulus E = mu (3 lambda + 2 mu) / (lambda + mu)."""
    lam = p.lam.data
    mu = p.mu.data
    denom = lam + mu
    if np.any(denom == 0):
        raise DivisionByZero("lambda + mu vanishes somewhere")
    return ScalarGrid(p.lam.nx, p.lam.ny, mu * (3.0 * lam + 2.0 * mu) / denom,
                      p.lam.spacing)


# ---------------------------------------------------------------------------
# boundary-condition config files


def read_bc_config(path) -> BoundaryConditions:
    """Parse lines `dirichlet <side> <ux|uy|both> <value>` and
    `traction <side> <tx> <ty>`."""
    dirichlet = []
    traction = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if parts[0] == "dirichlet" and len(parts) == 4:
                try:
                    value = float(parts[3])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad Dirichlet value")
                dirichlet.append((parts[1], parts[2], value))
            elif parts[0] == "traction" and len(parts) == 4:
                try:
                    tx, ty = float(parts[2]), float(parts[3])
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad traction value")
                traction.append((parts[1], (tx, ty)))
            else:
                raise FormatError(f"{path}:{lineno}: unrecognized boundary line")
    return BoundaryConditions(dirichlet=dirichlet, traction=traction)


def write_bc_config(path, bc: BoundaryConditions) -> None:
    lines = []
    for side, comps, value in bc.dirichlet:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 0:
            raise DomainError("only constant Dirichlet data can be serialized")
        lines.append(f"dirichlet {side} {comps} {float(value):.17g}")
    for side, value in bc.traction:
        lines.append(f"traction {side} {value[0]:.17g} {value[1]:.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
