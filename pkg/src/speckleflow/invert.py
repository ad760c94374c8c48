"""Iterative regularization for the elastography inverse problem.

Given a measured displacement field, the Lame parameters are recovered by
Landweber-type iteration: each step evaluates the forward elasticity
operator, pulls the data residual back through the adjoint of its
derivative, and takes a gradient step, optionally with Nesterov
extrapolation.  Freezing the parameters near the boundary (where they are
assumed known) is supported through a binary mask whose entries never
change across the iteration.

Discrete L2 inner products are pixel sums weighted by the cell area; the
adjoint solves in :mod:`speckleflow.elastic` are exact transposes under
these pairings, so the stepsizes below have their textbook meaning.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .config import check_keys, parse_bool, read_kv_config
from .elastic import BoundaryConditions, ElasticModel, LameField, MU_FLOOR
from .errors import DomainError, FormatError, ShapeMismatch
from .grids import ScalarGrid, VectorGrid

__all__ = [
    "InversionConfig",
    "IterationTrace",
    "landweber_step",
    "nesterov_iterate",
    "stop_discrepancy",
    "stop_heuristic",
    "field_error",
    "field_inner",
    "field_norm",
    "boundary_band_mask",
    "read_trace_csv",
    "write_trace_csv",
]

_STEPSIZES = ("steepest", "printed", "constant")
_STOPPING = ("discrepancy", "heuristic", "manual")


def field_inner(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> float:
    """Discrete L2 pairing: cell-area-weighted pixel sum."""
    return float(np.sum(a * b)) * spacing * spacing


def field_norm(a: np.ndarray, spacing: float = 1.0) -> float:
    return math.sqrt(field_inner(a, a, spacing))


def field_error(u_est: VectorGrid, u_true: VectorGrid):
    """Relative L2 errors (total, x component, y component).

    A component whose true field vanishes gets error inf (0 if the estimate
    vanishes too); a vanishing total truth is a usage error.
    """
    if (u_est.nx, u_est.ny) != (u_true.nx, u_true.ny):
        raise ShapeMismatch("field extents differ")
    diff = u_est.data - u_true.data
    denom = np.linalg.norm(u_true.data)
    if denom == 0:
        raise DomainError("true field has zero norm")
    total = float(np.linalg.norm(diff) / denom)
    comps = []
    for c in range(2):
        dc = np.linalg.norm(diff[:, :, c])
        tc = np.linalg.norm(u_true.data[:, :, c])
        if tc == 0:
            comps.append(0.0 if dc == 0 else math.inf)
        else:
            comps.append(float(dc / tc))
    return total, comps[0], comps[1]


def boundary_band_mask(nx: int, ny: int, width: int, spacing: float = 1.0) -> ScalarGrid:
    """Binary mask that freezes a band of pixels along all four sides."""
    if width < 0:
        raise DomainError("band width must be nonnegative")
    m = np.zeros((ny, nx))
    if width > 0:
        m[:width, :] = 1.0
        m[-width:, :] = 1.0
        m[:, :width] = 1.0
        m[:, -width:] = 1.0
    return ScalarGrid(nx, ny, m, spacing)


@dataclass
class InversionConfig:
    """Settings for the Landweber/Nesterov loop."""

    initial: LameField | None = None
    lambda0: float = 490.0
    mu0: float = 10.0
    tau: float = 1.5
    delta: float = 0.0
    max_iter: int = 100
    acceleration: bool = True
    stepsize: str = "steepest"
    omega: float = 1.0
    boundary_mask: ScalarGrid | None = None
    stopping: str = "manual"
    manual_k: int = 100

    def __post_init__(self):
        if self.stepsize not in _STEPSIZES:
            raise DomainError(f"stepsize must be one of {_STEPSIZES}")
        if self.stopping not in _STOPPING:
            raise DomainError(f"stopping must be one of {_STOPPING}")
        if self.stopping == "discrepancy" and self.tau <= 1:
            raise DomainError("tau must exceed 1 for the discrepancy principle")
        if self.delta < 0:
            raise DomainError("delta must be nonnegative")
        if self.max_iter < 1:
            raise DomainError("max_iter must be at least 1")
        if self.stopping == "manual" and not 0 <= self.manual_k:
            raise DomainError("manual stopping index must be nonnegative")
        if self.boundary_mask is not None:
            vals = np.unique(self.boundary_mask.data)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise DomainError("boundary mask must be binary")

    def initial_for(self, nx: int, ny: int, spacing: float = 1.0) -> LameField:
        if self.initial is not None:
            return self.initial
        return LameField.constant(nx, ny, self.lambda0, self.mu0, spacing)

    @classmethod
    def from_config(cls, path, mask: ScalarGrid | None = None) -> "InversionConfig":
        cfg = read_kv_config(path)
        check_keys(cfg, {"tau", "delta", "max_iter", "acceleration", "stepsize",
                         "stopping", "mask_file", "lambda0", "mu0"}, "inversion")
        kwargs = {}
        if "tau" in cfg:
            kwargs["tau"] = float(cfg["tau"])
        if "delta" in cfg:
            kwargs["delta"] = float(cfg["delta"])
        if "max_iter" in cfg:
            kwargs["max_iter"] = int(cfg["max_iter"])
        if "acceleration" in cfg:
            kwargs["acceleration"] = parse_bool(cfg["acceleration"])
        if "lambda0" in cfg:
            kwargs["lambda0"] = float(cfg["lambda0"])
        if "mu0" in cfg:
            kwargs["mu0"] = float(cfg["mu0"])
        if "stepsize" in cfg:
            raw = cfg["stepsize"].strip()
            m = re.fullmatch(r"constant\(([^)]+)\)", raw)
            if m:
                kwargs["stepsize"] = "constant"
                kwargs["omega"] = float(m.group(1))
            else:
                kwargs["stepsize"] = raw
        if "stopping" in cfg:
            raw = cfg["stopping"].strip()
            m = re.fullmatch(r"manual\((\d+)\)", raw)
            if m:
                kwargs["stopping"] = "manual"
                kwargs["manual_k"] = int(m.group(1))
            else:
                kwargs["stopping"] = raw
        return cls(boundary_mask=mask, **kwargs)


@dataclass
class IterationTrace:
    """Append-only per-iterate records.

    Row j belongs to iterate j: its data residual, the stepsize of the step
    taken from it (nan on the final row), and the heuristic-rule value
    sqrt(k) * residual (inf for k = 0, where the rule is undefined).
    """

    ks: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    stepsizes: list = field(default_factory=list)
    heuristics: list = field(default_factory=list)
    stopped_by: str = ""
    k_star: int | None = None

    def append(self, k, residual, stepsize):
        if not math.isfinite(residual):
            raise DomainError("residual norm must be finite")
        self.ks.append(int(k))
        self.residuals.append(float(residual))
        self.stepsizes.append(float(stepsize))
        self.heuristics.append(math.sqrt(k) * residual if k >= 1 else math.inf)

    def __len__(self):
        return len(self.ks)


def stop_discrepancy(trace: IterationTrace, tau: float, delta: float):
    """Smallest recorded k with residual <= tau * delta, else None."""
    if tau <= 1:
        raise DomainError("tau must exceed 1")
    bound = tau * delta
    for k, r in zip(trace.ks, trace.residuals):
        if r <= bound:
            return k
    return None


def stop_heuristic(trace: IterationTrace) -> int:
    """Argmin of sqrt(k) * residual over k >= 1 (ties: smallest k)."""
    if len(trace) == 0:
        raise DomainError("trace is empty")
    best_k, best_v = None, math.inf
    for k, v in zip(trace.ks, trace.heuristics):
        if k >= 1 and v < best_v:
            best_k, best_v = k, v
    if best_k is None:
        return trace.ks[0]
    return best_k


# ---------------------------------------------------------------------------
# iteration


def nesterov_alpha(k: int) -> float:
    """Extrapolation weight (k - 1) / (k + 2) of the k-th accelerated step."""
    if k < 1:
        raise DomainError("iteration index must be at least 1")
    return (k - 1) / (k + 2)


def _masked(arr: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return arr if mask is None else arr * (1.0 - mask)


def _project(lam: np.ndarray, mu: np.ndarray):
    return np.maximum(lam, 0.0), np.maximum(mu, MU_FLOOR)


def _stepsize(cfg: InversionConfig, factors, u, r_data, s_lam, s_mu, h: float):
    """Stepsize for the masked gradient direction (s_lam, s_mu)."""
    s_sq = field_inner(s_lam, s_lam, h) + field_inner(s_mu, s_mu, h)
    if s_sq == 0:
        return 0.0
    if cfg.stepsize == "constant":
        return cfg.omega
    if cfg.stepsize == "printed":
        # literal reading of the published rule: residual norm over the
        # norm of the pulled-back residual (the minimal-error stepsize)
        r_sq = field_inner(r_data, r_data, h)
        return r_sq / s_sq
    fs = factors.derivative_apply(s_lam, s_mu, u)
    fs_sq = field_inner(fs.data, fs.data, h)
    if fs_sq == 0:
        return 0.0
    return s_sq / fs_sq


def _one_step(model: ElasticModel, cfg: InversionConfig, lam, mu, udelta_data, h):
    """Forward solve, masked gradient, stepsize and projected update at the
    point (lam, mu).  Returns (new_lam, new_mu, stepsize, residual_norm)."""
    p = LameField(ScalarGrid(model.nx, model.ny, lam, h),
                  ScalarGrid(model.nx, model.ny, mu, h))
    factors = model.factorize(p)
    u = factors.solve_forward()
    r = u.data - udelta_data
    rnorm = field_norm(r, h)
    g_lam, g_mu = factors.derivative_adjoint(
        u, VectorGrid(model.nx, model.ny, r, h))
    mask = None if cfg.boundary_mask is None else cfg.boundary_mask.data
    s_lam = _masked(g_lam.data, mask)
    s_mu = _masked(g_mu.data, mask)
    omega = _stepsize(cfg, factors, u, r, s_lam, s_mu, h)
    if omega == 0.0:
        return lam, mu, 0.0, rnorm
    new_lam, new_mu = _project(lam - omega * s_lam, mu - omega * s_mu)
    return new_lam, new_mu, omega, rnorm


def landweber_step(p: LameField, udelta: VectorGrid, bc: BoundaryConditions,
                   cfg: InversionConfig):
    """One plain Landweber step from p.

    Returns (updated LameField, stepsize, residual norm at p).  Masked
    pixels receive a zero update; the result is projected back onto the
    admissible set (lambda >= 0, mu >= mu_floor).
    """
    h = p.lam.spacing
    model = ElasticModel(p.lam.nx, p.lam.ny, bc, h)
    lam, mu, omega, rnorm = _one_step(model, cfg, p.lam.data, p.mu.data,
                                      udelta.data, h)
    out = LameField(ScalarGrid(model.nx, model.ny, lam, h),
                    ScalarGrid(model.nx, model.ny, mu, h))
    return out, omega, rnorm


def nesterov_iterate(cfg: InversionConfig, udelta: VectorGrid,
                     bc: BoundaryConditions):
    """Full iteration with the configured stopping rule.

    With acceleration the update is taken from the extrapolated point
    p_k + (k-1)/(k+2) (p_k - p_{k-1}) and the stepsize is computed there;
    the trace still records residuals at the primary iterates.  With
    acceleration off this is exactly the plain Landweber loop.  If the
    stopping rule does not trigger within max_iter, the best-so-far iterate
    (smallest residual; heuristic argmin for heuristic stopping) is
    returned and the trace is flagged 'max_iter'.
    """
    h = udelta.spacing
    nx, ny = udelta.nx, udelta.ny
    model = ElasticModel(nx, ny, bc, h)
    initial = cfg.initial_for(nx, ny, h)
    if (initial.lam.nx, initial.lam.ny) != (nx, ny):
        raise ShapeMismatch("initial guess extents differ from the data grid")
    if cfg.boundary_mask is not None and \
            (cfg.boundary_mask.nx, cfg.boundary_mask.ny) != (nx, ny):
        raise ShapeMismatch("boundary mask extents differ from the data grid")

    trace = IterationTrace()
    udelta_data = udelta.data
    prev_lam = cur_lam = initial.lam.data.copy()
    prev_mu = cur_mu = initial.mu.data.copy()

    n_steps = cfg.manual_k if cfg.stopping == "manual" else cfg.max_iter
    n_steps = min(n_steps, cfg.max_iter)

    best_res = math.inf
    best = (cur_lam, cur_mu, 0)
    best_heur = math.inf
    best_h = (cur_lam, cur_mu, 0)

    def bookkeep(k, rnorm, lam, mu):
        nonlocal best_res, best, best_heur, best_h
        if rnorm < best_res:
            best_res = rnorm
            best = (lam, mu, k)
        hval = math.sqrt(k) * rnorm if k >= 1 else math.inf
        if hval < best_heur:
            best_heur = hval
            best_h = (lam, mu, k)

    stopped = None
    for step in range(1, n_steps + 1):
        alpha = nesterov_alpha(step) if cfg.acceleration else 0.0
        if alpha == 0.0:
            bar_lam, bar_mu = cur_lam, cur_mu
        else:
            bar_lam, bar_mu = _project(cur_lam + alpha * (cur_lam - prev_lam),
                                       cur_mu + alpha * (cur_mu - prev_mu))

        new_lam, new_mu, omega, r_bar = _one_step(model, cfg, bar_lam, bar_mu,
                                                  udelta_data, h)
        if alpha == 0.0:
            r_cur = r_bar
        else:
            p_cur = LameField(ScalarGrid(nx, ny, cur_lam, h),
                              ScalarGrid(nx, ny, cur_mu, h))
            u_cur = model.factorize(p_cur).solve_forward()
            r_cur = field_norm(u_cur.data - udelta_data, h)

        k = step - 1
        trace.append(k, r_cur, omega)
        bookkeep(k, r_cur, cur_lam, cur_mu)

        if cfg.stopping == "discrepancy" and r_cur <= cfg.tau * cfg.delta:
            stopped = ("discrepancy", k, (cur_lam, cur_mu))
            break
        prev_lam, prev_mu = cur_lam, cur_mu
        cur_lam, cur_mu = new_lam, new_mu

    if stopped is None:
        # final iterate's residual
        p_fin = LameField(ScalarGrid(nx, ny, cur_lam, h),
                          ScalarGrid(nx, ny, cur_mu, h))
        u_fin = model.factorize(p_fin).solve_forward()
        r_fin = field_norm(u_fin.data - udelta_data, h)
        k = len(trace)
        trace.append(k, r_fin, math.nan)
        bookkeep(k, r_fin, cur_lam, cur_mu)
        if cfg.stopping == "discrepancy" and r_fin <= cfg.tau * cfg.delta:
            stopped = ("discrepancy", k, (cur_lam, cur_mu))
        elif cfg.stopping == "manual":
            stopped = ("manual", k, (cur_lam, cur_mu))
        elif cfg.stopping == "heuristic":
            stopped = ("heuristic", best_h[2], (best_h[0], best_h[1]))
        else:
            stopped = ("max_iter", best[2], (best[0], best[1]))

    trace.stopped_by, trace.k_star, (lam, mu) = stopped
    result = LameField(ScalarGrid(nx, ny, lam.copy(), h),
                       ScalarGrid(nx, ny, mu.copy(), h))
    return result, trace


# ---------------------------------------------------------------------------
# trace CSV

_TRACE_HEADER = "k,residual,stepsize,heuristic"


def write_trace_csv(path, trace: IterationTrace) -> None:
    lines = [_TRACE_HEADER]
    for k, r, s, hv in zip(trace.ks, trace.residuals, trace.stepsizes,
                           trace.heuristics):
        lines.append(f"{k},{r:.17g},{s:.17g},{hv:.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_trace_csv(path) -> IterationTrace:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != _TRACE_HEADER:
        raise FormatError(f"{path}: expected header '{_TRACE_HEADER}'")
    trace = IterationTrace()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields")
        try:
            k = int(parts[0])
            r = float(parts[1])
            s = float(parts[2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric field")
        trace.append(k, r, s)
    return trace
