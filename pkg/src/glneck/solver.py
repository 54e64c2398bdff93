"""Critical points of the Ginzburg-Landau energy: preconditioned gradient
descent with Armijo backtracking, damped Newton refinement, harmonic
extensions and epsilon-continuation sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from . import gl_core
from .domain import DomainGrid, Field

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# boundary data

def inverse_stereographic(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Inverse stereographic map C -> S^2, with 0 sent to the south pole."""
    d = 1.0 + x * x + y * y
    return np.stack([2.0 * x / d, 2.0 * y / d, (x * x + y * y - 1.0) / d], axis=-1)


@dataclass
class BoundaryData:
    kind: str = "constant"
    value: tuple[float, ...] = (0.0, 0.0, 1.0)
    lam: float = 1.0
    samples: Field | None = None

    def trace(self, theta: np.ndarray, n_comp: int) -> np.ndarray:
        """Boundary values on the unit circle at the given angles."""
        theta = np.asarray(theta, dtype=float)
        if self.kind == "constant":
            v = np.zeros(n_comp)
            v[: len(self.value)] = self.value
            return np.broadcast_to(v, theta.shape + (n_comp,)).copy()
        if self.kind == "stereographic_degree1":
            if n_comp < 3:
                raise ValueError("degree-1 data needs n_comp >= 3")
            s = inverse_stereographic(self.lam * np.cos(theta), self.lam * np.sin(theta))
            out = np.zeros(theta.shape + (n_comp,))
            out[..., :3] = s
            return out
        raise ValueError(f"boundary kind {self.kind!r} has no circle trace")

    def pinned_values(self, grid: DomainGrid, n_comp: int) -> np.ndarray:
        vals = np.zeros(grid.shape + (n_comp,))
        if self.kind == "custom":
            if self.samples is None or self.samples.values.shape != vals.shape:
                raise ValueError("custom boundary samples do not match the grid")
            vals[~grid.free] = self.samples.values[~grid.free]
            return vals
        X, Y = grid.coords()
        theta = np.arctan2(Y - grid.center[1], X - grid.center[0])
        t = self.trace(theta, n_comp)
        vals[~grid.free] = t[~grid.free]
        return vals


def apply_boundary(u: Field, bc: BoundaryData | None) -> Field:
    if bc is None or u.grid.periodic:
        return u
    pinned = bc.pinned_values(u.grid, u.n_comp)
    v = u.values.copy()
    v[~u.grid.free] = pinned[~u.grid.free]
    return Field(u.grid, v)


# ---------------------------------------------------------------------------
# results

@dataclass
class SolveResult:
    field: Field
    converged: bool
    iterations: int
    residual: float
    energy: float
    flag: str = "converged"
    history: list = field(default_factory=list, repr=False)


def max_residual(u: Field, eps: float) -> float:
    r = gl_core.el_residual(u, eps).values
    return float(np.max(np.abs(r)))


def _free_vec(u: Field) -> np.ndarray:
    return u.values[u.grid.free].reshape(-1)


def _set_free(u: Field, vec: np.ndarray) -> Field:
    v = u.values.copy()
    v[u.grid.free] = vec.reshape(-1, u.n_comp)
    return Field(u.grid, v)


# ---------------------------------------------------------------------------
# gradient descent

class _Preconditioner:
    """Factorised scalar operator K + c*vol applied to each component."""

    def __init__(self, grid: DomainGrid, n_comp: int, shift: float):
        K, _ = gl_core.stiffness(grid)
        vol = grid.volume()[grid.free]
        P = (K + sp.diags(shift * vol)).tocsc()
        self.lu = spla.splu(P)
        self.n_comp = n_comp

    def solve(self, g: np.ndarray) -> np.ndarray:
        G = g.reshape(-1, self.n_comp)
        return self.lu.solve(np.ascontiguousarray(G)).reshape(-1)


def minimize(u0: Field, eps: float, bc: BoundaryData | None = None, tol: float = 1e-6,
             max_iter: int = 2000, precondition: bool = True, armijo: float = 1e-4
             ) -> SolveResult:
    """Armijo gradient descent on E_eps.

    The descent direction is the gradient taken in the H^1-type inner product
    ``K + vol/eps^2`` when ``precondition`` is set, which keeps the iteration
    count independent of the grid step.  Every accepted step decreases the
    energy strictly.
    """
    u = apply_boundary(u0, bc)
    g = u.grid
    pre = _Preconditioner(g, u.n_comp, 1.0 / eps**2) if precondition else None
    E = gl_core.energy_value(u, eps)
    hist = [E]
    alpha = 1.0
    res = max_residual(u, eps)
    it = 0
    while res > tol and it < max_iter:
        grad = gl_core.energy_gradient(u, eps)[g.free].reshape(-1)
        d = -pre.solve(grad) if pre is not None else -grad / g.volume()[g.free].repeat(u.n_comp)
        slope = float(grad @ d)
        if slope >= 0:
            break
        x0 = _free_vec(u)
        accepted = False
        a = min(1.0, 2.0 * alpha)
        for _ in range(60):
            trial = _set_free(u, x0 + a * d)
            Et = gl_core.energy_value(trial, eps)
            if Et <= E + armijo * a * slope and Et < E:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            break
        u, E, alpha = trial, Et, a
        hist.append(E)
        it += 1
        res = max_residual(u, eps)
    conv = res <= tol
    return SolveResult(u, conv, it, res, E, "converged" if conv else "unconverged", hist)


# ---------------------------------------------------------------------------
# Newton

def _solve_newton_system(H: sp.csr_matrix, rhs: np.ndarray, rtol: float):
    """CG on H s = rhs preconditioned by a sparse LU of H."""
    lu = spla.splu(H.tocsc())
    s0 = lu.solve(rhs)
    M = spla.LinearOperator(H.shape, matvec=lu.solve, dtype=float)
    s, info = spla.cg(H, rhs, x0=s0, rtol=rtol, atol=0.0, M=M, maxiter=50)
    return s, info


def newton_refine(u: Field, eps: float, tol: float = 1e-10, max_steps: int = 20,
                  cg_rtol: float = 1e-10) -> SolveResult:
    """Damped Newton on the residual with the full second variation as Jacobian.

    A step is accepted only if it lowers the volume-weighted residual norm.
    Indefinite curvature along the Newton direction, or a failed line search,
    triggers a preconditioned gradient step; if that also fails the iterate is
    returned with flag ``fallback``.
    """
    g = u.grid
    vol = np.repeat(g.volume()[g.free], u.n_comp)

    def merit(f: Field) -> float:
        r = gl_core.el_residual(f, eps).values[g.free].reshape(-1)
        return float(np.sqrt(np.sum(vol * r * r)))

    res = max_residual(u, eps)
    m = merit(u)
    hist = [res]
    steps = 0
    flag = "converged"
    while res > tol and steps < max_steps:
        grad = gl_core.energy_gradient(u, eps)[g.free].reshape(-1)
        H = gl_core.hessian_matrix(u, eps, full=True)
        try:
            s, info = _solve_newton_system(H, -grad, cg_rtol)
        except RuntimeError:
            s, info = None, -1
        use_newton = s is not None and np.all(np.isfinite(s))
        if use_newton:
            curv = float(s @ (H @ s))
            use_newton = curv > 0 and float(grad @ s) < 0
        accepted = False
        x0 = _free_vec(u)
        if use_newton:
            a = 1.0
            for _ in range(30):
                trial = _set_free(u, x0 + a * s)
                mt = merit(trial)
                if mt < m:
                    accepted = True
                    break
                a *= 0.5
        if not accepted:
            gd = minimize(u, eps, tol=0.0, max_iter=1)
            if gd.iterations == 0 or merit(gd.field) >= m:
                flag = "fallback"
                break
            trial, mt = gd.field, merit(gd.field)
            flag = "fallback"
        u, m = trial, mt
        res = max_residual(u, eps)
        hist.append(res)
        steps += 1
    conv = res <= tol
    if conv and flag != "fallback":
        flag = "converged"
    elif not conv and flag == "converged":
        flag = "unconverged"
    return SolveResult(u, conv, steps, res, gl_core.energy_value(u, eps), flag, hist)


# ---------------------------------------------------------------------------
# harmonic extension

def _disk_shortley_weller(grid: DomainGrid):
    """Second-order Laplacian on disk nodes with circle-intersection boundary points.

    Returns ``(A, ghosts)`` where ``A`` acts on free nodes (scaled by h^2) and
    ``ghosts`` lists ``(row, weight, x, y)`` boundary-point contributions.
    """
    h = grid.spacing
    R = grid.radius
    cx, cy = grid.center
    idx = gl_core.free_index(grid)
    X, Y = grid.coords()
    rows, cols, vals = [], [], []
    g_rows, g_w, g_x, g_y = [], [], [], []
    js, is_ = np.nonzero(grid.free)
    for j, i in zip(js, is_):
        p = idx[j, i]
        x0, y0 = X[j, i] - cx, Y[j, i] - cy
        diag = 0.0
        for ex, ey in ((1, 0), (0, 1)):
            arms = []
            for sgn in (1, -1):
                jj, ii = j + sgn * ey, i + sgn * ex
                if idx[jj, ii] >= 0:
                    arms.append((1.0, idx[jj, ii], None))
                else:
                    # distance t along (sgn*ex, sgn*ey) to the circle
                    bx, by = sgn * ex, sgn * ey
                    b = x0 * bx + y0 * by
                    c = x0 * x0 + y0 * y0 - R * R
                    t = -b + math.sqrt(max(b * b - c, 0.0))
                    t = min(max(t / h, 1e-6), 1.0)
                    arms.append((t, -1, (cx + x0 + t * h * bx, cy + y0 + t * h * by)))
            (tp, qp, bp), (tm, qm, bm) = arms
            wp = 2.0 / (tp * (tp + tm))
            wm = 2.0 / (tm * (tp + tm))
            diag += wp + wm
            for w_, q_, b_ in ((wp, qp, bp), (wm, qm, bm)):
                if q_ >= 0:
                    rows.append(p)
                    cols.append(q_)
                    vals.append(-w_)
                else:
                    g_rows.append(p)
                    g_w.append(w_)
                    g_x.append(b_[0])
                    g_y.append(b_[1])
        rows.append(p)
        cols.append(p)
        vals.append(diag)
    n = int(grid.free.sum())
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return A, (np.array(g_rows), np.array(g_w), np.array(g_x), np.array(g_y))


def disk_poisson_operator(grid: DomainGrid):
    if getattr(grid, "_sw_cache", None) is None:
        object.__setattr__(grid, "_sw_cache", _disk_shortley_weller(grid))
    return grid._sw_cache


def harmonic_extension(boundary, grid: DomainGrid, n_comp: int | None = None) -> Field:
    """Componentwise discrete harmonic function with the given boundary trace.

    ``boundary`` is either a :class:`BoundaryData` (on the disk its circle
    trace is imposed at the exact boundary crossings, giving second-order
    accuracy) or a :class:`Field` whose pinned-node values are used.
    """
    if grid.periodic:
        raise ValueError("harmonic extension needs a Dirichlet grid")
    if isinstance(boundary, Field):
        n_comp = boundary.n_comp
        pinned = boundary.values
        use_sw = False
    else:
        if n_comp is None:
            n_comp = len(boundary.value) if boundary.kind == "constant" else 3
        pinned = boundary.pinned_values(grid, n_comp)
        use_sw = grid.kind == "disk" and boundary.kind != "custom"
    out = pinned.copy()
    out[grid.free] = 0.0
    if use_sw:
        A, (gr, gw, gx, gy) = disk_poisson_operator(grid)
        theta = np.arctan2(gy - grid.center[1], gx - grid.center[0])
        gv = boundary.trace(theta, n_comp)
        rhs = np.zeros((A.shape[0], n_comp))
        np.add.at(rhs, gr, gw[:, None] * gv)
        sol = spla.splu(A.tocsc()).solve(rhs)
    else:
        K, B = gl_core.stiffness(grid)
        flat = pinned.reshape(-1, n_comp).copy()
        flat[grid.free.reshape(-1)] = 0.0
        rhs = B @ flat
        sol = spla.splu(K.tocsc()).solve(np.ascontiguousarray(rhs))
    out[grid.free] = sol
    return Field(grid, out)


# ---------------------------------------------------------------------------
# scenarios and sweeps

def smooth_perturbation(grid: DomainGrid, n_comp: int, seed: int, amplitude: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(grid.shape + (n_comp,))
    sigma = max(1.0, grid.n_x / 16.0)
    mode = "wrap" if grid.periodic else "nearest"
    sm = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode=mode)
    sm = sm / max(np.max(np.abs(sm)), 1e-300)
    sm[~grid.free] = 0.0
    return amplitude * sm


def initial_guess(grid: DomainGrid, bc: BoundaryData, n_comp: int, seed: int,
                  amplitude: float) -> Field:
    if grid.periodic:
        base = bc.trace(np.zeros(grid.shape), n_comp) if bc.kind != "custom" else bc.samples.values
        base = np.array(base, dtype=float)
    else:
        base = harmonic_extension(bc, grid, n_comp).values
    return Field(grid, base + smooth_perturbation(grid, n_comp, seed, amplitude))


@dataclass
class SweepStep:
    epsilon: float
    field: Field
    report: gl_core.EnergyReport
    gd_iterations: int
    newton_steps: int
    residual: float
    converged: bool
    flag: str
    concentration: object = None


@dataclass
class SweepRecord:
    steps: list[SweepStep]
    truncated: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def epsilons(self) -> list[float]:
        return [s.epsilon for s in self.steps]

    @property
    def energies(self) -> list[float]:
        return [s.report.total for s in self.steps]

    @property
    def Lambda(self) -> float:
        return max(self.energies) if self.steps else 0.0


def solve_at(u0: Field, eps: float, bc: BoundaryData | None, gd_tol: float, max_iter: int,
             newton_tol: float, newton_max_steps: int, cg_rtol: float) -> tuple[SolveResult, SolveResult]:
    gd = minimize(u0, eps, bc, tol=gd_tol, max_iter=max_iter)
    nt = newton_refine(gd.field, eps, tol=newton_tol, max_steps=newton_max_steps, cg_rtol=cg_rtol)
    return gd, nt


def sweep_epsilons(u0: Field, bc: BoundaryData | None, epsilons: Sequence[float],
                   gd_tol: float = 1e-4, max_iter: int = 3000, newton_tol: float = 1e-9,
                   newton_max_steps: int = 20, cg_rtol: float = 1e-10) -> SweepRecord:
    """Solve at each epsilon, warm-starting from the previous solution."""
    steps: list[SweepStep] = []
    warnings: list[str] = []
    truncated = False
    u = u0
    for k, eps in enumerate(epsilons):
        gd, nt = solve_at(u, eps, bc, gd_tol, max_iter, newton_tol, newton_max_steps, cg_rtol)
        if not nt.converged:
            if k == 0:
                raise RuntimeError(
                    f"first epsilon {eps} unconverged (residual {nt.residual:.3e}, flag {nt.flag})"
                )
            msg = f"epsilon {eps} unconverged (residual {nt.residual:.3e}); sweep truncated"
            log.warning(msg)
            warnings.append(msg)
            truncated = True
            break
        u = nt.field
        steps.append(SweepStep(
            epsilon=float(eps),
            field=u,
            report=gl_core.energy(u, eps),
            gd_iterations=gd.iterations,
            newton_steps=nt.iterations,
            residual=nt.residual,
            converged=True,
            flag=nt.flag,
        ))
    return SweepRecord(steps, truncated, warnings)


def continuation_sweep(spec) -> SweepRecord:
    """Run the epsilon schedule of a :class:`~glneck.config.ScenarioSpec`."""
    grid = spec.build_grid()
    bc = spec.boundary_data(grid)
    s = spec.solver
    u0 = initial_guess(grid, bc, spec.target.n_comp, s.seed, s.perturbation)
    return sweep_epsilons(u0, None if grid.periodic else bc, spec.epsilon.schedule(),
                          s.gd_tol, s.max_iter, s.newton_tol, s.newton_max_steps, s.cg_rtol)
