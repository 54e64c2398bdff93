"""Ginzburg-Landau energy, its gradient and Hessian, and the identity checks
(conservation law, Hopf differential, Pohozaev, Bochner, modulus equation).

The Dirichlet part is discretised on grid edges,
``1/2 * sum_edges |u_a - u_b|^2`` (conformally invariant, so no metric factor
appears), and the potential with the node volume ``exp(2 lambda) h^2``.  With
this choice the residual ``-Delta_h u - u (1-|u|^2)/eps^2`` is exactly the
volume-weighted gradient of the discrete energy.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_legendre

from .domain import DomainGrid, Field, dx, dy, lap5, laplace_beltrami, polar_resample


@dataclass
class EnergyReport:
    epsilon: float
    dirichlet: float
    potential: float
    total: float
    sup_modulus: float
    density: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "dirichlet": self.dirichlet,
            "potential": self.potential,
            "total": self.total,
            "sup_modulus": self.sup_modulus,
        }


@dataclass
class PohozaevReport:
    radius: float
    interior_potential: float
    boundary_term: float
    defect: float
    constant: float
    identity_residual: float


@dataclass
class BochnerReport:
    lhs: np.ndarray = field(repr=False)
    rhs: np.ndarray = field(repr=False)
    violation_fraction: float = 0.0
    constant: float = 0.0
    measured_constant: float = 0.0


@dataclass
class ModulusReport:
    residual: np.ndarray = field(repr=False)
    splitting_defect: np.ndarray = field(repr=False)
    region: np.ndarray = field(repr=False)

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual[self.region]))) if self.region.any() else 0.0

    @property
    def max_defect(self) -> float:
        return float(np.max(np.abs(self.splitting_defect[self.region]))) if self.region.any() else 0.0


def _check_eps(eps: float) -> float:
    eps = float(eps)
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    return eps


# ---------------------------------------------------------------------------
# edges

def _edge_squares(grid: DomainGrid, a: np.ndarray):
    """Squared edge differences and active-edge masks in x and y."""
    if grid.periodic:
        ex = np.roll(a, -1, 1) - a
        ey = np.roll(a, -1, 0) - a
        sx = np.sum(ex * ex, axis=-1) if a.ndim == 3 else ex * ex
        sy = np.sum(ey * ey, axis=-1) if a.ndim == 3 else ey * ey
        return sx, sy, None, None
    ex = a[:, 1:] - a[:, :-1]
    ey = a[1:] - a[:-1]
    sx = np.sum(ex * ex, axis=-1) if a.ndim == 3 else ex * ex
    sy = np.sum(ey * ey, axis=-1) if a.ndim == 3 else ey * ey
    ins = grid.inside
    mx = ins[:, 1:] | ins[:, :-1]
    my = ins[1:] | ins[:-1]
    return sx * mx, sy * my, mx, my


def dirichlet_sum(grid: DomainGrid, a: np.ndarray) -> float:
    sx, sy, _, _ = _edge_squares(grid, a)
    return 0.5 * (float(np.sum(sx)) + float(np.sum(sy)))


def gradient_density(grid: DomainGrid, a: np.ndarray) -> np.ndarray:
    """Per-node |grad a|^2 (flat), the average of the four one-sided squares.

    Summing ``h^2/2`` times this over all nodes reproduces the edge energy.
    """
    sx, sy, _, _ = _edge_squares(grid, a)
    s = np.zeros(grid.shape)
    if grid.periodic:
        s += sx + np.roll(sx, 1, 1) + sy + np.roll(sy, 1, 0)
    else:
        s[:, :-1] += sx
        s[:, 1:] += sx
        s[:-1] += sy
        s[1:] += sy
    return 0.5 * s / grid.spacing**2


def energy(u: Field, eps: float) -> EnergyReport:
    eps = _check_eps(eps)
    g = u.grid
    a = u.values
    m2 = np.sum(a * a, axis=-1)
    pot_density = (1.0 - m2) ** 2 / (4.0 * eps**2)
    vol = g.volume()
    dirichlet = dirichlet_sum(g, a)
    potential = float(np.sum(vol * pot_density))
    density = 0.5 * np.exp(-2.0 * g.lambda_field) * gradient_density(g, a) + pot_density
    return EnergyReport(
        epsilon=eps,
        dirichlet=dirichlet,
        potential=potential,
        total=dirichlet + potential,
        sup_modulus=float(np.sqrt(m2.max())),
        density=density,
    )


def energy_value(u: Field, eps: float) -> float:
    g = u.grid
    m2 = np.sum(u.values**2, axis=-1)
    return dirichlet_sum(g, u.values) + float(np.sum(g.volume() * (1.0 - m2) ** 2)) / (4.0 * eps**2)


def density(u: Field, eps: float) -> np.ndarray:
    return energy(u, eps).density


def el_residual(u: Field, eps: float) -> Field:
    """r = -Delta_h u - u (1-|u|^2)/eps^2 on free nodes, zero on pinned ones."""
    eps = _check_eps(eps)
    g = u.grid
    a = u.values
    m2 = np.sum(a * a, axis=-1, keepdims=True)
    r = -laplace_beltrami(g, a) - a * (1.0 - m2) / eps**2
    r[~g.free] = 0.0
    return Field(g, r)


def energy_gradient(u: Field, eps: float) -> np.ndarray:
    """Euclidean gradient of the discrete energy: volume times residual."""
    return u.grid.volume()[..., None] * el_residual(u, eps).values


def second_variation(u: Field, eps: float, v: Field, w: Field | None = None) -> float:
    """D^2 E_eps(u)[v, w] = int grad v.grad w + (2/eps^2)<u,v><u,w> - (1-|u|^2)/eps^2 <v,w>.

    With ``w`` omitted this is the quadratic form.  The Dirichlet part is the
    edge form matching :func:`energy`.
    """
    eps = _check_eps(eps)
    g = u.grid
    for f in (v, w):
        if f is None:
            continue
        if f.values.shape != u.values.shape:
            raise ValueError("mismatched fields")
        if np.any(f.values[~g.free] != 0.0):
            raise ValueError("variation must vanish on pinned nodes")
    if w is None:
        w = v
    a, b, c = u.values, v.values, w.values
    vol = g.volume()
    if g.periodic:
        ex = (np.roll(b, -1, 1) - b) * (np.roll(c, -1, 1) - c)
        ey = (np.roll(b, -1, 0) - b) * (np.roll(c, -1, 0) - c)
        stiff = float(np.sum(ex)) + float(np.sum(ey))
    else:
        ins = g.inside
        mx = (ins[:, 1:] | ins[:, :-1])[..., None]
        my = (ins[1:] | ins[:-1])[..., None]
        ex = (b[:, 1:] - b[:, :-1]) * (c[:, 1:] - c[:, :-1]) * mx
        ey = (b[1:] - b[:-1]) * (c[1:] - c[:-1]) * my
        stiff = float(np.sum(ex)) + float(np.sum(ey))
    m2 = np.sum(a * a, axis=-1)
    uv = np.sum(a * b, axis=-1)
    uw = np.sum(a * c, axis=-1)
    vw = np.sum(b * c, axis=-1)
    pot = vol * ((2.0 / eps**2) * uv * uw - (1.0 - m2) / eps**2 * vw)
    return stiff + float(np.sum(pot))


def second_variation_polarized(u: Field, eps: float, v: Field, w: Field) -> float:
    """Bilinear form from the quadratic one by polarisation."""
    gp = second_variation(u, eps, v.with_values(v.values + w.values))
    gm = second_variation(u, eps, v.with_values(v.values - w.values))
    return 0.25 * (gp - gm)


# ---------------------------------------------------------------------------
# sparse assembly

_STIFFNESS_CACHE: "weakref.WeakKeyDictionary[DomainGrid, tuple]" = weakref.WeakKeyDictionary()


def free_index(grid: DomainGrid) -> np.ndarray:
    idx = -np.ones(grid.shape, dtype=np.int64)
    idx[grid.free] = np.arange(int(grid.free.sum()))
    return idx


def stiffness(grid: DomainGrid):
    """Scalar edge stiffness on free nodes and the coupling to pinned nodes.

    Returns ``(K, B)`` with ``K`` the (n_free, n_free) graph Laplacian and
    ``B`` the (n_free, n_nodes) matrix so that the gradient of the Dirichlet
    sum with respect to free values is ``K u_free - B u_all_pinned``.
    """
    if grid in _STIFFNESS_CACHE:
        return _STIFFNESS_CACHE[grid]
    idx = free_index(grid)
    flat = np.arange(grid.n_x * grid.n_y).reshape(grid.shape)
    pairs = []
    if grid.periodic:
        pairs.append((flat, np.roll(flat, -1, 1)))
        pairs.append((flat, np.roll(flat, -1, 0)))
    else:
        ins = grid.inside
        mx = ins[:, 1:] | ins[:, :-1]
        my = ins[1:] | ins[:-1]
        pairs.append((flat[:, :-1][mx], flat[:, 1:][mx]))
        pairs.append((flat[:-1][my], flat[1:][my]))
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    fi = idx.ravel()
    ia, ib = fi[a], fi[b]
    nf = int(grid.free.sum())
    nn = grid.n_x * grid.n_y
    rows, cols, vals = [], [], []
    brows, bcols = [], []
    for p, q, pn, qn in ((ia, ib, a, b), (ib, ia, b, a)):
        sel = p >= 0
        rows.append(p[sel])
        cols.append(p[sel])
        vals.append(np.ones(sel.sum()))
        both = sel & (q >= 0)
        rows.append(p[both])
        cols.append(q[both])
        vals.append(-np.ones(both.sum()))
        pin = sel & (q < 0)
        brows.append(p[pin])
        bcols.append(qn[pin])
    K = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nf, nf)
    )
    br = np.concatenate(brows)
    B = sp.csr_matrix((np.ones(br.size), (br, np.concatenate(bcols))), shape=(nf, nn))
    _STIFFNESS_CACHE[grid] = (K, B)
    return K, B


def hessian_matrix(u: Field, eps: float, full: bool = True) -> sp.csr_matrix:
    """Sparse Hessian on free dofs, interleaved as ``node * n_comp + c``.

    ``full=False`` drops the ``(2/eps^2) <u,v>^2`` term.
    """
    eps = _check_eps(eps)
    g = u.grid
    nc = u.n_comp
    K, _ = stiffness(g)
    a = u.values[g.free]
    vol = g.volume()[g.free]
    m2 = np.sum(a * a, axis=-1)
    blocks = (-(1.0 - m2) / eps**2 * vol)[:, None, None] * np.eye(nc)[None]
    if full:
        blocks = blocks + (2.0 / eps**2) * vol[:, None, None] * a[:, :, None] * a[:, None, :]
    P = _block_diag(blocks)
    return (sp.kron(K, sp.identity(nc), format="csr") + P).tocsr()


def _block_diag(blocks: np.ndarray) -> sp.csr_matrix:
    n, c, _ = blocks.shape
    base = (np.arange(n) * c)[:, None, None]
    k = np.arange(c)
    r = np.broadcast_to(base + k[None, :, None], blocks.shape)
    q = np.broadcast_to(base + k[None, None, :], blocks.shape)
    return sp.csr_matrix((blocks.ravel(), (r.ravel(), q.ravel())), shape=(n * c, n * c))


# ---------------------------------------------------------------------------
# conserved current and Hopf differential

def wedge_current(u: Field):
    """Current J_ij = u_i grad u_j - u_j grad u_i and its centered divergence.

    Returns ``(J, div_residual)`` with ``J`` of shape (n_y, n_x, c, c, 2) and
    ``div_residual`` the node-wise Frobenius norm over i < j of div J_ij.
    """
    g = u.grid
    a = u.values
    gx = dx(g, a)
    gy = dy(g, a)
    Jx = a[..., :, None] * gx[..., None, :] - a[..., None, :] * gx[..., :, None]
    Jy = a[..., :, None] * gy[..., None, :] - a[..., None, :] * gy[..., :, None]
    J = np.stack([Jx, Jy], axis=-1)
    div = dx(g, Jx) + dy(g, Jy)
    iu = np.triu_indices(u.n_comp, 1)
    res = np.sqrt(np.sum(div[..., iu[0], iu[1]] ** 2, axis=-1))
    return J, res


def hopf_differential(u: Field):
    """H = d_z u . d_z u and the antiholomorphy residual |d_zbar H|."""
    g = u.grid
    a = u.values
    ux = dx(g, a)
    uy = dy(g, a)
    H = 0.25 * (np.sum(ux * ux, -1) - np.sum(uy * uy, -1) - 2j * np.sum(ux * uy, -1))
    dzb = 0.5 * (dx(g, H.real) - dy(g, H.imag) + 1j * (dx(g, H.imag) + dy(g, H.real)))
    return H, np.abs(dzb)


# ---------------------------------------------------------------------------
# polar quadrature helpers

def circle_integral(grid: DomainGrid, f: np.ndarray, center, R: float, n_theta: int = 256) -> float:
    s = polar_resample(grid, f, center, [R], n_theta)[0]
    return float(np.mean(s)) * 2.0 * math.pi * R


def disk_integral(grid: DomainGrid, f: np.ndarray, center, R: float, n_theta: int = 256,
                  n_r: int | None = None) -> float:
    if n_r is None:
        n_r = max(16, int(2 * R / grid.spacing))
    x, w = roots_legendre(n_r)
    r = 0.5 * R * (x + 1.0)
    w = 0.5 * R * w
    s = polar_resample(grid, f, center, r, n_theta)
    ring = np.mean(s, axis=1) * 2.0 * math.pi
    return float(np.sum(w * r * ring))


def annulus_integral(grid: DomainGrid, f: np.ndarray, center, r_in: float, r_out: float,
                     n_theta: int = 256, n_r: int | None = None) -> float:
    """Polar Gauss-Legendre quadrature of f over r_in <= |x - center| <= r_out."""
    if n_r is None:
        n_r = max(16, int(2 * (r_out - r_in) / grid.spacing))
    x, w = roots_legendre(n_r)
    r = r_in + 0.5 * (r_out - r_in) * (x + 1.0)
    w = 0.5 * (r_out - r_in) * w
    s = polar_resample(grid, f, center, r, n_theta)
    ring = np.mean(s, axis=1) * 2.0 * math.pi
    return float(np.sum(w * r * ring))


def pohozaev_terms(u: Field, eps: float, center, R: float, c: float | None = None,
                   n_theta: int = 256):
    eps = _check_eps(eps)
    g = u.grid
    if np.any(g.lambda_field != 0.0):
        raise ValueError("Pohozaev check needs a flat chart")
    if R >= g.inradius(center):
        raise ValueError("ball exits the domain")
    if c is None:
        c = 1.0 / eps**2
    a = u.values
    gx = dx(g, a)
    gy = dy(g, a)
    grad2 = np.sum(gx * gx + gy * gy, axis=-1)
    defect2 = (1.0 - np.sum(a * a, -1)) ** 2
    X, Y = g.coords()
    rr = np.hypot(X - center[0], Y - center[1])
    rr = np.where(rr > 0, rr, 1.0)
    dr = (gx * ((X - center[0]) / rr)[..., None] + gy * ((Y - center[1]) / rr)[..., None])
    dr2 = np.sum(dr * dr, -1)
    interior = 0.5 * c * disk_integral(g, defect2, center, R, n_theta)
    bd_grad = circle_integral(g, grad2, center, R, n_theta)
    bd_pot = circle_integral(g, defect2, center, R, n_theta)
    bd_dr = circle_integral(g, dr2, center, R, n_theta)
    return interior, bd_grad, bd_pot, bd_dr, c


def pohozaev_check(u: Field, eps: float, center, R: float, c: float | None = None,
                   C: float = 1.0, n_theta: int = 256) -> PohozaevReport:
    """Both sides of the Pohozaev inequality on B_R(center).

    ``interior_potential = (c/2) int_{B_R} (1-|v|^2)^2`` and
    ``boundary_term = R int_{dB_R} |grad v|^2 + (1-|v|^2)^2``.  The identity
    residual is the defect of the exact balance obtained by testing the
    equation with ``x . grad v``.
    """
    interior, bd_grad, bd_pot, bd_dr, c = pohozaev_terms(u, eps, center, R, c, n_theta)
    boundary = R * (bd_grad + bd_pot)
    balance = 0.5 * R * bd_grad - R * bd_dr + 0.25 * c * R * bd_pot
    const = interior / boundary if boundary > 0 else (0.0 if interior == 0 else math.inf)
    return PohozaevReport(
        radius=float(R),
        interior_potential=interior,
        boundary_term=boundary,
        defect=interior - C * boundary,
        constant=const,
        identity_residual=interior - balance,
    )


def fubini_shell(u: Field, eps: float, center, r_lo: float, r_hi: float, n_shells: int = 24,
                 n_theta: int = 256) -> float:
    """Radius in [r_lo, r_hi] minimising R int_{dB_R} |grad v|^2 + (1-|v|^2)^2."""
    g = u.grid
    a = u.values
    grad2 = np.sum(dx(g, a) ** 2 + dy(g, a) ** 2, -1)
    defect2 = (1.0 - np.sum(a * a, -1)) ** 2
    radii = np.linspace(r_lo, r_hi, n_shells)
    s = polar_resample(g, grad2 + defect2, center, radii, n_theta)
    vals = radii * np.mean(s, axis=1) * 2.0 * math.pi * radii
    return float(radii[int(np.argmin(vals))])


# ---------------------------------------------------------------------------
# pointwise identities

def core_mask(grid: DomainGrid) -> np.ndarray:
    """Free nodes whose four neighbours are free."""
    f = grid.free
    if grid.periodic:
        return f.copy()
    m = np.zeros_like(f)
    m[1:-1, 1:-1] = f[1:-1, 1:-1] & f[:-2, 1:-1] & f[2:, 1:-1] & f[1:-1, :-2] & f[1:-1, 2:]
    return m


def chart_bochner_constant(grid: DomainGrid, base: float = 16.0) -> float:
    lam = grid.lambda_field
    g2 = dx(grid, lam) ** 2 + dy(grid, lam) ** 2
    lap = np.abs(lap5(grid, lam)) / grid.spacing**2
    return base * (1.0 + float(g2.max()) + float(lap[core_mask(grid)].max(initial=0.0)))


def bochner_residual(u: Field, eps: float, C: float | None = None) -> BochnerReport:
    """-Delta_h e versus C (e^2 + e) on core nodes."""
    g = u.grid
    e = energy(u, eps).density
    lhs = -laplace_beltrami(g, e)
    base = e * e + e
    core = core_mask(g)
    if C is None:
        C = chart_bochner_constant(g)
    rhs = C * base
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(base > 0, lhs / base, np.where(lhs > 0, np.inf, 0.0))
    measured = float(np.max(ratio[core], initial=0.0))
    viol = float(np.mean(lhs[core] > rhs[core])) if core.any() else 0.0
    return BochnerReport(lhs=lhs, rhs=rhs, violation_fraction=viol, constant=float(C),
                         measured_constant=measured)


def sup_check(u: Field) -> float:
    return float(np.sqrt(np.max(np.sum(u.values**2, axis=-1))))


def modulus_equation_residual(u: Field, eps: float, region: np.ndarray | None = None
                              ) -> ModulusReport:
    eps = _check_eps(eps)
    g = u.grid
    if region is None:
        region = core_mask(g)
    a = u.values
    m = np.sqrt(np.sum(a * a, -1))
    if region.any() and m[region].min() < 1e-6:
        raise ValueError("modulus degenerate")
    safe = np.where(m > 1e-12, m, 1.0)
    gx = dx(g, a)
    gy = dy(g, a)
    grad2 = np.sum(gx * gx + gy * gy, -1)
    mx = np.sum(a * gx, -1) / safe
    my = np.sum(a * gy, -1) / safe
    iu = np.triu_indices(u.n_comp, 1)
    wx = a[..., iu[0]] * gx[..., iu[1]] - a[..., iu[1]] * gx[..., iu[0]]
    wy = a[..., iu[0]] * gy[..., iu[1]] - a[..., iu[1]] * gy[..., iu[0]]
    wedge2 = np.sum(wx * wx + wy * wy, -1)
    split = grad2 - (mx * mx + my * my) - wedge2 / safe**2
    res = (
        laplace_beltrami(g, m)
        + m * (1.0 - m * m) / eps**2
        - np.exp(-2.0 * g.lambda_field) * wedge2 / safe**3
    )
    res = np.where(region, res, 0.0)
    split = np.where(region, split, 0.0)
    return ModulusReport(residual=res, splitting_defect=split, region=region)
