"""Neck-region analysis: concentration radius, blow-up, dyadic energy ledger,
Whitney extension, Wente and Hodge decompositions, harmonic frequency split,
Lorentz L^{2,1} norms and the pointwise decay profile."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import fft as sfft
from scipy import ndimage, optimize, signal

from . import gl_core
from .domain import (AnnulusSystem, DomainGrid, Field, annulus_system, dx, dy, plane_grid,
                     polar_resample)
from .solver import disk_poisson_operator, inverse_stereographic

GAMMA_ALPHA = 1.0


# ---------------------------------------------------------------------------
# Lorentz norm

def lorentz21_norm(f: np.ndarray, volumes: np.ndarray, region: np.ndarray | None = None) -> float:
    """Discrete L^{2,1} norm sum_i f_(i) (sqrt(V_i) - sqrt(V_{i-1})).

    ``f_(i)`` are the values sorted in decreasing order and ``V_i`` the
    cumulative volume of the first ``i`` nodes.
    """
    f = np.asarray(f, dtype=float)
    w = np.broadcast_to(np.asarray(volumes, dtype=float), f.shape)
    if region is not None:
        f = f[region]
        w = w[region]
    f = f.ravel()
    w = w.ravel()
    if np.any(f < 0):
        raise ValueError("Lorentz norm needs nonnegative values")
    order = np.argsort(-f, kind="stable")
    fs = f[order]
    V = np.sqrt(np.cumsum(w[order]))
    dV = np.diff(np.concatenate([[0.0], V]))
    return float(np.sum(fs * dV))


def l2_norm(f: np.ndarray, volumes: np.ndarray, region: np.ndarray | None = None) -> float:
    f = np.asarray(f, dtype=float)
    w = np.broadcast_to(np.asarray(volumes, dtype=float), f.shape)
    if region is not None:
        f, w = f[region], w[region]
    return float(np.sqrt(np.sum(w * f * f)))


# ---------------------------------------------------------------------------
# concentration

@dataclass
class ConcentrationReport:
    rho: float
    x: tuple[float, float]
    delta0: float
    ratio_rho_eps: float
    index: tuple[int, int]
    epsilon: float
    multiple: bool = False

    def to_json(self) -> dict:
        return {
            "rho": self.rho,
            "x": list(self.x),
            "delta0": self.delta0,
            "ratio_rho_eps": self.ratio_rho_eps,
            "epsilon": self.epsilon,
        }


def _disk_kernel(r_nodes: float) -> np.ndarray:
    m = int(math.floor(r_nodes))
    o = np.arange(-m, m + 1)
    X, Y = np.meshgrid(o, o)
    return (X * X + Y * Y <= r_nodes * r_nodes).astype(float)


def _ball_energies(grid: DomainGrid, mass: np.ndarray, r: float) -> np.ndarray:
    k = _disk_kernel(r / grid.spacing)
    if grid.periodic:
        m = k.shape[0] // 2
        padded = np.pad(mass, m, mode="wrap")
        return signal.fftconvolve(padded, k, mode="valid")
    return signal.fftconvolve(mass, k, mode="same")


def concentration_radius(u: Field, eps: float, delta0: float = 1e-2, ladder_ratio: float = 2 ** 0.125,
                         n_theta: int = 128) -> ConcentrationReport:
    """Smallest radius whose best ball carries delta0/2 of the energy.

    Centres range over grid nodes whose ball of the trial radius fits in the
    domain; the radius ladder has ratio 2^(1/8) and the final radius is
    bisected with polar quadrature at the winning centre.
    """
    g = u.grid
    e = gl_core.energy(u, eps).density
    mass = e * g.volume()
    target = 0.5 * delta0
    if float(np.sum(mass)) < target:
        raise ValueError("no concentration")
    X, Y = g.coords()
    if g.kind == "disk":
        dist_b = g.radius - np.hypot(X - g.center[0], Y - g.center[1])
    elif g.kind == "plane_patch":
        x0, y0 = g.origin
        x1 = x0 + (g.n_x - 1) * g.spacing
        y1 = y0 + (g.n_y - 1) * g.spacing
        dist_b = np.minimum.reduce([X - x0, x1 - X, Y - y0, y1 - Y])
    else:
        dist_b = np.full(g.shape, np.inf)
    r = g.spacing
    rmax = 0.5 * min(g.physical_extent)
    hit = None
    while r <= rmax:
        be = _ball_energies(g, mass, r)
        be = np.where(dist_b > r, be, -np.inf)
        best = float(be.max())
        if best >= target:
            hit = (r, be)
            break
        r *= ladder_ratio
    if hit is None:
        raise ValueError("no concentration")
    r_hit, be = hit
    j, i = np.unravel_index(int(np.argmax(be)), be.shape)
    cx, cy = g.node_coords(j, i)

    def ball(rr: float) -> float:
        return gl_core.disk_integral(g, e, (cx, cy), rr, n_theta=n_theta)

    lo = r_hit / ladder_ratio
    hi = r_hit
    while ball(hi) < target and hi * ladder_ratio < dist_b[j, i]:
        hi *= ladder_ratio
    while ball(lo) > target and lo > 1e-3 * g.spacing:
        lo /= ladder_ratio
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ball(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * hi:
            break
    rho = 0.5 * (lo + hi)
    _, n_clusters = ndimage.label(be >= target)
    return ConcentrationReport(
        rho=float(rho), x=(float(cx), float(cy)), delta0=float(delta0),
        ratio_rho_eps=float(rho / eps), index=(int(j), int(i)), epsilon=float(eps),
        multiple=n_clusters > 1,
    )


# ---------------------------------------------------------------------------
# blow-up

@dataclass
class BlowUp:
    field: Field
    epsilon: float
    rho: float
    center: tuple[float, float]
    window: float


def blow_up(u: Field, center, rho: float, window: float, eps: float | None = None,
            oversample: float = 1.0) -> BlowUp:
    """v(y) = u(rho y + center) on a fresh flat grid over [-window, window]^2."""
    g = u.grid
    reach = rho * window * math.sqrt(2.0)
    if not g.periodic and reach >= g.inradius(center):
        raise ValueError("window exits domain")
    X, Y = g.coords()
    inside_ball = np.hypot(X - center[0], Y - center[1]) <= rho * window
    if int(inside_ball.sum()) < 4:
        raise ValueError("blow-up ball holds fewer than 4 grid nodes")
    hy = g.spacing / rho / oversample
    m = max(32, int(math.ceil(window / hy)))
    hy = window / m
    grid = plane_grid(window, hy)
    Yx, Yy = grid.coords()
    px = center[0] + rho * Yx
    py = center[1] + rho * Yy
    ci = (px - g.origin[0]) / g.spacing
    cj = (py - g.origin[1]) / g.spacing
    mode = "grid-wrap" if g.periodic else "nearest"
    vals = np.stack(
        [ndimage.map_coordinates(u.values[..., c], [cj, ci], order=1, mode=mode)
         for c in range(u.n_comp)], axis=-1)
    return BlowUp(Field(grid, vals), (eps / rho) if eps else float("nan"), float(rho),
                  (float(center[0]), float(center[1])), float(window))


@dataclass
class BubbleAlignment:
    rotation: np.ndarray
    scale: float
    shift: tuple[float, float]
    rel_error: float
    bubble: Field


def _procrustes(A: np.ndarray, B: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Orthogonal Q minimising sum w |A Q^T - B|^2 (rows are samples)."""
    M = (B * weights[:, None]).T @ A
    U, _, Vt = np.linalg.svd(M)
    return U @ Vt


def align_bubble(v: Field, radius: float = 2.0) -> BubbleAlignment:
    """Fit v on |y| <= radius by Q Pi^{-1}(s (y - c)) with Q orthogonal.

    The scale, the centre and the orthogonal matrix are optimised; the relative
    L^2 error on the disk is reported.
    """
    g = v.grid
    Yx, Yy = g.coords()
    mask = np.hypot(Yx, Yy) <= radius
    A_all = v.values[..., :3]
    w = g.volume()[mask]
    A = A_all[mask]

    def fit(params):
        s = math.exp(params[0])
        b = inverse_stereographic(s * (Yx[mask] - params[1]), s * (Yy[mask] - params[2]))
        Q = _procrustes(b, A, w)
        res = A - b @ Q.T
        return float(np.sum(w[:, None] * res * res)), Q

    best = None
    for ls in np.linspace(math.log(1e-3), math.log(10.0), 41):
        val, _ = fit((ls, 0.0, 0.0))
        if best is None or val < best[0]:
            best = (val, ls)
    sol = optimize.minimize(lambda p: fit(p)[0], x0=[best[1], 0.0, 0.0], method="Nelder-Mead",
                            options={"xatol": 1e-8, "fatol": 1e-14, "maxiter": 4000})
    val, Q = fit(sol.x)
    s = math.exp(sol.x[0])
    bub = inverse_stereographic(s * (Yx - sol.x[1]), s * (Yy - sol.x[2])) @ Q.T
    full = np.zeros(v.values.shape)
    full[..., :3] = bub
    norm = float(np.sum(w[:, None] * (bub[mask]) ** 2))
    return BubbleAlignment(Q, s, (float(sol.x[1]), float(sol.x[2])), math.sqrt(val / norm),
                           Field(g, full))


# ---------------------------------------------------------------------------
# the ledger

@dataclass
class ProfileFit:
    beta: float
    amplitude: float
    r2: float
    ok: bool


@dataclass
class NeckLedger:
    js: list[int]
    r_inner: list[float]
    r_outer: list[float]
    rho_j: list[float]
    a_j: list[float]
    L21: float
    L2: float
    neck_energy: float
    fit: ProfileFit | None
    status: str = "ok"
    h_plus_energy: list[float] = field(default_factory=list)
    h_minus_energy: list[float] = field(default_factory=list)
    pointwise_max: float = float("nan")

    def profile_bound(self, eta: float, delta: float) -> list[float]:
        if self.fit is None:
            return [float("nan")] * len(self.js)
        b = self.fit.beta
        return [self.fit.amplitude * ((2.0 ** -j / eta) ** b + (delta / (2.0 ** -j * eta)) ** b)
                for j in self.js]

    def rows(self, eta: float, delta: float) -> list[dict]:
        pb = self.profile_bound(eta, delta)
        out = []
        for k, j in enumerate(self.js):
            hp = self.h_plus_energy[k] if k < len(self.h_plus_energy) else float("nan")
            hm = self.h_minus_energy[k] if k < len(self.h_minus_energy) else float("nan")
            out.append({
                "j": j,
                "r_inner": self.r_inner[k],
                "r_outer": self.r_outer[k],
                "rho_j": self.rho_j[k],
                "a_j": self.a_j[k],
                "h_plus_energy": hp,
                "h_minus_energy": hm,
                "profile_bound": pb[k],
                "ratio": self.a_j[k] / pb[k] if pb[k] and np.isfinite(pb[k]) else float("nan"),
            })
        return out


def _shell_integrand(u: Field) -> np.ndarray:
    g = u.grid
    a = u.values
    m = np.sqrt(np.sum(a * a, -1))
    safe = np.where(m > 1e-12, m, 1.0)
    gx = np.sum(a * dx(g, a), -1) / safe
    gy = np.sum(a * dy(g, a), -1) / safe
    defect = np.abs(1.0 - m)
    defect[defect < 1e-12] = 0.0  # rounding of a unit field
    return np.hypot(gx, gy) * defect


def good_radii(u: Field, ann: AnnulusSystem, n_shells: int = 33, n_theta: int = 128) -> list[float]:
    """Fubini shell choice per dyadic index.

    For each j the radius rho in [2^{-j-1}, 2^{-j+1}] (kept so that
    B_{2 rho} stays inside B_eta) minimising
    rho * int_{d(B_{2rho} minus B_{rho/2})} |grad|u|| (1-|u|).
    """
    g = u.grid
    f = _shell_integrand(u)
    out = []
    for j in ann.j_range:
        lo = 2.0 ** (-j - 1)
        hi = min(2.0 ** (-j + 1), 0.5 * ann.eta)
        hi = max(hi, lo)
        cand = np.linspace(lo, hi, n_shells)
        outer = polar_resample(g, f, ann.center, 2.0 * cand, n_theta).mean(axis=1) * 2 * math.pi * 2 * cand
        inner = polar_resample(g, f, ann.center, 0.5 * cand, n_theta).mean(axis=1) * 2 * math.pi * 0.5 * cand
        vals = cand * (outer + inner)
        if not np.any(vals > 0):
            out.append(float(0.5 * (lo + hi)))
        else:
            out.append(float(cand[int(np.argmin(vals))]))
    return out


def fit_profile(js, a_j, eta: float, delta: float, min_r2: float = 0.9) -> ProfileFit:
    """Least squares of log a_j on log(A [(2^-j/eta)^b + (delta/(2^-j eta))^b])."""
    js = np.asarray(js, dtype=float)
    a = np.asarray(a_j, dtype=float)
    if np.any(a <= 0) or len(a) < 3:
        return ProfileFit(float("nan"), float("nan"), float("nan"), False)
    la = np.log(a)
    r = 2.0 ** -js

    def model(p):
        b = p[1]
        return p[0] + np.log((r / eta) ** b + (delta / (r * eta)) ** b)

    best = None
    for b0 in (0.25, 0.5, 1.0, 2.0, 4.0):
        p0 = [float(np.mean(la - model([0.0, b0]))), b0]
        sol = optimize.least_squares(lambda p: model(p) - la, p0, bounds=([-np.inf, 1e-6], [np.inf, 20.0]),
                                     xtol=1e-14, ftol=1e-14, gtol=1e-14)
        if best is None or sol.cost < best.cost:
            best = sol
    res = model(best.x) - la
    ss_tot = float(np.sum((la - la.mean()) ** 2))
    r2 = 1.0 - float(np.sum(res * res)) / ss_tot if ss_tot > 0 else 1.0
    return ProfileFit(float(best.x[1]), float(math.exp(best.x[0])), r2, r2 >= min_r2)


def annulus_ledger(u: Field, eps: float, ann: AnnulusSystem, n_theta: int = 128) -> NeckLedger:
    g = u.grid
    e = gl_core.energy(u, eps).density
    vol = g.volume()
    neck = ann.neck_mask
    radii = good_radii(u, ann, n_theta=n_theta)
    a_j = []
    for rj in radii:
        a_j.append(max(gl_core.annulus_integral(g, e, ann.center, 0.5 * rj, 2.0 * rj, n_theta), 0.0))
    sq = np.sqrt(np.maximum(e, 0.0))
    L21 = lorentz21_norm(sq, vol, neck)
    L2 = l2_norm(sq, vol, neck)
    js = ann.j_range
    status = "ok"
    fit = None
    if len(js) < 3:
        status = "neck too thin"
    else:
        fit = fit_profile(js, a_j, ann.eta, ann.delta)
        if not fit.ok:
            status = "fit failed"
    return NeckLedger(
        js=list(js),
        r_inner=[2.0 ** (-j - 1) for j in js],
        r_outer=[2.0 ** -j for j in js],
        rho_j=radii,
        a_j=a_j,
        L21=L21,
        L2=L2,
        neck_energy=float(np.sum((e * vol)[neck])),
        fit=fit,
        status=status,
    )


def partition_energies(u: Field, eps: float, ann: AnnulusSystem) -> dict[int, float]:
    """Node-sum energy of every dyadic piece A_j of the neck."""
    g = u.grid
    mass = gl_core.energy(u, eps).density * g.volume()
    return {j: float(np.sum(mass[ann.labels == j])) for j in range(ann.j_lo, ann.j_hi + 1)}


def pointwise_profile_check(u: Field, eps: float, ann: AnnulusSystem, beta: float):
    """|x|^2 e(x) / [(|x|/eta)^beta + (delta/(eta |x|))^beta] on the neck."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    e = gl_core.energy(u, eps).density
    r = ann.radius
    neck = ann.neck_mask
    ratio = np.zeros(u.grid.shape)
    rn = r[neck]
    prof = (rn / ann.eta) ** beta + (ann.delta / (ann.eta * rn)) ** beta
    ratio[neck] = rn * rn * e[neck] / prof
    return ratio, float(ratio[neck].max()) if neck.any() else 0.0


@dataclass
class AbsorptionReport:
    holds: bool
    constant: float
    violated_at: int | None
    lhs: np.ndarray
    rhs: np.ndarray


def series_absorption_check(a, b, gamma: float, mu: float, eps0: float) -> AbsorptionReport:
    """Check a_k <= b_k + eps0 sum gamma^|n-k| a_n and measure the absorbed constant."""
    if not (0.0 < mu < gamma < 1.0) or eps0 < 0:
        raise ValueError("need 0 < mu < gamma < 1 and eps0 >= 0")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = len(a)
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :])
    G = gamma ** dist
    M = mu ** dist
    hyp = b + eps0 * (G @ a)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(hyp), initial=0.0)))
    bad = np.nonzero(a > hyp + tol)[0]
    lhs = M @ a
    rhs = M @ b
    if np.all(lhs == 0):
        C = 0.0
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            C = float(np.max(np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))))
    return AbsorptionReport(
        holds=bad.size == 0,
        constant=C,
        violated_at=int(bad[0]) if bad.size else None,
        lhs=lhs,
        rhs=rhs,
    )


def gamma_from_alpha(alpha: float = GAMMA_ALPHA) -> float:
    return max(2.0 ** -alpha, 2.0 / 3.0)


def mu_from_beta(beta: float) -> float:
    return 2.0 ** -abs(beta)


def absorption_b_terms(u: Field, eps: float, ann: AnnulusSystem, ledger: NeckLedger, split=None,
                       sigma: float = 0.5, gamma: float | None = None) -> np.ndarray:
    """The b_j sequence with unit constants.

    b_j = int_{A~_j} |grad h|^2 + gamma^{j+1} (int_neck |grad u|^2)^2
          + sum_{|j'-j|<=3} (sigma + eps^2 / (sigma 4^{-j'})) a_{j'}
          + sigma (4^{-j} / eps^2 exp(-2^{-j}/eps))^2
    """
    if gamma is None:
        gamma = gamma_from_alpha()
    g = u.grid
    grad2 = gl_core.gradient_density(g, u.values)
    dirichlet_neck = float(np.sum((grad2 * g.volume())[ann.neck_mask]))
    js = ledger.js
    a = np.asarray(ledger.a_j)
    hpm = np.zeros(len(js))
    if split is not None:
        for k, j in enumerate(js):
            lo, hi = 2.0 ** (-j - 2), 2.0 ** (-j + 1)
            lo = max(lo, ann.inner)
            hi = min(hi, ann.eta)
            ep, em = split.harmonic_energies(lo, hi)
            hpm[k] = ep + em
    b = np.zeros(len(js))
    for k, j in enumerate(js):
        near = 0.0
        for kk, jj in enumerate(js):
            if abs(jj - j) <= 3:
                near += (sigma + eps * eps / (sigma * 4.0 ** -jj)) * a[kk]
        expo = sigma * (4.0 ** -j / eps**2 * math.exp(-(2.0 ** -j) / eps)) ** 2
        b[k] = hpm[k] + gamma ** (j + 1) * dirichlet_neck**2 + near + expo
    return b


# ---------------------------------------------------------------------------
# Poisson solves and Wente

def poisson_square(grid: DomainGrid, f: np.ndarray) -> np.ndarray:
    """Solve -Delta_5 phi = f with phi = 0 on the outer ring of a plane patch (DST-I)."""
    h = grid.spacing
    inner = f[1:-1, 1:-1]
    ny, nx = inner.shape
    ky = np.arange(1, ny + 1)
    kx = np.arange(1, nx + 1)
    ly = (2.0 - 2.0 * np.cos(np.pi * ky / (ny + 1))) / h**2
    lx = (2.0 - 2.0 * np.cos(np.pi * kx / (nx + 1))) / h**2
    F = sfft.dstn(inner, type=1, axes=(0, 1))
    F = F / (ly[:, None] + lx[None, :])
    sol = sfft.idstn(F, type=1, axes=(0, 1))
    out = np.zeros_like(f)
    out[1:-1, 1:-1] = sol
    return out


def poisson_dirichlet(grid: DomainGrid, f: np.ndarray) -> np.ndarray:
    """-Delta phi = f, phi = 0 on the Dirichlet boundary of the grid."""
    if grid.kind == "plane_patch":
        return poisson_square(grid, f)
    if grid.kind == "disk":
        A, _ = disk_poisson_operator(grid)
        out = np.zeros(grid.shape)
        out[grid.free] = spla.splu(A.tocsc()).solve(f[grid.free] * grid.spacing**2)
        return out
    raise ValueError("Wente solves need a Dirichlet grid")


def jacobian(grid: DomainGrid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return dx(grid, a) * dy(grid, b) - dy(grid, a) * dx(grid, b)


@dataclass
class WenteResult:
    phi: np.ndarray
    grad_l2: float
    grad_l21: float
    sup: float


def wente_solve(grid: DomainGrid, a: np.ndarray, b: np.ndarray) -> WenteResult:
    """-Delta phi = a_x b_y - a_y b_x with zero boundary data."""
    if grid.periodic:
        raise ValueError("Wente solves need a Dirichlet grid")
    f = jacobian(grid, a, b)
    f = np.where(grid.free, f, 0.0)
    phi = poisson_dirichlet(grid, f)
    gmag = np.hypot(dx(grid, phi), dy(grid, phi))
    vol = grid.volume()
    return WenteResult(phi, l2_norm(gmag, vol, grid.inside), lorentz21_norm(gmag, vol, grid.inside),
                       float(np.max(np.abs(phi))))


def wente_weight(r: np.ndarray) -> np.ndarray:
    """f(r) = r^2 log^2(1 + 1/r) log(1 + log(1/r)) for 0 < r < 1 (zero elsewhere)."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    ok = (r > 0) & (r < 1)
    rr = r[ok]
    out[ok] = rr * rr * np.log1p(1.0 / rr) ** 2 * np.log1p(np.log(1.0 / rr))
    return out


def weighted_wente_constant(grid: DomainGrid, a: np.ndarray, b: np.ndarray, phi: np.ndarray,
                            center=(0.0, 0.0)) -> float:
    """Smallest C with int_{B_1/2 - B_1/4} |grad phi|^2 <= 2/3 int_{B_1 - B_1/2} |grad phi|^2
    + C int |grad a|^2 int f(|x|) |grad b|^2."""
    X, Y = grid.coords()
    r = np.hypot(X - center[0], Y - center[1])
    vol = grid.volume()
    gp = dx(grid, phi) ** 2 + dy(grid, phi) ** 2
    ga = dx(grid, a) ** 2 + dy(grid, a) ** 2
    gb = dx(grid, b) ** 2 + dy(grid, b) ** 2
    ins = grid.inside
    lhs = float(np.sum((gp * vol)[(r < 0.5) & (r >= 0.25) & ins]))
    outer = float(np.sum((gp * vol)[(r < 1.0) & (r >= 0.5) & ins]))
    prod = float(np.sum((ga * vol)[ins])) * float(np.sum((wente_weight(r) * gb * vol)[ins]))
    excess = lhs - 2.0 / 3.0 * outer
    if excess <= 0:
        return 0.0
    return excess / prod if prod > 0 else math.inf


def band_limited_pair(grid: DomainGrid, rng: np.random.Generator, k_max: int = 4):
    """Random trigonometric polynomials of degree <= k_max on the grid box."""
    X, Y = grid.coords()
    out = []
    for _ in range(2):
        f = np.zeros(grid.shape)
        for kx in range(k_max + 1):
            for ky in range(k_max + 1):
                c = rng.standard_normal(4) / (1.0 + kx * kx + ky * ky)
                f += (c[0] * np.cos(np.pi * kx * X) * np.cos(np.pi * ky * Y)
                      + c[1] * np.cos(np.pi * kx * X) * np.sin(np.pi * ky * Y)
                      + c[2] * np.sin(np.pi * kx * X) * np.cos(np.pi * ky * Y)
                      + c[3] * np.sin(np.pi * kx * X) * np.sin(np.pi * ky * Y))
        out.append(f)
    return out[0], out[1]


def wente_suite(grid: DomainGrid, n_pairs: int = 100, seed: int = 0, k_max: int = 4) -> dict:
    rng = np.random.default_rng(seed)
    vol = grid.volume()
    ins = grid.inside
    ratios = []
    weighted = []
    for _ in range(n_pairs):
        a, b = band_limited_pair(grid, rng, k_max)
        res = wente_solve(grid, a, b)
        na = l2_norm(np.hypot(dx(grid, a), dy(grid, a)), vol, ins)
        nb = l2_norm(np.hypot(dx(grid, b), dy(grid, b)), vol, ins)
        ratios.append(res.grad_l21 / (na * nb))
        weighted.append(weighted_wente_constant(grid, a, b, res.phi, grid.center))
    return {"ratios": np.array(ratios), "constant": float(np.max(ratios)),
            "weighted_constant": float(np.max(weighted))}


# ---------------------------------------------------------------------------
# Whitney extension and Hodge split

def laplace_fill(grid: DomainGrid, values: np.ndarray, unknown: np.ndarray) -> np.ndarray:
    """Discrete harmonic values on ``unknown`` nodes, all other nodes fixed."""
    if grid.periodic:
        raise ValueError("laplace_fill needs a Dirichlet grid")
    unknown = unknown.copy()
    unknown[0, :] = unknown[-1, :] = unknown[:, 0] = unknown[:, -1] = False
    idx = -np.ones(grid.shape, dtype=np.int64)
    n = int(unknown.sum())
    out = values.copy()
    if n == 0:
        return out
    idx[unknown] = np.arange(n)
    js, is_ = np.nonzero(unknown)
    rows = [idx[js, is_]]
    cols = [idx[js, is_]]
    vals = [np.full(n, 4.0)]
    rhs = np.zeros((n,) + values.shape[2:])
    for ddy, ddx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nj, ni = js + ddy, is_ + ddx
        q = idx[nj, ni]
        inner = q >= 0
        rows.append(idx[js, is_][inner])
        cols.append(q[inner])
        vals.append(-np.ones(int(inner.sum())))
        fixed = ~inner
        np.add.at(rhs, idx[js, is_][fixed], values[nj[fixed], ni[fixed]])
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    sol = spla.splu(A).solve(rhs.reshape(n, -1)).reshape(rhs.shape)
    out[unknown] = sol
    return out


@dataclass
class WhitneyResult:
    field: Field
    ratio: float
    offset: tuple[int, int]
    neck: np.ndarray = field(repr=False)
    radius: np.ndarray = field(repr=False)


def whitney_extend(u: Field, ann: AnnulusSystem, half_width: float | None = None,
                   n_theta: int = 256) -> WhitneyResult:
    """Extension of u from the neck to a plane patch.

    Inside B_{delta/eta}: discrete harmonic fill of the inner trace.  On
    eta <= |x| < 2 eta: harmonic interpolation between the outer trace and the
    circle average of u on |x| = eta.  Constant (that average) beyond 2 eta.
    The ratio int |grad u~|^2 / int_neck |grad u|^2 is reported.
    """
    g = u.grid
    if not ann.neck_mask.any():
        raise ValueError("degenerate neck")
    if half_width is None:
        half_width = 4.0 * ann.eta + 2.0 * g.spacing
    jc, ic = g.node_index(ann.center)
    cx, cy = g.node_coords(jc, ic)
    big = plane_grid(half_width, g.spacing, center=(cx, cy))
    m = (big.n_x - 1) // 2
    X, Y = big.coords()
    r = np.hypot(X - cx, Y - cy)
    neck_big = (r >= ann.inner) & (r < ann.eta)
    vals = np.zeros(big.shape + (u.n_comp,))
    avg = polar_resample(g, u.values, ann.center, [ann.eta], n_theta)[0].mean(axis=0)
    vals[:] = avg
    jj, ii = np.nonzero(neck_big)
    oj, oi = jj - m + jc, ii - m + ic
    vals[jj, ii] = u.values[oj, oi]
    unknown = (r < ann.inner) | ((r >= ann.eta) & (r < 2.0 * ann.eta))
    filled = laplace_fill(big, vals, unknown)
    ut = Field(big, filled)
    num = 2.0 * gl_core.dirichlet_sum(big, filled)
    grad2 = gl_core.gradient_density(g, u.values)
    den = float(np.sum((grad2 * g.spacing**2)[ann.neck_mask]))
    ratio = num / den if den > 0 else 1.0
    return WhitneyResult(ut, ratio, (m - jc, m - ic), neck_big, r)


@dataclass
class HodgeSplit:
    grid: DomainGrid
    pairs: list[tuple[int, int]]
    phi: np.ndarray = field(repr=False)
    H: np.ndarray = field(repr=False)
    radii: np.ndarray = field(repr=False)
    plus: np.ndarray = field(repr=False)
    minus: np.ndarray = field(repr=False)
    h0: np.ndarray = field(repr=False)
    log_coeff: float = 0.0
    log_coeff_rel: float = 0.0
    residual_rel: float = 0.0
    current_norm: float = 0.0
    whitney_ratio: float = 1.0
    flagged: bool = False
    inner: float = 0.0
    outer: float = 0.0
    wente_norm: float = 0.0

    def harmonic_energies(self, r1: float, r2: float) -> tuple[float, float]:
        """Dirichlet energies of h+ and h- on r1 <= |x| <= r2, summed over pairs."""
        m = np.arange(1, self.plus.shape[1] + 1)
        ep = np.pi * m * np.abs(2.0 * self.plus) ** 2 * (r2 ** (2 * m) - r1 ** (2 * m))
        em = np.pi * m * np.abs(2.0 * self.minus) ** 2 * (r1 ** (-2.0 * m) - r2 ** (-2.0 * m))
        return float(np.sum(ep)), float(np.sum(em))

    def summary(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "log_coeff": self.log_coeff,
            "log_coeff_rel": self.log_coeff_rel,
            "reconstruction_residual_rel": self.residual_rel,
            "current_l2": self.current_norm,
            "whitney_ratio": self.whitney_ratio,
            "wente_l2_neck": self.wente_norm,
            "flagged": self.flagged,
        }


def _dst_poisson(f: np.ndarray, h: float) -> np.ndarray:
    """-Delta_5 phi = f on every entry of ``f`` with phi = 0 outside the array."""
    ny, nx = f.shape
    ly = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, ny + 1) / (ny + 1))) / h**2
    lx = (2.0 - 2.0 * np.cos(np.pi * np.arange(1, nx + 1) / (nx + 1))) / h**2
    F = sfft.dstn(f, type=1, axes=(0, 1))
    return sfft.idstn(F / (ly[:, None] + lx[None, :]), type=1, axes=(0, 1))


def _edge_currents(a: np.ndarray, h: float, i: int, j: int):
    """Edge values of u_i grad u_j - u_j grad u_i (midpoint rule, exact product form)."""
    ex = (a[:, :-1, i] * a[:, 1:, j] - a[:, :-1, j] * a[:, 1:, i]) / h
    ey = (a[:-1, :, i] * a[1:, :, j] - a[:-1, :, j] * a[1:, :, i]) / h
    return ex, ey


def _face_curl(ex: np.ndarray, ey: np.ndarray, h: float) -> np.ndarray:
    return (ey[:, 1:] - ey[:, :-1]) / h - (ex[1:, :] - ex[:-1, :]) / h


def _perp_grad_faces(phi: np.ndarray, h: float):
    """(-d_y phi, d_x phi) on x- and y-edges for face values phi (zero outside)."""
    p = np.pad(phi, 1)
    gx = -(p[1:, 1:-1] - p[:-1, 1:-1]) / h
    gy = (p[1:-1, 1:] - p[1:-1, :-1]) / h
    return gx, gy


def _path_integrate(gx: np.ndarray, gy: np.ndarray, h: float, anchor: tuple[int, int]) -> np.ndarray:
    """Node potential of an edge field, integrating along rows then columns and
    along columns then rows (identical when the field is curl-free), averaged."""
    ja, ia = anchor
    ny, nx = gy.shape[0] + 1, gx.shape[1] + 1

    def run(e, axis, start):
        c = np.concatenate([np.zeros_like(np.take(e, [0], axis)), np.cumsum(e * h, axis=axis)], axis=axis)
        return c - np.take(c, [start], axis)

    row = run(gx[ja:ja + 1], 1, ia)
    H1 = np.broadcast_to(row, (ny, nx)) + run(gy, 0, ja)
    col = run(gy[:, ia:ia + 1], 0, ja)
    H2 = np.broadcast_to(col, (ny, nx)) + run(gx, 1, ia)
    return 0.5 * (H1 + H2)


def hodge_decompose(u: Field, ann: AnnulusSystem, n_theta: int = 256, n_radii: int = 48,
                    n_modes: int = 16, tol: float = 1e-3, size: float = 4.0) -> HodgeSplit:
    """u~ ^ grad u~ = -grad^perp phi + grad H for each component pair.

    Currents live on grid edges and phi on cell faces, so J + grad^perp phi is
    discretely curl-free away from the outer ring and H follows by path
    integration.  H is split into h+ (nonnegative frequencies in z), h- and
    the logarithmic mode.  The Poisson solve for phi uses a square of half
    width ``size * eta`` with zero boundary values.
    """
    g = u.grid
    neck = ann.neck_mask
    mod = np.sqrt(np.sum(u.values ** 2, -1))
    if mod[neck].min() < 0.5:
        raise ValueError("modulus too small")
    wh = whitney_extend(u, ann, half_width=size * ann.eta + 2.0 * g.spacing, n_theta=n_theta)
    big = wh.field.grid
    a = wh.field.values
    h = big.spacing
    nc = u.n_comp
    pairs = [(i, j) for i in range(nc) for j in range(i + 1, nc)]
    m = (big.n_x - 1) // 2
    nb = wh.neck
    nb_x = nb[:, :-1] & nb[:, 1:]
    nb_y = nb[:-1, :] & nb[1:, :]
    phis, Hs = [], []
    res2 = cur2 = phi2 = 0.0
    for (i, j) in pairs:
        ex, ey = _edge_currents(a, h, i, j)
        phi = _dst_poisson(_face_curl(ex, ey, h), h)
        px, py = _perp_grad_faces(phi, h)
        gx, gy = ex + px, ey + py
        H = _path_integrate(gx, gy, h, (m, m))
        rx = gx - np.diff(H, axis=1) / h
        ry = gy - np.diff(H, axis=0) / h
        res2 += float(np.sum(rx[nb_x] ** 2) + np.sum(ry[nb_y] ** 2))
        phi2 += float(np.sum(px[nb_x] ** 2) + np.sum(py[nb_y] ** 2))
        cur2 += float(np.sum(ex[nb_x] ** 2) + np.sum(ey[nb_y] ** 2))
        phis.append(phi)
        Hs.append(H)
    phis = np.stack(phis, -1)
    Hs = np.stack(Hs, -1)
    cx, cy = big.center
    lo = ann.inner * 1.05 + 2 * h
    hi = ann.eta * 0.95 - 2 * h
    radii = np.geomspace(lo, hi, n_radii)
    samp = polar_resample(big, Hs, (cx, cy), radii, n_theta)
    coef = np.fft.fft(samp, axis=1) / n_theta
    plus = np.zeros((len(pairs), n_modes), complex)
    minus = np.zeros((len(pairs), n_modes), complex)
    for k, mm in enumerate(range(1, n_modes + 1)):
        B = np.stack([(radii / hi) ** mm, (lo / radii) ** mm], axis=1).astype(complex)
        sol, *_ = np.linalg.lstsq(B, coef[:, mm, :], rcond=None)
        plus[:, k] = sol[0] / hi ** mm
        minus[:, k] = np.conj(sol[1] * lo ** mm)
    h0 = coef[:, 0, :].real
    # logarithmic coefficient: flux of u ^ grad u across circles (grad^perp phi carries none)
    ax = dx(big, a)
    ay = dy(big, a)
    X, Y = big.coords()
    rr = np.where(wh.radius > 0, wh.radius, 1.0)
    nx_, ny_ = (X - cx) / rr, (Y - cy) / rr
    Jr = np.stack([(a[..., i] * ax[..., j] - a[..., j] * ax[..., i]) * nx_
                   + (a[..., i] * ay[..., j] - a[..., j] * ay[..., i]) * ny_ for (i, j) in pairs], -1)
    fl = polar_resample(big, Jr, (cx, cy), radii, n_theta).mean(axis=1) * radii[:, None]
    log_coeff = float(np.max(np.abs(fl.mean(axis=0))))
    cur = math.sqrt(cur2 * h * h)
    res_rel = math.sqrt(res2 / cur2) if cur2 > 0 else 0.0
    return HodgeSplit(
        grid=big, pairs=pairs, phi=phis, H=Hs, radii=radii, plus=plus, minus=minus, h0=h0,
        log_coeff=log_coeff, log_coeff_rel=log_coeff / cur if cur > 0 else 0.0,
        residual_rel=res_rel, current_norm=cur, whitney_ratio=wh.ratio,
        flagged=res_rel > tol, inner=ann.inner, outer=ann.eta,
        wente_norm=math.sqrt(phi2 * h * h),
    )


def domain_sensitivity(u: Field, ann: AnnulusSystem, **kw) -> float:
    """Relative change of the neck norm of grad phi when the Poisson square doubles."""
    a = hodge_decompose(u, ann, size=4.0, **kw)
    b = hodge_decompose(u, ann, size=8.0, **kw)
    ref = max(a.wente_norm, 1e-300)
    return abs(a.wente_norm - b.wente_norm) / ref if a.wente_norm > 0 else 0.0


# ---------------------------------------------------------------------------
# harmonic frequency decay

@dataclass
class FrequencyDecay:
    js: list[int]
    plus: list[float]
    minus: list[float]
    plus_outer_monotone: bool
    minus_inner_monotone: bool


def _monotone(seq, slack: float) -> bool:
    return all(seq[k + 1] >= (1.0 - slack) * seq[k] for k in range(len(seq) - 1))


def harmonic_frequency_decay(split: HodgeSplit, ann: AnnulusSystem, slack: float = 0.05
                             ) -> FrequencyDecay:
    """Per-annulus energies of h+ and h-; h+ must grow outward and h- inward."""
    js = ann.j_range
    if len(js) < 3:
        raise ValueError("neck too thin")
    plus, minus = [], []
    for j in js:
        ep, em = split.harmonic_energies(2.0 ** (-j - 1), 2.0 ** -j)
        plus.append(ep)
        minus.append(em)
    # js increase inward: h+ should decrease along js, h- increase
    return FrequencyDecay(js, plus, minus, _monotone(plus[::-1], slack), _monotone(minus, slack))


def synthetic_split(H_func, inner: float, outer: float, n_modes: int = 8, n_radii: int = 48,
                    n_theta: int = 256) -> HodgeSplit:
    """Frequency split of an analytic function H(x, y) on an annulus (for checks)."""
    radii = np.geomspace(inner, outer, n_radii)
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    samp = H_func(radii[:, None] * np.cos(th), radii[:, None] * np.sin(th))
    coef = np.fft.fft(samp, axis=1) / n_theta
    plus = np.zeros((1, n_modes), complex)
    minus = np.zeros((1, n_modes), complex)
    for k, mm in enumerate(range(1, n_modes + 1)):
        B = np.stack([(radii / outer) ** mm, (inner / radii) ** mm], 1).astype(complex)
        sol, *_ = np.linalg.lstsq(B, coef[:, mm], rcond=None)
        plus[0, k] = sol[0] / outer ** mm
        minus[0, k] = np.conj(sol[1] * inner ** mm)
    dummy = plane_grid(1.0, 0.25)
    return HodgeSplit(grid=dummy, pairs=[(0, 1)], phi=np.zeros(1), H=np.zeros(1), radii=radii,
                      plus=plus, minus=minus, h0=coef[:, 0].real[:, None], inner=inner, outer=outer)


def neck_for(u: Field, conc: ConcentrationReport, eta: float) -> AnnulusSystem:
    return annulus_system(u.grid, conc.x, eta, conc.rho, conc.delta0)
