"""Weighted eigenproblems for second variations: weights, operator pairs,
shift-invert eigensolves, index and nullity counts, and the index report."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import gl_core
from .domain import DomainGrid, Field, plane_grid
from .solver import inverse_stereographic

FAMILIES = ("neck_k", "limit_sigma", "limit_bubble_plane", "limit_bubble_sphere")


# ---------------------------------------------------------------------------
# weights

def neck_weight(r: np.ndarray, eta: float, delta: float, beta: float) -> np.ndarray:
    """The three-piece neck weight as a function of |x|."""
    r = np.asarray(r, dtype=float)
    inner = delta / eta
    out = np.empty_like(r)
    a = r >= eta
    b = r < inner
    c = ~a & ~b
    out[a] = (1.0 + (delta / eta**2) ** beta) / eta**2
    rb = r[b]
    out[b] = (eta**2 / delta**2) * ((1.0 + eta**2) ** 2 / eta**4 / (1.0 + rb**2 / delta**2) ** 2
                                    + (delta / eta**2) ** beta)
    rc = r[c]
    out[c] = ((rc / eta) ** beta + (delta / (eta * rc)) ** beta) / rc**2
    return out


def neck_weight_branches(r: float, eta: float, delta: float, beta: float) -> dict[str, float]:
    """Each branch formula of the neck weight evaluated at the same radius."""
    return {
        "outer": (1.0 + (delta / eta**2) ** beta) / eta**2,
        "neck": ((r / eta) ** beta + (delta / (eta * r)) ** beta) / r**2,
        "inner": (eta**2 / delta**2) * ((1.0 + eta**2) ** 2 / eta**4 / (1.0 + r**2 / delta**2) ** 2
                                        + (delta / eta**2) ** beta),
    }


def limit_sigma_weight(r: np.ndarray, eta: float, beta: float) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return np.where(r >= eta, 1.0 / eta**2, (np.minimum(r, eta) / eta) ** beta / np.minimum(r, eta) ** 2)


def bubble_plane_weight(r: np.ndarray, eta: float, beta: float) -> np.ndarray:
    """Two-piece weight on the bubble plane (|y| < 1/eta and beyond)."""
    r = np.asarray(r, dtype=float)
    near = (1.0 + eta**2) ** 2 / (1.0 + r**2) ** 2 / eta**2
    with np.errstate(divide="ignore"):
        far = eta ** -beta / np.maximum(r, 1e-300) ** (2.0 + beta)
    return np.where(r < 1.0 / eta, near, far)


def bubble_sphere_weight(r: np.ndarray, eta: float, beta: float) -> np.ndarray:
    """Sphere weight pulled back to the chart: plane weight times (1+|y|^2)^2."""
    r = np.asarray(r, dtype=float)
    return bubble_plane_weight(r, eta, beta) * (1.0 + r**2) ** 2


@dataclass
class WeightField:
    family: str
    eta: float
    delta: float | None
    beta: float
    center: tuple[float, float]
    values: np.ndarray = field(repr=False)

    @property
    def id(self) -> str:
        d = "none" if self.delta is None else f"{self.delta:.6g}"
        return f"{self.family}(eta={self.eta:.6g},delta={d},beta={self.beta:.6g})"


def weight_field(family: str, grid: DomainGrid, eta: float, delta: float | None = None,
                 beta: float = 0.5, center=(0.0, 0.0)) -> WeightField:
    """Node values of a weight family; |x| is clamped at h/2 near the centre."""
    if family not in FAMILIES:
        raise ValueError(f"unknown weight family {family!r}")
    if not eta > 0 or not beta > 0:
        raise ValueError("eta and beta must be positive")
    X, Y = grid.coords()
    r = np.maximum(np.hypot(X - center[0], Y - center[1]), 0.5 * grid.spacing)
    if family == "neck_k":
        if delta is None or not 0 < delta < eta**2:
            raise ValueError("neck_k needs 0 < delta < eta^2")
        vals = neck_weight(r, eta, delta, beta)
    elif family == "limit_sigma":
        vals = limit_sigma_weight(r, eta, beta)
    elif family == "limit_bubble_plane":
        vals = bubble_plane_weight(r, eta, beta)
    else:
        vals = bubble_sphere_weight(r, eta, beta)
    if not np.all(vals > 0) or not np.all(np.isfinite(vals)):
        raise ValueError("weight must be positive and finite")
    return WeightField(family, float(eta), None if delta is None else float(delta), float(beta),
                       (float(center[0]), float(center[1])), vals)


def unit_weight(grid: DomainGrid) -> WeightField:
    return WeightField("unit", 1.0, None, 1.0, (0.0, 0.0), np.ones(grid.shape))


# ---------------------------------------------------------------------------
# operator pairs

@dataclass
class OperatorPair:
    A: sp.csr_matrix
    M: sp.csr_matrix
    grid: DomainGrid
    n_comp: int
    dof_comp: int
    frames: np.ndarray | None
    weight: WeightField
    kind: str
    lower_shift: float

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def lift(self, vec: np.ndarray) -> np.ndarray:
        """Free-dof vector to a full (ny, nx, n_comp) array."""
        g = self.grid
        nf = int(g.free.sum())
        c = vec.reshape(nf, self.dof_comp)
        if self.frames is not None:
            c = np.einsum("nkc,nk->nc", self.frames, c)
        out = np.zeros(g.shape + (self.n_comp,))
        out[g.free] = c
        return out

    def restrict(self, values: np.ndarray) -> np.ndarray:
        v = values[self.grid.free]
        if self.frames is not None:
            v = np.einsum("nkc,nc->nk", self.frames, v)
        return v.ravel()

    def rayleigh(self, vec: np.ndarray) -> float:
        return float(vec @ (self.A @ vec)) / float(vec @ (self.M @ vec))


def tangent_frames(a: np.ndarray) -> np.ndarray:
    """Per-node orthonormal bases (n, n_comp-1, n_comp) of the complement of a."""
    n, c = a.shape
    q = a / np.linalg.norm(a, axis=1, keepdims=True)
    # Householder reflection sending e_k to q; columns other than k span q-perp
    k = np.argmax(np.abs(q), axis=1)
    s = np.where(q[np.arange(n), k] >= 0, 1.0, -1.0)
    e = np.zeros_like(q)
    e[np.arange(n), k] = 1.0
    v = q * s[:, None] - e
    nv = np.einsum("nc,nc->n", v, v)
    Hh = np.eye(c)[None] - 2.0 * np.einsum("ni,nj->nij", v, v) / np.where(nv > 0, nv, 1.0)[:, None, None]
    Hh[nv == 0] = np.eye(c)
    keep = np.ones((n, c), bool)
    keep[np.arange(n), k] = False
    cols = np.transpose(Hh, (0, 2, 1))[keep].reshape(n, c - 1, c)
    return cols


def _weighted_mass(grid: DomainGrid, weight: WeightField, comp: int) -> sp.csr_matrix:
    w = (weight.values * grid.volume())[grid.free]
    return sp.diags(np.repeat(w, comp)).tocsr()


def _frame_projector(frames: np.ndarray) -> sp.csr_matrix:
    n, k, c = frames.shape
    rows = (np.arange(n)[:, None, None] * c + np.arange(c)[None, None, :]).repeat(k, 1)
    cols = (np.arange(n)[:, None, None] * k + np.arange(k)[None, :, None]).repeat(c, 2)
    return sp.csr_matrix((frames.ravel(), (rows.ravel(), cols.ravel())), shape=(n * c, n * k))


def assemble_operator(u: Field, eps: float | None, weight: WeightField, tangential: bool = False,
                      form: str = "full", density: np.ndarray | None = None,
                      require_unit: bool = True) -> OperatorPair:
    """Symmetric pair (A, M) on free dofs.

    ``form``: ``"full"`` is D^2 E_eps, ``"q"`` drops the (2/eps^2)<u,w>^2
    term, ``"limit"`` is int |grad w|^2 - |grad u|^2 |w|^2 (``density``
    overrides the flat |grad u|^2 used there).  ``tangential`` restricts to
    w perpendicular to u at every node; ``require_unit=False`` allows this
    for GL fields whose modulus is only close to 1.
    """
    g = u.grid
    nc = u.n_comp
    if weight.values.shape != g.shape or np.any(weight.values[g.free] <= 0):
        raise ValueError("weight must be positive on every free node")
    if form not in ("full", "q", "limit"):
        raise ValueError(f"unknown operator form {form!r}")
    a = u.values[g.free]
    if form == "limit":
        K, _ = gl_core.stiffness(g)
        if density is None:
            density = gl_core.gradient_density(g, u.values)
        pot = -(density * g.spacing**2)[g.free]
        A = (sp.kron(K, sp.identity(nc)) + sp.diags(np.repeat(pot, nc))).tocsr()
        neg = np.maximum(-pot, 0.0)
    else:
        if eps is None:
            raise ValueError("GL operators need epsilon")
        A = gl_core.hessian_matrix(u, eps, full=(form == "full"))
        vol = g.volume()[g.free]
        neg = np.maximum((1.0 - np.sum(a * a, -1)) / eps**2 * vol, 0.0)
    M = _weighted_mass(g, weight, nc)
    mass = (weight.values * g.volume())[g.free]
    frames = None
    comp = nc
    if tangential:
        mod = np.linalg.norm(a, axis=1)
        if require_unit and np.any(np.abs(mod - 1.0) > 1e-3):
            raise ValueError("tangential operator needs |u| = 1 within 1e-3")
        frames = tangent_frames(a)
        P = _frame_projector(frames)
        A = (P.T @ A @ P).tocsr()
        M = (P.T @ M @ P).tocsr()
        comp = nc - 1
    A = (0.5 * (A + A.T)).tocsr()
    lower = float(np.max(neg / mass)) if neg.size else 0.0
    return OperatorPair(A, M.tocsr(), g, nc, comp, frames, weight, form, lower)


def assemble_laplacian(grid: DomainGrid, weight: WeightField | None = None) -> OperatorPair:
    """Scalar pair (K, diag(omega vol)) of the edge Laplacian."""
    K, _ = gl_core.stiffness(grid)
    if weight is None:
        weight = unit_weight(grid)
    mvals = (weight.values * grid.volume())[grid.free]
    return OperatorPair(K.tocsr(), sp.diags(mvals).tocsr(), grid, 1, 1, None, weight, "laplacian", 0.0)


# ---------------------------------------------------------------------------
# eigensolves

@dataclass
class SpectralResult:
    eigenvalues: np.ndarray
    vectors: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    weight_id: str
    family: str
    eta: float | None
    delta: float | None
    beta: float | None
    tol_neg: float
    tol_null: float
    index: int
    nullity: int
    converged: bool = True
    counts: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.eigenvalues)

    @property
    def residual_max(self) -> float:
        return float(np.max(self.residuals, initial=0.0))

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "eta": self.eta,
            "delta": self.delta,
            "beta": self.beta,
            "tolerances": {"neg": self.tol_neg, "null": self.tol_null},
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "index": self.index,
            "nullity": self.nullity,
            "residual_max": self.residual_max,
            "counts": self.counts,
            "converged": self.converged,
        }


def default_tolerance(spacing: float, scale: float = 1.0) -> float:
    return max(1e-6, 10.0 * spacing**2) * scale


def count_modes(lam, tol_neg: float, tol_null: float) -> tuple[int, int]:
    lam = np.asarray(lam)
    return int(np.sum(lam < -tol_neg)), int(np.sum(np.abs(lam) <= tol_null))


def eigen_solve(pair: OperatorPair, m: int, seed: int = 0, tol: float | None = None,
                max_restarts: int = 4) -> SpectralResult:
    """Lowest m eigenpairs of A v = lam M v by shift-invert Lanczos.

    The shift sits below the Rayleigh lower bound, so A - sigma M is positive
    definite and factorised once.  Returned vectors are re-orthonormalised in
    the M inner product and each pair is certified by its relative residual.
    """
    n = pair.dim
    if m < 1:
        raise ValueError("need m >= 1")
    A, M = pair.A, pair.M
    diagM = M.diagonal()
    # A >= -lower_shift * M, so A - sigma M is positive definite
    sigma = -(pair.lower_shift + 1.0)
    rng = np.random.default_rng(seed)
    if m >= n - 1:
        lam, V = _dense_eig(A, M)
        lam, V = lam[:m], V[:, :m]
        converged = True
    else:
        Kfac = spla.splu((A - sigma * M).tocsc())
        op = spla.LinearOperator((n, n), matvec=Kfac.solve, dtype=float)
        ncv = min(n, max(2 * m + 1, m + 20))
        converged = False
        for attempt in range(max_restarts):
            v0 = rng.standard_normal(n)
            try:
                lam, V = spla.eigsh(A, k=m, M=M, sigma=sigma, OPinv=op, v0=v0, ncv=ncv,
                                    tol=1e-13, maxiter=20 * n, which="LM")
                converged = True
                break
            except spla.ArpackNoConvergence as exc:
                lam, V = exc.eigenvalues, exc.eigenvectors
                ncv = min(n, 2 * ncv)
        order = np.argsort(lam)
        lam, V = lam[order], V[:, order]
    V = _m_orthonormalize(V, M)
    lam = np.array([float(v @ (A @ v)) / float(v @ (M @ v)) for v in V.T]) if V.size else lam
    order = np.argsort(lam)
    lam, V = lam[order], V[:, order]
    # residual in the M^{-1} norm (eigenvalue units), relative to the spectral scale
    Minv = 1.0 / np.sqrt(diagM)
    top = max(1.0, float(np.max(np.abs(lam), initial=0.0)))
    R = A @ V - (M @ V) * lam[None, :]
    res = np.linalg.norm(R * Minv[:, None], axis=0) / top
    scale = max(1.0, abs(float(lam[0]))) if len(lam) else 1.0
    t = tol if tol is not None else default_tolerance(pair.grid.spacing, scale)
    ind, nul = count_modes(lam, t, t)
    counts = {}
    for f in (0.1, 1.0, 10.0):
        i_, n_ = count_modes(lam, f * t, f * t)
        counts[f"x{f:g}"] = {"index": i_, "nullity": n_}
    w = pair.weight
    return SpectralResult(
        eigenvalues=lam, vectors=V, residuals=res, weight_id=w.id, family=w.family, eta=w.eta,
        delta=w.delta, beta=w.beta, tol_neg=t, tol_null=t, index=ind, nullity=nul,
        converged=converged and bool(np.all(res <= 1e-8)), counts=counts,
    )


def _dense_eig(A, M):
    import scipy.linalg as sla
    lam, V = sla.eigh(A.toarray(), M.toarray())
    return lam, V


def _m_orthonormalize(V: np.ndarray, M) -> np.ndarray:
    if V.size == 0:
        return V
    G = V.T @ (M @ V)
    G = 0.5 * (G + G.T)
    L = np.linalg.cholesky(G)
    return np.linalg.solve(L, V.T).T


def synthetic_result(eigenvalues, tol: float = 1e-6) -> SpectralResult:
    lam = np.sort(np.asarray(eigenvalues, dtype=float))
    ind, nul = count_modes(lam, tol, tol)
    return SpectralResult(lam, np.zeros((0, len(lam))), np.zeros(len(lam)), "synthetic", "synthetic",
                          None, None, None, tol, tol, ind, nul)


def index_nullity(result: SpectralResult, tol_neg: float | None = None,
                  tol_null: float | None = None) -> tuple[int, int]:
    tn = result.tol_neg if tol_neg is None else tol_neg
    tz = result.tol_null if tol_null is None else tol_null
    if result.m == 0 or result.eigenvalues[-1] <= tz:
        raise ValueError("spectral window too small")
    return count_modes(result.eigenvalues, tn, tz)


# ---------------------------------------------------------------------------
# lower bound and neck positivity

def eigen_lower_bound(u: Field, eps: float, weight: WeightField) -> float:
    """mu = max over free nodes of (1-|u|^2) / (eps^2 omega), at least 0."""
    g = u.grid
    m2 = np.sum(u.values**2, -1)
    val = (1.0 - m2) / (eps**2 * weight.values)
    return max(0.0, float(np.max(val[g.free])))


def _smooth_bump(r: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """C^1 cutoff in log r, positive on (lo, hi) and zero elsewhere."""
    t = (np.log(np.maximum(r, 1e-300)) - math.log(lo)) / (math.log(hi) - math.log(lo))
    out = np.where((t > 0) & (t < 1), np.sin(np.pi * np.clip(t, 0, 1)) ** 2, 0.0)
    return out


def neck_positivity_check(u: Field, eps: float, ann, weight: WeightField, trials: int = 200,
                          seed: int = 0, support: np.ndarray | None = None) -> dict:
    """Minimum of Q(w) / int omega |w|^2 over random smooth w supported in the neck."""
    from scipy import ndimage

    g = u.grid
    neck = ann.neck_mask & g.free
    if support is None:
        support = neck
    if np.any(support & ~neck):
        raise ValueError("trial support must lie inside the neck")
    if int(support.sum()) < 4:
        raise ValueError("degenerate neck")
    pair = assemble_operator(u, eps, weight, tangential=False, form="q")
    bump = _smooth_bump(ann.radius, ann.inner, ann.eta) * support
    rng = np.random.default_rng(seed)
    ratios = []
    for t in range(trials):
        scale = rng.uniform(1.0, 6.0)
        noise = rng.standard_normal(g.shape + (u.n_comp,))
        sm = np.stack([ndimage.gaussian_filter(noise[..., c], scale, mode="nearest")
                       for c in range(u.n_comp)], -1)
        w = sm * bump[..., None]
        vec = pair.restrict(w)
        if not np.any(vec):
            continue
        ratios.append(pair.rayleigh(vec))
    ratios = np.array(ratios)
    return {"min_ratio": float(ratios.min()), "mean_ratio": float(ratios.mean()), "trials": len(ratios)}


# ---------------------------------------------------------------------------
# bubble oracle and the index report

def sphere_jacobi_spectrum(l_max: int = 6) -> list[tuple[float, int]]:
    """Jacobi operator of the identity map of S^2 on tangent fields.

    Tangent fields split into gradients and rotated gradients of spherical
    harmonics of degree l >= 1; both see the Hodge Laplacian eigenvalue
    l(l+1), and the Bochner term subtracts 2 (Ric = 1, |grad id|^2 = 2).
    """
    return [(float(l * (l + 1) - 2), 2 * (2 * l + 1)) for l in range(1, l_max + 1)]


def bubble_patch(half_width: float = 16.0, n: int = 257) -> DomainGrid:
    """Stereographic plane patch with every node free (natural boundary)."""
    spacing = 2.0 * half_width / (n - 1)
    g = plane_grid(half_width, spacing, chart="stereographic")
    return dataclasses.replace(g, free=np.ones(g.shape, bool), bc="natural")


def bubble_field(grid: DomainGrid, rotation: np.ndarray | None = None, n_comp: int = 3) -> Field:
    X, Y = grid.coords()
    b = inverse_stereographic(X, Y)
    if rotation is not None:
        b = b @ np.asarray(rotation).T
    vals = np.zeros(grid.shape + (n_comp,))
    vals[..., :3] = b
    return Field(grid, vals)


def bubble_spectrum(eta: float, beta: float, rotation=None, m: int = 24, seed: int = 0,
                    family: str = "limit_bubble_sphere", half_width: float = 16.0, n: int = 257,
                    n_comp: int = 3) -> SpectralResult:
    """Tangential limit operator of the aligned bubble on the sphere chart."""
    g = bubble_patch(half_width, n)
    v = bubble_field(g, rotation, n_comp)
    if family == "sphere_unit":
        # plain sphere measure
        w = WeightField("sphere_unit", eta, None, beta, (0.0, 0.0), np.ones(g.shape))
    else:
        w = weight_field(family, g, eta, None, beta)
    pair = assemble_operator(v, None, w, tangential=True, form="limit")
    return eigen_solve(pair, m, seed=seed)


def normalized(u: Field) -> Field:
    a = u.values
    m = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(m < 1e-8):
        raise ValueError("cannot normalise a field that vanishes")
    return u.with_values(a / m)


@dataclass
class IndexRow:
    epsilon: float
    ind_gl: int
    null_gl: int
    ind_limit: int
    null_limit: int
    ind_bubble: int
    null_bubble: int
    ind_gl_tangential: int | None = None
    null_gl_tangential: int | None = None

    @property
    def upper_ok(self) -> bool:
        return self.ind_gl + self.null_gl <= (self.ind_limit + self.null_limit
                                              + self.ind_bubble + self.null_bubble)

    @property
    def lower_ok(self) -> bool:
        return self.ind_gl >= self.ind_limit + self.ind_bubble

    def csv_row(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "ind_gl": self.ind_gl,
            "null_gl": self.null_gl,
            "ind_limit": self.ind_limit,
            "null_limit": self.null_limit,
            "ind_bubble": self.ind_bubble,
            "null_bubble": self.null_bubble,
            "upper_ok": int(self.upper_ok),
            "lower_ok": int(self.lower_ok),
        }


def index_inequality_report(fields: list[tuple[float, Field]], necks: list, eta: float,
                            beta: float, m: int = 16, seed: int = 0, bubble: SpectralResult | None = None,
                            tangential_gl: bool = False) -> dict:
    """Compare extended indices of u_eps with those of the limit and the bubble.

    ``fields`` holds (eps, u) pairs and ``necks`` the matching
    (ConcentrationReport, BubbleAlignment or None) tuples.
    """
    if len(fields) != len(necks):
        raise ValueError("missing concentration data")
    rows = []
    spectra = []
    final_eps, final = fields[-1]
    limit = normalized(final)
    conc_last = necks[-1][0] if necks[-1] is not None else None
    if conc_last is None:
        raise ValueError("missing concentration data")
    w_lim = weight_field("limit_sigma", limit.grid, eta, None, beta, conc_last.x)
    lim_res = eigen_solve(assemble_operator(limit, None, w_lim, tangential=True, form="limit"), m, seed)
    if bubble is None:
        rot = necks[-1][1].rotation if necks[-1][1] is not None else None
        bubble = bubble_spectrum(eta, beta, rot, m=max(m, 24), seed=seed, n_comp=final.n_comp)
    for (eps, u), nk in zip(fields, necks):
        if nk is None:
            raise ValueError("missing concentration data")
        conc = nk[0]
        delta = conc.rho
        if delta < eta**2:
            w = weight_field("neck_k", u.grid, eta, delta, beta, conc.x)
        else:
            w = weight_field("limit_sigma", u.grid, eta, None, beta, conc.x)
        gl = eigen_solve(assemble_operator(u, eps, w, tangential=False, form="full"), m, seed)
        row = IndexRow(eps, gl.index, gl.nullity, lim_res.index, lim_res.nullity, bubble.index, bubble.nullity)
        if tangential_gl:
            gt = eigen_solve(assemble_operator(u, eps, w, tangential=True, form="full",
                                               require_unit=False), m, seed)
            row.ind_gl_tangential, row.null_gl_tangential = gt.index, gt.nullity
        rows.append(row)
        spectra.append(gl)
    return {"rows": rows, "gl": spectra, "limit": lim_res, "bubble": bubble}
