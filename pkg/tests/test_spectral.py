import math

import numpy as np
import pytest

from glneck import gl_core, spectral
from glneck.domain import Field, GridSpec, annulus_system, build_grid
from glneck.solver import BoundaryData, initial_guess, solve_at


@pytest.fixture(scope="module")
def torus():
    return build_grid(GridSpec("torus", 32, extent=1.0))


@pytest.fixture(scope="module")
def disk_solution():
    g = build_grid(GridSpec("disk", 65, extent=2.0))
    bc = BoundaryData("stereographic_degree1")
    _, nt = solve_at(initial_guess(g, bc, 3, 0, 1e-2), 0.2, bc, 1e-3, 3000, 1e-10, 20, 1e-10)
    return nt.field


def const(grid, p=(0.0, 0.0, 1.0)):
    return Field(grid, np.tile(np.asarray(p, float), grid.shape + (1,)))


# --- weights -----------------------------------------------------------------

def test_neck_weight_matching_values():
    eta, delta, beta = 0.6, 0.01, 0.3
    at_eta = spectral.neck_weight_branches(eta, eta, delta, beta)
    expect = (1 + (delta / eta**2) ** beta) / eta**2
    assert at_eta["outer"] == pytest.approx(expect, rel=1e-14)
    assert at_eta["neck"] == pytest.approx(expect, rel=1e-14)
    at_in = spectral.neck_weight_branches(delta / eta, eta, delta, beta)
    expect = (eta**2 / delta**2) * (1 + (delta / eta**2) ** beta)
    assert at_in["inner"] == pytest.approx(expect, rel=1e-14)
    assert at_in["neck"] == pytest.approx(expect, rel=1e-14)


def test_neck_weight_continuity_random():
    rng = np.random.default_rng(11)
    for _ in range(20):
        eta = rng.uniform(0.05, 0.95)
        delta = rng.uniform(1e-6, 0.95) * eta**2
        beta = rng.uniform(0.05, 0.95)
        for r in (eta, delta / eta):
            lo = spectral.neck_weight(np.array([r * (1 - 1e-13)]), eta, delta, beta)[0]
            hi = spectral.neck_weight(np.array([r]), eta, delta, beta)[0]
            assert abs(lo - hi) <= 1e-9 * hi


def test_bubble_weight_pieces_agree():
    for eta, beta in ((0.5, 0.5), (0.9, 0.2), (0.1, 0.8)):
        r = 1.0 / eta
        near = (1 + eta**2) ** 2 / (1 + r**2) ** 2 / eta**2
        far = eta**-beta / r ** (2 + beta)
        assert near == pytest.approx(eta**2) and far == pytest.approx(eta**2)
        w = spectral.bubble_sphere_weight(np.array([r]), eta, beta)[0]
        assert w == pytest.approx(eta**2 * (1 + r**2) ** 2)


def test_weight_field_positive(torus):
    g = build_grid(GridSpec("disk", 65, extent=2.0))
    for fam in spectral.FAMILIES:
        w = spectral.weight_field(fam, g, 0.5, 0.01 if fam == "neck_k" else None, 0.5)
        assert np.all(w.values > 0) and np.all(np.isfinite(w.values))
        assert fam in w.id
    with pytest.raises(ValueError):
        spectral.weight_field("neck_k", g, 0.5, 0.5)
    with pytest.raises(ValueError):
        spectral.weight_field("other", g, 0.5)


# --- operators -----------------------------------------------------------------

def test_tangent_frames_orthonormal():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((50, 4))
    F = spectral.tangent_frames(a)
    assert F.shape == (50, 3, 4)
    assert np.allclose(np.einsum("nkc,nlc->nkl", F, F), np.eye(3))
    assert np.allclose(np.einsum("nkc,nc->nk", F, a), 0, atol=1e-12)


def test_rayleigh_matches_second_variation(disk_solution):
    u = disk_solution
    g = u.grid
    w = spectral.weight_field("neck_k", g, 0.5, 0.05, 0.5)
    pair = spectral.assemble_operator(u, 0.2, w)
    rng = np.random.default_rng(5)
    for _ in range(10):
        vals = np.zeros_like(u.values)
        vals[g.free] = rng.standard_normal((int(g.free.sum()), 3))
        v = u.with_values(vals)
        norm = float(np.sum(w.values[..., None] * g.volume()[..., None] * vals**2))
        expect = gl_core.second_variation(u, 0.2, v) / norm
        assert pair.rayleigh(pair.restrict(vals)) == pytest.approx(expect, rel=1e-11)


def test_q_form_drops_modulus_term(disk_solution):
    u = disk_solution
    w = spectral.unit_weight(u.grid)
    full = spectral.assemble_operator(u, 0.2, w, form="full")
    q = spectral.assemble_operator(u, 0.2, w, form="q")
    a = u.values[u.grid.free]
    vec = a.ravel()
    diff = float(vec @ ((full.A - q.A) @ vec))
    vol = u.grid.volume()[u.grid.free]
    expect = float(np.sum(2.0 / 0.04 * vol * np.sum(a * a, -1) ** 2))
    assert diff == pytest.approx(expect, rel=1e-10)


def test_constant_tangential_torus(torus):
    u = const(torus)
    pair = spectral.assemble_operator(u, 0.1, spectral.unit_weight(torus), tangential=True)
    res = spectral.eigen_solve(pair, 6)
    assert res.index == 0 and res.nullity == 2
    assert np.allclose(res.eigenvalues[:2], 0, atol=1e-9)
    assert res.eigenvalues[2] == pytest.approx(4 * np.pi**2, rel=0.02)


def test_torus_laplacian_spectrum():
    g = build_grid(GridSpec("torus", 64, extent=1.0))
    res = spectral.eigen_solve(spectral.assemble_laplacian(g), 13)
    lam = res.eigenvalues / (4 * np.pi**2)
    groups = [lam[:1], lam[1:5], lam[5:9], lam[9:13]]
    for grp, k2 in zip(groups, (0, 1, 2, 4)):
        assert np.allclose(grp, k2, atol=max(k2, 1) * (2 * np.pi / 64) ** 2)
    # discrete symbol (4/h^2) sin^2(pi h) for k = 1
    h = g.spacing
    assert res.eigenvalues[1] == pytest.approx(4 / h**2 * math.sin(math.pi * h) ** 2, rel=1e-8)
    assert res.residual_max < 1e-8


def test_laplacian_order():
    errs = []
    for n in (32, 64):
        g = build_grid(GridSpec("torus", n, extent=1.0))
        res = spectral.eigen_solve(spectral.assemble_laplacian(g), 5)
        errs.append(abs(res.eigenvalues[1] - 4 * np.pi**2))
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_counting_synthetic():
    res = spectral.synthetic_result([-1.0, -1e-9, 0.5], tol=1e-6)
    assert spectral.index_nullity(res) == (1, 1)
    with pytest.raises(ValueError, match="window too small"):
        spectral.index_nullity(spectral.synthetic_result([-1.0, 0.0], tol=1e-6))


def test_counts_at_scaled_tolerances(torus):
    res = spectral.eigen_solve(spectral.assemble_operator(const(torus), 0.1, spectral.unit_weight(torus),
                                                          tangential=True), 6)
    assert set(res.counts) == {"x0.1", "x1", "x10"}
    assert res.counts["x1"] == {"index": 0, "nullity": 2}


def test_lower_bound_unit_field(torus):
    u = const(torus)
    w = spectral.unit_weight(torus)
    assert spectral.eigen_lower_bound(u, 0.1, w) == 0.0
    res = spectral.eigen_solve(spectral.assemble_operator(u, 0.1, w, form="q"), 6)
    assert res.eigenvalues.min() >= -res.tol_neg


def test_lower_bound_solution(disk_solution):
    u = disk_solution
    w = spectral.weight_field("neck_k", u.grid, 0.5, 0.05, 0.5)
    mu = spectral.eigen_lower_bound(u, 0.2, w)
    res = spectral.eigen_solve(spectral.assemble_operator(u, 0.2, w, form="q"), 6)
    assert res.eigenvalues[0] >= -mu - 1e-8


def test_minimizer_index_zero(disk_solution):
    u = disk_solution
    w = spectral.weight_field("neck_k", u.grid, 0.5, 0.05, 0.5)
    res = spectral.eigen_solve(spectral.assemble_operator(u, 0.2, w), 8)
    assert res.index == 0


def test_positivity_unit_modulus_neck():
    g = build_grid(GridSpec("disk", 129, extent=2.0))
    X, Y = g.coords()
    r = np.hypot(X, Y)
    rs = np.where(r > 0, r, 1.0)
    u = Field(g, np.stack([X / rs, Y / rs, np.zeros_like(X)], -1) + (r == 0)[..., None] * [0, 0, 1.0])
    ann = annulus_system(g, (0.0, 0.0), 0.8, 0.04)
    w = spectral.weight_field("neck_k", g, 0.8, 0.04, 0.5)
    out = spectral.neck_positivity_check(u, 0.1, ann, w, trials=30)
    assert out["trials"] == 30 and out["min_ratio"] > 0


def test_sphere_jacobi_oracle():
    spec = spectral.sphere_jacobi_spectrum(3)
    assert spec == [(0.0, 6), (4.0, 10), (10.0, 14)]


def test_bubble_spectrum_small_patch():
    res = spectral.bubble_spectrum(0.5, 0.5, m=12, family="sphere_unit", half_width=8.0, n=129)
    assert res.index == 0 and res.nullity == 6
    # l = 2 level, truncation-limited on this small patch
    assert res.eigenvalues[6] == pytest.approx(4.0, rel=0.15)


def test_index_row_logic():
    row = spectral.IndexRow(0.1, 0, 1, 0, 1, 0, 6)
    assert row.upper_ok and row.lower_ok
    bad = spectral.IndexRow(0.1, 0, 9, 0, 1, 0, 6)
    assert not bad.upper_ok
    assert set(row.csv_row()) >= {"upper_ok", "lower_ok", "ind_gl", "null_bubble"}
