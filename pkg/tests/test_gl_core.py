import math

import numpy as np
import pytest

from glneck import gl_core
from glneck.domain import Field, GridSpec, build_grid
from glneck.solver import BoundaryData, initial_guess, inverse_stereographic, solve_at


def const_field(grid, p=(0.0, 0.0, 1.0)):
    return Field(grid, np.broadcast_to(np.asarray(p, float), grid.shape + (len(p),)).copy())


def smooth_field(grid, seed=0, n_comp=3):
    X, Y = grid.coords()
    rng = np.random.default_rng(seed)
    vals = np.zeros(grid.shape + (n_comp,))
    for c in range(n_comp):
        a, b = rng.standard_normal(2)
        vals[..., c] = 0.4 * a * np.cos(2 * np.pi * (X + c * Y)) + 0.4 * b * np.sin(2 * np.pi * Y)
    vals[..., -1] += 0.7
    return Field(grid, vals)


@pytest.fixture(scope="module")
def torus():
    return build_grid(GridSpec("torus", 32, extent=1.0))


@pytest.fixture(scope="module")
def disk_solution():
    g = build_grid(GridSpec("disk", 65, extent=2.0))
    bc = BoundaryData("stereographic_degree1")
    _, nt = solve_at(initial_guess(g, bc, 3, 0, 1e-2), 0.2, bc, 1e-3, 3000, 1e-10, 20, 1e-10)
    return nt.field


def test_energy_constant_unit(torus):
    rep = gl_core.energy(const_field(torus), 0.1)
    assert rep.total == 0.0 and rep.dirichlet == 0.0 and rep.potential == 0.0


def test_energy_split(torus):
    rep = gl_core.energy(smooth_field(torus), 0.3)
    assert rep.dirichlet >= 0 and rep.potential >= 0
    assert math.isclose(rep.total, rep.dirichlet + rep.potential, rel_tol=1e-14)
    assert math.isclose(rep.total, gl_core.energy_value(smooth_field(torus), 0.3), rel_tol=1e-12)


def test_energy_density_integrates(torus):
    u = smooth_field(torus)
    rep = gl_core.energy(u, 0.3)
    assert math.isclose(float(np.sum(rep.density * torus.volume())), rep.total, rel_tol=1e-12)


def test_energy_rejects_bad_eps(torus):
    with pytest.raises(ValueError):
        gl_core.energy(const_field(torus), 0.0)


def test_bubble_energy_on_patch():
    # closed form: (1/2) int |grad pi^-1|^2 over [-L,L]^2 tends to 4 pi
    vals = []
    for n, L in ((129, 8.0), (257, 16.0)):
        g = build_grid(GridSpec("plane_patch", n, extent=2 * L))
        X, Y = g.coords()
        vals.append(gl_core.dirichlet_sum(g, inverse_stereographic(X, Y)) / (4 * math.pi))
    assert abs(vals[1] - 1.0) < abs(vals[0] - 1.0)
    assert abs(vals[1] - 1.0) < 0.01


def test_residual_constant_zero(torus):
    r = gl_core.el_residual(const_field(torus, (0.6, 0.8, 0.0)), 0.05)
    assert np.all(r.values == 0.0)


def test_residual_is_gradient(torus):
    u = smooth_field(torus, 1)
    rng = np.random.default_rng(1)
    for _ in range(3):
        v = rng.standard_normal(u.values.shape)
        t = 1e-5
        fd = (gl_core.energy_value(u.with_values(u.values + t * v), 0.3)
              - gl_core.energy_value(u.with_values(u.values - t * v), 0.3)) / (2 * t)
        an = float(np.sum(gl_core.energy_gradient(u, 0.3) * v))
        assert abs(fd - an) <= 1e-6 * abs(fd)


def test_disk_solution_residual(disk_solution):
    r = gl_core.el_residual(disk_solution, 0.2)
    assert np.abs(r.values).max() <= 1e-8


def test_second_variation_zero_direction(torus):
    u = smooth_field(torus)
    assert gl_core.second_variation(u, 0.2, u.with_values(np.zeros_like(u.values))) == 0.0


def test_second_variation_constant_orthogonal(torus):
    u = const_field(torus)
    v = const_field(torus, (1.0, 0.0, 0.0))
    assert abs(gl_core.second_variation(u, 0.1, v)) < 1e-12


def test_second_variation_centered_difference(torus):
    u = smooth_field(torus, 2)
    rng = np.random.default_rng(2)
    v = u.with_values(rng.standard_normal(u.values.shape))
    exact = gl_core.second_variation(u, 0.3, v)
    E0 = gl_core.energy_value(u, 0.3)
    errs = []
    for t in (0.04, 0.02):
        fd = (gl_core.energy_value(u.with_values(u.values + t * v.values), 0.3) - 2 * E0
              + gl_core.energy_value(u.with_values(u.values - t * v.values), 0.3)) / t**2
        errs.append(abs(fd - exact))
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_second_variation_pinned_check(disk_solution):
    v = disk_solution.with_values(np.ones_like(disk_solution.values))
    with pytest.raises(ValueError):
        gl_core.second_variation(disk_solution, 0.2, v)


def test_hessian_matches_form(disk_solution):
    u = disk_solution
    g = u.grid
    H = gl_core.hessian_matrix(u, 0.2)
    rng = np.random.default_rng(0)
    vals = np.zeros_like(u.values)
    vals[g.free] = rng.standard_normal((int(g.free.sum()), 3))
    x = vals[g.free].ravel()
    assert math.isclose(float(x @ (H @ x)), gl_core.second_variation(u, 0.2, u.with_values(vals)),
                        rel_tol=1e-10)


def test_current_constant(torus):
    J, res = gl_core.wedge_current(const_field(torus))
    assert np.all(J == 0) and np.all(res == 0)


def test_current_linear_angle(torus):
    X, _ = torus.coords()
    th = 2 * np.pi * X
    u = Field(torus, np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], -1))
    _, res = gl_core.wedge_current(u)
    assert res.max() < 1e-10


def test_current_refinement():
    bc = BoundaryData("stereographic_degree1")
    vals = []
    for n in (65, 129):
        g = build_grid(GridSpec("disk", n, extent=2.0))
        _, nt = solve_at(initial_guess(g, bc, 3, 0, 1e-2), 0.2, bc, 1e-3, 3000, 1e-10, 20, 1e-10)
        _, res = gl_core.wedge_current(nt.field)
        X, Y = g.coords()
        vals.append(res[np.hypot(X, Y) < 0.7].max())
    assert 3.0 < vals[0] / vals[1] < 5.0


def test_hopf_constant(torus):
    H, _ = gl_core.hopf_differential(const_field(torus))
    assert np.all(H == 0)


def test_hopf_conformal_small():
    sups = []
    for n in (65, 129):
        g = build_grid(GridSpec("plane_patch", n, extent=4.0))
        X, Y = g.coords()
        H, _ = gl_core.hopf_differential(Field(g, inverse_stereographic(X, Y)))
        sups.append(np.abs(H[2:-2, 2:-2]).max())
    assert sups[1] < 0.05
    assert 3.0 < sups[0] / sups[1] < 5.0


def test_pohozaev_constant():
    g = build_grid(GridSpec("disk", 65, extent=2.0))
    rep = gl_core.pohozaev_check(const_field(g), 0.1, (0.0, 0.0), 0.5)
    assert rep.interior_potential == 0.0 and rep.boundary_term == 0.0


def test_pohozaev_on_solution(disk_solution):
    u = disk_solution
    R = gl_core.fubini_shell(u, 0.2, (0.0, 0.0), 0.3, 0.6)
    assert 0.3 <= R <= 0.6
    rep = gl_core.pohozaev_check(u, 0.2, (0.0, 0.0), R)
    assert rep.constant <= 10.0
    assert abs(rep.identity_residual) <= 0.05 * rep.boundary_term


def test_bochner_trivial(torus):
    rep = gl_core.bochner_residual(const_field(torus), 0.1)
    assert np.all(rep.lhs == 0) and np.all(rep.lhs <= rep.rhs)
    zero = Field(torus, np.zeros(torus.shape + (3,)))
    rep = gl_core.bochner_residual(zero, 0.1)
    assert np.all(rep.lhs == 0)


def test_bochner_calibrated(disk_solution):
    rep = gl_core.bochner_residual(disk_solution, 0.2)
    assert rep.violation_fraction == 0.0
    assert rep.measured_constant <= rep.constant


def test_sup(torus):
    assert gl_core.sup_check(Field(torus, np.zeros(torus.shape + (2,)))) == 0.0
    X, Y = torus.coords()
    assert math.isclose(gl_core.sup_check(Field(torus, inverse_stereographic(X, Y))), 1.0, rel_tol=1e-14)


def test_sup_solution(disk_solution):
    h = disk_solution.grid.spacing
    assert gl_core.sup_check(disk_solution) <= 1 + 10 * h * h


def test_modulus_sphere_valued(torus):
    X, Y = torus.coords()
    rep = gl_core.modulus_equation_residual(Field(torus, inverse_stereographic(X - 0.5, Y - 0.5)), 0.1)
    assert rep.max_defect < 1e-10


def test_modulus_degenerate(torus):
    with pytest.raises(ValueError, match="modulus degenerate"):
        gl_core.modulus_equation_residual(Field(torus, np.zeros(torus.shape + (3,))), 0.1)


def test_modulus_refinement():
    bc = BoundaryData("stereographic_degree1")
    vals = []
    for n in (65, 129):
        g = build_grid(GridSpec("disk", n, extent=2.0))
        _, nt = solve_at(initial_guess(g, bc, 3, 0, 1e-2), 0.2, bc, 1e-3, 3000, 1e-10, 20, 1e-10)
        X, Y = g.coords()
        region = (np.hypot(X, Y) < 0.9) & (np.hypot(X, Y) > 0.2)
        vals.append(gl_core.modulus_equation_residual(nt.field, 0.2, region).max_residual)
    assert vals[0] / vals[1] > 3.0
