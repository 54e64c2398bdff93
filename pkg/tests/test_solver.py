import math

import numpy as np
import pytest

from glneck import gl_core
from glneck.config import parse_config
from glneck.domain import Field, GridSpec, build_grid
from glneck.solver import (
    BoundaryData,
    continuation_sweep,
    harmonic_extension,
    initial_guess,
    minimize,
    newton_refine,
    solve_at,
    sweep_epsilons,
)
from glneck.verify import degree1_sweep

DEG1 = BoundaryData("stereographic_degree1", lam=1.0)


def test_minimize_constant_torus():
    g = build_grid(GridSpec("torus", 32))
    u0 = Field(g, np.tile([0.0, 0.6, 0.8], g.shape + (1,)))
    res = minimize(u0, 0.05)
    assert res.converged and res.iterations == 0
    nt = newton_refine(res.field, 0.05)
    assert nt.converged and nt.iterations == 0
    assert np.array_equal(nt.field.values, u0.values)


def test_minimize_descends_and_converges():
    g = build_grid(GridSpec("disk", 129, extent=2.0))
    u0 = initial_guess(g, DEG1, 3, 0, 1e-2)
    gd = minimize(u0, 0.2, DEG1, tol=1e-6, max_iter=5000)
    assert gd.converged and gd.residual <= 1e-6
    assert len(gd.history) == gd.iterations + 1
    assert all(b < a for a, b in zip(gd.history, gd.history[1:]))
    nt = newton_refine(gd.field, 0.2)
    assert nt.converged
    assert abs(gd.energy - nt.energy) <= 0.02 * nt.energy
    # pinned nodes keep the boundary data
    assert np.array_equal(nt.field.values[~g.free], u0.values[~g.free])


def test_newton_fast_on_torus():
    g = build_grid(GridSpec("torus", 32))
    X, Y = g.coords()
    vals = np.zeros(g.shape + (3,))
    vals[..., 2] = 1.0
    vals[..., 0] = 0.2 * np.sin(2 * np.pi * X) * np.cos(2 * np.pi * Y)
    u0 = Field(g, vals)
    gd = minimize(u0, 0.2, tol=1e-4)
    nt = newton_refine(gd.field, 0.2, tol=1e-10)
    assert nt.converged and nt.residual <= 1e-10 and nt.iterations <= 8


def test_schedule_of_one_matches_solve():
    g = build_grid(GridSpec("disk", 65, extent=2.0))
    u0 = initial_guess(g, DEG1, 3, 0, 1e-2)
    rec = sweep_epsilons(u0, DEG1, [0.2], gd_tol=1e-3)
    _, nt = solve_at(u0, 0.2, DEG1, 1e-3, 3000, 1e-9, 20, 1e-10)
    assert len(rec.steps) == 1
    assert np.array_equal(rec.steps[0].field.values, nt.field.values)


def test_constant_torus_scenario():
    spec = parse_config("[domain]\nkind = torus\nn = 16\n[epsilon]\nstart = 0.2\ncount = 3\n")
    rec = continuation_sweep(spec)
    assert len(rec.steps) == 3
    for s in rec.steps:
        assert s.report.total == 0.0
        assert np.all(s.field.values == s.field.values[0, 0])


def test_constant_boundary_gives_constant():
    g = build_grid(GridSpec("disk", 33, extent=2.0))
    bc = BoundaryData("constant", value=(0.0, 0.0, 1.0))
    h = harmonic_extension(bc, g)
    assert np.allclose(h.values[g.inside], [0.0, 0.0, 1.0], atol=1e-13)


def fourier_extension_energy(bc, n_comp=3, n_theta=4096):
    """Dirichlet energy of the harmonic extension, from the Fourier coefficients of the trace."""
    th = 2 * np.pi * np.arange(n_theta) / n_theta
    tr = bc.trace(th, n_comp)
    E = 0.0
    for c in range(n_comp):
        ck = np.fft.fft(tr[:, c]) / n_theta
        k = np.fft.fftfreq(n_theta, 1.0 / n_theta)
        E += math.pi * float(np.sum(np.abs(k) * np.abs(ck) ** 2))
    return E


def test_harmonic_extension_energy_fourier():
    ref = fourier_extension_energy(DEG1)
    g = build_grid(GridSpec("disk", 257, extent=2.0))
    h = harmonic_extension(DEG1, g)
    E = gl_core.dirichlet_sum(g, h.values)
    assert ref >= math.pi  # winding contributes at least pi
    assert abs(E - ref) <= 0.02 * ref


def test_sweep_energies_bounded_and_increasing():
    sd = degree1_sweep()
    energies = [gl_core.energy(u, eps).total for eps, u in sd.fields]
    # sphere-valued minimizer: the hemisphere, energy 4 pi lam^2 / (1 + lam^2)
    cap = 4 * math.pi * DEG1.lam**2 / (1 + DEG1.lam**2)
    assert all(b > a for a, b in zip(energies, energies[1:]))
    assert max(energies) <= cap * 1.01


def test_first_epsilon_failure_raises():
    g = build_grid(GridSpec("disk", 65, extent=2.0))
    u0 = initial_guess(g, DEG1, 3, 0, 1e-2)
    with pytest.raises(RuntimeError):
        sweep_epsilons(u0, DEG1, [0.05], gd_tol=1e-3, max_iter=1, newton_max_steps=0)


def test_sweep_rho_hemisphere_limit():
    # ball energy of the hemisphere map: 4 pi r^2 / (1 + r^2) = delta0 / 2
    sd = degree1_sweep()
    q = 1e-2 / (8 * math.pi)
    rho_lim = math.sqrt(q / (1 - q))
    assert len(sd.necks) == 4
    assert sd.necks[-1]["conc"].rho == pytest.approx(rho_lim, rel=0.01)


def test_sweep_rho_decreasing():
    sd = degree1_sweep()
    rho = [nk["conc"].rho for nk in sd.necks]
    assert all(b < a for a, b in zip(rho, rho[1:])), rho
