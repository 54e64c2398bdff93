import math

import numpy as np
import pytest

from glneck.domain import (
    Field,
    GridSpec,
    annulus_system,
    build_grid,
    divergence,
    gradients,
    laplace_beltrami,
    plane_grid,
    polar_resample,
    read_glf1,
    write_glf1,
)


@pytest.fixture(scope="module")
def torus():
    return build_grid(GridSpec("torus", 64, extent=1.0))


def test_grid_kinds_and_bc():
    t = build_grid(GridSpec("torus", 16))
    d = build_grid(GridSpec("disk", 33, extent=2.0))
    p = build_grid(GridSpec("plane_patch", 17, extent=4.0))
    assert t.bc == "periodic"
    assert d.bc == "dirichlet" and p.bc == "dirichlet"
    assert d.inside.sum() < d.n_x * d.n_y
    assert not p.free[0].any() and p.free[1:-1, 1:-1].all()


def test_grid_rejects_small():
    with pytest.raises(ValueError):
        build_grid(GridSpec("torus", 4))


def test_stereographic_lambda():
    g = build_grid(GridSpec("plane_patch", 33, extent=8.0, chart="stereographic"))
    X, Y = g.coords()
    assert np.allclose(g.lambda_field, np.log(2.0 / (1.0 + X**2 + Y**2)))


def test_field_validation(torus):
    with pytest.raises(ValueError):
        Field(torus, np.zeros(torus.shape + (1,)))
    bad = np.zeros(torus.shape + (3,))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Field(torus, bad)


def test_laplacian_quadratic_exact():
    g = plane_grid(1.0, 1.0 / 16)
    X, Y = g.coords()
    lap = laplace_beltrami(g, X**2 + Y**2)
    assert np.allclose(lap[1:-1, 1:-1], 4.0, atol=1e-9)


def test_laplacian_constant_zero(torus):
    assert np.all(laplace_beltrami(torus, np.full(torus.shape, 3.0)) == 0.0)


def test_laplacian_sine_order():
    errs = []
    for n in (64, 128):
        g = build_grid(GridSpec("torus", n, extent=1.0))
        X, _ = g.coords()
        f = np.sin(2 * np.pi * X)
        errs.append(np.abs(laplace_beltrami(g, f) + 4 * np.pi**2 * f).max())
    assert errs[1] < 2e-2 * 4 * np.pi**2
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_gradients_linear_and_constant():
    g = plane_grid(1.0, 0.125)
    X, _ = g.coords()
    grad, perp = gradients(g, X)
    assert np.allclose(grad[1:-1, 1:-1], [1.0, 0.0])
    assert np.allclose(perp[1:-1, 1:-1], [0.0, 1.0])
    grad, perp = gradients(g, np.ones(g.shape))
    assert np.all(grad == 0) and np.all(perp == 0)


def test_div_perp_grad_vanishes(torus):
    rng = np.random.default_rng(3)
    f = rng.standard_normal(torus.shape)
    _, perp = gradients(torus, f)
    assert np.abs(divergence(torus, perp)).max() < 1e-10


def test_annulus_degenerate():
    g = build_grid(GridSpec("disk", 65, extent=2.0))
    with pytest.raises(ValueError, match="degenerate neck"):
        annulus_system(g, (0.0, 0.0), 0.5, 0.25)


def test_annulus_eta_bound_named():
    g = build_grid(GridSpec("disk", 65, extent=2.0))
    with pytest.raises(ValueError, match="inradius"):
        annulus_system(g, (0.0, 0.0), 1.2, 0.01)


def test_annulus_partition_counts():
    g = build_grid(GridSpec("disk", 257, extent=2.0))
    ann = annulus_system(g, (0.0, 0.0), 0.9, 0.01)
    total = sum(int(ann.annulus_mask(j).sum()) for j in np.unique(ann.labels[ann.labels >= 0]))
    assert total == int(ann.neck_mask.sum())
    r = ann.radius
    assert np.all((r[ann.neck_mask] >= ann.inner) & (r[ann.neck_mask] < ann.outer))
    # dyadic bounds of the s-range
    assert 2.0 ** (-ann.s1) <= ann.eta / 2 and 2.0 ** (-ann.s2) >= 2 * ann.delta / ann.eta


def test_polar_resample_constant_and_mode():
    g = build_grid(GridSpec("disk", 129, extent=2.0))
    s = polar_resample(g, np.ones(g.shape), (0.0, 0.0), [0.3, 0.6], 64)
    assert s.shape == (2, 64) and np.allclose(s, 1.0)
    X, Y = g.coords()
    th = np.arctan2(Y, X)
    f = np.hypot(X, Y) ** 3 * np.cos(3 * th)
    samples = polar_resample(g, f, (0.0, 0.0), [0.5], 128)[0]
    spec = np.abs(np.fft.rfft(samples))
    assert int(np.argmax(spec)) == 3


def test_polar_resample_exits():
    g = build_grid(GridSpec("disk", 65, extent=2.0))
    with pytest.raises(ValueError):
        polar_resample(g, np.ones(g.shape), (0.0, 0.0), [1.5], 16)


def test_glf1_roundtrip(tmp_path, torus):
    rng = np.random.default_rng(0)
    f = Field(torus, rng.standard_normal(torus.shape + (3,)))
    p = tmp_path / "f.glf1"
    write_glf1(p, f)
    raw = p.read_bytes()
    assert raw.startswith(b"GLF1 torus 64 64 3 ")
    g = read_glf1(p, torus)
    assert np.array_equal(g.values, f.values)
    again = read_glf1(p)
    assert again.grid.shape == torus.shape and math.isclose(again.grid.spacing, torus.spacing)


def test_glf1_truncated(tmp_path, torus):
    f = Field(torus, np.zeros(torus.shape + (2,)))
    p = tmp_path / "f.glf1"
    write_glf1(p, f)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_glf1(p)
