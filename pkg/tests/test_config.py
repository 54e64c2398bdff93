import pytest

from glneck.config import ConfigError, parse_config

MINIMAL = "[domain]\nkind = disk\nn = 33\n[epsilon]\nstart = 0.2\n"


def test_minimal_defaults():
    spec = parse_config(MINIMAL)
    assert spec.boundary.kind == "stereographic_degree1"
    assert spec.epsilon.schedule() == [0.2, 0.1, 0.05, 0.025]
    assert spec.neck.eta == 0.9 and spec.spectral.weight == "neck_k"
    g = spec.build_grid()
    assert g.n_x == 33 and g.spacing == pytest.approx(2.0 / 32)


def test_missing_key_named():
    with pytest.raises(ConfigError) as e:
        parse_config("[domain]\nkind = disk\n[epsilon]\nstart = 0.2\n")
    assert e.value.key == "domain.n" and "domain.n" in str(e.value)
    with pytest.raises(ConfigError, match="epsilon.start"):
        parse_config("[domain]\nkind = disk\nn = 33\n")


def test_unknown_key_line_number():
    with pytest.raises(ConfigError) as e:
        parse_config(MINIMAL + "[neck]\neta = 0.5\nwidth = 3\n")
    assert e.value.line == 8 and "width" in str(e.value)


def test_unknown_section():
    with pytest.raises(ConfigError, match=r"unknown section \[plot\]") as e:
        parse_config(MINIMAL + "[plot]\nx = 1\n")
    assert e.value.line == 6


def test_bad_value_reports_line():
    with pytest.raises(ConfigError) as e:
        parse_config("[domain]\nkind = disk\nn = many\n[epsilon]\nstart = 0.2\n")
    assert e.value.line == 3


@pytest.mark.parametrize("extra, key", [
    ("[spectral]\nbeta = 1.5\n", "beta"),
    ("[spectral]\nnum_eigs = 0\n", "num_eigs"),
    ("[neck]\neta = -1\n", "eta"),
    ("[solver]\ngd_tol = 0\n", "gd_tol"),
    ("[boundary]\nkind = dipole\n", "kind"),
])
def test_invalid_values(extra, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(MINIMAL + extra)


def test_schedule_factor_rules():
    with pytest.raises(ConfigError, match="factor"):
        parse_config(MINIMAL.replace("start = 0.2", "start = 0.2\nfactor = 1.0\ncount = 3"))
    spec = parse_config(MINIMAL.replace("start = 0.2", "start = 0.2\nfactor = 1.0\ncount = 2"))
    assert spec.epsilon.schedule() == [0.2, 0.2]


def test_perturbation_default_by_boundary():
    assert parse_config(MINIMAL).solver.perturbation == 1e-2
    torus = parse_config("[domain]\nkind = torus\nn = 16\n[epsilon]\nstart = 0.2\n")
    assert torus.boundary.kind == "constant" and torus.solver.perturbation == 0.0
    explicit = parse_config(MINIMAL + "[solver]\nperturbation = 0.0\n")
    assert explicit.solver.perturbation == 0.0


def test_echo_reparses_identically():
    spec = parse_config(MINIMAL + "[boundary]\nlam = 2.5\n[solver]\nseed = 7\n")
    again = parse_config(spec.to_ini())
    assert again == spec and again.hash == spec.hash
    assert parse_config(MINIMAL).hash != spec.hash
