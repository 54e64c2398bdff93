"""Scenario files: INI sections [domain] [target] [boundary] [epsilon] [solver]
[neck] [spectral].  Unknown sections or keys are errors; every key has a
default except domain.kind, domain.n and epsilon.start."""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field, fields

from .domain import DomainGrid, GridSpec, build_grid
from .solver import BoundaryData


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        loc = f"line {line}: " if line is not None else ""
        super().__init__(loc + message)


@dataclass
class DomainSection:
    kind: str
    n: int
    extent: float | None = None
    chart: str = "flat"


@dataclass
class TargetSection:
    n_comp: int = 3


@dataclass
class BoundarySection:
    kind: str | None = None
    lam: float = 1.0
    value: tuple[float, ...] = (0.0, 0.0, 1.0)


@dataclass
class EpsilonSection:
    start: float
    factor: float = 0.5
    count: int = 4

    def schedule(self) -> list[float]:
        return [self.start * self.factor**k for k in range(self.count)]


@dataclass
class SolverSection:
    seed: int = 0
    perturbation: float | None = None
    gd_tol: float = 1e-3
    max_iter: int = 3000
    newton_tol: float = 1e-9
    newton_max_steps: int = 20
    cg_rtol: float = 1e-10


@dataclass
class NeckSection:
    eta: float = 0.9
    delta0: float = 1e-2
    n_theta: int = 256


@dataclass
class SpectralSection:
    weight: str = "neck_k"
    num_eigs: int = 16
    beta: float = 0.5
    bubble_half_width: float = 16.0
    bubble_n: int = 257


SECTIONS = {
    "domain": DomainSection,
    "target": TargetSection,
    "boundary": BoundarySection,
    "epsilon": EpsilonSection,
    "solver": SolverSection,
    "neck": NeckSection,
    "spectral": SpectralSection,
}
REQUIRED = {"domain": ("kind", "n"), "epsilon": ("start",)}
DEFAULT_EXTENT = {"disk": 2.0, "torus": 1.0, "plane_patch": 8.0}


@dataclass
class ScenarioSpec:
    domain: DomainSection
    target: TargetSection = field(default_factory=TargetSection)
    boundary: BoundarySection = field(default_factory=BoundarySection)
    epsilon: EpsilonSection = field(default_factory=lambda: EpsilonSection(0.2))
    solver: SolverSection = field(default_factory=SolverSection)
    neck: NeckSection = field(default_factory=NeckSection)
    spectral: SpectralSection = field(default_factory=SpectralSection)

    def build_grid(self) -> DomainGrid:
        d = self.domain
        ext = d.extent if d.extent is not None else DEFAULT_EXTENT[d.kind]
        return build_grid(GridSpec(d.kind, d.n, extent=ext, chart=d.chart))

    def boundary_data(self, grid: DomainGrid | None = None) -> BoundaryData:
        b = self.boundary
        if b.kind == "constant":
            return BoundaryData("constant", value=tuple(b.value))
        return BoundaryData("stereographic_degree1", lam=b.lam)

    def to_ini(self) -> str:
        out = []
        for name in SECTIONS:
            sec = getattr(self, name)
            out.append(f"[{name}]")
            for f in fields(sec):
                v = getattr(sec, f.name)
                if v is None:
                    continue
                out.append(f"{f.name} = {_fmt(v)}")
            out.append("")
        return "\n".join(out)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _line_numbers(text: str) -> dict[tuple[str, str | None], int]:
    """Line of every section header and key (1-based)."""
    where: dict[tuple[str, str | None], int] = {}
    section = None
    for k, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), k)
            continue
        m = re.match(r"([^=:]+)[=:]", line)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), k)
    return where


def _convert(sec: str, key: str, typ, raw: str, line: int | None):
    t = str(typ)
    try:
        if "tuple" in t:
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if t.startswith("int") or typ is int:
            return int(raw)
        if "float" in t:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{sec}] {key}: cannot parse {raw!r}", line, key) from None


def parse_config(text: str) -> ScenarioSpec:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", getattr(exc, "lineno", None)) from None
    lines = _line_numbers(text)
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", lines.get((sec, None)))
    built = {}
    for name, cls in SECTIONS.items():
        known = {f.name: f for f in fields(cls)}
        vals = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                line = lines.get((name, key))
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{name}]", line, key)
                vals[key] = _convert(name, key, known[key].type, raw, line)
        for req in REQUIRED.get(name, ()):
            if req not in vals:
                raise ConfigError(f"missing required key {name}.{req}", lines.get((name, None)),
                                  f"{name}.{req}")
        built[name] = cls(**vals)
    spec = ScenarioSpec(**built)
    _validate(spec, lines)
    return spec


def _validate(spec: ScenarioSpec, lines) -> None:
    def fail(sec, key, msg):
        raise ConfigError(f"[{sec}] {key}: {msg}", lines.get((sec, key)), f"{sec}.{key}")

    d = spec.domain
    if d.kind not in DEFAULT_EXTENT:
        fail("domain", "kind", f"unsupported kind {d.kind!r}")
    if d.n < 8:
        fail("domain", "n", "need n >= 8")
    if d.chart not in ("flat", "stereographic"):
        fail("domain", "chart", f"unsupported chart {d.chart!r}")
    if spec.target.n_comp < 2:
        fail("target", "n_comp", "need n_comp >= 2")
    b = spec.boundary
    if b.kind is None:
        b.kind = "constant" if d.kind == "torus" else "stereographic_degree1"
    if b.kind not in ("constant", "stereographic_degree1"):
        fail("boundary", "kind", f"unsupported kind {b.kind!r}")
    if b.kind == "stereographic_degree1" and spec.target.n_comp < 3:
        fail("boundary", "kind", "degree-1 data needs n_comp >= 3")
    if b.kind == "constant" and len(b.value) > spec.target.n_comp:
        fail("boundary", "value", "more entries than target components")
    e = spec.epsilon
    if not e.start > 0:
        fail("epsilon", "start", "must be positive")
    if not 0 < e.factor < 1 and not (e.factor == 1 and e.count <= 2):
        fail("epsilon", "factor", "must lie in (0, 1)")
    if e.count < 1:
        fail("epsilon", "count", "schedule needs at least one entry")
    s = spec.solver
    for key in ("gd_tol", "newton_tol", "cg_rtol"):
        if not getattr(s, key) > 0:
            fail("solver", key, "tolerances must be positive")
    if s.max_iter < 0 or s.newton_max_steps < 0:
        fail("solver", "max_iter", "iteration caps must be nonnegative")
    if s.perturbation is None:
        # constant data: the constant map is already the minimizer; degree-1 data:
        # the planar harmonic extension is a saddle that needs a symmetry-breaking kick
        s.perturbation = 0.0 if b.kind == "constant" else 1e-2
    if s.perturbation < 0:
        fail("solver", "perturbation", "must be nonnegative")
    n = spec.neck
    if not 0 < n.eta:
        fail("neck", "eta", "must be positive")
    if not 0 < n.delta0:
        fail("neck", "delta0", "must be positive")
    sp_ = spec.spectral
    if sp_.num_eigs < 1:
        fail("spectral", "num_eigs", "need at least one eigenpair")
    if not 0 < sp_.beta < 1:
        fail("spectral", "beta", "must lie in (0, 1)")


def load_config(path) -> ScenarioSpec:
    with open(path) as fh:
        return parse_config(fh.read())
