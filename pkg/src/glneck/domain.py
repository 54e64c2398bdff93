"""Uniform 2-D grids with a conformal metric, finite-difference operators,
dyadic annulus bookkeeping and polar resampling.

Arrays are stored row-major with shape ``(n_y, n_x, ...)``: axis 0 is ``y``
and axis 1 is ``x``.  The metric is ``h = exp(2*lambda) * delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

KINDS = ("torus", "disk", "plane_patch")
CHARTS = ("flat", "stereographic")


@dataclass(frozen=True)
class GridSpec:
    kind: str
    n_x: int
    n_y: int | None = None
    extent: float | tuple[float, float] = 1.0
    chart: str = "flat"
    center: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True, eq=False)
class DomainGrid:
    kind: str
    n_x: int
    n_y: int
    spacing: float
    bc: str
    physical_extent: tuple[float, float]
    chart: str
    origin: tuple[float, float]
    center: tuple[float, float]
    lambda_field: np.ndarray = field(repr=False)
    inside: np.ndarray = field(repr=False)
    free: np.ndarray = field(repr=False)
    radius: float | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_y, self.n_x)

    @property
    def periodic(self) -> bool:
        return self.bc == "periodic"

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin[0] + self.spacing * np.arange(self.n_x)
        y = self.origin[1] + self.spacing * np.arange(self.n_y)
        return np.meshgrid(x, y)

    def volume(self) -> np.ndarray:
        """Per-node volume element exp(2 lambda) h^2 (zero outside the domain)."""
        vol = np.exp(2.0 * self.lambda_field) * self.spacing**2
        return np.where(self.inside, vol, 0.0)

    def node_index(self, point: Iterable[float]) -> tuple[int, int]:
        px, py = point
        i = int(round((px - self.origin[0]) / self.spacing))
        j = int(round((py - self.origin[1]) / self.spacing))
        if not (0 <= i < self.n_x and 0 <= j < self.n_y):
            raise ValueError(f"point {tuple(point)} lies off the grid")
        return j, i

    def node_coords(self, j: int, i: int) -> tuple[float, float]:
        return (self.origin[0] + i * self.spacing, self.origin[1] + j * self.spacing)

    def inradius(self, center: Iterable[float]) -> float:
        cx, cy = center
        if self.kind == "torus":
            return 0.5 * min(self.physical_extent)
        if self.kind == "disk":
            return self.radius - math.hypot(cx - self.center[0], cy - self.center[1])
        x0, y0 = self.origin
        x1 = x0 + (self.n_x - 1) * self.spacing
        y1 = y0 + (self.n_y - 1) * self.spacing
        return min(cx - x0, x1 - cx, cy - y0, y1 - cy)


@dataclass(eq=False)
class Field:
    grid: DomainGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[:2] != self.grid.shape:
            raise ValueError(
                f"field shape {v.shape} does not match grid shape {self.grid.shape} x n_comp"
            )
        if v.shape[2] < 2:
            raise ValueError("a field needs n_comp >= 2")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        self.values = v

    @property
    def n_comp(self) -> int:
        return self.values.shape[2]

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(self.grid, values)

    def modulus(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values**2, axis=-1))


@dataclass(eq=False)
class AnnulusSystem:
    center: tuple[float, float]
    eta: float
    delta: float
    delta0: float
    s1: int
    s2: int
    j_lo: int
    j_hi: int
    labels: np.ndarray = field(repr=False)
    radius: np.ndarray = field(repr=False)

    @property
    def inner(self) -> float:
        return self.delta / self.eta

    @property
    def outer(self) -> float:
        return self.eta

    @property
    def j_range(self) -> list[int]:
        return list(range(self.s1, self.s2 + 1))

    @property
    def neck_mask(self) -> np.ndarray:
        return self.labels >= 0

    def annulus_mask(self, j: int) -> np.ndarray:
        return self.labels == j


def build_grid(spec: GridSpec | Mapping) -> DomainGrid:
    if isinstance(spec, Mapping):
        spec = GridSpec(**spec)
    kind = spec.kind
    if kind not in KINDS:
        raise ValueError(f"unsupported grid kind {kind!r}")
    if spec.chart not in CHARTS:
        raise ValueError(f"unsupported chart {spec.chart!r}")
    n_x = int(spec.n_x)
    n_y = int(spec.n_y if spec.n_y is not None else spec.n_x)
    if n_x < 8 or n_y < 8:
        raise ValueError("grids need at least 8 nodes per direction")
    ext = spec.extent
    ext_x, ext_y = (float(ext), float(ext)) if np.isscalar(ext) else map(float, ext)
    if ext_x <= 0 or ext_y <= 0:
        raise ValueError("extent must be positive")
    cx, cy = map(float, spec.center)
    radius = None

    if kind == "torus":
        h = ext_x / n_x
        if not math.isclose(h, ext_y / n_y, rel_tol=1e-12):
            raise ValueError("torus needs equal spacing in x and y")
        origin = (cx, cy)
        bc = "periodic"
        if spec.chart != "flat":
            raise ValueError("the torus carries the flat metric only")
    else:
        h = ext_x / (n_x - 1)
        if not math.isclose(h, ext_y / (n_y - 1), rel_tol=1e-12):
            raise ValueError("grid needs equal spacing in x and y")
        origin = (cx - 0.5 * ext_x, cy - 0.5 * ext_y)
        bc = "dirichlet"
        if kind == "disk":
            if n_x != n_y:
                raise ValueError("disk grids are square")
            radius = 0.5 * ext_x
            if spec.chart != "flat":
                raise ValueError("the disk carries the flat metric only")

    x = origin[0] + h * np.arange(n_x)
    y = origin[1] + h * np.arange(n_y)
    X, Y = np.meshgrid(x, y)
    if spec.chart == "stereographic":
        lam = np.log(2.0 / (1.0 + X**2 + Y**2))
    else:
        lam = np.zeros((n_y, n_x))

    if kind == "torus":
        inside = np.ones((n_y, n_x), bool)
        free = inside.copy()
    elif kind == "disk":
        inside = np.hypot(X - cx, Y - cy) < radius * (1.0 - 1e-12)
        free = inside.copy()
    else:
        inside = np.ones((n_y, n_x), bool)
        free = np.zeros((n_y, n_x), bool)
        free[1:-1, 1:-1] = True

    return DomainGrid(
        kind=kind,
        n_x=n_x,
        n_y=n_y,
        spacing=h,
        bc=bc,
        physical_extent=(ext_x, ext_y),
        chart=spec.chart,
        origin=origin,
        center=(cx, cy),
        lambda_field=lam,
        inside=inside,
        free=free,
        radius=radius,
    )


def plane_grid(half_width: float, spacing: float, center=(0.0, 0.0), chart="flat") -> DomainGrid:
    """Square plane patch of the given half width whose nodes include ``center``."""
    m = int(math.ceil(half_width / spacing - 1e-9))
    n = 2 * m + 1
    return build_grid(
        GridSpec("plane_patch", n_x=n, extent=(n - 1) * spacing, chart=chart, center=center)
    )


# ---------------------------------------------------------------------------
# stencils

def _as_array(grid: DomainGrid, f) -> tuple[np.ndarray, bool]:
    if isinstance(f, Field):
        if f.grid is not grid and f.grid.shape != grid.shape:
            raise ValueError("field does not live on this grid")
        return f.values, True
    a = np.asarray(f, dtype=np.float64)
    if a.shape[:2] != grid.shape:
        raise ValueError(f"array shape {a.shape} does not match grid {grid.shape}")
    return a, False


def lap5(grid: DomainGrid, a: np.ndarray) -> np.ndarray:
    """Unnormalised 5-point stencil sum (neighbours minus 4 times centre).

    On Dirichlet grids the outer ring of the array has no complete stencil and
    returns 0.
    """
    if grid.periodic:
        return (
            np.roll(a, 1, 0) + np.roll(a, -1, 0) + np.roll(a, 1, 1) + np.roll(a, -1, 1) - 4.0 * a
        )
    out = np.zeros_like(a)
    out[1:-1, 1:-1] = (
        a[:-2, 1:-1] + a[2:, 1:-1] + a[1:-1, :-2] + a[1:-1, 2:] - 4.0 * a[1:-1, 1:-1]
    )
    return out


def _dcentered(grid: DomainGrid, a: np.ndarray, axis: int) -> np.ndarray:
    h = grid.spacing
    if grid.periodic:
        return (np.roll(a, -1, axis) - np.roll(a, 1, axis)) / (2.0 * h)
    return np.gradient(a, h, axis=axis, edge_order=2)


def dx(grid: DomainGrid, a: np.ndarray) -> np.ndarray:
    return _dcentered(grid, a, 1)


def dy(grid: DomainGrid, a: np.ndarray) -> np.ndarray:
    return _dcentered(grid, a, 0)


def laplace_beltrami(grid: DomainGrid, f):
    """Second-order 5-point Delta_h f = exp(-2 lambda) Delta f."""
    a, is_field = _as_array(grid, f)
    lam = grid.lambda_field
    w = np.exp(-2.0 * lam)
    if a.ndim > 2:
        w = w.reshape(w.shape + (1,) * (a.ndim - 2))
    out = w * lap5(grid, a) / grid.spacing**2
    return Field(grid, out) if is_field else out


def gradients(grid: DomainGrid, f):
    """Centered gradient and its pi/2 rotation ``(-d_y f, d_x f)``.

    Both are returned with a trailing axis of length 2 holding the x and y
    components.
    """
    a, _ = _as_array(grid, f)
    gx = dx(grid, a)
    gy = dy(grid, a)
    grad = np.stack([gx, gy], axis=-1)
    perp = np.stack([-gy, gx], axis=-1)
    return grad, perp


def divergence(grid: DomainGrid, v: np.ndarray) -> np.ndarray:
    """Centered divergence of a vector field whose last axis holds (x, y)."""
    return dx(grid, v[..., 0]) + dy(grid, v[..., 1])


def curl(grid: DomainGrid, v: np.ndarray) -> np.ndarray:
    """Centered scalar curl d_x v_y - d_y v_x."""
    return dx(grid, v[..., 1]) - dy(grid, v[..., 0])


def forward_gradients(grid: DomainGrid, f) -> np.ndarray:
    """Forward differences; the discrete adjoint partner of :func:`lap5`.

    Dirichlet grids get zero in the last column/row where no forward
    neighbour exists.
    """
    a, _ = _as_array(grid, f)
    h = grid.spacing
    if grid.periodic:
        gx = (np.roll(a, -1, 1) - a) / h
        gy = (np.roll(a, -1, 0) - a) / h
    else:
        gx = np.zeros_like(a)
        gy = np.zeros_like(a)
        gx[:, :-1] = (a[:, 1:] - a[:, :-1]) / h
        gy[:-1] = (a[1:] - a[:-1]) / h
    return np.stack([gx, gy], axis=-1)


# ---------------------------------------------------------------------------
# annuli

def dyadic_index(r: np.ndarray) -> np.ndarray:
    """Index j with 2^{-j-1} <= r < 2^{-j}."""
    with np.errstate(divide="ignore"):
        return (np.ceil(-np.log2(r)) - 1).astype(int)


def annulus_system(grid: DomainGrid, center, eta: float, delta: float, delta0: float = 1e-2
                   ) -> AnnulusSystem:
    if eta <= 0 or delta <= 0:
        raise ValueError("eta and delta must be positive")
    inner = delta / eta
    if inner >= eta:
        raise ValueError("degenerate neck")
    bound = grid.inradius(center)
    if eta >= bound:
        raise ValueError(f"eta={eta} must stay below the domain inradius {bound:.6g} from the center")
    s1 = int(math.ceil(math.log2(2.0 / eta) - 1e-12))
    s2 = int(math.floor(math.log2(eta / (2.0 * delta)) + 1e-12))
    X, Y = grid.coords()
    r = np.hypot(X - center[0], Y - center[1])
    neck = (r >= inner) & (r < eta) & grid.inside
    labels = np.full(grid.shape, -1, dtype=int)
    labels[neck] = dyadic_index(r[neck])
    j_lo = int(dyadic_index(np.array([eta * (1 - 1e-15)]))[0])
    j_hi = int(dyadic_index(np.array([inner]))[0])
    return AnnulusSystem(
        center=(float(center[0]), float(center[1])),
        eta=float(eta),
        delta=float(delta),
        delta0=float(delta0),
        s1=s1,
        s2=s2,
        j_lo=j_lo,
        j_hi=j_hi,
        labels=labels,
        radius=r,
    )


# ---------------------------------------------------------------------------
# polar sampling

def _check_circle(grid: DomainGrid, center, rmax: float) -> None:
    if grid.periodic:
        return
    if rmax >= grid.inradius(center) + 1e-12:
        raise ValueError(f"circle of radius {rmax:.6g} exits the domain")


def polar_resample(grid: DomainGrid, f, center, radii, n_theta: int) -> np.ndarray:
    """Bilinear samples on ``n_theta`` equispaced angles per circle.

    Returns shape ``(len(radii), n_theta, ...)`` with the trailing component
    axes of ``f``.
    """
    a, _ = _as_array(grid, f)
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    _check_circle(grid, center, float(radii.max()))
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    px = center[0] + radii[:, None] * np.cos(theta)[None, :]
    py = center[1] + radii[:, None] * np.sin(theta)[None, :]
    ci = (px - grid.origin[0]) / grid.spacing
    cj = (py - grid.origin[1]) / grid.spacing
    mode = "grid-wrap" if grid.periodic else "nearest"
    flat = a.reshape(grid.shape + (-1,))
    out = np.empty(radii.shape + (n_theta, flat.shape[-1]))
    for c in range(flat.shape[-1]):
        out[..., c] = ndimage.map_coordinates(flat[..., c], [cj, ci], order=1, mode=mode)
    return out.reshape(radii.shape + (n_theta,) + a.shape[2:])


# ---------------------------------------------------------------------------
# GLF1 snapshots

def write_glf1(path, f: Field) -> None:
    g = f.grid
    header = f"GLF1 {g.kind} {g.n_x} {g.n_y} {f.n_comp} {float(g.spacing)!r} {g.bc}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes(order="C"))


def read_glf1_header(path) -> dict:
    with open(path, "rb") as fh:
        line = fh.readline().decode("ascii")
    parts = line.split()
    if len(parts) != 7 or parts[0] != "GLF1":
        raise ValueError(f"{path}: not a GLF1 file")
    return {
        "kind": parts[1],
        "n_x": int(parts[2]),
        "n_y": int(parts[3]),
        "n_comp": int(parts[4]),
        "spacing": float(parts[5]),
        "bc": parts[6],
    }


def read_glf1(path, grid: DomainGrid | None = None) -> Field:
    """Read a snapshot; without ``grid`` a flat grid centred at 0 is rebuilt."""
    hdr = read_glf1_header(path)
    with open(path, "rb") as fh:
        fh.readline()
        raw = fh.read()
    n = hdr["n_x"] * hdr["n_y"] * hdr["n_comp"]
    if len(raw) != 8 * n:
        raise ValueError(f"{path}: expected {8 * n} payload bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8").reshape(hdr["n_y"], hdr["n_x"], hdr["n_comp"])
    if grid is None:
        h = hdr["spacing"]
        if hdr["kind"] == "torus":
            ext = (h * hdr["n_x"], h * hdr["n_y"])
        else:
            ext = (h * (hdr["n_x"] - 1), h * (hdr["n_y"] - 1))
        grid = build_grid(GridSpec(hdr["kind"], hdr["n_x"], hdr["n_y"], ext if hdr["kind"] != "disk" else ext[0]))
    elif (grid.n_x, grid.n_y, grid.kind, grid.bc) != (hdr["n_x"], hdr["n_y"], hdr["kind"], hdr["bc"]):
        raise ValueError(f"{path}: header does not match the supplied grid")
    return Field(grid, vals.astype(np.float64))
