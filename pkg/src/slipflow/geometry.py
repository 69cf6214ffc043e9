"""Structured 2D grids, boundary frames, quadrature and difference operators.

Two discrete domains are supported:

* rectangle  -- uniform tensor grid on [0, width] x [0, height],
* annulus    -- uniform polar grid (r, theta), periodic in theta.

Conventions used throughout the package:

* Scalar fields are arrays of shape ``(n1, n2)``; vector fields are
  ``(n1, n2, 2)`` and always hold *Cartesian* components, also on the
  polar grid.  Derivative operators on the annulus apply the polar chain
  rule internally, so vector calculus never needs curvilinear correction
  terms.
* Boundary frames: ``normal`` is the unit outward normal, ``tangent`` is
  the normal rotated by +90 degrees (``tau = (-n_y, n_x)``), so the domain
  lies to the left when walking along ``tau``.  ``curvature`` is positive
  where the domain is convex as seen from inside (outer circle of an
  annulus: +1/r_out, inner circle: -1/r_in, straight edges: 0).
* Quadrature weights are Gregory-corrected tensor-product weights (they
  reduce to the trapezoid rule on very coarse grids); they are positive
  and sum exactly to the domain area.
* Rectangle corner nodes form their own boundary segment.  Their frame is
  the normalized diagonal; solvers pin both velocity components to zero
  there since the impermeability condition holds on both adjacent edges.

Grids are immutable after construction and may be shared freely between
concurrent solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError

# Operational minimum for the second-order one-sided stencils.  Production
# configs are held to a stricter floor (>= 8 per direction) at parse time;
# tiny grids remain constructible for dense reference solves in tests.
_MIN_NODES = 3


def _gregory_weights(n: int, h: float) -> np.ndarray:
    """1D quadrature weights on a uniform grid of n nodes with spacing h.

    Gregory end correction (two terms) when enough nodes are available,
    plain trapezoid otherwise.  Exact for constants and, by symmetry, for
    linear integrands; smooth integrands see better than second order.
    """
    w = np.full(n, h, dtype=float)
    if n >= 7:
        ends = h * np.array([3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0])
        w[:3] = ends
        w[-3:] = ends[::-1]
    else:
        w[0] = w[-1] = 0.5 * h
    return w


def _d1_matrix(n: int, h: float, periodic: bool = False) -> sp.csr_matrix:
    """Second-order first-derivative matrix on a uniform 1D grid."""
    if periodic:
        rows, cols, vals = [], [], []
        for i in range(n):
            rows += [i, i]
            cols += [(i + 1) % n, (i - 1) % n]
            vals += [0.5 / h, -0.5 / h]
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    d = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        d[i, i - 1] = -0.5 / h
        d[i, i + 1] = 0.5 / h
    # one-sided, second order
    d[0, 0], d[0, 1], d[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    d[n - 1, n - 1], d[n - 1, n - 2], d[n - 1, n - 3] = 1.5 / h, -2.0 / h, 0.5 / h
    return d.tocsr()


@dataclass(frozen=True)
class DomainSpec:
    """Geometry request: rectangle (width x height) or annulus (r_inner, r_outer).

    ``shape`` gives the node counts per direction: (nx, ny) for the
    rectangle, (nr, ntheta) for the annulus.
    """

    kind: str
    shape: tuple[int, int]
    width: float = 1.0
    height: float = 1.0
    r_inner: float = 0.5
    r_outer: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rectangle", "annulus"):
            raise ConfigurationError(f"unknown domain kind {self.kind!r}")
        n1, n2 = self.shape
        if n1 < _MIN_NODES or n2 < _MIN_NODES:
            raise ConfigurationError(
                f"resolution {self.shape} too coarse; need at least "
                f"{_MIN_NODES} nodes per direction"
            )
        if self.kind == "rectangle":
            if self.width <= 0 or self.height <= 0:
                raise ConfigurationError("rectangle needs width > 0 and height > 0")
        else:
            if not 0 < self.r_inner < self.r_outer:
                raise ConfigurationError("annulus needs 0 < r_inner < r_outer")
            if n2 % 2 == 0:
                # with an even periodic node count the theta checkerboard is an
                # exact null mode of the composed difference operators
                raise ConfigurationError(
                    "annulus theta resolution must be odd (got "
                    f"{n2}); the config layer rounds up automatically"
                )


@dataclass(frozen=True)
class Grid:
    """Immutable discrete domain with frames, quadrature and operators.

    Index convention: ``field[i, j]`` refers to node ``(c1[i], c2[j])``
    where ``(c1, c2)`` are (x, y) on the rectangle and (r, theta) on the
    annulus.  Flattening is row-major (i outer, j inner).
    """

    spec: DomainSpec
    shape: tuple[int, int]
    x: np.ndarray
    y: np.ndarray
    c1: np.ndarray  # first coordinate axis (x or r)
    c2: np.ndarray  # second coordinate axis (y or theta)
    spacing: tuple[float, float]
    weights: np.ndarray
    area: float
    interior_mask: np.ndarray
    boundary_mask: np.ndarray
    segments: dict
    normal: np.ndarray
    tangent: np.ndarray
    curvature: np.ndarray
    boundary_weights: np.ndarray
    dx_op: sp.csr_matrix = field(repr=False)
    dy_op: sp.csr_matrix = field(repr=False)

    # -- basic properties -------------------------------------------------

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def n_nodes(self) -> int:
        return self.shape[0] * self.shape[1]

    def check_scalar(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != self.shape:
            raise ValueError(f"scalar field shape {f.shape} != grid shape {self.shape}")
        return f

    def check_vector(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (*self.shape, 2):
            raise ValueError(f"vector field shape {v.shape} != {((*self.shape, 2))}")
        return v

    # -- discrete calculus -------------------------------------------------

    def _apply(self, op: sp.csr_matrix, f: np.ndarray) -> np.ndarray:
        return (op @ f.ravel()).reshape(self.shape)

    def grad(self, f: np.ndarray) -> np.ndarray:
        """Gradient of a scalar field, Cartesian components, shape (n1,n2,2)."""
        f = self.check_scalar(f)
        return np.stack([self._apply(self.dx_op, f), self._apply(self.dy_op, f)], axis=-1)

    def div(self, v: np.ndarray) -> np.ndarray:
        v = self.check_vector(v)
        return self._apply(self.dx_op, v[..., 0]) + self._apply(self.dy_op, v[..., 1])

    def curl(self, v: np.ndarray) -> np.ndarray:
        """Scalar vorticity d(v2)/dx - d(v1)/dy."""
        v = self.check_vector(v)
        return self._apply(self.dx_op, v[..., 1]) - self._apply(self.dy_op, v[..., 0])

    def grad_vector(self, v: np.ndarray) -> np.ndarray:
        """Full velocity gradient, shape (n1, n2, 2, 2), entry [a, b] = d v_a / d x_b."""
        v = self.check_vector(v)
        out = np.empty((*self.shape, 2, 2))
        for a in range(2):
            out[..., a, 0] = self._apply(self.dx_op, v[..., a])
            out[..., a, 1] = self._apply(self.dy_op, v[..., a])
        return out

    def normal_component(self, v: np.ndarray) -> np.ndarray:
        """v . n at boundary nodes (zero elsewhere)."""
        v = self.check_vector(v)
        return np.sum(v * self.normal, axis=-1)

    def tangent_component(self, v: np.ndarray) -> np.ndarray:
        v = self.check_vector(v)
        return np.sum(v * self.tangent, axis=-1)


# -- construction ----------------------------------------------------------


def build_grid(spec: DomainSpec) -> Grid:
    """Build the discrete domain for ``spec`` (validates its invariants)."""
    if spec.kind == "rectangle":
        return _build_rectangle(spec)
    return _build_annulus(spec)


def _build_rectangle(spec: DomainSpec) -> Grid:
    nx, ny = spec.shape
    xs = np.linspace(0.0, spec.width, nx)
    ys = np.linspace(0.0, spec.height, ny)
    dx = spec.width / (nx - 1)
    dy = spec.height / (ny - 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")

    wx = _gregory_weights(nx, dx)
    wy = _gregory_weights(ny, dy)
    weights = np.outer(wx, wy)

    interior = np.zeros((nx, ny), dtype=bool)
    interior[1:-1, 1:-1] = True
    boundary = ~interior

    seg = {}
    for name in ("left", "right", "bottom", "top", "corners"):
        seg[name] = np.zeros((nx, ny), dtype=bool)
    seg["left"][0, 1:-1] = True
    seg["right"][-1, 1:-1] = True
    seg["bottom"][1:-1, 0] = True
    seg["top"][1:-1, -1] = True
    for ci, cj in ((0, 0), (0, ny - 1), (nx - 1, 0), (nx - 1, ny - 1)):
        seg["corners"][ci, cj] = True

    normal = np.zeros((nx, ny, 2))
    normal[seg["left"]] = (-1.0, 0.0)
    normal[seg["right"]] = (1.0, 0.0)
    normal[seg["bottom"]] = (0.0, -1.0)
    normal[seg["top"]] = (0.0, 1.0)
    s = 1.0 / np.sqrt(2.0)
    normal[0, 0] = (-s, -s)
    normal[0, -1] = (-s, s)
    normal[-1, 0] = (s, -s)
    normal[-1, -1] = (s, s)

    tangent = np.zeros((nx, ny, 2))
    tangent[..., 0] = -normal[..., 1]
    tangent[..., 1] = normal[..., 0]

    curvature = np.zeros((nx, ny))

    # arclength weights per edge; corner nodes accumulate from both edges
    bweights = np.zeros((nx, ny))
    wex = _gregory_weights(nx, dx)
    wey = _gregory_weights(ny, dy)
    bweights[:, 0] += wex
    bweights[:, -1] += wex
    bweights[0, :] += wey
    bweights[-1, :] += wey

    ix = sp.identity(nx, format="csr")
    iy = sp.identity(ny, format="csr")
    dx_op = sp.kron(_d1_matrix(nx, dx), iy, format="csr")
    dy_op = sp.kron(ix, _d1_matrix(ny, dy), format="csr")

    return Grid(
        spec=spec,
        shape=(nx, ny),
        x=X,
        y=Y,
        c1=xs,
        c2=ys,
        spacing=(dx, dy),
        weights=weights,
        area=spec.width * spec.height,
        interior_mask=interior,
        boundary_mask=boundary,
        segments=seg,
        normal=normal,
        tangent=tangent,
        curvature=curvature,
        boundary_weights=bweights,
        dx_op=dx_op,
        dy_op=dy_op,
    )


def _build_annulus(spec: DomainSpec) -> Grid:
    nr, nt = spec.shape
    rs = np.linspace(spec.r_inner, spec.r_outer, nr)
    dr = (spec.r_outer - spec.r_inner) / (nr - 1)
    dt = 2.0 * np.pi / nt
    ts = np.arange(nt) * dt
    R, T = np.meshgrid(rs, ts, indexing="ij")
    X = R * np.cos(T)
    Y = R * np.sin(T)

    wr = _gregory_weights(nr, dr)
    weights = np.outer(rs * wr, np.full(nt, dt))
    area = np.pi * (spec.r_outer**2 - spec.r_inner**2)

    interior = np.ones((nr, nt), dtype=bool)
    interior[0, :] = False
    interior[-1, :] = False
    boundary = ~interior

    seg = {
        "inner": np.zeros((nr, nt), dtype=bool),
        "outer": np.zeros((nr, nt), dtype=bool),
    }
    seg["inner"][0, :] = True
    seg["outer"][-1, :] = True

    e_r = np.stack([np.cos(T), np.sin(T)], axis=-1)
    normal = np.zeros((nr, nt, 2))
    normal[0] = -e_r[0]
    normal[-1] = e_r[-1]
    tangent = np.zeros((nr, nt, 2))
    tangent[..., 0] = -normal[..., 1]
    tangent[..., 1] = normal[..., 0]

    curvature = np.zeros((nr, nt))
    curvature[0, :] = -1.0 / spec.r_inner
    curvature[-1, :] = 1.0 / spec.r_outer

    bweights = np.zeros((nr, nt))
    bweights[0, :] = spec.r_inner * dt
    bweights[-1, :] = spec.r_outer * dt

    # Cartesian first derivatives via the polar chain rule:
    #   d/dx = cos(t) d/dr - sin(t)/r d/dt,  d/dy = sin(t) d/dr + cos(t)/r d/dt
    dr_op = sp.kron(_d1_matrix(nr, dr), sp.identity(nt, format="csr"), format="csr")
    dt_op = sp.kron(sp.identity(nr, format="csr"), _d1_matrix(nt, dt, periodic=True), format="csr")
    cos_d = sp.diags(np.cos(T).ravel())
    sin_d = sp.diags(np.sin(T).ravel())
    inv_r = sp.diags(1.0 / R.ravel())
    dx_op = (cos_d @ dr_op - sin_d @ inv_r @ dt_op).tocsr()
    dy_op = (sin_d @ dr_op + cos_d @ inv_r @ dt_op).tocsr()

    return Grid(
        spec=spec,
        shape=(nr, nt),
        x=X,
        y=Y,
        c1=rs,
        c2=ts,
        spacing=(dr, dt),
        weights=weights,
        area=area,
        interior_mask=interior,
        boundary_mask=boundary,
        segments=seg,
        normal=normal,
        tangent=tangent,
        curvature=curvature,
        boundary_weights=bweights,
        dx_op=dx_op,
        dy_op=dy_op,
    )


# -- quadrature and norms ----------------------------------------------------


def integrate(grid: Grid, f: np.ndarray) -> float:
    """Quadrature-weighted integral of a scalar field over the domain."""
    f = grid.check_scalar(f)
    return float(np.sum(grid.weights * f))


def boundary_integral(grid: Grid, f: np.ndarray) -> float:
    """Arclength-weighted integral of a scalar field over the boundary."""
    f = grid.check_scalar(f)
    return float(np.sum(grid.boundary_weights * f))


def norm(grid: Grid, f: np.ndarray, kind: str = "L2") -> float:
    """Discrete norm of a scalar or vector field.

    ``W12`` is sqrt(L2^2 + |grad .|_2^2), gradients by the grid's central /
    one-sided stencils; for vector fields the component contributions add.
    """
    f = np.asarray(f, dtype=float)
    if f.shape == grid.shape:
        comps = [f]
    elif f.shape == (*grid.shape, 2):
        comps = [f[..., 0], f[..., 1]]
    else:
        raise ValueError(f"field shape {f.shape} incompatible with grid {grid.shape}")

    if kind == "Linf":
        return float(max(np.max(np.abs(c)) for c in comps))
    if kind == "L1":
        return float(sum(np.sum(grid.weights * np.abs(c)) for c in comps))
    if kind == "L2":
        return float(np.sqrt(sum(np.sum(grid.weights * c**2) for c in comps)))
    if kind == "W12":
        acc = 0.0
        for c in comps:
            g = grid.grad(c)
            acc += np.sum(grid.weights * c**2)
            acc += np.sum(grid.weights * (g[..., 0] ** 2 + g[..., 1] ** 2))
        return float(np.sqrt(acc))
    raise ValueError(f"unknown norm kind {kind!r}")
