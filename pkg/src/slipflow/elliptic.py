"""Linear elliptic kernels: Neumann Poisson, Dirichlet Poisson, Lame system,
and the divergence-lifting operator built on the Neumann solve.

Discretization choices
----------------------
* The Neumann solver uses the *composed* operator ``-div_h(grad_h .)``
  built from the grid's first-derivative matrices, with one-sided
  normal-derivative rows at boundary nodes and a Lagrange-bordered mean
  constraint.  Because ``divergence_lift`` differentiates the potential
  with the same stencils, ``div_h(psi) = f - mean(f)`` holds at interior
  nodes to solver precision and ``psi . n = 0`` holds exactly at boundary
  nodes (it is the boundary equation itself).
* The Lame solver is assembled from the symmetric weak form
  ``2 mu (D(w), D(phi)) + nu (div w, div phi) + friction <w.tau, phi.tau>``
  on bilinear elements, with the impermeability constraint ``w.n = 0``
  eliminated by rotating boundary degrees of freedom into the tangent.
  The slip/Robin condition is the form's natural boundary condition, and
  the discrete energy identity holds to linear-solver precision.
* The Dirichlet solver is a compact 5-point (rectangle) or conservative
  polar (annulus) Laplacian with identity rows on the boundary.

Solvers factorize once at construction and may be reused for any number
of right-hand sides on the same grid and parameters.  A single solver
instance should serve one solve sequence at a time; distinct instances
are independent.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, NumericsError
from .geometry import Grid, norm

_GAUSS = 1.0 / np.sqrt(3.0)


def _as_csc(m):
    return m.tocsc()


def _compact_laplacian(grid: Grid) -> sp.csr_matrix:
    """Compact (5-point / conservative polar) Laplacian, interior rows only
    valid; callers overwrite boundary rows with their closure."""
    n1, n2 = grid.shape
    if grid.kind == "rectangle":
        dx, dy = grid.spacing
        lxx = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n1, n1)) / dx**2
        lyy = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n2, n2)) / dy**2
        return (sp.kron(lxx, sp.identity(n2)) + sp.kron(sp.identity(n1), lyy)).tocsr()
    dr, dt = grid.spacing
    rs = grid.c1
    rows, cols, vals = [], [], []
    for i in range(1, n1 - 1):
        rp = rs[i] + 0.5 * dr
        rm = rs[i] - 0.5 * dr
        cr = 1.0 / (rs[i] * dr**2)
        ct = 1.0 / (rs[i] ** 2 * dt**2)
        for j in range(n2):
            nid = i * n2 + j
            rows += [nid] * 5
            cols += [
                (i + 1) * n2 + j,
                (i - 1) * n2 + j,
                i * n2 + (j + 1) % n2,
                i * n2 + (j - 1) % n2,
                nid,
            ]
            vals += [cr * rp, cr * rm, ct, ct, -cr * (rp + rm) - 2.0 * ct]
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))


def _fv_neumann_rows(grid: Grid) -> sp.csr_matrix:
    """Finite-volume closure of -lap at boundary nodes with zero normal flux."""
    n1, n2 = grid.shape
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    if grid.kind == "rectangle":
        dx, dy = grid.spacing
        for i in (0, n1 - 1):
            for j in range(n2):
                nid = i * n2 + j
                o = 1 if i == 0 else -1  # inward neighbour in x
                add(nid, nid, 2.0 / dx**2)
                add(nid, (i + o) * n2 + j, -2.0 / dx**2)
                if 0 < j < n2 - 1:
                    add(nid, nid, 2.0 / dy**2)
                    add(nid, i * n2 + j - 1, -1.0 / dy**2)
                    add(nid, i * n2 + j + 1, -1.0 / dy**2)
                else:
                    oj = 1 if j == 0 else -1
                    add(nid, nid, 2.0 / dy**2)
                    add(nid, i * n2 + j + oj, -2.0 / dy**2)
        for j in (0, n2 - 1):
            oj = 1 if j == 0 else -1
            for i in range(1, n1 - 1):
                nid = i * n2 + j
                add(nid, nid, 2.0 / dy**2)
                add(nid, i * n2 + j + oj, -2.0 / dy**2)
                add(nid, nid, 2.0 / dx**2)
                add(nid, (i - 1) * n2 + j, -1.0 / dx**2)
                add(nid, (i + 1) * n2 + j, -1.0 / dx**2)
        return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))

    dr, dt = grid.spacing
    rs = grid.c1
    for i, o in ((0, 1), (n1 - 1, -1)):
        r_face = rs[i] + o * 0.5 * dr
        cr = r_face / (rs[i] * 0.5 * dr**2)
        ct = 1.0 / (rs[i] ** 2 * dt**2)
        for j in range(n2):
            nid = i * n2 + j
            add(nid, nid, cr + 2.0 * ct)
            add(nid, (i + o) * n2 + j, -cr)
            add(nid, i * n2 + (j + 1) % n2, -ct)
            add(nid, i * n2 + (j - 1) % n2, -ct)
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))


class NeumannSolver:
    """``-lap_h rho = f`` with homogeneous Neumann data and prescribed mean.

    Two operator variants share the contract:

    * ``"compact"`` (default): finite-volume 5-point / conservative polar
      stencil with zero-flux closure.  Symmetric structure and a cleanly
      separated spectrum; this is what the density transport iteration
      needs to contract.
    * ``"composed"``: ``div_h o grad_h`` built from the grid's first
      derivative matrices, boundary rows imposing the one-sided normal
      derivative.  Differentiating the solution with the same stencils
      then satisfies exact discrete identities; ``divergence_lift`` relies
      on this variant.

    A bordered Lagrange unknown absorbs the discrete incompatibility of
    ``f`` (reported via ``last_shift``) while pinning the mean exactly.
    """

    def __init__(self, grid: Grid, operator: str = "compact"):
        if operator not in ("compact", "composed"):
            raise ConfigurationError(f"unknown Neumann operator {operator!r}")
        self.grid = grid
        self.operator = operator
        interior = grid.interior_mask.ravel()
        d_int = sp.diags(interior.astype(float))
        if operator == "composed":
            lap = grid.dx_op @ grid.dx_op + grid.dy_op @ grid.dy_op
            rows_pde = d_int @ (-lap)
            # boundary rows: n . grad_h rho = 0 with the same one-sided stencils
            nx_d = sp.diags(grid.normal[..., 0].ravel())
            ny_d = sp.diags(grid.normal[..., 1].ravel())
            rows_bc = sp.diags((~interior).astype(float)) @ (
                nx_d @ grid.dx_op + ny_d @ grid.dy_op
            )
            A = rows_pde + rows_bc
        else:
            A = d_int @ (-_compact_laplacian(grid)) + _fv_neumann_rows(grid)

        shift_col = interior.astype(float).reshape(-1, 1)
        w_row = grid.weights.ravel().reshape(1, -1)
        aug = sp.bmat(
            [[A.tolil(), sp.lil_matrix(shift_col)], [sp.lil_matrix(w_row), None]],
            format="csc",
        )
        self._interior = interior
        # compact boundary rows are half-cell flux balances and carry f;
        # composed boundary rows are pure constraints
        self._rhs_mask = interior if operator == "composed" else np.ones_like(interior)
        self._core = A.tocsr()  # N x N operator block, no borders
        self._aug = aug
        self._lu = spla.splu(aug)
        self.last_shift = 0.0
        self.incompatibility_warnings = 0

    def solve(self, f: np.ndarray, mean: float = 0.0, compat_tol: float = 1e-8) -> np.ndarray:
        grid = self.grid
        f = grid.check_scalar(f)
        f_l2 = norm(grid, f, "L2")
        defect = float(np.sum(grid.weights * f))
        if abs(defect) > compat_tol * max(f_l2, 1e-300):
            self.incompatibility_warnings += 1
        rhs = np.zeros(grid.n_nodes + 1)
        rhs[:-1][self._rhs_mask] = f.ravel()[self._rhs_mask]
        rhs[-1] = mean * grid.area
        sol = self._lu.solve(rhs)
        res = self._aug @ sol - rhs
        scale = max(float(np.linalg.norm(rhs)), 1e-300)
        if np.linalg.norm(res) > 1e-9 * scale:
            raise NumericsError(
                f"Neumann solve residual {np.linalg.norm(res):.3e} exceeds tolerance"
            )
        self.last_shift = float(sol[-1])
        return sol[:-1].reshape(grid.shape)


class DirichletSolver:
    """``-lap_h w = f`` with prescribed boundary values, compact stencil."""

    def __init__(self, grid: Grid):
        self.grid = grid
        n1, n2 = grid.shape
        if grid.kind == "rectangle":
            dx, dy = grid.spacing
            lxx = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n1, n1)) / dx**2
            lyy = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n2, n2)) / dy**2
            lap = sp.kron(lxx, sp.identity(n2)) + sp.kron(sp.identity(n1), lyy)
        else:
            dr, dt = grid.spacing
            rs = grid.c1
            rows, cols, vals = [], [], []

            def nid(i, j):
                return i * n2 + j

            for i in range(1, n1 - 1):
                rp = rs[i] + 0.5 * dr
                rm = rs[i] - 0.5 * dr
                cr = 1.0 / (rs[i] * dr**2)
                ct = 1.0 / (rs[i] ** 2 * dt**2)
                for j in range(n2):
                    rows += [nid(i, j)] * 5
                    cols += [
                        nid(i + 1, j),
                        nid(i - 1, j),
                        nid(i, (j + 1) % n2),
                        nid(i, (j - 1) % n2),
                        nid(i, j),
                    ]
                    vals += [cr * rp, cr * rm, ct, ct, -cr * (rp + rm) - 2.0 * ct]
            lap = sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))

        interior = grid.interior_mask.ravel()
        A = sp.diags(interior.astype(float)) @ (-lap) + sp.diags((~interior).astype(float))
        self._interior = interior
        self._A = _as_csc(A)
        self._lu = spla.splu(self._A)

    def solve(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        grid = self.grid
        f = grid.check_scalar(f)
        g = grid.check_scalar(g)
        rhs = np.where(self._interior, f.ravel(), g.ravel())
        sol = self._lu.solve(rhs)
        res = np.linalg.norm(self._A @ sol - rhs)
        if res > 1e-9 * max(np.linalg.norm(rhs), 1e-300):
            raise NumericsError(f"Dirichlet solve residual {res:.3e} exceeds tolerance")
        return sol.reshape(grid.shape)


def _element_nodes(grid: Grid):
    """Connectivity (n_els, 4) in local order (00, 10, 01, 11)."""
    n1, n2 = grid.shape
    if grid.kind == "rectangle":
        i, j = np.meshgrid(np.arange(n1 - 1), np.arange(n2 - 1), indexing="ij")
        i = i.ravel()
        j = j.ravel()
        jp = j + 1
    else:
        i, j = np.meshgrid(np.arange(n1 - 1), np.arange(n2), indexing="ij")
        i = i.ravel()
        j = j.ravel()
        jp = (j + 1) % n2
    n00 = i * n2 + j
    n10 = (i + 1) * n2 + j
    n01 = i * n2 + jp
    n11 = (i + 1) * n2 + jp
    return np.stack([n00, n10, n01, n11], axis=1), i, j


def _shape_gradients(grid: Grid, i_el, j_el, xi, ze):
    """Cartesian shape-function gradients and measure at one Gauss point.

    Returns (gx, gy, dv): each (n_els, 4) / (n_els,).
    """
    dn_dxi = 0.25 * np.array([-(1 - ze), (1 - ze), -(1 + ze), (1 + ze)])
    dn_dze = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 - xi), (1 + xi)])
    d1, d2 = grid.spacing
    if grid.kind == "rectangle":
        gx = np.broadcast_to(dn_dxi * (2.0 / d1), (len(i_el), 4))
        gy = np.broadcast_to(dn_dze * (2.0 / d2), (len(i_el), 4))
        dv = np.full(len(i_el), d1 * d2 / 4.0)
        return gx, gy, dv
    r_gp = grid.c1[i_el] + (xi + 1.0) * 0.5 * d1
    t_gp = grid.c2[j_el] + (ze + 1.0) * 0.5 * d2
    g_r = np.broadcast_to(dn_dxi * (2.0 / d1), (len(i_el), 4))
    g_t = dn_dze[None, :] * (2.0 / d2) / r_gp[:, None]
    c = np.cos(t_gp)[:, None]
    s = np.sin(t_gp)[:, None]
    gx = g_r * c - g_t * s
    gy = g_r * s + g_t * c
    dv = r_gp * d1 * d2 / 4.0
    return gx, gy, dv


class LameSolver:
    """Viscous operator ``-mu lap w - (mu+nu) grad div w`` with slip walls.

    Weak form on bilinear elements with 2x2 Gauss quadrature; boundary
    friction and tangential loads use the lumped arclength quadrature, so
    reported boundary energies match the assembled forms exactly.

    Parameters must satisfy mu > 0 and 2 mu + 3 nu > 0.  With zero
    friction on the annulus the rigid-rotation mode is removed through a
    Lagrange constraint on the angular momentum.
    """

    def __init__(self, grid: Grid, mu: float, nu: float, friction: float):
        if mu <= 0 or 2 * mu + 3 * nu <= 0:
            raise ConfigurationError("need mu > 0 and 2*mu + 3*nu > 0")
        if friction < 0:
            raise ConfigurationError("friction must be >= 0")
        self.grid = grid
        self.mu = mu
        self.nu = nu
        self.friction = friction

        n = grid.n_nodes
        nodes, i_el, j_el = _element_nodes(grid)
        dofs = np.concatenate([2 * nodes, 2 * nodes + 1], axis=1)  # (n_els, 8)

        ke_d = np.zeros((len(nodes), 8, 8))
        ke_v = np.zeros((len(nodes), 8, 8))
        z = np.zeros
        for xi in (-_GAUSS, _GAUSS):
            for ze in (-_GAUSS, _GAUSS):
                gx, gy, dv = _shape_gradients(grid, i_el, j_el, xi, ze)
                zero = z(gx.shape)
                # rows: D11, D22, sqrt(2) D12 so that B^T B = |D|^2
                b11 = np.concatenate([gx, zero], axis=1)
                b22 = np.concatenate([zero, gy], axis=1)
                b12 = np.sqrt(0.5) * np.concatenate([gy, gx], axis=1)
                bdiv = np.concatenate([gx, gy], axis=1)
                for b in (b11, b22, b12):
                    ke_d += dv[:, None, None] * np.einsum("ea,eb->eab", b, b)
                ke_v += dv[:, None, None] * np.einsum("ea,eb->eab", bdiv, bdiv)

        rows = np.repeat(dofs, 8, axis=1).ravel()
        cols = np.tile(dofs, (1, 8)).ravel()
        self.form_deform = sp.csr_matrix((ke_d.ravel(), (rows, cols)), shape=(2 * n, 2 * n))
        self.form_div = sp.csr_matrix((ke_v.ravel(), (rows, cols)), shape=(2 * n, 2 * n))

        # lumped boundary form sum_b sw_b (w.tau)(phi.tau)
        bmask = grid.boundary_mask.ravel()
        sw = grid.boundary_weights.ravel()
        tau = grid.tangent.reshape(-1, 2)
        rows_f, cols_f, vals_f = [], [], []
        for node in np.nonzero(bmask)[0]:
            t = tau[node]
            for a in range(2):
                for b in range(2):
                    rows_f.append(2 * node + a)
                    cols_f.append(2 * node + b)
                    vals_f.append(sw[node] * t[a] * t[b])
        self.form_friction = sp.csr_matrix((vals_f, (rows_f, cols_f)), shape=(2 * n, 2 * n))

        # constraint elimination: interior nodes keep both components,
        # boundary nodes keep the tangential coefficient, corners are fixed
        corners = grid.segments.get("corners")
        corner_mask = corners.ravel() if corners is not None else np.zeros(n, dtype=bool)
        cols_r, rows_r, vals_r = [], [], []
        red = 0
        for node in range(n):
            if corner_mask[node]:
                continue
            if bmask[node]:
                t = tau[node]
                rows_r += [2 * node, 2 * node + 1]
                cols_r += [red, red]
                vals_r += [t[0], t[1]]
                red += 1
            else:
                rows_r += [2 * node, 2 * node + 1]
                cols_r += [red, red + 1]
                vals_r += [1.0, 1.0]
                red += 2
        self.reduction = sp.csr_matrix((vals_r, (rows_r, cols_r)), shape=(2 * n, red))

        A_full = 2 * mu * self.form_deform + nu * self.form_div + friction * self.form_friction
        self._A_full = A_full.tocsr()
        A_red = (self.reduction.T @ A_full @ self.reduction).tocsc()
        self._A_red_core = A_red

        self._deflated = friction == 0.0 and grid.kind == "annulus"
        if self._deflated:
            wvec = np.repeat(grid.weights.ravel(), 2)
            rot = np.empty(2 * n)
            rot[0::2] = -grid.y.ravel()
            rot[1::2] = grid.x.ravel()
            m = self.reduction.T @ (wvec * rot)
            A_red = sp.bmat([[A_red, m.reshape(-1, 1)], [m.reshape(1, -1), None]], format="csc")
        self._A_red = A_red
        self._lu = spla.splu(A_red)
        self._wvec = np.repeat(grid.weights.ravel(), 2)

    def _tangential_load(self, data: np.ndarray) -> np.ndarray:
        grid = self.grid
        load = np.zeros(2 * grid.n_nodes)
        sw = grid.boundary_weights.ravel()
        tau = grid.tangent.reshape(-1, 2)
        gvals = data.ravel() * sw
        load[0::2] = gvals * tau[:, 0]
        load[1::2] = gvals * tau[:, 1]
        return load

    def solve(self, rhs: np.ndarray, tangential_data: np.ndarray | None = None) -> np.ndarray:
        grid = self.grid
        rhs = grid.check_vector(rhs)
        # (n1, n2, 2) flattens to the dof order 2*node + component
        b_full = self._wvec * rhs.reshape(-1)
        if tangential_data is not None:
            b_full = b_full + self._tangential_load(grid.check_scalar(tangential_data))
        b = self.reduction.T @ b_full
        if self._deflated:
            b = np.concatenate([b, [0.0]])
        u = self._lu.solve(b)
        res = np.linalg.norm(self._A_red @ u - b)
        if res > 1e-8 * max(np.linalg.norm(b), 1e-300):
            raise NumericsError(f"Lame solve residual {res:.3e} exceeds tolerance")
        if self._deflated:
            u = u[:-1]
        return (self.reduction @ u).reshape(*grid.shape, 2)

    def residual_field(self, w: np.ndarray, rhs: np.ndarray,
                       tangential_data: np.ndarray | None = None) -> np.ndarray:
        """Defect of the solved system at ``w`` as a nodal force density.

        The reduced residual is pushed back to nodes and divided by the
        lumped quadrature weights, so its magnitude is comparable to the
        strong-form momentum imbalance.
        """
        grid = self.grid
        wf = grid.check_vector(w).reshape(-1)
        b_full = self._wvec * grid.check_vector(rhs).reshape(-1)
        if tangential_data is not None:
            b_full = b_full + self._tangential_load(grid.check_scalar(tangential_data))
        r_red = self.reduction.T @ (self._A_full @ wf - b_full)
        lump = self.reduction.T @ self._wvec
        nodal = self.reduction @ (r_red / lump)
        return nodal.reshape(*grid.shape, 2)

    def energy_terms(self, w: np.ndarray, rhs: np.ndarray, tangential_data=None) -> dict:
        """Quadratic-form values entering the discrete energy identity."""
        grid = self.grid
        wf = grid.check_vector(w).reshape(-1)
        terms = {
            "deformation": float(wf @ (self.form_deform @ wf)),
            "divergence": float(wf @ (self.form_div @ wf)),
            "friction": float(wf @ (self.form_friction @ wf)),
            "work_rhs": float(wf @ (self._wvec * grid.check_vector(rhs).reshape(-1))),
        }
        if tangential_data is not None:
            terms["work_tangential"] = float(wf @ self._tangential_load(grid.check_scalar(tangential_data)))
        else:
            terms["work_tangential"] = 0.0
        return terms


def solve_neumann(grid: Grid, f: np.ndarray, mean: float = 0.0) -> np.ndarray:
    """One-shot Neumann solve (builds a solver; prefer NeumannSolver for reuse)."""
    return NeumannSolver(grid).solve(f, mean=mean)


def solve_dirichlet(grid: Grid, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    return DirichletSolver(grid).solve(f, g)


def solve_lame(grid: Grid, mu: float, nu: float, friction: float, rhs: np.ndarray,
               tangential_data: np.ndarray | None = None) -> np.ndarray:
    return LameSolver(grid, mu, nu, friction).solve(rhs, tangential_data)


def divergence_lift(grid: Grid, f: np.ndarray, neumann: NeumannSolver | None = None):
    """Vector field psi with div_h(psi) = f - shift and psi.n = 0 on the wall.

    psi is the discrete gradient of the potential solving
    ``div_h grad_h N = f - shift`` with a homogeneous one-sided normal
    derivative; differentiating with the same stencils makes both
    properties hold at interior respectively boundary nodes to solver
    precision.  ``shift`` is a constant: the quadrature mean of ``f`` plus
    the compatibility constant of the discrete system (the discrete
    divergence theorem is not exact, so the two differ by O(h^2) for
    smooth fields and by a boundary-sampling term for rough ones).

    Returns ``(psi, stability_ratio, shift)`` where the ratio is
    |psi|_W12 / |f|_L2.
    """
    f = grid.check_scalar(f)
    if neumann is not None and neumann.operator != "composed":
        raise ConfigurationError("divergence_lift needs the composed-operator solver")
    ns = neumann if neumann is not None else NeumannSolver(grid, operator="composed")
    f_bar = float(np.sum(grid.weights * f)) / grid.area
    potential = ns.solve(-(f - f_bar), mean=0.0, compat_tol=np.inf)
    # the bordered unknown shifts the interior equations by a constant:
    # div_h grad_h N = (f - f_bar) + c  exactly at interior nodes
    shift = f_bar - ns.last_shift
    psi = grid.grad(potential)
    f_l2 = norm(grid, f, "L2")
    ratio = norm(grid, psi, "W12") / f_l2 if f_l2 > 0 else 0.0
    return psi, ratio, shift
