"""P1/P2 Lagrange finite elements on tets, assembly and linear solvers.

Element integrals are computed exactly from the barycentric monomial
formula (``int λ^a = a!b!c!d!/(|a|+3)! * 6V``), so mass and stiffness
matrices of affine tets carry no quadrature error.  Reference tensors are
precomputed once at import.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from cardioem.errors import GeometryError, SolverError

# ---------------------------------------------------------------------------
# reference element: P1 and P2 bases as polynomials in (λ0, λ1, λ2, λ3)

P2_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def _monomial_integral(alpha):
    """Integral of λ0^a λ1^b λ2^c λ3^d over the unit-volume reference tet."""
    s = sum(alpha)
    num = 1.0
    for a in alpha:
        num *= math.factorial(a)
    return 6.0 * num / math.factorial(s + 3)


class _Poly:
    """Sparse polynomial in barycentric coordinates: {multi-index: coeff}."""

    def __init__(self, terms):
        self.terms = dict(terms)

    def __mul__(self, other):
        out = {}
        for a, ca in self.terms.items():
            for b, cb in other.terms.items():
                key = tuple(x + y for x, y in zip(a, b))
                out[key] = out.get(key, 0.0) + ca * cb
        return _Poly(out)

    def __add__(self, other):
        out = dict(self.terms)
        for a, c in other.terms.items():
            out[a] = out.get(a, 0.0) + c
        return _Poly(out)

    def integral(self):
        return sum(c * _monomial_integral(a) for a, c in self.terms.items())

    def dlam(self, k):
        out = {}
        for a, c in self.terms.items():
            if a[k] == 0:
                continue
            key = tuple(x - (1 if i == k else 0) for i, x in enumerate(a))
            out[key] = out.get(key, 0.0) + c * a[k]
        return _Poly(out)


def _unit(k):
    return tuple(1 if i == k else 0 for i in range(4))


def _basis(order):
    lam = [_Poly({_unit(k): 1.0}) for k in range(4)]
    if order == 1:
        return lam
    basis = []
    for k in range(4):  # vertex functions λ(2λ-1)
        basis.append(_Poly({_unit(k): -1.0}) * _Poly({(0, 0, 0, 0): 1.0})
                     + lam[k] * _Poly({_unit(k): 2.0}))
    for i, j in P2_EDGES:  # edge functions 4 λi λj
        basis.append(lam[i] * lam[j] * _Poly({(0, 0, 0, 0): 4.0}))
    return basis


def _reference_tensors(order):
    basis = _basis(order)
    nd = len(basis)
    mass = np.zeros((nd, nd))
    grad = np.zeros((nd, 4, nd, 4))
    lin = np.zeros((nd, nd, 4))  # int φa φb λk, for per-vertex coefficients
    d = [[basis[a].dlam(k) for k in range(4)] for a in range(nd)]
    lam = [_Poly({_unit(k): 1.0}) for k in range(4)]
    for a in range(nd):
        for b in range(nd):
            mass[a, b] = (basis[a] * basis[b]).integral()
            for k in range(4):
                lin[a, b, k] = (basis[a] * basis[b] * lam[k]).integral()
                for l in range(4):
                    grad[a, k, b, l] = (d[a][k] * d[b][l]).integral()
    return mass, grad, lin


_REF = {1: _reference_tensors(1), 2: _reference_tensors(2)}


# ---------------------------------------------------------------------------
# spaces


@dataclass
class FeSpace:
    """Scalar or vector Lagrange space (order 1 or 2) on a LabeledMesh.

    Vector DOFs are blocked per node: global dof = scalar_dof*components+c.
    """

    mesh: object
    order: int = 1
    components: int = 1
    constrained_dofs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        mesh = self.mesh
        if self.order == 1:
            self.cell_dofs = mesh.tets
            self.n_scalar = mesh.n_vertices
            self.dof_coords_scalar = mesh.vertices
        else:
            edges, cell_edges = mesh.edges()
            self.cell_dofs = np.concatenate(
                [mesh.tets, mesh.n_vertices + cell_edges], axis=1
            )
            self.n_scalar = mesh.n_vertices + len(edges)
            mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
            self.dof_coords_scalar = np.concatenate([mesh.vertices, mids])
        self.n_dofs = self.n_scalar * self.components
        self._grads = None

    def cell_gradients(self):
        """Per-cell gradients of the 4 barycentric coordinates, (n_cell,4,3)."""
        if self._grads is None:
            p = self.mesh.vertices[self.mesh.tets]
            J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
            Jinv = np.linalg.inv(J)
            g = np.empty((self.mesh.n_cells, 4, 3))
            g[:, 1:, :] = Jinv          # rows of J^-1 are grad λ1..λ3
            g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
            self._grads = g
        return self._grads

    def region_dofs(self, region):
        cells = self.mesh.region_cells(region)
        sd = np.unique(self.cell_dofs[cells])
        if self.components == 1:
            return sd
        return (sd[:, None] * self.components + np.arange(self.components)).reshape(-1)

    def surface_scalar_dofs(self, surface):
        """Scalar DOFs lying on a labeled boundary surface."""
        idx = self.mesh.surface_facets(surface)
        tris = self.mesh.facets[idx]
        verts = np.unique(tris)
        if self.order == 1:
            return verts
        edges, _ = self.mesh.edges()
        key = {tuple(e): i for i, e in enumerate(edges)}
        eids = set()
        for t in tris:
            for a, b in ((0, 1), (1, 2), (0, 2)):
                eids.add(key[tuple(sorted((t[a], t[b])))])
        return np.concatenate([verts, self.mesh.n_vertices + np.array(sorted(eids), dtype=np.int64)])

    def vector_dofs(self, scalar_dofs, component=None):
        comps = range(self.components) if component is None else [component]
        return np.concatenate([scalar_dofs * self.components + c for c in comps])


@dataclass
class SparseOperator:
    """Square sparse operator in CSR layout."""

    matrix: sp.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    def dump_matrix_market(self, path):
        from scipy.io import mmwrite

        mmwrite(str(path), self.matrix.tocoo())

    def __matmul__(self, v):
        return self.matrix @ v


@dataclass
class LinearSolverConfig:
    method: str = "CG"                    # CG | GMRES
    preconditioner: str = "AMG-or-fallback"   # Jacobi | block-Jacobi-ILU0 | AMG-or-fallback
    abs_tol: float = 1e-10
    max_iters: int = 2000

    def __post_init__(self):
        if self.abs_tol <= 0:
            raise ValueError("abs_tol must be positive")


def _scatter(cell_dofs, elem, n, components=1):
    """Assemble element matrices (ncells, nd, nd) into CSR (scalar blocks)."""
    ncell, nd, _ = elem.shape
    if components == 1:
        rows = np.repeat(cell_dofs, nd, axis=1).reshape(-1)
        cols = np.tile(cell_dofs, (1, nd)).reshape(-1)
        return sp.coo_matrix((elem.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()
    # vector: block-diagonal per component with identical scalar blocks
    vd = cell_dofs[:, :, None] * components + np.arange(components)[None, None, :]
    vd = vd.reshape(ncell, nd * components)
    data = np.zeros((ncell, nd * components, nd * components))
    for c in range(components):
        data[:, c::components, c::components] = elem
    rows = np.repeat(vd, nd * components, axis=1).reshape(-1)
    cols = np.tile(vd, (1, nd * components)).reshape(-1)
    return sp.coo_matrix((data.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()


def assemble_mass(space: FeSpace, region=None, coefficient=1.0) -> SparseOperator:
    """Mass matrix restricted to a labeled region.

    ``coefficient`` may be a scalar or a per-cell array.  Rows of DOFs not
    touching the region are identically zero.
    """
    mesh = space.mesh
    cells = np.arange(mesh.n_cells) if region is None else mesh.region_cells(region)
    if cells.size == 0:
        raise GeometryError(f"region {region!r} selects no cells; cannot assemble")
    mref = _REF[space.order][0]
    coeff = np.broadcast_to(np.asarray(coefficient, dtype=float), (mesh.n_cells,))[cells]
    vols = mesh.cell_volumes()[cells]
    elem = (coeff * vols)[:, None, None] * mref[None, :, :]
    return SparseOperator(_scatter(space.cell_dofs[cells], elem, space.n_dofs, space.components))


def assemble_anisotropic_stiffness(space: FeSpace, region=None, tensor=None) -> SparseOperator:
    """Stiffness matrix for a per-cell 3x3 SPD diffusion tensor.

    ``tensor``: (n_cells, 3, 3), a single 3x3, or None for the identity.
    """
    mesh = space.mesh
    cells = np.arange(mesh.n_cells) if region is None else mesh.region_cells(region)
    if cells.size == 0:
        raise GeometryError(f"region {region!r} selects no cells; cannot assemble")
    if tensor is None:
        tensor = np.eye(3)
    tensor = np.asarray(tensor, dtype=float)
    if tensor.ndim == 2:
        D = np.broadcast_to(tensor, (cells.size, 3, 3))
    else:
        D = tensor[cells]
    ev = np.linalg.eigvalsh(0.5 * (D + np.transpose(D, (0, 2, 1))))
    bad = np.nonzero(ev[:, 0] <= 0)[0]
    if bad.size:
        raise GeometryError(
            f"diffusion tensor not SPD on cell {cells[bad[0]]} "
            f"(min eigenvalue {ev[bad[0], 0]:.3e})"
        )
    g = space.cell_gradients()[cells]           # (nc, 4, 3)
    G = np.einsum("cki,cij,clj->ckl", g, D, g)  # (nc, 4, 4)
    S = _REF[space.order][1]                    # (nd,4,nd,4)
    vols = mesh.cell_volumes()[cells]
    elem = vols[:, None, None] * np.einsum("ckl,akbl->cab", G, S)
    return SparseOperator(_scatter(space.cell_dofs[cells], elem, space.n_dofs, space.components))


def intergrid_transfer(src: FeSpace, dst: FeSpace, values):
    """Move nodal values between P1 and P2 spaces on the same mesh.

    P1 -> P2 is exact nodal interpolation (edge DOFs take endpoint means);
    P2 -> P1 restricts to vertex DOFs.  Linear in the values by construction.
    """
    if src.mesh is not dst.mesh:
        raise ValueError("intergrid transfer requires the same mesh")
    if src.components != dst.components:
        raise ValueError("intergrid transfer requires equal component counts")
    values = np.asarray(values, dtype=float)
    if values.shape[0] != src.n_dofs:
        raise ValueError(f"expected {src.n_dofs} values, got {values.shape[0]}")
    comps = src.components
    nv = src.mesh.n_vertices
    v = values.reshape(src.n_scalar, comps)
    if src.order == dst.order:
        return values.copy()
    if src.order == 1 and dst.order == 2:
        edges, _ = src.mesh.edges()
        out = np.empty((dst.n_scalar, comps))
        out[:nv] = v
        out[nv:] = 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])
        return out.reshape(-1)
    if src.order == 2 and dst.order == 1:
        return v[:nv].reshape(-1).copy()
    raise ValueError("unsupported order pair")


def apply_dirichlet(op: SparseOperator, rhs, dofs, values=None):
    """Row/column elimination with unit diagonal (symmetry preserving).

    Returns (modified CSR matrix, modified rhs).
    """
    A = op.matrix if isinstance(op, SparseOperator) else op
    n = A.shape[0]
    dofs = np.asarray(dofs, dtype=np.int64)
    if values is None:
        values = np.zeros(len(dofs))
    x = np.zeros(n)
    x[dofs] = values
    mask = np.ones(n)
    mask[dofs] = 0.0
    P = sp.diags(mask)
    rhs_mod = mask * (np.asarray(rhs, dtype=float) - A @ x)
    rhs_mod[dofs] = values
    fix = sp.coo_matrix((np.ones(len(dofs)), (dofs, dofs)), shape=(n, n))
    A_mod = (P @ A @ P + fix).tocsr()
    return A_mod, rhs_mod


def _make_preconditioner(A, kind):
    if kind == "Jacobi":
        d = A.diagonal()
        d = np.where(np.abs(d) > 0, d, 1.0)
        return spla.LinearOperator(A.shape, matvec=lambda v: v / d)
    if kind == "block-Jacobi-ILU0":
        ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=10)
        return spla.LinearOperator(A.shape, matvec=ilu.solve)
    if kind == "AMG-or-fallback":
        try:
            import pyamg

            ml = pyamg.smoothed_aggregation_solver(A.tocsr(), max_coarse=50)
            return ml.aspreconditioner(cycle="V")
        except Exception:
            ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=10)
            return spla.LinearOperator(A.shape, matvec=ilu.solve)
    raise ValueError(f"unknown preconditioner {kind!r}")


def solve_linear(op, rhs, config: LinearSolverConfig = None, report=None):
    """Solve op @ x = rhs to the configured absolute residual tolerance.

    Raises SolverError carrying the residual history on non-convergence.
    ``report``, when given, is a dict that receives iteration counts.
    """
    config = config or LinearSolverConfig()
    A = op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op)
    b = np.asarray(rhs, dtype=float)
    if A.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: operator {A.shape}, rhs {b.shape}")
    M = _make_preconditioner(A, config.preconditioner)
    history = []

    if config.method == "CG":
        def cb(xk):
            history.append(float(np.linalg.norm(b - A @ xk)))

        x, info = spla.cg(A, b, rtol=0.0, atol=config.abs_tol,
                          maxiter=config.max_iters, M=M, callback=cb)
    elif config.method == "GMRES":
        def cb(xk):
            history.append(float(np.linalg.norm(b - A @ xk)))

        x, info = spla.gmres(A, b, rtol=0.0, atol=config.abs_tol,
                             maxiter=config.max_iters, M=M, restart=100,
                             callback=cb, callback_type="x")
    else:
        raise ValueError(f"unknown linear solver method {config.method!r}")

    res = float(np.linalg.norm(b - A @ x))
    if report is not None:
        report["iterations"] = len(history)
        report["residual"] = res
    if res > config.abs_tol and info != 0:
        raise SolverError(
            f"{config.method} failed to reach {config.abs_tol:.1e} "
            f"(achieved {res:.3e} in {len(history)} iterations)",
            residuals=history,
        )
    return x


def triangle_p1_mass(area):
    """Exact P1 mass matrix on one triangle of the given area."""
    return area / 12.0 * (np.ones((3, 3)) + np.eye(3))
