"""Rule-based myofiber generation from harmonic distance fields.

The transmural coordinate and the auxiliary (longitudinal) distances are
harmonic interpolants between labeled surfaces.  Per cell, their gradients
define an orthonormal frame that is rotated by transmurally interpolated
helix/sheet angles into the fiber triplet (f0, s0, n0).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from cardioem.errors import SolverError
from cardioem.fem import (
    FeSpace,
    LinearSolverConfig,
    apply_dirichlet,
    assemble_anisotropic_stiffness,
    solve_linear,
)
from cardioem.mesh import cell_adjacency

GRAD_TOL = 1e-10
PARALLEL_TOL = 1e-8


@dataclass
class DistanceField:
    """Scalar P1 harmonic field on a region, with its Dirichlet data."""

    values: np.ndarray            # (n_vertices,), zero outside the region
    vertex_mask: np.ndarray       # vertices belonging to the region
    dirichlet: list               # [(surface, value), ...]
    mesh: object

    def cell_values(self, cells=None):
        tets = self.mesh.tets if cells is None else self.mesh.tets[cells]
        return self.values[tets].mean(axis=1)

    def cell_gradients(self, space: FeSpace, cells=None):
        g = space.cell_gradients()
        tets = self.mesh.tets
        if cells is not None:
            g, tets = g[cells], tets[cells]
        return np.einsum("ca,cai->ci", self.values[tets], g)

    def extrema_slack(self):
        """How far the interior range exceeds the Dirichlet data range."""
        vals = [v for _, v in self.dirichlet]
        lo, hi = min(vals), max(vals)
        inside = self.values[self.vertex_mask]
        return max(lo - inside.min(), inside.max() - hi, 0.0)


@dataclass
class AngleRule:
    """Helix/sheet angles (degrees) at endocardium and epicardium."""

    alpha_endo_deg: float = 60.0
    alpha_epi_deg: float = -60.0
    beta_endo_deg: float = 0.0
    beta_epi_deg: float = 0.0

    def angles_at(self, d):
        """Linear transmural interpolation; d=1 at endo, d=0 at epi."""
        a = self.alpha_epi_deg * (1.0 - d) + self.alpha_endo_deg * d
        b = self.beta_epi_deg * (1.0 - d) + self.beta_endo_deg * d
        return a, b


@dataclass
class FiberField:
    """Per-cell orthonormal triplets; zero rows on cells without fibers."""

    f0: np.ndarray
    s0: np.ndarray
    n0: np.ndarray
    cell_mask: np.ndarray
    fallback_cells: int = 0

    def orthonormality_defect(self):
        m = self.cell_mask
        f, s, n = self.f0[m], self.s0[m], self.n0[m]
        dots = [
            np.abs(np.einsum("ci,ci->c", f, s)),
            np.abs(np.einsum("ci,ci->c", f, n)),
            np.abs(np.einsum("ci,ci->c", s, n)),
            np.abs(np.linalg.norm(f, axis=1) - 1),
            np.abs(np.linalg.norm(s, axis=1) - 1),
            np.abs(np.linalg.norm(n, axis=1) - 1),
        ]
        return float(max(d.max() for d in dots)) if m.any() else 0.0


@dataclass
class FiberRecipe:
    """Distance-field construction rule for one conductive region set.

    ``psi`` is either a list of (surface, value) Dirichlet pairs or
    ``("coordinate", direction)`` for box-like toys with no second
    labeled surface pair.
    """

    regions: list
    phi: list
    psi: object
    rule: AngleRule = field(default_factory=AngleRule)
    phi_endo_value: float = 0.0
    phi_epi_value: float = 1.0


def solve_distance(mesh, dirichlet, region, solver=None) -> DistanceField:
    """Harmonic interpolation between labeled surfaces on a cell region."""
    if len({v for _, v in dirichlet}) < 2 and len(dirichlet) < 2:
        if len(dirichlet) == 0:
            raise SolverError("distance field needs Dirichlet data on at least one surface")
    space = FeSpace(mesh, order=1)
    K = assemble_anisotropic_stiffness(space, region=region)
    region_dofs = space.region_dofs(region)
    mask = np.zeros(space.n_dofs, dtype=bool)
    mask[region_dofs] = True

    fixed, vals = [], []
    seen = set()
    for surface, value in dirichlet:
        dofs = space.surface_scalar_dofs(surface)
        for d in dofs:
            if mask[d] and d not in seen:
                fixed.append(d)
                vals.append(float(value))
                seen.add(d)
    if not fixed:
        raise SolverError("no Dirichlet DOFs intersect the region; system is singular")
    outside = np.nonzero(~mask)[0]
    all_fixed = np.concatenate([np.array(fixed, dtype=np.int64), outside])
    all_vals = np.concatenate([np.array(vals), np.zeros(len(outside))])
    A, b = apply_dirichlet(K, np.zeros(space.n_dofs), all_fixed, all_vals)
    if solver is None:
        # few, small P1 systems: a direct factorization keeps the harmonic
        # interpolant exact to machine precision
        import scipy.sparse.linalg as spla

        x = spla.splu(A.tocsc()).solve(b)
    else:
        x = solve_linear(A, b, solver)
    return DistanceField(values=x, vertex_mask=mask, dirichlet=list(dirichlet), mesh=mesh)


def build_local_frame(grad_phi, grad_psi):
    """Orthonormal (e_l, e_n, e_t) from transmural and auxiliary gradients.

    e_t along grad_phi; e_n is grad_psi orthogonalized against e_t;
    e_l = e_n x e_t.  Raises ValueError on degenerate input.
    """
    gp = np.asarray(grad_phi, dtype=float)
    np_ = np.linalg.norm(gp)
    if np_ <= GRAD_TOL:
        raise ValueError("transmural gradient vanishes")
    e_t = gp / np_
    gs = np.asarray(grad_psi, dtype=float)
    e_n = gs - (gs @ e_t) * e_t
    nn = np.linalg.norm(e_n)
    if nn <= PARALLEL_TOL * max(np.linalg.norm(gs), GRAD_TOL):
        raise ValueError("auxiliary gradient parallel to transmural direction")
    e_n = e_n / nn
    e_l = np.cross(e_n, e_t)
    return e_l, e_n, e_t


def _rodrigues(axis, angle_rad, v):
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return v * c + np.cross(axis, v) * s + axis * (axis @ v) * (1.0 - c)


def rotate_frame(frame, alpha_deg, beta_deg):
    """Rotate e_l by alpha about e_t, then the sheet axes by beta about f0.

    Rotations follow the right-hand rule about the named axis.  Returns
    (f0, s0, n0).
    """
    e_l, e_n, e_t = (np.asarray(v, dtype=float) for v in frame)
    a = np.deg2rad(alpha_deg)
    b = np.deg2rad(beta_deg)
    f0 = _rodrigues(e_t, a, e_l)
    n_mid = _rodrigues(e_t, a, e_n)
    s0 = _rodrigues(f0, b, e_t)
    n0 = _rodrigues(f0, b, n_mid)
    return f0, s0, n0


def _frames_vectorized(gp, gs):
    """Per-cell frames; returns (e_l, e_n, e_t, ok_mask)."""
    np_ = np.linalg.norm(gp, axis=1)
    ok = np_ > GRAD_TOL
    e_t = np.zeros_like(gp)
    e_t[ok] = gp[ok] / np_[ok, None]
    proj = np.einsum("ci,ci->c", gs, e_t)
    e_n = gs - proj[:, None] * e_t
    nn = np.linalg.norm(e_n, axis=1)
    ok &= nn > PARALLEL_TOL * np.maximum(np.linalg.norm(gs, axis=1), GRAD_TOL)
    e_n[ok] = e_n[ok] / nn[ok, None]
    e_l = np.cross(e_n, e_t)
    return e_l, e_n, e_t, ok


def _rotate_vectorized(e_l, e_n, e_t, alpha_rad, beta_rad):
    def rot(axis, ang, v):
        c = np.cos(ang)[:, None]
        s = np.sin(ang)[:, None]
        dot = np.einsum("ci,ci->c", axis, v)[:, None]
        return v * c + np.cross(axis, v) * s + axis * dot * (1.0 - c)

    f0 = rot(e_t, alpha_rad, e_l)
    n_mid = rot(e_t, alpha_rad, e_n)
    s0 = rot(f0, beta_rad, e_t)
    n0 = rot(f0, beta_rad, n_mid)
    return f0, s0, n0


def generate_fibers(mesh, recipes, solver=None) -> FiberField:
    """Build the per-cell fiber triplet from recipe-defined distance fields.

    Deterministic: identical inputs produce bit-identical output.  Cells
    with degenerate gradients copy the triplet of the nearest regular
    neighbor (breadth-first over face adjacency) and are counted in
    ``fallback_cells``.
    """
    n = mesh.n_cells
    f0 = np.zeros((n, 3))
    s0 = np.zeros((n, 3))
    n0 = np.zeros((n, 3))
    mask = np.zeros(n, dtype=bool)
    space = FeSpace(mesh, order=1)
    n_fallback = 0

    adj_pairs = cell_adjacency(mesh)
    neighbors = {}
    for a, b in adj_pairs:
        neighbors.setdefault(int(a), []).append(int(b))
        neighbors.setdefault(int(b), []).append(int(a))

    for recipe in recipes:
        cells = mesh.region_cells(recipe.regions)
        phi = solve_distance(mesh, recipe.phi, recipe.regions, solver=solver)
        gp = phi.cell_gradients(space, cells)
        if isinstance(recipe.psi, tuple) and recipe.psi[0] == "coordinate":
            direction = np.asarray(recipe.psi[1], dtype=float)
            gs = np.broadcast_to(direction, gp.shape).copy()
        else:
            psi = solve_distance(mesh, recipe.psi, recipe.regions, solver=solver)
            gs = psi.cell_gradients(space, cells)

        e_l, e_n, e_t, ok = _frames_vectorized(gp, gs)
        d = (phi.cell_values(cells) - recipe.phi_epi_value) / (
            recipe.phi_endo_value - recipe.phi_epi_value
        )
        d = np.clip(d, 0.0, 1.0)
        a_deg, b_deg = recipe.rule.angles_at(d)
        rf, rs, rn = _rotate_vectorized(e_l, e_n, e_t, np.deg2rad(a_deg), np.deg2rad(b_deg))

        f0[cells[ok]] = rf[ok]
        s0[cells[ok]] = rs[ok]
        n0[cells[ok]] = rn[ok]
        mask[cells[ok]] = True

        # breadth-first fallback for degenerate cells within this region: the
        # donor's pre-rotation axes stand in for the unusable psi gradient,
        # re-orthogonalized against the local transmural gradient so fibers
        # stay tangent to the level sets of phi wherever it has a gradient
        cell_pos = {int(c): i for i, c in enumerate(cells)}
        raw_frames = np.stack([e_l, e_n, e_t], axis=1)
        pending = deque(sorted(int(c) for c in cells[~ok]))
        region_set = set(int(c) for c in cells)
        guard = 0
        while pending and guard < 4 * len(pending) + 1000:
            c = pending.popleft()
            guard += 1
            donor = None
            for nb in sorted(neighbors.get(c, [])):
                if mask[nb] and nb in region_set:
                    donor = nb
                    break
            if donor is None:
                pending.append(c)
                continue
            i = cell_pos[c]
            frame = None
            gp_c = gp[i]
            if np.linalg.norm(gp_c) > GRAD_TOL and donor in cell_pos and ok[cell_pos[donor]]:
                jd = cell_pos[donor]
                for axis in (raw_frames[jd, 1], raw_frames[jd, 0]):
                    try:
                        frame = build_local_frame(gp_c, axis)
                        break
                    except ValueError:
                        continue
            if frame is not None:
                fr, sr, nr = rotate_frame(frame, float(a_deg[i]), float(b_deg[i]))
                f0[c], s0[c], n0[c] = fr, sr, nr
                raw_frames[i] = np.stack(frame)
                ok[i] = True
            else:
                f0[c], s0[c], n0[c] = f0[donor], s0[donor], n0[donor]
            mask[c] = True
            n_fallback += 1
        if pending:
            raise SolverError(
                f"fiber fallback could not reach {len(pending)} isolated degenerate cells"
            )

    return FiberField(f0=f0, s0=s0, n0=n0, cell_mask=mask, fallback_cells=n_fallback)
