"""Built-in idealized geometries.

All builders emit watertight, positively oriented tet meshes with the
region/surface labels the rest of the engine expects:

* ``slab`` -- a box with ``endo``/``epi`` on opposite z-planes and ``ring``
  faces on the x-extremes.
* ``ellipsoid-chamber`` -- a truncated thick-walled half-ellipsoid with a
  solid cap plate closing the cavity mouth, so the chamber cavity is a
  genuine internal void bounded by ``endo`` + ``endo-cap``.
* ``toy-two-chamber`` -- a shoebox heart: one atrium and one ventricle
  cavity separated by a full non-conductive valve plate, atrium closed
  above by a cap plate.
* ``toy-four-chamber`` -- the same construction duplicated left/right with
  a shared septum, giving four independent closed cavities.

Hex grids are split into six tets each (Kuhn split along the main
diagonal), which is conforming across neighboring hexes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cardioem.errors import GeometryError
from cardioem.mesh import LabeledMesh, LabelRegistry, extract_boundary

KINDS = ("slab", "ellipsoid-chamber", "toy-two-chamber", "toy-four-chamber")

# Kuhn split: vertex paths from corner (0,0,0) to (1,1,1), one tet per
# axis permutation.  Corners indexed bit-wise: ix + 2*iy + 4*iz.
_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))
_AXIS_BIT = (1, 2, 4)


def _kuhn_tets():
    tets = []
    for p in _PERMS:
        c = 0
        path = [0]
        for ax in p:
            c += _AXIS_BIT[ax]
            path.append(c)
        tets.append(path)
    return np.array(tets, dtype=np.int64)


_KUHN = _kuhn_tets()


@dataclass
class GeometrySpec:
    """Request for one of the built-in geometries.

    ``dimensions`` is kind-specific (all lengths in meters); ``resolution``
    is the target edge length.
    """

    kind: str
    dimensions: dict = field(default_factory=dict)
    resolution: float = 1e-3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GeometryError(f"unknown geometry kind {self.kind!r}; expected one of {KINDS}")
        if not self.resolution > 0:
            raise GeometryError("resolution must be positive")
        for k, v in self.dimensions.items():
            if not v > 0:
                raise GeometryError(f"dimension {k!r} must be positive, got {v}")


def build_idealized_geometry(spec: GeometrySpec) -> LabeledMesh:
    if spec.kind == "slab":
        return _build_slab(spec)
    if spec.kind == "ellipsoid-chamber":
        return _build_ellipsoid_chamber(spec)
    if spec.kind == "toy-two-chamber":
        return _build_toy_chambers(spec, four=False)
    if spec.kind == "toy-four-chamber":
        return _build_toy_chambers(spec, four=True)
    raise GeometryError(f"unknown geometry kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# structured grids


def _grid_points(nx, ny, nz, hx, hy, hz):
    x = np.arange(nx + 1) * hx
    y = np.arange(ny + 1) * hy
    z = np.arange(nz + 1) * hz
    X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
    return np.stack([X.reshape(-1), Y.reshape(-1), Z.reshape(-1)], axis=1)


def _node_index(nx, ny, nz):
    def idx(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    return idx


def _hex_corner_nodes(i, j, k, idx):
    # bitwise corner order: ix + 2*iy + 4*iz
    return np.array(
        [
            idx(i, j, k), idx(i + 1, j, k), idx(i, j + 1, k), idx(i + 1, j + 1, k),
            idx(i, j, k + 1), idx(i + 1, j, k + 1), idx(i, j + 1, k + 1), idx(i + 1, j + 1, k + 1),
        ]
    )


def _tets_from_hexes(corner_nodes):
    """corner_nodes: (n_hex, 8) -> (6*n_hex, 4) tets (Kuhn split)."""
    return corner_nodes[:, _KUHN].reshape(-1, 4)


def _orient_positive(vertices, tets):
    from cardioem.mesh import tet_volumes

    vols = tet_volumes(vertices, tets)
    neg = vols < 0
    if np.any(neg):
        tets = tets.copy()
        tets[neg, 2], tets[neg, 3] = tets[neg, 3], tets[neg, 2].copy()
    return tets


# ---------------------------------------------------------------------------
# slab


def _build_slab(spec):
    dims = spec.dimensions
    lx, ly, lz = dims.get("lx", 10e-3), dims.get("ly", 10e-3), dims.get("lz", 2e-3)
    h = spec.resolution
    nx, ny, nz = (max(1, round(l / h)) for l in (lx, ly, lz))
    pts = _grid_points(nx, ny, nz, lx / nx, ly / ny, lz / nz)
    idx = _node_index(nx, ny, nz)
    hexes = np.array(
        [_hex_corner_nodes(i, j, k, idx) for i in range(nx) for j in range(ny) for k in range(nz)]
    )
    tets = _orient_positive(pts, _tets_from_hexes(hexes))
    cell_labels = np.ones(len(tets), dtype=np.int64)

    registry = LabelRegistry(
        cell={"myocardium": 1},
        facet={"endo": 1, "epi": 2, "ring-xlo": 3, "ring-xhi": 4, "side": 5},
        facet_groups={"ring": ["ring-xlo", "ring-xhi"]},
    )
    mesh = LabeledMesh(pts, tets, cell_labels, registry=registry)
    c = pts[mesh.facets].mean(axis=1)
    lab = np.full(len(mesh.facets), 5, dtype=np.int64)
    tol = 1e-9 * max(lx, ly, lz)
    lab[np.abs(c[:, 2]) < tol] = 1
    lab[np.abs(c[:, 2] - lz) < tol] = 2
    lab[np.abs(c[:, 0]) < tol] = 3
    lab[np.abs(c[:, 0] - lx) < tol] = 4
    mesh.facet_labels[:] = lab
    return mesh.validate()


# ---------------------------------------------------------------------------
# carved voxel boxes (toy chamber family)

VOID = -1


def _carved_box(voxels, h, cell_names, facet_rules, outer_rules):
    """Build a mesh from a voxel map.

    voxels: (nx,ny,nz) int array; VOID entries are carved out, other values
    are region labels.  facet_rules maps void-neighbor voxel positions to
    surface labels via ``cavity_of(pos)``; outer_rules classifies facets on
    the outer box.
    """
    nx, ny, nz = voxels.shape
    pts = _grid_points(nx, ny, nz, h, h, h)
    idx = _node_index(nx, ny, nz)
    solid = np.argwhere(voxels != VOID)
    hexes = np.array([_hex_corner_nodes(i, j, k, idx) for i, j, k in solid])
    tets = _orient_positive(pts, _tets_from_hexes(hexes))
    cell_labels = np.repeat(voxels[tuple(solid.T)], 6)

    # drop unused points, remap indices
    used = np.unique(tets)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    tets = remap[tets]
    pts_used = pts[used]

    registry = LabelRegistry(cell=dict(cell_names), facet={})
    mesh = LabeledMesh(pts_used, tets, cell_labels, registry=registry)

    # classify boundary facets: owner hex + facet plane -> neighbor voxel
    hex_of_cell = np.repeat(np.arange(len(solid)), 6)
    owners = solid[hex_of_cell[mesh.facet_cells]]          # (n_bf, 3) voxel coords
    centers = pts_used[mesh.facets].mean(axis=1)
    hex_centers = (owners + 0.5) * h
    offset = centers - hex_centers
    axis = np.argmax(np.abs(offset), axis=1)
    sign = np.sign(offset[np.arange(len(axis)), axis]).astype(np.int64)
    neighbor = owners.copy()
    neighbor[np.arange(len(axis)), axis] += sign

    labels = np.zeros(len(mesh.facets), dtype=np.int64)
    inside = np.all((neighbor >= 0) & (neighbor < [nx, ny, nz]), axis=1)
    for f in range(len(mesh.facets)):
        if inside[f]:
            labels[f] = facet_rules(tuple(neighbor[f]))
        else:
            labels[f] = outer_rules(tuple(owners[f]), int(axis[f]), int(sign[f]))
    mesh.facet_labels[:] = labels
    return mesh


def _toy_layout(spec, four):
    h = spec.resolution
    dims = spec.dimensions

    def ncells(key, default):
        size = dims.get(key, default)
        n = max(1, round(size / h))
        return n

    wall = dims.get("wall_m", 2.4e-2)
    if h > wall + 1e-12:
        raise GeometryError(
            f"resolution {h} coarser than wall thickness {wall}; refuse to build"
        )
    nw = ncells("wall_m", 2.4e-2)
    na = ncells("cavity_a_m", 4.8e-2)   # atrium cavity edge
    nv = ncells("cavity_v_m", 4.8e-2)   # ventricle cavity edge
    nva = ncells("valve_m", h)          # valve plate layers
    ncap = ncells("cap_m", h)           # cap plate layers
    nav = ncells("cavity_a_z_m", dims.get("cavity_a_m", 4.8e-2) / 2)  # atrium height
    return h, nw, na, nv, nva, ncap, nav


def _build_toy_chambers(spec, four):
    h, nw, na, nv, nva, ncap, nav = _toy_layout(spec, four)
    side = max(na, nv)
    nxc = side + 2 * nw          # one chamber column width (cells)
    ny = side + 2 * nw
    nz = nw + nv + nva + nav + ncap
    nx = 2 * nxc - nw if four else nxc   # share the septum wall column

    # vertical bands
    kv0, kv1 = nw, nw + nv                  # ventricle cavity band
    kva0, kva1 = kv1, kv1 + nva             # valve plate band
    ka0, ka1 = kva1, kva1 + nav             # atrium cavity band
    kc0, kc1 = ka1, ka1 + ncap              # cap band

    if four:
        cell_names = {"la-myo": 1, "ra-myo": 2, "ventricles-myo": 3, "valve": 4, "caps": 5}
        facet_names = {
            "endo-la": 1, "endo-ra": 2, "endo-lv": 3, "endo-rv": 4,
            "epi": 5, "ring": 6,
        }
        columns = [(0, "l"), (nxc - nw, "r")]
    else:
        cell_names = {"atrium-myo": 1, "ventricle-myo": 2, "valve": 3, "caps": 4}
        facet_names = {"endo-atrium": 1, "endo-ventricle": 2, "epi": 3, "ring": 4}
        columns = [(0, "")]

    voxels = np.zeros((nx, ny, nz), dtype=np.int64)
    # base tissue fill
    if four:
        voxels[:, :, :kva0] = 3                       # ventricular tissue band
        voxels[:, :, kva0:kva1] = 4                   # valve plate
        mid = nxc - nw // 2                           # split atria at septum center
        voxels[:mid, :, kva1:kc0] = 1                 # LA side tissue
        voxels[mid:, :, kva1:kc0] = 2                 # RA side tissue
        voxels[:, :, kc0:kc1] = 5                     # caps
    else:
        voxels[:, :, :kva0] = 2
        voxels[:, :, kva0:kva1] = 3
        voxels[:, :, kva1:kc0] = 1
        voxels[:, :, kc0:kc1] = 4

    cavities = []
    for x0, side_tag in columns:
        ov = (side - nv) // 2
        oa = (side - na) // 2
        vbox = (
            (x0 + nw + ov, x0 + nw + ov + nv),
            (nw + ov, nw + ov + nv),
            (kv0, kv1),
        )
        abox = (
            (x0 + nw + oa, x0 + nw + oa + na),
            (nw + oa, nw + oa + na),
            (ka0, ka1),
        )
        for box in (vbox, abox):
            sl = tuple(slice(lo, hi) for lo, hi in box)
            voxels[sl] = VOID
        if four:
            vent = "endo-lv" if side_tag == "l" else "endo-rv"
            atr = "endo-la" if side_tag == "l" else "endo-ra"
        else:
            vent, atr = "endo-ventricle", "endo-atrium"
        cavities.append((vbox, facet_names[vent]))
        cavities.append((abox, facet_names[atr]))

    def cavity_of(pos):
        for box, lab in cavities:
            if all(lo <= p < hi for (lo, hi), p in zip(box, pos)):
                return lab
        raise GeometryError(f"boundary facet neighbors unexpected void at {pos}")

    def outer(owner, axis, sign):
        if axis == 2 and sign > 0:
            return facet_names["ring"]
        return facet_names["epi"]

    mesh = _carved_box(voxels, h, cell_names, cavity_of, outer)
    mesh.registry.facet.update(facet_names)
    return mesh.validate()


# ---------------------------------------------------------------------------
# ellipsoid chamber


def _square_to_disk(u, v):
    # elliptical mapping of [-1,1]^2 onto the unit disk, no pole degeneracy
    x = u * np.sqrt(1.0 - 0.5 * v * v)
    y = v * np.sqrt(1.0 - 0.5 * u * u)
    return x, y


def _build_ellipsoid_chamber(spec):
    dims = spec.dimensions
    r_in = dims.get("r_endo_m", 25e-3)    # equatorial inner radius
    z_in = dims.get("z_endo_m", 55e-3)    # inner apex depth
    wall = dims.get("wall_m", 8e-3)
    lid = dims.get("lid_m", wall)
    h = spec.resolution
    if h > wall + 1e-12:
        raise GeometryError(
            f"resolution {h} coarser than wall thickness {wall}; refuse to build"
        )
    r_out, z_out = r_in + wall, z_in + wall

    n = max(4, int(round(2 * r_out / h)))      # square grid cells per side
    n += n % 2                                 # keep a center node at the apex
    K = max(2, int(round(wall / h)))           # transmural layers
    L = max(1, int(round(lid / h)))            # lid layers

    u = np.linspace(-1.0, 1.0, n + 1)
    U, V = np.meshgrid(u, u, indexing="ij")
    dx, dy = _square_to_disk(U.reshape(-1), V.reshape(-1))
    rho2 = np.clip(dx * dx + dy * dy, 0.0, 1.0)
    depth = np.sqrt(1.0 - rho2)

    def shell(r, z):
        return np.stack([r * dx, r * dy, -z * depth], axis=1)

    p_in = shell(r_in, z_in)
    p_out = shell(r_out, z_out)
    # lift the outer rim into a shallow cone: at the equator the transmural
    # direction would otherwise run inside the z=0 plane and the square-grid
    # corner cells would produce exactly flat tets
    rim_lift = 0.6 * wall * (1.0 - depth) ** 2

    n_surf = (n + 1) * (n + 1)
    svals = np.linspace(0.0, 1.0, K + 1)
    wall_pts = np.concatenate(
        [(1 - s) * p_in + s * (p_out + np.outer(rim_lift, [0, 0, 1.0])) for s in svals]
    )

    def wid(i, j, k):
        return k * n_surf + i * (n + 1) + j

    wall_hexes = []
    for i in range(n):
        for j in range(n):
            for k in range(K):
                wall_hexes.append(
                    [
                        wid(i, j, k), wid(i + 1, j, k), wid(i, j + 1, k), wid(i + 1, j + 1, k),
                        wid(i, j, k + 1), wid(i + 1, j, k + 1), wid(i, j + 1, k + 1),
                        wid(i + 1, j + 1, k + 1),
                    ]
                )

    # lid: same square-to-disk parametrization scaled to the inner equator,
    # extruded upward; its z=0 rim nodes coincide with the wall's inner
    # equator nodes and are merged by index below.
    lid_level = np.stack([r_in * dx, r_in * dy, np.zeros_like(dx)], axis=1)
    lid_pts = np.concatenate(
        [lid_level + np.array([0.0, 0.0, lid * l / L]) for l in range(L + 1)]
    )
    off = len(wall_pts)

    def lid_id(i, j, l):
        return off + l * n_surf + i * (n + 1) + j

    lid_hexes = []
    for i in range(n):
        for j in range(n):
            for l in range(L):
                lid_hexes.append(
                    [
                        lid_id(i, j, l), lid_id(i + 1, j, l), lid_id(i, j + 1, l),
                        lid_id(i + 1, j + 1, l),
                        lid_id(i, j, l + 1), lid_id(i + 1, j, l + 1), lid_id(i, j + 1, l + 1),
                        lid_id(i + 1, j + 1, l + 1),
                    ]
                )

    pts = np.concatenate([wall_pts, lid_pts])
    hexes = np.array(wall_hexes + lid_hexes, dtype=np.int64)

    # provenance: wall nodes carry (rim?, k-level); lid nodes carry (l-level)
    onb = (np.abs(U.reshape(-1)) == 1.0) | (np.abs(V.reshape(-1)) == 1.0)
    node_rim = np.concatenate([np.tile(onb, K + 1), np.tile(onb, L + 1)])
    node_k = np.concatenate(
        [np.repeat(np.arange(K + 1), n_surf), np.full((L + 1) * n_surf, -1)]
    )
    node_l = np.concatenate(
        [np.full((K + 1) * n_surf, -1), np.repeat(np.arange(L + 1), n_surf)]
    )

    # merge lid bottom rim (l=0, square boundary) with wall inner equator
    # (k=0, square boundary): identical coordinates by construction
    merge = np.arange(len(pts), dtype=np.int64)
    for flat in np.nonzero(onb)[0]:
        merge[off + flat] = flat      # lid l=0 node -> wall k=0 node
        node_l[flat] = 0              # merged node doubles as lid l=0
    tets = merge[_tets_from_hexes(hexes)]
    used = np.unique(tets)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    tets = remap[tets]
    pts = pts[used]
    node_rim, node_k, node_l = node_rim[used], node_k[used], node_l[used]
    tets = _orient_positive(pts, tets)

    n_wall_cells = len(wall_hexes) * 6
    cell_labels = np.concatenate(
        [
            np.ones(n_wall_cells, dtype=np.int64),
            np.full(len(lid_hexes) * 6, 2, dtype=np.int64),
        ]
    )

    registry = LabelRegistry(
        cell={"myocardium": 1, "caps": 2},
        facet={"endo": 1, "epi": 2, "base-ring": 3, "endo-cap": 4, "cap-outer": 5, "apex": 6},
    )
    mesh = LabeledMesh(pts, tets, cell_labels, registry=registry)

    owner_region = cell_labels[mesh.facet_cells]
    lab = np.zeros(len(mesh.facets), dtype=np.int64)
    for f, tri in enumerate(mesh.facets):
        if owner_region[f] == 2:  # lid cell
            if np.all(node_l[tri] == 0):
                lab[f] = 4        # cavity-facing underside
            else:
                lab[f] = 5
        else:
            kk = node_k[tri]
            if np.all(kk == 0):
                lab[f] = 1        # endocardium
            elif np.all(kk == K):
                lab[f] = 2        # epicardium
            elif np.all(node_rim[tri]):
                lab[f] = 3        # base annulus (shallow cone)
            else:
                raise GeometryError("unclassifiable wall boundary facet")
    # apex patch: lowest slice of the epicardium, used as a Dirichlet anchor
    # for the apicobasal distance field
    c = pts[mesh.facets].mean(axis=1)
    epi = lab == 2
    zmin = c[epi, 2].min()
    apex = epi & (c[:, 2] < zmin + 0.07 * (0.0 - zmin))
    if not np.any(apex):
        apex = epi & (c[:, 2] <= np.partition(c[epi, 2], 2)[2])
    lab[apex] = 6
    mesh.facet_labels[:] = lab
    return mesh.validate()
