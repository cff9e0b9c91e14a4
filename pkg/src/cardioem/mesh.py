"""Labeled tetrahedral meshes.

A :class:`LabeledMesh` stores vertices, positively oriented tets, per-cell
region labels and explicitly stored boundary facets with per-facet surface
labels.  Boundary facets are extracted once at construction, oriented
outward from their adjacent tet, and kept immutable afterwards so that
every module sees bit-identical normals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cardioem.errors import GeometryError, TopologyError

# Local faces of tet (v0,v1,v2,v3), ordered so the triangle normal points
# outward when the tet is positively oriented.
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)

UNLABELED = 0


@dataclass
class LabelRegistry:
    """Maps symbolic region/surface names to integer labels.

    ``cell_groups``/``facet_groups`` name unions of plain labels (e.g.
    ``ring`` covering both x-extreme surfaces of the slab).
    """

    cell: dict[str, int] = field(default_factory=dict)
    facet: dict[str, int] = field(default_factory=dict)
    cell_groups: dict[str, list] = field(default_factory=dict)
    facet_groups: dict[str, list] = field(default_factory=dict)

    def _resolve(self, key, table, groups, what):
        if isinstance(key, str):
            if key in groups:
                out = []
                for k in groups[key]:
                    out.extend(self._resolve(k, table, groups, what))
                return out
            try:
                return [table[key]]
            except KeyError:
                raise KeyError(
                    f"unknown {what} label {key!r}; known: {sorted(table) + sorted(groups)}"
                )
        return [int(key)]

    def cell_id(self, key):
        ids = self._resolve(key, self.cell, self.cell_groups, "region")
        if len(ids) != 1:
            raise KeyError(f"region {key!r} is a group; use cell_ids")
        return ids[0]

    def facet_id(self, key):
        ids = self._resolve(key, self.facet, self.facet_groups, "surface")
        if len(ids) != 1:
            raise KeyError(f"surface {key!r} is a group; use facet_ids")
        return ids[0]

    def cell_ids(self, keys):
        if isinstance(keys, (str, int, np.integer)):
            keys = [keys]
        out = set()
        for k in keys:
            out.update(self._resolve(k, self.cell, self.cell_groups, "region"))
        return sorted(out)

    def facet_ids(self, keys):
        if isinstance(keys, (str, int, np.integer)):
            keys = [keys]
        out = set()
        for k in keys:
            out.update(self._resolve(k, self.facet, self.facet_groups, "surface"))
        return sorted(out)


def tet_volumes(vertices, tets):
    """Signed volumes of tets (positive for the canonical orientation)."""
    p = vertices[tets]
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    c = p[:, 3] - p[:, 0]
    return np.einsum("ij,ij->i", np.cross(a, b), c) / 6.0


def triangle_areas_normals(vertices, tris):
    """Areas and unit normals of triangles, oriented by vertex order."""
    p = vertices[tris]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norms = np.linalg.norm(n, axis=1)
    return 0.5 * norms, n / norms[:, None]


def extract_boundary(tets):
    """Return (facets, owner_cells) for faces that belong to exactly one tet.

    Facet vertex order follows the outward-oriented local face of the owner,
    so the geometric normal of the returned triangle points out of the mesh.
    """
    ncell = tets.shape[0]
    faces = tets[:, _TET_FACES.reshape(-1)].reshape(ncell * 4, 3)
    keys = np.sort(faces, axis=1)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    ks = keys[order]
    new = np.ones(len(ks), dtype=bool)
    new[1:] = np.any(ks[1:] != ks[:-1], axis=1)
    # a face is boundary iff its sorted key occurs exactly once
    grp = np.cumsum(new) - 1
    counts = np.bincount(grp)
    boundary_sorted = counts[grp] == 1
    boundary = np.zeros(len(ks), dtype=bool)
    boundary[order] = boundary_sorted
    idx = np.nonzero(boundary)[0]
    return faces[idx], idx // 4


@dataclass
class LabeledMesh:
    """Tetrahedral mesh with subdomain and boundary-surface labels.

    Immutable after construction; safe to share read-only.
    """

    vertices: np.ndarray          # (n_vert, 3) float, meters
    tets: np.ndarray              # (n_cell, 4) int
    cell_labels: np.ndarray       # (n_cell,) int
    facets: np.ndarray = None     # (n_bf, 3) int, outward oriented
    facet_labels: np.ndarray = None   # (n_bf,) int
    facet_cells: np.ndarray = None    # (n_bf,) owning cell index
    registry: LabelRegistry = field(default_factory=LabelRegistry)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.tets = np.asarray(self.tets, dtype=np.int64)
        self.cell_labels = np.asarray(self.cell_labels, dtype=np.int64)
        vols = tet_volumes(self.vertices, self.tets)
        bad = np.nonzero(vols <= 0.0)[0]
        if bad.size:
            raise GeometryError(
                f"non-positive tet volume in cell {bad[0]} (volume {vols[bad[0]]:.3e}); "
                f"{bad.size} offending cell(s) total"
            )
        self._volumes = vols
        if self.facets is None:
            self.facets, self.facet_cells = extract_boundary(self.tets)
            self.facet_labels = np.full(len(self.facets), UNLABELED, dtype=np.int64)
        else:
            self.facets = np.asarray(self.facets, dtype=np.int64)
            self.facet_labels = np.asarray(self.facet_labels, dtype=np.int64)
            self.facet_cells = np.asarray(self.facet_cells, dtype=np.int64)
        areas, normals = triangle_areas_normals(self.vertices, self.facets)
        self._facet_areas = areas
        self._facet_normals = normals
        self._edges = None

    # -- basic queries ---------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.tets)

    def cell_volumes(self):
        return self._volumes

    def facet_areas(self):
        return self._facet_areas

    def facet_normals(self):
        return self._facet_normals

    def edges(self):
        """Unique mesh edges (sorted vertex pairs), plus cell->edge map."""
        if self._edges is None:
            pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
            raw = np.stack([self.tets[:, p] for p in pairs], axis=1).reshape(-1, 2)
            raw = np.sort(raw, axis=1)
            uniq, inv = np.unique(raw, axis=0, return_inverse=True)
            self._edges = (uniq, inv.reshape(self.n_cells, 6))
        return self._edges

    def region_cells(self, region):
        ids = self.registry.cell_ids(region)
        return np.nonzero(np.isin(self.cell_labels, ids))[0]

    def surface_facets(self, surface):
        ids = self.registry.facet_ids(surface)
        return np.nonzero(np.isin(self.facet_labels, ids))[0]

    def validate(self):
        """Check registry-backed invariants; raise on violation."""
        for name, lab in self.registry.cell.items():
            if not np.any(self.cell_labels == lab):
                raise GeometryError(f"region {name!r} (label {lab}) maps to no cells")
        for name, lab in self.registry.facet.items():
            if not np.any(self.facet_labels == lab):
                raise GeometryError(f"surface {name!r} (label {lab}) maps to no facets")
        facets, cells = extract_boundary(self.tets)
        if len(facets) != len(self.facets):
            raise TopologyError(
                f"stored boundary facet count {len(self.facets)} != combinatorial {len(facets)}"
            )
        return self


def with_vertices(mesh: LabeledMesh, new_vertices) -> LabeledMesh:
    """Same connectivity and labels on moved vertex coordinates."""
    return LabeledMesh(
        np.asarray(new_vertices, dtype=float),
        mesh.tets,
        mesh.cell_labels,
        facets=mesh.facets,
        facet_labels=mesh.facet_labels,
        facet_cells=mesh.facet_cells,
        registry=mesh.registry,
    )


def mesh_volume(mesh, region=None):
    """Volume of a labeled region (or the whole mesh), exact for affine tets."""
    vols = mesh.cell_volumes()
    if region is None:
        return float(vols.sum())
    cells = mesh.region_cells(region)
    if cells.size == 0:
        raise KeyError(f"region {region!r} selects no cells")
    return float(vols[cells].sum())


def boundary_facets(mesh, surface):
    """Facets of a labeled surface with outward unit normals.

    Returns (facet_vertex_triples, unit_normals, areas, owner_cells).
    Normals point outward from the adjacent tet.
    """
    idx = mesh.surface_facets(surface)
    if idx.size == 0:
        raise KeyError(f"surface {surface!r} selects no facets")
    return (
        mesh.facets[idx],
        mesh.facet_normals()[idx],
        mesh.facet_areas()[idx],
        mesh.facet_cells[idx],
    )


def surface_is_closed(mesh, surface):
    """True if every edge of the surface is shared by exactly two facets."""
    idx = mesh.surface_facets(surface)
    tris = mesh.facets[idx]
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def cell_adjacency(mesh):
    """Pairs of cells sharing a face, as an (n_pairs, 2) array."""
    ncell = mesh.n_cells
    faces = mesh.tets[:, _TET_FACES.reshape(-1)].reshape(ncell * 4, 3)
    keys = np.sort(faces, axis=1)
    owner = np.repeat(np.arange(ncell), 4)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    ks = keys[order]
    ow = owner[order]
    same = np.all(ks[1:] == ks[:-1], axis=1)
    i = np.nonzero(same)[0]
    return np.stack([ow[i], ow[i + 1]], axis=1)
