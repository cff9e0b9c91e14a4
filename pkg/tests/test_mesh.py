"""Mesh layer: labels, volumes, normals, I/O round trips."""

import numpy as np
import pytest

from cardioem.errors import FormatError, GeometryError
from cardioem.geometry import GeometrySpec, build_idealized_geometry
from cardioem.mesh import (
    LabeledMesh,
    LabelRegistry,
    boundary_facets,
    mesh_volume,
    surface_is_closed,
)
from cardioem.mesh_io import load_mesh, write_mesh

REF_TET_GMSH = """$MeshFormat
4.1 0 8
$EndMeshFormat
$Entities
0 0 0 1
1 0 0 0 1 1 1 0 0
$EndEntities
$Nodes
1 4 1 4
3 1 0 4
1
2
3
4
0 0 0
1 0 0
0 1 0
0 0 1
$EndNodes
$Elements
1 1 1 1
3 1 4 1
1 1 2 3 4
$EndElements
"""


def _unit_cube_gmsh(flip_one_tet=False):
    """Six-tet unit cube with all six faces physically tagged."""
    spec = GeometrySpec("slab", {"lx": 1.0, "ly": 1.0, "lz": 1.0}, resolution=1.0)
    m = build_idealized_geometry(spec)
    lines = ["$MeshFormat", "4.1 0 8", "$EndMeshFormat", "$PhysicalNames", "7"]
    names = ["xlo", "xhi", "ylo", "yhi", "zlo", "zhi"]
    for i, n in enumerate(names):
        lines.append(f'2 {i + 1} "{n}"')
    lines.append('3 10 "cube"')
    lines.append("$EndPhysicalNames")
    # entities: 6 surfaces + 1 volume
    lines += ["$Entities", "0 0 6 1"]
    for i in range(6):
        lines.append(f"{i + 1} 0 0 0 1 1 1 1 {i + 1} 0")
    lines.append("1 0 0 0 1 1 1 1 10 0")
    lines.append("$EndEntities")
    nv = m.n_vertices
    lines += ["$Nodes", f"1 {nv} 1 {nv}", f"3 1 0 {nv}"]
    lines += [str(i + 1) for i in range(nv)]
    lines += [f"{p[0]} {p[1]} {p[2]}" for p in m.vertices]
    lines.append("$EndNodes")

    def face_of(c):
        for ax, lo_name in ((0, 0), (1, 2), (2, 4)):
            if abs(c[ax]) < 1e-12:
                return lo_name + 1
            if abs(c[ax] - 1.0) < 1e-12:
                return lo_name + 2
        raise AssertionError

    centers = m.vertices[m.facets].mean(axis=1)
    blocks = {}
    for f, c in zip(m.facets, centers):
        blocks.setdefault(face_of(c), []).append(f)
    nelem = m.n_cells + len(m.facets)
    lines += ["$Elements", f"{len(blocks) + 1} {nelem} 1 {nelem}"]
    eid = 1
    for ent, tris in sorted(blocks.items()):
        lines.append(f"2 {ent} 2 {len(tris)}")
        for t in tris:
            lines.append(f"{eid} {t[0] + 1} {t[1] + 1} {t[2] + 1}")
            eid += 1
    lines.append(f"3 1 4 {m.n_cells}")
    for i, t in enumerate(m.tets):
        t = list(t)
        if flip_one_tet and i == 0:
            t[0], t[1] = t[1], t[0]
        lines.append(f"{eid} {t[0] + 1} {t[1] + 1} {t[2] + 1} {t[3] + 1}")
        eid += 1
    lines.append("$EndElements")
    return "\n".join(lines) + "\n"


class TestLoadMesh:
    def test_single_reference_tet(self, tmp_path):
        p = tmp_path / "ref.msh"
        p.write_text(REF_TET_GMSH)
        m = load_mesh(p, "gmsh-ascii")
        assert m.n_cells == 1
        assert len(m.facets) == 4
        assert mesh_volume(m) == pytest.approx(1.0 / 6.0, abs=1e-15)

    def test_unit_cube_six_tagged_faces(self, tmp_path):
        p = tmp_path / "cube.msh"
        p.write_text(_unit_cube_gmsh())
        m = load_mesh(p, "gmsh-ascii")
        assert mesh_volume(m, "cube") == pytest.approx(1.0, abs=1e-14)
        for name in ("xlo", "xhi", "ylo", "yhi", "zlo", "zhi"):
            assert len(m.surface_facets(name)) >= 1

    def test_negative_tet_is_geometry_error(self, tmp_path):
        p = tmp_path / "bad.msh"
        p.write_text(_unit_cube_gmsh(flip_one_tet=True))
        with pytest.raises(GeometryError, match="cell"):
            load_mesh(p, "gmsh-ascii")

    def test_parse_failure_reports_line(self, tmp_path):
        p = tmp_path / "trunc.msh"
        p.write_text("$MeshFormat\n4.1 0 8\n$EndMeshFormat\n$Nodes\n1 4 1 4\n")
        with pytest.raises(FormatError, match="line"):
            load_mesh(p, "gmsh-ascii")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_mesh(tmp_path / "nope.msh", "gmsh-ascii")


class TestVolumes:
    def test_unit_cube(self):
        spec = GeometrySpec("slab", {"lx": 1.0, "ly": 1.0, "lz": 1.0}, resolution=0.5)
        m = build_idealized_geometry(spec)
        assert mesh_volume(m) == pytest.approx(1.0, abs=1e-13)

    def test_scaled_cube(self):
        spec = GeometrySpec("slab", {"lx": 2.0, "ly": 2.0, "lz": 2.0}, resolution=1.0)
        m = build_idealized_geometry(spec)
        assert mesh_volume(m) == pytest.approx(8.0, abs=1e-12)

    def test_reference_tet(self):
        reg = LabelRegistry(cell={"all": 1})
        m = LabeledMesh(
            np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]),
            np.array([[0, 1, 2, 3]]),
            np.array([1]),
            registry=reg,
        )
        assert mesh_volume(m, "all") == pytest.approx(1 / 6, abs=1e-16)

    def test_region_partition_sums_to_total(self):
        spec = GeometrySpec("toy-two-chamber", resolution=1.2e-2)
        m = build_idealized_geometry(spec)
        total = mesh_volume(m)
        parts = sum(mesh_volume(m, name) for name in m.registry.cell)
        assert parts == pytest.approx(total, rel=1e-12)

    def test_unknown_label(self):
        spec = GeometrySpec("slab", resolution=1e-3)
        m = build_idealized_geometry(spec)
        with pytest.raises(KeyError):
            mesh_volume(m, "nonexistent")


class TestBoundaryFacets:
    def test_cube_top_normals(self):
        spec = GeometrySpec("slab", {"lx": 1.0, "ly": 1.0, "lz": 1.0}, resolution=0.5)
        m = build_idealized_geometry(spec)
        _, normals, _, _ = boundary_facets(m, "epi")
        assert np.allclose(normals, [0.0, 0.0, 1.0], atol=1e-14)

    def test_slab_endo_epi_antiparallel(self):
        m = build_idealized_geometry(GeometrySpec("slab", resolution=1e-3))
        _, n_endo, _, _ = boundary_facets(m, "endo")
        _, n_epi, _, _ = boundary_facets(m, "epi")
        assert np.allclose(n_endo.mean(axis=0) + n_epi.mean(axis=0), 0.0, atol=1e-14)

    def test_closed_surface_normal_integral_vanishes(self):
        m = build_idealized_geometry(GeometrySpec("ellipsoid-chamber", resolution=8e-3))
        _, normals, areas, _ = boundary_facets(m, ["endo", "endo-cap"])
        assert surface_is_closed(m, ["endo", "endo-cap"])
        integral = (normals * areas[:, None]).sum(axis=0)
        assert np.linalg.norm(integral) <= 1e-10 * areas.sum()

    def test_unknown_surface(self):
        m = build_idealized_geometry(GeometrySpec("slab", resolution=1e-3))
        with pytest.raises(KeyError):
            boundary_facets(m, "bogus")


class TestIdealizedGeometries:
    def test_slab_labels(self):
        m = build_idealized_geometry(
            GeometrySpec("slab", {"lx": 10e-3, "ly": 10e-3, "lz": 2e-3}, resolution=1e-3)
        )
        assert np.all(m.cell_labels == m.registry.cell["myocardium"])
        assert len(m.surface_facets("endo")) > 0
        assert len(m.surface_facets("epi")) > 0
        assert len(m.surface_facets("ring")) > 0

    def test_ellipsoid_chamber_watertight(self):
        m = build_idealized_geometry(GeometrySpec("ellipsoid-chamber", resolution=8e-3))
        assert surface_is_closed(m, ["endo", "endo-cap"])

    def test_toy_two_chamber_insulated_regions(self):
        m = build_idealized_geometry(GeometrySpec("toy-two-chamber", resolution=1.2e-2))
        from cardioem.mesh import cell_adjacency

        adj = cell_adjacency(m)
        la = m.cell_labels[adj[:, 0]]
        lb = m.cell_labels[adj[:, 1]]
        atr = m.registry.cell["atrium-myo"]
        ven = m.registry.cell["ventricle-myo"]
        direct = ((la == atr) & (lb == ven)) | ((la == ven) & (lb == atr))
        assert not np.any(direct)
        assert surface_is_closed(m, "endo-atrium")
        assert surface_is_closed(m, "endo-ventricle")

    def test_toy_four_chamber_has_four_closed_cavities(self):
        m = build_idealized_geometry(GeometrySpec("toy-four-chamber", resolution=1.2e-2))
        for s in ("endo-la", "endo-ra", "endo-lv", "endo-rv"):
            assert surface_is_closed(m, s), s

    def test_resolution_coarser_than_wall_refused(self):
        with pytest.raises(GeometryError, match="resolution"):
            build_idealized_geometry(
                GeometrySpec("ellipsoid-chamber", {"wall_m": 4e-3}, resolution=2e-2)
            )

    def test_bad_kind(self):
        with pytest.raises(GeometryError):
            GeometrySpec("pyramid", resolution=1e-3)


class TestRoundTrip:
    @pytest.mark.parametrize(
        "kind,res",
        [("slab", 1e-3), ("toy-two-chamber", 1.2e-2), ("ellipsoid-chamber", 8e-3)],
    )
    def test_vtk_round_trip_labels_exact(self, tmp_path, kind, res):
        m = build_idealized_geometry(GeometrySpec(kind, resolution=res))
        p = tmp_path / "m.vtk"
        write_mesh(m, p)
        m2 = load_mesh(p, "vtk-legacy-ascii")
        assert np.array_equal(m.tets, m2.tets)
        assert np.array_equal(m.cell_labels, m2.cell_labels)
        assert np.array_equal(np.sort(m.facets, axis=1), np.sort(m2.facets, axis=1))
        key = lambda mm: {tuple(sorted(f)): l for f, l in zip(mm.facets, mm.facet_labels)}
        assert key(m) == key(m2)
        assert m.registry.cell == m2.registry.cell
        assert m.registry.facet == m2.registry.facet
