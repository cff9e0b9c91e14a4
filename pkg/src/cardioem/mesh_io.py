"""Mesh readers/writers: Gmsh ASCII v4.1 and VTK legacy ASCII.

Both formats are parsed line by line without third-party libraries.  The
VTK writer stores tets and boundary triangles in one unstructured grid
with integer CELL_DATA arrays ``region`` (tets; -1 on triangles) and
``surface`` (triangles; -1 on tets).  Symbolic label names travel in a
JSON sidecar ``<path>.labels.json``; plain files from other tools load
with auto-generated names.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from cardioem.errors import FormatError
from cardioem.mesh import LabeledMesh, LabelRegistry

FORMATS = ("gmsh-ascii", "vtk-legacy-ascii")


def load_mesh(path, format=None) -> LabeledMesh:
    """Read a labeled tet mesh; format inferred from suffix when omitted."""
    path = Path(path)
    if format is None:
        format = "gmsh-ascii" if path.suffix == ".msh" else "vtk-legacy-ascii"
    if format not in FORMATS:
        raise FormatError(f"unknown mesh format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise FormatError("mesh file not found", path=str(path))
    if format == "gmsh-ascii":
        return _read_gmsh(path)
    return _read_vtk(path)


def write_mesh(mesh: LabeledMesh, path) -> Path:
    """Write mesh + labels as VTK legacy ASCII (with a JSON name sidecar)."""
    path = Path(path)
    ncell = mesh.n_cells
    nbf = len(mesh.facets)
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("cardioem labeled mesh\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_vertices} double\n")
        for p in mesh.vertices:
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        f.write(f"CELLS {ncell + nbf} {5 * ncell + 4 * nbf}\n")
        for t in mesh.tets:
            f.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        for t in mesh.facets:
            f.write(f"3 {t[0]} {t[1]} {t[2]}\n")
        f.write(f"CELL_TYPES {ncell + nbf}\n")
        f.write("\n".join(["10"] * ncell + ["5"] * nbf) + "\n")
        f.write(f"CELL_DATA {ncell + nbf}\n")
        f.write("SCALARS region int 1\nLOOKUP_TABLE default\n")
        f.write("\n".join(str(int(v)) for v in mesh.cell_labels))
        f.write("\n" + "\n".join(["-1"] * nbf) + "\n")
        f.write("SCALARS surface int 1\nLOOKUP_TABLE default\n")
        f.write("\n".join(["-1"] * ncell))
        f.write("\n" + "\n".join(str(int(v)) for v in mesh.facet_labels) + "\n")
    sidecar = {
        "regions": {k: int(v) for k, v in mesh.registry.cell.items()},
        "surfaces": {k: int(v) for k, v in mesh.registry.facet.items()},
        "region_groups": mesh.registry.cell_groups,
        "surface_groups": mesh.registry.facet_groups,
    }
    Path(str(path) + ".labels.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    return path


def write_cell_vectors_vtk(mesh: LabeledMesh, path, vector_fields, scalar_fields=None):
    """Write per-cell vector (and optional scalar) arrays on the tet mesh."""
    path = Path(path)
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\ncardioem cell fields\nASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_vertices} double\n")
        for p in mesh.vertices:
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        f.write(f"CELLS {mesh.n_cells} {5 * mesh.n_cells}\n")
        for t in mesh.tets:
            f.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        f.write(f"CELL_TYPES {mesh.n_cells}\n")
        f.write("\n".join(["10"] * mesh.n_cells) + "\n")
        f.write(f"CELL_DATA {mesh.n_cells}\n")
        for name, arr in vector_fields.items():
            f.write(f"VECTORS {name} double\n")
            for v in np.asarray(arr):
                f.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for name, arr in (scalar_fields or {}).items():
            f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            f.write("\n".join(f"{float(v):.17g}" for v in np.asarray(arr)) + "\n")
    return path


def write_point_fields_vtk(mesh: LabeledMesh, path, scalars=None, vectors=None):
    """Write nodal fields (P1 vertex data) on the tet mesh."""
    path = Path(path)
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\ncardioem point fields\nASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_vertices} double\n")
        for p in mesh.vertices:
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        f.write(f"CELLS {mesh.n_cells} {5 * mesh.n_cells}\n")
        for t in mesh.tets:
            f.write(f"4 {t[0]} {t[1]} {t[2]} {t[3]}\n")
        f.write(f"CELL_TYPES {mesh.n_cells}\n")
        f.write("\n".join(["10"] * mesh.n_cells) + "\n")
        f.write(f"POINT_DATA {mesh.n_vertices}\n")
        for name, arr in (scalars or {}).items():
            f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            f.write("\n".join(f"{float(v):.17g}" for v in np.asarray(arr)) + "\n")
        for name, arr in (vectors or {}).items():
            f.write(f"VECTORS {name} double\n")
            for v in np.asarray(arr):
                f.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
    return path


# ---------------------------------------------------------------------------
# Gmsh ASCII v4.1


class _Lines:
    def __init__(self, path):
        self.path = str(path)
        with open(path) as f:
            self.lines = f.read().splitlines()
        self.i = 0

    def next(self):
        if self.i >= len(self.lines):
            raise FormatError("unexpected end of file", path=self.path, line=self.i + 1)
        line = self.lines[self.i]
        self.i += 1
        return line

    def error(self, msg):
        raise FormatError(msg, path=self.path, line=self.i)


def _read_gmsh(path) -> LabeledMesh:
    lx = _Lines(path)
    physical = {}          # (dim, tag) -> name
    entity_phys = {}       # (dim, entity_tag) -> physical tag
    nodes = {}
    tets, tet_ent = [], []
    tris, tri_ent = [], []

    while lx.i < len(lx.lines):
        line = lx.next().strip()
        if not line.startswith("$"):
            continue
        section = line[1:]
        if section == "MeshFormat":
            parts = lx.next().split()
            if not parts or not parts[0].startswith("4"):
                lx.error(f"unsupported Gmsh format version {parts[:1]}; need 4.x ASCII")
            if parts[1] != "0":
                lx.error("binary Gmsh files are not supported")
        elif section == "PhysicalNames":
            n = int(lx.next())
            for _ in range(n):
                parts = lx.next().split(maxsplit=2)
                try:
                    dim, tag = int(parts[0]), int(parts[1])
                    name = parts[2].strip().strip('"')
                except (IndexError, ValueError):
                    lx.error("malformed $PhysicalNames entry")
                physical[(dim, tag)] = name
        elif section == "Entities":
            counts = [int(v) for v in lx.next().split()]
            if len(counts) != 4:
                lx.error("malformed $Entities header")
            np_, nc, ns, nv = counts
            for _ in range(np_):
                lx.next()
            for dim, count, skip_box in ((1, nc, 6), (2, ns, 6), (3, nv, 6)):
                for _ in range(count):
                    parts = lx.next().split()
                    try:
                        tag = int(parts[0])
                        nphys = int(parts[1 + skip_box])
                        ptags = [int(v) for v in parts[2 + skip_box : 2 + skip_box + nphys]]
                    except (IndexError, ValueError):
                        lx.error(f"malformed dim-{dim} entity line")
                    if ptags:
                        entity_phys[(dim, tag)] = ptags[0]
        elif section == "Nodes":
            header = lx.next().split()
            nblocks = int(header[0])
            for _ in range(nblocks):
                bh = lx.next().split()
                try:
                    nnodes = int(bh[3])
                except (IndexError, ValueError):
                    lx.error("malformed $Nodes block header")
                tags = [int(lx.next()) for _ in range(nnodes)]
                for t in tags:
                    parts = lx.next().split()
                    if len(parts) < 3:
                        lx.error("malformed node coordinate line")
                    nodes[t] = [float(parts[0]), float(parts[1]), float(parts[2])]
        elif section == "Elements":
            header = lx.next().split()
            nblocks = int(header[0])
            for _ in range(nblocks):
                bh = lx.next().split()
                try:
                    edim, etag, etype, nelem = (int(v) for v in bh[:4])
                except (IndexError, ValueError):
                    lx.error("malformed $Elements block header")
                for _ in range(nelem):
                    parts = [int(v) for v in lx.next().split()]
                    conn = parts[1:]
                    if etype == 4:
                        if len(conn) != 4:
                            lx.error("tet element with wrong node count")
                        tets.append(conn)
                        tet_ent.append((edim, etag))
                    elif etype == 2:
                        if len(conn) != 3:
                            lx.error("triangle element with wrong node count")
                        tris.append(conn)
                        tri_ent.append((edim, etag))
                    # other element types (points, lines) are ignored
        elif section.startswith("End"):
            continue
        else:
            # skip unknown section until its End marker
            end = "$End" + section
            while lx.i < len(lx.lines) and lx.lines[lx.i].strip() != end:
                lx.i += 1

    if not tets:
        raise FormatError("no tetrahedra found", path=str(path))
    tag_list = sorted(nodes)
    remap = {t: i for i, t in enumerate(tag_list)}
    verts = np.array([nodes[t] for t in tag_list])
    tet_arr = np.array([[remap[v] for v in t] for t in tets], dtype=np.int64)

    def phys_of(ent):
        return entity_phys.get(ent, 0)

    cell_labels = np.array([phys_of(e) for e in tet_ent], dtype=np.int64)

    registry = LabelRegistry()
    for (dim, tag), name in physical.items():
        if dim == 3:
            registry.cell[name] = tag
        elif dim == 2:
            registry.facet[name] = tag
    for lab in np.unique(cell_labels):
        if lab not in registry.cell.values():
            registry.cell[f"region_{lab}"] = int(lab)

    mesh = LabeledMesh(verts, tet_arr, cell_labels, registry=registry)

    # map tagged surface triangles onto boundary facets
    if tris:
        tri_arr = np.array([[remap[v] for v in t] for t in tris], dtype=np.int64)
        tri_labels = np.array([phys_of(e) for e in tri_ent], dtype=np.int64)
        key_to_facet = {tuple(sorted(f)): i for i, f in enumerate(mesh.facets)}
        for tri, lab in zip(tri_arr, tri_labels):
            i = key_to_facet.get(tuple(sorted(tri)))
            if i is not None:
                mesh.facet_labels[i] = lab
        for lab in np.unique(mesh.facet_labels):
            if lab and lab not in registry.facet.values():
                registry.facet[f"surface_{lab}"] = int(lab)
    return mesh


# ---------------------------------------------------------------------------
# VTK legacy ASCII


def _read_vtk(path) -> LabeledMesh:
    lx = _Lines(path)
    if "vtk datafile" not in lx.next().lower():
        lx.error("missing VTK header line")
    lx.next()                       # title
    if lx.next().strip().upper() != "ASCII":
        lx.error("only ASCII VTK legacy files are supported")
    if "UNSTRUCTURED_GRID" not in lx.next():
        lx.error("expected DATASET UNSTRUCTURED_GRID")

    def read_values(n, cast):
        vals = []
        while len(vals) < n:
            vals.extend(cast(v) for v in lx.next().split())
        if len(vals) != n:
            lx.error(f"expected exactly {n} values in block")
        return vals

    points = None
    conn = None
    types = None
    cell_data = {}
    while lx.i < len(lx.lines):
        line = lx.next().split()
        if not line:
            continue
        kw = line[0].upper()
        if kw == "POINTS":
            n = int(line[1])
            flat = read_values(3 * n, float)
            points = np.array(flat).reshape(n, 3)
        elif kw == "CELLS":
            ncell, total = int(line[1]), int(line[2])
            flat = read_values(total, int)
            conn = []
            i = 0
            for _ in range(ncell):
                cnt = flat[i]
                conn.append(flat[i + 1 : i + 1 + cnt])
                i += 1 + cnt
        elif kw == "CELL_TYPES":
            types = read_values(int(line[1]), int)
        elif kw == "CELL_DATA":
            n = int(line[1])
            while lx.i < len(lx.lines):
                peek = lx.lines[lx.i].split()
                if not peek:
                    lx.i += 1
                    continue
                if peek[0].upper() == "SCALARS":
                    lx.next()
                    name = peek[1]
                    lx.next()       # LOOKUP_TABLE
                    cell_data[name] = read_values(n, int)
                else:
                    break
        # other sections (POINT_DATA etc.) are ignored for mesh loading

    if points is None or conn is None or types is None:
        raise FormatError("incomplete VTK unstructured grid", path=str(path))
    tets, tris = [], []
    tet_rows, tri_rows = [], []
    for i, (c, t) in enumerate(zip(conn, types)):
        if t == 10:
            tets.append(c)
            tet_rows.append(i)
        elif t == 5:
            tris.append(c)
            tri_rows.append(i)
        else:
            raise FormatError(f"unsupported VTK cell type {t}", path=str(path))
    if not tets:
        raise FormatError("no tetrahedra found", path=str(path))
    tet_arr = np.array(tets, dtype=np.int64)

    region = cell_data.get("region")
    if region is not None:
        cell_labels = np.array([region[i] for i in tet_rows], dtype=np.int64)
    else:
        cell_labels = np.ones(len(tet_arr), dtype=np.int64)

    registry = LabelRegistry()
    sidecar = Path(str(path) + ".labels.json")
    if sidecar.exists():
        data = json.loads(sidecar.read_text())
        registry.cell.update({k: int(v) for k, v in data.get("regions", {}).items()})
        registry.facet.update({k: int(v) for k, v in data.get("surfaces", {}).items()})
        registry.cell_groups.update(data.get("region_groups", {}))
        registry.facet_groups.update(data.get("surface_groups", {}))
    for lab in np.unique(cell_labels):
        if int(lab) not in registry.cell.values():
            registry.cell[f"region_{lab}"] = int(lab)

    mesh = LabeledMesh(points, tet_arr, cell_labels, registry=registry)

    surface = cell_data.get("surface")
    if tris and surface is not None:
        key_to_facet = {tuple(sorted(f)): i for i, f in enumerate(mesh.facets)}
        for row, tri in zip(tri_rows, tris):
            lab = surface[row]
            if lab < 0:
                continue
            i = key_to_facet.get(tuple(sorted(tri)))
            if i is not None:
                mesh.facet_labels[i] = lab
        for lab in np.unique(mesh.facet_labels):
            if lab and int(lab) not in registry.facet.values():
                registry.facet[f"surface_{lab}"] = int(lab)
    return mesh
