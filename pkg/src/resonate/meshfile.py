"""Line-oriented mesh file format with bit-exact round trip.

Layout::

    resonate-mesh 1
    <n_vertices> <n_triangles> <n_tagged_edges>
    x y                  (vertex lines; floats via repr, exact round trip)
    i j k region_name    (triangle lines)
    i j tag_name         (tagged edge lines)
"""

from __future__ import annotations

import numpy as np

from .meshing import Mesh, REGION_NAMES, TAG_NAMES

_MAGIC = "resonate-mesh 1"


def save_mesh(mesh: Mesh, path):
    lines = [_MAGIC,
             f"{len(mesh.vertices)} {len(mesh.triangles)} {len(mesh.tagged_edges)}"]
    for x, y in mesh.vertices:
        lines.append(f"{x!r} {y!r}")
    for (i, j, k), reg in zip(mesh.triangles, mesh.tri_region):
        lines.append(f"{i} {j} {k} {REGION_NAMES[reg]}")
    for (i, j), tag in zip(mesh.tagged_edges, mesh.edge_tags):
        lines.append(f"{i} {j} {TAG_NAMES[tag]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a resonate mesh file")
    nv, nt, ne = (int(s) for s in lines[1].split())
    row = 2
    verts = np.empty((nv, 2))
    for i in range(nv):
        a, b = lines[row + i].split()
        verts[i] = float(a), float(b)
    row += nv
    tris = np.empty((nt, 3), dtype=np.int32)
    regs = np.empty(nt, dtype=np.int16)
    for i in range(nt):
        a, b, c, name = lines[row + i].split()
        tris[i] = int(a), int(b), int(c)
        regs[i] = REGION_NAMES.index(name)
    row += nt
    edges = np.empty((ne, 2), dtype=np.int32)
    tags = np.empty(ne, dtype=np.int16)
    for i in range(ne):
        a, b, name = lines[row + i].split()
        edges[i] = int(a), int(b)
        tags[i] = TAG_NAMES.index(name)
    return Mesh(verts, tris, regs, edges, tags)
