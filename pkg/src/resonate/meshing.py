"""Conforming graded triangulations of cavities, resonators, dumbbells and
truncated scattering domains.

Unstructured parts (cavity interior, exterior annulus) come from a
force-equilibrium relaxation over a Delaunay triangulation with all boundary
nodes pinned; the thin neck is a mapped structured grid sharing its wall nodes
with the adjoining parts, so the junction arc is an exact set of mesh edges.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .geometry import CavitySpec, DumbbellSpec, GeometryError, ResonatorSpec

REGION_NAMES = ("cavity", "neck", "exterior", "absorber")
REG_CAVITY, REG_NECK, REG_EXTERIOR, REG_ABSORBER = range(4)

TAG_NAMES = ("dirichlet_wall", "absorber_outer", "interface_b_eps", "symmetry_plane")
TAG_DIRICHLET, TAG_ABSORBER_OUTER, TAG_INTERFACE, TAG_SYMMETRY = range(4)

MIN_ANGLE_DEG = 20.0


class MeshError(RuntimeError):
    """Mesh generation or refinement failed to meet quality bounds."""


@dataclass
class Mesh:
    """Conforming triangle mesh with per-triangle region tags and tagged edges."""

    vertices: np.ndarray        # (nv, 2) float64
    triangles: np.ndarray       # (nt, 3) int32, ccw
    tri_region: np.ndarray      # (nt,) int16
    tagged_edges: np.ndarray    # (ne, 2) int32
    edge_tags: np.ndarray       # (ne,) int16

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        self.tri_region = np.ascontiguousarray(self.tri_region, dtype=np.int16)
        self.tagged_edges = np.ascontiguousarray(self.tagged_edges, dtype=np.int32)
        self.edge_tags = np.ascontiguousarray(self.edge_tags, dtype=np.int16)

    # -- basic metrics ------------------------------------------------------

    def tri_coords(self):
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        p = self.tri_coords()
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        p = self.tri_coords()
        out = np.empty((len(self.triangles), 3))
        for i in range(3):
            out[:, i] = np.linalg.norm(p[:, (i + 1) % 3] - p[:, (i + 2) % 3], axis=1)
        return out

    def angles(self) -> np.ndarray:
        """Interior angles per triangle corner, degrees."""
        el = self.edge_lengths()
        out = np.empty_like(el)
        for i in range(3):
            a, b, c = el[:, i], el[:, (i + 1) % 3], el[:, (i + 2) % 3]
            cosv = np.clip((b**2 + c**2 - a**2) / (2 * b * c), -1.0, 1.0)
            out[:, i] = np.degrees(np.arccos(cosv))
        return out

    def centroids(self) -> np.ndarray:
        return self.tri_coords().mean(axis=1)

    def all_edges(self):
        """Unique undirected edges (k,2) and the triangle count adjacent to each."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def boundary_edges(self) -> np.ndarray:
        uniq, counts = self.all_edges()
        return uniq[counts == 1]

    def edges_with_tag(self, tag: int) -> np.ndarray:
        return self.tagged_edges[self.edge_tags == tag]

    def hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.vertices, self.triangles, self.tri_region,
                    self.tagged_edges, self.edge_tags):
            h.update(arr.tobytes())
        return h.hexdigest()

    def quality(self) -> "MeshQuality":
        ang = self.angles()
        el = self.edge_lengths()
        aspect = el.max(axis=1) / el.min(axis=1)
        h_max = {}
        for code, name in enumerate(REGION_NAMES):
            m = self.tri_region == code
            if np.any(m):
                h_max[name] = float(el[m].max())
        return MeshQuality(min_angle_deg=float(ang.min()),
                           max_aspect=float(aspect.max()),
                           h_max_per_region=h_max,
                           n_vertices=len(self.vertices),
                           n_triangles=len(self.triangles))

    def check(self):
        """Assert structural invariants: positive areas, conformity, tag sanity."""
        if np.any(self.areas() <= 0):
            raise MeshError("non-positive triangle area (orientation or degeneracy)")
        uniq, counts = self.all_edges()
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: edge shared by more than 2 triangles")
        q = self.quality()
        if q.min_angle_deg < MIN_ANGLE_DEG:
            raise MeshError(f"min angle {q.min_angle_deg:.2f} deg below {MIN_ANGLE_DEG}")
        tagged_bnd = {tuple(sorted(e)) for e, t in zip(self.tagged_edges, self.edge_tags)
                      if t in (TAG_DIRICHLET, TAG_ABSORBER_OUTER)}
        for e in self.boundary_edges():
            if tuple(e) not in tagged_bnd:
                raise MeshError(f"boundary edge {tuple(e)} carries no tag")
        return q


@dataclass(frozen=True)
class MeshQuality:
    min_angle_deg: float
    max_aspect: float
    h_max_per_region: dict
    n_vertices: int
    n_triangles: int


# ---------------------------------------------------------------------------
# structured reference meshes
# ---------------------------------------------------------------------------

def mesh_rectangle(width: float, height: float, h: float) -> Mesh:
    """Union-jack structured triangulation of [0,width] x [0,height]."""
    nx = max(1, round(width / h))
    ny = max(1, round(height / h))
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    xv, yv = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([xv.ravel(), yv.ravel()], axis=1)

    def vid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [[a, b, c], [a, c, d]]
            else:
                tris += [[a, b, d], [b, c, d]]
    tris = np.array(tris, dtype=np.int32)
    mesh = Mesh(verts, tris, np.zeros(len(tris), dtype=np.int16),
                np.zeros((0, 2), dtype=np.int32), np.zeros(0, dtype=np.int16))
    _tag_all_boundary(mesh, TAG_DIRICHLET)
    return mesh


def _tag_all_boundary(mesh: Mesh, tag: int):
    be = mesh.boundary_edges()
    mesh.tagged_edges = np.asarray(be, dtype=np.int32)
    mesh.edge_tags = np.full(len(be), tag, dtype=np.int16)


# ---------------------------------------------------------------------------
# relaxation mesher
# ---------------------------------------------------------------------------

def _loop_edges_present(tris, loop):
    edges = set()
    for tri in tris:
        for k in range(3):
            e = (tri[k], tri[(k + 1) % 3])
            edges.add((min(e), max(e)))
    for a, b in zip(loop, np.roll(loop, -1)):
        if (min(a, b), max(a, b)) not in edges:
            return False
    return True


def _relax_points(fixed, seeds, size_fn, inside_fn, project_fn, n_iter=90,
                  step=0.2, fscale=1.2):
    """Distmesh-style force relaxation; fixed points never move."""
    nfix = len(fixed)
    p = np.vstack([fixed, seeds])
    for _ in range(n_iter):
        tri = Delaunay(p)
        cells = tri.simplices
        keep = inside_fn(p[cells].mean(axis=1))
        cells = cells[keep]
        e = np.vstack([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]])
        e = np.unique(np.sort(e, axis=1), axis=0)
        bars = p[e[:, 0]] - p[e[:, 1]]
        L = np.linalg.norm(bars, axis=1)
        hbar = size_fn(0.5 * (p[e[:, 0]] + p[e[:, 1]]))
        L0 = hbar * fscale * math.sqrt(np.sum(L**2) / np.sum(hbar**2))
        F = np.maximum(L0 - L, 0.0)
        Fvec = (F / np.maximum(L, 1e-14))[:, None] * bars
        Ftot = np.zeros_like(p)
        np.add.at(Ftot, e[:, 0], Fvec)
        np.add.at(Ftot, e[:, 1], -Fvec)
        Ftot[:nfix] = 0.0
        p += step * Ftot
        p[nfix:] = project_fn(p[nfix:])
        move = np.max(np.linalg.norm(step * Ftot[nfix:], axis=1) /
                      np.maximum(size_fn(p[nfix:]), 1e-14)) if len(p) > nfix else 0.0
        if move < 5e-3:
            break
    return p


def _prune_near_fixed(p, nfix, size_fn, factor=0.55):
    """Drop free points crowding the pinned boundary or each other."""
    fixed, free = p[:nfix], p[nfix:]
    if len(free) == 0:
        return p
    tree = cKDTree(fixed)
    d, _ = tree.query(free)
    keep = d > factor * size_fn(free)
    free = free[keep]
    # symmetric-free dedupe pass among free points
    if len(free):
        tree2 = cKDTree(free)
        pairs = tree2.query_pairs(r=1e-9, output_type="ndarray")
        if len(pairs):
            drop = np.unique(pairs[:, 1])
            free = np.delete(free, drop, axis=0)
    return np.vstack([fixed, free])


def _seed_interior(bbox, size_fn, inside_fn, boundary_pts, seed):
    """Deterministic hierarchical seeding with tiny jitter to break cocircularity."""
    (x0, y0), (x1, y1) = bbox
    smax = float(np.max(size_fn(np.array([[0.5 * (x0 + x1), 0.5 * (y0 + y1)]]))))
    pitch = max(smax, 1e-6)
    pts = []
    cells = [(x0 + i * pitch, y0 + j * pitch, pitch)
             for i in range(int((x1 - x0) / pitch) + 2)
             for j in range(int((y1 - y0) / pitch) + 2)]
    while cells:
        nxt = []
        centers = np.array([(cx + 0.5 * s, cy + 0.5 * s) for cx, cy, s in cells])
        sizes = size_fn(centers)
        for (cx, cy, s), c, sz in zip(cells, centers, sizes):
            if s <= 1.05 * sz:
                pts.append(c)
            else:
                half = 0.5 * s
                nxt += [(cx, cy, half), (cx + half, cy, half),
                        (cx, cy + half, half), (cx + half, cy + half, half)]
        cells = nxt
    pts = np.array(pts) if pts else np.zeros((0, 2))
    if len(pts) == 0:
        return pts
    rng = np.random.default_rng(seed)
    pts = pts + rng.uniform(-0.08, 0.08, pts.shape) * size_fn(pts)[:, None]
    keep = inside_fn(pts)
    pts = pts[keep]
    if len(boundary_pts) and len(pts):
        tree = cKDTree(boundary_pts)
        d, idx = tree.query(pts)
        keep = d > 0.6 * size_fn(pts)
        pts = pts[keep]
    return pts


def _mesh_region(loops, size_fn, inside_fn, project_fn, seed):
    """Mesh a region bounded by pinned loops (lists of points, each a closed chain).

    Returns (vertices, triangles, loops_as_index_chains).
    """
    fixed = np.vstack([np.asarray(lp) for lp in loops])
    bbox = (fixed.min(axis=0) - 1e-9, fixed.max(axis=0) + 1e-9)
    seeds = _seed_interior(bbox, size_fn, inside_fn, fixed, seed)
    p = _relax_points(fixed, seeds, size_fn, inside_fn, project_fn)
    p = _prune_near_fixed(p, len(fixed), size_fn)
    nfix = len(fixed)
    for attempt in range(2):
        cells, chains = _final_triangulation(p, loops, inside_fn)
        missing = [c for c in chains if not _loop_edges_present(cells, c)]
        if not missing:
            break
        # repair: force boundary conformity by deleting free points near chords
        bad = []
        for c in missing:
            for a, b in zip(c, np.roll(c, -1)):
                bad.append(0.5 * (p[a] + p[b]))
        tree = cKDTree(np.array(bad))
        free = p[nfix:]
        d, _ = tree.query(free)
        keep_free = d > 0.7 * size_fn(free)
        p = np.vstack([fixed, free[keep_free]])
    else:
        raise MeshError("grading failure: boundary chain not recovered")

    # smoothing pass, kept only if it does not hurt quality or conformity
    p_s = _smooth_free(p.copy(), cells, nfix)
    cells_s, _ = _final_triangulation(p_s, loops, inside_fn)
    if all(_loop_edges_present(cells_s, c) for c in chains) and \
            _min_angles(p_s, cells_s).min() >= _min_angles(p, cells).min():
        p, cells = p_s, cells_s

    p, cells = _quality_repair(p, cells, nfix, loops, inside_fn)
    cells = _orient_ccw(p, cells)
    return p, cells, chains


def _final_triangulation(p, loops, inside_fn):
    tri = Delaunay(p)
    cells = tri.simplices
    keep = inside_fn(p[cells].mean(axis=1))
    cells = np.asarray(cells[keep], dtype=np.int32)
    offs, chains = 0, []
    for lp in loops:
        chains.append(np.arange(offs, offs + len(lp)))
        offs += len(lp)
    return cells, chains


def _min_angles(p, cells):
    tri = p[cells]
    ang = np.full(len(cells), 180.0)
    for i in range(3):
        u = tri[:, (i + 1) % 3] - tri[:, i]
        v = tri[:, (i + 2) % 3] - tri[:, i]
        cosv = np.einsum("ej,ej->e", u, v) / np.maximum(
            np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1), 1e-300)
        ang = np.minimum(ang, np.degrees(np.arccos(np.clip(cosv, -1, 1))))
    return ang


def _quality_repair(p, cells, nfix, loops, inside_fn, max_ops=60):
    """Delete the free vertex responsible for the worst sliver, revert when a
    deletion breaks boundary conformity or degrades the worst angle."""
    for _ in range(max_ops):
        ang = _min_angles(p, cells)
        worst = int(np.argmin(ang))
        if ang[worst] >= MIN_ANGLE_DEG + 0.8:
            break
        free_vs = [v for v in cells[worst] if v >= nfix]
        if not free_vs:
            break
        tri = cells[worst]
        best, best_d = None, np.inf
        for v in free_vs:
            d = min(np.linalg.norm(p[v] - p[w]) for w in tri if w != v)
            if d < best_d:
                best, best_d = v, d
        mask = np.ones(len(p), dtype=bool)
        mask[best] = False
        p_new = p[mask]
        cells_new, chains = _final_triangulation(p_new, loops, inside_fn)
        ok = all(_loop_edges_present(cells_new, c) for c in chains)
        if not ok or _min_angles(p_new, cells_new).min() < ang[worst] - 1e-9:
            break
        p, cells = p_new, cells_new
    return p, cells


def _orient_ccw(verts, tris):
    p = verts[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    flip = area2 < 0
    tris = tris.copy()
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def _tri_areas(verts, tris):
    p = verts[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _smooth_free(verts, tris, nfix, rounds=4):
    """Laplacian smoothing of free vertices; a round is reverted if it
    degrades the smallest triangle (guards non-convex regions)."""
    for _ in range(rounds):
        prev = verts.copy()
        floor = _tri_areas(verts, tris).min()
        acc = np.zeros_like(verts)
        cnt = np.zeros(len(verts))
        for a, b in ((0, 1), (1, 2), (2, 0)):
            np.add.at(acc, tris[:, a], verts[tris[:, b]])
            np.add.at(acc, tris[:, b], verts[tris[:, a]])
            np.add.at(cnt, tris[:, a], 1)
            np.add.at(cnt, tris[:, b], 1)
        new = acc / np.maximum(cnt, 1)[:, None]
        verts[nfix:] = 0.7 * verts[nfix:] + 0.3 * new[nfix:]
        if _tri_areas(verts, tris).min() < min(floor, 0.0) or \
                _tri_areas(verts, tris).min() <= 0:
            verts[:] = prev
            break
    return verts


# ---------------------------------------------------------------------------
# cavity boundary discretization
# ---------------------------------------------------------------------------

def _march_curve(cavity: CavitySpec, t_start, t_end, size_fn, min_pts=8):
    """Graded parameter stations strictly between t_start and t_end.

    Marches with steps set by the size field, then rescales the offsets so the
    final implied station lands exactly on t_end (no sliver gap at the seam).
    """
    ts = [t_start]
    guard = 0
    while ts[-1] < t_end:
        t = ts[-1]
        sp = float(size_fn(cavity.point(t)[None])[0])
        dt = sp / max(np.linalg.norm(cavity.tangent(t)), 1e-12)
        ts.append(t + dt)
        guard += 1
        if guard > 100000:
            raise MeshError("curve marching stalled")
    ts = np.array(ts)
    if len(ts) < min_pts + 2:
        ts = np.linspace(t_start, t_end, min_pts + 2)
    else:
        ts = t_start + (ts - t_start) * (t_end - t_start) / (ts[-1] - t_start)
    return list(ts[1:-1])


def _cavity_loop(cavity: CavitySpec, size_fn, junction_ts=None):
    """Pinned boundary loop; if junction_ts given, those params are included verbatim
    (the junction arc nodes) and the rest of the curve is graded."""
    if junction_ts is None:
        t0, t1 = 0.0, 2 * math.pi
        ts = [t0] + _march_curve(cavity, t0, t1, size_fn)
        return np.array(ts), cavity.point(np.array(ts))
    jts = np.asarray(junction_ts, dtype=float)
    lo, hi = jts.min(), jts.max()
    rest = _march_curve(cavity, hi, lo + 2 * math.pi, size_fn)
    ts = np.concatenate([jts, np.array(rest)])
    return ts, cavity.point(ts)


# ---------------------------------------------------------------------------
# transfinite neck / tube grids
# ---------------------------------------------------------------------------

def _neck_grid(y_rows, left_x, right_x, target_ax, force_even=False):
    """Structured node grid for the neck: rows at heights y_rows, columns graded
    linearly from the left curve to the right curve."""
    spans = np.asarray(right_x) - np.asarray(left_x)
    if np.any(spans <= 0):
        raise MeshError("neck has non-positive axial extent")
    n_a = max(2, int(math.ceil(spans.max() / target_ax)))
    if force_even and n_a % 2:
        n_a += 1
    frac = np.linspace(0.0, 1.0, n_a + 1)
    grid = np.empty((len(y_rows), n_a + 1, 2))
    for j, (y, xl, xr) in enumerate(zip(y_rows, left_x, right_x)):
        grid[j, :, 0] = xl + frac * (xr - xl)
        grid[j, :, 1] = y
    return grid


def _grid_to_tris(grid, base_index):
    """Union-jack split of a structured grid into triangles, mirror-symmetric."""
    n_j, n_i = grid.shape[0] - 1, grid.shape[1] - 1
    verts = grid.reshape(-1, 2)

    def vid(j, i):
        return base_index + j * (n_i + 1) + i

    tris = []
    for j in range(n_j):
        for i in range(n_i):
            a, b = vid(j, i), vid(j, i + 1)
            c, d = vid(j + 1, i + 1), vid(j + 1, i)
            if (i + j) % 2 == 0:
                tris += [[a, b, c], [a, c, d]]
            else:
                tris += [[a, b, d], [b, c, d]]
    return verts, np.array(tris, dtype=np.int32)


# ---------------------------------------------------------------------------
# stitching
# ---------------------------------------------------------------------------

def _stitch(parts):
    """Merge (verts, tris, region, edges, tags) parts, unifying identical vertices."""
    key_to_new = {}
    verts_out = []
    tris_out, reg_out, edges_out, tags_out = [], [], [], []
    for verts, tris, region, edges, tags in parts:
        remap = np.empty(len(verts), dtype=np.int64)
        for i, v in enumerate(verts):
            key = v.tobytes()
            if key not in key_to_new:
                key_to_new[key] = len(verts_out)
                verts_out.append(v)
            remap[i] = key_to_new[key]
        tris_out.append(remap[tris])
        reg_out.append(region)
        if len(edges):
            edges_out.append(remap[edges])
            tags_out.append(tags)
    verts = np.array(verts_out)
    tris = np.vstack(tris_out).astype(np.int32)
    region = np.concatenate(reg_out).astype(np.int16)
    edges = (np.vstack(edges_out).astype(np.int32) if edges_out
             else np.zeros((0, 2), dtype=np.int32))
    tags = (np.concatenate(tags_out).astype(np.int16) if tags_out
            else np.zeros(0, dtype=np.int16))
    # deduplicate tagged edges
    if len(edges):
        se = np.sort(edges, axis=1)
        _, idx = np.unique(np.column_stack([se, tags]), axis=0, return_index=True)
        edges, tags = se[np.sort(idx)], tags[np.sort(idx)]
    return Mesh(verts, tris, region, edges, tags)


def _chain_edges(chain, close=False):
    pairs = [(chain[k], chain[k + 1]) for k in range(len(chain) - 1)]
    if close:
        pairs.append((chain[-1], chain[0]))
    return np.array(pairs, dtype=np.int32)


# ---------------------------------------------------------------------------
# domain meshers
# ---------------------------------------------------------------------------

def _cavity_size_fn(cavity, h, h_fine, focus=None, growth=0.3):
    focus = np.zeros(2) if focus is None else np.asarray(focus)

    def size(pts):
        pts = np.atleast_2d(pts)
        d = np.linalg.norm(pts - focus, axis=1)
        return np.clip(h_fine + growth * d, h_fine, h)
    return size


def _cavity_adapters(cavity: CavitySpec):
    def inside(pts):
        return cavity.contains(pts)

    if cavity.kind == "disc":
        rot, p0 = cavity._transform
        R = cavity.radius

        def project(pts):
            body = pts @ rot + p0
            r = np.linalg.norm(body, axis=1)
            bad = r >= R
            if np.any(bad):
                body[bad] *= (0.995 * R / r[bad])[:, None]
            return (body - p0) @ rot.T
    elif cavity.kind == "ellipse":
        rot, p0 = cavity._transform
        a, b = cavity.axes

        def project(pts):
            body = pts @ rot + p0
            q = np.sqrt((body[:, 0] / a) ** 2 + (body[:, 1] / b) ** 2)
            bad = q >= 1.0
            if np.any(bad):
                body[bad] *= (0.995 / q[bad])[:, None]
            return (body - p0) @ rot.T
    else:
        poly = cavity.point(np.linspace(0, 2 * math.pi, 1024, endpoint=False))
        ctr = poly.mean(axis=0)

        def project(pts):
            bad = ~cavity.contains(pts)
            if np.any(bad):
                pts[bad] = ctr + 0.9 * (pts[bad] - ctr)
            return pts
    return inside, project


def mesh_cavity(cavity: CavitySpec, h: float, seed: int = 0, h_fine: float = None,
                junction: tuple = None) -> Mesh:
    """Triangulate the cavity alone.  With ``junction=(ts, pts)`` the given
    boundary params/points are pinned verbatim (used to conform to a neck)."""
    size_fn = _cavity_size_fn(cavity, h, h_fine or h)
    inside, project = _cavity_adapters(cavity)
    if junction is None:
        _, loop_pts = _cavity_loop(cavity, size_fn)
    else:
        jts, jpts = junction
        ts, loop_pts = _cavity_loop(cavity, size_fn, junction_ts=jts)
        loop_pts = np.vstack([jpts, loop_pts[len(jpts):]])
    verts, tris, chains = _mesh_region([loop_pts], size_fn, inside, project, seed)
    region = np.full(len(tris), REG_CAVITY, dtype=np.int16)
    mesh = Mesh(verts, tris, region, np.zeros((0, 2), dtype=np.int32),
                np.zeros(0, dtype=np.int16))
    _tag_all_boundary(mesh, TAG_DIRICHLET)
    return mesh


def mesh_disc(radius: float, h: float, seed: int = 0) -> Mesh:
    return mesh_cavity(CavitySpec("disc", radius=radius), h, seed)


def _junction_rows(spec, neck_layers):
    """Heights, params and points where the neck walls and interior rows meet
    the cavity boundary."""
    n_c = neck_layers
    y_rows = np.linspace(-spec.half_width, spec.half_width, n_c + 1)
    ts, pts = [], []
    for y in y_rows:
        t, x = spec.cavity.anchor_graph(y)
        ts.append(t)
        pts.append((x, y))
    ts = np.array(ts)
    pts = np.array(pts)
    if not (np.all(np.diff(ts) > 0) or np.all(np.diff(ts) < 0)):
        raise MeshError("junction params not monotone; anchor geometry too distorted")
    if ts[0] > ts[-1]:
        ts, pts, y_rows = ts[::-1], pts[::-1], y_rows[::-1]
    return y_rows, ts, pts


def _with_retries(build, seed):
    """Rebuild with bumped seeds when a relaxation lands below the angle bound;
    the retry ladder is fixed, so results stay deterministic."""
    last = None
    for off in (0, 101, 202, 307):
        try:
            return build(seed + off)
        except MeshError as exc:
            last = exc
    raise last


def triangulate(spec, h: float, neck_layers: int = 8, seed: int = 0) -> Mesh:
    """Mesh the interior domain of a spec: cavity, cavity+neck, or dumbbell."""
    if isinstance(spec, CavitySpec):
        return _with_retries(lambda s: _checked(mesh_cavity(spec, h, s)), seed)
    if isinstance(spec, ResonatorSpec):
        return _with_retries(lambda s: _mesh_resonator_interior(spec, h, neck_layers, s),
                             seed)
    if isinstance(spec, DumbbellSpec):
        return _with_retries(lambda s: _mesh_dumbbell(spec, h, neck_layers, s), seed)
    raise TypeError(f"cannot mesh object of type {type(spec).__name__}")


def _checked(mesh: Mesh) -> Mesh:
    mesh.check()
    return mesh


def triangulate_pair(spec: ResonatorSpec, h: float, neck_layers: int = 8,
                     seed: int = 0):
    """(cavity mesh, cavity+neck mesh) sharing the cavity part bitwise, so
    fields on the widened mesh are evaluable at cavity nodes by index."""
    def build(s):
        return _mesh_resonator_interior(spec, h, neck_layers, s, return_cavity=True)
    return _with_retries(build, seed)


def _mesh_resonator_interior(spec: ResonatorSpec, h, neck_layers, seed,
                             with_exterior=False, outer_radius=None,
                             pml_inner_radius=None, h_exterior=None,
                             return_cavity=False) -> Mesh:
    if neck_layers < 8:
        raise MeshError("need at least 8 element layers across the neck")
    h_fine = spec.eps / neck_layers
    y_rows, jts, jpts = _junction_rows(spec, neck_layers)

    cav = mesh_cavity(spec.cavity, h, seed, h_fine=h_fine, junction=(jts, jpts))
    cav_edges = _chain_edges(np.arange(len(jpts)))

    # neck grid between cavity wall and envelope wall
    right_x = np.array([spec.envelope.boundary_x(y) for y in y_rows])
    grid = _neck_grid(y_rows, jpts[:, 0], right_x, h_fine)
    nverts, ntris = _grid_to_tris(grid, 0)
    n_j, n_i = grid.shape[0] - 1, grid.shape[1] - 1

    def nid(j, i):
        return j * (n_i + 1) + i

    neck_wall_edges = []
    for i in range(n_i):
        neck_wall_edges.append((nid(0, i), nid(0, i + 1)))
        neck_wall_edges.append((nid(n_j, i), nid(n_j, i + 1)))
    exit_chain = [nid(j, n_i) for j in range(n_j + 1)]
    if not with_exterior:
        for j in range(n_j):
            neck_wall_edges.append((nid(j, n_i), nid(j + 1, n_i)))
    interface_chain = [nid(j, 0) for j in range(n_j + 1)]
    n_edges = np.array(neck_wall_edges, dtype=np.int32)
    n_tags = np.full(len(n_edges), TAG_DIRICHLET, dtype=np.int16)
    i_edges = _chain_edges(np.array(interface_chain))
    i_tags = np.full(len(i_edges), TAG_INTERFACE, dtype=np.int16)

    # cavity part: boundary edges are dirichlet except the junction arc
    cav_bnd = cav.boundary_edges()
    jset = {tuple(sorted(e)) for e in cav_edges}
    keep = [k for k, e in enumerate(cav_bnd) if tuple(sorted(e)) not in jset]
    cav_tagged = cav_bnd[keep]
    parts = [
        (cav.vertices, cav.triangles,
         np.full(len(cav.triangles), REG_CAVITY, dtype=np.int16),
         cav_tagged, np.full(len(cav_tagged), TAG_DIRICHLET, dtype=np.int16)),
        (nverts, ntris, np.full(len(ntris), REG_NECK, dtype=np.int16),
         np.vstack([n_edges, i_edges]), np.concatenate([n_tags, i_tags])),
    ]

    if with_exterior:
        ext = _mesh_exterior_annulus(spec, grid, exit_chain, h_exterior or h,
                                     outer_radius, pml_inner_radius, seed)
        parts.append(ext)

    mesh = _stitch(parts)
    mesh.check()
    if return_cavity:
        return cav, mesh
    return mesh


def _mesh_exterior_annulus(spec, neck_grid_pts, exit_chain, h_ext, outer_radius,
                           pml_inner_radius, seed):
    """Annulus between the envelope circle and the outer absorber circle, pinned
    to the neck exit nodes on the envelope."""
    ec = np.asarray(spec.envelope.center)
    RB = spec.envelope.radius
    Rout = outer_radius
    if Rout is None or Rout <= RB:
        raise MeshError("outer radius must exceed the envelope radius")
    exit_pts = neck_grid_pts.reshape(-1, 2)[exit_chain]
    phis = np.arctan2(exit_pts[:, 1] - ec[1], exit_pts[:, 0] - ec[0])
    order = np.argsort(phis)
    phis, exit_sorted = phis[order], exit_pts[order]
    s_exit = RB * np.min(np.diff(phis)) if len(phis) > 1 else h_ext

    def size(pts):
        pts = np.atleast_2d(pts)
        d = np.linalg.norm(pts - np.array([spec.L, 0.0]), axis=1)
        return np.clip(s_exit + 0.4 * d, s_exit, h_ext)

    # inner circle: exit nodes verbatim + graded arc for the rest
    arc_pts = [exit_sorted[-1]]
    phi = phis[-1]
    end = phis[0] + 2 * math.pi
    pts = []
    while True:
        p = ec + RB * np.array([math.cos(phi), math.sin(phi)])
        dphi = float(size(p[None])[0]) / RB
        phi += dphi
        if phi >= end - 0.5 * dphi:
            break
        pts.append(phi)
    pts = np.array(pts)
    if len(pts) > 1:
        pts = phis[-1] + (pts - phis[-1]) * (end - phis[-1]) / (pts[-1] - phis[-1] + (pts[1] - pts[0]))
    inner_rest = ec + RB * np.stack([np.cos(pts), np.sin(pts)], axis=1)
    inner_loop = np.vstack([exit_sorted, inner_rest])

    n_out = max(16, int(math.ceil(2 * math.pi * Rout / h_ext)))
    phis_out = np.linspace(0, 2 * math.pi, n_out, endpoint=False)
    outer_loop = ec + Rout * np.stack([np.cos(phis_out), np.sin(phis_out)], axis=1)

    def inside(pts):
        r = np.linalg.norm(np.atleast_2d(pts) - ec, axis=1)
        return (r > RB) & (r < Rout)

    def project(pts):
        r = np.linalg.norm(pts - ec, axis=1)
        lo, hi = RB + 0.3 * s_exit, Rout - 0.3 * h_ext
        rc = np.clip(r, lo, hi)
        return ec + (pts - ec) * (rc / np.maximum(r, 1e-14))[:, None]

    verts, tris, chains = _mesh_region([inner_loop, outer_loop], size, inside,
                                       project, seed + 1)
    cent = verts[tris].mean(axis=1)
    r_c = np.linalg.norm(cent - ec, axis=1)
    r0 = pml_inner_radius if pml_inner_radius is not None else Rout
    region = np.where(r_c >= r0, REG_ABSORBER, REG_EXTERIOR).astype(np.int16)

    inner_chain, outer_chain = chains
    # wall edges: whole inner circle except the exit arc (consecutive exit nodes)
    n_exit = len(exit_sorted)
    inner_edges = _chain_edges(inner_chain, close=True)
    exit_edge_keys = {(min(a, b), max(a, b))
                      for a, b in zip(range(n_exit - 1), range(1, n_exit))}
    keep = [k for k, e in enumerate(inner_edges)
            if (min(e), max(e)) not in exit_edge_keys]
    wall_edges = inner_edges[keep]
    outer_edges = _chain_edges(outer_chain, close=True)
    edges = np.vstack([wall_edges, outer_edges])
    tags = np.concatenate([
        np.full(len(wall_edges), TAG_DIRICHLET, dtype=np.int16),
        np.full(len(outer_edges), TAG_ABSORBER_OUTER, dtype=np.int16)])
    return verts, tris, region, edges, tags


def triangulate_truncated(spec: ResonatorSpec, h: float, neck_layers: int = 8,
                          outer_radius: float = None, pml_inner_radius: float = None,
                          h_exterior: float = None, seed: int = 0) -> Mesh:
    """Mesh the truncated scattering domain: cavity + neck + exterior + absorber."""
    if pml_inner_radius is None:
        pml_inner_radius = spec.truncation_radius
    if outer_radius is None:
        outer_radius = pml_inner_radius + 0.3 * (pml_inner_radius - spec.envelope.radius)
    return _with_retries(
        lambda s: _mesh_resonator_interior(spec, h, neck_layers, s, with_exterior=True,
                                           outer_radius=outer_radius,
                                           pml_inner_radius=pml_inner_radius,
                                           h_exterior=h_exterior), seed)


def _mesh_dumbbell(spec: DumbbellSpec, h, neck_layers, seed) -> Mesh:
    """Two mirror cavities joined by a tube; built as left half + exact mirror."""
    if neck_layers < 8:
        raise MeshError("need at least 8 element layers across the tube")
    h_fine = spec.eps / neck_layers
    y_rows = np.linspace(-spec.half_width, spec.half_width, neck_layers + 1)
    ts, pts = [], []
    for y in y_rows:
        t, x = spec.cavity.anchor_graph(y)
        ts.append(t)
        pts.append((x, y))
    jts, jpts = np.array(ts), np.array(pts)
    if jts[0] > jts[-1]:
        jts, jpts, y_rows = jts[::-1], jpts[::-1], y_rows[::-1]

    cav = mesh_cavity(spec.cavity, h, seed, h_fine=h_fine, junction=(jts, jpts))

    # left half-tube: from the cavity wall to the midplane x = L/2
    mid = 0.5 * spec.L
    grid = _neck_grid(y_rows, jpts[:, 0], np.full(len(y_rows), mid), h_fine,
                      force_even=False)
    nverts, ntris = _grid_to_tris(grid, 0)
    n_j, n_i = grid.shape[0] - 1, grid.shape[1] - 1

    def nid(j, i):
        return j * (n_i + 1) + i

    wall = []
    for i in range(n_i):
        wall.append((nid(0, i), nid(0, i + 1)))
        wall.append((nid(n_j, i), nid(n_j, i + 1)))
    wall = np.array(wall, dtype=np.int32)
    sym = np.array([(nid(j, n_i), nid(j + 1, n_i)) for j in range(n_j)],
                   dtype=np.int32)
    cav_bnd = cav.boundary_edges()
    jset = {tuple(sorted((a, b)))
            for a, b in zip(range(len(jpts) - 1), range(1, len(jpts)))}
    keep = [k for k, e in enumerate(cav_bnd) if tuple(sorted(e)) not in jset]
    cav_tagged = cav_bnd[keep]

    left_parts = [
        (cav.vertices, cav.triangles,
         np.full(len(cav.triangles), REG_CAVITY, dtype=np.int16),
         cav_tagged, np.full(len(cav_tagged), TAG_DIRICHLET, dtype=np.int16)),
        (nverts, ntris, np.full(len(ntris), REG_NECK, dtype=np.int16),
         np.vstack([wall, sym]),
         np.concatenate([np.full(len(wall), TAG_DIRICHLET, dtype=np.int16),
                         np.full(len(sym), TAG_SYMMETRY, dtype=np.int16)])),
    ]
    left = _stitch(left_parts)

    # exact mirror: x -> L - x, triangle orientation flipped back
    mv = left.vertices.copy()
    mv[:, 0] = spec.L - mv[:, 0]
    mt = left.triangles[:, [0, 2, 1]]
    right = (mv, mt, left.tri_region.copy(), left.tagged_edges.copy(),
             left.edge_tags.copy())
    full = _stitch([
        (left.vertices, left.triangles, left.tri_region, left.tagged_edges,
         left.edge_tags), right])
    # midplane edges were duplicated as symmetry tags; drop the dirichlet dupes
    full.check()
    return full


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

def refine(mesh: Mesh, marker=None) -> Mesh:
    """Conforming red-green refinement of the marked triangles.

    ``marker`` is a boolean array over triangles (None or all-False returns the
    mesh unchanged; all-True is uniform red refinement, x4 elements).
    """
    if marker is None:
        marker = np.zeros(len(mesh.triangles), dtype=bool)
    marker = np.asarray(marker, dtype=bool)
    if not marker.any():
        return mesh

    tris = mesh.triangles
    verts0 = mesh.vertices
    marked_edges = set()
    for t in tris[marker]:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            marked_edges.add((min(a, b), max(a, b)))

    def _green_min_angle(t, i):
        # worst corner angle of the two children from bisecting edge i
        a, b, c = verts0[t[i]], verts0[t[(i + 1) % 3]], verts0[t[(i + 2) % 3]]
        m = 0.5 * (a + b)
        worst = 180.0
        for tri in ((a, m, c), (m, b, c)):
            for k in range(3):
                u = tri[(k + 1) % 3] - tri[k]
                v = tri[(k + 2) % 3] - tri[k]
                cosv = np.dot(u, v) / max(np.linalg.norm(u) * np.linalg.norm(v), 1e-300)
                worst = min(worst, math.degrees(math.acos(np.clip(cosv, -1, 1))))
        return worst

    # closure: triangles with 2+ marked edges go red, and so do triangles whose
    # green bisection would fall below the angle bound
    while True:
        grew = False
        for t in tris:
            es = [(min(t[i], t[(i + 1) % 3]), max(t[i], t[(i + 1) % 3]))
                  for i in range(3)]
            hit = [e in marked_edges for e in es]
            n = sum(hit)
            if n == 3:
                continue
            promote = n >= 2
            if n == 1 and _green_min_angle(t, hit.index(True)) < MIN_ANGLE_DEG + 0.5:
                promote = True
            if promote:
                marked_edges.update(es)
                grew = True
        if not grew:
            break

    verts = list(mesh.vertices)
    midpoint = {}
    for e in sorted(marked_edges):
        midpoint[e] = len(verts)
        verts.append(0.5 * (mesh.vertices[e[0]] + mesh.vertices[e[1]]))
    verts = np.array(verts)

    new_tris, new_reg = [], []
    for t, reg in zip(tris, mesh.tri_region):
        es = [(min(t[i], t[(i + 1) % 3]), max(t[i], t[(i + 1) % 3])) for i in range(3)]
        hit = [e in marked_edges for e in es]
        n = sum(hit)
        if n == 0:
            new_tris.append(list(t))
            new_reg.append(reg)
        elif n == 3:
            m01, m12, m20 = midpoint[es[0]], midpoint[es[1]], midpoint[es[2]]
            for tri in ([t[0], m01, m20], [m01, t[1], m12],
                        [m20, m12, t[2]], [m01, m12, m20]):
                new_tris.append(tri)
                new_reg.append(reg)
        else:  # n == 1: green bisection
            i = hit.index(True)
            a, b, c = t[i], t[(i + 1) % 3], t[(i + 2) % 3]
            m = midpoint[es[i]]
            new_tris.append([a, m, c])
            new_tris.append([m, b, c])
            new_reg += [reg, reg]
    new_tris = np.array(new_tris, dtype=np.int32)

    # split tagged edges through their midpoints
    new_edges, new_tags = [], []
    for e, tag in zip(mesh.tagged_edges, mesh.edge_tags):
        key = (min(e), max(e))
        if key in midpoint:
            m = midpoint[key]
            new_edges += [(e[0], m), (m, e[1])]
            new_tags += [tag, tag]
        else:
            new_edges.append(tuple(e))
            new_tags.append(tag)

    out = Mesh(verts, new_tris, np.array(new_reg, dtype=np.int16),
               np.array(new_edges, dtype=np.int32),
               np.array(new_tags, dtype=np.int16))
    q = out.quality()
    if q.min_angle_deg < MIN_ANGLE_DEG:
        raise MeshError(f"quality collapse after refinement: min angle "
                        f"{q.min_angle_deg:.2f} deg")
    return out


def neck_transect_counts(mesh: Mesh, spec: ResonatorSpec, n_stations: int = 12):
    """Number of neck triangles crossed by vertical lines at interior stations."""
    xs = np.linspace(0.15 * spec.L, 0.85 * spec.L, n_stations)
    neck = mesh.triangles[mesh.tri_region == REG_NECK]
    p = mesh.vertices[neck]
    counts = []
    for x in xs:
        lo = p[..., 0].min(axis=1)
        hi = p[..., 0].max(axis=1)
        counts.append(int(np.sum((lo <= x) & (x <= hi))))
    return counts
