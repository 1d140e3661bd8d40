"""P1/P2 finite elements for the Dirichlet Laplacian, real and complex-stretched.

One shared element loop assembles stiffness and mass; the absorbing variant
feeds it a complex radial-stretch tensor supported in the absorber region, so
sigma = 0 reproduces the real assembly bitwise.  Flux recovery is residual
based (variationally consistent) with a conservative per-edge representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .meshing import Mesh, TAG_ABSORBER_OUTER, TAG_DIRICHLET

# Dunavant 7-point rule, exact to degree 5, barycentric coords and weights
_QW = np.array([0.225,
                0.1323941527885062, 0.1323941527885062, 0.1323941527885062,
                0.1259391805448271, 0.1259391805448271, 0.1259391805448271])
_a, _b = 0.0597158717897698, 0.4701420641051151
_c, _d = 0.7974269853530873, 0.1012865073234563
_QP = np.array([[1 / 3, 1 / 3, 1 / 3],
                [_a, _b, _b], [_b, _a, _b], [_b, _b, _a],
                [_c, _d, _d], [_d, _c, _d], [_d, _d, _c]])


class SolveError(RuntimeError):
    """Linear solve failed (singular or near-singular factorization)."""


def _shape_p1(lam):
    N = lam.copy()
    G = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return N, np.broadcast_to(G, (len(lam), 3, 2)).copy()


def _shape_p2(lam):
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    N = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                  4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], axis=1)
    # gradients w.r.t. (xi, eta) with l0 = 1 - xi - eta, l1 = xi, l2 = eta
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    G = np.zeros((len(lam), 6, 2))
    for q in range(len(lam)):
        a, b, c = l0[q], l1[q], l2[q]
        G[q, 0] = (4 * a - 1) * dl[0]
        G[q, 1] = (4 * b - 1) * dl[1]
        G[q, 2] = (4 * c - 1) * dl[2]
        G[q, 3] = 4 * (b * dl[0] + a * dl[1])
        G[q, 4] = 4 * (c * dl[1] + b * dl[2])
        G[q, 5] = 4 * (a * dl[2] + c * dl[0])
    return N, G


@dataclass
class FeSpace:
    """Scalar Lagrange space on a triangle mesh; Dirichlet nodes eliminated."""

    mesh: Mesh
    order: int
    nodes: np.ndarray          # (n, 2) vertex coords then edge midpoints
    tri_dofs: np.ndarray       # (nt, 3 or 6)
    edge_mid: dict             # sorted vertex pair -> midside node id (order 2)
    dirichlet_mask: np.ndarray
    free: np.ndarray

    @property
    def n_nodes(self):
        return len(self.nodes)

    def midside(self, a, b):
        return self.edge_mid[(min(a, b), max(a, b))]

    def edge_dofs(self, a, b):
        """Node ids carried by mesh edge (a, b): endpoints (+ midside for P2)."""
        if self.order == 1:
            return [a, b]
        return [a, b, self.midside(a, b)]

    def nearest_node(self, point):
        return int(np.argmin(np.einsum("ij,ij->i", self.nodes - point,
                                       self.nodes - point)))


def build_space(mesh: Mesh, order: int = 1,
                dirichlet_tags=(TAG_DIRICHLET, TAG_ABSORBER_OUTER)) -> FeSpace:
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    nv = len(mesh.vertices)
    if order == 1:
        nodes = mesh.vertices
        tri_dofs = mesh.triangles.astype(np.int64)
        edge_mid = {}
    else:
        uniq, _ = mesh.all_edges()
        edge_mid = {(int(a), int(b)): nv + k for k, (a, b) in enumerate(uniq)}
        nodes = np.vstack([mesh.vertices,
                           0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])])
        t = mesh.triangles
        tri_dofs = np.empty((len(t), 6), dtype=np.int64)
        tri_dofs[:, :3] = t
        for k in range(3):
            a, b = t[:, k], t[:, (k + 1) % 3]
            lo, hi = np.minimum(a, b), np.maximum(a, b)
            tri_dofs[:, 3 + k] = [edge_mid[(int(x), int(y))] for x, y in zip(lo, hi)]

    mask = np.zeros(len(nodes), dtype=bool)
    for e, tag in zip(mesh.tagged_edges, mesh.edge_tags):
        if tag in dirichlet_tags:
            mask[e[0]] = mask[e[1]] = True
            if order == 2:
                mask[edge_mid[(int(min(e)), int(max(e)))]] = True
    free = np.flatnonzero(~mask)
    return FeSpace(mesh, order, nodes, tri_dofs, edge_mid, mask, free)


def _element_geometry(space: FeSpace):
    p = space.mesh.vertices[space.mesh.triangles]
    J = np.empty((len(p), 2, 2))
    J[:, :, 0] = p[:, 1] - p[:, 0]
    J[:, :, 1] = p[:, 2] - p[:, 0]
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if np.any(det <= 0):
        raise SolveError("degenerate element (non-positive Jacobian)")
    inv = np.empty_like(J)
    inv[:, 0, 0] = J[:, 1, 1] / det
    inv[:, 0, 1] = -J[:, 0, 1] / det
    inv[:, 1, 0] = -J[:, 1, 0] / det
    inv[:, 1, 1] = J[:, 0, 0] / det
    return p, J, inv, det


def _assemble_pair(space: FeSpace, tensor_fn=None, weight_fn=None, dtype=float,
                   elements=None):
    """Stiffness and mass with optional pointwise tensor / weight coefficients;
    ``elements`` restricts assembly to a triangle subset (matrices stay global)."""
    p, J, invJ, det = _element_geometry(space)
    tri_dofs = space.tri_dofs
    if elements is not None:
        sel = np.asarray(elements)
        p, J, invJ, det = p[sel], J[sel], invJ[sel], det[sel]
        tri_dofs = tri_dofs[sel]
    nloc = 3 if space.order == 1 else 6
    shape = _shape_p1 if space.order == 1 else _shape_p2
    N_all, G_all = shape(_QP)
    ne = len(tri_dofs)
    Ke = np.zeros((ne, nloc, nloc), dtype=dtype)
    Me = np.zeros((ne, nloc, nloc), dtype=dtype)
    for q in range(len(_QW)):
        lam = _QP[q]
        xq = lam[0] * p[:, 0] + lam[1] * p[:, 1] + lam[2] * p[:, 2]
        Gq = G_all[q]                              # (nloc, 2) reference grads
        Gp = np.einsum("li,eij->elj", Gq, invJ)    # physical grads (ne, nloc, 2)
        w = _QW[q] * 0.5 * det                     # element area = det/2
        if tensor_fn is None:
            Ke += w[:, None, None] * np.einsum("eld,emd->elm", Gp, Gp)
            Me += (w[:, None, None]
                   * np.einsum("l,m->lm", N_all[q], N_all[q])[None, :, :])
        else:
            A = tensor_fn(xq)                      # (ne, 2, 2)
            X = np.einsum("eld,edc,emc->elm", Gp, A, Gp)
            Ke += w[:, None, None] * (0.5 * (X + X.transpose(0, 2, 1)))
            mw = weight_fn(xq)                     # (ne,)
            Me += (w * mw)[:, None, None] * np.einsum(
                "l,m->lm", N_all[q], N_all[q])[None, :, :]
    rows = np.repeat(tri_dofs, nloc, axis=1).ravel()
    cols = np.tile(tri_dofs, (1, nloc)).ravel()
    n = space.n_nodes
    K = sp.csr_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((Me.ravel(), (rows, cols)), shape=(n, n))
    K.eliminate_zeros()
    M.eliminate_zeros()
    return K, M


@dataclass
class Assembly:
    """Assembled operators: full-node matrices plus free-node (Dirichlet-eliminated) views."""

    space: FeSpace
    K_full: sp.csr_matrix
    M_full: sp.csr_matrix

    @property
    def K(self):
        f = self.space.free
        return self.K_full[f][:, f].tocsr()

    @property
    def M(self):
        f = self.space.free
        return self.M_full[f][:, f].tocsr()

    def lumped_mass(self):
        return np.asarray(self.M_full.sum(axis=1)).ravel()


def assemble(mesh: Mesh, order: int = 1,
             dirichlet_tags=(TAG_DIRICHLET, TAG_ABSORBER_OUTER)) -> Assembly:
    space = build_space(mesh, order, dirichlet_tags)
    K, M = _assemble_pair(space)
    return Assembly(space, K, M)


def region_mass(space: FeSpace, region_codes) -> sp.csr_matrix:
    """Real mass matrix assembled over the listed mesh regions only."""
    mask = np.isin(space.mesh.tri_region, list(region_codes))
    _, M = _assemble_pair(space, elements=np.flatnonzero(mask))
    return M


def pml_stretch(center, r0: float, thickness: float, sigma0: float):
    """Radial complex dilation x -> x (1 + i sigma(|x - center|)) with a
    quadratic ramp sigma = sigma0 ((r - r0)/thickness)^2 beyond r0."""
    center = np.asarray(center, dtype=float)

    def sigma(r):
        u = np.maximum(r - r0, 0.0) / thickness
        return sigma0 * u**2

    def dsigma(r):
        u = np.maximum(r - r0, 0.0) / thickness
        return 2.0 * sigma0 * u / thickness

    def tensor(x):
        d = x - center
        r = np.sqrt(np.einsum("ej,ej->e", d, d))
        r = np.maximum(r, 1e-14)
        er = d / r[:, None]
        s_t = 1.0 + 1j * sigma(r)
        s_r = 1.0 + 1j * (sigma(r) + r * dsigma(r))
        a_rad = s_t / s_r
        a_tan = s_r / s_t
        et = np.stack([-er[:, 1], er[:, 0]], axis=1)
        A = (a_rad[:, None, None] * np.einsum("ei,ej->eij", er, er)
             + a_tan[:, None, None] * np.einsum("ei,ej->eij", et, et))
        return A

    def weight(x):
        d = x - center
        r = np.maximum(np.sqrt(np.einsum("ej,ej->e", d, d)), 1e-14)
        return (1.0 + 1j * sigma(r)) * (1.0 + 1j * (sigma(r) + r * dsigma(r)))

    return tensor, weight


def assemble_absorbing(mesh: Mesh, center, r0: float, thickness: float,
                       sigma0: float, order: int = 1) -> Assembly:
    """Complex-symmetric pair implementing the radial absorbing stretch."""
    space = build_space(mesh, order)
    if sigma0 == 0.0:
        K, M = _assemble_pair(space)
        return Assembly(space, K.astype(complex), M.astype(complex))
    tensor, weight = pml_stretch(center, r0, thickness, sigma0)
    K, M = _assemble_pair(space, tensor_fn=tensor, weight_fn=weight, dtype=complex)
    return Assembly(space, K, M)


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------

def factorize(A):
    try:
        return spla.splu(A.tocsc())
    except RuntimeError as exc:
        raise SolveError(f"factorization failed: {exc}") from exc


def solve_linear(A, b, lu=None):
    """Direct sparse solve with a residual guard."""
    lu = lu or factorize(A)
    x = lu.solve(b)
    nb = np.linalg.norm(b)
    if nb > 0:
        rel = np.linalg.norm(A @ x - b) / nb
        tol = 1e-8 if np.iscomplexobj(A) else 1e-10
        if rel > tol:
            # one step of iterative refinement before giving up
            x = x + lu.solve(b - A @ x)
            rel = np.linalg.norm(A @ x - b) / nb
            if rel > tol:
                raise SolveError(f"relative residual {rel:.2e} exceeds {tol:.0e}")
    return x


def solve_dirichlet(asm: Assembly, load_full, z: float = 0.0, boundary_values=None):
    """Solve (K - z M) u = load with inhomogeneous Dirichlet data.

    ``load_full`` is a functional vector over all nodes; returns the full
    coefficient vector including boundary entries.
    """
    space = asm.space
    A_full = (asm.K_full - z * asm.M_full).tocsr()
    u = np.zeros(space.n_nodes, dtype=np.result_type(A_full.dtype, load_full.dtype))
    if boundary_values is not None:
        u[space.dirichlet_mask] = boundary_values[space.dirichlet_mask]
    f = space.free
    rhs = load_full[f] - A_full[f] @ u
    A = A_full[f][:, f].tocsr()
    u[f] = solve_linear(A, rhs)
    return u


# ---------------------------------------------------------------------------
# flux recovery
# ---------------------------------------------------------------------------

def flux_functional(K_full, M_full, u, z=0.0, load=None):
    """Residual functional r_i = ((K - zM)u - load)_i; on boundary nodes of the
    region where u solves the equation, r_i is the consistent outward flux
    weighted by the basis function."""
    r = K_full @ u - z * (M_full @ u)
    if load is not None:
        r = r - load
    return r


def edge_flux_values(space: FeSpace, functional, chain_edges):
    """Conservative per-edge flux densities on an edge chain.

    Each node's functional value is split evenly among the chain edges it
    belongs to, so sum(value_e * len_e) equals the total nodal functional.
    """
    chain_edges = np.asarray(chain_edges)
    count = {}
    for a, b in chain_edges:
        for n in space.edge_dofs(int(a), int(b)):
            count[n] = count.get(n, 0) + 1
    # vertex nodes shared by two chain edges get weight 1/2, midsides weight 1
    vals = np.empty(len(chain_edges), dtype=np.asarray(functional).dtype)
    lens = np.empty(len(chain_edges))
    for k, (a, b) in enumerate(chain_edges):
        ln = np.linalg.norm(space.mesh.vertices[b] - space.mesh.vertices[a])
        tot = 0.0
        for n in space.edge_dofs(int(a), int(b)):
            tot = tot + functional[n] / count[n]
        vals[k] = tot / ln
        lens[k] = ln
    return vals, lens


def normal_flux(asm: Assembly, u, tag: int, z: float = 0.0, load=None):
    """Per-edge consistent normal-flux values on all edges carrying ``tag``."""
    edges = asm.space.mesh.edges_with_tag(tag)
    if len(edges) == 0:
        raise ValueError(f"no edges with tag {tag}")
    r = flux_functional(asm.K_full, asm.M_full, u, z, load)
    return edge_flux_values(asm.space, r, edges)


# ---------------------------------------------------------------------------
# fields and evaluation
# ---------------------------------------------------------------------------

@dataclass
class Field:
    """Nodal coefficient vector bound to its space."""

    space: FeSpace
    coeffs: np.ndarray

    def __post_init__(self):
        if len(self.coeffs) != self.space.n_nodes:
            raise ValueError("coefficient length does not match space")


class FieldEvaluator:
    """Point evaluation by centroid-tree candidate search + barycentric test."""

    def __init__(self, space: FeSpace):
        self.space = space
        p = space.mesh.vertices[space.mesh.triangles]
        self.tree = cKDTree(p.mean(axis=1))
        self.p = p

    def locate(self, pts, k: int = 16, tol: float = 1e-9):
        """Triangle index and barycentric coords per point (-1 if outside)."""
        pts = np.atleast_2d(pts)
        _, cand = self.tree.query(pts, k=min(k, len(self.p)))
        cand = np.atleast_2d(cand)
        tri_idx = np.full(len(pts), -1, dtype=np.int64)
        bary = np.zeros((len(pts), 3))
        for i, pt in enumerate(pts):
            best, best_viol = -1, np.inf
            for t in cand[i]:
                a, b, c = self.p[t]
                T = np.array([[b[0] - a[0], c[0] - a[0]],
                              [b[1] - a[1], c[1] - a[1]]])
                rhs = pt - a
                det = T[0, 0] * T[1, 1] - T[0, 1] * T[1, 0]
                l1 = (T[1, 1] * rhs[0] - T[0, 1] * rhs[1]) / det
                l2 = (-T[1, 0] * rhs[0] + T[0, 0] * rhs[1]) / det
                lam = np.array([1 - l1 - l2, l1, l2])
                viol = -lam.min()
                if viol < best_viol:
                    best, best_viol, best_lam = t, viol, lam
                if viol <= tol:
                    break
            if best_viol <= 0.02:  # snap slightly-outside points (boundary band)
                tri_idx[i] = best
                bary[i] = np.clip(best_lam, 0, None)
                bary[i] /= bary[i].sum()
        return tri_idx, bary

    def evaluate(self, field: Field, pts):
        tri_idx, bary = self.locate(pts)
        if np.any(tri_idx < 0):
            raise ValueError("point outside mesh (not evaluable)")
        if self.space.order == 1:
            N = bary
        else:
            N, _ = _shape_p2(bary)
        dofs = self.space.tri_dofs[tri_idx]
        return np.einsum("pl,pl->p", N, field.coeffs[dofs])


def element_gradients(space: FeSpace, coeffs):
    """Gradient per element sampled at its nodes: (ne, nloc, 2); P1 is constant."""
    _, _, invJ, _ = _element_geometry(space)
    if space.order == 1:
        _, G = _shape_p1(np.array([[1 / 3, 1 / 3, 1 / 3]]))
        Gq = G[0]
        Gp = np.einsum("li,eij->elj", Gq, invJ)
        vals = np.einsum("el,elj->ej", coeffs[space.tri_dofs], Gp)
        return vals[:, None, :].repeat(3, axis=1)
    lam_nodes = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1],
                          [0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]], dtype=float)
    _, G = _shape_p2(lam_nodes)
    out = np.empty((len(space.tri_dofs), 6, 2), dtype=coeffs.dtype)
    for q in range(6):
        Gp = np.einsum("li,eij->elj", G[q], invJ)
        out[:, q, :] = np.einsum("el,elj->ej", coeffs[space.tri_dofs], Gp)
    return out


def export_matrix(A, path):
    """Coordinate text format: row col real imag (one entry per line)."""
    A = A.tocoo()
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            c = complex(v)
            fh.write(f"{i} {j} {c.real!r} {c.imag!r}\n")
