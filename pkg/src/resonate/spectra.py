"""Interior Dirichlet eigenproblems: solves, eigenvalue tracking across the
thin-neck perturbation, eigenfunction comparison, and dumbbell splitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .fem import Assembly, Field
from .geometry import CavitySpec, DumbbellSpec
from .meshing import REG_CAVITY, triangulate
from .reporting import fit_line

RESIDUAL_TOL = 1e-8
CLUSTER_REL_GAP = 1e-6


class EigenError(RuntimeError):
    pass


class TrackingError(EigenError):
    """No unique eigenvalue inside the tracking window."""


@dataclass
class EigenPair:
    value: float
    field: Field                 # full coefficient vector, M-normalized, sign-fixed
    residual: float
    clustered: bool = False
    index: int = None            # 1-based position in the computed spectrum

    @property
    def coeffs(self):
        return self.field.coeffs


def _probe_sign_fix(space, coeffs, probe_point):
    """Make the value at the probe node positive; fall back to the first node
    carrying a significant value when the probe sits on a nodal line."""
    v = coeffs[space.nearest_node(np.asarray(probe_point))] if probe_point is not None else 0.0
    if probe_point is None or abs(v) < 1e-10 * np.abs(coeffs).max():
        idx = np.flatnonzero(np.abs(coeffs) > 0.5 * np.abs(coeffs).max())[0]
        v = coeffs[idx]
    return coeffs if v > 0 else -coeffs


def dirichlet_eigs(asm: Assembly, count: int, shift: float = 0.0,
                   probe_point=None, seed: int = 7) -> list:
    """``count`` eigenpairs of K f = lambda M f nearest ``shift``, ascending.

    Shift-invert Lanczos (ARPACK) with a seeded start vector; retries with a
    jittered shift if the factorization lands on an eigenvalue.
    """
    K, M = asm.K, asm.M
    n = K.shape[0]
    if count >= n - 1:
        raise EigenError("count too large for the discrete space")
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n)
    sig = shift
    last = None
    for attempt in range(4):
        try:
            vals, vecs = spla.eigsh(K, k=count, M=M, sigma=sig, which="LM", v0=v0)
            break
        except RuntimeError as exc:
            last = exc
            sig = sig + 10 ** (-6 + 2 * attempt) * max(1.0, abs(shift))
    else:
        raise EigenError(f"shift-invert failed near {shift}: {last}")
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]

    pairs = []
    free = asm.space.free
    for j, lam in enumerate(vals):
        x = vecs[:, j]
        nrm = float(np.sqrt(x @ (M @ x)))
        x = x / nrm
        res = float(np.linalg.norm(K @ x - lam * (M @ x)) / np.linalg.norm(M @ x))
        full = np.zeros(asm.space.n_nodes)
        full[free] = x
        full = _probe_sign_fix(asm.space, full, probe_point)
        gaps = [abs(lam - vals[i]) / max(abs(lam), 1e-300)
                for i in range(len(vals)) if i != j]
        clustered = bool(gaps and min(gaps) < CLUSTER_REL_GAP)
        pairs.append(EigenPair(float(lam), Field(asm.space, full), res, clustered))
    for p in pairs:
        if p.residual > RESIDUAL_TOL:
            raise EigenError(f"eigen residual {p.residual:.2e} above {RESIDUAL_TOL}")
    return pairs


def spectral_gap(values, lam0: float) -> float:
    """Distance from lam0 to the rest of the listed spectrum."""
    others = [v for v in values if abs(v - lam0) > 1e-9 * max(1.0, abs(lam0))]
    if not others:
        raise EigenError("need at least one other eigenvalue for a gap")
    return min(abs(v - lam0) for v in others)


def track_eigenvalue(asm_eps: Assembly, lam0: float, gap: float,
                     probe_point=None, seed: int = 7) -> EigenPair:
    """The unique eigenpair of the widened domain inside |lam - lam0| < gap/2.

    Raises TrackingError when zero or several candidates fall in the window
    (simplicity violated at this eps): reported, never guessed.
    """
    window = 0.5 * gap
    pairs = dirichlet_eigs(asm_eps, count=6, shift=lam0, probe_point=probe_point,
                           seed=seed)
    inside = [p for p in pairs if abs(p.value - lam0) < window]
    if len(inside) == 0:
        raise TrackingError(f"no eigenvalue within {window:.3g} of {lam0:.6g}")
    if len(inside) > 1:
        vals = [p.value for p in inside]
        raise TrackingError(f"{len(inside)} candidates in window around "
                            f"{lam0:.6g}: {vals}")
    return inside[0]


# ---------------------------------------------------------------------------
# eigenfunction comparison u0 vs v_eps
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    """Differences between the cavity eigenfunction and the widened-domain one.

    The *_compact fields restrict to {x : d(x, cavity wall) >= margin}; the full
    variants include the wall band, where the widened domain's re-entrant
    junction corners make the gradient comparison singular.
    """

    eps: float
    sup_diff_compact: float
    sup_grad_diff_compact: float
    sup_diff_full: float
    sup_grad_diff_full: float
    l2_diff_zero_extension: float
    eigenvalue_gap: float
    margin: float


def _shared_node_map(space_small: fem.FeSpace, space_big: fem.FeSpace):
    """Index map from the cavity-mesh nodes into the stitched-mesh nodes,
    matched bitwise by coordinates (the stitched mesh reuses the cavity mesh)."""
    lookup = {}
    for i, p in enumerate(space_big.nodes):
        lookup[p.tobytes()] = i
    idx = np.empty(space_small.n_nodes, dtype=np.int64)
    for i, p in enumerate(space_small.nodes):
        key = p.tobytes()
        if key not in lookup:
            raise EigenError("meshes not nested: cavity node missing from the "
                             "widened mesh (rebuild both from one spec)")
        idx[i] = lookup[key]
    return idx


def _node_averaged_gradients(space: fem.FeSpace, coeffs, region_mask=None):
    grads = fem.element_gradients(space, coeffs)
    acc = np.zeros((space.n_nodes, 2))
    cnt = np.zeros(space.n_nodes)
    tri_dofs = space.tri_dofs
    sel = np.arange(len(tri_dofs)) if region_mask is None else np.flatnonzero(region_mask)
    for e in sel:
        for loc, nd in enumerate(tri_dofs[e]):
            acc[nd] += grads[e, loc]
            cnt[nd] += 1
    ok = cnt > 0
    acc[ok] /= cnt[ok][:, None]
    return acc, ok


def compare_fields(u0: EigenPair, v_eps: EigenPair, margin: float,
                   eps: float = float("nan"), mass_full=None) -> ComparisonReport:
    """Sup and gradient-sup differences on the cavity, compact-subset variant,
    and the L2 distance of the zero-extension of u0 from v_eps."""
    sp_c = u0.field.space
    sp_e = v_eps.field.space
    idx = _shared_node_map(sp_c, sp_e)
    u = u0.coeffs
    v = v_eps.coeffs[idx]

    diff = np.abs(u - v)
    sup_full = float(diff.max())

    # distance to the cavity wall via the tagged boundary vertices
    wall = np.unique(sp_c.mesh.boundary_edges())
    wall_pts = sp_c.mesh.vertices[wall]
    from scipy.spatial import cKDTree
    d, _ = cKDTree(wall_pts).query(sp_c.nodes)
    compact = d >= margin
    sup_compact = float(diff[compact].max()) if compact.any() else 0.0

    g_u, ok_u = _node_averaged_gradients(sp_c, u)
    mask_cav = sp_e.mesh.tri_region == REG_CAVITY
    g_v_all, ok_v = _node_averaged_gradients(sp_e, v_eps.coeffs, mask_cav)
    g_v = g_v_all[idx]
    both = ok_u & ok_v[idx]
    gdiff = np.linalg.norm(g_u - g_v, axis=1)
    sup_grad_full = float(gdiff[both].max())
    sel = both & compact
    sup_grad_compact = float(gdiff[sel].max()) if sel.any() else 0.0

    # || u0_tilde - v ||_{L2(C(eps))}: u0 extended by zero outside the cavity
    u_ext = np.zeros(sp_e.n_nodes)
    u_ext[idx] = u
    M_e = mass_full if mass_full is not None else fem._assemble_pair(sp_e)[1]
    w = u_ext - v_eps.coeffs
    l2 = float(np.sqrt(max(w @ (M_e @ w), 0.0)))

    return ComparisonReport(eps, sup_compact, sup_grad_compact, sup_full,
                            sup_grad_full, l2, float("nan"), margin)


def fit_rate(eps_list, diffs):
    """Exponent beta_hat from log-log least squares; returns (beta, residual)."""
    slope, _, resid = fit_line(np.log(np.asarray(eps_list, dtype=float)),
                               np.log(np.asarray(diffs, dtype=float)))
    return slope, resid


# ---------------------------------------------------------------------------
# dumbbell splitting
# ---------------------------------------------------------------------------

@dataclass
class SplittingRow:
    eps: float
    e1: float
    e2: float
    gap: float
    parity_ok: bool


@dataclass
class SplittingResult:
    rows: list
    slope: float
    intercept: float
    fit_residual: float
    target: float


def _parity_of(space, coeffs, L):
    """+1 even / -1 odd under x -> L - x, or 0 if undetermined."""
    from scipy.spatial import cKDTree
    pts = space.nodes.copy()
    pts[:, 0] = L - pts[:, 0]
    d, j = cKDTree(space.nodes).query(pts)
    if d.max() > 1e-9:
        return 0
    mirrored = coeffs[j]
    scale = np.abs(coeffs).max()
    if np.abs(mirrored - coeffs).max() < 1e-6 * scale:
        return 1
    if np.abs(mirrored + coeffs).max() < 1e-6 * scale:
        return -1
    return 0


def splitting(cavity: CavitySpec, L: float, eps_list, h: float,
              neck_layers: int = 8, order: int = 2, alpha0: float = np.pi,
              seed: int = 0) -> SplittingResult:
    """Gap E2 - E1 of the symmetric dumbbell ground pair over an eps sweep,
    with the fitted slope of ln(E2 - E1) against 1/eps."""
    rows = []
    for eps in eps_list:
        spec = DumbbellSpec(cavity, L, float(eps))
        mesh = triangulate(spec, h, neck_layers, seed=seed)
        asm = fem.assemble(mesh, order)
        pairs = dirichlet_eigs(asm, count=2, shift=0.0, seed=seed + 13)
        e1, e2 = pairs[0].value, pairs[1].value
        p1 = _parity_of(asm.space, pairs[0].coeffs, L)
        p2 = _parity_of(asm.space, pairs[1].coeffs, L)
        rows.append(SplittingRow(float(eps), e1, e2, e2 - e1,
                                 parity_ok=(p1 == 1 and p2 == -1)))
    x = [1.0 / r.eps for r in rows]
    y = [np.log(r.gap) for r in rows]
    slope, intercept, resid = fit_line(x, y)
    return SplittingResult(rows, slope, intercept, resid, target=-alpha0 * L)
