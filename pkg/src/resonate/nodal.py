"""Nodal decompositions of discrete eigenfunctions: sign components, counts,
positivity near the neck, count monotonicity under the thin-neck perturbation,
and the area floor every nodal domain must respect."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.special import jn_zeros

from .fem import FeSpace
from .meshing import Mesh, REG_NECK

J01_SQ = float(jn_zeros(0, 1)[0]) ** 2


class NodalError(RuntimeError):
    pass


@dataclass
class NodalDecomposition:
    signs: np.ndarray          # per-element label: +1, -1, 0 (band)
    component: np.ndarray      # component id per element (-1 for band)
    volumes: np.ndarray        # area per component
    band_volume: float
    count: int
    threshold: float
    stable: bool               # count unchanged under threshold halving

    def component_signs(self):
        out = []
        for c in range(self.count):
            els = np.flatnonzero(self.component == c)
            out.append(int(self.signs[els[0]]))
        return out


def _element_signs(space: FeSpace, coeffs, threshold):
    vals = coeffs[space.tri_dofs]
    pos = np.all(vals >= threshold, axis=1)
    neg = np.all(vals <= -threshold, axis=1)
    signs = np.zeros(len(space.tri_dofs), dtype=np.int8)
    signs[pos] = 1
    signs[neg] = -1
    return signs


def _edge_adjacency(mesh: Mesh):
    """Element adjacency across shared edges (vertex contact does not join)."""
    t = mesh.triangles
    owner = {}
    rows, cols = [], []
    for e_idx in range(len(t)):
        for k in range(3):
            a, b = t[e_idx, k], t[e_idx, (k + 1) % 3]
            key = (min(a, b), max(a, b))
            if key in owner:
                rows.append(owner[key])
                cols.append(e_idx)
            else:
                owner[key] = e_idx
    n = len(t)
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return A + A.T


def _components(mesh: Mesh, signs):
    adj = _edge_adjacency(mesh).tocoo()
    same = (signs[adj.row] == signs[adj.col]) & (signs[adj.row] != 0)
    A = sp.csr_matrix((np.ones(np.sum(same)), (adj.row[same], adj.col[same])),
                      shape=adj.shape)
    n_all, labels_all = connected_components(A, directed=False)
    comp = np.full(len(signs), -1, dtype=np.int64)
    areas = []
    mesh_areas = mesh.areas()
    next_id = 0
    for lab in range(n_all):
        els = np.flatnonzero((labels_all == lab) & (signs != 0))
        if len(els) == 0:
            continue
        comp[els] = next_id
        areas.append(float(mesh_areas[els].sum()))
        next_id += 1
    return comp, np.array(areas)


def nodal_domains(space: FeSpace, coeffs, band_frac: float = 1e-3) -> NodalDecomposition:
    """Connected same-sign components over element edge-adjacency.

    Elements whose nodal values do not clear the +-threshold band count as
    nodal-set carriers; the count must be stable under halving the threshold,
    otherwise the decomposition is flagged unstable.
    """
    coeffs = np.asarray(coeffs)
    scale = float(np.abs(coeffs).max())
    if scale == 0:
        raise NodalError("zero field has no nodal decomposition")
    mesh = space.mesh
    areas = mesh.areas()

    def build(tau):
        signs = _element_signs(space, coeffs, tau * scale)
        comp, vols = _components(mesh, signs)
        band = float(areas[signs == 0].sum())
        return signs, comp, vols, band

    signs, comp, vols, band = build(band_frac)
    _, _, vols_half, _ = build(band_frac / 2)
    stable = len(vols) == len(vols_half)
    return NodalDecomposition(signs, comp, vols, band, len(vols),
                              band_frac * scale, stable)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

@dataclass
class CourantReport:
    rows: list          # (index k, eigenvalue, count, bound_ok) for simple pairs
    skipped: list       # (index, eigenvalue, reason)
    passed: bool


def courant_check(space: FeSpace, eigenpairs, band_frac: float = 1e-3,
                  skip_rel_gap: float = 1e-4) -> CourantReport:
    """Courant bound: the k-th (simple) eigenfunction has at most k nodal domains.

    Near-degenerate pairs are skipped with a note: a mesh-split symmetric pair
    mixes arbitrarily, so its members are not trustworthy single eigenfunctions.
    """
    vals = [p.value for p in eigenpairs]
    rows, skipped = [], []
    for k, pair in enumerate(eigenpairs, start=1):
        gaps = [abs(pair.value - v) / max(abs(pair.value), 1e-300)
                for j, v in enumerate(vals) if j != k - 1]
        if pair.clustered or (gaps and min(gaps) < skip_rel_gap):
            skipped.append((k, pair.value, "near-degenerate"))
            continue
        dec = nodal_domains(space, pair.coeffs, band_frac)
        rows.append((k, pair.value, dec.count, dec.count <= k))
    return CourantReport(rows, skipped, all(r[3] for r in rows))


@dataclass
class PositivityReport:
    region: str
    min_value: float
    max_value: float
    n_elements: int
    hopf_max_flux: float      # most positive consistent wall flux near the anchor
    passed: bool


def anchor_nodal_distance(space: FeSpace, decomp: NodalDecomposition,
                          anchor=(0.0, 0.0)) -> float:
    """Distance from the anchor to the nearest band (nodal-set) element."""
    els = np.flatnonzero(decomp.signs == 0)
    if len(els) == 0:
        return float("inf")
    cents = space.mesh.centroids()[els]
    return float(np.min(np.linalg.norm(cents - np.asarray(anchor), axis=1)))


def neck_positivity(space_eps: FeSpace, v_coeffs, delta: float,
                    u0_space: FeSpace = None, u0_decomp: NodalDecomposition = None,
                    u0_pair=None, anchor=(0.0, 0.0)) -> PositivityReport:
    """Strict-sign verdict for the widened-domain eigenfunction on the neck
    plus the |x| <= delta ball, with the Hopf-consistency of the cavity mode.

    Precondition (checked first): the cavity eigenfunction's nodal set stays
    at distance > delta from the anchor; violating it is a hypothesis failure,
    not a proposition failure.
    """
    if u0_decomp is not None:
        dist = anchor_nodal_distance(u0_space, u0_decomp, anchor)
        if dist <= delta:
            raise NodalError(
                f"hypothesis failure: anchor sits {dist:.3f} from the nodal set "
                f"of the cavity mode (need > delta = {delta:.3f})")

    mesh = space_eps.mesh
    cents = mesh.centroids()
    near = np.linalg.norm(cents - np.asarray(anchor), axis=1) <= delta
    sel = (mesh.tri_region == REG_NECK) | near
    nodes = np.unique(space_eps.tri_dofs[sel])
    nodes = nodes[~space_eps.dirichlet_mask[nodes]]
    vals = v_coeffs[nodes]
    vmin, vmax = float(vals.min()), float(vals.max())
    verdict = (vmin > 0 and vmax > 0) or (vmin < 0 and vmax < 0)

    hopf = float("nan")
    if u0_pair is not None and u0_space is not None:
        hopf = _hopf_flux(u0_space, u0_pair, delta, anchor)
        verdict = verdict and (hopf < 0)
    return PositivityReport("neck + ball(delta)", vmin, vmax, int(np.sum(sel)),
                            hopf, verdict)


def _hopf_flux(space, pair, delta, anchor):
    """Largest consistent wall-flux density of the (positive) cavity mode on
    boundary edges within the delta-ball: strictly negative when Hopf holds."""
    from . import fem
    K, M = fem._assemble_pair(space)
    r = K @ pair.coeffs - pair.value * (M @ pair.coeffs)
    edges = space.mesh.boundary_edges()
    keep = []
    for a, b in edges:
        mid = 0.5 * (space.mesh.vertices[a] + space.mesh.vertices[b])
        if np.linalg.norm(mid - np.asarray(anchor)) <= delta:
            keep.append((a, b))
    if not keep:
        raise NodalError("no wall edges inside the anchor ball")
    vals, _ = fem.edge_flux_values(space, r, np.array(keep))
    return float(np.max(vals))


@dataclass
class MonotonicityRow:
    eps: float
    count: int
    neck_volume: float
    ok: bool


@dataclass
class MonotonicityReport:
    m_reference: int
    rows: list
    threshold_eps: float
    passed: bool


def count_monotonicity(u0_count: int, family) -> MonotonicityReport:
    """Nodal-domain count of the widened-domain eigenfunctions never exceeds
    the cavity count; ``family`` yields (eps, space, coeffs, neck_volume)."""
    rows = []
    for eps, space, coeffs, neck_vol in family:
        dec = nodal_domains(space, coeffs)
        rows.append(MonotonicityRow(float(eps), dec.count, float(neck_vol),
                                    dec.count <= u0_count))
    rows.sort(key=lambda r: -r.eps)
    ok_eps = [r.eps for r in rows if r.ok]
    threshold = max(ok_eps) if ok_eps else float("nan")
    passed = all(r.ok for r in rows if r.eps <= threshold) and bool(ok_eps)
    return MonotonicityReport(u0_count, rows, threshold, passed)


@dataclass
class VolumeFloorReport:
    eigenvalue: float
    floor: float
    volumes: np.ndarray
    band_volume: float
    margins: np.ndarray
    passed: bool


def volume_floor_check(decomp: NodalDecomposition, lam: float) -> VolumeFloorReport:
    """Every nodal domain must hold area >= pi j01^2 / lambda, up to the band
    area the discrete decomposition assigns to the nodal set."""
    floor = math.pi * J01_SQ / lam
    margins = decomp.volumes - (floor - decomp.band_volume)
    return VolumeFloorReport(lam, floor, decomp.volumes, decomp.band_volume,
                             margins, bool(np.all(margins >= 0)))
