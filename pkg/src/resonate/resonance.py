"""Scattering resonances via the absorbing-layer complex eigenproblem.

The resonance near a cavity eigenvalue is computed as an eigenvalue of the
complex-stretched operator on the truncated domain, validated by a 1D
transfer-matrix oracle and by robustness of the result under layer-parameter
perturbations.  The width law is checked by sweeping the neck width and
fitting the slope of ln|Im rho| against 1/eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .fem import Assembly, Field
from .geometry import CavitySpec, ResonatorSpec, build_resonator, alpha0 as cs_alpha0
from .meshing import (Mesh, REG_ABSORBER, REG_CAVITY, REG_EXTERIOR, REG_NECK,
                      triangulate_truncated)
from .reporting import fit_line

PRECISION_FLOOR_EXPONENT = 30.0   # 2 alpha0 L / eps beyond which Im rho drowns


class ResonanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PMLConfig:
    """Absorbing-layer parameters: quadratic stretch sigma0 ((r-r0)/d)^2 past r0."""

    r0: float
    thickness: float
    sigma0: float
    exponent: int = 2
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.exponent != 2:
            raise ValueError("profile exponent is fixed at 2")
        if self.sigma0 <= 0 or self.thickness <= 0:
            raise ValueError("sigma0 and thickness must be positive")


def default_pml(spec: ResonatorSpec, lam_ref: float) -> PMLConfig:
    """Layer sized on the reference wavelength; strength chosen so the
    round-trip damping exponent 2 sqrt(lam) (r0 + d) sigma0 is ~14."""
    wl = 2 * math.pi / math.sqrt(lam_ref)
    r0 = spec.truncation_radius
    d = 0.6 * wl
    sigma0 = 7.0 / (math.sqrt(lam_ref) * (r0 + d))
    return PMLConfig(r0=r0, thickness=d, sigma0=sigma0, center=tuple(spec.envelope.center))


@dataclass
class ResonantState:
    rho: complex
    field: Field                    # complex coefficients on the truncated mesh
    alpha_eps: complex              # bilinear square integral over the dilated domain
    residual: float
    pml_spread: float               # max |rho - rho_variant| over layer perturbations
    localization: float             # interior mass fraction of |u|^2
    flagged: bool
    eps: float = float("nan")
    variants: dict = field(default_factory=dict)


@dataclass
class SweepRow:
    eps: float
    lam_eps: float
    rho: complex
    im_abs: float
    pml_spread: float
    floor_flagged: bool
    robust_flagged: bool

    @property
    def excluded(self):
        return self.floor_flagged or self.robust_flagged

    @property
    def eps_ln_im(self):
        return self.eps * math.log(self.im_abs)


@dataclass
class SweepResult:
    rows: list
    slope: float
    intercept: float
    fit_residual: float
    target: float
    alpha0: float
    L: float


# ---------------------------------------------------------------------------
# complex shift-invert eigensolver
# ---------------------------------------------------------------------------

def complex_eigs_near(K, M, sigma: complex, k: int = 6, seed: int = 11):
    """Eigenvalues of K x = rho M x nearest sigma for complex-symmetric pencils.

    Reduced to standard ARPACK form on OP = (K - sigma M)^{-1} M, which avoids
    any M-inner-product requirement on the (non-Hermitian) mass matrix.
    """
    A = (K - sigma * M).tocsc()
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise ResonanceError(f"factorization at shift {sigma} failed: {exc}") from exc
    n = K.shape[0]

    def mv(x):
        return lu.solve(M @ x)

    OP = spla.LinearOperator((n, n), matvec=mv, dtype=complex)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    k_eff = min(k, n - 2)
    ncv = min(n - 1, max(4 * k_eff + 5, 40))
    try:
        mu, vecs = spla.eigs(OP, k=k_eff, which="LM", v0=v0, maxiter=2000, ncv=ncv)
    except spla.ArpackNoConvergence as exc:
        if len(exc.eigenvalues) >= 1:
            mu, vecs = exc.eigenvalues, exc.eigenvectors
        else:
            raise ResonanceError(f"Arnoldi did not converge at shift {sigma}") from exc
    rho = sigma + 1.0 / mu
    order = np.argsort(np.abs(rho - sigma))
    return rho[order], vecs[:, order]


# ---------------------------------------------------------------------------
# resonator operators and resonance search
# ---------------------------------------------------------------------------

@dataclass
class TruncatedOperators:
    mesh: Mesh
    asm: Assembly                  # complex-stretched pair
    mass_interior: sp.csr_matrix   # real mass over cavity + neck
    mass_all: sp.csr_matrix        # real mass over the whole truncated domain
    pml: PMLConfig


def truncated_operators(spec: ResonatorSpec, pml: PMLConfig, h: float,
                        neck_layers: int = 8, order: int = 2, seed: int = 0,
                        h_exterior: float = None, mesh: Mesh = None) -> TruncatedOperators:
    if mesh is None:
        outer = pml.r0 + 1.6 * pml.thickness
        mesh = triangulate_truncated(spec, h, neck_layers, outer_radius=outer,
                                     pml_inner_radius=pml.r0,
                                     h_exterior=h_exterior, seed=seed)
    asm = fem.assemble_absorbing(mesh, pml.center, pml.r0, pml.thickness,
                                 pml.sigma0, order)
    m_int = fem.region_mass(asm.space, (REG_CAVITY, REG_NECK))
    m_all = fem.region_mass(asm.space, (REG_CAVITY, REG_NECK, REG_EXTERIOR,
                                        REG_ABSORBER))
    return TruncatedOperators(mesh, asm, m_int, m_all, pml)


def _select_resonance(ops: TruncatedOperators, rho_list, vecs, lam0, window):
    free = ops.asm.space.free
    best = None
    for j, rho in enumerate(rho_list):
        if abs(rho - lam0) >= window:
            continue
        x = np.zeros(ops.asm.space.n_nodes, dtype=complex)
        x[free] = vecs[:, j]
        num = np.real(np.conj(x) @ (ops.mass_interior @ x))
        den = np.real(np.conj(x) @ (ops.mass_all @ x))
        loc = num / den
        if best is None or loc > best[2]:
            best = (rho, x, loc)
    if best is None:
        raise ResonanceError(f"no eigenvalue within {window:.3g} of {lam0:.6g}")
    return best


def _normalized_state(ops, rho, x, probe_point):
    """Unit L2(interior) norm, phase fixed to a real positive probe value."""
    nrm = math.sqrt(np.real(np.conj(x) @ (ops.mass_interior @ x)))
    x = x / nrm
    probe = ops.asm.space.nearest_node(np.asarray(probe_point))
    v = x[probe]
    if abs(v) < 1e-10 * np.abs(x).max():
        idx = np.flatnonzero(np.abs(x) > 0.5 * np.abs(x).max())[0]
        v = x[idx]
    x = x * (abs(v) / v)
    return x


def find_resonance(ops: TruncatedOperators, lam0: float, gap: float,
                   probe_point=(-0.3, 0.0), n_candidates: int = 6,
                   check_robustness: bool = True, seed: int = 11,
                   eps: float = float("nan")) -> ResonantState:
    """Resonance of the truncated complex-scaled operator nearest lam0.

    Candidates inside the half-gap window are ranked by interior-mass
    localization; the winner is re-solved under layer perturbations
    {sigma0 x 0.5, sigma0 x 2, d x 1.5} and flagged untrusted when rho moves
    by 10% of |Im rho| or more.
    """
    K, M = ops.asm.K, ops.asm.M
    window = 0.5 * gap
    rho_list, vecs = complex_eigs_near(K, M, lam0 + 0j, k=n_candidates, seed=seed)
    rho, x, loc = _select_resonance(ops, rho_list, vecs, lam0, window)
    x = _normalized_state(ops, rho, x, probe_point)
    alpha = x @ (ops.asm.M_full @ x)
    res = float(np.linalg.norm(K @ x[ops.asm.space.free] - rho * (M @ x[ops.asm.space.free]))
                / np.linalg.norm(M @ x[ops.asm.space.free]))

    spread = 0.0
    variants = {}
    if check_robustness:
        for name, (s_fac, d_fac) in {"sigma_half": (0.5, 1.0),
                                     "sigma_double": (2.0, 1.0),
                                     "thick_1p5": (1.0, 1.5)}.items():
            pml_v = replace(ops.pml, sigma0=ops.pml.sigma0 * s_fac,
                            thickness=ops.pml.thickness * d_fac)
            asm_v = fem.assemble_absorbing(ops.mesh, pml_v.center, pml_v.r0,
                                           pml_v.thickness, pml_v.sigma0,
                                           ops.asm.space.order)
            try:
                rho_v, vecs_v = complex_eigs_near(asm_v.K, asm_v.M, lam0 + 0j,
                                                  k=n_candidates, seed=seed)
                ops_v = TruncatedOperators(ops.mesh, asm_v, ops.mass_interior,
                                           ops.mass_all, pml_v)
                rv, _, _ = _select_resonance(ops_v, rho_v, vecs_v, lam0, window)
            except ResonanceError:
                rv = complex("nan")
            variants[name] = rv
            if not np.isnan(rv.real):
                spread = max(spread, abs(rv - rho))
            else:
                spread = float("inf")

    flagged = bool(spread >= 0.1 * abs(rho.imag)) if check_robustness else False
    return ResonantState(complex(rho), Field(ops.asm.space, x), complex(alpha),
                         res, float(spread), float(loc), flagged, eps, variants)


# ---------------------------------------------------------------------------
# width-law sweep
# ---------------------------------------------------------------------------

def cavity_reference(cavity: CavitySpec, h: float, order: int = 2,
                     seed: int = 0, count: int = 5, index: int = 1):
    """(lam0, gap) of the cavity eigenvalue targeted by a sweep (1-based index)."""
    from . import spectra
    from .meshing import triangulate

    cav_mesh = triangulate(cavity, h=h * 0.7, seed=seed)
    asm_c = fem.assemble(cav_mesh, order)
    pairs = spectra.dirichlet_eigs(asm_c, count, shift=0.0, seed=seed + 5)
    lam0 = pairs[index - 1].value
    gap = spectra.spectral_gap([p.value for p in pairs], lam0)
    return lam0, gap


def sweep_row(cavity: CavitySpec, L: float, eps: float, h: float,
              neck_layers: int, order: int, lam0: float, gap: float,
              sigma0: float = None, seed: int = 0,
              alpha0: float = math.pi) -> SweepRow:
    """One independent width-sweep row (safe to run in a worker process)."""
    eps = float(eps)
    wl = 2 * math.pi / math.sqrt(lam0)
    spec = build_resonator(cavity, L, eps)
    spec = replace(spec, truncation_radius=spec.envelope.radius + wl)
    pml = default_pml(spec, lam0)
    if sigma0 is not None:
        pml = replace(pml, sigma0=sigma0)
    floor_flag = 2 * alpha0 * L / eps > PRECISION_FLOOR_EXPONENT
    ops = truncated_operators(spec, pml, h, neck_layers, order, seed=seed,
                              h_exterior=wl / 8)
    st = find_resonance(ops, lam0, gap, eps=eps,
                        check_robustness=not floor_flag, seed=seed + 11)
    return SweepRow(eps, float(st.rho.real), st.rho, abs(st.rho.imag),
                    st.pml_spread, floor_flag, st.flagged)


def fit_sweep(rows, L: float, alpha0: float = math.pi) -> SweepResult:
    rows = sorted(rows, key=lambda r: -r.eps)
    good = [r for r in rows if not r.excluded]
    if len(good) < 3:
        raise ResonanceError(f"only {len(good)} unflagged rows; fit refused")
    slope, intercept, resid = fit_line([1.0 / r.eps for r in good],
                                       [math.log(r.im_abs) for r in good])
    return SweepResult(rows, slope, intercept, resid, target=-2 * alpha0 * L,
                       alpha0=alpha0, L=L)


def prefactor_corrected_slope(rows):
    """Diagnostic 3-parameter fit ln|Im rho| = s/eps + p ln eps + c that models
    the subexponential prefactor; returns (s, p)."""
    good = [r for r in rows if not r.excluded]
    x1 = np.array([1.0 / r.eps for r in good])
    x2 = np.array([math.log(r.eps) for r in good])
    y = np.array([math.log(r.im_abs) for r in good])
    A = np.column_stack([x1, x2, np.ones_like(x1)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[0]), float(coef[1])


def width_sweep(cavity: CavitySpec, L: float, eps_list, h: float,
                neck_layers: int = 8, order: int = 2, lam0: float = None,
                gap: float = None, pml_sigma0: float = None, seed: int = 0,
                workers: int = 1) -> SweepResult:
    """Resonance widths over a neck-width sweep with the fitted slope of
    ln|Im rho| against 1/eps, to be compared with -2 alpha0 L."""
    if lam0 is None or gap is None:
        lam0_c, gap_c = cavity_reference(cavity, h, order, seed)
        lam0 = lam0_c if lam0 is None else lam0
        gap = gap_c if gap is None else gap
    args = [(cavity, L, float(eps), h, neck_layers, order, lam0, gap,
             pml_sigma0, seed) for eps in eps_list]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_row_star, args))
    else:
        rows = [_sweep_row_star(a) for a in args]
    return fit_sweep(rows, L)


def _sweep_row_star(args):
    return sweep_row(*args)


# ---------------------------------------------------------------------------
# 1D oracle: transfer-matrix resonances for piecewise-constant barriers
# ---------------------------------------------------------------------------

def _transfer_state(k: complex, segments):
    """Propagate (u, u') of -u'' + V u = k^2 u from x=0 (u=0, u'=1) through the
    listed (x0, x1, V) segments; returns (u, u', peak amplitude met)."""
    x = 0.0
    u, up = 0.0 + 0j, 1.0 + 0j
    amp = 1.0
    kk = max(abs(k), 1e-30)
    for (x0, x1, V) in segments:
        if x0 > x:  # free gap before the segment
            size = abs(u) + abs(up) / kk
            u, up, g = _advance(u, up, x0 - x, 0.0, k)
            x = x0
            amp = max(amp, g * size)
        size = abs(u) + abs(up) / kk
        u, up, g = _advance(u, up, x1 - x0, V, k)
        x = x1
        amp = max(amp, g * size)
    return u, up, amp


def _advance(u, up, ell, V, k):
    kap2 = complex(V) - k * k
    kap = np.sqrt(kap2)
    if abs(kap) < 1e-14:
        return u + ell * up, up, 1.0
    c, s = np.cosh(kap * ell), np.sinh(kap * ell)
    return c * u + (s / kap) * up, kap * s * u + c * up, max(abs(c), 1.0)


def _outgoing_defect(k: complex, segments):
    """Matching defect u' - ik u at the end of the potential region, scaled by
    the peak transfer amplitude (backward-error normalization: a tall barrier
    amplifies roundoff by cosh of its opacity)."""
    u, up, amp = _transfer_state(k, segments)
    return up - 1j * k * u, abs(k) * amp


def oracle_1d(segments, seeds, newton_tol: float = 1e-13, max_iter: int = 60):
    """Resonances rho = k^2 of the half-line problem with Dirichlet end at 0,
    piecewise-constant potential ``segments`` = [(x0, x1, V), ...], and an
    outgoing wave beyond the last segment.  Roots of the matching determinant
    by complex Newton from the given k seeds; relative residual < 1e-12."""
    roots = []
    for k in seeds:
        k = complex(k)
        ok = False
        for _ in range(max_iter):
            D, _ = _outgoing_defect(k, segments)
            h = 1e-7 * max(1.0, abs(k))
            Dp = (_outgoing_defect(k + h, segments)[0]
                  - _outgoing_defect(k - h, segments)[0]) / (2 * h)
            step = D / Dp
            k = k - step
            if abs(step) < newton_tol * max(1.0, abs(k)):
                ok = True
                break
        if k.real < 0:
            k = -np.conj(k)   # mirror root with the physical Re k > 0
        D, scale = _outgoing_defect(k, segments)
        if not ok or abs(D) > 1e-12 * scale:
            raise ResonanceError(f"Newton failed from seed {k}")
        if k.imag > 1e-10 * max(1.0, abs(k)):
            raise ResonanceError(f"root {k} is not outgoing (Im k > 0)")
        roots.append(k * k)
    return roots


# ---------------------------------------------------------------------------
# 1D absorbing-layer cross-validation
# ---------------------------------------------------------------------------

def absorbing_resonance_1d(segments, seed_rho: complex, x_layer: float,
                           thickness: float, sigma0: float, n_elem: int = 2400,
                           seed: int = 3):
    """Same 1D problem discretized with a P2 absorbing layer; returns the
    eigenvalue of the stretched operator nearest seed_rho."""
    X = x_layer + thickness
    xe = np.linspace(0.0, X, n_elem + 1)
    nodes = np.empty(2 * n_elem + 1)
    nodes[0::2] = xe
    nodes[1::2] = 0.5 * (xe[:-1] + xe[1:])
    n = len(nodes)

    def Vfun(x):
        out = np.zeros_like(x)
        for (a, b, V) in segments:
            out = np.where((x >= a) & (x <= b), V, out)
        return out

    def stretch(x):
        u = np.maximum(x - x_layer, 0.0) / thickness
        sig = sigma0 * u**2
        dsig = 2 * sigma0 * u / thickness
        return 1.0 + 1j * (sig + x * dsig)

    # 4-point Gauss on [-1, 1]
    gp = np.array([-0.8611363115940526, -0.3399810435848563,
                   0.3399810435848563, 0.8611363115940526])
    gw = np.array([0.3478548451374538, 0.6521451548625461,
                   0.6521451548625461, 0.3478548451374538])

    rows, cols, kv, mv = [], [], [], []
    for e in range(n_elem):
        x0, x1 = xe[e], xe[e + 1]
        he = x1 - x0
        dofs = [2 * e, 2 * e + 1, 2 * e + 2]
        Ke = np.zeros((3, 3), dtype=complex)
        Me = np.zeros((3, 3), dtype=complex)
        for t, w in zip(gp, gw):
            xi = 0.5 * (t + 1.0)
            x = x0 + he * xi
            N = np.array([(1 - xi) * (1 - 2 * xi), 4 * xi * (1 - xi),
                          xi * (2 * xi - 1)])
            dN = np.array([4 * xi - 3, 4 - 8 * xi, 4 * xi - 1]) / he
            s = stretch(np.array([x]))[0]
            Ke += 0.5 * he * w * (np.outer(dN, dN) / s
                                  + s * Vfun(np.array([x]))[0] * np.outer(N, N))
            Me += 0.5 * he * w * s * np.outer(N, N)
        for a in range(3):
            for b in range(3):
                rows.append(dofs[a])
                cols.append(dofs[b])
                kv.append(Ke[a, b])
                mv.append(Me[a, b])
    K = sp.csr_matrix((kv, (rows, cols)), shape=(n, n))
    M = sp.csr_matrix((mv, (rows, cols)), shape=(n, n))
    free = np.arange(1, n - 1)   # Dirichlet at both ends
    K, M = K[free][:, free].tocsc(), M[free][:, free].tocsc()
    rho, _ = complex_eigs_near(K, M, complex(seed_rho), k=4, seed=seed)
    return rho[0]


# ---------------------------------------------------------------------------
# neck profile
# ---------------------------------------------------------------------------

def neck_decay_profile(field: Field, spec: ResonatorSpec, n_stations: int = 14,
                       fit_window=(0.08, 0.62)):
    """Least-squares slope of ln|transverse-ground-mode coefficient| along the
    neck axis, to compare with -alpha0/eps."""
    ev = fem.FieldEvaluator(field.space)
    eps = spec.eps
    xs = np.linspace(fit_window[0] * spec.L, fit_window[1] * spec.L, n_stations)
    ny = 24
    yq, wq = np.polynomial.legendre.leggauss(ny)
    yq = 0.5 * eps * yq
    wq = 0.5 * eps * wq
    mode = np.cos(math.pi * yq / eps) * math.sqrt(2.0 / eps)
    coef = []
    for x in xs:
        pts = np.stack([np.full(ny, x), yq], axis=1)
        vals = ev.evaluate(field, pts)
        coef.append(np.sum(wq * mode * vals))
    coef = np.abs(np.array(coef))
    if np.any(coef <= 0):
        raise ResonanceError("neck under-resolved: vanishing mode coefficient")
    slope, _, resid = fit_line(xs, np.log(coef))
    return slope, resid
