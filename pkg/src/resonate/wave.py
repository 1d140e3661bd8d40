"""Time-domain wave evolution on the truncated resonator.

Lumped-P1 leapfrog with a graded damping sponge in the absorber region;
initial data is spectrally windowed around the tracked cavity energy by a
Chebyshev polynomial filter, evolved, and the local-energy decay is fitted
against the resonance width.  The resonant projection supplies the predicted
amplitude of the exponential term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .fem import Assembly, Field
from .meshing import Mesh, REG_ABSORBER
from .reporting import fit_line


class WaveError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# smooth windows
# ---------------------------------------------------------------------------

def _smoothstep(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1 (exp(-1/u) profile)."""
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    def f(t):
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = np.exp(-1.0 / t[pos])
        return out
    a, b = f(u), f(1.0 - u)
    return a / (a + b)


def energy_window(center: float, plateau: float, support: float):
    """psi: 1 on [center - plateau, center + plateau], 0 outside
    [center - support, center + support], C-infinity in between."""
    if not 0 < plateau < support:
        raise WaveError("need 0 < plateau < support")

    def psi(lam):
        lam = np.asarray(lam, dtype=float)
        lo = _smoothstep((lam - (center - support)) / (support - plateau))
        hi = _smoothstep(((center + support) - lam) / (support - plateau))
        return lo * hi
    return psi


def spatial_cutoff(center, r_one: float, r_zero: float):
    """chi: 1 inside radius r_one around center, 0 beyond r_zero, smooth between."""
    if r_one >= r_zero:
        raise WaveError("need r_one < r_zero")
    center = np.asarray(center, dtype=float)

    def chi(pts):
        r = np.linalg.norm(np.atleast_2d(pts) - center, axis=1)
        return _smoothstep((r_zero - r) / (r_zero - r_one))
    return chi


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

@dataclass
class WaveOperators:
    asm: Assembly
    K: sp.csr_matrix            # free-node stiffness
    m_lump: np.ndarray          # free-node lumped mass
    sigma: np.ndarray           # free-node damping profile
    lam_max: float
    chi_nodes: np.ndarray       # chi evaluated at free nodes
    K_loc: sp.csr_matrix        # local-energy stiffness (chi = 1 region)
    m_loc: np.ndarray           # local lumped mass


def _lam_max_bound(K, m_lump):
    """Rigorous upper bound on lam_max(M^-1 K): row sums of |K| over lumped mass."""
    rowsum = np.asarray(abs(K).sum(axis=1)).ravel()
    return float(np.max(rowsum / m_lump))


def build_wave_operators(mesh: Mesh, chi, sponge_center, sponge_r0: float,
                         sponge_width: float, sponge_strength: float) -> WaveOperators:
    """Lumped-P1 operators with a quadratic damping ramp past sponge_r0."""
    asm = fem.assemble(mesh, order=1)
    space = asm.space
    free = space.free
    K = asm.K
    m_lump = asm.lumped_mass()[free]
    if np.any(m_lump <= 0):
        raise WaveError("non-positive lumped mass")
    r = np.linalg.norm(space.nodes[free] - np.asarray(sponge_center), axis=1)
    u = np.maximum(r - sponge_r0, 0.0) / sponge_width
    sigma = sponge_strength * u**2
    lam_max = _lam_max_bound(K, m_lump)

    chi_n = chi(space.nodes[free]) if chi is not None else np.ones(len(free))
    cents = mesh.centroids()
    loc_els = np.flatnonzero(chi(cents) >= 0.999) if chi is not None else \
        np.arange(len(mesh.triangles))
    K_loc_full, M_loc_full = fem._assemble_pair(space, elements=loc_els)
    m_loc = np.asarray(M_loc_full.sum(axis=1)).ravel()[free]
    K_loc = K_loc_full[free][:, free].tocsr()
    return WaveOperators(asm, K, m_lump, sigma, lam_max, chi_n, K_loc, m_loc)


def stable_dt(ops: WaveOperators, safety: float = 0.9) -> float:
    return safety * 2.0 / math.sqrt(ops.lam_max)


# ---------------------------------------------------------------------------
# spectral filter
# ---------------------------------------------------------------------------

def spectral_filter(ops: WaveOperators, f, psi, tol: float = 1e-9,
                    max_degree: int = 16384):
    """Chebyshev approximation of psi applied to the (lumped) operator.

    The degree doubles until the coefficient tail falls below tolerance;
    exceeding the bound before that is an error.
    """
    lam_hi = 1.02 * ops.lam_max

    def psi_mapped(t):
        return psi(0.5 * lam_hi * (t + 1.0))

    deg = 512
    coeffs = None
    while deg <= max_degree:
        c = np.polynomial.chebyshev.chebinterpolate(psi_mapped, deg)
        tail = np.abs(c[-max(8, deg // 50):]).max()
        if tail < tol:
            coeffs = c
            break
        deg *= 2
    if coeffs is None:
        raise WaveError(f"Chebyshev degree bound {max_degree} exceeded")

    # Clenshaw-free forward recurrence: T_k(Á) f with Á = 2P/lam_hi - I
    def op(x):
        return (ops.K @ x) / ops.m_lump * (2.0 / lam_hi) - x

    t_prev = f.copy()
    t_curr = op(f)
    out = coeffs[0] * t_prev + coeffs[1] * t_curr
    for k in range(2, len(coeffs)):
        t_next = 2.0 * op(t_curr) - t_prev
        out += coeffs[k] * t_next
        t_prev, t_curr = t_curr, t_next
    return out


# ---------------------------------------------------------------------------
# evolution
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    local_energy: np.ndarray
    conserved_energy: np.ndarray
    dt: float
    final_state: tuple


def local_energy(ops: WaveOperators, u, v):
    return 0.5 * float(v @ (ops.m_loc * v)) + 0.5 * float(u @ (ops.K_loc @ u))


def evolve(ops: WaveOperators, u0, v0, T: float, dt: float = None,
           sample_every: int = 50, use_sponge: bool = True) -> Trajectory:
    """Leapfrog with per-node damping 2 sigma du/dt in the sponge.

    Samples (t, local energy, discrete conserved energy); the conserved energy
    uses the staggered-velocity form that plain leapfrog preserves exactly.
    """
    if dt is None:
        dt = stable_dt(ops)
    if dt > 2.0 / math.sqrt(ops.lam_max):
        raise WaveError(f"dt {dt:.3e} violates the stability bound "
                        f"{2.0 / math.sqrt(ops.lam_max):.3e}")
    n_steps = int(math.ceil(T / dt))
    sig = ops.sigma if use_sponge else np.zeros_like(ops.sigma)
    damp_plus = 1.0 + sig * dt
    damp_minus = 1.0 - sig * dt

    u_prev = np.array(u0, dtype=float)
    accel = -(ops.K @ u_prev) / ops.m_lump
    u_curr = u_prev + dt * v0 + 0.5 * dt * dt * accel

    times, eloc, econs = [], [], []
    for n in range(1, n_steps + 1):
        if n % sample_every == 1 or n == n_steps:
            v_c = (u_curr - u_prev) / dt
            times.append((n - 0.5) * dt)
            u_mid = 0.5 * (u_curr + u_prev)
            eloc.append(local_energy(ops, u_mid, v_c))
            econs.append(0.5 * float(v_c @ (ops.m_lump * v_c))
                         + 0.5 * float(u_curr @ (ops.K @ u_prev)))
        accel = -(ops.K @ u_curr) / ops.m_lump
        u_next = (2.0 * u_curr - damp_minus * u_prev + dt * dt * accel) / damp_plus
        u_prev, u_curr = u_curr, u_next
    v_final = (u_curr - u_prev) / dt
    return Trajectory(np.array(times), np.array(eloc), np.array(econs), dt,
                      (u_curr, v_final))


@dataclass
class DecayFit:
    rate: float
    amplitude: float
    fit_residual: float
    window: tuple
    target_rate: float

    @property
    def rate_ratio(self):
        return self.rate / self.target_rate if self.target_rate else float("nan")


def decay_fit(traj: Trajectory, target_rate: float, t_start: float = None,
              floor: float = 1e-20) -> DecayFit:
    """Linear fit of ln(local energy) over the post-transient window."""
    E = traj.local_energy
    t = traj.times
    if t_start is None:
        t_start = 0.15 * t[-1]
    keep = (t >= t_start) & (E > floor * max(E.max(), 1e-300))
    if np.sum(keep) < 8:
        raise WaveError("energy fell below the floor before the fit window")
    slope, intercept, resid = fit_line(t[keep], np.log(E[keep]))
    return DecayFit(-slope, math.exp(intercept), resid,
                    (float(t[keep][0]), float(t[keep][-1])), target_rate)


# ---------------------------------------------------------------------------
# resonant projection
# ---------------------------------------------------------------------------

def pi_projection(ops: WaveOperators, u_res, alpha_eps: complex, chi_nodes, f):
    """Coefficient alpha^-1 <f, chi conj(u)> and the projected complex field
    chi u scaled by it (all on the wave mesh's free nodes)."""
    chi_u = chi_nodes * u_res
    M = ops.asm.M
    coeff = (f @ (M @ chi_u)) / alpha_eps
    return complex(coeff), coeff * chi_u


def projected_initial_energy(ops: WaveOperators, coeff, chi_u, rho: complex):
    """Local energy of the projected exponential term at t = 0, phase-averaged.

    For w(t) = Re[c e^{-it sqrt(rho)} chi u], the energy over a period is
    0.5 |c|^2 (lambda <chi u, chi u>_loc + |sqrt(rho)|^2 ... ) / 2; evaluated
    discretely with the same local-energy functional used by the fits.
    """
    sq = np.sqrt(rho)
    w0 = coeff * chi_u
    # phase-average of the quadratic energy over the carrier oscillation
    e_pot = 0.25 * float(np.real(np.conj(w0) @ (ops.K_loc @ w0)))
    e_kin = 0.25 * abs(sq) ** 2 * float(np.real(np.conj(w0) @ (ops.m_loc * w0)))
    return e_pot + e_kin
