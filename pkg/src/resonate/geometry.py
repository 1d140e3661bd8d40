"""Resonator geometry: cavity curves, neck, envelope, membership predicates.

The resonator is a bounded cavity attached at the origin to a straight neck of
length L and width eps running along +x, opening through the envelope boundary
at M0 = (L, 0) into the unbounded exterior.  All other modules consume the
specs built here; geometry objects are immutable and all operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import jn_zeros

TRANSVERSALITY_MIN_DEG = 10.0


class GeometryError(ValueError):
    """Invalid or inconsistent geometric specification."""


# ---------------------------------------------------------------------------
# cross-section
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrossSection:
    """Neck cross-section: unit interval (2D neck) or unit disc (3D, type level only).

    ``width`` scales the unit shape; the ground-frequency ``alpha0`` scales as 1/width.
    """

    kind: str = "interval"
    dimension: int = 1
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("interval", "disc"):
            raise GeometryError(f"unsupported cross-section kind: {self.kind!r}")
        if self.width <= 0:
            raise GeometryError("cross-section width must be positive")
        expected = {"interval": 1, "disc": 2}[self.kind]
        if self.dimension != expected:
            raise GeometryError(
                f"{self.kind} cross-section has dimension {expected}, got {self.dimension}")

    def scaled(self, s: float) -> "CrossSection":
        if s <= 0:
            raise GeometryError("scale factor must be positive")
        return CrossSection(self.kind, self.dimension, self.width * s)


def alpha0(cs: CrossSection) -> float:
    """Square root of the first Dirichlet eigenvalue of the cross-section.

    Unit interval (length 1): pi.  Unit disc (radius 1): first zero of J0.
    Scaling the section by s divides alpha0 by s.
    """
    if cs.kind == "interval":
        base = math.pi
    elif cs.kind == "disc":
        base = float(jn_zeros(0, 1)[0])
    else:  # pragma: no cover - guarded in constructor
        raise GeometryError(f"unsupported cross-section kind: {cs.kind!r}")
    return base / cs.width


# ---------------------------------------------------------------------------
# cavity boundary curves
# ---------------------------------------------------------------------------

def _smooth_polygon_coeffs(vertices, harmonics, samples=2048):
    """Fourier coefficients of a closed polyline resampled uniformly in arclength."""
    verts = np.asarray(vertices, dtype=float)
    if verts.ndim != 2 or verts.shape[0] < 3 or verts.shape[1] != 2:
        raise GeometryError("polygon needs at least 3 planar vertices")
    closed = np.vstack([verts, verts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    if np.any(seg == 0):
        raise GeometryError("degenerate polygon edge")
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    tgrid = np.linspace(0.0, total, samples, endpoint=False)
    px = np.interp(tgrid, s, closed[:, 0])
    py = np.interp(tgrid, s, closed[:, 1])
    cx = np.fft.rfft(px) / samples
    cy = np.fft.rfft(py) / samples
    m = min(harmonics, len(cx) - 1)
    return cx[: m + 1], cy[: m + 1]


@dataclass(frozen=True)
class CavitySpec:
    """Smooth closed cavity boundary, placed so the neck anchor sits at the origin.

    The body-frame curve (disc, ellipse, or Fourier-smoothed polygon) is rotated
    and translated so that the boundary point selected by ``anchor_t`` maps to 0
    and its outward normal points at angle ``tilt`` from the +x axis (the neck
    axis).  tilt = 0 gives a neck normal to the cavity wall.
    """

    kind: str = "disc"
    radius: float = 1.0
    axes: tuple = (1.0, 0.8)
    vertices: tuple = ()
    harmonics: int = 8
    anchor_t: float = 0.0
    tilt: float = 0.0
    _fourier: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("disc", "ellipse", "smoothed_polygon"):
            raise GeometryError(f"unsupported cavity kind: {self.kind!r}")
        if self.kind == "disc" and self.radius <= 0:
            raise GeometryError("disc radius must be positive")
        if self.kind == "ellipse" and (self.axes[0] <= 0 or self.axes[1] <= 0):
            raise GeometryError("ellipse semi-axes must be positive")
        if self.kind == "smoothed_polygon":
            coeffs = _smooth_polygon_coeffs(self.vertices, self.harmonics)
            object.__setattr__(self, "_fourier", coeffs)
        if abs(self.tilt) >= math.pi / 2:
            raise GeometryError("anchor tilt must be below 90 degrees")

    # -- body frame -------------------------------------------------------

    def _body_point(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "disc":
            return np.stack([self.radius * np.cos(t), self.radius * np.sin(t)], -1)
        if self.kind == "ellipse":
            a, b = self.axes
            return np.stack([a * np.cos(t), b * np.sin(t)], -1)
        cx, cy = self._fourier
        k = np.arange(len(cx))
        ph = np.exp(1j * np.multiply.outer(t, k))
        # rfft convention: f(t) = c0 + 2*Re sum_{k>=1} c_k e^{ikt} with t in [0, 2pi)
        x = np.real(cx[0]) + 2 * np.real(ph[..., 1:] @ cx[1:])
        y = np.real(cy[0]) + 2 * np.real(ph[..., 1:] @ cy[1:])
        return np.stack([x, y], -1)

    def _body_tangent(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "disc":
            return np.stack([-self.radius * np.sin(t), self.radius * np.cos(t)], -1)
        if self.kind == "ellipse":
            a, b = self.axes
            return np.stack([-a * np.sin(t), b * np.cos(t)], -1)
        cx, cy = self._fourier
        k = np.arange(len(cx))
        ph = np.exp(1j * np.multiply.outer(t, k)) * (1j * k)
        x = 2 * np.real(ph[..., 1:] @ cx[1:])
        y = 2 * np.real(ph[..., 1:] @ cy[1:])
        return np.stack([x, y], -1)

    def _body_orientation(self) -> float:
        """+1 if the parametrization runs counter-clockwise (interior to the left)."""
        t = np.linspace(0, 2 * math.pi, 721)
        p = self._body_point(t)
        area2 = np.sum(p[:-1, 0] * p[1:, 1] - p[1:, 0] * p[:-1, 1])
        return 1.0 if area2 > 0 else -1.0

    def _body_normal(self, t):
        tg = self._body_tangent(t)
        orient = self._body_orientation()
        n = np.stack([tg[..., 1], -tg[..., 0]], -1) * orient
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    # -- world frame ------------------------------------------------------

    @property
    def _transform(self):
        p0 = self._body_point(self.anchor_t)
        n0 = self._body_normal(self.anchor_t)
        phi = self.tilt - math.atan2(n0[1], n0[0])
        c, s = math.cos(phi), math.sin(phi)
        rot = np.array([[c, -s], [s, c]])
        return rot, p0

    def point(self, t):
        rot, p0 = self._transform
        return (self._body_point(t) - p0) @ rot.T

    def tangent(self, t):
        rot, _ = self._transform
        return self._body_tangent(t) @ rot.T

    def outward_normal(self, t):
        rot, _ = self._transform
        return self._body_normal(t) @ rot.T

    def contains(self, pts) -> np.ndarray:
        """Strict interior test, vectorized over points of shape (..., 2)."""
        pts = np.asarray(pts, dtype=float)
        rot, p0 = self._transform
        body = pts @ rot + p0
        if self.kind == "disc":
            return np.einsum("...i,...i->...", body, body) < self.radius**2
        if self.kind == "ellipse":
            a, b = self.axes
            return (body[..., 0] / a) ** 2 + (body[..., 1] / b) ** 2 < 1.0
        poly = self._body_point(np.linspace(0, 2 * math.pi, 1024, endpoint=False))
        return _points_in_polygon(body, poly)

    @property
    def center(self) -> np.ndarray:
        t = np.linspace(0, 2 * math.pi, 512, endpoint=False)
        return self.point(t).mean(axis=0)

    @property
    def diameter(self) -> float:
        t = np.linspace(0, 2 * math.pi, 256, endpoint=False)
        p = self.point(t)
        lo, hi = p.min(axis=0), p.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def anchor_graph(self, y: float, span: float = None):
        """Parameter and x-coordinate where the boundary crosses height y near the anchor.

        Transversality makes the boundary a graph x = g(y) in a collar around the
        anchor; solved by bisection on the curve parameter.
        """
        span = span or 1.0
        lo, hi = self.anchor_t - span, self.anchor_t + span
        # world y is monotone in t near the anchor; orient so f(lo) < f(hi)
        def f(t):
            return self.point(t)[1] - y
        a, b = lo, hi
        fa, fb = f(a), f(b)
        if fa * fb > 0:
            raise GeometryError(f"cannot bracket boundary height y={y} near anchor")
        for _ in range(80):
            m = 0.5 * (a + b)
            fm = f(m)
            if fa * fm <= 0:
                b, fb = m, fm
            else:
                a, fa = m, fm
        t = 0.5 * (a + b)
        return t, float(self.point(t)[0])


def _points_in_polygon(pts, poly):
    """Even-odd rule point-in-polygon test; pts (...,2), poly (n,2)."""
    pts = np.atleast_2d(pts)
    x, y = pts[..., 0], pts[..., 1]
    inside = np.zeros(x.shape, dtype=bool)
    n = len(poly)
    px, py = poly[:, 0], poly[:, 1]
    for i in range(n):
        j = (i - 1) % n
        cond = (py[i] > y) != (py[j] > y)
        xin = (px[j] - px[i]) * (y - py[i]) / (py[j] - py[i] + 1e-300) + px[i]
        inside ^= cond & (x < xin)
    return inside


# ---------------------------------------------------------------------------
# envelope and resonator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    """Disc-shaped envelope; M0 = (L, 0) lies on its boundary."""

    center: tuple
    radius: float

    def contains(self, pts):
        pts = np.asarray(pts, dtype=float)
        d = pts - np.asarray(self.center)
        return np.einsum("...i,...i->...", d, d) < self.radius**2

    def boundary_x(self, y: float) -> float:
        """x of the right-hand crossing of the envelope circle at height y."""
        cx, cy = self.center
        dy = y - cy
        if abs(dy) >= self.radius:
            raise GeometryError("height outside envelope")
        return cx + math.sqrt(self.radius**2 - dy**2)


def default_envelope(cavity: CavitySpec, L: float, clearance_frac: float = 0.05) -> Envelope:
    """Largest-clearance disc envelope centered on the neck axis through M0.

    Center (xc, 0) with radius L - xc puts M0 = (L, 0) on the boundary with the
    neck axis exactly radial there; xc is chosen so the cavity closure keeps a
    positive clearance from the envelope boundary.
    """
    t = np.linspace(0, 2 * math.pi, 1024, endpoint=False)
    p = cavity.point(t)
    gap = L - p[:, 0]
    if np.any(gap <= 0):
        raise GeometryError("cavity extends past the neck mouth x = L")
    xc_max = np.min((L**2 - np.einsum("ij,ij->i", p, p)) / (2 * gap))
    clearance = clearance_frac * (L + cavity.diameter)
    xc = float(xc_max - clearance)
    return Envelope(center=(xc, 0.0), radius=L - xc)


@dataclass(frozen=True)
class ResonatorSpec:
    """Cavity + straight neck + envelope, with membership predicates for all regions."""

    cavity: CavitySpec
    envelope: Envelope
    L: float
    eps: float
    eps0: float
    cross_section: CrossSection
    truncation_radius: float

    # -- derived neck geometry ---------------------------------------------

    @property
    def half_width(self) -> float:
        return 0.5 * self.eps

    def neck_wall_x(self, y: float):
        """Axial extent (x_cavity(y), x_envelope(y)) of the neck at height y."""
        _, xl = self.cavity.anchor_graph(y)
        xr = self.envelope.boundary_x(y)
        return xl, xr

    # -- membership predicates ----------------------------------------------

    def in_cavity(self, pts):
        return self.cavity.contains(pts)

    def in_neck(self, pts):
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        slab = (np.abs(y) < self.half_width) & (x >= -self.eps0) & (x <= self.L + self.eps0)
        return slab & self.envelope.contains(pts) & ~self.cavity.contains(pts)

    def in_interior(self, pts):
        """C(eps) = cavity union neck."""
        return self.in_cavity(pts) | self.in_neck(pts)

    def in_exterior(self, pts):
        return _dist_to(pts, self.envelope.center) > self.envelope.radius

    def in_domain(self, pts):
        """Omega(eps) = C(eps) union exterior."""
        return self.in_interior(pts) | self.in_exterior(pts)

    def region_of(self, pts, band: float = 0.0):
        """Classify points: 'cavity' | 'neck' | 'wall' | 'exterior' | 'boundary'.

        ``band`` widens the boundary class to absorb discretization tolerance.
        """
        pts = np.asarray(pts, dtype=float)
        out = np.full(pts.shape[:-1], "wall", dtype=object)
        out[self.in_cavity(pts)] = "cavity"
        out[self.in_neck(pts)] = "neck"
        out[self.in_exterior(pts)] = "exterior"
        if band > 0:
            near = self._near_boundary(pts, band)
            out[near] = "boundary"
        return out

    def _near_boundary(self, pts, band):
        pts = np.asarray(pts, dtype=float)
        t = np.linspace(0, 2 * math.pi, 2048, endpoint=False)
        cav = self.cavity.point(t)
        d_c = np.min(np.linalg.norm(pts[..., None, :] - cav[None, :, :], axis=-1), axis=-1)
        d_b = np.abs(_dist_to(pts, self.envelope.center) - self.envelope.radius)
        d_w = np.abs(np.abs(pts[..., 1]) - self.half_width)
        in_slab_x = (pts[..., 0] > -self.eps0 - band) & (pts[..., 0] < self.L + self.eps0 + band)
        d_w = np.where(in_slab_x, d_w, np.inf)
        return (d_c < band) | (d_b < band) | (d_w < band)

    def to_config(self) -> dict:
        cav = {"kind": self.cavity.kind, "anchor_t": self.cavity.anchor_t,
               "tilt": self.cavity.tilt}
        if self.cavity.kind == "disc":
            cav["radius"] = self.cavity.radius
        elif self.cavity.kind == "ellipse":
            cav["axes"] = list(self.cavity.axes)
        else:
            cav["vertices"] = [list(v) for v in self.cavity.vertices]
            cav["harmonics"] = self.cavity.harmonics
        return {
            "cavity": cav,
            "L": self.L,
            "eps": self.eps,
            "eps0": self.eps0,
            "truncation_radius": self.truncation_radius,
            "envelope": {"center": list(self.envelope.center), "radius": self.envelope.radius},
            "cross_section": {"kind": self.cross_section.kind, "width": self.cross_section.width},
        }


def _dist_to(pts, center):
    pts = np.asarray(pts, dtype=float)
    d = pts - np.asarray(center)
    return np.sqrt(np.einsum("...i,...i->...", d, d))


def default_collar(L: float) -> float:
    """Collar eps0: only needs to be small enough for single boundary crossings."""
    return min(L / 10.0, 0.05)


def build_resonator(cavity: CavitySpec, L: float, eps: float, eps0: float = None,
                    truncation_radius: float = None, envelope: Envelope = None,
                    cross_section: CrossSection = None) -> ResonatorSpec:
    """Construct and validate a resonator spec.

    Raises GeometryError for a degenerate neck (L <= 0), a width too large for
    the anchor geometry, multiple axis crossings of either boundary, or a
    transversality violation at the anchor or the mouth.
    """
    if L <= 0:
        raise GeometryError("degenerate neck: L must be positive")
    if eps <= 0:
        raise GeometryError("neck width eps must be positive")
    if eps0 is None:
        eps0 = default_collar(L)
    if envelope is None:
        envelope = default_envelope(cavity, L)
    if cross_section is None:
        cross_section = CrossSection("interval", 1, 1.0)
    if truncation_radius is None:
        truncation_radius = envelope.radius + 0.75 * cavity.diameter

    m0 = np.array([L, 0.0])
    if abs(np.linalg.norm(m0 - np.asarray(envelope.center)) - envelope.radius) > 1e-9:
        raise GeometryError("M0 = (L, 0) must lie on the envelope boundary")
    t = np.linspace(0, 2 * math.pi, 2048, endpoint=False)
    p = cavity.point(t)
    clear = envelope.radius - _dist_to(p, envelope.center)
    if np.min(clear) <= 0:
        raise GeometryError("cavity closure not strictly inside the envelope")
    if truncation_radius <= envelope.radius:
        raise GeometryError("truncation radius must exceed the envelope radius")

    spec = ResonatorSpec(cavity, envelope, float(L), float(eps), float(eps0),
                         cross_section, float(truncation_radius))

    # neck walls must cross the cavity wall inside the collar
    for y in (-spec.half_width, 0.0, spec.half_width):
        try:
            _, xl = cavity.anchor_graph(y)
        except GeometryError as exc:
            raise GeometryError(f"eps too large for the anchor geometry: {exc}") from exc
        if not (-eps0 <= xl <= eps0 + 0.25 * L):
            raise GeometryError(
                f"eps too large for the anchor geometry: wall crossing x={xl:.4f} at y={y:.4f}")
        xr = envelope.boundary_x(y)
        if not (L - eps0 - 0.25 * L <= xr <= L + eps0):
            raise GeometryError(f"envelope crossing x={xr:.4f} outside collar at y={y:.4f}")

    _check_single_axis_crossings(spec)

    report = check_transversality(spec)
    if not report.passed:
        raise GeometryError(
            "transversality violation: angles "
            f"{report.angle_anchor_deg:.2f} / {report.angle_mouth_deg:.2f} deg "
            f"(threshold {TRANSVERSALITY_MIN_DEG} deg)")
    return spec


def _check_single_axis_crossings(spec: ResonatorSpec):
    """Extended axis segment must cross each of the two boundaries exactly once."""
    xs = np.linspace(-spec.eps0, spec.L + spec.eps0, 4001)
    pts = np.stack([xs, np.zeros_like(xs)], -1)
    for name, flags in (("cavity", spec.in_cavity(pts)),
                        ("envelope", spec.envelope.contains(pts))):
        changes = int(np.sum(flags[1:] != flags[:-1]))
        if changes != 1:
            raise GeometryError(
                f"axis segment crosses the {name} boundary {changes} times (need exactly 1)")


@dataclass(frozen=True)
class TransversalityReport:
    angle_anchor_deg: float
    angle_mouth_deg: float
    threshold_deg: float
    passed: bool


def check_transversality(spec: ResonatorSpec) -> TransversalityReport:
    """Crossing angles of the neck axis with the two boundaries.

    90 deg means the axis is normal to the wall; the check passes when both
    angles stay at least TRANSVERSALITY_MIN_DEG away from tangency.
    """
    t0 = spec.cavity.anchor_t
    tan_c = spec.cavity.tangent(t0)
    tan_c = tan_c / np.linalg.norm(tan_c)
    ang_anchor = math.degrees(math.acos(min(1.0, abs(tan_c[0]))))

    m0 = np.array([spec.L, 0.0])
    radial = m0 - np.asarray(spec.envelope.center)
    tan_b = np.array([-radial[1], radial[0]]) / np.linalg.norm(radial)
    ang_mouth = math.degrees(math.acos(min(1.0, abs(tan_b[0]))))

    ok = (ang_anchor >= TRANSVERSALITY_MIN_DEG) and (ang_mouth >= TRANSVERSALITY_MIN_DEG)
    return TransversalityReport(ang_anchor, ang_mouth, TRANSVERSALITY_MIN_DEG, ok)


# ---------------------------------------------------------------------------
# dumbbell
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DumbbellSpec:
    """Two mirror-image cavities joined by a straight tube of length L, width eps.

    The left cavity is anchored at the origin with the tube along +x; the right
    cavity is its exact mirror across the midplane x = L/2.
    """

    cavity: CavitySpec
    L: float
    eps: float
    eps0: float = None

    def __post_init__(self):
        if self.L <= 0:
            raise GeometryError("degenerate tube: L must be positive")
        if self.eps <= 0:
            raise GeometryError("tube width must be positive")
        if self.eps0 is None:
            object.__setattr__(self, "eps0", default_collar(self.L))

    @property
    def half_width(self):
        return 0.5 * self.eps

    def mirror(self, pts):
        pts = np.asarray(pts, dtype=float)
        out = pts.copy()
        out[..., 0] = self.L - out[..., 0]
        return out

    def in_left_cavity(self, pts):
        return self.cavity.contains(pts)

    def in_right_cavity(self, pts):
        return self.cavity.contains(self.mirror(pts))

    def in_tube(self, pts):
        pts = np.asarray(pts, dtype=float)
        x, y = pts[..., 0], pts[..., 1]
        slab = (np.abs(y) < self.half_width) & (x >= -self.eps0) & (x <= self.L + self.eps0)
        return slab & ~self.in_left_cavity(pts) & ~self.in_right_cavity(pts)

    def in_interior(self, pts):
        return self.in_left_cavity(pts) | self.in_right_cavity(pts) | self.in_tube(pts)

    def to_config(self) -> dict:
        cav = {"kind": self.cavity.kind, "anchor_t": self.cavity.anchor_t,
               "tilt": self.cavity.tilt}
        if self.cavity.kind == "disc":
            cav["radius"] = self.cavity.radius
        elif self.cavity.kind == "ellipse":
            cav["axes"] = list(self.cavity.axes)
        return {"cavity": cav, "L": self.L, "eps": self.eps, "eps0": self.eps0,
                "dumbbell": True}


def cavity_from_config(cfg: dict) -> CavitySpec:
    kind = cfg.get("kind", "disc")
    kwargs = {"kind": kind,
              "anchor_t": float(cfg.get("anchor_t", 0.0)),
              "tilt": float(cfg.get("tilt", 0.0))}
    if kind == "disc":
        kwargs["radius"] = float(cfg.get("radius", 1.0))
    elif kind == "ellipse":
        kwargs["axes"] = tuple(cfg.get("axes", (1.0, 0.8)))
    elif kind == "smoothed_polygon":
        kwargs["vertices"] = tuple(tuple(v) for v in cfg["vertices"])
        kwargs["harmonics"] = int(cfg.get("harmonics", 8))
    return CavitySpec(**kwargs)


def resonator_from_config(cfg: dict) -> ResonatorSpec:
    cavity = cavity_from_config(cfg["cavity"])
    env = None
    if "envelope" in cfg:
        env = Envelope(tuple(cfg["envelope"]["center"]), float(cfg["envelope"]["radius"]))
    return build_resonator(
        cavity, float(cfg["L"]), float(cfg["eps"]),
        eps0=cfg.get("eps0"), truncation_radius=cfg.get("truncation_radius"),
        envelope=env)
