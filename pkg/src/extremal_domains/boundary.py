"""Boundary function algebra on the small circles and the operators built on it.

The boundary of the removed disks has two orbits: the m circles of radius
tau0 around the equatorial points and the two polar circles of radius tau2.
Functions on it are stored by one representative circle per orbit as cosine
series in a symmetry-adapted angle.

Exterior fields (solutions of (Delta + 2) u = 0 off the disks, possibly with a
compactly supported source in the collars) are represented exactly:

* an LD part ``w0 * Phi0 + w2 * Phi2``;
* orbit-symmetrised multipoles ``sum_c F_k(d_c) cos(k theta_c)`` built from the
  separated solution ``f_k = cot^k(r/2) (k - cos r)`` that is singular only at
  the centre, normalised by ``F_k(tau) = 1``;
* compact radial layers per collar mode (supported in ``tau <= r <= 4 tau/3``).

Inside a collar every harmonic field reduces to ``A_k g_k + B_k f_k`` per mode
with ``g_k = tan^k(r/2) (k + cos r)``, which is how the operators below read off
normal derivatives and pulled-back operators analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geom import _dist, polar_point
from .ld2 import MatchingData, green2, phi0_eval, phi2_eval, phi2_profile

COLLAR_FACTOR = 4.0 / 3.0      # outer collar radius in units of tau
FORBIDDEN_TOL = 1e-8
COND_LIMIT = 1e8
DEFAULT_KMAX = 8
DEFAULT_LMAX = 16
POLE_MODE_MAX_M = 12          # polar high modes are kept only for m <= 12


# ---------------------------------------------------------------- radial pairs

def radial_pair(k: int, r, tau: float):
    """Separated solutions of mode k normalised to 1 at r = tau.

    Returns ``(g, g', f, f')`` where g is regular at the centre and f is
    regular away from it.  For k = 0 the pair is (cos r, G(r)).
    """
    r = np.asarray(r, dtype=float)
    if k == 0:
        g = np.cos(r) / np.cos(tau)
        gp = -np.sin(r) / np.cos(tau)
        G, Gp = green2(r)
        Gt = float(green2(tau)[0])
        return g, gp, G / Gt, Gp / Gt
    s, c = np.sin(r), np.cos(r)
    q = np.tan(0.5 * r) / np.tan(0.5 * tau)
    g = q**k * (k + c) / (k + np.cos(tau))
    f = q**(-k) * (k - c) / (k - np.cos(tau))
    gp = g * (k / s - s / (k + c))
    fp = f * (-k / s + s / (k - c))
    return g, gp, f, fp


def wronskian(k: int, tau: float) -> float:
    """sin(r) (g f' - g' f) for the normalised pair (independent of r)."""
    g, gp, f, fp = radial_pair(k, np.array([tau]), tau)
    return float(np.sin(tau) * (g * fp - gp * f)[0])


def flat_multiplier(k: int, tau: float) -> float:
    """Normal-derivative multiplier of the decaying harmonic extension."""
    return k * tau / np.sin(tau)


# ---------------------------------------------------------------- orbits

@dataclass(frozen=True)
class Orbit:
    """One orbit of boundary circles with per-centre polar frames."""

    index: int
    tau: float
    centers: np.ndarray
    e: np.ndarray
    f: np.ndarray
    bf_modes: np.ndarray       # modes carried by boundary functions
    modes: np.ndarray          # modes resolved in the collar (superset)

    @property
    def center(self) -> np.ndarray:
        return self.centers[0]

    @property
    def r_outer(self) -> float:
        return COLLAR_FACTOR * self.tau

    def points(self, r, theta, which: int = 0) -> np.ndarray:
        return polar_point(self.centers[which], self.e[which], self.f[which], r, theta)

    def polar(self, x: np.ndarray, which: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        c, e, f = self.centers[which], self.e[which], self.f[which]
        return _dist(x, c[None, :]), np.arctan2(x @ f, x @ e)


def _orbit0(cfg, tau, kmax, lmax) -> Orbit:
    n3 = np.array([0.0, 0.0, 1.0])
    cs = cfg.L0
    e = np.tile(n3, (len(cs), 1))
    f = np.cross(cs, n3)
    return Orbit(0, tau, cs, e, f, np.arange(0, kmax + 1, 2), np.arange(0, lmax + 1, 2))


def _orbit2(cfg, tau, kmax, lmax) -> Orbit:
    cs = cfg.L2
    e = np.tile([1.0, 0.0, 0.0], (2, 1))
    f = np.tile([0.0, 1.0, 0.0], (2, 1))
    m = cfg.m
    if m <= POLE_MODE_MAX_M:
        bf = np.arange(0, max(kmax, m) + 1, m)
        loc = np.arange(0, max(lmax, 2 * m) + 1, m)
    else:
        bf = np.array([0])
        loc = np.array([0])
    return Orbit(2, tau, cs, e, f, bf, loc)


# ---------------------------------------------------------------- collar grid

def _panel_integration(n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss nodes on [-1, 1], weights and the cumulative integration matrix."""
    x, w = np.polynomial.legendre.leggauss(n)
    V = np.polynomial.legendre.legvander(x, n - 1)
    Q = np.empty((n, n))
    P = np.polynomial.legendre.legvander(x, n)
    Q[:, 0] = x + 1.0
    for j in range(1, n):
        # int_{-1}^x P_j = (P_{j+1} - P_{j-1}) / (2j + 1)
        Q[:, j] = (P[:, j + 1] - P[:, j - 1]) / (2 * j + 1)
    return x, w, Q @ np.linalg.inv(V)


@dataclass(frozen=True)
class CollarGrid:
    """Radial Gauss panels on [tau, 4 tau / 3] times uniform angles."""

    tau: float
    edges: np.ndarray
    r: np.ndarray
    w: np.ndarray
    theta: np.ndarray
    n_per_panel: int
    cum: np.ndarray = field(repr=False)   # cumulative integral matrix

    @property
    def nr(self) -> int:
        return len(self.r)

    def cumulative(self, h: np.ndarray) -> np.ndarray:
        """int_tau^{r_j} h along the last axis."""
        return h @ self.cum.T

    def total(self, h: np.ndarray) -> np.ndarray:
        return h @ self.w

    def panel_of(self, r: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.edges, r, side="right") - 1, 0, len(self.edges) - 2)


def collar_grid(tau: float, n_theta: int, n_per_panel: int = 16,
                n_inner: int = 2, n_transition: int = 10) -> CollarGrid:
    # the collar cutoff is constant on [0, tau/6] and switches on [tau/6, tau/3]
    z = np.concatenate([np.linspace(0.0, tau / 6.0, n_inner + 1)[:-1],
                        np.linspace(tau / 6.0, tau / 3.0, n_transition + 1)])
    edges = tau + z
    x, w, S = _panel_integration(n_per_panel)
    npan = len(edges) - 1
    rs, ws = [], []
    cum = np.zeros((npan * n_per_panel, npan * n_per_panel))
    for p in range(npan):
        a, b = edges[p], edges[p + 1]
        h = 0.5 * (b - a)
        rs.append(a + h * (x + 1.0))
        ws.append(h * w)
        sl = slice(p * n_per_panel, (p + 1) * n_per_panel)
        cum[sl, :p * n_per_panel] = np.concatenate(ws[:-1])[None, :] if p else 0.0
        cum[sl, sl] = h * S
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    return CollarGrid(tau, edges, np.concatenate(rs), np.concatenate(ws), theta,
                      n_per_panel, cum)


def _panel_interp(grid: CollarGrid, values: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Evaluate panelwise polynomial interpolants of nodal values at r."""
    n = grid.n_per_panel
    x, _ = np.polynomial.legendre.leggauss(n)
    Vinv = np.linalg.inv(np.polynomial.legendre.legvander(x, n - 1))
    p = grid.panel_of(r)
    a, b = grid.edges[p], grid.edges[p + 1]
    t = (2.0 * r - a - b) / (b - a)
    out = np.zeros(values.shape[:-1] + r.shape)
    for pi in np.unique(p):
        sel = p == pi
        coef = values[..., pi * n:(pi + 1) * n] @ Vinv.T
        out[..., sel] = np.polynomial.legendre.legval(t[sel], coef.T, tensor=True) if coef.ndim > 1 \
            else np.polynomial.legendre.legval(t[sel], coef)
    return out


# ---------------------------------------------------------------- the model

class BoundaryModel:
    """Discretisation data shared by every operator for one matching.

    Parameters
    ----------
    matching : MatchingData
    kmax : int
        Highest mode carried by boundary functions on the equatorial circles.
    lmax : int
        Highest mode resolved in the collars and in multipole expansions.
    """

    def __init__(self, matching: MatchingData, kmax: int = DEFAULT_KMAX,
                 lmax: Optional[int] = None):
        if lmax is None:
            lmax = max(DEFAULT_LMAX, 2 * kmax)
        if kmax < 2 or kmax % 2:
            raise ValueError("kmax must be an even integer >= 2")
        kmax = min(kmax, lmax - lmax % 2)
        self.matching = matching
        self.m = matching.m
        self.kmax = kmax
        self.lmax = lmax
        cfg = matching.config
        self.orbits = (_orbit0(cfg, matching.tau0, kmax, lmax),
                       _orbit2(cfg, matching.tau2, kmax, lmax))
        self.grids = tuple(collar_grid(o.tau, max(64, 4 * (int(o.modes[-1]) + 2)))
                           for o in self.orbits)
        self._hl = None
        self._B = None
        self._R = None
        self._Rt = None

    # -- coordinates of boundary functions --------------------------------
    @property
    def n_coords(self) -> int:
        return 1 + (len(self.orbits[0].bf_modes) - 1) + (len(self.orbits[1].bf_modes) - 1)

    def zero_bf(self) -> "BoundaryFunction":
        o0, o2 = self.orbits
        return BoundaryFunction(self, np.zeros(len(o0.bf_modes)), np.zeros(len(o2.bf_modes)))

    def low_weights(self) -> Tuple[float, float]:
        m = self.m
        return m * np.sin(self.orbits[0].tau), 2.0 * np.sin(self.orbits[1].tau)

    # -- cached operators ---------------------------------------------------
    def hl_matrix(self):
        if self._hl is None:
            self._hl = _assemble_hl(self)
        return self._hl

    def B_matrix(self) -> np.ndarray:
        if self._B is None:
            self._B = _assemble_B(self)
        return self._B

    def Rtilde_matrix(self) -> np.ndarray:
        if self._Rt is None:
            self._Rt = _assemble_Rtilde(self)
        return self._Rt

    def R_matrix(self) -> np.ndarray:
        if self._R is None:
            B, Rt = self.B_matrix(), self.Rtilde_matrix()
            BR = B @ Rt
            dev = np.linalg.norm(BR - np.eye(len(BR)), 2)
            if dev >= 0.5:
                raise RuntimeError(f"op_R: |B R~ - id| = {dev:.3f} >= 1/2; "
                                   "increase m or the truncation")
            self._R = Rt @ np.linalg.inv(BR)
        return self._R


@lru_cache(maxsize=16)
def _cached_model(m: int, kmax: int, lmax: int) -> BoundaryModel:
    from .ld2 import matching_for
    return BoundaryModel(matching_for(m), kmax, lmax)


def model_for(matching: MatchingData, kmax: int = DEFAULT_KMAX,
              lmax: Optional[int] = None) -> BoundaryModel:
    """Shared model for a matching (cached on m, kmax, lmax)."""
    if lmax is None:
        lmax = max(DEFAULT_LMAX, 2 * kmax)
    model = _cached_model(matching.m, kmax, lmax)
    if model.matching.tau0 != matching.tau0:
        return BoundaryModel(matching, kmax, lmax)
    return model


# ---------------------------------------------------------------- boundary functions

@dataclass
class BoundaryFunction:
    """Cosine series on the two representative circles.

    ``c0[j]`` multiplies ``cos(k theta)`` for ``k = model.orbits[0].bf_modes[j]``
    on every equatorial circle, ``c2`` likewise on the polar circles.
    Entry 0 of each is the circle's constant (low) part.
    """

    model: BoundaryModel = field(repr=False)
    c0: np.ndarray
    c2: np.ndarray

    def __post_init__(self):
        self.c0 = np.asarray(self.c0, dtype=float)
        self.c2 = np.asarray(self.c2, dtype=float)
        if self.c0.shape != self.model.orbits[0].bf_modes.shape or \
                self.c2.shape != self.model.orbits[1].bf_modes.shape:
            raise ValueError("coefficient arrays do not match the allowed modes")

    @classmethod
    def from_modes(cls, model: BoundaryModel, modes0: Dict[int, float] = None,
                   modes2: Dict[int, float] = None) -> "BoundaryFunction":
        """Build from {mode: coefficient}; disallowed modes are rejected."""
        out = model.zero_bf()
        for arr, allowed, modes, name in ((out.c0, model.orbits[0].bf_modes, modes0, "equatorial"),
                                          (out.c2, model.orbits[1].bf_modes, modes2, "polar")):
            for k, a in (modes or {}).items():
                idx = np.nonzero(allowed == k)[0]
                if not len(idx):
                    raise ValueError(f"mode {k} not allowed on the {name} circles "
                                     f"(allowed {list(allowed)})")
                arr[idx[0]] = a
        return out

    # -- algebra
    def __add__(self, other):
        if np.isscalar(other):
            return BoundaryFunction(self.model, self.c0 + np.eye(len(self.c0))[0] * other,
                                    self.c2 + np.eye(len(self.c2))[0] * other)
        return BoundaryFunction(self.model, self.c0 + other.c0, self.c2 + other.c2)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * other

    def __mul__(self, s: float):
        return BoundaryFunction(self.model, s * self.c0, s * self.c2)

    __rmul__ = __mul__

    def __neg__(self):
        return (-1.0) * self

    def copy(self) -> "BoundaryFunction":
        return BoundaryFunction(self.model, self.c0.copy(), self.c2.copy())

    # -- decompositions
    def avg(self) -> float:
        w0, w2 = self.model.low_weights()
        return float((w0 * self.c0[0] + w2 * self.c2[0]) / (w0 + w2))

    def osc(self) -> "BoundaryFunction":
        return self - self.avg()

    def tau_avg(self) -> float:
        """Constant c with (self - tau c) free of tau-weighted mean."""
        o0, o2 = self.model.orbits
        w0, w2 = self.model.low_weights()
        return float((w0 * self.c0[0] / o0.tau + w2 * self.c2[0] / o2.tau) / (w0 + w2))

    def tau_osc(self) -> "BoundaryFunction":
        """Remove tau times a constant so that the result has zero tau-weighted mean.

        Vanishes exactly when self / tau is constant, i.e. when the unscaled
        normal derivative is the same on every circle.
        """
        c = self.tau_avg()
        o0, o2 = self.model.orbits
        out = self.copy()
        out.c0[0] -= o0.tau * c
        out.c2[0] -= o2.tau * c
        return out

    def low(self) -> "BoundaryFunction":
        out = self.model.zero_bf()
        out.c0[0], out.c2[0] = self.c0[0], self.c2[0]
        return out

    def high(self) -> "BoundaryFunction":
        return self - self.low()

    def is_osc(self, tol: float = 1e-12) -> bool:
        return abs(self.avg()) <= tol * max(1.0, self.norm())

    # -- sampling and norms
    def values(self, orbit: int, theta) -> np.ndarray:
        o = self.model.orbits[orbit]
        c = self.c0 if orbit == 0 else self.c2
        theta = np.asarray(theta, dtype=float)
        return np.cos(np.multiply.outer(theta, o.bf_modes)) @ c

    def derivative(self, orbit: int, theta, order: int = 1) -> np.ndarray:
        o = self.model.orbits[orbit]
        c = self.c0 if orbit == 0 else self.c2
        k = o.bf_modes.astype(float)
        ph = np.multiply.outer(np.asarray(theta, dtype=float), o.bf_modes) + 0.5 * np.pi * order
        return np.cos(ph) @ (c * k**order)

    def norm(self) -> float:
        """Discrete C^2 sup norm over 4K-point circle grids."""
        out = 0.0
        for i in (0, 1):
            K = int(self.model.orbits[i].bf_modes[-1])
            th = 2.0 * np.pi * np.arange(max(4 * K, 8)) / max(4 * K, 8)
            out = max(out, sum(float(np.max(np.abs(self.derivative(i, th, d)))) for d in range(3)))
        return out

    def sup(self) -> float:
        out = 0.0
        for i in (0, 1):
            K = int(self.model.orbits[i].bf_modes[-1])
            th = 2.0 * np.pi * np.arange(max(8 * K, 16)) / max(8 * K, 16)
            out = max(out, float(np.max(np.abs(self.values(i, th)))))
        return out

    # -- coordinates on the oscillatory subspaces
    def coords(self) -> np.ndarray:
        """[polar constant, equatorial modes, polar modes] (low part by its polar value)."""
        return np.concatenate([[self.c2[0]], self.c0[1:], self.c2[1:]])

    @classmethod
    def from_coords(cls, model: BoundaryModel, x: np.ndarray,
                    weighting: str = "osc") -> "BoundaryFunction":
        """Inverse of coords on the std-oscillatory ('osc') or tau-weighted ('tau') subspace."""
        x = np.asarray(x, dtype=float)
        n0 = len(model.orbits[0].bf_modes) - 1
        out = model.zero_bf()
        out.c2[0] = x[0]
        out.c0[1:] = x[1:1 + n0]
        out.c2[1:] = x[1 + n0:]
        w0, w2 = model.low_weights()
        if weighting == "osc":
            out.c0[0] = -w2 * x[0] / w0
        elif weighting == "tau":
            t0, t2 = model.orbits[0].tau, model.orbits[1].tau
            out.c0[0] = -w2 * x[0] * t0 / (w0 * t2)
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        return out


def fourier_cos(samples: np.ndarray, modes: np.ndarray) -> Tuple[np.ndarray, float]:
    """Cosine coefficients at ``modes`` of uniform samples on [0, 2 pi).

    Returns the coefficients and the fraction of energy outside them
    (sine parts and unlisted modes), ignoring modes above the Nyquist limit.
    """
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[-1]
    F = np.fft.rfft(samples, axis=-1) / n
    a = 2.0 * F.real
    a[..., 0] *= 0.5
    if n % 2 == 0:
        a[..., -1] *= 0.5
    b = -2.0 * F.imag
    modes = np.asarray(modes)
    coef = a[..., modes]
    e_all = np.sum(a**2 + b**2, axis=-1)
    e_kept = np.sum(coef**2, axis=-1)
    ratio = np.where(e_all > 0, (e_all - e_kept) / np.where(e_all > 0, e_all, 1.0), 0.0)
    return coef, float(np.max(ratio))


def bf_from_samples(model: BoundaryModel, samples0: np.ndarray, samples2: np.ndarray,
                    tol: float = FORBIDDEN_TOL) -> BoundaryFunction:
    """Analyse uniform samples on one circle of each orbit.

    Energy outside the allowed modes must stay below ``tol`` of the total.
    """
    c0, e0 = fourier_cos(samples0, model.orbits[0].bf_modes)
    c2, e2 = fourier_cos(samples2, model.orbits[1].bf_modes)
    if max(e0, e2) > tol:
        raise ValueError(f"bf_from_samples: forbidden-mode energy ratio {max(e0, e2):.3e}")
    return BoundaryFunction(model, c0, c2)


# ---------------------------------------------------------------- flat extension

@dataclass(frozen=True)
class FlatExtension:
    """Decaying harmonic extension of a high boundary function, mode by mode.

    The profile ``(tan(tau/2) / tan(r/2))^k`` is harmonic for the round metric
    (conformal to the flat one), so its normal derivative multiplier is
    exactly ``k tau / sin tau``.
    """

    model: BoundaryModel = field(repr=False)
    coeffs: Tuple[np.ndarray, np.ndarray]

    def value(self, orbit: int, r, theta) -> np.ndarray:
        o = self.model.orbits[orbit]
        r = np.asarray(r, dtype=float)
        q = np.tan(0.5 * o.tau) / np.tan(0.5 * r)
        k = o.bf_modes
        prof = q[..., None] ** k * np.cos(np.multiply.outer(np.asarray(theta, float), k))
        return prof @ self.coeffs[orbit]

    def normal_derivative(self) -> BoundaryFunction:
        out = []
        for i in (0, 1):
            o = self.model.orbits[i]
            mult = np.array([flat_multiplier(int(k), o.tau) for k in o.bf_modes])
            out.append(mult * self.coeffs[i])
        return BoundaryFunction(self.model, out[0], out[1])


def h_flat(v: BoundaryFunction) -> FlatExtension:
    if abs(v.c0[0]) > 0 or abs(v.c2[0]) > 0:
        raise ValueError("h_flat: input has a nonzero low part")
    return FlatExtension(v.model, (v.c0.copy(), v.c2.copy()))


# ---------------------------------------------------------------- exterior fields

@dataclass
class CollarLayer:
    """Compactly supported radial profiles per collar mode.

    ``val``, ``der`` and ``src`` are (n_modes, n_nodes) arrays on the collar
    grid; ``val_b``/``der_b`` are the boundary values at r = tau.  ``src`` is
    (Delta + 2) of the layer, from which its second derivative follows.
    """

    val: np.ndarray
    der: np.ndarray
    src: np.ndarray
    val_b: np.ndarray
    der_b: np.ndarray

    def scaled(self, s: float) -> "CollarLayer":
        return CollarLayer(s * self.val, s * self.der, s * self.src, s * self.val_b, s * self.der_b)

    def plus(self, other: "CollarLayer") -> "CollarLayer":
        return CollarLayer(self.val + other.val, self.der + other.der, self.src + other.src,
                           self.val_b + other.val_b, self.der_b + other.der_b)


@dataclass
class ExteriorField:
    """LD part + orbit multipoles + compact collar layers (see module docstring)."""

    model: BoundaryModel = field(repr=False)
    w0: float = 0.0
    w2: float = 0.0
    mult: List[np.ndarray] = None      # per orbit, coefficients for orbit.modes (mode 0 unused)
    layers: List[Optional[CollarLayer]] = None

    def __post_init__(self):
        if self.mult is None:
            self.mult = [np.zeros(len(o.modes)) for o in self.model.orbits]
        if self.layers is None:
            self.layers = [None, None]

    @classmethod
    def zero(cls, model: BoundaryModel) -> "ExteriorField":
        return cls(model)

    def __add__(self, other: "ExteriorField") -> "ExteriorField":
        layers = []
        for a, b in zip(self.layers, other.layers):
            layers.append(a if b is None else b if a is None else a.plus(b))
        return ExteriorField(self.model, self.w0 + other.w0, self.w2 + other.w2,
                             [a + b for a, b in zip(self.mult, other.mult)], layers)

    def __mul__(self, s: float) -> "ExteriorField":
        return ExteriorField(self.model, s * self.w0, s * self.w2, [s * a for a in self.mult],
                             [None if l is None else l.scaled(s) for l in self.layers])

    __rmul__ = __mul__

    def __sub__(self, other):
        return self + (-1.0) * other

    def __neg__(self):
        return (-1.0) * self

    # -- evaluation ---------------------------------------------------------
    def harmonic_eval(self, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Value and gradient of the LD and multipole parts."""
        p = np.asarray(p, dtype=float)
        flat = p.reshape(-1, 3)
        val = np.zeros(len(flat))
        grad = np.zeros_like(flat)
        if self.w0:
            v, g = phi0_eval(self.model.matching.config, flat)
            val += self.w0 * v
            grad += self.w0 * g
        if self.w2:
            v, g = phi2_eval(flat)
            val += self.w2 * v
            grad += self.w2 * g
        for o, c in zip(self.model.orbits, self.mult):
            if np.any(c[1:]):
                v, g = multipole_eval(o, c, flat)
                val += v
                grad += g
        return val.reshape(p.shape[:-1]), grad.reshape(p.shape)

    def eval(self, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Value and tangent gradient at points off the disks."""
        p = np.asarray(p, dtype=float)
        flat = p.reshape(-1, 3)
        val, grad = self.harmonic_eval(flat)
        for o, grid, lay in zip(self.model.orbits, self.model.grids, self.layers):
            if lay is None:
                continue
            d = _dist(flat[:, None, :], o.centers[None, :, :])
            near = np.argmin(d, axis=1)
            dn = d[np.arange(len(flat)), near]
            inside = dn < o.r_outer
            if np.any(dn[inside] < o.tau * (1.0 - 1e-12)):
                raise ValueError("ExteriorField.eval: point inside a removed disk")
            for j in np.unique(near[inside]):
                sel = np.nonzero(inside & (near == j))[0]
                r, th = o.polar(flat[sel], j)
                r = np.maximum(r, o.tau)
                U = _panel_interp(grid, lay.val, r)
                Ur = _panel_interp(grid, lay.der, r)
                k = o.modes[:, None]
                cos, sin = np.cos(k * th), np.sin(k * th)
                val[sel] += np.sum(U * cos, axis=0)
                dr = np.sum(Ur * cos, axis=0)
                dth = np.sum(-k * U * sin, axis=0)
                er, et = _polar_unit_vectors(o, j, r, th)
                grad[sel] += dr[:, None] * er + (dth / np.sin(r))[:, None] * et
        return val.reshape(p.shape[:-1]), grad.reshape(p.shape)

    def value(self, p):
        return self.eval(p)[0]

    # -- collar data ----------------------------------------------------------
    def boundary_data(self, orbit: int) -> Tuple[np.ndarray, np.ndarray]:
        """Value and r-derivative on the representative circle r = tau."""
        o, grid = self.model.orbits[orbit], self.model.grids[orbit]
        th = grid.theta
        pts = o.points(np.full_like(th, o.tau), th)
        val, grad = self.harmonic_eval(pts)
        er, _ = _polar_unit_vectors(o, 0, np.full_like(th, o.tau), th)
        dr = np.sum(grad * er, axis=1)
        lay = self.layers[orbit]
        if lay is not None:
            cos = np.cos(np.multiply.outer(o.modes, th))
            val = val + lay.val_b @ cos
            dr = dr + lay.der_b @ cos
        return val, dr

    def trace(self) -> BoundaryFunction:
        data = [fourier_cos(self.boundary_data(i)[0], self.model.orbits[i].bf_modes)[0]
                for i in (0, 1)]
        return BoundaryFunction(self.model, data[0], data[1])

    def normal_derivative(self) -> BoundaryFunction:
        """nu-hat u = -tau du/dr on the boundary circles."""
        data = []
        for i in (0, 1):
            o = self.model.orbits[i]
            data.append(-o.tau * fourier_cos(self.boundary_data(i)[1], o.bf_modes)[0])
        return BoundaryFunction(self.model, data[0], data[1])

    def collar_modes(self, orbit: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-mode (U, U', U'') on the collar radial nodes."""
        o, grid = self.model.orbits[orbit], self.model.grids[orbit]
        val, dr = self.boundary_data(orbit)
        lay = self.layers[orbit]
        if lay is not None:
            cos = np.cos(np.multiply.outer(o.modes, grid.theta))
            val = val - lay.val_b @ cos
            dr = dr - lay.der_b @ cos
        a, _ = fourier_cos(val, o.modes)
        b, _ = fourier_cos(dr, o.modes)
        r = grid.r
        s = np.sin(r)
        U = np.zeros((len(o.modes), len(r)))
        Ur = np.zeros_like(U)
        Urr = np.zeros_like(U)
        for i, k in enumerate(o.modes):
            g0, gp0, f0, fp0 = (float(x[0]) for x in radial_pair(int(k), np.array([o.tau]), o.tau))
            det = g0 * fp0 - gp0 * f0
            A = (a[i] * fp0 - b[i] * f0) / det
            Bc = (g0 * b[i] - gp0 * a[i]) / det
            g, gp, f, fp = radial_pair(int(k), r, o.tau)
            U[i] = A * g + Bc * f
            Ur[i] = A * gp + Bc * fp
            Urr[i] = -np.cos(r) / s * Ur[i] - (2.0 - k * k / s**2) * U[i]
        if lay is not None:
            k = o.modes[:, None].astype(float)
            U += lay.val
            Ur += lay.der
            Urr += lay.src - np.cos(r) / s * lay.der - (2.0 - k * k / s**2) * lay.val
        return U, Ur, Urr


def _polar_unit_vectors(o: Orbit, j: int, r, th) -> Tuple[np.ndarray, np.ndarray]:
    c, e, f = o.centers[j], o.e[j], o.f[j]
    r = np.asarray(r, dtype=float)[:, None]
    th = np.asarray(th, dtype=float)[:, None]
    u = np.cos(th) * e + np.sin(th) * f
    er = -np.sin(r) * c + np.cos(r) * u
    et = -np.sin(th) * e + np.cos(th) * f
    return er, et


def multipole_eval(o: Orbit, coeffs: np.ndarray, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sum over the orbit's centres of sum_k c_k F_k(d) cos(k theta), with gradient."""
    p = np.asarray(p, dtype=float)
    val = np.zeros(len(p))
    grad = np.zeros_like(p)
    ks = [(int(k), c) for k, c in zip(o.modes, coeffs) if k > 0 and c != 0.0]
    tq = np.tan(0.5 * o.tau)
    for j in range(len(o.centers)):
        c, e, f = o.centers[j], o.e[j], o.f[j]
        d = _dist(p, c[None, :])
        xe, xf = p @ e, p @ f
        th = np.arctan2(xf, xe)
        s, cd = np.sin(d), np.cos(d)
        q = tq / np.tan(0.5 * d)
        rho2 = xe**2 + xf**2
        rho2 = np.where(rho2 > 0, rho2, 1.0)
        ge = e[None, :] - xe[:, None] * p
        gf = f[None, :] - xf[:, None] * p
        gth = (xe[:, None] * gf - xf[:, None] * ge) / rho2[:, None]
        gd_dir = cd[:, None] * p - c[None, :]
        nrm = np.linalg.norm(gd_dir, axis=1, keepdims=True)
        gd = gd_dir / np.where(nrm > 0, nrm, 1.0)
        for k, ck in ks:
            F = q**k * (k - cd) / (k - np.cos(o.tau))
            Fp = F * (-k / s + s / (k - cd))
            ck_cos = np.cos(k * th)
            val += ck * F * ck_cos
            grad += ck * (Fp * ck_cos)[:, None] * gd - ck * (k * F * np.sin(k * th))[:, None] * gth
    return val, grad


# ---------------------------------------------------------------- H_L

@dataclass(frozen=True)
class _HLData:
    basis: Tuple[ExteriorField, ...]
    matrix: np.ndarray
    inverse: np.ndarray
    cond: float


def _hl_basis(model: BoundaryModel) -> List[ExteriorField]:
    o0, o2 = model.orbits
    out = []
    phi2_tau = float(phi2_profile(o2.tau)[0])
    out.append(ExteriorField(model, w2=1.0 / phi2_tau))
    for k in o0.bf_modes[1:]:
        f = ExteriorField(model)
        f.mult[0][np.nonzero(o0.modes == k)[0][0]] = 1.0
        out.append(f)
    for k in o2.bf_modes[1:]:
        f = ExteriorField(model)
        f.mult[1][np.nonzero(o2.modes == k)[0][0]] = 1.0
        out.append(f)
    return out


def _assemble_hl(model: BoundaryModel) -> _HLData:
    basis = _hl_basis(model)
    M = np.column_stack([b.trace().osc().coords() for b in basis])
    cond = float(np.linalg.cond(M))
    if cond > COND_LIMIT:
        raise RuntimeError(f"h_L: trace matrix condition number {cond:.2e} exceeds {COND_LIMIT:.0e}")
    return _HLData(tuple(basis), M, np.linalg.inv(M), cond)


def _combine(model: BoundaryModel, basis, weights) -> ExteriorField:
    out = ExteriorField.zero(model)
    for b, w in zip(basis, weights):
        if w:
            out = out + w * b
    return out


def h_L(v: BoundaryFunction, matching: MatchingData = None, lmax: int = None) -> ExteriorField:
    """Exterior solution u of (Delta + 2) u = 0 with (u|boundary)_osc = v.

    ``v`` must be oscillatory (zero average).  ``matching`` and ``lmax`` are
    accepted for interface symmetry; the discretisation comes from ``v.model``.
    """
    model = v.model
    if not v.is_osc(1e-10):
        raise ValueError(f"h_L: input has nonzero average {v.avg():.3e}")
    data = model.hl_matrix()
    return _combine(model, data.basis, data.inverse @ v.coords())


# ---------------------------------------------------------------- J_L

def j_tilde(model: BoundaryModel, sources) -> ExteriorField:
    """Collar solve: per-mode bounded solutions of (Delta + 2) u = E.

    ``sources[i]`` is None or an (n_modes, n_nodes) array of mode profiles
    of E on orbit i's collar grid.  Mode 0 gets zero Cauchy data at the
    outer collar radius (compact support); modes k >= 2 get the solution
    that is a pure ``f_k`` multipole outside the collar.
    """
    out = ExteriorField.zero(model)
    for i, E in enumerate(sources):
        if E is None:
            continue
        o, grid = model.orbits[i], model.grids[i]
        E = np.asarray(E, dtype=float)
        if E.shape != (len(o.modes), grid.nr):
            raise ValueError(f"j_L: source for orbit {i} has shape {E.shape}")
        r = grid.r
        h = np.sin(r) * E
        val = np.zeros_like(E)
        der = np.zeros_like(E)
        vb = np.zeros(len(o.modes))
        db = np.zeros(len(o.modes))
        for idx, k in enumerate(o.modes):
            if not np.any(h[idx]):
                continue
            k = int(k)
            C = wronskian(k, o.tau)
            g, gp, f, fp = radial_pair(k, r, o.tau)
            I1 = grid.cumulative(g * h[idx])
            I2 = grid.cumulative(f * h[idx])
            T1 = float(grid.total(g * h[idx]))
            T2 = float(grid.total(f * h[idx]))
            val[idx] = (f * (I1 - T1) + g * (T2 - I2)) / C
            der[idx] = (fp * (I1 - T1) + gp * (T2 - I2)) / C
            g0, gp0, f0, fp0 = (float(x[0]) for x in radial_pair(k, np.array([o.tau]), o.tau))
            vb[idx] = (-f0 * T1 + g0 * T2) / C
            db[idx] = (-fp0 * T1 + gp0 * T2) / C
            if k > 0:
                out.mult[i][idx] += T1 / C
        out.layers[i] = CollarLayer(val, der, E.copy(), vb, db)
    return out


def j_L(model: BoundaryModel, sources) -> ExteriorField:
    """Solution with zero oscillatory trace: J~E - H_L((J~E)|_osc)."""
    u = j_tilde(model, sources)
    return u - h_L(u.trace().osc())


# ---------------------------------------------------------------- B and R

def _assemble_B(model: BoundaryModel) -> np.ndarray:
    n = model.n_coords
    cols = []
    for j in range(n):
        e = BoundaryFunction.from_coords(model, np.eye(n)[j], "osc")
        cols.append(_apply_B(e).coords())
    return np.column_stack(cols)


def _apply_B(v: BoundaryFunction) -> BoundaryFunction:
    return (h_L(v).normal_derivative() - v).tau_osc()


def low_block_multiplier(model: BoundaryModel) -> float:
    """Coordinate of tau_osc(-v) for the unit oscillatory low function v."""
    w0, w2 = model.low_weights()
    t0, t2 = model.orbits[0].tau, model.orbits[1].tau
    return -(1.0 + w2 * (t2 / t0 - 1.0) / (w0 + w2))


def _assemble_Rtilde(model: BoundaryModel) -> np.ndarray:
    o0, o2 = model.orbits
    d = [1.0 / low_block_multiplier(model)]
    d += [1.0 / (flat_multiplier(int(k), o0.tau) - 1.0) for k in o0.bf_modes[1:]]
    d += [1.0 / (flat_multiplier(int(k), o2.tau) - 1.0) for k in o2.bf_modes[1:]]
    return np.diag(d)


def op_B(v: BoundaryFunction, matching: MatchingData = None, lmax: int = None) -> BoundaryFunction:
    """B v = tau_osc(nu-hat H_L v - v)."""
    return BoundaryFunction.from_coords(v.model, v.model.B_matrix() @ v.coords(), "tau")


def op_Rtilde(E: BoundaryFunction) -> BoundaryFunction:
    return BoundaryFunction.from_coords(E.model, E.model.Rtilde_matrix() @ E.coords(), "osc")


def op_R(E: BoundaryFunction, matching: MatchingData = None, lmax: int = None) -> BoundaryFunction:
    """Right inverse of B: R = R~ (B R~)^{-1}."""
    return BoundaryFunction.from_coords(E.model, E.model.R_matrix() @ E.coords(), "osc")


def contraction_defect(model: BoundaryModel) -> float:
    """Spectral norm of B R~ - id on the truncated basis."""
    BR = model.B_matrix() @ model.Rtilde_matrix()
    return float(np.linalg.norm(BR - np.eye(len(BR)), 2))
