"""Linearized-doubling solutions on S^2 for the equator/poles configuration.

The Green kernel of Delta + 2 with unit log strength is

    G(r) = cos r log(2 tan(r/2)) + 1 - cos r,

and for even m the symmetric LD solutions are antipodal half-sums of it:
Phi0 = 1/2 sum_{q in L0} G(d_q) and Phi2 = 1 + cos d log tan(d/2) with d the
distance to the poles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.optimize import brentq

from .geom import SymmetryConfig, _dist, build_config, polar_point, tangent_frame

SERIES_SWITCH = 1e-4
LOG2 = np.log(2.0)


def _green_series(r: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # G = log r + r^2 (7/12 - log r / 2) + r^4 (log r / 24 - 113/1440) + ...
    lr = np.log(r)
    val = lr + r**2 * (7.0 / 12.0 - 0.5 * lr) + r**4 * (lr / 24.0 - 113.0 / 1440.0)
    der = 1.0 / r + r * (7.0 / 6.0 - lr - 0.5) + r**3 * (lr / 6.0 - 113.0 / 360.0 + 1.0 / 24.0)
    return val, der


def green2(r) -> Tuple[np.ndarray, np.ndarray]:
    """Value and derivative of G on (0, pi)."""
    r = np.asarray(r, dtype=float)
    if np.any((r <= 0) | (r >= np.pi)):
        raise ValueError("green2 needs 0 < r < pi")
    small = r < SERIES_SWITCH
    rr = np.where(small, 0.5, r)
    c, s = np.cos(rr), np.sin(rr)
    lt = np.log(2.0 * np.tan(0.5 * rr))
    val = c * lt + 1.0 - c
    der = -s * lt + c / s + s
    if np.any(small):
        sv, sd = _green_series(np.where(small, r, 1e-5))
        val = np.where(small, sv, val)
        der = np.where(small, sd, der)
    return val, der


def _tangent_grad(p: np.ndarray, q: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Gradient of d_q at p (unit tangent pointing away from q)."""
    cosd = np.sum(p * q, axis=-1)
    t = cosd[..., None] * p - q
    nrm = np.linalg.norm(t, axis=-1, keepdims=True)
    return t / np.where(nrm == 0, 1.0, nrm)


def phi0_eval(config: SymmetryConfig, p) -> Tuple[np.ndarray, np.ndarray]:
    """Phi0 and its tangent gradient at points p (shape (..., 3))."""
    p = np.asarray(p, dtype=float)
    flat = p.reshape(-1, 3)
    d = _dist(flat[:, None, :], config.L0[None, :, :])
    if np.any(d < 1e-10):
        raise ValueError("phi0_eval: point on L0")
    g, gd = green2(d)
    val = 0.5 * g.sum(axis=1)
    grads = _tangent_grad(flat[:, None, :], config.L0[None, :, :], d)
    grad = 0.5 * np.einsum("nq,nqi->ni", gd, grads)
    return val.reshape(p.shape[:-1]), grad.reshape(p.shape)


def phi2_profile(d) -> Tuple[np.ndarray, np.ndarray]:
    """Phi2 as a function of the distance to the north pole, and derivative."""
    d = np.asarray(d, dtype=float)
    c, s = np.cos(d), np.sin(d)
    lt = np.log(np.tan(0.5 * d))
    return 1.0 + c * lt, -s * lt + c / s


def phi2_eval(p) -> Tuple[np.ndarray, np.ndarray]:
    """Phi2 = 1 + cos d log tan(d/2), d the distance to the poles."""
    p = np.asarray(p, dtype=float)
    flat = p.reshape(-1, 3)
    north = np.array([0.0, 0.0, 1.0])
    dn = _dist(flat, north[None, :])
    if np.any((dn < 1e-10) | (dn > np.pi - 1e-10)):
        raise ValueError("phi2_eval: point at a pole")
    # the profile in the north distance is even about the equator
    val, der = phi2_profile(dn)
    grad = der[:, None] * _tangent_grad(flat, north[None, :], dn)
    return val.reshape(p.shape[:-1]), grad.reshape(p.shape)


def phi0_prime_at_p0(config: SymmetryConfig) -> float:
    """Regular part of Phi0 at p0 after removing log(m d)."""
    m = config.m
    j = np.arange(1, m)
    j = j[j != m // 2]
    d = 2.0 * np.pi * j / m
    d = np.where(d > np.pi, 2.0 * np.pi - d, d)
    s = 0.5 * float(np.sum(green2(d)[0])) if len(d) else 0.0
    return 1.0 - LOG2 - np.log(m) + s


@dataclass(frozen=True)
class MatchingData:
    """Solved matching configuration."""

    config: SymmetryConfig
    tau0: float
    tau2: float
    r: float
    zeta: float
    phi0_prime_p0: float

    @property
    def m(self) -> int:
        return self.config.m

    def residuals(self) -> Tuple[float, float]:
        """Relative residuals of the two matching equations."""
        t0, t2, m, ph = self.tau0, self.tau2, self.m, self.phi0_prime_p0
        e0 = t0 * (np.log(m * t0) + ph) + t2
        e2 = 0.5 * t0 * m + t2 * (1.0 + np.log(0.5 * t2))
        return abs(e0) / t2, abs(e2) / t2


def _ratio_equation(r: float, m: int, phi: float) -> float:
    # Ematch2 gives tau2 = (2/e) exp(-m/(2r)); Ematch0 divided by tau0
    return np.log(m) + phi + LOG2 - 1.0 - 0.5 * m / r - np.log(r) + r


def solve_matching(config: SymmetryConfig) -> MatchingData:
    """Solve the matching equations for (tau0, tau2)."""
    m = config.m
    phi = phi0_prime_at_p0(config)
    lo, hi = 1.0, float(m)
    flo, fhi = _ratio_equation(lo, m, phi), _ratio_equation(hi, m, phi)
    if flo * fhi > 0:
        raise RuntimeError(f"matching: ratio not bracketed in [1, {m}]")
    r = brentq(_ratio_equation, lo, hi, args=(m, phi), xtol=1e-15, rtol=1e-15, maxiter=200)
    for _ in range(3):
        f = _ratio_equation(r, m, phi)
        df = 0.5 * m / r**2 - 1.0 / r + 1.0
        r -= f / df
    tau2 = 2.0 / np.e * np.exp(-0.5 * m / r)
    tau0 = tau2 / r
    zeta = np.sqrt(0.5 * m) - 0.25 * np.log(m) - r
    return MatchingData(config, float(tau0), float(tau2), float(r), float(zeta), float(phi))


def matching_for(m: int) -> MatchingData:
    return solve_matching(build_config(m, 2))


def varphi_eval(matching: MatchingData, p) -> Tuple[np.ndarray, np.ndarray]:
    """tau0 Phi0 + tau2 Phi2 and its gradient."""
    v0, g0 = phi0_eval(matching.config, p)
    v2, g2 = phi2_eval(p)
    return matching.tau0 * v0 + matching.tau2 * v2, matching.tau0 * g0 + matching.tau2 * g2


def _annulus_points(center, ref, tau, nr, nt):
    e, f = tangent_frame(center, ref)
    r = tau * np.geomspace(0.5, 2.0, nr)
    th = np.linspace(0.0, 2.0 * np.pi, nt, endpoint=False)
    R, T = np.meshgrid(r, th, indexing="ij")
    return polar_point(center, e, f, R, T), R


def mismatch_residual(matching: MatchingData, nr: int = 24, nt: int = 48,
                      transform=None) -> Tuple[float, float]:
    """Sup of |phi - tau_i log(d/tau_i)| on the annuli D(2 tau_i) minus D(tau_i/2).

    ``transform`` optionally maps the sample points (e.g. by a generator).
    """
    cfg = matching.config
    out = []
    for center, ref, tau in ((cfg.p0, np.array([0.0, 0.0, 1.0]), matching.tau0),
                             (cfg.p2, np.array([1.0, 0.0, 0.0]), matching.tau2)):
        pts, R = _annulus_points(center, ref, tau, nr, nt)
        if transform is not None:
            pts = transform(pts)
        val, _ = varphi_eval(matching, pts)
        out.append(float(np.max(np.abs(val - tau * np.log(R / tau)))))
    return out[0], out[1]
