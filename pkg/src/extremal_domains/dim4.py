"""The S^3 LD layer: lattice on the Clifford torus, kernel G3, the constant F.

Rotationally invariant solutions of Delta + 3 depend on the signed distance z
to the Clifford torus and solve

    phi'' - 2 tan(2z) phi' + 3 phi = 0   on (-pi/4, pi/4).

phi_C is the solution regular at z = pi/4, normalised by phi_C(0) = 1, and
F = phi_C'(0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.integrate import solve_ivp

from .geom import SymmetryConfig, _dist, build_config

SERIES_SWITCH = 1e-4


def green3(r) -> Tuple[np.ndarray, np.ndarray]:
    """G3(r) = -cos(2r)/sin(r) and its derivative on (0, pi)."""
    r = np.asarray(r, dtype=float)
    if np.any((r <= 0) | (r >= np.pi)):
        raise ValueError("green3 needs 0 < r < pi")
    # symmetric about pi/2, so evaluate at min(r, pi - r)
    rs = np.minimum(r, np.pi - r)
    sgn = np.where(r > 0.5 * np.pi, -1.0, 1.0)
    small = rs < SERIES_SWITCH
    rr = np.where(small, 0.5, rs)
    s, c2 = np.sin(rr), np.cos(2.0 * rr)
    val = -c2 / s
    der = 2.0 * np.sin(2.0 * rr) / s + c2 * np.cos(rr) / s**2
    if np.any(small):
        x = np.where(small, rs, 1e-5)
        # -cos 2r / sin r = -1/r + (11/6) r + (71/360) r^3 + ...
        sv = -1.0 / x + 11.0 / 6.0 * x + 71.0 / 360.0 * x**3
        sd = 1.0 / x**2 + 11.0 / 6.0 + 71.0 / 120.0 * x**2
        val = np.where(small, sv, val)
        der = np.where(small, sd, der)
    return val, sgn * der


def _ode_rhs(z, y):
    return [y[1], 2.0 * np.tan(2.0 * z) * y[1] - 3.0 * y[0]]


def _frobenius(s: float) -> Tuple[float, float]:
    """Regular solution near z = pi/4 in s = pi/4 - z, with value 1 at s = 0.

    In t = 2s the equation is Legendre's with nu = 1/2; the regular series
    is sum a_n sin^{2n}(t/2) with a_{n+1} = a_n (n - nu)(n + nu + 1)/(n+1)^2.
    Returns (phi, dphi/dz).
    """
    t = 2.0 * s
    x = np.sin(0.5 * t) ** 2
    nu = 0.5
    a, val, dval = 1.0, 0.0, 0.0
    for n in range(60):
        val += a * x**n
        if n > 0:
            dval += a * n * x ** (n - 1)
        a *= (n - nu) * (n + nu + 1.0) / (n + 1.0) ** 2
    # dx/dz = dx/dt * dt/dz = (sin t / 2) * (-2)
    return val, -np.sin(t) * dval


@dataclass(frozen=True)
class ShootingResult:
    F: float
    z: np.ndarray
    phiC: np.ndarray
    dphiC: np.ndarray
    eps: float
    change: float


def _integrate(eps: float, z_eval: np.ndarray):
    start = np.pi / 4 - eps
    below = z_eval < start
    phi = np.empty_like(z_eval)
    dphi = np.empty_like(z_eval)
    for i in np.nonzero(~below)[0]:
        phi[i], dphi[i] = _frobenius(np.pi / 4 - z_eval[i])
    zb = z_eval[below]
    sol = solve_ivp(_ode_rhs, (start, zb[0]), list(_frobenius(eps)), method="DOP853",
                    rtol=1e-13, atol=1e-15, t_eval=zb[::-1])
    if not sol.success:
        raise RuntimeError(f"shoot_F: integrator failed: {sol.message}")
    phi[below] = sol.y[0][::-1]
    dphi[below] = sol.y[1][::-1]
    return phi, dphi


def shoot_F(tol: float = 1e-10, n: int = 201) -> ShootingResult:
    """Shoot from the regular end z = pi/4 toward z = -pi/4; return F.

    The start value at z = pi/4 - eps comes from the regular Frobenius
    series; eps is halved until F is stable to ``tol``.
    """
    z = np.linspace(-np.pi / 4 + 0.01, np.pi / 4 - 0.01, n)
    z = np.union1d(z, [0.0])
    i0 = int(np.argmin(np.abs(z)))
    prev = None
    eps = 0.2
    for _ in range(8):
        phi, dphi = _integrate(eps, z)
        F = dphi[i0] / phi[i0]
        if prev is not None and abs(F - prev) < tol:
            return ShootingResult(float(F), z, phi / phi[i0], dphi / phi[i0], eps, abs(F - prev))
        prev = F
        eps *= 0.5
    raise RuntimeError("shoot_F: epsilon refinement did not converge")


def torus_distance(p: np.ndarray) -> np.ndarray:
    """Signed distance to the Clifford torus, positive toward |z1| = 1."""
    a = np.hypot(p[..., 0], p[..., 1])
    b = np.hypot(p[..., 2], p[..., 3])
    return np.arctan2(a, b) - np.pi / 4


def phi3_eval(config: SymmetryConfig, p) -> np.ndarray:
    """Phi = 1/2 sum_{q in L} G3(d_q(p))."""
    if config.dimension != 3:
        raise ValueError("phi3_eval needs a 3D configuration")
    p = np.asarray(p, dtype=float)
    flat = p.reshape(-1, 4)
    d = _dist(flat[:, None, :], config.L0[None, :, :])
    if np.any(d < 1e-10) or np.any(d > np.pi - 1e-10):
        raise ValueError("phi3_eval: point on the lattice")
    return 0.5 * green3(d)[0].sum(axis=1).reshape(p.shape[:-1])


def tau4(m: int, F: float = None) -> Tuple[float, float]:
    """tau = (m^2/(pi F) + Phi'(p0))^{-1} and Phi'(p0)."""
    cfg = build_config(m, 3)
    if F is None:
        F = shoot_F().F
    d = _dist(cfg.p0[None, :], cfg.L0)
    keep = (d > 1e-12) & (d < np.pi - 1e-12)
    s = 0.5 * float(np.sum(green3(d[keep])[0]))
    phip = s - m * m / (np.pi * F)
    denom = m * m / (np.pi * F) + phip
    if denom <= 0:
        raise RuntimeError("tau4: non-positive denominator")
    return 1.0 / denom, phip


def torus_average(config: SymmetryConfig, s: float, n: int = 0) -> float:
    """Average of Phi over the parallel torus at signed distance s.

    Product midpoint rule with ``n`` points per angle (default 16 m), which
    resolves the lattice poles to ~1e-9 relative for |s| >= 0.1.
    """
    m = config.m
    n = n or 16 * m
    a = np.pi / 4 + s
    t = 2.0 * np.pi * (np.arange(n) + 0.5) / n
    t1, t2 = np.meshgrid(t, t, indexing="ij")
    pts = np.stack([np.sin(a) * np.cos(t1), np.sin(a) * np.sin(t1),
                    np.cos(a) * np.cos(t2), np.cos(a) * np.sin(t2)], axis=-1)
    return float(np.mean(phi3_eval(config, pts)))
