"""Sphere geometry, symmetric singular configurations and smooth cutoffs.

The configurations are the equatorial m-gon plus the two poles on S^2, and
the m x m lattice on the Clifford torus in S^3.  Points are stored as unit
vectors in R^3 or R^4 (the latter as (Re z1, Im z1, Re z2, Im z2)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

UNIT_TOL = 1e-12


@dataclass(frozen=True)
class SymmetryConfig:
    """Singular sets and symmetry generators for a given m.

    Attributes
    ----------
    m : int
        Even number of equatorial points (2D) or lattice side (3D).
    dimension : int
        Sphere dimension, 2 or 3.
    L0 : ndarray
        Equatorial points (m, 3) in 2D, or the lattice (m*m, 4) in 3D.
    L2 : ndarray
        The poles (2, 3) in 2D, empty (0, 4) in 3D.
    p0, p2 : ndarray
        Base points; p2 is None in 3D.
    delta : float
        1/(10 m).
    generators : list of ndarray
        Orthogonal reflection/involution matrices generating the group.
    """

    m: int
    dimension: int
    L0: np.ndarray
    L2: np.ndarray
    p0: np.ndarray
    p2: Optional[np.ndarray]
    delta: float
    generators: List[np.ndarray] = field(repr=False)

    @property
    def singular_set(self) -> np.ndarray:
        return np.vstack([self.L0, self.L2]) if len(self.L2) else self.L0


def _reflection(normal: np.ndarray) -> np.ndarray:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    return np.eye(len(n)) - 2.0 * np.outer(n, n)


def _conj_rot(angle: float, slot: int) -> np.ndarray:
    """Matrix of z -> e^{i angle} conj(z) on complex slot 0 or 1 of C^2."""
    c, s = np.cos(angle), np.sin(angle)
    block = np.array([[c, s], [s, -c]])
    out = np.eye(4)
    i = 2 * slot
    out[i:i + 2, i:i + 2] = block
    return out


def build_config(m: int, dimension: int = 2) -> SymmetryConfig:
    """Build the symmetric configuration for even ``m >= 4``."""
    if int(m) != m:
        raise ValueError(f"m must be an integer, got {m}")
    m = int(m)
    if m < 4:
        raise ValueError(f"m must be at least 4, got {m}")
    if m % 2:
        raise ValueError(f"m must be even, got {m}")
    if dimension == 2:
        ang = 2.0 * np.pi * np.arange(m) / m
        L0 = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(m)])
        L2 = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
        gens = [_reflection([0.0, 0.0, 1.0])]
        # meridian planes through the points of L0 and through the midpoints
        for j in range(m):
            a = np.pi * j / m
            gens.append(_reflection([-np.sin(a), np.cos(a), 0.0]))
        return SymmetryConfig(m, 2, L0, L2, L0[0].copy(), L2[0].copy(),
                              1.0 / (10 * m), gens)
    if dimension == 3:
        ang = 2.0 * np.pi * np.arange(m) / m
        a1, a2 = np.meshgrid(ang, ang, indexing="ij")
        a1, a2 = a1.ravel(), a2.ravel()
        L = np.column_stack([np.cos(a1), np.sin(a1), np.cos(a2), np.sin(a2)])
        L /= np.sqrt(2.0)
        swap = np.zeros((4, 4))
        swap[0, 2] = swap[1, 3] = swap[2, 0] = swap[3, 1] = 1.0
        gens = [swap,
                _conj_rot(0.0, 1), _conj_rot(2 * np.pi / m, 1),
                _conj_rot(0.0, 0), _conj_rot(2 * np.pi / m, 0)]
        return SymmetryConfig(m, 3, L, np.zeros((0, 4)), L[0].copy(), None,
                              1.0 / (10 * m), gens)
    raise ValueError(f"dimension must be 2 or 3, got {dimension}")


def _check_unit(p: np.ndarray, name: str) -> None:
    nrm = np.linalg.norm(p, axis=-1)
    if np.any(np.abs(nrm - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} is not a unit vector (norm {nrm})")


def geodesic_distance(p, q) -> np.ndarray:
    """Great-circle distance, stable near 0 and pi.

    Broadcasts over leading axes.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    _check_unit(p, "p")
    _check_unit(q, "q")
    return _dist(p, q)


def _dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # 2 atan2(|p-q|, |p+q|) is accurate over the whole range [0, pi]
    a = np.linalg.norm(p - q, axis=-1)
    b = np.linalg.norm(p + q, axis=-1)
    return 2.0 * np.arctan2(a, b)


def dist_to_set(p, points) -> Tuple[float, int]:
    """Distance from ``p`` to the nearest of ``points`` and its index."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.size == 0:
        raise ValueError("empty point set")
    p = np.asarray(p, dtype=float)
    _check_unit(p, "p")
    d = _dist(p[None, :], points)
    i = int(np.argmin(d))  # argmin returns the first minimiser
    return float(d[i]), i


def _f_exp(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def Psi(s):
    """Smooth step: 0 on (-inf, -1], 1 on [1, inf), Psi - 1/2 odd."""
    s = np.asarray(s, dtype=float)
    a = _f_exp(s + 1.0)
    b = _f_exp(1.0 - s)
    return a / (a + b)


def Psi_derivs(s) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Psi and its first two derivatives."""
    s = np.asarray(s, dtype=float)
    x, y = s + 1.0, 1.0 - s
    a, b = _f_exp(x), _f_exp(y)
    # f' = f/x^2, f'' = f (1 - 2x)/x^4 for x > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        a1 = np.where(x > 0, a / x**2, 0.0)
        a2 = np.where(x > 0, a * (1.0 - 2.0 * x) / x**4, 0.0)
        b1 = np.where(y > 0, -b / y**2, 0.0)
        b2 = np.where(y > 0, b * (1.0 - 2.0 * y) / y**4, 0.0)
    S = a + b
    S1 = a1 + b1
    S2 = a2 + b2
    P = a / S
    P1 = (a1 * S - a * S1) / S**2
    P2 = (a2 - 2.0 * P1 * S1 - P * S2) / S
    return P, P1, P2


def cutoff(a: float, b: float, t):
    """psi_cut[a, b](t) = Psi(L(t)) with L affine, L(a) = -3, L(b) = 3."""
    if a == b:
        raise ValueError("cutoff needs a != b")
    return Psi(-3.0 + 6.0 * (np.asarray(t, dtype=float) - a) / (b - a))


def cutoff_derivs(a: float, b: float, t):
    """Value and first two t-derivatives of cutoff(a, b, t)."""
    if a == b:
        raise ValueError("cutoff needs a != b")
    k = 6.0 / (b - a)
    P, P1, P2 = Psi_derivs(-3.0 + k * (np.asarray(t, dtype=float) - a))
    return P, k * P1, k * k * P2


def check_symmetric(evaluator: Callable[[np.ndarray], np.ndarray],
                    config: SymmetryConfig, n: int = 200, tol: float = 0.0,
                    seed: int = 0, avoid: float = 0.0) -> float:
    """Max of |f(gamma p) - f(p)| over seeded random points and generators.

    ``evaluator`` maps an (N, dim+1) array of unit vectors to N values (or
    N x k arrays).  Points within ``avoid`` of the singular set are
    resampled.  ``tol`` is accepted for interface symmetry; the caller
    compares the returned deviation against it.
    """
    rng = np.random.default_rng(seed)
    dim = config.dimension + 1
    pts = np.empty((0, dim))
    sing = config.singular_set
    while len(pts) < n:
        x = rng.standard_normal((2 * n, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        if avoid > 0:
            d = _dist(x[:, None, :], sing[None, :, :]).min(axis=1)
            x = x[d > avoid]
        pts = np.vstack([pts, x])
    pts = pts[:n]
    base = np.asarray(evaluator(pts), dtype=float)
    dev = 0.0
    for g in config.generators:
        moved = np.asarray(evaluator(pts @ g.T), dtype=float)
        dev = max(dev, float(np.max(np.abs(moved - base))))
    return dev


def tangent_frame(center: np.ndarray, ref: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangent pair (e, f) at ``center`` with e along ``ref``."""
    e = ref - np.dot(ref, center) * center
    e = e / np.linalg.norm(e)
    f = np.cross(center, e)
    return e, f


def polar_coords(x: np.ndarray, center: np.ndarray, e: np.ndarray,
                 f: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Geodesic polar coordinates (r, theta) of points x about ``center``."""
    r = _dist(x, center[None, :])
    theta = np.arctan2(x @ f, x @ e)
    return r, theta


def polar_point(center: np.ndarray, e: np.ndarray, f: np.ndarray, r, theta) -> np.ndarray:
    """Point at geodesic polar coordinates (r, theta) about ``center``."""
    r = np.asarray(r, dtype=float)[..., None]
    theta = np.asarray(theta, dtype=float)[..., None]
    return np.cos(r) * center + np.sin(r) * (np.cos(theta) * e + np.sin(theta) * f)
