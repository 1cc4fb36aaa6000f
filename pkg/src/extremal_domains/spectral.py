"""Symmetric spherical-harmonic analysis on S^2.

Only the harmonics invariant under the equator/poles symmetry group are
stored: orders k = 0, m, 2m, ... (cosine in longitude), degree l >= k with
l + k even.  The l = 1 block is therefore always empty, which is what makes
Delta + 2 invertible on this subspace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

DEFAULT_FORBIDDEN_RATIO = 1e-6


def default_lmax(m: int) -> int:
    return max(200, 20 * m)


@dataclass(frozen=True)
class QuadratureGrid:
    """Gauss-Legendre in cos(colatitude) times uniform longitudes."""

    lmax: int
    x: np.ndarray          # cos(theta) nodes
    w: np.ndarray          # Gauss weights in x
    lon: np.ndarray        # longitudes
    points: np.ndarray = field(repr=False)   # (nlat, nlon, 3)

    @property
    def weights(self) -> np.ndarray:
        """Area weights on the (nlat, nlon) grid."""
        return np.outer(self.w, np.full(len(self.lon), 2.0 * np.pi / len(self.lon)))

    @property
    def exactness(self) -> int:
        return 2 * self.lmax


def _legendre_pair(n: int, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """P_n(x) and P_{n-1}(x) by the three-term recurrence."""
    p0, p1 = np.ones_like(x), x.copy()
    for k in range(2, n + 1):
        p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
    return p1, p0


def gauss_legendre(n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes, their sines and weights, in descending x.

    numpy's rule loses about 1e-11 relative accuracy in the weights near
    x = +-1 for n in the hundreds, which shows up as noise in high-degree
    zonal coefficients.  Here the northern nodes are polished by Newton
    steps in the colatitude, the weights use the accurate sine, and the
    southern half is mirrored.
    """
    if n < 1:
        raise ValueError("gauss_legendre needs n >= 1")
    x0, _ = np.polynomial.legendre.leggauss(n)
    th = np.arccos(x0[::-1][: n // 2])
    for _ in range(3):
        c, s = np.cos(th), np.sin(th)
        p, q = _legendre_pair(n, c)
        th = th + p * s / (n * (q - c * p))
    c, s = np.cos(th), np.sin(th)
    p, q = _legendre_pair(n, c)
    w = 2.0 / (n * (q - c * p) / s) ** 2
    if n % 2:
        q0 = _legendre_pair(n - 1, np.zeros(1))[0] if n > 1 else np.ones(1)
        w0 = 2.0 / (n * q0) ** 2
        return (np.r_[c, 0.0, -c[::-1]], np.r_[s, 1.0, s[::-1]],
                np.r_[w, w0, w[::-1]])
    return np.r_[c, -c[::-1]], np.r_[s, s[::-1]], np.r_[w, w[::-1]]


def grid(lmax: int, m: int = 1) -> QuadratureGrid:
    if lmax < 2:
        raise ValueError("grid needs lmax >= 2")
    x, s, w = gauss_legendre(lmax + 1)
    nlon = max(2 * lmax + 1, 2 * m + 1)
    lon = 2.0 * np.pi * np.arange(nlon) / nlon
    pts = np.stack([np.outer(s, np.cos(lon)), np.outer(s, np.sin(lon)),
                    np.outer(x, np.ones(nlon))], axis=-1)
    return QuadratureGrid(lmax, x, w, lon, pts)


def legendre_table(k: int, lmax: int, x: np.ndarray) -> np.ndarray:
    """Orthonormal associated Legendre functions p_l^k(x), l = k..lmax.

    Normalised so that p_l^k(cos theta) * (sqrt 2 cos k lon, or 1 if k = 0)
    has unit L2 norm on the sphere.  Returns shape (lmax - k + 1, len(x)).
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    out = np.zeros((max(lmax - k + 1, 0), x.size))
    if k > lmax:
        return out
    # sectoral start p_k^k, then upward recurrence in l
    pkk = np.full(x.shape, 1.0 / np.sqrt(4.0 * np.pi))
    for j in range(1, k + 1):
        pkk = pkk * np.sqrt((2.0 * j + 1.0) / (2.0 * j)) * s
    out[0] = pkk
    if lmax == k:
        return out
    out[1] = np.sqrt(2.0 * k + 3.0) * x * pkk
    for l in range(k + 2, lmax + 1):
        a = np.sqrt((4.0 * l * l - 1.0) / (l * l - k * k))
        b = np.sqrt(((l - 1.0) ** 2 - k * k) / (4.0 * (l - 1.0) ** 2 - 1.0))
        out[l - k] = a * (x * out[l - k - 1] - b * out[l - k - 2])
    return out


def legendre_dtheta(k: int, lmax: int, x: np.ndarray, table: np.ndarray) -> np.ndarray:
    """d/dtheta of p_l^k(cos theta) from the table (theta not at a pole)."""
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    s = np.where(s < 1e-300, 1e-300, s)
    out = np.zeros_like(table)
    for l in range(k, lmax + 1):
        prev = table[l - k - 1] if l > k else 0.0
        c = np.sqrt((2.0 * l + 1.0) / (2.0 * l - 1.0) * (l - k) * (l + k)) if l > k else 0.0
        out[l - k] = (l * x * table[l - k] - c * prev) / s
    return out


def symmetric_modes(lmax: int, m: int):
    """List of allowed (l, k)."""
    return [(l, k) for k in range(0, lmax + 1, m) for l in range(k, lmax + 1) if (l + k) % 2 == 0]


@dataclass
class SpectralField:
    """Truncated symmetric harmonic expansion.

    ``coeffs[j]`` holds the degrees l = j*m .. lmax for order k = j*m; the
    entries with l + k odd must be zero.
    """

    lmax: int
    m: int
    coeffs: list
    forbidden_ratio: float = 0.0

    def __post_init__(self):
        if len(self.coeffs) != self.lmax // self.m + 1:
            raise ValueError("coefficient table has wrong number of orders")
        for j, c in enumerate(self.coeffs):
            k = j * self.m
            c = np.asarray(c, dtype=float)
            if c.shape != (self.lmax - k + 1,):
                raise ValueError(f"order {k}: expected {self.lmax - k + 1} degrees")
            if np.any(c[1::2] != 0.0):
                raise ValueError(f"order {k}: odd-parity degree has nonzero coefficient")
            self.coeffs[j] = c

    @classmethod
    def zeros(cls, lmax: int, m: int) -> "SpectralField":
        return cls(lmax, m, [np.zeros(lmax - k + 1) for k in range(0, lmax + 1, m)])

    def get(self, l: int, k: int) -> float:
        if k % self.m or k > l or l > self.lmax:
            return 0.0
        return float(self.coeffs[k // self.m][l - k])

    def set(self, l: int, k: int, value: float) -> None:
        if k % self.m or k > l or l > self.lmax or (l + k) % 2:
            raise ValueError(f"mode ({l}, {k}) is not symmetric")
        self.coeffs[k // self.m][l - k] = value

    def vector(self) -> np.ndarray:
        return np.concatenate(self.coeffs)

    def truncate(self, lmax: int) -> "SpectralField":
        """Drop all degrees above ``lmax``."""
        if lmax > self.lmax:
            raise ValueError("truncation degree exceeds the field degree")
        out = [c[: lmax - j * self.m + 1].copy()
               for j, c in enumerate(self.coeffs) if j * self.m <= lmax]
        return SpectralField(lmax, self.m, out)

    def apply_L(self) -> "SpectralField":
        """Delta + 2 applied coefficientwise."""
        out = []
        for j, c in enumerate(self.coeffs):
            l = np.arange(j * self.m, self.lmax + 1)
            out.append(c * (2.0 - l * (l + 1.0)))
        return SpectralField(self.lmax, self.m, out)


def _lon_factor(k: int, lon: np.ndarray) -> np.ndarray:
    return np.ones_like(lon) if k == 0 else np.sqrt(2.0) * np.cos(k * lon)


def project(samples: np.ndarray, qgrid: QuadratureGrid, m: int,
            max_forbidden: float = DEFAULT_FORBIDDEN_RATIO) -> SpectralField:
    """Project grid samples onto the symmetric basis.

    All harmonics up to lmax are analysed; the energy outside the symmetric
    ones is reported and must stay below ``max_forbidden`` of the total.
    """
    lmax = qgrid.lmax
    samples = np.asarray(samples, dtype=float)
    nlon = len(qgrid.lon)
    # Fourier in longitude: int f cos(k lon), int f sin(k lon)
    F = np.fft.rfft(samples, axis=1) * (2.0 * np.pi / nlon)
    total = 0.0
    allowed = 0.0
    coeffs = []
    for k in range(0, lmax + 1):
        P = legendre_table(k, lmax, qgrid.x)
        if k == 0:
            cc = P @ (qgrid.w * F[:, 0].real)
            ss = np.zeros_like(cc)
        else:
            cc = np.sqrt(2.0) * (P @ (qgrid.w * F[:, k].real))
            ss = -np.sqrt(2.0) * (P @ (qgrid.w * F[:, k].imag))
        e = cc**2 + ss**2
        total += float(e.sum())
        if k % m == 0:
            c = cc.copy()
            c[1::2] = 0.0
            allowed += float(np.sum(c**2))
            coeffs.append(c)
    ratio = 0.0 if total == 0 else (total - allowed) / total
    if ratio > max_forbidden:
        raise ValueError(f"project: forbidden-mode energy ratio {ratio:.3e} (input not symmetric)")
    return SpectralField(lmax, m, coeffs, forbidden_ratio=ratio)


def solve_L(rhs: SpectralField) -> SpectralField:
    """Solve (Delta + 2) u = rhs on the symmetric truncated basis."""
    if rhs.lmax >= 1 and rhs.get(1, 0) != 0.0:
        raise ValueError("solve_L: l = 1 content is resonant")
    out = []
    for j, c in enumerate(rhs.coeffs):
        l = np.arange(j * rhs.m, rhs.lmax + 1)
        div = 2.0 - l * (l + 1.0)
        div[l == 1] = 1.0
        out.append(c / div)
    return SpectralField(rhs.lmax, rhs.m, out)


def eval_field(field_: SpectralField, p) -> Tuple[np.ndarray, np.ndarray]:
    """Value and tangent gradient at unit vectors p (shape (..., 3))."""
    p = np.asarray(p, dtype=float)
    flat = p.reshape(-1, 3)
    x = np.clip(flat[:, 2], -1.0, 1.0)
    lon = np.arctan2(flat[:, 1], flat[:, 0])
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    val = np.zeros(len(flat))
    dth = np.zeros(len(flat))
    dlon_over_s = np.zeros(len(flat))
    for j, c in enumerate(field_.coeffs):
        k = j * field_.m
        if not np.any(c):
            continue
        P = legendre_table(k, field_.lmax, x)
        dP = legendre_dtheta(k, field_.lmax, x, P)
        radial = c @ P
        dradial = c @ dP
        lf = _lon_factor(k, lon)
        val += radial * lf
        dth += dradial * lf
        if k:
            # p_l^k / sin(theta) is finite for k >= 1
            q = np.where(s > 1e-300, radial / np.where(s > 1e-300, s, 1.0), 0.0)
            dlon_over_s += q * (-np.sqrt(2.0) * k * np.sin(k * lon))
    # at the poles symmetric fields have zero gradient
    pole = s < 1e-12
    dth[pole] = 0.0
    dlon_over_s[pole] = 0.0
    e_th = np.column_stack([x * np.cos(lon), x * np.sin(lon), -s])
    e_lon = np.column_stack([-np.sin(lon), np.cos(lon), np.zeros_like(lon)])
    grad = dth[:, None] * e_th + dlon_over_s[:, None] * e_lon
    return val.reshape(p.shape[:-1]), grad.reshape(p.shape)


def eval_on_grid(field_: SpectralField, qgrid: QuadratureGrid) -> np.ndarray:
    """Synthesis on a quadrature grid (values only)."""
    out = np.zeros((len(qgrid.x), len(qgrid.lon)))
    for j, c in enumerate(field_.coeffs):
        k = j * field_.m
        if not np.any(c):
            continue
        P = legendre_table(k, field_.lmax, qgrid.x)
        out += np.outer(c @ P, _lon_factor(k, qgrid.lon))
    return out
