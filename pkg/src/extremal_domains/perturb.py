"""Boundary perturbations and the candidate eigenfunction on a perturbed domain.

A boundary function v moves each circle radially inward by v(theta).  The
motion is spread over a collar by the cutoff psi (1 for |r - tau| <= tau/6,
0 for |r - tau| >= tau/3), giving the diffeomorphism

    Theta_v(r, theta) = (R, theta),  R = r - psi(r) v(theta).

Everything is solved on the fixed exterior domain with the pulled-back
operator L_v = Theta_v^* (Delta + 2).  The candidate is

    phi_v = phi o Theta_v - xi_v - xi~_v,

with phi the LD solution, xi_v = H_L(osc trace of phi o Theta_v) and xi~_v the
correction making (xi_v + xi~_v) L_v-harmonic with no oscillatory trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .boundary import (BoundaryFunction, BoundaryModel, ExteriorField, fourier_cos, h_L,
                       j_L)
from .geom import _dist, cutoff_derivs
from .ld2 import varphi_eval

NEUMANN_TOL = 1e-12
NEUMANN_MAX_RATIO = 0.9
NEUMANN_MAX_ITER = 60


# ---------------------------------------------------------------- collar cutoff

def collar_cutoff(tau: float, r) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """psi(r) and its first two r-derivatives."""
    r = np.asarray(r, dtype=float)
    t = np.abs(r - tau) / tau
    sgn = np.where(r >= tau, 1.0, -1.0)
    P, P1, P2 = cutoff_derivs(0.5, 0.0, t)
    return P, sgn * P1 / tau, P2 / tau**2


@dataclass
class DomainSpec:
    """Perturbed domain: v = w + f with w oscillatory and f constant."""

    model: BoundaryModel = field(repr=False)
    w: BoundaryFunction
    f: float = 0.0

    @property
    def v(self) -> BoundaryFunction:
        return self.w + self.f

    @property
    def matching(self):
        return self.model.matching

    def smallness(self) -> float:
        """||v|| / tau2^2 (the construction assumes this is below 1)."""
        return self.v.norm() / self.model.orbits[1].tau**2

    def injectivity_margin(self) -> float:
        """1 - sup |v|/tau: positive margin keeps the displaced circles nested."""
        out = 1.0
        for i, o in enumerate(self.model.orbits):
            th = np.linspace(0.0, 2.0 * np.pi, 256, endpoint=False)
            out = min(out, 1.0 - float(np.max(np.abs(self.v.values(i, th)))) / o.tau)
        return out


# ---------------------------------------------------------------- geometry

def _nearest(model: BoundaryModel, p: np.ndarray):
    """Nearest centre over both orbits: (orbit index, centre index, distance)."""
    best = None
    for i, o in enumerate(model.orbits):
        d = _dist(p[:, None, :], o.centers[None, :, :])
        j = np.argmin(d, axis=1)
        dj = d[np.arange(len(p)), j] / o.tau
        if best is None:
            best = (np.full(len(p), i), j, dj)
        else:
            take = dj < best[2]
            best = (np.where(take, i, best[0]), np.where(take, j, best[1]), np.where(take, dj, best[2]))
    return best


def displace(p, v: BoundaryFunction) -> np.ndarray:
    """Move points of the annuli tau/2 <= d <= 2 tau along -grad d by psi v."""
    p = np.asarray(p, dtype=float)
    flat = p.reshape(-1, 3)
    model = v.model
    orb, idx, rel = _nearest(model, flat)
    if np.any((rel < 0.5) | (rel > 2.0)):
        raise ValueError("displace: point outside the annuli tau/2 <= d <= 2 tau")
    out = flat.copy()
    for i, o in enumerate(model.orbits):
        for j in np.unique(idx[orb == i]):
            sel = np.nonzero((orb == i) & (idx == j))[0]
            r, th = o.polar(flat[sel], j)
            psi = collar_cutoff(o.tau, r)[0]
            R = r - psi * v.values(i, th)
            out[sel] = o.points(R, th, j)
    return out.reshape(p.shape)


def collar_metric(v: BoundaryFunction, z, theta, orbit: int) -> dict:
    """Pulled-back round metric in collar coordinates (z = tau - r, theta).

    Returns the components ``gzz, gzt, gtt`` with their z- and
    theta-derivatives (keys suffixed ``_z`` / ``_t``), the scaled metric
    ``hat = g / tau^2`` and the displaced radius ``R``.
    """
    o = v.model.orbits[orbit]
    tau = o.tau
    z = np.asarray(z, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(np.abs(z) >= 0.5 * tau):
        raise ValueError("collar_metric: |z| must be below tau/2")
    psi, psi_r, psi_rr = collar_cutoff(tau, tau - z)
    psi_z, psi_zz = -psi_r, psi_rr
    vv = v.values(orbit, theta)
    v1 = v.derivative(orbit, theta, 1)
    v2 = v.derivative(orbit, theta, 2)
    R = tau - z - psi * vv
    Rz = -1.0 - psi_z * vv
    Rzz = -psi_zz * vv
    Rt = -psi * v1
    Rtt = -psi * v2
    Rzt = -psi_z * v1
    sc = np.sin(R) * np.cos(R)
    g = {
        "R": R,
        "gzz": Rz**2,
        "gzt": Rz * Rt,
        "gtt": Rt**2 + np.sin(R)**2,
        "gzz_z": 2.0 * Rz * Rzz,
        "gzz_t": 2.0 * Rz * Rzt,
        "gzt_z": Rzz * Rt + Rz * Rzt,
        "gzt_t": Rzt * Rt + Rz * Rtt,
        "gtt_z": 2.0 * Rt * Rzt + 2.0 * sc * Rz,
        "gtt_t": 2.0 * Rt * Rtt + 2.0 * sc * Rt,
    }
    g["hat"] = np.stack([[g["gzz"], g["gzt"]], [g["gzt"], g["gtt"]]]) / tau**2
    return g


def metric_laplacian(g: dict, u_z, u_t, u_zz, u_zt, u_tt) -> np.ndarray:
    """Laplace-Beltrami of u from metric components and their derivatives."""
    a, b, c = g["gzz"], g["gzt"], g["gtt"]
    det = a * c - b * b
    iz, izt, it = c / det, -b / det, a / det
    dg = {("z", "z", "z"): g["gzz_z"], ("z", "z", "t"): g["gzz_t"],
          ("z", "t", "z"): g["gzt_z"], ("z", "t", "t"): g["gzt_t"],
          ("t", "t", "z"): g["gtt_z"], ("t", "t", "t"): g["gtt_t"]}

    def d(i, j, k):  # partial_k g_ij
        return dg[tuple(sorted((i, j), key="zt".index)) + (k,)]

    inv = {("z", "z"): iz, ("z", "t"): izt, ("t", "z"): izt, ("t", "t"): it}
    first = {"z": u_z, "t": u_t}
    second = {("z", "z"): u_zz, ("z", "t"): u_zt, ("t", "z"): u_zt, ("t", "t"): u_tt}
    out = 0.0
    for i in "zt":
        for j in "zt":
            gamma_u = 0.0
            for k in "zt":
                gam = 0.0
                for l in "zt":
                    gam = gam + 0.5 * inv[(k, l)] * (d(j, l, i) + d(i, l, j) - d(i, j, l))
                gamma_u = gamma_u + gam * first[k]
            out = out + inv[(i, j)] * (second[(i, j)] - gamma_u)
    return out


def normal_vector(v: BoundaryFunction, theta, orbit: int) -> dict:
    """Unit normal of the pulled-back metric on r = tau, scaled by tau.

    Components are in (z, theta) coordinates and point into the disk.
    ``dot_unperturbed`` is its scaled-metric inner product with tau d/dz.
    """
    g = collar_metric(v, np.zeros_like(np.asarray(theta, float)), theta, orbit)
    tau = v.model.orbits[orbit].tau
    det = g["gzz"] * g["gtt"] - g["gzt"]**2
    izz, izt = g["gtt"] / det, -g["gzt"] / det
    s = np.sqrt(izz)
    nz, nt = tau * izz / s, tau * izt / s
    hat = g["hat"]
    norm_hat = np.sqrt(hat[0, 0] * nz**2 + 2 * hat[0, 1] * nz * nt + hat[1, 1] * nt**2)
    dot = (hat[0, 0] * nz + hat[0, 1] * nt) * tau
    return {"z": nz, "theta": nt, "norm_hat": norm_hat, "dot_unperturbed": dot, "g_zz_inv": izz,
            "g_zt_inv": izt}


def pulled_back_L(tau: float, r, v_vals, v1, v2, u, ur, urr, ut, utt, urt) -> np.ndarray:
    """Theta_v^*(Delta + 2) applied to u, given u's polar derivatives at (r, theta)."""
    psi, p1, p2 = collar_cutoff(tau, r)
    R = r - psi * v_vals
    Rr = 1.0 - p1 * v_vals
    Rrr = -p2 * v_vals
    Rt = -psi * v1
    Rtt = -psi * v2
    Rrt = -p1 * v1
    a = Rt / Rr
    a_t = (Rtt * Rr - Rt * Rrt) / Rr**2
    a_r = (Rrt * Rr - Rt * Rrr) / Rr**2
    UR = ur / Rr
    URR = (urr / Rr - ur * Rrr / Rr**2) / Rr
    Utt = utt - 2.0 * a * urt + a * a * urr - a_t * ur + a * a_r * ur
    sR = np.sin(R)
    return URR + np.cos(R) / sR * UR + Utt / sR**2 + 2.0 * u


def _synth(modes, U, Ur, Urr, theta):
    k = modes[:, None].astype(float)
    cos = np.cos(k * theta[None, :])
    sin = np.sin(k * theta[None, :])
    u = U.T @ cos
    ur = Ur.T @ cos
    urr = Urr.T @ cos
    ut = U.T @ (-k * sin)
    utt = U.T @ (-k * k * cos)
    urt = Ur.T @ (-k * sin)
    return u, ur, urr, ut, utt, urt


def collar_defect(u: ExteriorField, v: BoundaryFunction):
    """Mode profiles of (L - L_v) u on each collar grid."""
    model = u.model
    out = []
    for i, (o, grid) in enumerate(zip(model.orbits, model.grids)):
        U, Ur, Urr = u.collar_modes(i)
        th = grid.theta
        uu, ur, urr, ut, utt, urt = _synth(o.modes, U, Ur, Urr, th)
        r = grid.r[:, None]
        s = np.sin(r)
        Lu = urr + np.cos(r) / s * ur + utt / s**2 + 2.0 * uu
        vv = v.values(i, th)[None, :]
        v1 = v.derivative(i, th, 1)[None, :]
        v2 = v.derivative(i, th, 2)[None, :]
        Lv = pulled_back_L(o.tau, r, vv, v1, v2, uu, ur, urr, ut, utt, urt)
        coef, ratio = fourier_cos(Lu - Lv, o.modes)
        out.append(coef.T)
    return out


# ---------------------------------------------------------------- assembly

@dataclass
class CandidateEigenfunction:
    """phi_v = phi o Theta_v - xi_v - xi~_v on the fixed exterior domain."""

    v: BoundaryFunction
    phi_trace: BoundaryFunction       # trace of phi o Theta_v
    xi: ExteriorField
    xi_tilde: ExteriorField
    neumann_iterations: int
    neumann_history: list

    @property
    def model(self) -> BoundaryModel:
        return self.v.model

    def trace(self) -> BoundaryFunction:
        return self.phi_trace - self.xi.trace() - self.xi_tilde.trace()

    @property
    def constant(self) -> float:
        """Average boundary value (the scalar that f(w) drives to zero)."""
        return self.trace().avg()

    def eval(self, p) -> np.ndarray:
        """phi_v at points of the fixed exterior domain."""
        p = np.asarray(p, dtype=float)
        q = pull_point(self.v, p)
        return varphi_eval(self.model.matching, q)[0] - self.xi.value(p) - self.xi_tilde.value(p)

    def normal_derivative(self) -> BoundaryFunction:
        """tau-scaled normal derivative along the boundary in the pulled-back metric."""
        model = self.model
        data = []
        corr = self.xi + self.xi_tilde
        for i, (o, grid) in enumerate(zip(model.orbits, model.grids)):
            th = grid.theta
            vv = self.v.values(i, th)
            v1 = self.v.derivative(i, th, 1)
            R = o.tau - vv
            pts = o.points(R, th)
            _, grad = varphi_eval(model.matching, pts)
            c, e, f = o.centers[0], o.e[0], o.f[0]
            u_ = np.cos(th)[:, None] * e + np.sin(th)[:, None] * f
            eR = -np.sin(R)[:, None] * c + np.cos(R)[:, None] * u_
            et = (-np.sin(th)[:, None] * e + np.cos(th)[:, None] * f) * np.sin(R)[:, None]
            phiR = np.sum(grad * eR, axis=1)
            phit = np.sum(grad * et, axis=1)
            ur = phiR
            ut = phit - v1 * phiR
            val, dr = corr.boundary_data(i)
            a, _ = fourier_cos(val, o.modes)
            ut_c = -(np.sin(np.multiply.outer(th, o.modes)) * o.modes) @ a
            ur = ur - dr
            ut = ut - ut_c
            nv = normal_vector(self.v, th, i)
            # z = tau - r, so u_z = -u_r
            nd = nv["z"] * (-ur) + nv["theta"] * ut
            data.append(fourier_cos(nd, o.bf_modes)[0])
        return BoundaryFunction(model, data[0], data[1])


def pull_point(v: BoundaryFunction, p: np.ndarray) -> np.ndarray:
    """Theta_v(p) for arbitrary points (identity away from the collars)."""
    p = np.asarray(p, dtype=float)
    flat = p.reshape(-1, 3)
    orb, idx, rel = _nearest(v.model, flat)
    move = (rel > 0.5) & (rel < 1.5)
    out = flat.copy()
    if np.any(move):
        out[move] = displace(flat[move], v)
    return out.reshape(p.shape)


def phi_trace(v: BoundaryFunction) -> BoundaryFunction:
    """Trace of phi o Theta_v, i.e. phi on the displaced circles."""
    model = v.model
    data = []
    for i, (o, grid) in enumerate(zip(model.orbits, model.grids)):
        th = grid.theta
        pts = o.points(o.tau - v.values(i, th), th)
        val = varphi_eval(model.matching, pts)[0]
        data.append(fourier_cos(val, o.bf_modes)[0])
    return BoundaryFunction(model, data[0], data[1])


def _field_size(u: ExteriorField) -> float:
    out = abs(u.w0) + abs(u.w2) + sum(float(np.max(np.abs(c))) for c in u.mult)
    for lay in u.layers:
        if lay is not None:
            out += float(np.max(np.abs(lay.val)))
    return out


def solve_L_v(E0, v: BoundaryFunction, tol: float = NEUMANN_TOL) -> Tuple[ExteriorField, list]:
    """u with L_v u = E0 (collar sources) and zero oscillatory trace.

    Iterates u <- J_L(E0 + (L - L_v) u), the truncated Neumann series for
    J_L [1 - (L - L_v) J_L]^{-1}.
    """
    model = v.model
    u = j_L(model, E0)
    hist = []
    for _ in range(NEUMANN_MAX_ITER):
        D = collar_defect(u, v)
        new = j_L(model, [a + b for a, b in zip(E0, D)])
        inc = _field_size(new - u)
        hist.append(inc)
        u = new
        if inc < tol:
            break
        if len(hist) >= 3 and hist[-1] >= NEUMANN_MAX_RATIO * hist[-2] and hist[-2] > 0:
            raise RuntimeError(f"Neumann series not contracting (ratio {hist[-1] / hist[-2]:.3f})")
    else:
        raise RuntimeError("Neumann series did not reach tolerance")
    return u, hist


def assemble_phi_v(v: BoundaryFunction, matching=None, lmax=None) -> CandidateEigenfunction:
    """Build phi_v for the boundary perturbation v."""
    pt = phi_trace(v)
    xi = h_L(pt.osc())
    if not np.any(v.c0) and not np.any(v.c2):
        return CandidateEigenfunction(v, pt, xi, ExteriorField.zero(v.model), 0, [])
    E0 = collar_defect(xi, v)
    xt, hist = solve_L_v(E0, v)
    return CandidateEigenfunction(v, pt, xi, xt, len(hist), hist)


def solve_f(w: BoundaryFunction, matching=None, f0: float = 0.0, tol: float = 1e-10,
            max_iter: int = 30) -> Tuple[float, CandidateEigenfunction]:
    """Constant c such that phi_{w + c} vanishes on the boundary.

    Secant iteration started from the derivative estimate -1.
    """
    tau2 = w.model.orbits[1].tau
    c = f0
    cand = assemble_phi_v(w + c)
    k = cand.constant
    slope = -1.0
    for _ in range(max_iter):
        if abs(k) < tol * tau2:
            return c, cand
        c_new = c - k / slope
        cand_new = assemble_phi_v(w + c_new)
        k_new = cand_new.constant
        if c_new != c and k_new != k:
            slope = (k_new - k) / (c_new - c)
        c, k, cand = c_new, k_new, cand_new
    if abs(k) < tol * tau2:
        return c, cand
    raise RuntimeError(f"solve_f: no convergence in {max_iter} steps (residual {k:.3e})")


def neumann_N(w: BoundaryFunction, matching=None, lmax=None, f0: float = 0.0):
    """N(w): tau-weighted oscillatory part of the normal derivative of phi_{w + f(w)}.

    Returns (N, f, candidate).
    """
    f, cand = solve_f(w, f0=f0)
    return cand.normal_derivative().tau_osc(), f, cand
