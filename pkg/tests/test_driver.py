import numpy as np
import pytest
from numpy.testing import assert_allclose

from extremal_domains.boundary import op_R
from extremal_domains.driver import (SWEEP_COLUMNS, NonContraction, _fd_laplacian,
                                     _fibonacci_sphere, direct_solve, fixed_point, sweep,
                                     verify_domain)
from extremal_domains.geom import _dist, build_config
from extremal_domains.ld2 import matching_for
from extremal_domains.perturb import DomainSpec, assemble_phi_v, neumann_N


@pytest.fixture(scope="module")
def run12():
    return fixed_point(matching_for(12))


def _far_points(model, factor, n=2000):
    p = _fibonacci_sphere(n)
    d = np.min([_dist(p[:, None], o.centers[None]).min(axis=1) / o.tau for o in model.orbits],
               axis=0)
    return p[d > factor]


# ---------------------------------------------------------------- helpers

def test_fibonacci_points_unit_and_spread():
    p = _fibonacci_sphere(500)
    assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-15)
    assert abs(p[:, 2].mean()) < 1e-3


def test_fd_laplacian_on_first_harmonics():
    a = np.array([0.3, -0.2, 0.9])
    p = _fibonacci_sphere(50, seed=1)
    lap = _fd_laplacian(lambda x: x @ a + (x @ a) ** 2, p, np.full(len(p), 1e-2))
    s = p @ a
    # Delta (a.x) = -2 a.x and Delta (a.x)^2 = 2|a|^2 - 6 (a.x)^2
    assert_allclose(lap, -2 * s + 2 * a @ a - 6 * s * s, atol=1e-8)


# ---------------------------------------------------------------- fixed point

def test_fixed_point_converges(run12):
    dom, rep = run12
    t2 = dom.matching.tau2
    assert rep.final_N < 1e-6 * t2**2.5
    assert rep.iterations == len(rep.history) >= 2
    ratios = np.array(rep.history[1:]) / np.array(rep.history[:-1])
    assert ratios[-2:].max() < 0.9
    assert np.all(np.diff(rep.history[1:]) < 0)


def test_first_step_and_ball(run12):
    dom, _ = run12
    t2 = dom.matching.tau2
    N0, f0, _ = neumann_N(dom.model.zero_bf())
    w0 = -op_R(N0)
    assert w0.norm() <= 10 * t2**2.5
    assert (dom.w - w0).norm() <= t2**2.5


def test_final_residual_recomputed(run12):
    dom, _ = run12
    N, f, _ = neumann_N(dom.w, f0=dom.f)
    assert N.norm() < 1e-6 * dom.matching.tau2**2.5
    assert f == pytest.approx(dom.f, abs=1e-10 * dom.matching.tau2)


def test_report_contents(run12):
    dom, rep = run12
    assert rep.n_components == 14 == dom.matching.m + 2
    assert rep.finite()
    assert rep.grad_variation < 1e-4
    assert rep.positivity_min > 0
    assert rep.trace_max < 1e-9 * dom.matching.tau2
    assert rep.pde_residual < 1e-6
    assert rep.symmetry_deviation < 1e-9
    assert rep.profile_symmetry < 1e-9
    assert "components=14" in rep.summary()


def test_gradient_variation_two_routes(run12):
    # pulled-back normal derivative and the direct solve see the same flat profile
    _, rep = run12
    assert rep.grad_variation_pullback < 1e-4


def test_candidate_matches_direct_solution(run12):
    dom, _ = run12
    sol = direct_solve(dom.v)
    cand = assemble_phi_v(dom.v)
    p = _far_points(dom.model, 2.5)
    assert len(p) > 1000
    assert np.max(np.abs(cand.eval(p) - sol.eval(p)[0])) < 1e-10
    assert sol.residual < 1e-12


def test_fixed_point_deterministic(run12):
    dom, rep = run12
    dom2, rep2 = fixed_point(matching_for(12))
    assert np.array_equal(dom.v.c0, dom2.v.c0) and np.array_equal(dom.v.c2, dom2.v.c2)
    assert rep.grad_variation == rep2.grad_variation
    assert rep.history == rep2.history


def test_fixed_point_from_config():
    dom, rep = fixed_point(build_config(8, 2), verify=False)
    assert rep is None
    assert dom.matching.m == 8
    with pytest.raises(ValueError):
        fixed_point(build_config(6, 2))


def test_fixed_point_reports_non_convergence():
    with pytest.raises(NonContraction, match="non-contraction") as exc:
        fixed_point(matching_for(12), max_iter=1, verify=False)
    assert len(exc.value.history) == 1


def test_gradient_variation_falls_with_lmax():
    mt = matching_for(12)
    coarse = fixed_point(mt, kmax=8, lmax=8)[1].grad_variation
    fine = fixed_point(mt, kmax=8, lmax=16)[1].grad_variation
    assert fine < coarse


def test_unperturbed_domain_not_extremal(run12):
    dom, _ = run12
    rep = verify_domain(DomainSpec(dom.model, dom.model.zero_bf(), 0.0))
    assert rep.grad_variation > 1e-3
    assert rep.n_components == 14


# ---------------------------------------------------------------- sweep

def test_sweep_rows_and_failures():
    rows, slope = sweep([6, 8, 12])
    assert [r["m"] for r in rows] == [6, 8, 12]
    assert rows[0]["error"] and np.isnan(rows[0]["v_sup"])
    for r in rows[1:]:
        assert set(r) == set(SWEEP_COLUMNS)
        assert r["error"] == ""
        assert abs(r["zeta"]) < 3
        ratio = np.sqrt(r["m"] / 2) - np.log(r["m"]) / 4 - r["zeta"]
        assert r["tau2"] / r["tau0"] == pytest.approx(ratio, rel=1e-12)
        assert r["grad_variation"] < 1e-4
    assert 2.0 <= slope <= 3.0
