"""Factored curvature solves: inversion-lemma levels, dual row, leader step."""

import numpy as np
import pytest

from stackmbrl.woodbury import (COND_LIMIT, SCHUR_FLOOR, HessianOperator,
                                IllConditionedError, LowRankFactors,
                                SingularScalarError, WoodburySolver,
                                affine_fit_r2, benchmark_solve,
                                dense_leader_gradient, leader_gradient,
                                random_factors)


def empty_cols(n_phi: int) -> np.ndarray:
    return np.zeros((n_phi, 0))


def ridge_only_factors(n_phi: int, ridge: float) -> LowRankFactors:
    return LowRankFactors(u=empty_cols(n_phi), v=empty_cols(n_phi),
                          x=empty_cols(n_phi), y=empty_cols(n_phi),
                          z=empty_cols(n_phi), w=np.zeros((2, 0)), ridge=ridge)


# ---------------------------------------------------------------------------
# solver correctness
# ---------------------------------------------------------------------------


def test_pure_ridge_solve_is_division():
    factors = ridge_only_factors(5, ridge=2.0)
    solver = WoodburySolver(factors)
    v = np.arange(1.0, 6.0)
    assert np.allclose(solver.solve(v), v / 2.0, atol=1e-15)
    block = np.arange(10.0).reshape(5, 2)
    assert np.allclose(solver.solve(block), block / 2.0, atol=1e-15)


def test_solver_matches_dense_inverse_over_many_draws():
    rng = np.random.default_rng(99)
    for seed in range(100):
        factors = random_factors(50, seed=seed)
        solver = WoodburySolver(factors)
        dense = factors.dense()
        v = rng.standard_normal(50)
        got = solver.solve(v)
        want = np.linalg.solve(dense, v)
        assert np.linalg.norm(got - want) <= 1e-8 * np.linalg.norm(want)
        block = rng.standard_normal((50, 3))
        got_b = solver.solve(block)
        want_b = np.linalg.solve(dense, block)
        assert np.linalg.norm(got_b - want_b) <= 1e-8 * np.linalg.norm(want_b)


def test_solve_residuals_small_over_thousand_cases():
    rng = np.random.default_rng(5)
    checked = 0
    for seed in range(100):
        factors = random_factors(50, seed=1000 + seed)
        solver = WoodburySolver(factors)
        dense = factors.dense()
        for _ in range(10):
            v = rng.standard_normal(50)
            residual = dense @ solver.solve(v) - v
            assert np.linalg.norm(residual) <= 1e-8 * np.linalg.norm(v)
            checked += 1
    assert checked == 1000


def test_levels_independent_of_zeroed_blocks():
    base = random_factors(30, seed=1)
    variants = {
        "no-step-pairs": LowRankFactors(u=base.u, v=base.v,
                                        x=np.zeros_like(base.x),
                                        y=np.zeros_like(base.y), z=base.z,
                                        w=base.w, ridge=base.ridge),
        "no-penalty": LowRankFactors(u=base.u, v=base.v, x=base.x, y=base.y,
                                     z=np.zeros_like(base.z), w=base.w,
                                     ridge=base.ridge),
        "no-score-pairs": LowRankFactors(u=np.zeros_like(base.u),
                                         v=np.zeros_like(base.v), x=base.x,
                                         y=base.y, z=base.z, w=base.w,
                                         ridge=base.ridge),
    }
    rng = np.random.default_rng(2)
    v = rng.standard_normal(30)
    for name, factors in variants.items():
        got = WoodburySolver(factors).solve(v)
        want = np.linalg.solve(factors.dense(), v)
        assert np.linalg.norm(got - want) <= 1e-9 * np.linalg.norm(want), name


def test_large_dimension_solve_never_densifies():
    """At n_phi = 20000 a dense route would allocate ~3 GB; the factored
    solve must finish quickly in low-rank time."""
    import time
    factors = random_factors(20_000, seed=3)
    rhs = np.random.default_rng(4).standard_normal(20_000)
    start = time.perf_counter()
    solver = WoodburySolver(factors)
    out = solver.solve(rhs)
    elapsed = time.perf_counter() - start
    assert np.all(np.isfinite(out))
    assert elapsed < 2.0
    # spot-check the solution by residual instead of a dense inverse
    f = factors
    recon = (f.ridge * out + f.u @ (f.v.T @ out) - f.x @ (f.y.T @ out)
             + f.z @ (f.z.T @ out))
    assert np.linalg.norm(recon - rhs) <= 1e-8 * np.linalg.norm(rhs)


def test_singular_core_is_rejected():
    e1 = np.zeros((4, 1))
    e1[0, 0] = 1.0
    factors = LowRankFactors(u=e1, v=-e1, x=empty_cols(4), y=empty_cols(4),
                             z=empty_cols(4), w=np.zeros((1, 1)), ridge=1.0)
    with pytest.raises(IllConditionedError):
        WoodburySolver(factors)


def test_factor_shape_validation():
    with pytest.raises(ValueError):
        LowRankFactors(u=np.zeros((4, 2)), v=np.zeros((4, 3)),
                       x=empty_cols(4), y=empty_cols(4), z=empty_cols(4),
                       w=np.zeros((1, 2)))
    with pytest.raises(ValueError):
        LowRankFactors(u=empty_cols(4), v=empty_cols(4), x=empty_cols(4),
                       y=empty_cols(4), z=empty_cols(4), w=np.zeros((1, 0)),
                       ridge=0.0)
    with pytest.raises(ValueError):
        LowRankFactors(u=np.zeros((4, 2)), v=np.zeros((4, 2)),
                       x=empty_cols(4), y=empty_cols(4), z=empty_cols(4),
                       w=np.zeros((1, 3)))


# ---------------------------------------------------------------------------
# dual-corrected operator
# ---------------------------------------------------------------------------


def test_operator_matches_dense_dual_formula():
    for seed in (0, 7, 21):
        factors = random_factors(40, seed=seed)
        solver = WoodburySolver(factors)
        op = HessianOperator(solver)
        a_inv = np.linalg.inv(factors.dense())
        b = factors.dual_coupling
        s = factors.dual_slope - factors.lam * float(b @ a_inv @ b)
        dense_h = a_inv + factors.lam * np.outer(a_inv @ b, a_inv.T @ b) / s
        v = np.random.default_rng(seed).standard_normal(40)
        assert np.linalg.norm(op.apply(v) - dense_h @ v) <= 1e-8 * np.linalg.norm(dense_h @ v)
        assert np.allclose(op.apply_inverse_curvature(v), solver.solve(v), atol=1e-15)


def test_operator_multiplier_free_reductions():
    factors = random_factors(25, seed=11)
    solver = WoodburySolver(factors)
    v = np.random.default_rng(1).standard_normal(25)
    # explicit zero multiplier: the dual row is bypassed entirely
    op_zero = HessianOperator(solver, lam=0.0)
    assert np.array_equal(op_zero.apply(v), solver.solve(v))
    # empty coupling vector: same bypass
    stripped = LowRankFactors(u=factors.u, v=factors.v, x=factors.x,
                              y=factors.y, z=factors.z, w=factors.w,
                              ridge=factors.ridge, lam=factors.lam)
    op_empty = HessianOperator(WoodburySolver(stripped))
    assert np.array_equal(op_empty.apply(v), WoodburySolver(stripped).solve(v))


def test_vanishing_schur_complement_raises():
    factors = random_factors(20, seed=13)
    solver = WoodburySolver(factors)
    a_inv_b = solver.solve(factors.dual_coupling)
    fatal_slope = factors.lam * float(factors.dual_coupling @ a_inv_b)
    rigged = LowRankFactors(u=factors.u, v=factors.v, x=factors.x,
                            y=factors.y, z=factors.z, w=factors.w,
                            ridge=factors.ridge, lam=factors.lam,
                            dual_coupling=factors.dual_coupling,
                            dual_slope=fatal_slope)
    op = HessianOperator(WoodburySolver(rigged))
    assert abs(op.schur) < SCHUR_FLOOR
    with pytest.raises(SingularScalarError):
        op.apply(np.ones(20))


# ---------------------------------------------------------------------------
# leader gradient
# ---------------------------------------------------------------------------


def test_leader_gradient_matches_dense_route():
    rng = np.random.default_rng(3)
    for seed in range(20):
        factors = random_factors(60, seed=seed)
        gp = rng.standard_normal(4)
        gm = rng.standard_normal(60)
        for dual in (True, False):
            got = leader_gradient(gp, gm, factors, use_dual_row=dual)
            want = dense_leader_gradient(gp, gm, factors, use_dual_row=dual)
            assert np.linalg.norm(got - want) <= 1e-8 * max(1.0, np.linalg.norm(want))


def test_leader_gradient_keeps_policy_term_when_model_grad_zero():
    factors = random_factors(30, seed=2)
    gp = np.array([0.4, -1.2, 0.0, 3.3])
    got = leader_gradient(gp, np.zeros(30), factors)
    assert np.allclose(got, gp, atol=1e-14)


def test_scalar_leader_gradient_hand_derivation():
    """One model parameter, one policy parameter, every term by hand."""
    ridge, u, v, w = 0.5, 2.0, 3.0, 4.0
    gp, gm = 1.0, 2.0
    factors = LowRankFactors(u=np.array([[u]]), v=np.array([[v]]),
                             x=empty_cols(1), y=empty_cols(1),
                             z=empty_cols(1), w=np.array([[w]]), ridge=ridge)
    a = ridge + u * v
    expected = gp - w * u * (gm / a)
    got = leader_gradient(np.array([gp]), np.array([gm]), factors)
    assert abs(got[0] - expected) <= 1e-10

    b, lam, slope = 0.5, 0.8, 0.3
    dual = LowRankFactors(u=np.array([[u]]), v=np.array([[v]]),
                          x=empty_cols(1), y=empty_cols(1), z=empty_cols(1),
                          w=np.array([[w]]), ridge=ridge, lam=lam,
                          dual_coupling=np.array([b]), dual_slope=slope)
    schur = slope - lam * b * b / a
    corrected = gm / a + lam * (b * gm / a) / schur * (b / a)
    expected_dual = gp - w * u * corrected
    got_dual = leader_gradient(np.array([gp]), np.array([gm]), dual)
    assert abs(got_dual[0] - expected_dual) <= 1e-10


# ---------------------------------------------------------------------------
# benchmarking helpers
# ---------------------------------------------------------------------------


def test_random_factors_deterministic():
    a = random_factors(15, seed=42)
    b = random_factors(15, seed=42)
    for name in ("u", "v", "x", "y", "z", "w", "dual_coupling"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.dual_slope == b.dual_slope
    c = random_factors(15, seed=43)
    assert not np.array_equal(a.u, c.u)


def test_benchmark_solve_reports_each_size():
    results = benchmark_solve([200, 400], repeats=2, seed=0)
    assert [size for size, _ in results] == [200, 400]
    assert all(t > 0.0 for _, t in results)


def test_affine_fit_r2_behaviour():
    sizes = np.array([1.0, 2.0, 3.0, 4.0])
    assert affine_fit_r2(sizes, 2.0 + 3.0 * sizes) == pytest.approx(1.0, abs=1e-12)
    assert affine_fit_r2(sizes, np.full(4, 5.0)) == 1.0
    wiggly = np.array([1.0, -1.0, 1.0, -1.0])
    assert affine_fit_r2(sizes, wiggly) < 0.5


def test_condition_limit_is_strict():
    assert COND_LIMIT == 1e12
    assert SCHUR_FLOOR == 1e-10
