"""Modeling layer and continuous solver tests.

Closed-form optima used here:

* min x  s.t.  x >= ||(1, 1)||            -> x* = sqrt(2)
* min x^2  s.t.  x >= 3                   -> objective 9 at x = 3
* min cx over an empty feasible set       -> infeasible certificate
* min -x over x >= 0 unconstrained above  -> unbounded certificate
"""

import numpy as np
import pytest

from hubsched.conic import (INF, ConicProblem, Lin, ProblemBuilder, Solution,
                            kkt_residuals, project_box, project_rsoc,
                            project_soc, rsoc_violation, soc_violation,
                            solve_continuous)

TOL = 1e-6


def _soc_toy():
    b = ProblemBuilder()
    t = b.add_var("t", obj=1.0)
    b.add_soc([Lin.term(t), Lin(const=1.0), Lin(const=1.0)])
    return b.build()


# ---------------------------------------------------------------------------
# expressions and builder


def test_lin_arithmetic():
    e = 2.0 * Lin.term(0) - Lin.term(1, 3.0) + 5.0
    x = np.array([1.0, 2.0])
    assert e.value(x) == pytest.approx(2.0 - 6.0 + 5.0)
    e2 = 1.0 - e
    assert e2.value(x) == pytest.approx(1.0 - e.value(x))


def test_builder_range_and_ge():
    b = ProblemBuilder()
    x = b.add_var("x", obj=1.0)
    b.add_range(Lin.term(x), 2.0, 5.0)
    prob = b.build()
    sol = solve_continuous(prob)
    assert sol.ok
    assert sol.x[x] == pytest.approx(2.0, abs=1e-6)


def test_validate_rejects_overlapping_cones():
    prob = _soc_toy()
    prob.socs.append(prob.socs[0])
    with pytest.raises(ValueError):
        prob.validate()


def test_validate_rejects_bounded_cone_member():
    prob = _soc_toy()
    prob.lb[prob.socs[0][0]] = 0.0
    with pytest.raises(ValueError):
        prob.validate()


def test_validate_rejects_negative_quad():
    b = ProblemBuilder()
    b.add_var("x", quad=1.0)
    prob = b.build()
    prob.q[0] = -1.0
    with pytest.raises(ValueError):
        prob.validate()


def test_dump_load_round_trip():
    b = ProblemBuilder()
    x = b.add_var("x", lb=0.0, ub=7.5, obj=1.25, quad=0.5)
    z = b.add_var("z", binary=True, obj=-2.0)
    b.add_le(Lin.term(x) + 3.0 * Lin.term(z), 4.0)
    b.add_eq(Lin.term(x) - Lin.term(z), 0.25)
    b.add_soc([Lin.term(x) + 1.0, Lin.term(z) - 0.5])
    b.add_rsoc(Lin.term(x), Lin(const=2.0), [Lin.term(z)])
    prob = b.build()
    back = ConicProblem.loads(prob.dumps())
    assert back.names == prob.names
    assert np.array_equal(back.lb, prob.lb)
    assert np.array_equal(back.ub, prob.ub)
    assert np.array_equal(back.binary, prob.binary)
    assert np.array_equal(back.c, prob.c)
    assert np.array_equal(back.q, prob.q)
    assert (back.A_eq != prob.A_eq).nnz == 0
    assert (back.A_ub != prob.A_ub).nnz == 0
    assert np.array_equal(back.b_eq, prob.b_eq)
    assert np.array_equal(back.b_ub, prob.b_ub)
    assert [s.tolist() for s in back.socs] == [s.tolist() for s in prob.socs]
    assert [s.tolist() for s in back.rsocs] == [s.tolist() for s in prob.rsocs]
    assert back.dumps() == prob.dumps()


# ---------------------------------------------------------------------------
# projections


def test_projection_known_values():
    # interior point is untouched
    p = np.array([2.0, 1.0, 0.5])
    assert np.allclose(project_soc(p), p)
    # polar point maps to the origin
    assert np.allclose(project_soc(np.array([-2.0, 1.0, 0.0])), 0.0)
    # boundary formula: average of t and ||x||
    p = project_soc(np.array([0.0, 3.0, 4.0]))
    assert p[0] == pytest.approx(2.5)
    assert np.linalg.norm(p[1:]) == pytest.approx(p[0])


def test_projection_properties_seeded():
    rng = np.random.default_rng(7)
    for _ in range(200):
        d = int(rng.integers(2, 8))
        w = rng.normal(scale=5.0, size=d)
        p = project_soc(w)
        assert soc_violation(p) <= 1e-9 * (1 + np.linalg.norm(p))
        # idempotent
        assert np.allclose(project_soc(p), p, atol=1e-12)
        # nonexpansive vs a random feasible point
        f = rng.normal(size=d)
        f[0] = np.linalg.norm(f[1:]) + abs(f[0])
        assert np.linalg.norm(p - f) <= np.linalg.norm(w - f) + 1e-9
        # Moreau: w - p lies in the polar cone, orthogonal to p
        r = w - p
        assert soc_violation(-r) <= 1e-9 * (1 + np.linalg.norm(r))
        assert abs(r @ p) <= 1e-9 * (1 + np.linalg.norm(w) ** 2)


def test_rsoc_projection_properties_seeded():
    rng = np.random.default_rng(11)
    for _ in range(200):
        d = int(rng.integers(3, 8))
        w = rng.normal(scale=5.0, size=d)
        p = project_rsoc(w)
        assert rsoc_violation(p) <= 1e-8 * (1 + np.linalg.norm(p))
        assert np.allclose(project_rsoc(p), p, atol=1e-9)
        u, v = rng.uniform(0.1, 3.0, size=2)
        x = rng.normal(size=d - 2)
        x *= np.sqrt(2 * u * v) / max(np.linalg.norm(x), 1e-9) * rng.uniform(0, 1)
        f = np.concatenate([[u, v], x])
        assert np.linalg.norm(p - f) <= np.linalg.norm(w - f) + 1e-9


def test_box_projection():
    lb = np.array([0.0, -INF, 1.0])
    ub = np.array([1.0, 2.0, INF])
    w = np.array([5.0, -4.0, -3.0])
    assert np.allclose(project_box(w, lb, ub), [1.0, -4.0, 1.0])


# ---------------------------------------------------------------------------
# continuous solves with closed-form answers


def test_soc_toy_sqrt2():
    sol = solve_continuous(_soc_toy())
    assert sol.ok
    assert sol.objective == pytest.approx(np.sqrt(2.0), abs=1e-6)


def test_quadratic_toy():
    b = ProblemBuilder()
    x = b.add_var("x", lb=3.0, quad=1.0)
    sol = solve_continuous(b.build())
    assert sol.ok
    assert sol.objective == pytest.approx(9.0, abs=1e-5)
    assert sol.x[x] == pytest.approx(3.0, abs=1e-6)


def test_equality_lp():
    # min x + y  s.t.  x + 2y = 4, x, y >= 0  -> (0, 2)
    b = ProblemBuilder()
    x = b.add_var("x", lb=0.0, obj=1.0)
    y = b.add_var("y", lb=0.0, obj=1.0)
    b.add_eq(Lin.term(x) + 2.0 * Lin.term(y), 4.0)
    sol = solve_continuous(b.build())
    assert sol.ok
    assert sol.objective == pytest.approx(2.0, abs=1e-6)
    assert sol.x[y] == pytest.approx(2.0, abs=1e-6)


def test_rotated_cone_toy():
    # min u + v  s.t.  2uv >= 9  -> u = v = 3/sqrt(2), objective 3*sqrt(2)
    b = ProblemBuilder()
    u = b.add_var("u", obj=1.0)
    v = b.add_var("v", obj=1.0)
    b.add_rsoc(Lin.term(u), Lin.term(v), [Lin(const=3.0)])
    sol = solve_continuous(b.build())
    assert sol.ok
    assert sol.objective == pytest.approx(3.0 * np.sqrt(2.0), abs=1e-5)


def test_infeasible_toy():
    b = ProblemBuilder()
    x = b.add_var("x", lb=0.0, ub=1.0, obj=1.0)
    b.add_eq(Lin.term(x), 5.0)
    sol = solve_continuous(b.build())
    assert sol.status == "infeasible"


def test_unbounded_toy():
    b = ProblemBuilder()
    b.add_var("x", lb=0.0, obj=-1.0)
    sol = solve_continuous(b.build())
    assert sol.status == "unbounded"


def test_status_never_lies_about_residuals():
    prob = _soc_toy()
    sol = solve_continuous(prob)
    if sol.ok:
        assert sol.residuals["primal"] <= 1e-5
        assert sol.residuals["dual"] <= 1e-5


# ---------------------------------------------------------------------------
# randomized feasible problems checked through KKT residuals


def _random_socp(rng):
    n = int(rng.integers(4, 20))
    m = int(rng.integers(1, max(2, n // 2)))
    b = ProblemBuilder()
    xs = [b.add_var(f"x{i}", obj=float(rng.normal())) for i in range(n)]
    x0 = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    for r in range(m):
        expr = Lin()
        for j in range(n):
            expr = expr + float(A[r, j]) * Lin.term(xs[j])
        b.add_eq(expr, float(A[r] @ x0))
    # a few bounds kept slack at x0 so the problem stays feasible
    for j in range(0, n, 3):
        b.add_le(Lin.term(xs[j]), float(x0[j] + rng.uniform(0.5, 2.0)))
    # one or two cones containing x0 strictly
    for k in range(int(rng.integers(1, 3))):
        picks = rng.choice(n, size=min(3, n), replace=False)
        expr = [Lin(const=float(np.linalg.norm(x0[picks]) + rng.uniform(1, 3)))]
        expr += [Lin.term(xs[int(j)]) for j in picks]
        b.add_soc(expr)
    # trust region keeps it bounded
    b.add_soc([Lin(const=float(np.linalg.norm(x0) + 10.0))]
              + [Lin.term(x) for x in xs])
    return b.build()


def test_random_socp_kkt_residuals():
    rng = np.random.default_rng(2024)
    solved = 0
    for _ in range(100):
        prob = _random_socp(rng)
        sol = solve_continuous(prob)
        assert sol.status == "optimal", sol.residuals
        res = kkt_residuals(prob, sol.x, sol.duals)
        scale = 1.0 + abs(sol.objective)
        assert res["max"] <= 1e-6 * scale * 10.0, res
        solved += 1
    assert solved == 100


def test_kkt_residuals_flag_perturbed_points():
    rng = np.random.default_rng(5)
    prob = _random_socp(rng)
    sol = solve_continuous(prob)
    assert sol.ok
    res0 = kkt_residuals(prob, sol.x, sol.duals)
    bumped = sol.x.copy()
    bumped[0] += 0.1
    res1 = kkt_residuals(prob, bumped, sol.duals)
    assert res1["max"] > max(10 * res0["max"], 1e-4)


def test_solver_deterministic():
    prob = _random_socp(np.random.default_rng(33))
    a = solve_continuous(prob)
    bsol = solve_continuous(prob)
    assert a.status == bsol.status
    assert np.array_equal(a.x, bsol.x)
