import dataclasses

import numpy as np
import pytest

from ddminmax import sdp
from ddminmax.consistency import MultiplierMode, build_offline, push_online
from ddminmax.numerics import CostWeights, min_eigenvalue, weighted_norm_sq
from ddminmax.plant import ConfigError, ConstraintSet, collect_offline
from ddminmax.sdp import SolveStatus

from conftest import SUSPENSION_FEASIBLE_C


class TestAssembly:
    def test_suspension_counts(self, suspension, suspension_set):
        p = sdp.assemble_robust(suspension_set, suspension.x0, suspension.weights,
                                suspension.constraints, 5e5)
        assert p.num_vars == 1 + 10 + 4 + 200
        dec = next(c for c in p.constraints if c.name == "robust_decrease")
        assert dec.dim == 18 and dec.strict

    def test_scalar_counts(self, scalar, scalar_set):
        p = sdp.assemble_robust(scalar_set, scalar.x0, scalar.weights, scalar.constraints, 50.0)
        assert next(c for c in p.constraints if c.name == "robust_decrease").dim == 6
        assert p.var("tau").shape == (20,)

    def test_common_multiplier(self, suspension, suspension_set):
        cs = suspension_set.with_mode(MultiplierMode.COMMON_MULTIPLIER)
        p = sdp.assemble_robust(cs, suspension.x0, suspension.weights, suspension.constraints, 5e5)
        assert p.var("tau").shape == (1,)

    def test_c_below_weight(self, scalar, scalar_set):
        with pytest.raises(ConfigError):
            sdp.assemble_robust(scalar_set, scalar.x0, scalar.weights, scalar.constraints, 0.5)

    def test_singular_input_constraint(self, scalar, scalar_set):
        cons = ConstraintSet(np.zeros((1, 1)), scalar.constraints.S_x)
        with pytest.raises(ConfigError):
            sdp.assemble_robust(scalar_set, scalar.x0, scalar.weights, cons, 50.0)

    def test_affine_probe(self, scalar, scalar_set):
        s2 = push_online(push_online(scalar_set, [0.1], [0.2], [0.21]), [0.21], [0.0], [0.231])
        for build in (sdp.assemble_robust, sdp.assemble_adaptive):
            assert build(s2, scalar.x0, scalar.weights, scalar.constraints, 50.0).check_affine()

    def test_adaptive_without_online_matches_robust(self, scalar, scalar_set):
        a = sdp.assemble_robust(scalar_set, scalar.x0, scalar.weights, scalar.constraints, 50.0)
        b = sdp.assemble_adaptive(scalar_set, scalar.x0, scalar.weights, scalar.constraints, 50.0)
        assert [v.name for v in a.variables] == [v.name for v in b.variables]
        for ca, cb in zip(a.constraints, b.constraints):
            np.testing.assert_array_equal(ca.F0, cb.F0)
            np.testing.assert_array_equal(ca.Fs, cb.Fs)

    def test_adaptive_delta_length(self, scalar, scalar_set):
        s = scalar_set
        for k in range(3):
            s = push_online(s, [0.1 * k], [0.2], [0.11 * k + 0.1])
        p = sdp.assemble_adaptive(s, scalar.x0, scalar.weights, scalar.constraints, 50.0)
        assert p.var("delta").shape == (3,)

    def test_dump_lists_everything(self, scalar, scalar_set):
        text = sdp.assemble_robust(scalar_set, scalar.x0, scalar.weights,
                                   scalar.constraints, 50.0).dump()
        for word in ("minimize", "gamma", "robust_decrease", "state_bound", "tau >= 0"):
            assert word in text


class TestSolve:
    def test_scalar_optimal(self, scalar_solved):
        prob, sol = scalar_solved
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.gamma > 0 and min_eigenvalue(sol.H) > 0
        assert sol.max_violation <= 1e-8
        assert sdp.verify_solution(prob, sol).passed

    def test_far_state_infeasible(self, scalar, scalar_set):
        p = sdp.assemble_robust(scalar_set, [100.0], scalar.weights, scalar.constraints, 50.0)
        assert sdp.solve(p).status is SolveStatus.INFEASIBLE

    def test_suspension_default_c_infeasible(self, suspension, suspension_set):
        p = sdp.assemble_robust(suspension_set, suspension.x0, suspension.weights,
                                suspension.constraints, suspension.c)
        assert sdp.solve(p).status is SolveStatus.INFEASIBLE

    def test_suspension_feasible_c(self, suspension_solved):
        prob, sol = suspension_solved
        assert sol.status is SolveStatus.OPTIMAL
        assert sdp.verify_solution(prob, sol).passed

    def test_value_below_gamma(self, scalar, scalar_solved):
        cert = sdp.extract_certificate(scalar_solved[1])
        assert weighted_norm_sq(scalar.x0, cert.P) <= cert.gamma + 1e-6

    def test_adaptive_dominance(self, scalar, scalar_set):
        s = scalar_set
        x = np.array([-1.0])
        for u, w in [(1.0, 3e-5), (0.5, -8e-5)]:
            x1 = 1.1 * x + 0.5 * u + w
            s = push_online(s, x, [u], x1)
            x = x1
        rob = sdp.solve(sdp.assemble_robust(s, x, scalar.weights, scalar.constraints, 50.0))
        ada = sdp.solve(sdp.assemble_adaptive(s, x, scalar.weights, scalar.constraints, 50.0))
        assert ada.gamma <= rob.gamma * (1 + 1e-6)

    def test_malformed(self):
        with pytest.raises(sdp.InvalidProblem):
            sdp.solve("not a problem")

    def test_no_cvxopt_failure_leaks(self, scalar, scalar_set):
        # huge state and tiny noise stress the solver; any outcome must be a status
        p = sdp.assemble_robust(scalar_set, [1.999], scalar.weights, scalar.constraints, 1.0001)
        assert isinstance(sdp.solve(p).status, SolveStatus)


class TestVerify:
    def test_toy_problem_boundary(self):
        g = sdp.VariableBlock("gamma", sdp.VarKind.SCALAR, (), 0)
        con = sdp.LmiConstraint("lower", lambda v: np.array([[v["gamma"] - 1.0]]),
                                np.array([[-1.0]]), np.array([[[1.0]]]))
        prob = sdp.SdpProblem(np.array([1.0]), (g,), (con,), {})
        assert sdp.constraint_residuals(prob, {"gamma": 1.0})["lower"] == 0.0

    def test_perturbed_H_rejected(self, scalar_solved):
        prob, sol = scalar_solved
        bad = dataclasses.replace(sol, H=sol.H - 2e-8 * np.eye(1) - 1e-6)
        rep = sdp.verify_solution(prob, bad)
        assert not rep.passed
        assert min(rep.residuals["initial_state"], rep.residuals["robust_decrease"]) < -rep.tol

    def test_scalar_residuals(self, scalar_solved):
        rep = sdp.verify_solution(*scalar_solved)
        assert all(v >= -rep.tol for v in rep.residuals.values())


class TestCertificate:
    def test_identity(self):
        sol = sdp.SdpSolution(1.0, np.eye(2), np.zeros((1, 2)), np.zeros(1), None,
                              SolveStatus.OPTIMAL, 0.0)
        c = sdp.extract_certificate(sol)
        np.testing.assert_array_equal(c.F, np.zeros((1, 2)))
        np.testing.assert_array_equal(c.P, np.eye(2))

    def test_diagonal(self):
        sol = sdp.SdpSolution(4.0, 2 * np.eye(2), np.array([[1.0, 0.0]]), np.zeros(1), None,
                              SolveStatus.OPTIMAL, 0.0)
        c = sdp.extract_certificate(sol)
        np.testing.assert_allclose(c.F, [[0.5, 0.0]])
        np.testing.assert_allclose(c.P, 2 * np.eye(2))

    def test_not_optimal(self):
        sol = sdp.SdpSolution(float("nan"), None, None, None, None, SolveStatus.INFEASIBLE, np.inf)
        with pytest.raises(sdp.NoSolution):
            sdp.extract_certificate(sol)

    def test_relation_to_solution(self, suspension_solved):
        sol = suspension_solved[1]
        c = sdp.extract_certificate(sol)
        np.testing.assert_allclose(c.F @ sol.H, sol.L, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(c.P @ sol.H, sol.gamma * np.eye(4), rtol=1e-9, atol=1e-9)

    def test_sandwich(self, suspension, suspension_solved):
        c = sdp.extract_certificate(suspension_solved[1])
        assert min_eigenvalue(c.P - suspension.weights.Q) >= -1e-8
        assert min_eigenvalue(SUSPENSION_FEASIBLE_C * np.eye(4) - c.P) >= -1e-8
