"""Acceptance gate: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
Lines are also collected into the pytest terminal summary.
"""

import dataclasses
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, SUSPENSION_FEASIBLE_C
from ddminmax import sdp
from ddminmax.analysis import (audit_run, certificate_checks, closed_loop_metrics, lqr_oracle,
                               noise_sweep, verify_cost_bound, verify_sprocedure_constraints)
from ddminmax.cli import main as cli_main
from ddminmax.consistency import build_offline, is_member, push_online, sample_members
from ddminmax.controller import (InitialInfeasible, MpcConfig, Scheme, SolverFailed,
                                 run_closed_loop)
from ddminmax.plant import (ConstraintSet, DataRecord, NoiseDistribution, NoiseSampler,
                            collect_offline)

# every OPTIMAL solve and run log, re-checked by the last criterion
SOLVES = []
LOGS = []


def report(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def solve_robust(sc, cset, x, c, constraints=None):
    prob = sdp.assemble_robust(cset, x, sc.weights, constraints or sc.constraints, c)
    sol = sdp.solve(prob)
    if sol.status is sdp.SolveStatus.OPTIMAL:
        SOLVES.append((prob, sol))
    return prob, sol


def cfg(sc, c):
    return MpcConfig(c, sc.weights, sc.constraints, sc.plant.G)


@pytest.fixture(scope="module")
def certs(scalar, suspension, scalar_set, suspension_set):
    out = {}
    for name, sc, cs, c in (("scalar", scalar, scalar_set, scalar.c),
                            ("suspension", suspension, suspension_set, SUSPENSION_FEASIBLE_C)):
        _, sol = solve_robust(sc, cs, sc.x0, c)
        out[name] = (sc, cs, c, sdp.extract_certificate(sol))
    return out


@pytest.fixture(scope="module")
def models(certs):
    return {name: sample_members(cs, (sc.plant.A_s, sc.plant.B_s), 100, seed=0)
            for name, (sc, cs, _, _) in certs.items()}


def test_criterion_1_certificate_soundness(certs, models):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, (sc, _, c, cert) in certs.items():
        rep = certificate_checks(cert, models[name], sc.weights, sc.x0, c)
        ok &= rep.passed
        worst = rep.checks[0].detail
        parts.append(f"{name}(c={c:g}): {'ok' if rep.passed else 'FAIL'} [{worst}]")
    dt = time.perf_counter() - t0
    ok &= dt <= 60
    report(1, ok, "; ".join(parts) + f"; {dt:.1f}s")
    assert ok


def test_criterion_2_cost_bound(certs, models):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, (sc, cs, _, cert) in certs.items():
        rep = verify_cost_bound(cert, cs, sc.x0, 100, 200, 0, sc.weights, models=models[name])
        ok &= rep.passed
        parts.append(f"{name}: gap {rep.info['sampled_gap']:.4g} "
                     f"{'ok' if rep.passed else 'FAIL'}")
    dt = time.perf_counter() - t0
    ok &= dt <= 60
    report(2, ok, "; ".join(parts) + f"; {dt:.1f}s")
    assert ok


def test_criterion_3_lqr_reduction(scalar):
    t0 = time.perf_counter()
    data = collect_offline(scalar, 0, distribution=NoiseDistribution.ZERO)
    assert np.linalg.matrix_rank(np.vstack([data.X[:, :-1], data.U])) == 2
    wide = ConstraintSet(1e-8 * np.eye(1), 1e-8 * np.eye(1))
    _, sol = solve_robust(scalar, build_offline(data), np.array([0.1]), scalar.c, wide)
    F = sdp.extract_certificate(sol).F
    _, F_lqr = lqr_oracle(scalar.plant.A_s, scalar.plant.B_s, scalar.weights)
    rel = float(np.abs(F - F_lqr).max() / np.abs(F_lqr).max())
    dt = time.perf_counter() - t0
    ok = rel <= 1e-2 and dt <= 5
    report(3, ok, f"F={F[0, 0]:.6f} lqr={F_lqr[0, 0]:.6f} rel={rel:.2e}; {dt:.2f}s")
    assert ok


def _suspension_run(sc, cset, c, seed=0, scheme=Scheme.ROBUST, steps=150):
    log = run_closed_loop(sc.plant, cfg(sc, c), scheme, sc.x0, steps,
                          NoiseSampler(sc.plant.G, seed + 17), cset)
    LOGS.append(log)
    return log


def test_criterion_4_closed_loop_guarantees(suspension, suspension_set):
    t0 = time.perf_counter()
    try:
        log = _suspension_run(suspension, suspension_set, 5e5)
    except (InitialInfeasible, SolverFailed) as exc:
        report(4, False, f"c=5e5: {type(exc).__name__}: {exc}")
        pytest.fail(str(exc))
    rep = audit_run(log)
    dt = time.perf_counter() - t0
    ok = rep.passed and dt <= 15 * 60
    report(4, ok, f"c=5e5: {len(rep.failed)} failed audits; {dt:.1f}s")
    assert ok


def test_criterion_5_c_boundary(suspension, suspension_set, tmp_path):
    code = cli_main(["run", "--out", str(tmp_path), "--c", "100", "--no-plots"])
    parts, ok = [f"c=100 exit {code}"], code == 3
    for c in (5e4, 5e5, 1e7):
        try:
            log = _suspension_run(suspension, suspension_set, c)
            m = closed_loop_metrics(log)
            good = len(log) == 150 and m.worst_margin >= -1e-6
            parts.append(f"c={c:g} {'completed' if good else 'violations'}")
        except (InitialInfeasible, SolverFailed) as exc:
            good = False
            parts.append(f"c={c:g} {type(exc).__name__}")
        ok &= good
    report(5, ok, "; ".join(parts))
    assert ok


def test_criterion_6_adaptive_dominance(suspension):
    parts, ok = [], True
    for seed in range(5):
        cset = build_offline(collect_offline(suspension, seed, T_f=150))
        try:
            costs = {s: closed_loop_metrics(_suspension_run(suspension, cset, 5e5, seed, s))
                     .total_cost for s in Scheme}
        except (InitialInfeasible, SolverFailed) as exc:
            ok = False
            parts.append(f"seed {seed}: {type(exc).__name__}")
            continue
        r, a, s = costs[Scheme.ROBUST], costs[Scheme.ADAPTIVE], costs[Scheme.STATIC_FROM_T0]
        good = a <= r * 1.01 and r <= s * 1.01
        ok &= good
        parts.append(f"seed {seed}: {a:.4g}/{r:.4g}/{s:.4g}")

    # per-state dominance with identical data prefix, at a feasible c
    cset = build_offline(collect_offline(suspension, 0, T_f=150))
    x = suspension.x0
    cset_on = push_online(cset, x, np.array([0.1]),
                          suspension.plant.step(x, np.array([0.1])))
    w = suspension.weights
    pr = sdp.assemble_robust(cset, x, w, suspension.constraints, SUSPENSION_FEASIBLE_C)
    pa = sdp.assemble_adaptive(cset_on, x, w, suspension.constraints, SUSPENSION_FEASIBLE_C)
    sr, sa = sdp.solve(pr), sdp.solve(pa)
    for p, s in ((pr, sr), (pa, sa)):
        if s.status is sdp.SolveStatus.OPTIMAL:
            SOLVES.append((p, s))
    dom = sa.gamma <= sr.gamma * (1 + 1e-6)
    ok &= dom
    parts.append(f"gamma adaptive {sa.gamma:.6g} <= robust {sr.gamma:.6g}: {dom}")
    report(6, ok, "c=5e5; " + "; ".join(parts))
    assert ok


def test_criterion_7_noise_margin(scalar):
    t0 = time.perf_counter()
    parts, ok = [], True
    for seed in range(3):
        res = noise_sweep(scalar, scalar.c, seed)
        floor_ok = res.grid[0].stable
        window = 0.0342 <= res.feasibility_margin <= 0.1368
        ok &= floor_ok and window
        parts.append(f"seed {seed}: margin {res.feasibility_margin:.3g} "
                     f"(certified {res.certified_margin:.3g}), 1e-4 feasible {floor_ok}")
    dt = time.perf_counter() - t0
    ok &= dt <= 600
    report(7, ok, "target [0.0342, 0.1368]; " + "; ".join(parts) + f"; {dt:.0f}s")
    assert ok


def test_criterion_8_consistency_set():
    x0, u0, x1, G = 1.0, 0.5, 1.2, 100.0
    cs = build_offline(DataRecord([[u0]], [[x0, x1]], [[G]]))
    grid_a = np.linspace(0.0, 2.0, 100)
    grid_b = np.linspace(-1.0, 3.0, 100)
    bad = 0
    for a in grid_a:
        for b in grid_b:
            analytic = abs(x1 - a * x0 - b * u0) <= G ** -0.5
            bad += analytic != is_member(cs, [[a]], [[b]])

    rng = np.random.default_rng(0)
    viol = 0
    cur = cs
    for _ in range(1000):
        x, u = rng.uniform(-1, 1, 2)
        nxt = 1.1 * x + 0.5 * u + rng.uniform(-0.1, 0.1)
        new = push_online(cur, [x], [u], [nxt])
        A, B = rng.uniform(0.5, 1.5), rng.uniform(0.0, 1.0)
        viol += is_member(new, [[A]], [[B]]) and not is_member(cur, [[A]], [[B]])
        cur = new if len(cur.online) < 50 else cs
    ok = bad == 0 and viol == 0
    report(8, ok, f"{bad} grid disagreements of 10000; {viol} monotonicity violations of 1000")
    assert ok


def test_criterion_9_verification(certs, scalar, scalar_set, suspension, suspension_set):
    _suspension_run(suspension, suspension_set, SUSPENSION_FEASIBLE_C)
    # a scalar closed loop so that receding solves are covered as well
    c = cfg(scalar, scalar.c)
    log = run_closed_loop(scalar.plant, c, Scheme.ROBUST, scalar.x0, scalar.steps,
                          NoiseSampler(scalar.plant.G, 17), scalar_set)
    LOGS.append(log)
    for r in log.rows:
        if r.solve_ms > 0:
            solve_robust(scalar, scalar_set, r.x, scalar.c)

    verify_fail = sum(not sdp.verify_solution(p, s).passed for p, s in SOLVES)
    audit_fail = sum(not audit_run(lg).passed for lg in LOGS)
    for name, (sc, cs, cc, cert) in certs.items():
        audit_fail += not verify_sprocedure_constraints(cert, sc.constraints, 200, 0).passed

    sc, cs, cc, cert = certs["suspension"]
    members = sample_members(cs, (sc.plant.A_s, sc.plant.B_s), 30, seed=1)
    half_P = dataclasses.replace(cert, P=0.5 * cert.P)
    caught_P = not (certificate_checks(half_P, members, sc.weights, sc.x0, cc).passed
                    and verify_cost_bound(half_P, cs, sc.x0, 0, 200, 0, sc.weights,
                                          models=members).passed)
    big_F = dataclasses.replace(cert, F=10 * cert.F)
    caught_F = not (certificate_checks(big_F, members, sc.weights, sc.x0, cc).passed
                    and verify_sprocedure_constraints(big_F, sc.constraints, 200, 0).passed)
    ok = verify_fail == 0 and audit_fail == 0 and caught_P and caught_F
    report(9, ok, f"{len(SOLVES)} solutions re-verified, {verify_fail} failed; "
                  f"{len(LOGS)} runs audited, {audit_fail} failed; "
                  f"P*0.5 rejected {caught_P}; F*10 rejected {caught_F}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
