"""Command-line driver: simulate scenarios, certify the math, time the QP.

Subcommands:
  run     simulate a scenario file (bundled name or path) and write
          trajectory.csv, pairs.csv, summary.json, and quick-look figures
  verify  randomized certification campaigns (duality, gradients, QP)
          against independent oracles; writes verify_report.json
  bench   assemble+solve timing per body for growing swarm sizes

Exit codes: 0 success, 1 runtime or tolerance failure, 2 usage/parse error.
ELLIPSOID_SHIELD_THREADS caps verify parallelism (0 or unset = auto).
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .geometry import EllipsoidShape, Pose, ShapedBody, rotation_exp
from .oracle import min_distance
from .qp import QpProblem, kkt_check, solve
from .scenarios import ScenarioFormatError, build_scenario, load_scenario
from .separation import PairGeometry, maximize_h
from .simulator import (ScenarioError, SimulationError, run, step,
                        warm_start, _initial_state)
from . import report

_J2 = np.array([[0.0, -1.0], [1.0, 0.0]])


def _thread_count() -> int | None:
    raw = os.environ.get("ELLIPSOID_SHIELD_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else None


# --- random problem generators (seeded per chunk, order-independent) -------


def _random_disjoint_pair(rng, d):
    """Two well-separated random ellipsoids with axis ratios up to 5."""
    while True:
        axes_i = rng.uniform(0.5, 2.5, size=d)
        axes_j = rng.uniform(0.5, 2.5, size=d)
        R_i = _random_rotation(rng, d)
        R_j = _random_rotation(rng, d)
        p_i = rng.uniform(-2.0, 2.0, size=d)
        offset = rng.uniform(4.0, 12.0) * _unit(rng.standard_normal(d))
        p_j = p_i + offset
        bi = ShapedBody(1, Pose(R_i, p_i), EllipsoidShape(axes_i))
        bj = ShapedBody(2, Pose(R_j, p_j), EllipsoidShape(axes_j))
        res = min_distance(bi, bj)
        if not res.overlap and res.distance > 1e-3:
            return bi, bj, float(res.distance)


def _unit(v):
    return v / np.linalg.norm(v)


def _random_rotation(rng, d):
    if d == 2:
        a = rng.uniform(-np.pi, np.pi)
        return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    w = rng.uniform(-np.pi, np.pi) * _unit(rng.standard_normal(3))
    return rotation_exp(w)


def _strong_duality_chunk(seed, chunk, count, d):
    rng = np.random.default_rng([seed, 101, d, chunk])
    worst = 0.0
    for _ in range(count):
        bi, bj, w_star = _random_disjoint_pair(rng, d)
        res = maximize_h(bi, bj)
        err = abs(res.h - w_star) / max(1.0, w_star)
        worst = max(worst, err)
    return worst


def _weak_duality_chunk(seed, chunk, count, d):
    rng = np.random.default_rng([seed, 102, d, chunk])
    worst = -np.inf
    for _ in range(count):
        bi, bj, w_star = _random_disjoint_pair(rng, d)
        z = _unit(rng.standard_normal(d))
        h = float(PairGeometry.of(bi, bj, z).h)
        worst = max(worst, h - w_star)
    return worst


def _gradient_fd_chunk(seed, chunk, count, d, eps=1e-6):
    """Worst relative error of the analytic dh/dt coefficient rows against
    central differences of h along each input channel."""
    rng = np.random.default_rng([seed, 103, d, chunk])
    worst = 0.0

    def h_of(bi, bj, z):
        return float(PairGeometry.of(bi, bj, z).h)

    for _ in range(count):
        bi, bj, _ = _random_disjoint_pair(rng, d)
        z = maximize_h(bi, bj).z
        z = _unit(z + 0.3 * rng.standard_normal(d))  # generic, off-max
        g = PairGeometry.of(bi, bj, z)
        zeta, eta, mu, nu, xi = g.input_rows()
        rows = []
        for k in range(d):  # eta / xi: world translations of each body
            dp = np.zeros(d)
            dp[k] = eps

            def shift(b, dv):
                return ShapedBody(b.id, Pose(b.pose.R, b.pose.p + dv),
                                  b.shape)

            fd_i = (h_of(shift(bi, dp), bj, z)
                    - h_of(shift(bi, -dp), bj, z)) / (2 * eps)
            fd_j = (h_of(bi, shift(bj, dp), z)
                    - h_of(bi, shift(bj, -dp), z)) / (2 * eps)
            rows.append((eta[k], fd_i))
            rows.append((xi[k], fd_j))
        spin_axes = [None] if d == 2 else [np.eye(3)[k] for k in range(3)]
        for k, axis in enumerate(spin_axes):  # zeta / nu: world rotations
            if d == 2:
                Rp, Rm = rotation_exp(eps), rotation_exp(-eps)
                coeff_i, coeff_j = float(zeta), float(nu)
            else:
                Rp, Rm = rotation_exp(eps * axis), rotation_exp(-eps * axis)
                coeff_i, coeff_j = float(zeta[k]), float(nu[k])

            def spin(b, Rd):
                return ShapedBody(b.id, Pose(Rd @ b.pose.R, b.pose.p),
                                  b.shape)

            fd_i = (h_of(spin(bi, Rp), bj, z)
                    - h_of(spin(bi, Rm), bj, z)) / (2 * eps)
            fd_j = (h_of(bi, spin(bj, Rp), z)
                    - h_of(bi, spin(bj, Rm), z)) / (2 * eps)
            rows.append((coeff_i, fd_i))
            rows.append((coeff_j, fd_j))
        axis = np.eye(d)[int(np.argmin(np.abs(z)))]
        tang = _unit(axis - (axis @ z) * z)
        for tau in ([_J2 @ z] if d == 2
                    else [tang, _unit(np.cross(z, tang))]):
            fd = (h_of(bi, bj, _unit(z + eps * tau))
                  - h_of(bi, bj, _unit(z - eps * tau))) / (2 * eps)
            rows.append((float(mu @ tau), fd))
        for coeff, fd in rows:
            worst = max(worst, abs(coeff - fd) / max(1.0, abs(fd)))
    return worst


def _qp_oracle(problem):
    """Exhaustive active-set enumeration for small dense QPs."""
    W, u_nom = problem.W, problem.u_nom
    A = np.array([a for a, _ in problem.constraints])
    b = np.array([rhs for _, rhs in problem.constraints])
    m = len(b)
    best, best_cost = None, np.inf
    for size in range(0, min(m, problem.n) + 1):
        for subset in itertools.combinations(range(m), size):
            idx = list(subset)
            try:
                if idx:
                    K = np.zeros((problem.n + size, problem.n + size))
                    K[:problem.n, :problem.n] = np.diag(2 * W)
                    K[:problem.n, problem.n:] = -A[idx].T
                    K[problem.n:, :problem.n] = A[idx]
                    rhs = np.concatenate([2 * W * u_nom, b[idx]])
                    sol = np.linalg.solve(K, rhs)
                    u, lam = sol[:problem.n], sol[problem.n:]
                else:
                    u, lam = u_nom.copy(), np.zeros(0)
            except np.linalg.LinAlgError:
                continue
            if idx and np.any(lam < -1e-9):
                continue
            if np.any(A @ u - b < -1e-9):
                continue
            cost = float(np.sum(W * (u - u_nom) ** 2))
            if cost < best_cost - 1e-12:
                best, best_cost = u, cost
    return best


def _qp_chunk(seed, chunk, count):
    rng = np.random.default_rng([seed, 104, chunk])
    worst_gap, worst_kkt = 0.0, 0.0
    for _ in range(count):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 7))
        W = rng.uniform(0.2, 3.0, size=n)
        u_nom = rng.normal(0.0, 2.0, size=n)
        A = rng.normal(0.0, 1.0, size=(m, n))
        u_feas = rng.normal(0.0, 1.0, size=n)
        b = A @ u_feas - rng.uniform(0.0, 2.0, size=m)
        problem = QpProblem(W=W, u_nom=u_nom,
                            constraints=[(A[i], float(b[i]))
                                         for i in range(m)])
        sol = solve(problem)
        ref = _qp_oracle(problem)
        worst_gap = max(worst_gap, float(np.linalg.norm(sol.u_star - ref)))
        worst_kkt = max(worst_kkt, kkt_check(problem, sol).max_residual)
    return worst_gap, worst_kkt


def _run_chunks(fn, jobs, threads):
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda args: fn(*args), jobs))


def cmd_verify(args) -> int:
    pairs = args.pairs
    seed = args.seed if args.seed is not None else 0
    threads = _thread_count()
    chunk = 25
    suites = {}
    t0 = time.perf_counter()

    jobs = [(seed, c, min(chunk, pairs - c * chunk), d)
            for d in (2, 3)
            for c in range((pairs + chunk - 1) // chunk)]
    worst = max(_run_chunks(_strong_duality_chunk, jobs, threads))
    suites["strong_duality"] = {
        "samples": 2 * pairs, "max_scaled_error": worst,
        "tolerance": 1e-6, "pass": bool(worst <= 1e-6)}

    weak_n = 20 * pairs
    wchunk = 250
    jobs = [(seed, c, min(wchunk, weak_n - c * wchunk), d)
            for d in (2, 3)
            for c in range((weak_n + wchunk - 1) // wchunk)]
    worst = max(_run_chunks(_weak_duality_chunk, jobs, threads))
    suites["weak_duality"] = {
        "samples": 2 * weak_n, "max_h_minus_wstar": worst,
        "tolerance": 1e-8, "pass": bool(worst <= 1e-8)}

    grad_n = max(4, pairs // 5)
    gchunk = 10
    jobs = [(seed, c, min(gchunk, grad_n - c * gchunk), d)
            for d in (2, 3)
            for c in range((grad_n + gchunk - 1) // gchunk)]
    worst = max(_run_chunks(_gradient_fd_chunk, jobs, threads))
    suites["gradient_fd"] = {
        "samples": 2 * grad_n, "max_relative_error": worst,
        "tolerance": 1e-5, "pass": bool(worst <= 1e-5)}

    qp_n = 2 * pairs
    qchunk = 50
    jobs = [(seed, c, min(qchunk, qp_n - c * qchunk))
            for c in range((qp_n + qchunk - 1) // qchunk)]
    results = _run_chunks(_qp_chunk, jobs, threads)
    worst_gap = max(r[0] for r in results)
    worst_kkt = max(r[1] for r in results)
    suites["qp_oracle"] = {
        "samples": qp_n, "max_solution_gap": worst_gap,
        "max_kkt_residual": worst_kkt,
        "tolerance_gap": 1e-7, "tolerance_kkt": 1e-8,
        "pass": bool(worst_gap <= 1e-7 and worst_kkt <= 1e-8)}

    ok = all(s["pass"] for s in suites.values())
    payload = {"pass": ok, "seed": seed, "pairs": pairs,
               "elapsed_s": time.perf_counter() - t0, "suites": suites}
    os.makedirs(args.out, exist_ok=True)
    path = report.write_json(payload, os.path.join(args.out,
                                                   "verify_report.json"))
    for name, s in suites.items():
        print(f"{'PASS' if s['pass'] else 'FAIL'}  {name}: "
              + ", ".join(f"{k}={v:.3e}" for k, v in s.items()
                          if isinstance(v, float)))
    print(f"report: {path}")
    if not ok:
        worst_suite = [n for n, s in suites.items() if not s["pass"]]
        print(f"error: tolerance breach in {', '.join(worst_suite)} "
              f"(seed {seed} reproduces it)", file=sys.stderr)
    return 0 if ok else 1


# --- bench ------------------------------------------------------------------


def _bench_scenario(n, seed):
    rng = np.random.default_rng([seed, 77, n])
    doc = {"mode": "rbm3d", "dt": 0.01, "t_end": 1.0, "seed": seed,
           "bodies": []}
    side = int(np.ceil(n ** (1.0 / 3.0)))
    spots = [(i, j, k) for i in range(side) for j in range(side)
             for k in range(side)][:n]
    for idx, spot in enumerate(spots):
        p = 4.0 * np.array(spot, dtype=float)
        goal = p + rng.uniform(-1.0, 1.0, size=3)
        doc["bodies"].append({
            "id": idx + 1,
            "p": list(p),
            "axes": list(rng.uniform(0.4, 1.2, size=3)),
            "goal": {"p": list(goal)},
        })
    return build_scenario(doc)


def cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rounds = 30
    rows = []
    for n in (2, 8, 16):
        scenario = _bench_scenario(n, seed)
        channels = warm_start(scenario)
        state = _initial_state(scenario)
        times_ms = []
        for _ in range(rounds):
            state, channels, record = step(scenario, state, channels)
            times_ms.extend(stat.solve_ms for stat in record.qp.values())
        med = float(np.median(times_ms))
        p95 = float(np.percentile(times_ms, 95))
        rows.append((n, med, p95))
        print(f"n={n:3d}  median {med:8.3f} ms   p95 {p95:8.3f} ms   "
              f"({len(times_ms)} solves)")
    os.makedirs(args.out, exist_ok=True)
    path = report.write_bench_csv(rows, os.path.join(args.out, "bench.csv"))
    print(f"wrote {path}")
    return 0


# --- run ---------------------------------------------------------------------


def cmd_run(args) -> int:
    overrides = {k: getattr(args, k) for k in
                 ("dt", "t_end", "seed", "oracle_every")
                 if getattr(args, k) is not None}
    scenario = load_scenario(args.scenario, overrides or None)
    os.makedirs(args.out, exist_ok=True)
    log = run(scenario)
    written = [
        report.write_trajectory_csv(log, os.path.join(args.out,
                                                      "trajectory.csv")),
        report.write_pairs_csv(log, os.path.join(args.out, "pairs.csv")),
        report.write_json(log.summary(), os.path.join(args.out,
                                                      "summary.json")),
    ]
    if not args.no_plots:
        written += report.render_figures(log, args.out, scenario=scenario)
    for path in written:
        print(f"wrote {path}")
    summary = log.summary()
    print(f"min_h = {summary['min_h']!r}")
    if log.failed:
        print(f"error: {log.failure_reason}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ellipsoid-shield",
        description="safety-filtered simulation and certification for "
                    "ellipsoidal rigid bodies")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario and write logs")
    p_run.add_argument("--scenario", required=True,
                       help="bundled scenario name or path to a JSON file")
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.add_argument("--dt", type=float, default=None)
    p_run.add_argument("--t-end", dest="t_end", type=float, default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--oracle-every", dest="oracle_every", type=int,
                       default=None,
                       help="audit h against the distance oracle every N "
                            "steps (0 disables)")
    p_run.add_argument("--no-plots", action="store_true",
                       help="skip figure rendering")
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify",
                              help="randomized certification campaigns")
    p_verify.add_argument("--out", default="out")
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.add_argument("--pairs", type=int, default=500,
                          help="disjoint pairs per dimension for the "
                               "duality suite; other suites scale with it")
    p_verify.set_defaults(func=cmd_verify)

    p_bench = sub.add_parser("bench", help="QP assemble+solve timing")
    p_bench.add_argument("--out", default="out")
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ScenarioError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
