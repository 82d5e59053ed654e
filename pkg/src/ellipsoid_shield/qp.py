"""Dense strictly convex QP solver for the safety filter.

minimize (u - u_nom)^T W (u - u_nom)   subject to  a_k . u >= b_k

with W a positive diagonal.  Solved by a dual active-set method: start at
the unconstrained optimum u_nom, repeatedly pull in the most violated
constraint, taking primal/dual steps and dropping blocking constraints as
needed.  Problems here are tiny (tens of variables, at most a handful of
constraints), so dense linear algebra per iteration is the robust choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ZERO_ROW_TOL = 1e-12
FEAS_TOL = 1e-12
MAX_ITERS = 500


@dataclass
class QpProblem:
    """Weights, nominal input, and inequality rows (a . u >= b)."""

    W: np.ndarray
    u_nom: np.ndarray
    constraints: list

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.u_nom = np.asarray(self.u_nom, dtype=float)
        if self.W.ndim != 1 or self.W.shape != self.u_nom.shape:
            raise ValueError("W must be a diagonal weight vector matching u_nom")
        if not np.all(self.W > 0.0):
            raise ValueError("all weights must be positive")
        rows = []
        for a, b in self.constraints:
            a = np.asarray(a, dtype=float)
            if a.shape != self.u_nom.shape:
                raise ValueError("constraint row/variable size mismatch")
            if np.sqrt(a @ a) < ZERO_ROW_TOL:
                raise ValueError("degenerate (near-zero) constraint row")
            rows.append((a, float(b)))
        self.constraints = rows

    @property
    def n(self):
        return self.u_nom.shape[0]

    @property
    def m(self):
        return len(self.constraints)


@dataclass
class QpSolution:
    u_star: np.ndarray
    multipliers: np.ndarray
    active_set: list
    kkt_residual: float
    iterations: int = 0


@dataclass
class KktReport:
    """The four KKT residuals, recomputed from scratch."""

    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def max_residual(self):
        return max(self.stationarity, self.primal, self.dual,
                   self.complementarity)


class QpInfeasibleError(RuntimeError):
    """No point satisfies all constraints; carries the worst offender."""

    def __init__(self, index, violation, u):
        super().__init__(
            f"infeasible QP: constraint {index} violated by {violation:.3e}")
        self.index = index
        self.violation = violation
        self.u = u


def kkt_check(problem: QpProblem, solution: QpSolution) -> KktReport:
    """Recompute stationarity, primal/dual feasibility, and complementary
    slackness for a claimed solution."""
    u = np.asarray(solution.u_star, dtype=float)
    lam = np.asarray(solution.multipliers, dtype=float)
    grad = 2.0 * problem.W * (u - problem.u_nom)
    primal = 0.0
    compl_ = 0.0
    for k, (a, b) in enumerate(problem.constraints):
        s = a @ u - b
        grad -= lam[k] * a
        primal = max(primal, -s)
        compl_ = max(compl_, abs(lam[k] * s))
    dual = max(0.0, -lam.min()) if lam.size else 0.0
    return KktReport(stationarity=float(np.sqrt(grad @ grad)),
                     primal=max(0.0, float(primal)),
                     dual=float(dual),
                     complementarity=float(compl_))


def solve(problem: QpProblem) -> QpSolution:
    """Dual active-set solve.  Raises QpInfeasibleError when the feasible
    region is empty."""
    w2 = 2.0 * problem.W
    u = problem.u_nom.astype(float).copy()
    m = problem.m
    lam_full = np.zeros(m)
    if m == 0:
        return QpSolution(u, lam_full, [], 0.0, 0)

    A = np.stack([a for a, _ in problem.constraints])
    b = np.array([bb for _, bb in problem.constraints])
    active: list[int] = []
    lam_act: list[float] = []
    iters = 0

    while iters < MAX_ITERS:
        iters += 1
        slack = A @ u - b
        scale = np.maximum(1.0, np.abs(b))
        worst = slack / scale
        p = int(np.argmin(worst))
        if worst[p] >= -FEAS_TOL:
            break

        lam_p = 0.0
        while iters < MAX_ITERS:
            iters += 1
            n_p = A[p]
            hn = n_p / w2
            if active:
                N = A[active]
                G = N / w2
                M = G @ N.T
                rhs = G @ n_p
                try:
                    r = np.linalg.solve(M, rhs)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(M, rhs, rcond=None)[0]
                z = hn - (N.T @ r) / w2
            else:
                r = np.zeros(0)
                z = hn
            denom = n_p @ z
            if denom <= 1e-13 * max(1.0, float(n_p @ hn)):
                # No primal progress possible: step in the dual only, or
                # certify infeasibility.
                pos = r > 1e-13
                if not pos.any():
                    raise QpInfeasibleError(p, float(b[p] - n_p @ u), u)
                ratios = np.full(len(active), np.inf)
                la = np.array(lam_act)
                ratios[pos] = la[pos] / r[pos]
                k1 = int(np.argmin(ratios))
                t1 = float(ratios[k1])
                la = la - t1 * r
                lam_p += t1
                del active[k1]
                lam_act = list(np.delete(la, k1))
                continue

            t2 = float((b[p] - n_p @ u) / denom)
            t1 = np.inf
            k1 = -1
            if active:
                la = np.array(lam_act)
                pos = r > 1e-13
                if pos.any():
                    ratios = np.full(len(active), np.inf)
                    ratios[pos] = la[pos] / r[pos]
                    k1 = int(np.argmin(ratios))
                    t1 = float(ratios[k1])
            t = min(t1, t2)
            u = u + t * z
            if active:
                lam_act = list(np.array(lam_act) - t * r)
            lam_p += t
            if t2 <= t1:
                active.append(p)
                lam_act.append(lam_p)
                break
            del active[k1]
            del lam_act[k1]
    else:
        raise RuntimeError("active-set iteration limit reached")

    for k, lk in zip(active, lam_act):
        lam_full[k] = max(0.0, lk)
    sol = QpSolution(u_star=u,
                     multipliers=lam_full,
                     active_set=sorted(active),
                     kkt_residual=0.0,
                     iterations=iters)
    sol.kkt_residual = kkt_check(problem, sol).max_residual
    return sol
