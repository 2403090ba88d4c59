"""Exact Whittle indices and indexability certificates for finite arms.

All solvers work on a stack of subsidies at once: values have shape
``(num_lambdas, num_states)``. Ties between the active and passive Q-values
count as active, so a state's index is exactly the right end of its
membership interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import FiniteArm

VI_TOL = 1e-9
BISECT_TOL = 1e-6
MAX_ITER = 1_000_000
EXACT_POLISH_MAX_STATES = 512
LIMIT_LAMBDA = 1e6


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


class NotIndexableError(RuntimeError):
    pass


@dataclass
class ValueIterationResult:
    values: np.ndarray
    active_set: np.ndarray
    q_act: np.ndarray
    q_pass: np.ndarray
    residuals: list[float] = field(default_factory=list)

    @property
    def advantage(self) -> np.ndarray:
        return self.q_act - self.q_pass


@dataclass
class ActiveSetTable:
    lambdas: np.ndarray
    membership: np.ndarray  # (grid, num_states) bool

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.membership = np.asarray(self.membership, dtype=bool)
        if np.any(np.diff(self.lambdas) <= 0):
            raise ValueError("lambda grid must be strictly increasing")
        if self.membership.shape[0] != self.lambdas.size:
            raise ValueError("membership needs one row per lambda")


@dataclass
class IndexabilityReport:
    indexable: bool
    violations: list[tuple[int, float, float]]
    strong: bool | None = None
    strong_violations: list[tuple[tuple[int, int], float]] = field(default_factory=list)
    lambda_min: float = float("nan")
    lambda_max: float = float("nan")
    grid_points: int = 0
    grid_resolution: float = float("nan")
    limits_ok: bool = True


@dataclass
class WhittleTable:
    w: np.ndarray
    tol: float


@dataclass
class ThresholdCurve:
    lambdas: np.ndarray
    threshold_index: np.ndarray  # passive-state count in belief order; num_states means never activate
    threshold_belief: np.ndarray  # largest passive belief, -inf when everything is active
    non_threshold: list[float]
    decreasing_at: list[float]

    @property
    def monotone(self) -> bool:
        return not self.non_threshold and not self.decreasing_at


# ---------------------------------------------------------------------------
# value iteration


def _q_values(arm: FiniteArm, lams: np.ndarray, beta: float, V: np.ndarray):
    q_pass = arm.r_pass + beta * V @ arm.p_pass.T
    q_act = (arm.r_act - lams[:, None]) + beta * V @ arm.p_act.T
    return q_act, q_pass


def _policy_evaluate(arm: FiniteArm, lams: np.ndarray, beta: float, active: np.ndarray) -> np.ndarray:
    n = arm.num_states
    P = np.where(active[:, :, None], arm.p_act[None], arm.p_pass[None])
    r = np.where(active, arm.r_act - lams[:, None], arm.r_pass)
    A = np.eye(n)[None] - beta * P
    return np.linalg.solve(A, r[..., None])[..., 0]


def solve_lambdas(arm: FiniteArm, lambdas, beta: float, tol: float = VI_TOL, max_iter: int = MAX_ITER,
                  V0: np.ndarray | None = None, exact: bool | None = None) -> ValueIterationResult:
    """Solve the subsidised single-arm problem for every subsidy in ``lambdas``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    lams = np.atleast_1d(np.asarray(lambdas, dtype=float))
    V = np.zeros((lams.size, arm.num_states)) if V0 is None else np.array(V0, dtype=float, copy=True)
    stop = tol * (1.0 - beta) / (2.0 * beta)
    residuals = []
    for _ in range(max_iter):
        q_act, q_pass = _q_values(arm, lams, beta, V)
        V_new = np.maximum(q_act, q_pass)
        res = float(np.max(np.abs(V_new - V))) if V.size else 0.0
        residuals.append(res)
        V = V_new
        if res <= stop:
            break
    else:
        raise ConvergenceError(f"value iteration did not converge in {max_iter} iterations", residuals[-1])
    q_act, q_pass = _q_values(arm, lams, beta, V)
    if exact is None:
        exact = arm.num_states <= EXACT_POLISH_MAX_STATES
    if exact:
        # policy iteration from the VI policy; terminates once the greedy policy is stable
        active = q_act >= q_pass
        for _ in range(50):
            V = _policy_evaluate(arm, lams, beta, active)
            q_act, q_pass = _q_values(arm, lams, beta, V)
            new_active = q_act >= q_pass
            if np.array_equal(new_active, active):
                break
            active = new_active
        V = np.maximum(q_act, q_pass)
    return ValueIterationResult(V, q_act >= q_pass, q_act, q_pass, residuals)


def value_iteration(arm: FiniteArm, lam: float, beta: float, tol: float = VI_TOL,
                    max_iter: int = MAX_ITER, exact: bool | None = None) -> ValueIterationResult:
    res = solve_lambdas(arm, [lam], beta, tol, max_iter, exact=exact)
    return ValueIterationResult(res.values[0], res.active_set[0], res.q_act[0], res.q_pass[0], res.residuals)


def active_set_table(arm: FiniteArm, lambda_grid, beta: float, tol: float = VI_TOL) -> tuple[ActiveSetTable, np.ndarray]:
    """Membership table and advantages ``Q_act - Q_pass`` over a subsidy grid."""
    grid = np.asarray(lambda_grid, dtype=float)
    res = solve_lambdas(arm, grid, beta, tol)
    return ActiveSetTable(grid, res.active_set), res.advantage


# ---------------------------------------------------------------------------
# Whittle indices


def _initial_bound(arm: FiniteArm, beta: float) -> float:
    return 2.0 * arm.reward_bound / (1.0 - beta) + 1.0


def whittle_table(arm: FiniteArm, beta: float, tol: float = BISECT_TOL, vi_tol: float = VI_TOL,
                  states=None, max_doublings: int = 10) -> WhittleTable:
    """Bisect every requested state's membership boundary in parallel.

    Assumes the arm is indexable (certify with :func:`check_indexability`).
    The bracket starts at ``±(2 r_max/(1-beta) + 1)`` and doubles when a state
    is not active at the low end or still active at the high end.
    """
    states = np.arange(arm.num_states) if states is None else np.atleast_1d(np.asarray(states, dtype=int))
    n = states.size
    rows = np.arange(n)

    def member(lams, V0=None):
        res = solve_lambdas(arm, lams, beta, vi_tol, V0=V0)
        return res.active_set[rows, states], res.values

    bound = _initial_bound(arm, beta)
    lo = np.full(n, -bound)
    hi = np.full(n, bound)
    for _ in range(max_doublings + 1):
        ok_lo, _ = member(lo)
        ok_hi, _ = member(hi)
        ok_hi = ~ok_hi
        if ok_lo.all() and ok_hi.all():
            break
        lo = np.where(ok_lo, lo, 2.0 * lo)
        hi = np.where(ok_hi, hi, 2.0 * hi)
    else:
        raise NotIndexableError(
            f"states {states[~(ok_lo & ok_hi)].tolist()} have no finite membership boundary within "
            f"+/-{bound * 2 ** max_doublings:.3g}; arm is suspected not indexable")
    V = None
    while np.max(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        inside, V = member(mid, V)
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return WhittleTable(0.5 * (lo + hi), tol)


def whittle_bisect(arm: FiniteArm, state: int, beta: float, tol: float = BISECT_TOL) -> float:
    if not 0 <= state < arm.num_states:
        raise IndexError(f"state {state} out of range")
    return float(whittle_table(arm, beta, tol, states=[state]).w[0])


# ---------------------------------------------------------------------------
# certificates


def indexability_from_membership(table: ActiveSetTable) -> IndexabilityReport:
    """Report every state whose membership switches back on as the subsidy grows."""
    m = table.membership
    reenter = ~m[:-1] & m[1:]
    violations = [(int(s), float(table.lambdas[k]), float(table.lambdas[k + 1]))
                  for k, s in zip(*np.nonzero(reenter))]
    violations.sort(key=lambda v: (v[0], v[1]))
    lam = table.lambdas
    return IndexabilityReport(
        indexable=not violations,
        violations=violations,
        lambda_min=float(lam[0]),
        lambda_max=float(lam[-1]),
        grid_points=int(lam.size),
        grid_resolution=float(np.max(np.diff(lam))) if lam.size > 1 else float("inf"),
    )


def _limits_ok(arm: FiniteArm, beta: float, tol: float) -> bool:
    res = solve_lambdas(arm, [-LIMIT_LAMBDA, LIMIT_LAMBDA], beta, tol)
    return bool(res.active_set[0].all() and not res.active_set[1].any())


def check_indexability(arm: FiniteArm, lambda_grid, beta: float, tol: float = VI_TOL) -> IndexabilityReport:
    """Certify that S(lambda) shrinks along the grid, plus the two analytic limits.

    The verdict is only as fine as the grid; see ``grid_resolution``.
    """
    table, _ = active_set_table(arm, lambda_grid, beta, tol)
    report = indexability_from_membership(table)
    report.limits_ok = _limits_ok(arm, beta, tol)
    report.indexable = report.indexable and report.limits_ok
    return report


def check_strong_indexability(arm: FiniteArm, lambda_grid, beta: float, tol: float = 1e-8,
                              vi_tol: float = VI_TOL, bisect_tol: float = BISECT_TOL,
                              whittle: WhittleTable | None = None) -> IndexabilityReport:
    """Check that activation advantage is ordered like the Whittle index.

    For every pair with ``W(s) > W(s') + 2*bisect_tol`` we require
    ``A(s; lam) >= A(s'; lam) - tol`` at each grid subsidy. Pairs whose indices
    agree to within bisection resolution are treated as ties and skipped.
    """
    table, adv = active_set_table(arm, lambda_grid, beta, vi_tol)
    report = indexability_from_membership(table)
    report.limits_ok = _limits_ok(arm, beta, vi_tol)
    report.indexable = report.indexable and report.limits_ok
    if not report.indexable:
        report.strong = False
        return report
    if whittle is None:
        whittle = whittle_table(arm, beta, bisect_tol, vi_tol)
    w = whittle.w
    higher = w[:, None] > w[None, :] + 2.0 * whittle.tol
    violations = []
    for k, lam in enumerate(table.lambdas):
        a = adv[k]
        bad = higher & (a[:, None] < a[None, :] - tol)
        for s, s2 in zip(*np.nonzero(bad)):
            violations.append(((int(s), int(s2)), float(lam)))
    report.strong_violations = violations
    report.strong = not violations
    return report


def threshold_curve(arm: FiniteArm, lambda_grid, beta: float, tol: float = VI_TOL) -> ThresholdCurve:
    """Belief threshold of the optimal policy at each subsidy.

    The policy at ``lam`` is a reverse threshold policy when every active
    belief exceeds every passive one. The threshold index counts passive
    states in ascending-belief order (0: all active, ``num_states``: never
    activate) and must be non-decreasing in ``lam``.
    """
    if arm.beliefs is None:
        raise ValueError("threshold_curve needs an arm built by build_belief_mdp")
    table, _ = active_set_table(arm, lambda_grid, beta, tol)
    b = arm.beliefs
    n = arm.num_states
    k = np.empty(table.lambdas.size, dtype=int)
    b_th = np.empty(table.lambdas.size)
    non_threshold = []
    for i, (lam, act) in enumerate(zip(table.lambdas, table.membership)):
        k[i] = n - int(act.sum())
        b_th[i] = b[~act].max() if k[i] else -np.inf
        if act.any() and k[i] and b[act].min() <= b_th[i]:
            non_threshold.append(float(lam))
    decreasing = [float(table.lambdas[i + 1]) for i in np.flatnonzero(
        (np.diff(k) < 0) | (np.diff(b_th) < 0))]
    return ThresholdCurve(table.lambdas, k, b_th, non_threshold, decreasing)
