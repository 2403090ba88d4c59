"""Restless arm dynamics, the N-arm stepper and belief-chain construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STOCHASTIC_ATOL = 1e-9


class BudgetViolation(ValueError):
    pass


def _check_stochastic(name: str, mat: np.ndarray, n: int) -> None:
    if mat.shape != (n, n):
        raise ValueError(f"{name} must have shape ({n}, {n}), got {mat.shape}")
    if not np.all(np.isfinite(mat)) or np.any(mat < 0.0) or np.any(mat > 1.0):
        raise ValueError(f"{name} entries must lie in [0, 1]")
    sums = mat.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > STOCHASTIC_ATOL)
    if bad.size:
        raise ValueError(f"{name} row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")


@dataclass(frozen=True, eq=False)
class FiniteArm:
    """Finite-state restless arm.

    ``r_act``/``r_pass`` hold expected rewards. ``reward_noise`` is the half-width
    of optional zero-mean uniform noise added when simulating. ``features`` is
    an optional per-state encoding (belief arms carry ``(omega, belief)``).
    """

    p_act: np.ndarray
    p_pass: np.ndarray
    r_act: np.ndarray
    r_pass: np.ndarray
    reward_noise: float = 0.0
    features: np.ndarray | None = None
    beliefs: np.ndarray | None = None

    def __post_init__(self):
        p_act = np.array(self.p_act, dtype=float)
        p_pass = np.array(self.p_pass, dtype=float)
        r_act = np.array(self.r_act, dtype=float).reshape(-1)
        r_pass = np.array(self.r_pass, dtype=float).reshape(-1)
        n = r_act.size
        if n < 1:
            raise ValueError("arm needs at least one state")
        if r_pass.size != n:
            raise ValueError("r_act and r_pass lengths differ")
        _check_stochastic("p_act", p_act, n)
        _check_stochastic("p_pass", p_pass, n)
        if not (np.all(np.isfinite(r_act)) and np.all(np.isfinite(r_pass))):
            raise ValueError("rewards must be finite")
        if not np.isfinite(self.reward_noise) or self.reward_noise < 0:
            raise ValueError("reward_noise must be a finite half-width >= 0")
        for name, arr in (("p_act", p_act), ("p_pass", p_pass), ("r_act", r_act), ("r_pass", r_pass)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name, mat in (("_cum_act", p_act), ("_cum_pass", p_pass)):
            cum = np.cumsum(mat, axis=1)
            cum[:, -1] = 1.0  # rounding must never push a draw past the last state
            cum.setflags(write=False)
            object.__setattr__(self, name, cum)
        for name in ("features", "beliefs"):
            val = getattr(self, name)
            if val is not None:
                val = np.array(val, dtype=float)
                if val.shape[0] != n:
                    raise ValueError(f"{name} must have one row per state")
                val.setflags(write=False)
                object.__setattr__(self, name, val)

    @property
    def num_states(self) -> int:
        return self.r_act.size

    @property
    def reward_bound(self) -> float:
        """Largest attainable |reward| including noise."""
        return float(max(np.abs(self.r_act).max(), np.abs(self.r_pass).max()) + self.reward_noise)

    def cumulative(self, action: int) -> np.ndarray:
        return self._cum_act if action else self._cum_pass


def sample_next(cum_rows: np.ndarray, u: np.ndarray | float) -> np.ndarray | int:
    """Inverse-CDF draw: smallest j with u < cum[j]. Works row-wise on stacks."""
    u = np.asarray(u)
    nxt = (cum_rows <= u[..., None]).sum(axis=-1)
    return np.minimum(nxt, cum_rows.shape[-1] - 1)


def arm_step(arm: FiniteArm, state: int, action: int, rng: np.random.Generator) -> tuple[float, int]:
    if not 0 <= state < arm.num_states:
        raise IndexError(f"state {state} out of range for {arm.num_states}-state arm")
    if action not in (0, 1):
        raise ValueError("action must be 0 or 1")
    reward = float(arm.r_act[state] if action else arm.r_pass[state])
    nxt = int(sample_next(arm.cumulative(action)[state], rng.random()))
    if arm.reward_noise > 0:
        reward += arm.reward_noise * (2.0 * rng.random() - 1.0)
    return reward, nxt


# ---------------------------------------------------------------------------
# Two-state partially observable arms


@dataclass(frozen=True)
class TwoStatePartialArm:
    """Latent 0/1 arm; ``pXY_*`` is P(latent 1 next | latent X now) given the action."""

    p01_act: float
    p11_act: float
    p01_pass: float
    p11_pass: float

    def __post_init__(self):
        for name in ("p01_act", "p11_act", "p01_pass", "p11_pass"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} not in [0, 1]")

    @property
    def positively_correlated(self) -> bool:
        return self.p11_pass > self.p01_pass

    @property
    def passive_fixed_point(self) -> float:
        denom = 1.0 - self.p11_pass + self.p01_pass
        return self.p01_pass / denom if denom > 0 else 0.5


@dataclass(frozen=True)
class BeliefChain:
    horizon: int
    b0: np.ndarray
    b1: np.ndarray

    def chain(self, omega: int) -> np.ndarray:
        return self.b1 if omega else self.b0


def belief_update(b: float, p01: float, p11: float) -> float:
    return b * p11 + (1.0 - b) * p01


def build_belief_chain(arm: TwoStatePartialArm, T: int) -> BeliefChain:
    if T < 1:
        raise ValueError("chain horizon T must be >= 1")
    chains = []
    for omega in (0, 1):
        b = np.empty(T + 1)
        b[0] = float(omega)
        for u in range(T):
            b[u + 1] = belief_update(b[u], arm.p01_pass, arm.p11_pass)
        b.setflags(write=False)
        chains.append(b)
    return BeliefChain(T, chains[0], chains[1])


def belief_state_id(omega: int, u: int, T: int) -> int:
    """Flat id of chain position (omega, u): chain 0 first, then chain 1."""
    return omega * (T + 1) + u


def build_belief_mdp(arm: TwoStatePartialArm, T: int, observe: str = "current",
                     reward_noise: float = 0.0) -> FiniteArm:
    """Collapse a two-state partially observable arm into a ``2(T+1)``-state MDP.

    Passive moves ``(omega, u) -> (omega, min(u+1, T))``. Activation observes the
    latent state and lands on ``(omega', 0)``. With ``observe="current"`` the
    observation is 1 w.p. ``b_omega(u)``; ``observe="next"`` instead reveals the
    latent state after one active-dynamics step, w.p.
    ``b*p11_act + (1-b)*p01_act``. Both actions earn the belief as expected reward.
    """
    if observe not in ("current", "next"):
        raise ValueError("observe must be 'current' or 'next'")
    chain = build_belief_chain(arm, T)
    n = 2 * (T + 1)
    p_pass = np.zeros((n, n))
    p_act = np.zeros((n, n))
    beliefs = np.empty(n)
    omegas = np.empty(n)
    for omega in (0, 1):
        for u in range(T + 1):
            s = belief_state_id(omega, u, T)
            b = chain.chain(omega)[u]
            beliefs[s] = b
            omegas[s] = omega
            p_pass[s, belief_state_id(omega, min(u + 1, T), T)] = 1.0
            q = b if observe == "current" else belief_update(b, arm.p01_act, arm.p11_act)
            p_act[s, belief_state_id(1, 0, T)] += q
            p_act[s, belief_state_id(0, 0, T)] += 1.0 - q
    return FiniteArm(p_act, p_pass, beliefs, beliefs, reward_noise,
                     features=np.column_stack([omegas, beliefs]), beliefs=beliefs)


def check_belief_monotone(chain: BeliefChain, tol: float = 1e-12) -> dict:
    """Check both chains move monotonically toward the passive fixed point.

    The ``omega=0`` chain must be non-decreasing and the ``omega=1`` chain
    non-increasing; a sign flip in successive differences (negative correlation)
    is reported as a violation at that position.
    """
    violations = []
    for omega, sign in ((0, 1.0), (1, -1.0)):
        d = np.diff(chain.chain(omega)) * sign
        for u in np.flatnonzero(d < -tol):
            violations.append((omega, int(u), float(d[u] * sign)))
    return {"is_monotone": not violations, "violations": violations}


# ---------------------------------------------------------------------------
# Contextual bandit instances


@dataclass(frozen=True, eq=False)
class ContextualArm:
    context: np.ndarray
    dynamics: FiniteArm
    name: str = ""

    def __post_init__(self):
        ctx = np.array(self.context, dtype=float).reshape(-1)
        ctx.setflags(write=False)
        object.__setattr__(self, "context", ctx)


@dataclass(frozen=True, eq=False)
class BanditInstance:
    arms: tuple[ContextualArm, ...]
    budget: int
    beta: float
    initial_states: tuple[int, ...] | None = field(default=None)

    def __post_init__(self):
        arms = tuple(self.arms)
        object.__setattr__(self, "arms", arms)
        if not arms:
            raise ValueError("bandit needs at least one arm")
        if not 1 <= self.budget <= len(arms):
            raise ValueError(f"budget K={self.budget} must satisfy 1 <= K <= N={len(arms)}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("discount beta must lie in (0, 1)")
        d = {arm.context.size for arm in arms}
        if len(d) != 1:
            raise ValueError(f"context dimensions differ across arms: {sorted(d)}")
        if self.initial_states is not None and len(self.initial_states) != len(arms):
            raise ValueError("initial_states needs one entry per arm")

    @property
    def num_arms(self) -> int:
        return len(self.arms)

    @property
    def context_dim(self) -> int:
        return self.arms[0].context.size


def bandit_step(instance: BanditInstance, states, actions, rng: np.random.Generator):
    """Step every arm once. ``actions`` must contain exactly ``budget`` ones."""
    actions = np.asarray(actions, dtype=int)
    states = np.asarray(states, dtype=int)
    if actions.shape != (instance.num_arms,) or states.shape != (instance.num_arms,):
        raise ValueError("states and actions need one entry per arm")
    if int(actions.sum()) != instance.budget or np.any((actions != 0) & (actions != 1)):
        raise BudgetViolation(f"expected exactly {instance.budget} activations, got {actions.tolist()}")
    rewards = np.empty(instance.num_arms)
    nxt = np.empty(instance.num_arms, dtype=int)
    for i, arm in enumerate(instance.arms):
        rewards[i], nxt[i] = arm_step(arm.dynamics, int(states[i]), int(actions[i]), rng)
    return rewards, nxt


# ---------------------------------------------------------------------------
# Reference instances used by experiments and tests

STANDARD_PARTIAL_ARM = TwoStatePartialArm(p01_act=0.2, p11_act=0.9, p01_pass=0.2, p11_pass=0.9)
STANDARD_T = 10


def standard_arm(T: int = STANDARD_T) -> FiniteArm:
    return build_belief_mdp(STANDARD_PARTIAL_ARM, T)


def random_partial_arm(rng: np.random.Generator, low: float = 0.05, high: float = 0.95) -> TwoStatePartialArm:
    """Positively-correlated arm with every probability in ``[low, high]``."""
    while True:
        p01, p11 = rng.uniform(low, high, size=2)
        if p11 > p01:
            break
    a01, a11 = rng.uniform(low, high, size=2)
    return TwoStatePartialArm(p01_act=float(a01), p11_act=float(a11), p01_pass=float(p01), p11_pass=float(p11))


def homogeneous_bandit(arm: FiniteArm, n: int, budget: int, beta: float, context=(1.0,)) -> BanditInstance:
    return BanditInstance(tuple(ContextualArm(np.asarray(context, float), arm, f"arm{i}") for i in range(n)),
                          budget, beta)
