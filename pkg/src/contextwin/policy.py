"""Index policies over a bandit instance and their discounted-reward evaluation.

A policy is any callable mapping the current state vector to one index per
arm; activation is always the top-``K`` rule with lowest-arm-id tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import BanditInstance, sample_next
from .harness.seeding import EVAL, POLICY, seed_stream
from .nets import DenseNetParams, GatingParams, gating_weights, net_forward_batch, sigma_m
from .oracle import BISECT_TOL, VI_TOL, check_indexability, whittle_table
from .training import encode_states


class UncertifiedArmError(RuntimeError):
    pass


@dataclass
class PolicyEvalResult:
    mean_discounted_reward: float
    std_error: float
    episodes: int
    horizon: int
    tail_bound: float
    per_episode: np.ndarray | None = None


def topk_activate(indices, K: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=float).reshape(-1)
    N = idx.size
    if not 1 <= K <= N:
        raise ValueError(f"K={K} must satisfy 1 <= K <= N={N}")
    order = np.lexsort((np.arange(N), -idx))
    actions = np.zeros(N, dtype=int)
    actions[order[:K]] = 1
    return actions


def evaluate_policy(instance: BanditInstance, policy, horizon: int = 200, episodes: int = 100, seed: int = 0,
                    accrue_passive: bool = True, keep_per_episode: bool = False) -> PolicyEvalResult:
    """Monte Carlo estimate of ``E[sum_{t<H} beta^t sum_i r_i[t]]``.

    Episode ``e`` draws its initial states (unless the instance fixes them) and
    all transition uniforms from ``seed_stream(seed, 0, e, EVAL)``, so two
    policies evaluated with one seed face common random numbers. With
    ``accrue_passive=False`` only activated arms earn reward.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    N, K, beta = instance.num_arms, instance.budget, instance.beta
    dyn = [a.dynamics for a in instance.arms]
    S = max(d.num_states for d in dyn)
    # pad per-arm tables to a common state count so a step is a few array ops
    r_tab = np.zeros((2, N, S))
    cum = np.ones((2, N, S, S))
    noise = np.array([d.reward_noise for d in dyn])
    for i, d in enumerate(dyn):
        n = d.num_states
        r_tab[0, i, :n], r_tab[1, i, :n] = d.r_pass, d.r_act
        cum[0, i, :n, :n], cum[1, i, :n, :n] = d.cumulative(0), d.cumulative(1)
    n_states = np.array([d.num_states for d in dyn])
    arm_ids = np.arange(N)
    totals = np.empty(episodes)
    for e in range(episodes):
        rng = seed_stream(seed, 0, e, EVAL)
        if instance.initial_states is not None:
            states = np.array(instance.initial_states, dtype=int)
        else:
            states = (rng.random(N) * n_states).astype(int)
        u = rng.random((horizon, 2, N))
        total, disc = 0.0, 1.0
        for t in range(horizon):
            a = topk_activate(policy(states), K)
            r = r_tab[a, arm_ids, states]
            if noise.any():
                r = r + noise * (2.0 * u[t, 1] - 1.0)
            if not accrue_passive:
                r = r * a
            total += disc * float(r.sum())
            states = sample_next(cum[a, arm_ids, states], u[t, 0])
            disc *= beta
        totals[e] = total
    r_max = max(d.reward_bound for d in dyn)
    return PolicyEvalResult(
        float(totals.mean()),
        float(totals.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0,
        episodes, horizon,
        float(beta ** horizon * r_max * N / (1.0 - beta)),
        totals if keep_per_episode else None,
    )


def table_policy(tables):
    """Policy that looks up ``tables[i][state_i]``."""
    tables = [np.asarray(t, dtype=float) for t in tables]

    def policy(states):
        return np.array([t[s] for t, s in zip(tables, states)])

    policy.tables = tables
    return policy


def oracle_whittle_policy(instance: BanditInstance, lambda_grid=None, tol: float = BISECT_TOL, certify: bool = True):
    """Whittle-index policy; refuses arms that fail :func:`check_indexability`."""
    tables = []
    cache = {}
    for i, arm in enumerate(instance.arms):
        key = id(arm.dynamics)
        if key not in cache:
            d = arm.dynamics
            if certify:
                grid = lambda_grid
                if grid is None:
                    span = 2.0 * d.reward_bound / (1.0 - instance.beta) + 1.0
                    grid = np.linspace(-span, span, 201)
                report = check_indexability(d, grid, instance.beta, VI_TOL)
                if not report.indexable:
                    raise UncertifiedArmError(
                        f"arm {i} failed check_indexability ({len(report.violations)} violations); "
                        "inspect oracle.check_indexability before using Whittle indices")
            cache[key] = whittle_table(d, instance.beta, tol).w
        tables.append(cache[key])
    return table_policy(tables)


def random_policy(instance: BanditInstance, seed: int = 0):
    """Uniform random K-subset each round, from a stream separate from the dynamics."""
    rng = seed_stream(seed, 0, 0, POLICY)

    def policy(states):
        return rng.random(instance.num_arms)

    return policy


def myopic_policy(instance: BanditInstance):
    """Rank arms by expected immediate active reward in their current state."""
    return table_policy([a.dynamics.r_act for a in instance.arms])


def baseline_policies(instance: BanditInstance, seed: int = 0) -> dict:
    return {"random": random_policy(instance, seed), "myopic": myopic_policy(instance)}


def learned_index_policy(experts, gating: GatingParams | None, instance: BanditInstance, hard: bool = True,
                         encoding: str = "onehot", m: float = 1.0):
    """Inference-time index per arm, gating noise disabled.

    ``experts`` is a list of networks (one network and ``gating=None`` for
    NeurWIN). With ``hard=False`` the indices are squashed through ``sigma_m``,
    which leaves the top-K choice unchanged.
    """
    experts = list(experts) if not isinstance(experts, DenseNetParams) else [experts]
    tables = []
    for arm in instance.arms:
        X = encode_states(arm.dynamics, encoding)
        if X.shape[1] != experts[0].layer_dims[0]:
            raise ValueError(f"encoding has {X.shape[1]} features, network expects {experts[0].layer_dims[0]}")
        if gating is None:
            if len(experts) != 1:
                raise ValueError("several experts need a gating network")
            f = net_forward_batch(experts[0], X)
        else:
            if arm.context.size != gating.context_dim:
                raise ValueError("arm context does not match the gating network")
            sel = gating_weights(gating, arm.context, noise_enabled=False)
            f = sum(w * net_forward_batch(experts[i], X) for i, w in zip(sel.indices, sel.weights))
        tables.append(f if hard else sigma_m(f, m))
    return table_policy(tables)
