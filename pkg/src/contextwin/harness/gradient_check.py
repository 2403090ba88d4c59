"""Finite-difference estimates of the soft-environment objective's gradient.

``J(theta; lam, s1)`` is the expected discounted net reward of the sigmoid
policy ``P(a=1|s) = sigma_m(f_theta(s) - lam)`` started from ``s1``. The
subsidy ``lam`` is held fixed, which is the quantity a mini-batch update
estimates once ``lam = f_theta(s0)`` has been read off.

The simulator here is deliberately separate from ``training.rollout``: it
draws its own uniforms in chunks and shares them between ``theta + delta e_j``
and ``theta - delta e_j`` (common random numbers), so the per-rollout
difference has small variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..envs import FiniteArm
from ..nets import DenseNetParams, net_forward_batch
from .seeding import seed_stream

FD_PURPOSE = 6
DEFAULT_CHUNK = 250_000

# A small non-degenerate arm: both actions move mass in both directions.
GRADIENT_TEST_ARM = FiniteArm(
    p_act=np.array([[0.3, 0.7], [0.6, 0.4]]),
    p_pass=np.array([[0.9, 0.1], [0.2, 0.8]]),
    r_act=np.array([0.2, 1.0]),
    r_pass=np.array([0.0, 0.5]),
)


@dataclass
class FDGradient:
    grad: np.ndarray
    stderr: np.ndarray
    rollouts: int


def _returns(arm: FiniteArm, p_act: np.ndarray, lam: float, s1: int, beta: float,
             u_a: np.ndarray, u_s: np.ndarray) -> np.ndarray:
    n, H = u_a.shape
    s = np.full(n, s1)
    G = np.zeros(n)
    disc = 1.0
    p_next1_act = arm.p_act[:, 1:].sum(axis=1) if arm.num_states == 2 else None
    p_next1_pass = arm.p_pass[:, 1:].sum(axis=1) if arm.num_states == 2 else None
    for t in range(H):
        a = u_a[:, t] < p_act[s]
        G += disc * np.where(a, arm.r_act[s] - lam, arm.r_pass[s])
        if p_next1_act is not None:
            # two states: next is 1 iff the uniform lands in the top P(next=1) slice
            q = np.where(a, p_next1_act[s], p_next1_pass[s])
            s = (u_s[:, t] >= 1.0 - q).astype(int)
        else:
            P = np.where(a[:, None], arm.p_act[s], arm.p_pass[s])
            s = np.minimum((np.cumsum(P, axis=1) <= u_s[:, t, None]).sum(axis=1), arm.num_states - 1)
        disc *= beta
    return G


def fd_gradient(arm: FiniteArm, theta: DenseNetParams, X: np.ndarray, lam: float, s1: int, m: float,
                beta: float, horizon: int, rollouts: int, delta: float = 1e-2, seed: int = 0,
                stream: int = 0, chunk: int = DEFAULT_CHUNK) -> FDGradient:
    """Central differences of ``J`` in every parameter, with per-coordinate standard errors."""
    if arm.reward_noise:
        raise ValueError("finite differences assume noiseless rewards")
    P = theta.flat.size
    tables = []
    for j in range(P):
        for sign in (1.0, -1.0):
            flat = theta.flat.copy()
            flat[j] += sign * delta
            tables.append(expit(m * (net_forward_batch(theta.with_flat(flat), X) - lam)))
    sums = np.zeros(P)
    sq = np.zeros(P)
    done = 0
    k = 0
    while done < rollouts:
        n = min(chunk, rollouts - done)
        rng = seed_stream(seed, stream, k, FD_PURPOSE)
        u_a = rng.random((n, horizon))
        u_s = rng.random((n, horizon))
        for j in range(P):
            d = (_returns(arm, tables[2 * j], lam, s1, beta, u_a, u_s)
                 - _returns(arm, tables[2 * j + 1], lam, s1, beta, u_a, u_s)) / (2.0 * delta)
            sums[j] += d.sum()
            sq[j] += (d * d).sum()
        done += n
        k += 1
    mean = sums / rollouts
    var = np.maximum(sq / rollouts - mean ** 2, 0.0) * rollouts / max(rollouts - 1, 1)
    return FDGradient(mean, np.sqrt(var / rollouts), rollouts)


def expected_fd_gradient(arm: FiniteArm, theta: DenseNetParams, X: np.ndarray, m: float, beta: float,
                         horizon: int, rollouts: int, delta: float = 1e-2, seed: int = 0) -> FDGradient:
    """Average the fixed-subsidy gradient over uniformly drawn ``(s0, s1)``.

    This is the target of the mini-batch update: ``s0`` sets ``lam = f(s0)``
    and ``s1`` is the start state, both uniform over the arm's states.
    """
    S = arm.num_states
    f = net_forward_batch(theta, X)
    grads, variances = [], []
    for s0 in range(S):
        for s1 in range(S):
            r = fd_gradient(arm, theta, X, float(f[s0]), s1, m, beta, horizon, rollouts, delta,
                            seed=seed, stream=s0 * S + s1)
            grads.append(r.grad)
            variances.append(r.stderr ** 2)
    n = len(grads)
    return FDGradient(np.mean(grads, axis=0), np.sqrt(np.sum(variances, axis=0)) / n, rollouts)
