"""Env(lambda) wrappers and mini-batch REINFORCE for NeurWIN and ContextWIN.

Within a mini-batch the parameters, the subsidy and the gating noise are
frozen, and the arm has finitely many states, so each network is evaluated
once per state up front. Episodes are then simulated in lockstep and their
eligibility traces are assembled from per-(state, action) visit counts.

Each episode pre-draws a ``(horizon, 3)`` block of uniforms from its own
stream ``seed_stream(seed, batch, episode)``: column 0 decides the action,
column 1 the transition, column 2 the reward noise. A single episode run on
its own and the same episode inside a batch therefore see identical draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envs import FiniteArm, arm_step, sample_next
from .harness.seeding import BATCH, GATING, INIT, seed_stream
from .nets import (DenseNetParams, GatingParams, SparseWeights, gating_noise, gating_weights,
                   init_dense, net_forward_batch, net_param_grad_batch, sigma_m)

ELIGIBILITY_MODES = ("score_function", "paper_literal")
BASELINES = ("batch_mean", "leave_one_out", "none")


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, dump: dict):
        super().__init__(msg)
        self.dump = dump


@dataclass(frozen=True)
class EnvLambdaConfig:
    lam: float
    m: float = 1.0
    mode: str = "soft"

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("sensitivity m must be positive")
        if self.mode not in ("hard", "soft"):
            raise ValueError("mode must be 'hard' or 'soft'")


@dataclass(frozen=True)
class TrainConfig:
    minibatch_size: int = 32
    num_minibatches: int = 2000
    horizon: int = 100
    beta: float = 0.95
    expert_lr: float = 1e-3
    gating_lr: float = 1e-3
    m: float = 1.0
    eligibility_mode: str = "score_function"
    baseline: str = "batch_mean"
    gating_frozen: bool = False
    gating_noise: bool = True
    lr_schedule: str = "constant"
    m_growth: float = 1.0
    encoding: str = "onehot"
    hidden: tuple[int, ...] = (16,)
    activation: str = "tanh"
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.minibatch_size < 1 or self.num_minibatches < 0 or self.horizon < 0:
            raise ValueError("minibatch_size >= 1, num_minibatches >= 0 and horizon >= 0 required")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.m <= 0 or self.m_growth <= 0:
            raise ValueError("m and m_growth must be positive")
        if self.eligibility_mode not in ELIGIBILITY_MODES:
            raise ValueError(f"eligibility_mode must be one of {ELIGIBILITY_MODES}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")
        if self.lr_schedule not in ("constant", "sqrt_batches"):
            raise ValueError("lr_schedule must be 'constant' or 'sqrt_batches'")
        if self.encoding not in ("onehot", "features"):
            raise ValueError("encoding must be 'onehot' or 'features'")

    def lr(self, base: float) -> float:
        if self.lr_schedule == "sqrt_batches":
            return base * math.sqrt(self.minibatch_size / max(self.num_minibatches, 1))
        return base

    def m_at(self, batch: int) -> float:
        return self.m * self.m_growth ** batch


@dataclass
class EpisodeResult:
    net_reward: float
    eligibility: dict[str, np.ndarray]
    trace: list[tuple[int, int, float]] | None = None


@dataclass
class MiniBatchStats:
    batch: int
    s0: int
    s1: int
    lam: float
    baseline: float
    returns: np.ndarray
    update_norm: dict[str, float]
    grad_norm_sq: float
    m: float
    arm: int = 0
    selected: tuple[int, ...] = ()
    weights: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class Mixture:
    """Experts combined by frozen gating weights for one context."""

    experts: tuple[DenseNetParams, ...]
    gating: GatingParams
    selection: SparseWeights
    context: np.ndarray = field(default=None)


def encode_states(arm: FiniteArm, kind: str = "onehot") -> np.ndarray:
    if kind == "onehot":
        return np.eye(arm.num_states)
    if kind == "features":
        if arm.features is None:
            raise ValueError("arm carries no state features; use onehot encoding")
        return np.asarray(arm.features, dtype=float)
    raise ValueError(f"unknown encoding {kind!r}")


# ---------------------------------------------------------------------------
# single-step environment


def env_lambda_step(arm: FiniteArm, state: int, index_value: float, cfg: EnvLambdaConfig,
                    rng: np.random.Generator) -> tuple[int, float, int]:
    """One round of Env(lambda) (hard) or Env*(lambda) (soft).

    An action uniform is drawn in both modes so the two share rng streams.
    """
    u = rng.random()
    if cfg.mode == "hard":
        action = int(index_value > cfg.lam)
    else:
        action = int(u < sigma_m(index_value - cfg.lam, cfg.m))
    reward, nxt = arm_step(arm, state, action, rng)
    return action, reward - cfg.lam * action, nxt


# ---------------------------------------------------------------------------
# lockstep rollouts


def episode_draws(seed: int, batch: int, episodes: int, horizon: int) -> np.ndarray:
    return np.stack([seed_stream(seed, batch, e).random((horizon, 3)) for e in range(episodes)]) \
        if episodes else np.zeros((0, horizon, 3))


def rollout(arm: FiniteArm, index_table: np.ndarray, s1: int, lam: float, m: float, mode: str,
            beta: float, draws: np.ndarray, record: bool = False):
    """Simulate ``len(draws)`` episodes from ``s1`` under a fixed per-state index.

    Returns discounted net returns ``(R,)``, visit counts ``(R, S, 2)`` and,
    when ``record`` is set, per-episode ``(state, action, reward)`` traces.
    """
    R, horizon = draws.shape[0], draws.shape[1]
    S = arm.num_states
    p1 = sigma_m(index_table - lam, m) if mode == "soft" else None
    s = np.full(R, int(s1))
    G = np.zeros(R)
    counts = np.zeros((R, S, 2))
    rows = np.arange(R)
    traces = [[] for _ in range(R)] if record else None
    disc = 1.0
    for t in range(horizon):
        a = draws[:, t, 0] < p1[s] if mode == "soft" else index_table[s] > lam
        r = np.where(a, arm.r_act[s], arm.r_pass[s])
        if arm.reward_noise:
            r = r + arm.reward_noise * (2.0 * draws[:, t, 2] - 1.0)
        G += disc * (r - lam * a)
        ai = a.astype(int)
        counts[rows, s, ai] += 1.0
        if record:
            for e in range(R):
                traces[e].append((int(s[e]), int(ai[e]), float(r[e])))
        cum = np.where(a[:, None], arm.cumulative(1)[s], arm.cumulative(0)[s])
        s = sample_next(cum, draws[:, t, 1])
        disc *= beta
    return G, counts, traces


def _coefficients(index_table: np.ndarray, lam: float, m: float, mode: str) -> np.ndarray:
    """Per-(state, action) derivative of the eligibility term wrt the index, shape (S, 2)."""
    sig = sigma_m(index_table - lam, m)
    if mode == "score_function":
        # d/df log pi(a|s): a=1 -> m(1-sigma), a=0 -> -m sigma
        return np.column_stack([-m * sig, m * (1.0 - sig)])
    # d/df sigma for a=1 and d/df (1 - sigma) for a=0
    d = m * sig * (1.0 - sig)
    return np.column_stack([-d, d])


def _net_tables(params: DenseNetParams, X: np.ndarray):
    return net_forward_batch(params, X), net_param_grad_batch(params, X)


def _mixture_tables(mix: Mixture, X: np.ndarray):
    f_sel, g_sel = [], []
    for i in mix.selection.indices:
        f, g = _net_tables(mix.experts[i], X)
        f_sel.append(f)
        g_sel.append(g)
    f_mix = sum(w * f for w, f in zip(mix.selection.weights, f_sel))
    return f_mix, f_sel, g_sel


def _eligibility(model, tables, counts: np.ndarray, lam: float, m: float, mode: str) -> dict[str, np.ndarray]:
    """Per-episode eligibility blocks, each of shape ``(R, ...)``."""
    if isinstance(model, DenseNetParams):
        f, grads = tables
        C = (counts * _coefficients(f, lam, m, mode)).sum(axis=-1)
        return {"theta": C @ grads}
    f_mix, f_sel, g_sel = tables
    sel = model.selection
    C_mix = (counts * _coefficients(f_mix, lam, m, mode)).sum(axis=-1)
    out = {}
    for w, i, f_i, grads_i in zip(sel.weights, sel.indices, f_sel, g_sel):
        if mode == "score_function":
            C_i = C_mix
        else:
            # per-expert sigmoid sigma_m(f_i(s) - lam), weighted by the gate
            C_i = (counts * _coefficients(f_i, lam, m, mode)).sum(axis=-1)
        out[f"expert{i}"] = w * (C_i @ grads_i)
    # d f_mix / d W_i = g_i (f_i - f_mix) x for selected i
    x = np.asarray(model.context, dtype=float)
    gate = np.zeros((counts.shape[0],) + model.gating.w_g.shape)
    for w, i, f_i in zip(sel.weights, sel.indices, f_sel):
        gate[:, i, :] = (w * (C_mix @ (f_i - f_mix)))[:, None] * x[None, :]
    out["gating"] = gate
    return out


def _tables(model, X):
    return _net_tables(model, X) if isinstance(model, DenseNetParams) else _mixture_tables(model, X)


def run_soft_episode(arm: FiniteArm, model, s1: int, cfg: EnvLambdaConfig, horizon: int, beta: float,
                     rng: np.random.Generator, eligibility_mode: str = "score_function",
                     encoding: np.ndarray | None = None, record_trace: bool = False) -> EpisodeResult:
    """Roll one episode of Env*(lambda) (or Env(lambda) when ``cfg.mode == "hard"``).

    ``model`` is a single network (NeurWIN) or a :class:`Mixture` (ContextWIN).
    ``G_e = sum_t beta^t (r_t - lam a_t)``; the eligibility is the score
    function ``sum_t grad log pi(a_t|s_t)`` or, in ``paper_literal`` mode, the plain
    sigmoid gradients (sum of grad sigma for a=1, minus it for a=0).
    """
    X = encode_states(arm) if encoding is None else encoding
    draws = rng.random((horizon, 3))[None]
    tables = _tables(model, X)
    f = tables[0]
    G, counts, traces = rollout(arm, f, s1, cfg.lam, cfg.m, cfg.mode, beta, draws, record_trace)
    elig = _eligibility(model, tables, counts, cfg.lam, cfg.m, eligibility_mode)
    return EpisodeResult(float(G[0]), {k: v[0] for k, v in elig.items()}, traces[0] if record_trace else None)


def moe_index(experts, gating: GatingParams, context, state_encoding, rng=None, noise_enabled: bool = False) -> float:
    sel = gating_weights(gating, context, rng, noise_enabled)
    x = np.asarray(state_encoding, dtype=float)[None]
    return float(sum(w * net_forward_batch(experts[i], x)[0] for i, w in zip(sel.indices, sel.weights)))


# ---------------------------------------------------------------------------
# mini-batch updates


def _baseline(G: np.ndarray, kind: str) -> np.ndarray:
    R = G.size
    if kind == "batch_mean":
        return np.full(R, G.mean())
    if kind == "leave_one_out":
        return (G.sum() - G) / (R - 1) if R > 1 else np.zeros(R)
    return np.zeros(R)


def _update_direction(G: np.ndarray, elig: np.ndarray, base: np.ndarray) -> np.ndarray:
    R = G.size
    adv = G - base
    return np.tensordot(adv, elig, axes=(0, 0)) / R


def _pick_states(cfg: TrainConfig, batch: int, num_states: int) -> tuple[int, int]:
    s0, s1 = seed_stream(cfg.seed, batch, 0, BATCH).integers(num_states, size=2)
    return int(s0), int(s1)


def _check_finite(blocks: dict[str, np.ndarray], dump: dict) -> None:
    for k, v in blocks.items():
        if not np.all(np.isfinite(v)):
            raise TrainingDiverged(f"non-finite update in block {k!r} at batch {dump.get('batch')}", dump)


def neurwin_minibatch(arm: FiniteArm, theta: DenseNetParams, cfg: TrainConfig, batch: int,
                      encoding: np.ndarray | None = None, return_direction: bool = False,
                      states: tuple[int, int] | None = None):
    """One NeurWIN mini-batch: subsidy from ``f(s0)``, ``R`` episodes from ``s1``.

    Applies ``theta += (L/R) sum_e (G_e - baseline_e) h_e``. ``states`` pins
    ``(s0, s1)`` instead of drawing them, for conditional-variance diagnostics.
    """
    X = encode_states(arm, cfg.encoding) if encoding is None else encoding
    s0, s1 = _pick_states(cfg, batch, arm.num_states) if states is None else (int(states[0]), int(states[1]))
    m = cfg.m_at(batch)
    tables = _net_tables(theta, X)
    lam = float(tables[0][s0])
    draws = episode_draws(cfg.seed, batch, cfg.minibatch_size, cfg.horizon)
    G, counts, _ = rollout(arm, tables[0], s1, lam, m, "soft", cfg.beta, draws)
    elig = _eligibility(theta, tables, counts, lam, m, cfg.eligibility_mode)["theta"]
    base = _baseline(G, cfg.baseline)
    direction = _update_direction(G, elig, base)
    dump = {"batch": batch, "s0": s0, "s1": s1, "lam": lam, "returns": G, "theta": theta.flat}
    _check_finite({"theta": direction}, dump)
    step = cfg.lr(cfg.expert_lr) * direction
    new_theta = theta.with_flat(theta.flat + step)
    stats = MiniBatchStats(batch, s0, s1, lam, float(G.mean()), G, {"theta": float(np.linalg.norm(step))},
                           float(direction @ direction), m)
    if return_direction:
        return new_theta, stats, direction
    return new_theta, stats


def default_network(cfg: TrainConfig, input_dim: int, index: int = 0) -> DenseNetParams:
    rng = seed_stream(cfg.seed, index, 0, INIT)
    return init_dense((input_dim,) + tuple(cfg.hidden) + (1,), rng, cfg.activation, cfg.init_scale)


def train_neurwin(arm: FiniteArm, cfg: TrainConfig, theta0: DenseNetParams | None = None,
                  encoding: np.ndarray | None = None, callback=None):
    X = encode_states(arm, cfg.encoding) if encoding is None else encoding
    theta = default_network(cfg, X.shape[1]) if theta0 is None else theta0
    metrics = []
    for b in range(cfg.num_minibatches):
        theta, stats = neurwin_minibatch(arm, theta, cfg, b, X)
        metrics.append(stats)
        if callback is not None:
            callback(b, theta, stats)
    return theta, metrics


def contextwin_minibatch(arm: FiniteArm, context, experts, gating: GatingParams, cfg: TrainConfig, batch: int,
                         encoding: np.ndarray | None = None, arm_id: int = 0, return_direction: bool = False):
    """One ContextWIN mini-batch.

    The gating noise is drawn once per mini-batch from its own stream, so the
    top-K set and weights are fixed for all ``R`` episodes. The subsidy is the
    mixed index at ``s0``. Unselected experts are left untouched.
    """
    experts = tuple(experts)
    if gating.num_experts != len(experts):
        raise ValueError("gating expects a different number of experts")
    X = encode_states(arm, cfg.encoding) if encoding is None else encoding
    s0, s1 = _pick_states(cfg, batch, arm.num_states)
    m = cfg.m_at(batch)
    noise = gating_noise(gating, seed_stream(cfg.seed, batch, 0, GATING)) if cfg.gating_noise else None
    sel = gating_weights(gating, context, noise_enabled=cfg.gating_noise, noise=noise)
    mix = Mixture(experts, gating, sel, np.asarray(context, dtype=float))
    tables = _mixture_tables(mix, X)
    lam = float(tables[0][s0])
    draws = episode_draws(cfg.seed, batch, cfg.minibatch_size, cfg.horizon)
    G, counts, _ = rollout(arm, tables[0], s1, lam, m, "soft", cfg.beta, draws)
    elig = _eligibility(mix, tables, counts, lam, m, cfg.eligibility_mode)
    base = _baseline(G, cfg.baseline)
    directions = {k: _update_direction(G, v, base) for k, v in elig.items()}
    if cfg.gating_frozen:
        directions["gating"] = np.zeros_like(gating.w_g)
    dump = {"batch": batch, "s0": s0, "s1": s1, "lam": lam, "returns": G, "selected": sel.indices}
    _check_finite(directions, dump)
    lr = cfg.lr(cfg.expert_lr)
    new_experts = list(experts)
    norms = {}
    for i in sel.indices:
        step = lr * directions[f"expert{i}"]
        new_experts[i] = experts[i].with_flat(experts[i].flat + step)
        norms[f"expert{i}"] = float(np.linalg.norm(step))
    gate_step = cfg.lr(cfg.gating_lr) * directions["gating"]
    new_gating = gating if cfg.gating_frozen else GatingParams(gating.w_g + gate_step, gating.top_k,
                                                                gating.noise_variance)
    norms["gating"] = float(np.linalg.norm(gate_step))
    grad_sq = float(sum(np.sum(d * d) for d in directions.values()))
    stats = MiniBatchStats(batch, s0, s1, lam, float(G.mean()), G, norms, grad_sq, m, arm_id,
                           sel.indices, tuple(float(w) for w in sel.weights))
    if return_direction:
        return new_experts, new_gating, stats, directions
    return new_experts, new_gating, stats


def train_contextwin(arms, experts, gating: GatingParams, cfg: TrainConfig, encodings=None, callback=None):
    """Cycle mini-batches over ``arms`` (a list of ``ContextualArm``) sharing one expert pool.

    Returns trained experts and gating, per-batch stats and per-arm selection
    histograms ``(num_arms, num_experts)`` counting top-K membership and top-1 picks.
    """
    arms = list(arms)
    for a in arms:
        if a.context.size != gating.context_dim:
            raise ValueError("all contexts must have the gating network's dimension")
    if encodings is None:
        encodings = [encode_states(a.dynamics, cfg.encoding) for a in arms]
    experts = list(experts)
    M = gating.num_experts
    selected = np.zeros((len(arms), M), dtype=int)
    top1 = np.zeros((len(arms), M), dtype=int)
    metrics = []
    for b in range(cfg.num_minibatches):
        i = b % len(arms)
        experts, gating, stats = contextwin_minibatch(arms[i].dynamics, arms[i].context, experts, gating, cfg, b,
                                                      encodings[i], arm_id=i)
        selected[i, list(stats.selected)] += 1
        top1[i, stats.selected[0]] += 1
        metrics.append(stats)
        if callback is not None:
            callback(b, experts, gating, stats)
    return experts, gating, metrics, {"selected": selected, "top1": top1}
