"""Experiment kinds, CSV writing and the atomic output directory.

Every kind is a function ``(config, seed, log) -> ExperimentResult``. CSV
bodies depend only on config and seed; wall-clock measurements go to
``manifest.json`` so reruns produce byte-identical CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import shutil
import tempfile
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy
from scipy import stats

from .. import __version__
from ..envs import BanditInstance, FiniteArm, homogeneous_bandit
from ..nets import init_dense, init_gating, load_checkpoint, net_forward_batch, save_checkpoint
from ..oracle import active_set_table, check_strong_indexability, threshold_curve, whittle_table
from ..policy import (baseline_policies, evaluate_policy, learned_index_policy, oracle_whittle_policy)
from ..training import TrainConfig, default_network, encode_states, neurwin_minibatch, train_contextwin
from .config import ArmSpec, BanditSpec, ExperimentConfig, build_bandit
from .gradient_check import GRADIENT_TEST_ARM, expected_fd_gradient
from .seeding import INIT, seed_stream

DEFAULT_BANDIT = BanditSpec(
    budget=2, discount=0.95,
    arms=(ArmSpec("standard", (1.0,), 0.0, "belief",
                  {"p01_pass": 0.2, "p11_pass": 0.9, "p01_act": 0.2, "p11_act": 0.9,
                   "chain_length": 10, "observe": "current"}, count=10),),
)


@dataclass
class Table:
    header: tuple[str, ...]
    rows: list = field(default_factory=list)


@dataclass
class ExperimentResult:
    tables: dict[str, Table] = field(default_factory=dict)
    checkpoints: dict[str, tuple] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (tuple, list, np.ndarray)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def csv_text(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.header)
    for row in table.rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _bandit(cfg: ExperimentConfig) -> tuple[BanditSpec, BanditInstance]:
    spec = cfg.bandit or DEFAULT_BANDIT
    return spec, build_bandit(spec)


def _groups(spec: BanditSpec, instance: BanditInstance):
    """Arm spec entries with the slice of instance arms they expanded into."""
    out, start = [], 0
    for a in spec.arms:
        out.append((a, instance.arms[start:start + a.count]))
        start += a.count
    return out


# ---------------------------------------------------------------------------
# oracle kinds


def run_oracle_dump(cfg: ExperimentConfig, seed: int, log) -> ExperimentResult:
    spec, inst = _bandit(cfg)
    o = cfg.oracle
    whittle = Table(("arm", "state", "W", "indexable", "strong"))
    member = Table(("arm", "lambda", "state", "active"))
    summary = {}
    for a, arms in _groups(spec, inst):
        d = arms[0].dynamics
        wt = whittle_table(d, spec.discount, o.bisect_tol, o.vi_tol)
        rep = check_strong_indexability(d, o.grid, spec.discount, o.strong_tol, o.vi_tol, o.bisect_tol, wt)
        for s, w in enumerate(wt.w):
            whittle.rows.append((a.name, s, w, rep.indexable, bool(rep.strong)))
        table, _ = active_set_table(d, o.grid, spec.discount, o.vi_tol)
        for k, lam in enumerate(table.lambdas):
            for s in range(d.num_states):
                member.rows.append((a.name, lam, s, bool(table.membership[k, s])))
        summary[a.name] = {"indexable": rep.indexable, "strong": bool(rep.strong), "states": d.num_states}
        log(f"{a.name}: {d.num_states} states, indexable={rep.indexable} strong={rep.strong}")
    return ExperimentResult({"whittle.csv": whittle, "membership.csv": member}, summary=summary)


def run_check_indexability(cfg: ExperimentConfig, seed: int, log) -> ExperimentResult:
    spec, inst = _bandit(cfg)
    o = cfg.oracle
    reports = Table(("arm", "indexable", "strong", "limits_ok", "threshold_monotone", "violations",
                     "strong_violations", "lambda_min", "lambda_max", "grid_points", "grid_resolution"))
    viol = Table(("arm", "kind", "state", "other_state", "lambda_lo", "lambda_hi"))
    all_ok = True
    for a, arms in _groups(spec, inst):
        d = arms[0].dynamics
        rep = check_strong_indexability(d, o.grid, spec.discount, o.strong_tol, o.vi_tol, o.bisect_tol)
        curve = threshold_curve(d, o.grid, spec.discount, o.vi_tol) if d.beliefs is not None else None
        mono = curve.monotone if curve is not None else ""
        reports.rows.append((a.name, rep.indexable, bool(rep.strong), rep.limits_ok, mono, len(rep.violations),
                             len(rep.strong_violations), rep.lambda_min, rep.lambda_max, rep.grid_points,
                             rep.grid_resolution))
        for s, lo, hi in rep.violations:
            viol.rows.append((a.name, "reentry", s, "", lo, hi))
        for (s, s2), lam in rep.strong_violations:
            viol.rows.append((a.name, "advantage_order", s, s2, lam, lam))
        all_ok &= bool(rep.indexable)
        log(f"{a.name}: indexable={rep.indexable} strong={rep.strong}")
    return ExperimentResult({"indexability.csv": reports, "violations.csv": viol}, summary={"all_indexable": all_ok})


# ---------------------------------------------------------------------------
# training kinds


def _train_cfg(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return replace(cfg.train, seed=seed)


def _index_comparison(arm: FiniteArm, learned: np.ndarray, beta: float, tol: float):
    w = whittle_table(arm, beta, tol).w
    table = Table(("state", "learned_index", "whittle_index"))
    table.rows = [(s, learned[s], w[s]) for s in range(arm.num_states)]
    rho = float(stats.spearmanr(learned, w).statistic)
    return table, rho


def _train_neurwin(cfg: ExperimentConfig, seed: int, log, result: ExperimentResult):
    spec, inst = _bandit(cfg)
    tc = _train_cfg(cfg, seed)
    arm = inst.arms[cfg.train_arm].dynamics
    X = encode_states(arm, tc.encoding)
    theta = default_network(tc, X.shape[1])
    metrics = Table(("batch", "s0", "s1", "lambda", "mean_return", "update_norm", "grad_norm_sq", "m"))
    wall = []
    for b in range(tc.num_minibatches):
        t0 = time.perf_counter()
        theta, st = neurwin_minibatch(arm, theta, tc, b, X)
        wall.append(time.perf_counter() - t0)
        metrics.rows.append((b, st.s0, st.s1, st.lam, st.baseline, st.update_norm["theta"], st.grad_norm_sq, st.m))
        if cfg.checkpoint_every and (b + 1) % cfg.checkpoint_every == 0:
            result.checkpoints[f"checkpoints/neurwin_b{b + 1:06d}.npz"] = ([theta], None)
        if (b + 1) % max(1, tc.num_minibatches // 10) == 0:
            log(f"batch {b + 1}/{tc.num_minibatches} grad_norm_sq={st.grad_norm_sq:.4g}")
    result.checkpoints["neurwin.npz"] = ([theta], None)
    result.tables["metrics.csv"] = metrics
    learned = net_forward_batch(theta, X)
    table, rho = _index_comparison(arm, learned, tc.beta, cfg.oracle.bisect_tol)
    result.tables["indices.csv"] = table
    result.summary["spearman"] = rho
    # the convergence analysis assumes a smooth index network
    result.summary["activation_smooth"] = tc.activation != "relu"
    result.timing["batch_wall_s"] = wall
    return arm, theta, metrics


def run_train_neurwin(cfg: ExperimentConfig, seed: int, log) -> ExperimentResult:
    result = ExperimentResult()
    _train_neurwin(cfg, seed, log, result)
    return result


def convergence_fit(grad_norm_sq) -> dict:
    """Running average, ``c/sqrt(b)`` least-squares fit and a Mann-Kendall trend test."""
    g = np.asarray(grad_norm_sq, dtype=float)
    b = np.arange(1, g.size + 1, dtype=float)
    ra = np.cumsum(g) / b
    c = float(np.sum(ra / np.sqrt(b)) / np.sum(1.0 / b))
    # Mann-Kendall on a series is Kendall's tau against time
    mk = stats.kendalltau(b, ra)
    return {"running_avg": ra, "c": c, "fit": c / np.sqrt(b), "mk_tau": float(mk.statistic),
            "mk_p": float(mk.pvalue)}


def run_theorem3_curve(cfg: ExperimentConfig, seed: int, log) -> ExperimentResult:
    result = ExperimentResult()
    arm, theta, metrics = _train_neurwin(cfg, seed, log, result)
    g = [row[6] for row in metrics.rows]
    fit = convergence_fit(g)
    N, K = cfg.theorem3.reference_arms, cfg.theorem3.reference_budget
    curve = Table(("batch", "grad_norm_sq", "running_avg", "fit", "reference_n_over_k"))
    for i, (gi, ra, fi) in enumerate(zip(g, fit["running_avg"], fit["fit"])):
        curve.rows.append((i + 1, gi, ra, fi, fi * N / K))
    result.tables["theorem3.csv"] = curve
    decreasing = fit["mk_tau"] < 0 and fit["mk_p"] < 0.05
    result.summary.update(c=fit["c"], mk_tau=fit["mk_tau"], mk_p=fit["mk_p"], trend_decreasing=bool(decreasing))
    # learned hard-index policy against the oracle on a homogeneous reference bandit
    tc = _train_cfg(cfg, seed)
    inst = homogeneous_bandit(arm, N, K, tc.beta)
    ev = cfg.evaluate
    oracle = evaluate_policy(inst, oracle_whittle_policy(inst), ev.horizon, ev.episodes, seed,
                             ev.accrue_passive, keep_per_episode=True)
    learned = evaluate_policy(inst, learned_index_policy(theta, None, inst, encoding=tc.encoding), ev.horizon,
                              ev.episodes, seed, ev.accrue_passive, keep_per_episode=True)
    table = Table(("policy", "mean", "stderr", "episodes", "horizon", "seed"))
    for name, r in (("oracle", oracle), ("learned", learned)):
        table.rows.append((name, r.mean_discounted_reward, r.std_error, r.episodes, r.horizon, seed))
    result.tables["evaluation.csv"] = table
    result.summary.update(ratio_check(learned.per_episode, oracle.per_episode, 0.90))
    log(f"c={fit['c']:.4g} mk_p={fit['mk_p']:.3g} spearman={result.summary['spearman']:.3f}")
    return result


def ratio_check(learned: np.ndarray, oracle: np.ndarray, fraction: float, z: float = 3.0) -> dict:
    """Paired test of ``mean(learned) >= fraction * mean(oracle)`` at ``z`` standard errors.

    Episodes share random numbers across policies, so the per-episode
    difference ``learned - fraction*oracle`` carries the comparison.
    """
    d = np.asarray(learned) - fraction * np.asarray(oracle)
    se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
    ratio = float(np.mean(learned) / np.mean(oracle))
    return {"ratio": ratio, "ratio_target": fraction, "ratio_margin": float(d.mean()), "ratio_margin_se": se,
            "ratio_ok": bool(d.mean() + z * se >= 0.0)}


def run_train_contextwin(cfg: ExperimentConfig, seed: int, log) -> ExperimentResult:
    spec, inst = _bandit(cfg)
    tc = _train_cfg(cfg, seed)
    cw = cfg.contextwin
    arms = list(inst.arms)
    encs = [encode_states(a.dynamics, tc.encoding) for a in arms]
    experts = [default_network(tc, encs[0].shape[1], i) for i in range(cw.num_experts)]
    gating = init_gating(cw.num_experts, inst.context_dim, cw.top_k, seed_stream(seed, 0, 1, INIT),
                         cw.gating_scale, cw.noise_variance)
    metrics = Table(("batch", "arm", "s0", "s1", "lambda", "mean_return", "selected", "weights",
                     "expert_update_norm", "gating_update_norm", "grad_norm_sq"))
    wall = []
    result = ExperimentResult()
    last = [time.perf_counter()]

    def callback(b, ex, gt, st):
        now = time.perf_counter()
        wall.append(now - last[0])
        last[0] = now
        ex_norm = float(np.sqrt(sum(v * v for k, v in st.update_norm.items() if k != "gating")))
        metrics.rows.append((b, st.arm, st.s0, st.s1, st.lam, st.baseline, st.selected, st.weights, ex_norm,
                             st.update_norm["gating"], st.grad_norm_sq))
        if cfg.checkpoint_every and (b + 1) % cfg.checkpoint_every == 0:
            result.checkpoints[f"checkpoints/contextwin_b{b + 1:06d}.npz"] = (list(ex), gt)
        if (b + 1) % max(1, tc.num_minibatches // 10) == 0:
            log(f"batch {b + 1}/{tc.num_minibatches}")

    experts, gating, _, hist = train_contextwin(arms, experts, gating, tc, encs, callback)
    result.checkpoints["contextwin.npz"] = (experts, gating)
    result.tables["metrics.csv"] = metrics
    sel = Table(("arm", "expert", "selected", "top1"))
    for i in range(len(arms)):
        for j in range(cw.num_experts):
            sel.rows.append((arms[i].name, j, hist["selected"][i, j], hist["top1"][i, j]))
    result.tables["selection.csv"] = sel
    # per-group evaluation against that group's oracle
    ev = cfg.evaluate
    table = Table(("group", "policy", "mean", "stderr", "episodes", "horizon", "seed"))
    groups = {}
    start = 0
    for a, members in _groups(spec, inst):
        idx = range(start, start + a.count)
        start += a.count
        top1 = hist["top1"][list(idx)].sum(axis=0)
        sub = BanditInstance(tuple(members), min(spec.budget, len(members)), spec.discount)
        o = evaluate_policy(sub, oracle_whittle_policy(sub), ev.horizon, ev.episodes, seed, ev.accrue_passive, True)
        lp = evaluate_policy(sub, learned_index_policy(experts, gating, sub, encoding=tc.encoding), ev.horizon,
                             ev.episodes, seed, ev.accrue_passive, True)
        for name, r in (("oracle", o), ("learned", lp)):
            table.rows.append((a.name, name, r.mean_discounted_reward, r.std_error, r.episodes, r.horizon, seed))
        groups[a.name] = {"majority_expert": int(np.argmax(top1)), "top1": top1.tolist(),
                          **ratio_check(lp.per_episode, o.per_episode, 0.85)}
    result.tables["evaluation.csv"] = table
    result.summary["groups"] = groups
    result.summary["activation_smooth"] = tc.activation != "relu"
    result.timing["batch_wall_s"] = wall
    return result


# ---------------------------------------------------------------------------
# evaluation


def run_evaluate(cfg: ExperimentConfig, seed: int, log) -> ExperimentResult:
    spec, inst = _bandit(cfg)
    ev = cfg.evaluate
    base = baseline_policies(inst, seed)
    table = Table(("policy", "mean", "stderr", "episodes", "horizon", "seed"))
    per = Table(("policy", "episode", "return"))
    for name in ev.policies:
        if name == "oracle":
            pol = oracle_whittle_policy(inst, cfg.oracle.grid)
        elif name in base:
            pol = base[name]
        elif name == "learned":
            if ev.checkpoint is None:
                raise ValueError("evaluate.checkpoint is required for the learned policy")
            experts, gating = load_checkpoint(ev.checkpoint)
            pol = learned_index_policy(experts if gating is not None else experts[0], gating, inst,
                                       encoding=ev.encoding)
        else:
            raise ValueError(f"unknown policy {name!r}")
        r = evaluate_policy(inst, pol, ev.horizon, ev.episodes, seed, ev.accrue_passive, keep_per_episode=True)
        table.rows.append((name, r.mean_discounted_reward, r.std_error, r.episodes, r.horizon, seed))
        if ev.per_episode:
            per.rows.extend((name, e, g) for e, g in enumerate(r.per_episode))
        log(f"{name}: {r.mean_discounted_reward:.4f} +- {r.std_error:.4f}")
    tables = {"evaluation.csv": table}
    if ev.per_episode:
        tables["per_episode.csv"] = per
    return ExperimentResult(tables)


# ---------------------------------------------------------------------------
# estimator diagnostics


def _diagnostic_arm(cfg: ExperimentConfig) -> FiniteArm:
    if cfg.bandit is None:
        return GRADIENT_TEST_ARM
    return build_bandit(cfg.bandit).arms[cfg.train_arm].dynamics


def _diagnostic_setup(cfg: ExperimentConfig, seed: int):
    l2 = cfg.lemma2
    arm = _diagnostic_arm(cfg)
    X = np.eye(arm.num_states)
    theta = init_dense((arm.num_states,) + tuple(l2.hidden) + (1,), seed_stream(seed, 0, 0, INIT), "tanh",
                       l2.init_scale)
    tc = TrainConfig(minibatch_size=l2.minibatch_size, horizon=l2.horizon, beta=l2.beta, m=l2.m,
                     baseline=l2.baseline, seed=seed, encoding="onehot")
    return arm, X, theta, tc


def run_lemma2_test(cfg: ExperimentConfig, seed: int, log) -> ExperimentResult:
    """Monte Carlo mean of the update direction against finite-difference gradients."""
    l2 = cfg.lemma2
    arm, X, theta, tc = _diagnostic_setup(cfg, seed)
    R = tc.minibatch_size
    nb = -(-l2.episodes // R)
    D = np.array([neurwin_minibatch(arm, theta, tc, b, X, return_direction=True)[2] for b in range(nb)])
    mean = D.mean(axis=0)
    se = D.std(axis=0, ddof=1) / np.sqrt(nb)
    log(f"{nb} mini-batches of {R}; finite differences with {l2.fd_rollouts} rollouts")
    fd = expected_fd_gradient(arm, theta, X, l2.m, l2.beta, l2.horizon, l2.fd_rollouts, l2.fd_delta, seed)
    z = (mean - fd.grad) / np.sqrt(se ** 2 + fd.stderr ** 2)
    table = Table(("coord", "update_mean", "update_se", "fd_grad", "fd_se", "z"))
    table.rows = [(j, mean[j], se[j], fd.grad[j], fd.stderr[j], z[j]) for j in range(mean.size)]
    summary = {"num_params": int(mean.size), "minibatch_size": R, "minibatches": nb, "episodes": nb * R,
               "fd_rollouts": l2.fd_rollouts, "baseline": tc.baseline, "max_abs_z": float(np.abs(z).max()),
               "within_3se": bool(np.all(np.abs(z) <= 3.0)),
               "median_ratio": float(np.median(mean / fd.grad))}
    return ExperimentResult({"lemma2.csv": table}, summary=summary)


def variance_slope(sizes, variances) -> dict:
    sizes = np.asarray(sizes, dtype=float)
    v = np.asarray(variances, dtype=float)
    ok = v > 0
    out = {"zero_variance_sizes": sizes[~ok].astype(int).tolist()}
    out["slope"] = float(np.polyfit(np.log(sizes), np.log(v), 1)[0]) if ok.all() else float("nan")
    out["slope_positive_only"] = float(np.polyfit(np.log(sizes[ok]), np.log(v[ok]), 1)[0]) \
        if ok.sum() >= 2 else float("nan")
    return out


def run_lemma3_sweep(cfg: ExperimentConfig, seed: int, log) -> ExperimentResult:
    """Total variance of the update direction across mini-batches, per mini-batch size."""
    l3 = cfg.lemma3
    arm, X, theta, tc = _diagnostic_setup(cfg, seed)
    tc = replace(tc, baseline=l3.baseline)
    states = tuple(l3.fixed_states) if l3.fixed_states is not None else None
    table = Table(("R", "variance"))
    variances = []
    for k, R in enumerate(l3.sizes):
        c = replace(tc, minibatch_size=int(R))
        # batch ids are offset per size so no two sizes share episode streams
        D = np.array([neurwin_minibatch(arm, theta, c, k * l3.minibatches + b, X, return_direction=True,
                                        states=states)[2] for b in range(l3.minibatches)])
        v = float(D.var(axis=0, ddof=1).sum())
        variances.append(v)
        table.rows.append((int(R), v))
        log(f"R={R}: variance={v:.4g}")
    summary = {"baseline": l3.baseline, "fixed_states": list(states) if states else None,
               **variance_slope(l3.sizes, variances)}
    summary["slope_within_tolerance"] = bool(abs(summary["slope"] + 1.0) <= 0.15)
    return ExperimentResult({"lemma3.csv": table}, summary=summary)


KINDS = {
    "oracle-dump": run_oracle_dump,
    "check-indexability": run_check_indexability,
    "train-neurwin": run_train_neurwin,
    "train-contextwin": run_train_contextwin,
    "evaluate": run_evaluate,
    "lemma2-test": run_lemma2_test,
    "lemma3-sweep": run_lemma3_sweep,
    "theorem3-curve": run_theorem3_curve,
}


# ---------------------------------------------------------------------------
# atomic output


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    return obj


def run_experiment(kind: str, cfg: ExperimentConfig, out_dir, seed: int = 0, threads: int = 1,
                   log=None, config_path: str | None = None) -> dict:
    """Run one experiment and publish its outputs into ``out_dir`` atomically.

    Files are assembled in a sibling temporary directory which replaces
    ``out_dir`` only after everything, including ``manifest.json``, is written.
    On failure the temporary directory is removed and ``out_dir`` is untouched.
    """
    if kind not in KINDS:
        raise KeyError(f"unknown experiment kind {kind!r}; expected one of {sorted(KINDS)}")
    log = log or (lambda msg: None)
    out_dir = Path(out_dir).resolve()
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", suffix=".tmp", dir=out_dir.parent))
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    try:
        result = KINDS[kind](cfg, seed, log)
        files = {}
        for name, table in result.tables.items():
            text = csv_text(table)
            (tmp / name).write_text(text)
            files[name] = hashlib.sha256(text.encode()).hexdigest()
        for name, (experts, gating) in result.checkpoints.items():
            path = tmp / name
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path, experts, gating)
            files[name] = hashlib.sha256(path.read_bytes()).hexdigest()
        manifest = {
            "kind": kind,
            "config_hash": cfg.semantic_hash(),
            "config_path": config_path,
            "seed": seed,
            "threads": threads,
            "versions": {"contextwin": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "started_at": started.isoformat(),
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "wall_time_s": time.perf_counter() - t0,
            "files": files,
            "summary": result.summary,
            "timing": result.timing,
        }
        (tmp / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
        if out_dir.exists():
            old = out_dir.with_name(f".{out_dir.name}.old-{os.getpid()}")
            out_dir.rename(old)
            tmp.rename(out_dir)
            shutil.rmtree(old, ignore_errors=True)
        else:
            tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest
