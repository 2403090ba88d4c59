"""Acceptance suite: one test per criterion, each recorded for the terminal summary.

Every criterion runs at its stated tolerance. Criteria that do not hold are
left failing; the accompanying ``Supplementary`` tests pin down why.
Run with ``pytest tests/test_acceptance.py -v``; the summary lists one
``criterion N: PASS/FAIL`` line per criterion.
"""

import csv
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from contextwin.envs import (BanditInstance, ContextualArm, FiniteArm, TwoStatePartialArm, build_belief_mdp,
                             homogeneous_bandit, random_partial_arm, standard_arm)
from contextwin.harness.config import load_config
from contextwin.harness.experiments import _diagnostic_setup, run_experiment
from contextwin.nets import (GatingParams, gating_param_grad, gating_weights, init_dense, net_forward,
                             net_forward_batch, net_param_grad)
from contextwin.oracle import check_strong_indexability, whittle_table
from contextwin.policy import oracle_whittle_policy
from contextwin.training import (TrainConfig, default_network, encode_states, neurwin_minibatch, train_contextwin,
                                 train_neurwin)
from oracles import JointMDP, exact_soft_return, grid_whittle

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# (kind, config file) for every experiment the criteria use
EXPERIMENTS = {
    "indexability": ("check-indexability", "random_family.yaml"),
    "lemma2": ("lemma2-test", "lemma2.yaml"),
    "lemma3": ("lemma3-sweep", "lemma3.yaml"),
    "theorem3": ("theorem3-curve", "theorem3.yaml"),
    "clusters": ("train-contextwin", "contextwin_clusters.yaml"),
    "oracle": ("oracle-dump", "standard.yaml"),
    "evaluate": ("evaluate", "standard.yaml"),
}


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    """Lazily run each experiment once (seed 0) and keep its output directory."""
    base = tmp_path_factory.mktemp("runs")
    cache = {}

    def get(name):
        if name not in cache:
            kind, cfg_file = EXPERIMENTS[name]
            t0 = time.perf_counter()
            man = run_experiment(kind, load_config(CONFIGS / cfg_file), base / name / "a", seed=0)
            cache[name] = (base / name / "a", man, time.perf_counter() - t0)
        return cache[name]

    get.base = base
    return get


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# ---------------------------------------------------------------------------


class TestOracleCriteria:
    def test_c01_indexability_certification(self, runs):
        out, man, wall = runs("indexability")
        rows = read_csv(out / "indexability.csv")
        mono = sum(int(r["violations"]) for r in rows)
        strong_bad = [r["arm"] for r in rows if r["strong"] != "true"]
        ok = len(rows) == 20 and mono == 0 and not strong_bad and wall < 120
        record("1", ok, f"{len(rows)} arms at T=20: {mono} monotonicity violations, strong-indexability "
                        f"failures on {strong_bad or 'none'}; {wall:.1f}s")
        assert ok

    def test_c02_threshold_monotone(self, runs):
        out, _, _ = runs("indexability")
        rows = read_csv(out / "indexability.csv")
        bad = [r["arm"] for r in rows if r["threshold_monotone"] != "true"]
        record("2", not bad, f"threshold curve non-decreasing on {len(rows) - len(bad)}/{len(rows)} arms")
        assert not bad

    def test_c03_oracle_correctness(self):
        rng = np.random.default_rng(3)
        P = rng.dirichlet(np.ones(4), 4)
        r = rng.uniform(size=4)
        sym = whittle_table(FiniteArm(P, P, r, r), 0.9).w
        bonus = whittle_table(FiniteArm(P, P, r + 0.3, r), 0.9).w
        arm = standard_arm()
        w = whittle_table(arm, 0.95).w
        grid, _ = grid_whittle(arm, 0.95, -4.0, 0.5, 1e-4)
        errs = (np.abs(sym).max(), np.abs(bonus - 0.3).max(), np.abs(w - grid).max())
        ok = errs[0] <= 1e-6 and errs[1] <= 1e-5 and errs[2] <= 2e-4
        record("3", ok, f"symmetric max|W|={errs[0]:.2e}, bonus max|W-0.3|={errs[1]:.2e}, "
                        f"bisection vs 1e-4 grid max diff={errs[2]:.2e}")
        assert ok

    def test_c04_brute_force_optimality(self):
        t0 = time.perf_counter()
        arm = standard_arm(4)
        joint = JointMDP([arm] * 3, 1, 0.9)
        assert len(joint.states) <= 1000
        tables = oracle_whittle_policy(homogeneous_bandit(arm, 3, 1, 0.9)).tables
        v_idx, v_opt = joint.index_policy_values(tables), joint.optimal_values()
        # uniform initial state distribution
        ratio = v_idx.mean() / v_opt.mean()
        wall = time.perf_counter() - t0
        ok = ratio >= 0.98 and wall < 300
        record("4", ok, f"N=3 K=1 T=4: Whittle/optimal = {ratio:.5f} (uniform start), worst start state "
                        f"{(v_idx / v_opt).min():.4f}; {wall:.1f}s")
        assert ok


class TestLearningCriteria:
    def test_c05_gradient_correctness(self):
        rng = np.random.default_rng(5)
        worst_net = worst_gate = 0.0
        for _ in range(100):
            dims = (int(rng.integers(1, 5)),) + tuple(int(d) for d in rng.integers(1, 7, rng.integers(0, 3))) + (1,)
            act = ["tanh", "sigmoid", "softplus"][rng.integers(3)]
            p = init_dense(dims, rng, act)
            x = rng.normal(size=dims[0])
            g = net_param_grad(p, x)
            fd = np.empty_like(g)
            for j in range(g.size):
                up, dn = p.flat.copy(), p.flat.copy()
                up[j] += 1e-6
                dn[j] -= 1e-6
                fd[j] = (net_forward(p.with_flat(up), x) - net_forward(p.with_flat(dn), x)) / 2e-6
            worst_net = max(worst_net, rel_err(g, fd))
        for _ in range(100):
            M, d = int(rng.integers(2, 7)), int(rng.integers(1, 5))
            gp = GatingParams(rng.normal(size=(M, d)), int(rng.integers(1, M + 1)))
            x = rng.normal(size=d)
            sel = gating_weights(gp, x, noise_enabled=False)
            jac = gating_param_grad(gp, x, sel)
            fd = np.zeros_like(jac)
            for i in range(M):
                for k in range(d):
                    up, dn = gp.w_g.copy(), gp.w_g.copy()
                    up[i, k] += 1e-6
                    dn[i, k] -= 1e-6
                    su = gating_weights(GatingParams(up, gp.top_k), x, noise_enabled=False)
                    sd = gating_weights(GatingParams(dn, gp.top_k), x, noise_enabled=False)
                    assert su.indices == sel.indices == sd.indices
                    fd[:, i, k] = (su.weights - sd.weights) / 2e-6
            worst_gate = max(worst_gate, rel_err(jac, fd))
        ok = worst_net < 1e-5 and worst_gate < 1e-5
        record("5", ok, f"max relative error over 100 draws: network {worst_net:.2e}, gating {worst_gate:.2e}")
        assert ok

    def test_c06_update_unbiased(self, runs):
        out, man, wall = runs("lemma2")
        s = man["summary"]
        ok = s["within_3se"] and s["episodes"] >= 100_000 and s["fd_rollouts"] >= 1_000_000 and wall < 1800
        record("6", ok, f"{s['episodes']} episodes, R={s['minibatch_size']}, baseline={s['baseline']}: "
                        f"max|z|={s['max_abs_z']:.2f}, median update/FD ratio={s['median_ratio']:.3f}; {wall:.0f}s")
        assert ok

    def test_c07_variance_scaling(self, runs):
        out, man, _ = runs("lemma3")
        s = man["summary"]
        ok = s["slope_within_tolerance"]
        record("7", ok, f"log-log slope={s['slope']} (zero variance at R={s['zero_variance_sizes']}), "
                        f"slope over R with positive variance={s['slope_positive_only']:.3f}")
        assert ok

    def test_c08_convergence_trend(self, runs):
        out, man, wall = runs("theorem3")
        s = man["summary"]
        ok = s["c"] > 0 and s["mk_tau"] < 0 and s["mk_p"] < 0.05 and wall < 1200
        record("8", ok, f"c={s['c']:.4g}, Mann-Kendall tau={s['mk_tau']:.3f} p={s['mk_p']:.2g}; {wall:.0f}s")
        assert ok

    def test_c09_index_accuracy(self, runs):
        out, man, _ = runs("theorem3")
        s = man["summary"]
        ok = s["spearman"] >= 0.9 and s["ratio_ok"]
        record("9", ok, f"Spearman={s['spearman']:.3f}, learned/oracle reward={s['ratio']:.4f} "
                        f"(margin {s['ratio_margin']:.3f} +- 3x{s['ratio_margin_se']:.3f} vs 90%)")
        assert ok


class TestMixtureCriteria:
    def test_c10a_degenerates_to_single_network(self):
        arm = standard_arm()
        cfg = TrainConfig(minibatch_size=8, num_minibatches=200, horizon=100, expert_lr=0.01, m=5.0,
                          gating_frozen=True, encoding="features", seed=7)
        theta, nm = train_neurwin(arm, cfg)
        X = encode_states(arm, cfg.encoding)
        ex, _, cm, _ = train_contextwin([ContextualArm([1.0], arm)], [default_network(cfg, X.shape[1])],
                                        GatingParams(np.zeros((1, 1)), 1), cfg)
        same = all(a.returns.tobytes() == b.returns.tobytes() for a, b in zip(nm, cm)) and len(nm) == len(cm)
        same = same and ex[0].flat.tobytes() == theta.flat.tobytes()
        record("10a", same, f"{len(nm)} mini-batches: returns and final parameters "
                            f"{'bit-identical' if same else 'differ'}")
        assert same

    def test_c10b_specialization(self, runs):
        out, man, wall = runs("clusters")
        groups = man["summary"]["groups"]
        majority = {g: v["majority_expert"] for g, v in groups.items()}
        ratios = {g: round(v["ratio"], 4) for g, v in groups.items()}
        ok = len(set(majority.values())) == len(groups) and all(v["ratio_ok"] for v in groups.values()) \
            and wall < 2700
        record("10b", ok, f"majority expert per cluster {majority}, learned/oracle {ratios} (target 85% at 3 SE); "
                          f"{wall:.0f}s")
        assert ok


class TestReproducibility:
    def test_c11_byte_identical_reruns(self, runs):
        diffs = []
        for name, (kind, cfg_file) in EXPERIMENTS.items():
            out, man, _ = runs(name)
            again = runs.base / name / "b"
            man2 = run_experiment(kind, load_config(CONFIGS / cfg_file), again, seed=0)
            for f in man["files"]:
                if f.endswith(".csv") and (out / f).read_bytes() != (again / f).read_bytes():
                    diffs.append(f"{name}/{f}")
            if man["files"] != man2["files"]:
                diffs.append(f"{name}/manifest files")
        record("11", not diffs, f"{len(EXPERIMENTS)} experiments rerun with seed 0: "
                                f"{'all CSVs byte-identical' if not diffs else 'differences in ' + str(diffs)}")
        assert not diffs


# ---------------------------------------------------------------------------
# Supplementary evidence for the criteria that do not hold as stated.


class TestSupplementary:
    def test_strong_indexability_recovers_with_longer_chains(self, runs):
        out, _, _ = runs("indexability")
        failing = [r["arm"] for r in read_csv(out / "indexability.csv") if r["strong"] != "true"]
        cfg = load_config(CONFIGS / "random_family.yaml")
        specs = {a.name: a for a in cfg.bandit.arms}
        for name in failing:
            p = specs[name].params
            arm = build_belief_mdp(TwoStatePartialArm(p["p01_act"], p["p11_act"], p["p01_pass"], p["p11_pass"]), 80)
            rep = check_strong_indexability(arm, cfg.oracle.grid, 0.95, 1e-8)
            assert rep.indexable and rep.strong, name

    def test_leave_one_out_update_matches_exact_gradient(self):
        cfg = load_config(CONFIGS / "lemma2.yaml")
        arm, X, theta, tc = _diagnostic_setup(cfg, 0)
        tc = replace(tc, baseline="leave_one_out")
        D = np.array([neurwin_minibatch(arm, theta, tc, b, X, return_direction=True)[2]
                      for b in range(100_000 // tc.minibatch_size)])
        z = (D.mean(axis=0) - exact_objective_gradient(arm, theta, X, tc)) / (D.std(axis=0, ddof=1) / np.sqrt(len(D)))
        assert np.abs(z).max() < 3.0

    def test_batch_mean_update_is_shrunk_gradient(self, runs):
        out, _, _ = runs("lemma2")
        cfg = load_config(CONFIGS / "lemma2.yaml")
        arm, X, theta, tc = _diagnostic_setup(cfg, 0)
        rows = read_csv(out / "lemma2.csv")
        mean = np.array([float(r["update_mean"]) for r in rows])
        se = np.array([float(r["update_se"]) for r in rows])
        fd = np.array([float(r["fd_grad"]) for r in rows])
        fd_se = np.array([float(r["fd_se"]) for r in rows])
        exact = exact_objective_gradient(arm, theta, X, tc)
        # the finite-difference reference itself is right ...
        assert np.abs((fd - exact) / fd_se).max() < 3.0
        # ... and the batch-mean update estimates (1 - 1/R) of it
        R = tc.minibatch_size
        assert np.abs((mean - (1 - 1 / R) * exact) / se).max() < 3.0

    def test_variance_scales_inversely_at_fixed_states(self, tmp_path):
        cfg = load_config(CONFIGS / "lemma3.yaml")
        cfg = replace(cfg, lemma3=replace(cfg.lemma3, baseline="none", fixed_states=(0, 0)))
        man = run_experiment("lemma3-sweep", cfg, tmp_path / "fixed", seed=0)
        assert abs(man["summary"]["slope"] + 1.0) <= 0.15

    def test_heterogeneous_brute_force(self):
        rng = np.random.default_rng(4)
        arms = [build_belief_mdp(random_partial_arm(rng), 4) for _ in range(3)]
        inst = BanditInstance(tuple(ContextualArm([1.0], a) for a in arms), 1, 0.9)
        joint = JointMDP(arms, 1, 0.9)
        v_idx = joint.index_policy_values(oracle_whittle_policy(inst).tables)
        assert v_idx.mean() / joint.optimal_values().mean() >= 0.98


def exact_objective_gradient(arm, theta, X, tc, h=1e-6):
    """Gradient of the mean over uniform (s0, s1) of J at fixed lam = f(s0), by exact recursion."""
    S = arm.num_states
    f0 = net_forward_batch(theta, X)
    g = np.zeros(theta.flat.size)
    for j in range(g.size):
        up, dn = theta.flat.copy(), theta.flat.copy()
        up[j] += h
        dn[j] -= h
        fu, fd = net_forward_batch(theta.with_flat(up), X), net_forward_batch(theta.with_flat(dn), X)
        for s0 in range(S):
            for s1 in range(S):
                g[j] += (exact_soft_return(arm, fu, f0[s0], s1, tc.m, tc.beta, tc.horizon)
                         - exact_soft_return(arm, fd, f0[s0], s1, tc.m, tc.beta, tc.horizon)) / (2 * h) / S ** 2
    return g
