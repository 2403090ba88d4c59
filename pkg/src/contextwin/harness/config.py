"""YAML experiment configuration.

The loader keeps source line numbers on every mapping and sequence so that
validation errors (a non-stochastic matrix row, a bad field) point at the
offending line. The full annotated format is in docs/config.md.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from ..envs import (BanditInstance, ContextualArm, FiniteArm, STOCHASTIC_ATOL, TwoStatePartialArm,
                    build_belief_mdp)
from ..training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, source: str | None = None):
        where = ""
        if source:
            where = f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{msg}")
        self.line = line


class _Seq(list):
    line: int | None = None


class _Map(dict):
    line: int | None = None
    key_lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_seq(loader, node):
    out = _Seq(loader.construct_sequence(node, deep=True))
    out.line = node.start_mark.line + 1
    return out


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.line = node.start_mark.line + 1
    out.key_lines = {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        out[key] = loader.construct_object(v_node, deep=True)
        out.key_lines[key] = k_node.start_mark.line + 1
    return out


_Loader.add_constructor("tag:yaml.org,2002:seq", _construct_seq)
_Loader.add_constructor("tag:yaml.org,2002:map", _construct_map)


def _line(obj, key=None):
    if key is not None and isinstance(obj, _Map):
        return obj.key_lines.get(key, obj.line)
    return getattr(obj, "line", None)


# ---------------------------------------------------------------------------
# typed sections


@dataclass(frozen=True)
class ArmSpec:
    name: str
    context: tuple[float, ...]
    reward_noise: float
    kind: str  # "belief" | "finite"
    params: dict
    count: int = 1


@dataclass(frozen=True)
class BanditSpec:
    budget: int
    discount: float
    arms: tuple[ArmSpec, ...]
    initial_states: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ContextWinSpec:
    num_experts: int = 4
    top_k: int = 2
    gating_scale: float = 0.1
    noise_variance: float | None = None


@dataclass(frozen=True)
class OracleSpec:
    lambda_start: float = -2.0
    lambda_stop: float = 2.0
    lambda_num: int = 101
    vi_tol: float = 1e-9
    bisect_tol: float = 1e-6
    strong_tol: float = 1e-8

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.lambda_start, self.lambda_stop, self.lambda_num)


@dataclass(frozen=True)
class EvaluateSpec:
    horizon: int = 200
    episodes: int = 100
    policies: tuple[str, ...] = ("oracle", "myopic", "random")
    checkpoint: str | None = None
    encoding: str = "onehot"
    accrue_passive: bool = True
    per_episode: bool = False


@dataclass(frozen=True)
class Lemma2Spec:
    minibatch_size: int = 16
    episodes: int = 100_000
    fd_rollouts: int = 1_000_000
    fd_delta: float = 1e-2
    horizon: int = 5
    hidden: tuple[int, ...] = (6,)
    m: float = 1.0
    beta: float = 0.9
    baseline: str = "batch_mean"
    init_scale: float = 1.0


@dataclass(frozen=True)
class Lemma3Spec:
    sizes: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    minibatches: int = 2000
    baseline: str = "batch_mean"
    fixed_states: tuple[int, int] | None = None


@dataclass(frozen=True)
class Theorem3Spec:
    reference_arms: int = 10
    reference_budget: int = 2


@dataclass(frozen=True)
class ExperimentConfig:
    bandit: BanditSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    train_arm: int = 0
    checkpoint_every: int = 0
    contextwin: ContextWinSpec = field(default_factory=ContextWinSpec)
    oracle: OracleSpec = field(default_factory=OracleSpec)
    evaluate: EvaluateSpec = field(default_factory=EvaluateSpec)
    lemma2: Lemma2Spec = field(default_factory=Lemma2Spec)
    lemma3: Lemma3Spec = field(default_factory=Lemma3Spec)
    theorem3: Theorem3Spec = field(default_factory=Theorem3Spec)

    def semantic_hash(self) -> str:
        blob = json.dumps(_jsonable(asdict(self)), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace
        return replace(self, train=replace(self.train, seed=seed))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# parsing


def _section(cls, raw, name: str, source):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping", _line(raw), source)
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        if key not in known:
            raise ConfigError(f"unknown field {name}.{key}", _line(raw, key), source)
        if isinstance(val, list):
            val = tuple(val)
        elif isinstance(val, str) and known[key].type in ("float", "float | None"):
            # YAML 1.1 reads exponents without a dot (1e-3) as strings
            try:
                val = float(val)
            except ValueError:
                raise ConfigError(f"{name}.{key} must be a number", _line(raw, key), source) from None
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}", _line(raw), source) from None


def _matrix(raw, name, n, source):
    if not isinstance(raw, list) or len(raw) != n:
        raise ConfigError(f"{name} must be a list of {n} rows", _line(raw), source)
    rows = []
    for i, row in enumerate(raw):
        line = _line(row) or _line(raw)
        if not isinstance(row, list) or len(row) != n:
            raise ConfigError(f"{name} row {i} must have {n} entries", line, source)
        try:
            vals = np.array(row, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{name} row {i} has non-numeric entries", line, source) from None
        if np.any(vals < 0) or np.any(vals > 1):
            raise ConfigError(f"{name} row {i} has entries outside [0, 1]", line, source)
        if abs(vals.sum() - 1.0) > STOCHASTIC_ATOL:
            raise ConfigError(f"{name} row {i} sums to {vals.sum():.12g}, not 1 (non-stochastic row)", line, source)
        rows.append(vals)
    return np.array(rows)


def _arm(raw, idx: int, source) -> ArmSpec:
    if not isinstance(raw, dict):
        raise ConfigError(f"arm {idx} must be a mapping", _line(raw), source)
    allowed = {"name", "context", "reward_noise", "belief", "finite", "count"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown arm field {key!r}", _line(raw, key), source)
    kinds = [k for k in ("belief", "finite") if k in raw]
    if len(kinds) != 1:
        raise ConfigError(f"arm {idx} needs exactly one of 'belief' or 'finite'", _line(raw), source)
    kind = kinds[0]
    body = raw[kind]
    if kind == "belief":
        need = {"p01_pass", "p11_pass", "p01_act", "p11_act", "chain_length"}
        missing = need - set(body)
        if missing:
            raise ConfigError(f"belief arm {idx} is missing {sorted(missing)}", _line(body), source)
        extra = set(body) - need - {"observe"}
        if extra:
            key = sorted(extra)[0]
            raise ConfigError(f"unknown belief field {key!r}", _line(body, key), source)
        params = {k: float(body[k]) for k in need - {"chain_length"}}
        params["chain_length"] = int(body["chain_length"])
        params["observe"] = str(body.get("observe", "current"))
        try:
            TwoStatePartialArm(params["p01_act"], params["p11_act"], params["p01_pass"], params["p11_pass"])
        except ValueError as exc:
            raise ConfigError(str(exc), _line(body), source) from None
    else:
        for key in ("p_act", "p_pass", "r_act", "r_pass"):
            if key not in body:
                raise ConfigError(f"finite arm {idx} is missing {key!r}", _line(body), source)
        n = len(body["r_act"])
        params = {
            "p_act": _matrix(body["p_act"], "p_act", n, source).tolist(),
            "p_pass": _matrix(body["p_pass"], "p_pass", n, source).tolist(),
            "r_act": [float(v) for v in body["r_act"]],
            "r_pass": [float(v) for v in body["r_pass"]],
        }
        if len(params["r_pass"]) != n:
            raise ConfigError("r_pass length differs from r_act", _line(body["r_pass"]), source)
    ctx = raw.get("context", [1.0])
    count = int(raw.get("count", 1))
    if count < 1:
        raise ConfigError("count must be >= 1", _line(raw, "count"), source)
    return ArmSpec(str(raw.get("name", f"arm{idx}")), tuple(float(c) for c in ctx),
                   float(raw.get("reward_noise", 0.0)), kind, params, count)


def _bandit(raw, source) -> BanditSpec:
    for key in raw:
        if key not in {"budget", "discount", "arms", "num_arms", "initial_states"}:
            raise ConfigError(f"unknown field bandit.{key}", _line(raw, key), source)
    if "arms" not in raw or not raw["arms"]:
        raise ConfigError("bandit.arms must list at least one arm", _line(raw), source)
    arms = tuple(_arm(a, i, source) for i, a in enumerate(raw["arms"]))
    n = sum(a.count for a in arms)
    if "num_arms" in raw and int(raw["num_arms"]) != n:
        raise ConfigError(f"num_arms={raw['num_arms']} but arms expand to {n}", _line(raw, "num_arms"), source)
    dims = {len(a.context) for a in arms}
    if len(dims) != 1:
        raise ConfigError("all arm contexts must share one dimension", _line(raw, "arms"), source)
    budget = int(raw.get("budget", 1))
    discount = float(raw.get("discount", 0.95))
    if not 1 <= budget <= n:
        raise ConfigError(f"budget must be in [1, {n}]", _line(raw, "budget"), source)
    if not 0.0 < discount < 1.0:
        raise ConfigError("discount must lie in (0, 1)", _line(raw, "discount"), source)
    init = raw.get("initial_states")
    return BanditSpec(budget, discount, arms, tuple(int(s) for s in init) if init is not None else None)


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    try:
        raw = yaml.load(text, Loader=_Loader) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    sections = {"bandit", "train", "contextwin", "oracle", "evaluate", "lemma2", "lemma3", "theorem3"}
    for key in raw:
        if key not in sections:
            raise ConfigError(f"unknown section {key!r}", _line(raw, key), source)
    kwargs = {}
    if raw.get("bandit") is not None:
        kwargs["bandit"] = _bandit(raw["bandit"], source)
    train_raw = raw.get("train")
    if train_raw is not None:
        train_raw = _Map(train_raw) if isinstance(train_raw, dict) else train_raw
        if isinstance(train_raw, dict):
            train_raw.line = raw["train"].line
            train_raw.key_lines = raw["train"].key_lines
            for extra in ("arm", "checkpoint_every"):
                if extra in train_raw:
                    kwargs["train_arm" if extra == "arm" else extra] = int(train_raw.pop(extra))
    if kwargs.get("bandit") is not None and kwargs.get("train_arm", 0) >= sum(a.count for a in kwargs["bandit"].arms):
        raise ConfigError("train.arm is out of range", _line(raw["train"], "arm"), source)
    kwargs["train"] = _section(TrainConfig, train_raw, "train", source)
    kwargs["contextwin"] = _section(ContextWinSpec, raw.get("contextwin"), "contextwin", source)
    oracle_raw = raw.get("oracle")
    if isinstance(oracle_raw, dict) and "lambda_grid" in oracle_raw:
        grid = oracle_raw["lambda_grid"]
        line = _line(oracle_raw, "lambda_grid")
        oracle_raw = _Map({k: v for k, v in oracle_raw.items() if k != "lambda_grid"})
        oracle_raw.line, oracle_raw.key_lines = line, {}
        try:
            oracle_raw.update(lambda_start=float(grid["start"]), lambda_stop=float(grid["stop"]),
                              lambda_num=int(grid["num"]))
        except (KeyError, TypeError):
            raise ConfigError("lambda_grid needs start, stop and num", line, source) from None
    kwargs["oracle"] = _section(OracleSpec, oracle_raw, "oracle", source)
    kwargs["evaluate"] = _section(EvaluateSpec, raw.get("evaluate"), "evaluate", source)
    kwargs["lemma2"] = _section(Lemma2Spec, raw.get("lemma2"), "lemma2", source)
    kwargs["lemma3"] = _section(Lemma3Spec, raw.get("lemma3"), "lemma3", source)
    kwargs["theorem3"] = _section(Theorem3Spec, raw.get("theorem3"), "theorem3", source)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


# ---------------------------------------------------------------------------
# building runtime objects


def build_arm(spec: ArmSpec) -> FiniteArm:
    p = spec.params
    if spec.kind == "belief":
        partial = TwoStatePartialArm(p["p01_act"], p["p11_act"], p["p01_pass"], p["p11_pass"])
        return build_belief_mdp(partial, p["chain_length"], p["observe"], spec.reward_noise)
    return FiniteArm(np.array(p["p_act"]), np.array(p["p_pass"]), p["r_act"], p["r_pass"], spec.reward_noise)


def build_bandit(spec: BanditSpec) -> BanditInstance:
    arms = []
    for a in spec.arms:
        dyn = build_arm(a)
        for j in range(a.count):
            name = a.name if a.count == 1 else f"{a.name}[{j}]"
            arms.append(ContextualArm(np.array(a.context), dyn, name))
    return BanditInstance(tuple(arms), spec.budget, spec.discount, spec.initial_states)
