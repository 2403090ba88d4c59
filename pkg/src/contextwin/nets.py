"""Small dense index networks, noisy top-K gating and their analytic gradients.

Parameters live in one flat float64 vector; layer ``l`` occupies a row-major
``(out, in)`` weight block followed by its ``out`` biases. Hidden layers apply
the named activation, the output layer is linear and one unit wide.
"""

from __future__ import annotations

import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

SMOOTH_ACTIVATIONS = ("tanh", "sigmoid", "softplus")
ACTIVATIONS = SMOOTH_ACTIVATIONS + ("relu",)
CHECKPOINT_VERSION = 1


def _act(name: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation value and derivative."""
    if name == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    if name == "sigmoid":
        a = expit(z)
        return a, a * (1.0 - a)
    if name == "softplus":
        return np.logaddexp(0.0, z), expit(z)
    if name == "relu":
        return np.maximum(z, 0.0), (z > 0).astype(float)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True, eq=False)
class DenseNetParams:
    layer_dims: tuple[int, ...]
    flat: np.ndarray
    activation: str = "tanh"
    frozen: tuple[bool, ...] = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or dims[-1] != 1 or min(dims) < 1:
            raise ValueError(f"layer_dims must be (in, ..., 1), got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        flat = np.array(self.flat, dtype=np.float64).reshape(-1)
        if flat.size != num_params(dims):
            raise ValueError(f"expected {num_params(dims)} parameters, got {flat.size}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        frozen = tuple(bool(f) for f in self.frozen) or (False,) * (len(dims) - 1)
        if len(frozen) != len(dims) - 1:
            raise ValueError("frozen needs one flag per layer")
        flat.setflags(write=False)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "frozen", frozen)

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def smooth(self) -> bool:
        return self.activation in SMOOTH_ACTIVATIONS

    def layer(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        start, w_end, b_end = _layer_slices(self.layer_dims)[l]
        n_in, n_out = self.layer_dims[l], self.layer_dims[l + 1]
        return self.flat[start:w_end].reshape(n_out, n_in), self.flat[w_end:b_end]

    def with_flat(self, flat: np.ndarray) -> "DenseNetParams":
        return replace(self, flat=flat)


def num_params(layer_dims) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


def _layer_slices(dims):
    out, pos = [], 0
    for a, b in zip(dims[:-1], dims[1:]):
        out.append((pos, pos + a * b, pos + a * b + b))
        pos += a * b + b
    return out


def init_dense(layer_dims, rng: np.random.Generator, activation: str = "tanh",
               scale: float = 1.0) -> DenseNetParams:
    """Glorot-style normal weights, zero biases."""
    dims = tuple(layer_dims)
    parts = []
    for a, b in zip(dims[:-1], dims[1:]):
        parts.append(rng.normal(0.0, scale * np.sqrt(2.0 / (a + b)), size=a * b))
        parts.append(np.zeros(b))
    return DenseNetParams(dims, np.concatenate(parts), activation)


def _check_input(params: DenseNetParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.layer_dims[0]:
        raise ValueError(f"input must have {params.layer_dims[0]} features, got shape {X.shape}")
    return X


def net_forward_batch(params: DenseNetParams, X) -> np.ndarray:
    h = _check_input(params, X)
    for l in range(params.num_layers):
        W, b = params.layer(l)
        z = h @ W.T + b
        h = z if l == params.num_layers - 1 else _act(params.activation, z)[0]
    return h[:, 0]


def net_param_grad_batch(params: DenseNetParams, X) -> np.ndarray:
    """Rows are d f(x_i) / d params, shape ``(len(X), num_params)``."""
    X = _check_input(params, X)
    n = X.shape[0]
    acts, derivs = [X], []
    h = X
    for l in range(params.num_layers):
        W, b = params.layer(l)
        z = h @ W.T + b
        if l == params.num_layers - 1:
            h = z
        else:
            h, dh = _act(params.activation, z)
            derivs.append(dh)
        acts.append(h)
    grad = np.zeros((n, params.flat.size))
    slices = _layer_slices(params.layer_dims)
    delta = np.ones((n, 1))  # d f / d z at the output layer
    for l in range(params.num_layers - 1, -1, -1):
        start, w_end, b_end = slices[l]
        if not params.frozen[l]:
            grad[:, start:w_end] = (delta[:, :, None] * acts[l][:, None, :]).reshape(n, -1)
            grad[:, w_end:b_end] = delta
        if l:
            W, _ = params.layer(l)
            delta = (delta @ W) * derivs[l - 1]
    return grad


def net_forward(params: DenseNetParams, state_encoding) -> float:
    x = np.asarray(state_encoding, dtype=float)
    if x.ndim != 1:
        raise ValueError("state encoding must be a vector")
    return float(net_forward_batch(params, x[None])[0])


def net_param_grad(params: DenseNetParams, state_encoding) -> np.ndarray:
    x = np.asarray(state_encoding, dtype=float)
    if x.ndim != 1:
        raise ValueError("state encoding must be a vector")
    return net_param_grad_batch(params, x[None])[0]


def sigma_m(x, m: float):
    """Sensitivity sigmoid ``1 / (1 + exp(-m x))``; overflow-free."""
    if m <= 0:
        raise ValueError("sensitivity m must be positive")
    out = expit(m * np.asarray(x, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# gating


@dataclass(frozen=True, eq=False)
class GatingParams:
    w_g: np.ndarray
    top_k: int
    noise_variance: float | None = None

    def __post_init__(self):
        w = np.array(self.w_g, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("w_g must be a (num_experts, d) matrix")
        if not 1 <= self.top_k <= w.shape[0]:
            raise ValueError(f"top_k={self.top_k} must be in [1, {w.shape[0]}]")
        var = 1.0 / w.shape[0] ** 2 if self.noise_variance is None else float(self.noise_variance)
        if var < 0:
            raise ValueError("noise_variance must be >= 0")
        w.setflags(write=False)
        object.__setattr__(self, "w_g", w)
        object.__setattr__(self, "noise_variance", var)

    @property
    def num_experts(self) -> int:
        return self.w_g.shape[0]

    @property
    def context_dim(self) -> int:
        return self.w_g.shape[1]


@dataclass(frozen=True, eq=False)
class SparseWeights:
    indices: tuple[int, ...]
    weights: np.ndarray
    logits: np.ndarray = field(default=None, repr=False)


def init_gating(num_experts: int, context_dim: int, top_k: int, rng: np.random.Generator,
                scale: float = 0.1, noise_variance: float | None = None) -> GatingParams:
    return GatingParams(rng.normal(0.0, scale, size=(num_experts, context_dim)), top_k, noise_variance)


def gating_noise(params: GatingParams, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(params.noise_variance), size=params.num_experts)


def gating_weights(params: GatingParams, context, rng: np.random.Generator | None = None,
                   noise_enabled: bool = True, noise: np.ndarray | None = None) -> SparseWeights:
    """Softmax of ``W_g x + eps`` restricted to the top-K experts and renormalised.

    Ties are broken by logit descending, then expert id ascending. A
    pre-drawn ``noise`` vector may be passed instead of an rng.
    """
    x = np.asarray(context, dtype=float).reshape(-1)
    if x.size != params.context_dim:
        raise ValueError(f"context must have dimension {params.context_dim}")
    logits = params.w_g @ x
    if noise_enabled:
        if noise is None:
            if rng is None:
                raise ValueError("noise enabled but no rng or noise given")
            noise = gating_noise(params, rng)
        logits = logits + noise
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    order = np.lexsort((np.arange(logits.size), -logits))[: params.top_k]
    kept = probs[order]
    return SparseWeights(tuple(int(i) for i in order), kept / kept.sum(), logits)


def gating_param_grad(params: GatingParams, context, selected: SparseWeights) -> np.ndarray:
    """Jacobian ``d g_j / d W_g`` of each selected weight, shape ``(K, M, d)``.

    With the index set held fixed the renormalised weights are a softmax over
    the selected logits alone, so ``d g_j / d W_i = g_j (1[i=j] - g_i) x`` for
    selected ``i`` and zero otherwise. The noise only enters through ``g``.
    """
    x = np.asarray(context, dtype=float).reshape(-1)
    g = selected.weights
    idx = np.asarray(selected.indices)
    jac = np.zeros((idx.size, params.num_experts, x.size))
    coeff = np.diag(g) - np.outer(g, g)  # [j, i] = g_j (delta_ij - g_i)
    jac[:, idx, :] = coeff[:, :, None] * x[None, None, :]
    return jac


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, experts: list[DenseNetParams], gating: GatingParams | None = None) -> Path:
    """Write an ``.npz`` container; see docs/formats.md for the layout."""
    path = Path(path)
    arrays = {
        "format_version": np.array([CHECKPOINT_VERSION], dtype="<i8"),
        "num_experts": np.array([len(experts)], dtype="<i8"),
    }
    for i, p in enumerate(experts):
        arrays[f"expert{i}/layer_dims"] = np.array(p.layer_dims, dtype="<i8")
        arrays[f"expert{i}/params"] = np.ascontiguousarray(p.flat, dtype="<f8")
        arrays[f"expert{i}/activation"] = np.array(p.activation)
        arrays[f"expert{i}/frozen"] = np.array(p.frozen, dtype=bool)
    if gating is not None:
        arrays["gating/w_g"] = np.ascontiguousarray(gating.w_g, dtype="<f8")
        arrays["gating/top_k"] = np.array([gating.top_k], dtype="<i8")
        arrays["gating/noise_variance"] = np.array([gating.noise_variance], dtype="<f8")
    # fixed entry timestamps keep the file bytes a function of the parameters alone
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, arr in arrays.items():
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, arr, allow_pickle=False)
    return path


def load_checkpoint(path) -> tuple[list[DenseNetParams], GatingParams | None]:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        experts = []
        for i in range(int(data["num_experts"][0])):
            experts.append(DenseNetParams(
                tuple(int(d) for d in data[f"expert{i}/layer_dims"]),
                data[f"expert{i}/params"].astype(np.float64),
                str(data[f"expert{i}/activation"]),
                tuple(bool(f) for f in data[f"expert{i}/frozen"]),
            ))
        gating = None
        if "gating/w_g" in data:
            gating = GatingParams(data["gating/w_g"].astype(np.float64), int(data["gating/top_k"][0]),
                                  float(data["gating/noise_variance"][0]))
    return experts, gating
