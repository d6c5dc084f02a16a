"""Minimal dense-network substrate with hand-derived gradients.

Every learned component in this package (encoders, FiLM projector, stage
head, noise predictor) is a :class:`DenseNet`. Reverse-mode gradients are
derived per layer rather than taken from an autodiff framework so that
the finite-difference check suite exercises the exact code used in
training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .hmdp import StageDistribution

LOG_EPS = 1e-12
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseNet:
    """Fully connected network: affine layers with per-layer activations.

    ``weights[l]`` has shape ``(n_out, n_in)`` and inputs are row vectors,
    so a layer computes ``x @ W.T + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must align")
        for W, b, act in zip(self.weights, self.biases, self.activations):
            if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.size:
                raise ValueError("layer shapes inconsistent")
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for prev, nxt in zip(self.weights[:-1], self.weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ValueError("adjacent layer dimensions incompatible")

    @classmethod
    def create(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "DenseNet":
        """He-initialized network with the given layer sizes."""
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        weights, biases, acts = [], [], []
        n_layers = len(layer_sizes) - 1
        for l in range(n_layers):
            n_in, n_out = layer_sizes[l], layer_sizes[l + 1]
            weights.append(rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in))
            biases.append(np.zeros(n_out))
            acts.append(hidden_activation if l < n_layers - 1 else output_activation)
        return cls(weights, biases, acts)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))


@dataclass
class ForwardCache:
    """Intermediates from one forward pass, consumed by :func:`backward`."""

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    squeeze: bool


@dataclass
class NetGrads:
    """Per-layer parameter gradients matching a :class:`DenseNet` layout."""

    dW: list[np.ndarray]
    db: list[np.ndarray]

    def flat(self) -> list[np.ndarray]:
        out = []
        for dW, db in zip(self.dW, self.db):
            out.extend((dW, db))
        return out

    def add_(self, other: "NetGrads") -> "NetGrads":
        for a, b in zip(self.flat(), other.flat()):
            a += b
        return self


def net_params(net: DenseNet) -> list[np.ndarray]:
    """Parameter arrays in the canonical (W0, b0, W1, b1, ...) order."""
    out = []
    for W, b in zip(net.weights, net.biases):
        out.extend((W, b))
    return out


def zero_grads(net: DenseNet) -> NetGrads:
    return NetGrads([np.zeros_like(W) for W in net.weights], [np.zeros_like(b) for b in net.biases])


def _apply_activation(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


def forward(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a vector or a batch of row vectors.

    Returns the output and a cache of intermediates for :func:`backward`.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ValueError(f"input dimension {x.shape} does not match net input {net.input_dim}")
    layer_inputs, pre_acts = [], []
    for W, b, act in zip(net.weights, net.biases, net.activations):
        layer_inputs.append(h)
        z = h @ W.T + b
        pre_acts.append(z)
        h = _apply_activation(z, act)
    y = h[0] if squeeze else h
    return y, ForwardCache(layer_inputs, pre_acts, squeeze)


def backward(net: DenseNet, cache: ForwardCache, dy: np.ndarray) -> tuple[NetGrads, np.ndarray]:
    """Exact reverse-mode gradients for a cached forward pass.

    ``dy`` is the upstream gradient with the same shape as the forward
    output. Returns parameter gradients and the gradient wrt the input.
    """
    if len(cache.layer_inputs) != len(net.weights) or any(
        inp.shape[1] != W.shape[1] for inp, W in zip(cache.layer_inputs, net.weights)
    ):
        raise ValueError("stale cache: does not match this network")
    dy = np.asarray(dy, dtype=float)
    d = dy[None, :] if cache.squeeze else dy
    dW_all: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    db_all: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    for l in range(len(net.weights) - 1, -1, -1):
        dz = d * _activation_grad(cache.pre_activations[l], net.activations[l])
        dW_all[l] = dz.T @ cache.layer_inputs[l]
        db_all[l] = dz.sum(axis=0)
        d = dz @ net.weights[l]
    dx = d[0] if cache.squeeze else d
    return NetGrads(dW_all, db_all), dx


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax along the last axis."""
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: np.ndarray) -> StageDistribution:
    """Stable softmax of a logit vector as a stage distribution."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ValueError("softmax expects a logit vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    return StageDistribution(softmax_rows(z))


def cross_entropy_reward(target: StageDistribution, pred: StageDistribution) -> float:
    """Negative cross-entropy ``sum_i target_i * log pred_i`` (always <= 0)."""
    t, p = target.probs, pred.probs
    if t.size != p.size:
        raise ValueError("distribution dimensions differ")
    return float(np.sum(t * np.log(np.maximum(p, LOG_EPS))))


def kl_reward(q: StageDistribution, pred: StageDistribution) -> float:
    """Negative KL divergence ``-sum_i q_i (log q_i - log pred_i)``.

    Zero exactly when ``q == pred``; terms with ``q_i == 0`` contribute
    nothing.
    """
    qp, p = q.probs, pred.probs
    if qp.size != p.size:
        raise ValueError("distribution dimensions differ")
    mask = qp > 0.0
    logq = np.log(np.maximum(qp, LOG_EPS))
    logp = np.log(np.maximum(p, LOG_EPS))
    return float(-np.sum(qp[mask] * (logq[mask] - logp[mask])))


def cross_entropy_reward_rows(targets: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Row-wise negative cross-entropy for batched training diagnostics."""
    return np.sum(targets * np.log(np.maximum(probs, LOG_EPS)), axis=-1)


def kl_reward_rows(q: np.ndarray, probs: np.ndarray) -> np.ndarray:
    logq = np.where(q > 0.0, np.log(np.maximum(q, LOG_EPS)), 0.0)
    logp = np.log(np.maximum(probs, LOG_EPS))
    return -np.sum(np.where(q > 0.0, q * (logq - logp), 0.0), axis=-1)


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for a fixed list of parameter arrays."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_init(params: Sequence[np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2)
    state.m = [np.zeros_like(p) for p in params]
    state.v = [np.zeros_like(p) for p in params]
    return state


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> Sequence[np.ndarray]:
    """One bias-corrected adaptive-moment update, applied in place."""
    if state.m is None or state.v is None:
        raise ValueError("optimizer state not initialized; call adam_init")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not match parameter shape")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def finite_difference_gradient(
    f: Callable[[], float],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central finite-difference gradient of a scalar function.

    ``f`` must recompute the scalar from the current contents of
    ``arrays``; each entry is perturbed by ``+-h`` in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """Worst-case elementwise relative error, floored at absolute scale 1."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def save_dense_net(net: DenseNet, path) -> None:
    """Write a checkpoint: JSON header line, text manifest of tensor
    offsets (in float64 units), a blank line, then the little-endian
    float64 parameter block.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "layer_sizes": net.layer_sizes,
        "activations": list(net.activations),
    }
    lines = [json.dumps(header)]
    offset = 0
    blocks = []
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        for name, arr in ((f"W{l}", W), (f"b{l}", b)):
            lines.append(f"{name} {offset} {arr.size}")
            offset += arr.size
            blocks.append(np.ascontiguousarray(arr, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        for block in blocks:
            fh.write(block.tobytes())


def load_dense_net(path) -> DenseNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.index(b"\n\n")
    text = raw[:sep].decode("utf-8").splitlines()
    header = json.loads(text[0])
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    block = np.frombuffer(raw[sep + 2 :], dtype="<f8")
    sizes = header["layer_sizes"]
    manifest = {name: (int(off), int(cnt)) for name, off, cnt in (ln.split() for ln in text[1:])}
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        n_in, n_out = sizes[l], sizes[l + 1]
        off, cnt = manifest[f"W{l}"]
        weights.append(block[off : off + cnt].reshape(n_out, n_in).copy())
        off, cnt = manifest[f"b{l}"]
        biases.append(block[off : off + cnt].copy())
    return DenseNet(weights, biases, list(header["activations"]))
