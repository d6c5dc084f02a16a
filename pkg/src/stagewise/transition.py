"""Unified hidden-stage estimator: encode, fuse, predict, and train.

The network maps (previous stage estimate, current observation) to a
distribution over stages. The observation embedding is modulated by a
feature-wise scale/shift computed from the stage embedding, blended with
the raw embedding by a weight ``lambda1``; a projector head turns the
fused feature into stage logits. The same model doubles as the
auto-labeler for the semi-automatic annotation pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .hmdp import StageDistribution
from .nn import (
    AdamState,
    DenseNet,
    ForwardCache,
    NetGrads,
    adam_init,
    backward,
    cross_entropy_reward_rows,
    forward,
    kl_reward_rows,
    load_dense_net,
    net_params,
    optimizer_step,
    save_dense_net,
    softmax_rows,
)

TRANSITION_MANIFEST_VERSION = 1


@dataclass
class StateTransitionNet:
    """Parameters of the hidden-stage estimator ``f(s_prev, o)``."""

    enc_vision: DenseNet   # observation -> embedding e (dim D_e)
    enc_state: DenseNet    # stage distribution -> embedding h
    film_mlp: DenseNet     # h -> (gamma, beta), each of dim D_e
    proj: DenseNet         # fused feature m -> stage logits
    lambda1: float = 0.5

    def __post_init__(self):
        d_e = self.enc_vision.output_dim
        if self.film_mlp.output_dim != 2 * d_e:
            raise ValueError("film_mlp must emit a scale and a shift per embedding feature")
        if self.proj.input_dim != d_e:
            raise ValueError("projector input must match the embedding dimension")
        if self.film_mlp.input_dim != self.enc_state.output_dim:
            raise ValueError("film_mlp input must match the state embedding dimension")
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError("lambda1 must lie in [0, 1]")

    @property
    def d_o(self) -> int:
        return self.enc_vision.input_dim

    @property
    def d_s(self) -> int:
        return self.proj.output_dim

    @property
    def embed_dim(self) -> int:
        return self.enc_vision.output_dim


def create_transition_net(
    d_o: int,
    d_s: int,
    rng: np.random.Generator,
    embed_dim: int = 64,
    state_embed_dim: int = 32,
    hidden: int = 64,
    depth: int = 2,
    lambda1: float = 0.5,
) -> StateTransitionNet:
    h = [hidden] * depth
    return StateTransitionNet(
        enc_vision=DenseNet.create([d_o, *h, embed_dim], rng),
        enc_state=DenseNet.create([d_s, *h, state_embed_dim], rng),
        film_mlp=DenseNet.create([state_embed_dim, *h, 2 * embed_dim], rng),
        proj=DenseNet.create([embed_dim, *h, d_s], rng),
        lambda1=lambda1,
    )


def transition_params(net: StateTransitionNet) -> list[np.ndarray]:
    return (
        net_params(net.enc_vision)
        + net_params(net.enc_state)
        + net_params(net.film_mlp)
        + net_params(net.proj)
    )


@dataclass
class TransitionGrads:
    vision: NetGrads
    state: NetGrads
    film: NetGrads
    proj: NetGrads

    def flat(self) -> list[np.ndarray]:
        return self.vision.flat() + self.state.flat() + self.film.flat() + self.proj.flat()


@dataclass
class FusedCache:
    """Everything needed to backpropagate through one fused forward pass."""

    cache_e: ForwardCache
    cache_h: ForwardCache
    cache_film: ForwardCache
    cache_proj: ForwardCache
    e: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    m: np.ndarray


def encode_observation(net: StateTransitionNet, o: np.ndarray) -> np.ndarray:
    e, _ = forward(net.enc_vision, o)
    return e


def encode_state(net: StateTransitionNet, s_prev: StageDistribution | np.ndarray) -> np.ndarray:
    probs = s_prev.probs if isinstance(s_prev, StageDistribution) else np.asarray(s_prev, float)
    h, _ = forward(net.enc_state, probs)
    return h


def film_modulate(e: np.ndarray, gamma: np.ndarray, beta: np.ndarray, lambda1: float) -> np.ndarray:
    """Blend the modulated embedding with the raw one:
    ``lambda1 * (e * gamma + beta) + (1 - lambda1) * e``.
    """
    return lambda1 * (e * gamma + beta) + (1.0 - lambda1) * e


def film_fuse(net: StateTransitionNet, e: np.ndarray, h: np.ndarray) -> np.ndarray:
    fb, _ = forward(net.film_mlp, h)
    d_e = net.embed_dim
    gamma, beta = fb[..., :d_e], fb[..., d_e:]
    return film_modulate(e, gamma, beta, net.lambda1)


def predict_stage(net: StateTransitionNet, m: np.ndarray) -> StageDistribution:
    logits, _ = forward(net.proj, m)
    return StageDistribution(softmax_rows(logits))


def transition_forward(net: StateTransitionNet, O: np.ndarray, S_prev: np.ndarray) -> tuple[np.ndarray, FusedCache]:
    """Batched fused forward pass returning stage logits."""
    e, cache_e = forward(net.enc_vision, O)
    h, cache_h = forward(net.enc_state, S_prev)
    fb, cache_film = forward(net.film_mlp, h)
    d_e = net.embed_dim
    gamma, beta = fb[..., :d_e], fb[..., d_e:]
    m = film_modulate(e, gamma, beta, net.lambda1)
    logits, cache_proj = forward(net.proj, m)
    return logits, FusedCache(cache_e, cache_h, cache_film, cache_proj, e, gamma, beta, m)


def transition_backward(
    net: StateTransitionNet,
    cache: FusedCache,
    dlogits: np.ndarray,
    dm_extra: np.ndarray | None = None,
    de_extra: np.ndarray | None = None,
) -> TransitionGrads:
    """Gradients of a scalar loss wrt all transition parameters.

    ``dm_extra``/``de_extra`` inject additional upstream gradient into the
    fused feature and the raw observation embedding (used when a
    downstream consumer conditions on them).
    """
    lam = net.lambda1
    gproj, dm = backward(net.proj, cache.cache_proj, dlogits)
    if dm_extra is not None:
        dm = dm + dm_extra
    de = dm * (lam * cache.gamma + (1.0 - lam))
    dgamma = lam * dm * cache.e
    dbeta = lam * dm
    gfilm, dh = backward(net.film_mlp, cache.cache_film, np.concatenate([dgamma, dbeta], axis=-1))
    gstate, _ = backward(net.enc_state, cache.cache_h, dh)
    if de_extra is not None:
        de = de + de_extra
    gvision, _ = backward(net.enc_vision, cache.cache_e, de)
    return TransitionGrads(gvision, gstate, gfilm, gproj)


def infer_sequence_probs(net: StateTransitionNet, obs_seq: np.ndarray, s0: np.ndarray) -> np.ndarray:
    """Recurrent inference: feed the full predicted distribution back."""
    obs_seq = np.asarray(obs_seq, dtype=float)
    probs = np.empty((obs_seq.shape[0], net.d_s))
    prev = np.asarray(s0, dtype=float)
    for t in range(obs_seq.shape[0]):
        logits, _ = transition_forward(net, obs_seq[t], prev)
        prev = softmax_rows(logits)
        probs[t] = prev
    return probs


def infer_sequence(
    net: StateTransitionNet,
    obs_seq: np.ndarray,
    s0: StageDistribution | None = None,
) -> list[StageDistribution]:
    """Stage estimates for a whole episode, starting from stage 0 by default."""
    start = s0 if s0 is not None else StageDistribution.one_hot(0, net.d_s)
    return [StageDistribution(row) for row in infer_sequence_probs(net, obs_seq, start.probs)]


def _one_hot_rows(stages: np.ndarray, d_s: int) -> np.ndarray:
    rows = np.zeros((stages.size, d_s))
    rows[np.arange(stages.size), stages] = 1.0
    return rows


def transition_training_arrays(labeled: Dataset, d_s: int, use_soft: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forced arrays (observations, previous labels, target labels).

    The previous label of a frame is the label of the preceding frame;
    the first frame reuses its own label. Soft labels are used when
    requested and present, otherwise hard labels are one-hot encoded.
    """
    O, P, T = [], [], []
    for idx, ep in enumerate(labeled.episodes):
        if ep.stages is None:
            raise ValueError(f"episode {idx} has no stage labels")
        if use_soft and ep.soft_stages is not None:
            rows = ep.soft_stages
        else:
            rows = _one_hot_rows(ep.stages, d_s)
        O.append(ep.observations)
        T.append(rows)
        P.append(np.vstack([rows[:1], rows[:-1]]))
    return np.vstack(O), np.vstack(P), np.vstack(T)


@dataclass
class TransitionTrainResult:
    reward_curve: list[float]
    loss_mode: str


def mean_transition_reward(
    net: StateTransitionNet, O: np.ndarray, S_prev: np.ndarray, targets: np.ndarray, loss_mode: str
) -> float:
    logits, _ = transition_forward(net, O, S_prev)
    probs = softmax_rows(logits)
    if loss_mode == "hard_ce":
        return float(np.mean(cross_entropy_reward_rows(targets, probs)))
    return float(np.mean(kl_reward_rows(targets, probs)))


def train_transition(
    net: StateTransitionNet,
    labeled: Dataset,
    loss_mode: str = "hard_ce",
    epochs: int = 20,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 128,
) -> TransitionTrainResult:
    """Teacher-forced gradient ascent on the stage-prediction reward.

    ``hard_ce`` maximizes negative cross-entropy against hard labels;
    ``soft_kl`` maximizes the negative KL divergence from soft labels
    (identical to ``hard_ce`` when every soft label is one-hot).
    """
    if loss_mode not in ("hard_ce", "soft_kl"):
        raise ValueError(f"unknown loss mode {loss_mode!r}")
    O, S_prev, targets = transition_training_arrays(labeled, net.d_s, use_soft=loss_mode == "soft_kl")
    params = transition_params(net)
    opt = adam_init(params, lr)
    rng = np.random.default_rng(seed)
    curve = []
    n = O.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits, cache = transition_forward(net, O[idx], S_prev[idx])
            probs = softmax_rows(logits)
            dlogits = (probs - targets[idx]) / idx.size
            grads = transition_backward(net, cache, dlogits)
            optimizer_step(params, grads.flat(), opt)
        curve.append(mean_transition_reward(net, O, S_prev, targets, loss_mode))
    return TransitionTrainResult(curve, loss_mode)


def save_transition_net(net: StateTransitionNet, directory, loss_mode: str | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": TRANSITION_MANIFEST_VERSION,
        "embed_dim": net.embed_dim,
        "d_s": net.d_s,
        "lambda1": net.lambda1,
        "loss_mode": loss_mode,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n", encoding="utf-8")
    for name in ("enc_vision", "enc_state", "film_mlp", "proj"):
        save_dense_net(getattr(net, name), directory / f"{name}.ckpt")


def load_transition_net(directory) -> StateTransitionNet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest["format_version"] != TRANSITION_MANIFEST_VERSION:
        raise ValueError(f"unsupported transition manifest version {manifest['format_version']}")
    nets = {name: load_dense_net(directory / f"{name}.ckpt") for name in ("enc_vision", "enc_state", "film_mlp", "proj")}
    return StateTransitionNet(lambda1=manifest["lambda1"], **nets)
