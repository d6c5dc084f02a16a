"""Diffusion action policy with stage-aware classifier-free guidance.

Action chunks are generated by iterative denoising from Gaussian noise.
The denoiser is trained to predict injected noise under two conditioning
modes: the stage-aware fused feature ``m`` and, with probability
``p_drop``, the raw observation embedding ``e``. At inference both
predictions combine via a guidance scale ``w`` so the same observation
under different inferred stages yields distinct actions. Actions are
normalized by the actuation bound for diffusion and de-normalized on the
way out.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .hmdp import StageDistribution
from .nn import (
    DenseNet,
    adam_init,
    backward,
    forward,
    kl_reward_rows,
    load_dense_net,
    net_params,
    optimizer_step,
    save_dense_net,
    softmax_rows,
)
from .transition import (
    StateTransitionNet,
    create_transition_net,
    load_transition_net,
    save_transition_net,
    transition_backward,
    transition_forward,
    transition_params,
    transition_training_arrays,
)

POLICY_BUNDLE_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule with the reverse-update coefficients.

    Arrays are indexed by the diffusion step ``k`` in ``[1, K]``; index 0
    is a placeholder except for ``alpha_bar[0] = 1``. ``sigma[1]`` is
    forced to zero so the final reverse step is deterministic.
    """

    betas: np.ndarray
    alphas_ddpm: np.ndarray
    alpha_bar: np.ndarray
    alpha_coef: np.ndarray   # 1 / sqrt(1 - beta_k)
    gamma_coef: np.ndarray   # beta_k / sqrt(1 - alpha_bar_k)
    sigma: np.ndarray        # sqrt(beta_k), sigma_1 = 0

    @property
    def K(self) -> int:
        return self.betas.size - 1


def build_schedule(K: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if K < 1:
        raise ValueError("need at least one diffusion step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, K)])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    alpha_coef = np.zeros(K + 1)
    gamma_coef = np.zeros(K + 1)
    sigma = np.zeros(K + 1)
    ks = np.arange(1, K + 1)
    alpha_coef[ks] = 1.0 / np.sqrt(alphas[ks])
    gamma_coef[ks] = betas[ks] / np.sqrt(1.0 - alpha_bar[ks])
    sigma[ks] = np.sqrt(betas[ks])
    sigma[1] = 0.0
    return NoiseSchedule(betas, alphas, alpha_bar, alpha_coef, gamma_coef, sigma)


def forward_diffuse(schedule: NoiseSchedule, a0: np.ndarray, k: int, eps: np.ndarray) -> np.ndarray:
    """Noised sample ``sqrt(abar_k) * a0 + sqrt(1 - abar_k) * eps``."""
    if not 1 <= k <= schedule.K:
        raise ValueError(f"step {k} outside [1, {schedule.K}]")
    a0 = np.asarray(a0, float)
    eps = np.asarray(eps, float)
    if a0.shape != eps.shape:
        raise ValueError("noise must match the action chunk shape")
    return np.sqrt(schedule.alpha_bar[k]) * a0 + np.sqrt(1.0 - schedule.alpha_bar[k]) * eps


def cfg_combine(eps_aware: np.ndarray, eps_agnostic: np.ndarray, w: float) -> np.ndarray:
    """Guided prediction: aware + w * (aware - agnostic)."""
    eps_aware = np.asarray(eps_aware, float)
    eps_agnostic = np.asarray(eps_agnostic, float)
    if eps_aware.shape != eps_agnostic.shape:
        raise ValueError("branch predictions must have equal shape")
    return eps_aware + w * (eps_aware - eps_agnostic)


def timestep_embedding(ks: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion step indices (row per step)."""
    ks = np.atleast_1d(np.asarray(ks, float))
    half = dim // 2
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = np.exp(-np.log(10000.0) * exponents)
    angles = ks[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class Denoiser:
    """Noise-prediction network over (conditioning, noisy chunk, step embedding)."""

    net: DenseNet
    chunk_len: int
    action_dim: int
    t_embed_dim: int = 16

    def __post_init__(self):
        if self.net.output_dim != self.chunk_size:
            raise ValueError("denoiser output must match the flattened action chunk")

    @property
    def chunk_size(self) -> int:
        return self.chunk_len * self.action_dim

    @property
    def cond_dim(self) -> int:
        return self.net.input_dim - self.chunk_size - self.t_embed_dim


def create_denoiser(
    cond_dim: int,
    action_dim: int,
    chunk_len: int,
    rng: np.random.Generator,
    hidden: int = 64,
    depth: int = 2,
    t_embed_dim: int = 16,
) -> Denoiser:
    chunk = action_dim * chunk_len
    net = DenseNet.create([cond_dim + chunk + t_embed_dim, *([hidden] * depth), chunk], rng)
    return Denoiser(net, chunk_len, action_dim, t_embed_dim)


def denoiser_forward(denoiser: Denoiser, cond: np.ndarray, a_k: np.ndarray, ks: np.ndarray):
    """Batched noise prediction; returns predictions and the backward cache."""
    emb = timestep_embedding(ks, denoiser.t_embed_dim)
    U = np.concatenate([np.atleast_2d(cond), np.atleast_2d(a_k), emb], axis=1)
    return forward(denoiser.net, U)


def reverse_update(
    schedule: NoiseSchedule, a_k: np.ndarray, k: int, eps_hat: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """One reverse step ``alpha_k (a_k - gamma_k eps_hat) + sigma_k z``.

    ``z`` is standard normal, omitted at the final step where ``sigma_1``
    is zero.
    """
    mean = schedule.alpha_coef[k] * (a_k - schedule.gamma_coef[k] * eps_hat)
    if k > 1:
        mean = mean + schedule.sigma[k] * rng.standard_normal(a_k.shape)
    return mean


def denoise_step(schedule, denoiser, cond: np.ndarray, a_k: np.ndarray, k: int, rng) -> np.ndarray:
    """Predict noise (model or callable oracle) and apply the reverse update."""
    if isinstance(denoiser, Denoiser):
        eps_hat, _ = denoiser_forward(denoiser, cond, a_k, np.array([k]))
        eps_hat = eps_hat[0]
    else:
        eps_hat = denoiser(cond, a_k, k)
    return reverse_update(schedule, a_k, k, eps_hat, rng)


@dataclass(frozen=True)
class PolicyConfig:
    # betas are the standard linear-schedule endpoints scaled by 1000/K so
    # the forward process still reaches (near-)pure noise at step K.
    # chunk_len > 1 is supported, but the default predicts a single action:
    # longer chunks straddle event-dependent phase switches whose timing is
    # not a function of the conditioning, which leaks prediction noise into
    # the executed first action.
    p_drop: float = 0.1
    w: float = 2.0
    diffusion_steps: int = 50
    chunk_len: int = 1
    lambda2: float = 1.0
    beta_start: float = 2e-3
    beta_end: float = 0.4
    action_scale: float = 0.2
    t_embed_dim: int = 16

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError("p_drop must lie in [0, 1)")
        if self.w < 0.0 or self.lambda2 < 0.0:
            raise ValueError("guidance scale and action-reward weight must be >= 0")
        if self.chunk_len < 1 or self.diffusion_steps < 1:
            raise ValueError("chunk length and diffusion steps must be >= 1")
        if self.action_scale <= 0.0:
            raise ValueError("action scale must be positive")


@dataclass
class StateAwarePolicy:
    """Decision agent: stage estimator + guided diffusion denoiser."""

    transition: StateTransitionNet
    denoiser: Denoiser
    schedule: NoiseSchedule
    config: PolicyConfig

    def __post_init__(self):
        if self.denoiser.cond_dim != self.transition.embed_dim:
            raise ValueError("denoiser conditioning must match the transition embedding dimension")

    @property
    def d_s(self) -> int:
        return self.transition.d_s


@dataclass
class DiffusionPolicyBaseline:
    """Stage-agnostic diffusion policy: observation embedding only."""

    enc_vision: DenseNet
    denoiser: Denoiser
    schedule: NoiseSchedule
    config: PolicyConfig

    def __post_init__(self):
        if self.denoiser.cond_dim != self.enc_vision.output_dim:
            raise ValueError("denoiser conditioning must match the vision embedding dimension")


def create_policy(
    d_o: int,
    d_s: int,
    action_dim: int,
    rng: np.random.Generator,
    config: PolicyConfig | None = None,
    embed_dim: int = 64,
    state_embed_dim: int = 32,
    hidden: int = 64,
    depth: int = 2,
    lambda1: float = 0.5,
) -> StateAwarePolicy:
    config = config or PolicyConfig()
    transition = create_transition_net(
        d_o, d_s, rng, embed_dim=embed_dim, state_embed_dim=state_embed_dim, hidden=hidden, depth=depth, lambda1=lambda1
    )
    denoiser = create_denoiser(embed_dim, action_dim, config.chunk_len, rng, hidden=hidden, depth=depth,
                               t_embed_dim=config.t_embed_dim)
    schedule = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    return StateAwarePolicy(transition, denoiser, schedule, config)


def create_baseline(
    d_o: int,
    action_dim: int,
    rng: np.random.Generator,
    config: PolicyConfig | None = None,
    embed_dim: int = 64,
    hidden: int = 64,
    depth: int = 2,
) -> DiffusionPolicyBaseline:
    config = config or PolicyConfig()
    enc_vision = DenseNet.create([d_o, *([hidden] * depth), embed_dim], rng)
    denoiser = create_denoiser(embed_dim, action_dim, config.chunk_len, rng, hidden=hidden, depth=depth,
                               t_embed_dim=config.t_embed_dim)
    schedule = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    return DiffusionPolicyBaseline(enc_vision, denoiser, schedule, config)


def _reverse_chain(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    cond_aware: np.ndarray,
    cond_agnostic: np.ndarray,
    w: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Full reverse chain with guided predictions; fixed rng call pattern."""
    a = rng.standard_normal(denoiser.chunk_size)
    conds = np.stack([cond_aware, cond_agnostic])
    for k in range(schedule.K, 0, -1):
        eps_pair, _ = denoiser_forward(denoiser, conds, np.stack([a, a]), np.array([k, k]))
        eps_hat = cfg_combine(eps_pair[0], eps_pair[1], w)
        a = reverse_update(schedule, a, k, eps_hat, rng)
    return a


def sample_action(
    policy: StateAwarePolicy,
    o: np.ndarray,
    s_prev: StageDistribution,
    rng: np.random.Generator,
    s_override: StageDistribution | None = None,
) -> tuple[np.ndarray, StageDistribution]:
    """Sample an action chunk conditioned on the inferred stage.

    Returns the de-normalized chunk ``(chunk_len, action_dim)`` (execute
    the first row, receding-horizon style) and the new stage estimate.
    ``s_override`` replaces the recurrent stage input, bypassing the
    transition net's own estimate (intervention experiments).
    """
    tr = policy.transition
    state_in = (s_override if s_override is not None else s_prev).probs
    logits, cache = transition_forward(tr, np.asarray(o, float), state_in)
    s_next = StageDistribution(softmax_rows(logits))
    a0 = _reverse_chain(policy.denoiser, policy.schedule, cache.m, cache.e, policy.config.w, rng)
    chunk = a0.reshape(policy.denoiser.chunk_len, policy.denoiser.action_dim) * policy.config.action_scale
    return chunk, s_next


def sample_action_baseline(
    baseline: DiffusionPolicyBaseline, o: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    e, _ = forward(baseline.enc_vision, np.asarray(o, float))
    a0 = _reverse_chain(baseline.denoiser, baseline.schedule, e, e, 0.0, rng)
    return a0.reshape(baseline.denoiser.chunk_len, baseline.denoiser.action_dim) * baseline.config.action_scale


def _action_chunks(dataset: Dataset, chunk_len: int, action_scale: float) -> np.ndarray:
    """Per-frame normalized action chunks, padded by repeating the last action."""
    rows = []
    for ep in dataset.episodes:
        T = len(ep)
        acts = ep.actions / action_scale
        for t in range(T):
            window = acts[t : t + chunk_len]
            if window.shape[0] < chunk_len:
                pad = np.repeat(window[-1:], chunk_len - window.shape[0], axis=0)
                window = np.vstack([window, pad])
            rows.append(window.reshape(-1))
    return np.array(rows)


@dataclass
class PolicyTrainResult:
    stage_reward_curve: list[float]
    action_reward_curve: list[float]
    n_aware: int
    n_agnostic: int


def joint_loss_and_grads(
    policy: StateAwarePolicy,
    O: np.ndarray,
    S_prev: np.ndarray,
    S_target: np.ndarray,
    a_k: np.ndarray,
    ks: np.ndarray,
    eps: np.ndarray,
    drop: np.ndarray,
) -> tuple[float, float, list[np.ndarray]]:
    """One training step's rewards and parameter gradients.

    Returns the summed stage reward, summed action reward, and gradients
    of the mean total loss aligned with
    ``transition_params(tr) + net_params(denoiser.net)``.
    """
    tr, den, cfg = policy.transition, policy.denoiser, policy.config
    B, d_a = O.shape[0], den.action_dim
    logits, tcache = transition_forward(tr, O, S_prev)
    probs = softmax_rows(logits)
    cond = np.where(drop[:, None], tcache.e, tcache.m)
    eps_hat, dcache = denoiser_forward(den, cond, a_k, ks)

    stage_reward = float(np.sum(kl_reward_rows(S_target, probs)))
    action_reward = float(-np.sum((eps - eps_hat) ** 2) / d_a)

    dlogits = (probs - S_target) / B
    deps_hat = cfg.lambda2 * 2.0 * (eps_hat - eps) / (d_a * B)
    den_grads, dU = backward(den.net, dcache, deps_hat)
    dcond = dU[:, : den.cond_dim]
    dm_extra = np.where(drop[:, None], 0.0, dcond)
    de_extra = np.where(drop[:, None], dcond, 0.0)
    tgrads = transition_backward(tr, tcache, dlogits, dm_extra=dm_extra, de_extra=de_extra)
    return stage_reward, action_reward, tgrads.flat() + den_grads.flat()


def train_policy(
    policy: StateAwarePolicy,
    labeled: Dataset,
    epochs: int = 20,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> PolicyTrainResult:
    """Joint gradient ascent on stage and noise-prediction rewards.

    Every step samples a diffusion step and noise per frame, forms the
    noised chunk, and conditions the denoiser on the raw embedding with
    probability ``p_drop`` (stage-agnostic branch) or the fused feature
    otherwise. The total reward is the stage reward plus ``lambda2``
    times the action reward, optimized over transition and denoiser
    parameters together. Soft stage labels are consumed directly when
    present.
    """
    cfg = policy.config
    tr, den, schedule = policy.transition, policy.denoiser, policy.schedule
    O, S_prev, S_target = transition_training_arrays(labeled, tr.d_s, use_soft=True)
    A0 = _action_chunks(labeled, cfg.chunk_len, cfg.action_scale)
    params = transition_params(tr) + net_params(den.net)
    opt = adam_init(params, lr)
    rng = np.random.default_rng(seed)
    n = O.shape[0]
    stage_curve, action_curve = [], []
    n_aware = n_agnostic = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        stage_sum = action_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            B = idx.size
            ks = rng.integers(1, schedule.K + 1, B)
            eps = rng.standard_normal((B, den.chunk_size))
            root_ab = np.sqrt(schedule.alpha_bar[ks])[:, None]
            root_1mab = np.sqrt(1.0 - schedule.alpha_bar[ks])[:, None]
            a_k = root_ab * A0[idx] + root_1mab * eps
            drop = rng.random(B) < cfg.p_drop
            n_agnostic += int(drop.sum())
            n_aware += int(B - drop.sum())

            stage_r, action_r, grads = joint_loss_and_grads(
                policy, O[idx], S_prev[idx], S_target[idx], a_k, ks, eps, drop
            )
            stage_sum += stage_r
            action_sum += action_r
            optimizer_step(params, grads, opt)
        stage_curve.append(stage_sum / n)
        action_curve.append(action_sum / n)
    return PolicyTrainResult(stage_curve, action_curve, n_aware, n_agnostic)


@dataclass
class BaselineTrainResult:
    action_reward_curve: list[float]


def train_baseline(
    baseline: DiffusionPolicyBaseline,
    dataset: Dataset,
    epochs: int = 20,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 64,
) -> BaselineTrainResult:
    """Noise-prediction training with conditioning fixed to the observation
    embedding; stage labels are never read.
    """
    cfg = baseline.config
    den, schedule = baseline.denoiser, baseline.schedule
    O = np.vstack([ep.observations for ep in dataset.episodes])
    A0 = _action_chunks(dataset, cfg.chunk_len, cfg.action_scale)
    params = net_params(baseline.enc_vision) + net_params(den.net)
    opt = adam_init(params, lr)
    rng = np.random.default_rng(seed)
    n = O.shape[0]
    d_a = den.action_dim
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        action_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            B = idx.size
            ks = rng.integers(1, schedule.K + 1, B)
            eps = rng.standard_normal((B, den.chunk_size))
            a_k = np.sqrt(schedule.alpha_bar[ks])[:, None] * A0[idx] + np.sqrt(
                1.0 - schedule.alpha_bar[ks]
            )[:, None] * eps
            e, ecache = forward(baseline.enc_vision, O[idx])
            eps_hat, dcache = denoiser_forward(den, e, a_k, ks)
            action_sum += float(-np.sum((eps - eps_hat) ** 2) / d_a)
            deps_hat = 2.0 * (eps_hat - eps) / (d_a * B)
            den_grads, dU = backward(den.net, dcache, deps_hat)
            egrads, _ = backward(baseline.enc_vision, ecache, dU[:, : den.cond_dim])
            optimizer_step(params, egrads.flat() + den_grads.flat(), opt)
        curve.append(action_sum / n)
    return BaselineTrainResult(curve)


def _schedule_record(config: PolicyConfig) -> dict:
    return {"format_version": POLICY_BUNDLE_VERSION, "config": asdict(config)}


def save_policy(policy: StateAwarePolicy, directory) -> None:
    """Versioned bundle: transition manifest + denoiser checkpoint + config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_transition_net(policy.transition, directory / "transition")
    save_dense_net(policy.denoiser.net, directory / "denoiser.ckpt")
    record = _schedule_record(policy.config)
    record["denoiser"] = {
        "chunk_len": policy.denoiser.chunk_len,
        "action_dim": policy.denoiser.action_dim,
        "t_embed_dim": policy.denoiser.t_embed_dim,
    }
    record["kind"] = "state_aware"
    (directory / "policy.json").write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")


def load_policy(directory) -> StateAwarePolicy:
    directory = Path(directory)
    record = json.loads((directory / "policy.json").read_text(encoding="utf-8"))
    if record["format_version"] != POLICY_BUNDLE_VERSION:
        raise ValueError(f"unsupported policy bundle version {record['format_version']}")
    config = PolicyConfig(**record["config"])
    transition = load_transition_net(directory / "transition")
    den = Denoiser(load_dense_net(directory / "denoiser.ckpt"), **record["denoiser"])
    schedule = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    return StateAwarePolicy(transition, den, schedule, config)


def save_baseline(baseline: DiffusionPolicyBaseline, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_dense_net(baseline.enc_vision, directory / "enc_vision.ckpt")
    save_dense_net(baseline.denoiser.net, directory / "denoiser.ckpt")
    record = _schedule_record(baseline.config)
    record["denoiser"] = {
        "chunk_len": baseline.denoiser.chunk_len,
        "action_dim": baseline.denoiser.action_dim,
        "t_embed_dim": baseline.denoiser.t_embed_dim,
    }
    record["kind"] = "baseline"
    (directory / "policy.json").write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")


def load_baseline(directory) -> DiffusionPolicyBaseline:
    directory = Path(directory)
    record = json.loads((directory / "policy.json").read_text(encoding="utf-8"))
    if record["format_version"] != POLICY_BUNDLE_VERSION:
        raise ValueError(f"unsupported policy bundle version {record['format_version']}")
    config = PolicyConfig(**record["config"])
    enc_vision = load_dense_net(directory / "enc_vision.ckpt")
    den = Denoiser(load_dense_net(directory / "denoiser.ckpt"), **record["denoiser"])
    schedule = build_schedule(config.diffusion_steps, config.beta_start, config.beta_end)
    return DiffusionPolicyBaseline(enc_vision, den, schedule, config)
