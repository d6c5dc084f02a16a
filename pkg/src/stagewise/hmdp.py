"""Tabular hidden-stage machinery.

Exact max-product decoding over discrete stage/observation alphabets,
a greedy per-step approximate decoder driven by an observation posterior,
empirical stage priors, and automated detection of ambiguous frame pairs
(near-identical observations that demand different expert actions).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PROB_TOL = 1e-9


class NoFeasiblePathError(ValueError):
    """Every full-length state sequence has zero probability."""


class ZeroPriorError(ValueError):
    """A stage with zero empirical prior received nonzero posterior mass."""


@dataclass(frozen=True)
class StageDistribution:
    """Probability vector over the ``d_s`` task stages.

    Hard labels are one-hot; soft labels and model predictions may place
    mass on several stages. Entries must lie in [0, 1] and sum to 1
    within ``PROB_TOL``.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if p.ndim != 1 or p.size == 0:
            raise ValueError(f"stage distribution must be a non-empty vector, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("stage distribution contains non-finite entries")
        if p.min() < -1e-12 or p.max() > 1.0 + 1e-12:
            raise ValueError(f"stage probabilities outside [0, 1]: {p}")
        if abs(float(p.sum()) - 1.0) > PROB_TOL:
            raise ValueError(f"stage probabilities sum to {p.sum()!r}, expected 1")

    @classmethod
    def one_hot(cls, stage: int, n_stages: int) -> "StageDistribution":
        if not 0 <= stage < n_stages:
            raise ValueError(f"stage {stage} outside [0, {n_stages})")
        p = np.zeros(n_stages)
        p[stage] = 1.0
        return cls(p)

    @classmethod
    def uniform(cls, n_stages: int) -> "StageDistribution":
        return cls(np.full(n_stages, 1.0 / n_stages))

    @property
    def n_stages(self) -> int:
        return self.probs.size

    @property
    def is_hard(self) -> bool:
        return bool(np.sum(self.probs == 1.0) == 1 and np.sum(self.probs == 0.0) == self.probs.size - 1)

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class TabularHMDP:
    """Tabular hidden-stage decision process over discrete symbols.

    ``prior[s]`` is the initial-stage probability, ``transition[a, s, s']``
    the stage transition probability under action ``a``, and
    ``emission[s, o]`` the probability of observing symbol ``o`` in stage
    ``s``. All rows are probability distributions.
    """

    prior: np.ndarray
    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self):
        prior = np.asarray(self.prior, dtype=float)
        transition = np.asarray(self.transition, dtype=float)
        emission = np.asarray(self.emission, dtype=float)
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "emission", emission)
        if prior.ndim != 1 or transition.ndim != 3 or emission.ndim != 2:
            raise ValueError("prior must be 1-D, transition 3-D (action, state, state), emission 2-D")
        n = prior.size
        if n < 1 or emission.shape[1] < 1:
            raise ValueError("need at least one state and one observation symbol")
        if transition.shape[1:] != (n, n) or emission.shape[0] != n:
            raise ValueError("inconsistent state counts across prior/transition/emission")
        for name, rows in (("prior", prior[None, :]),
                           ("transition", transition.reshape(-1, n)),
                           ("emission", emission)):
            sums = rows.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > PROB_TOL):
                raise ValueError(f"{name} rows must sum to 1 within {PROB_TOL}")
            if rows.min() < 0.0:
                raise ValueError(f"{name} contains negative probabilities")

    @property
    def n_states(self) -> int:
        return self.prior.size

    @property
    def n_obs(self) -> int:
        return self.emission.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True)
class AmbiguityReport:
    """Within-episode frame pairs with matching observations but diverging actions.

    Each entry is ``(episode_id, t1, t2, obs_distance, action_distance)``
    with ``t1 < t2``, ``obs_distance <= obs_tol`` and
    ``action_distance > act_threshold``.
    """

    obs_tol: float
    act_threshold: float
    pairs: list[tuple[int, int, int, float, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    def episodes_flagged(self) -> set[int]:
        return {p[0] for p in self.pairs}


def _validate_sequences(hmdp: TabularHMDP, obs_seq: Sequence[int], action_seq: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    obs = np.asarray(obs_seq, dtype=int)
    acts = np.asarray(action_seq, dtype=int)
    if obs.size == 0:
        raise ValueError("observation sequence is empty")
    if obs.size != acts.size:
        raise ValueError(f"obs/action length mismatch: {obs.size} vs {acts.size}")
    if obs.min() < 0 or obs.max() >= hmdp.n_obs:
        raise ValueError("observation symbol out of range")
    if acts.min() < 0 or acts.max() >= hmdp.n_actions:
        raise ValueError("action id out of range")
    return obs, acts


def path_log_score(hmdp: TabularHMDP, states: Sequence[int], obs_seq: Sequence[int], action_seq: Sequence[int]) -> float:
    """Log-probability of a full state path under the decoding objective.

    The first state is scored against the prior; the transition into step
    ``i`` uses ``action_seq[i - 1]`` (the final action is unused).
    """
    obs, acts = _validate_sequences(hmdp, obs_seq, action_seq)
    s = np.asarray(states, dtype=int)
    if s.size != obs.size:
        raise ValueError("state path length must match the observation sequence")
    with np.errstate(divide="ignore"):
        lp = np.log(hmdp.prior[s[0]]) + np.log(hmdp.emission[s[0], obs[0]])
        for i in range(1, s.size):
            lp += np.log(hmdp.transition[acts[i - 1], s[i - 1], s[i]])
            lp += np.log(hmdp.emission[s[i], obs[i]])
    return float(lp)


def viterbi_decode(hmdp: TabularHMDP, obs_seq: Sequence[int], action_seq: Sequence[int]) -> list[int]:
    """Most probable stage sequence via dynamic programming in log-space.

    Maximizes ``prior(s_0) * prod_i emission(s_i, o_i) *
    transition(a_{i-1}, s_{i-1}, s_i)``. Ties break toward the lowest
    state index. Raises :class:`NoFeasiblePathError` when every
    full-length path has zero probability.
    """
    obs, acts = _validate_sequences(hmdp, obs_seq, action_seq)
    n, T = hmdp.n_states, obs.size
    with np.errstate(divide="ignore"):
        log_prior = np.log(hmdp.prior)
        log_trans = np.log(hmdp.transition)
        log_emis = np.log(hmdp.emission)

    score = log_prior + log_emis[:, obs[0]]
    backptr = np.zeros((T, n), dtype=int)
    for i in range(1, T):
        # cand[s_prev, s] = score so far + transition; argmax picks the
        # lowest previous index on ties.
        cand = score[:, None] + log_trans[acts[i - 1]]
        backptr[i] = np.argmax(cand, axis=0)
        score = cand[backptr[i], np.arange(n)] + log_emis[:, obs[i]]

    best_last = int(np.argmax(score))
    if score[best_last] == -np.inf:
        raise NoFeasiblePathError("all state sequences have zero probability for this trajectory")
    path = [best_last]
    for i in range(T - 1, 0, -1):
        path.append(int(backptr[i, path[-1]]))
    path.reverse()
    return path


def stepwise_decode(
    hmdp: TabularHMDP,
    obs_seq: Sequence[int],
    action_seq: Sequence[int],
    stage_posterior: Callable[[int], StageDistribution],
) -> list[int]:
    """Greedy per-step decoding from an observation posterior.

    Each step maximizes ``[posterior(s_i = k | o_i) / prior(k)] *
    transition(a_{i-1}, s_hat_{i-1}, k)``, conditioning on the previous
    estimate; the marginal observation probability is treated as 1. The
    first step reduces to the posterior argmax because the prior-ratio
    and prior-transition terms cancel.
    """
    obs, acts = _validate_sequences(hmdp, obs_seq, action_seq)
    prior = hmdp.prior
    path: list[int] = []
    for i in range(obs.size):
        post = stage_posterior(int(obs[i])).probs
        if post.size != hmdp.n_states:
            raise ValueError("posterior dimension does not match the state count")
        if np.any((post > 0.0) & (prior == 0.0)):
            raise ZeroPriorError("nonzero posterior mass on a stage with zero prior")
        ratio = np.where(post > 0.0, post / np.where(prior > 0.0, prior, 1.0), 0.0)
        trans_term = prior if i == 0 else hmdp.transition[acts[i - 1], path[-1]]
        path.append(int(np.argmax(ratio * trans_term)))
    return path


def empirical_stage_prior(labeled) -> StageDistribution:
    """Relative stage frequencies over all labeled frames of a dataset.

    ``labeled`` must expose ``episodes`` (each with an integer ``stages``
    array) and ``d_s``; any object following the dataset protocol works.
    """
    counts = np.zeros(labeled.d_s, dtype=float)
    total = 0
    for ep in labeled.episodes:
        if ep.stages is None:
            continue
        stages = np.asarray(ep.stages, dtype=int)
        counts += np.bincount(stages, minlength=labeled.d_s)[: labeled.d_s]
        total += stages.size
    if total == 0:
        raise ValueError("no labeled frames in dataset")
    return StageDistribution(counts / total)


def detect_state_ambiguity(dataset, obs_tol: float, act_threshold: float) -> AmbiguityReport:
    """Report within-episode frame pairs that are observationally identical
    (within ``obs_tol``) yet carry expert actions further apart than
    ``act_threshold``. Each unordered pair appears once, as ``t1 < t2``.
    """
    if obs_tol < 0:
        raise ValueError("obs_tol must be >= 0")
    if act_threshold <= 0:
        raise ValueError("act_threshold must be > 0")
    pairs: list[tuple[int, int, int, float, float]] = []
    for ep_id, ep in enumerate(dataset.episodes):
        O = np.asarray(ep.observations, dtype=float)
        A = np.asarray(ep.actions, dtype=float)
        d_obs = np.linalg.norm(O[:, None, :] - O[None, :, :], axis=-1)
        d_act = np.linalg.norm(A[:, None, :] - A[None, :, :], axis=-1)
        hit = (d_obs <= obs_tol) & (d_act > act_threshold)
        t1s, t2s = np.nonzero(np.triu(hit, k=1))
        for t1, t2 in zip(t1s.tolist(), t2s.tolist()):
            pairs.append((ep_id, t1, t2, float(d_obs[t1, t2]), float(d_act[t1, t2])))
    return AmbiguityReport(obs_tol=obs_tol, act_threshold=act_threshold, pairs=pairs)
