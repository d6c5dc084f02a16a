"""Decoding, priors, and ambiguity detection against independent oracles."""

import itertools

import numpy as np
import pytest

from stagewise.hmdp import (
    AmbiguityReport,
    NoFeasiblePathError,
    StageDistribution,
    TabularHMDP,
    ZeroPriorError,
    detect_state_ambiguity,
    empirical_stage_prior,
    path_log_score,
    stepwise_decode,
    viterbi_decode,
)


def random_hmdp(rng, n_states, n_obs, n_actions=2, sparsity=0.0):
    def rows(shape):
        m = rng.random(shape) + 1e-3
        if sparsity:
            mask = rng.random(shape) < sparsity
            # never zero out an entire row
            mask[..., 0] = False
            m = np.where(mask, 0.0, m)
        return m / m.sum(axis=-1, keepdims=True)

    return TabularHMDP(
        prior=rows((n_states,)),
        transition=rows((n_actions, n_states, n_states)),
        emission=rows((n_states, n_obs)),
    )


def enumerate_best_path(hmdp, obs_seq, action_seq):
    """Brute-force argmax over all state sequences, scored in log-space.

    Log terms accumulate left to right, matching the dynamic program
    term for term. Exact score ties break toward the path whose REVERSED
    state sequence is lexicographically smallest: backtracking from the
    final state, picking the lowest state index at every decision, is
    equivalent to that ordering.
    """
    with np.errstate(divide="ignore"):
        lp0 = np.log(hmdp.prior)
        lt = np.log(hmdp.transition)
        le = np.log(hmdp.emission)
    best_path, best_score, best_key = None, -np.inf, None
    for path in itertools.product(range(hmdp.n_states), repeat=len(obs_seq)):
        score = lp0[path[0]] + le[path[0], obs_seq[0]]
        for i in range(1, len(obs_seq)):
            score = score + lt[action_seq[i - 1], path[i - 1], path[i]]
            score = score + le[path[i], obs_seq[i]]
        key = tuple(reversed(path))
        if score > best_score or (score == best_score and key < best_key):
            best_path, best_score, best_key = path, score, key
    return list(best_path), best_score


class TestStageDistribution:
    def test_one_hot_is_hard(self):
        d = StageDistribution.one_hot(2, 4)
        assert d.is_hard and d.argmax() == 2

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            StageDistribution(np.array([0.5, 0.6]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            StageDistribution(np.array([-0.1, 1.1]))

    def test_uniform(self):
        assert np.allclose(StageDistribution.uniform(4).probs, 0.25)


class TestTabularHMDP:
    def test_rejects_unnormalized_rows(self):
        with pytest.raises(ValueError):
            TabularHMDP(
                prior=np.array([0.5, 0.5]),
                transition=np.array([[[0.7, 0.2], [0.5, 0.5]]]),
                emission=np.eye(2),
            )

    def test_counts(self):
        h = random_hmdp(np.random.default_rng(0), 3, 4, n_actions=2)
        assert (h.n_states, h.n_obs, h.n_actions) == (3, 4, 2)


class TestViterbi:
    def test_single_state(self):
        h = TabularHMDP(
            prior=np.array([1.0]),
            transition=np.ones((1, 1, 1)),
            emission=np.full((1, 3), 1.0 / 3),
        )
        assert viterbi_decode(h, [0, 1, 2, 2, 0], [0] * 5) == [0, 0, 0, 0, 0]

    def test_deterministic_emissions_force_path(self):
        # state k emits symbol k with probability 1
        h = TabularHMDP(
            prior=np.full(3, 1.0 / 3),
            transition=np.full((1, 3, 3), 1.0 / 3),
            emission=np.eye(3),
        )
        assert viterbi_decode(h, [2, 0, 1], [0, 0, 0]) == [2, 0, 1]

    def test_matches_exhaustive_enumeration(self):
        rng = np.random.default_rng(42)
        for _ in range(40):
            n_states = int(rng.integers(2, 4))
            h = random_hmdp(rng, n_states, 3, n_actions=2)
            T = 6
            obs = rng.integers(0, 3, T).tolist()
            acts = rng.integers(0, 2, T).tolist()
            expected, _ = enumerate_best_path(h, obs, acts)
            assert viterbi_decode(h, obs, acts) == expected

    def test_no_feasible_path(self):
        h = TabularHMDP(
            prior=np.array([1.0, 0.0]),
            transition=np.stack([np.eye(2)]),
            emission=np.array([[1.0, 0.0], [0.0, 1.0]]),
        )
        # state 0 can never emit symbol 1 and state 1 is unreachable
        with pytest.raises(NoFeasiblePathError):
            viterbi_decode(h, [0, 1], [0, 0])

    def test_log_and_direct_scoring_agree(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            h = random_hmdp(rng, 4, 3)
            T = 8
            obs = rng.integers(0, 3, T).tolist()
            acts = rng.integers(0, 2, T).tolist()
            path = viterbi_decode(h, obs, acts)
            direct = h.prior[path[0]] * h.emission[path[0], obs[0]]
            for i in range(1, T):
                direct *= h.transition[acts[i - 1], path[i - 1], path[i]]
                direct *= h.emission[path[i], obs[i]]
            log_score = path_log_score(h, path, obs, acts)
            assert np.isclose(np.exp(log_score), direct, rtol=1e-9)

    def test_length_mismatch(self):
        h = random_hmdp(np.random.default_rng(0), 2, 2)
        with pytest.raises(ValueError):
            viterbi_decode(h, [0, 1], [0])


class TestStepwiseDecode:
    def test_matches_viterbi_with_deterministic_structure(self):
        # Deterministic emissions and a cyclic deterministic transition:
        # the observations pin down the whole path for both decoders.
        n = 3
        cycle = np.zeros((1, n, n))
        for s in range(n):
            cycle[0, s, (s + 1) % n] = 1.0
        h = TabularHMDP(prior=np.full(n, 1.0 / n), transition=cycle, emission=np.eye(n))

        def posterior(obs_symbol):
            # exact Bayes inversion of the emission row under a uniform prior
            lik = h.emission[:, obs_symbol] * h.prior
            return StageDistribution(lik / lik.sum())

        obs = [1, 2, 0, 1, 2]
        acts = [0] * 5
        assert stepwise_decode(h, obs, acts, posterior) == viterbi_decode(h, obs, acts)

    def test_single_state_constant(self):
        h = TabularHMDP(prior=np.array([1.0]), transition=np.ones((1, 1, 1)), emission=np.full((1, 2), 0.5))
        out = stepwise_decode(h, [0, 1, 0], [0, 0, 0], lambda o: StageDistribution(np.array([1.0])))
        assert out == [0, 0, 0]

    def test_uniform_posterior_follows_transition_argmax(self):
        # Hand-computed 2-state chain: uniform posterior cancels, so the
        # decoder starts at state 0 (tie toward lowest id) and then tracks
        # argmax_k transition[a, prev, k].
        trans = np.array([[[0.3, 0.7], [0.6, 0.4]]])
        h = TabularHMDP(prior=np.array([0.5, 0.5]), transition=trans, emission=np.full((2, 2), 0.5))
        uniform = lambda o: StageDistribution(np.array([0.5, 0.5]))
        # t0: tie -> 0; t1: argmax trans[0,0] = 1; t2: argmax trans[0,1] = 0; t3: -> 1
        assert stepwise_decode(h, [0, 0, 0, 0], [0, 0, 0, 0], uniform) == [0, 1, 0, 1]

    def test_zero_prior_guard(self):
        h = TabularHMDP(
            prior=np.array([1.0, 0.0]),
            transition=np.full((1, 2, 2), 0.5),
            emission=np.full((2, 2), 0.5),
        )
        posterior = lambda o: StageDistribution(np.array([0.2, 0.8]))
        with pytest.raises(ZeroPriorError):
            stepwise_decode(h, [0, 1], [0, 0], posterior)


class _FakeEpisode:
    def __init__(self, obs=None, actions=None, stages=None):
        self.observations = obs
        self.actions = actions
        self.stages = stages


class _FakeDataset:
    def __init__(self, episodes, d_s):
        self.episodes = episodes
        self.d_s = d_s


class TestEmpiricalStagePrior:
    def test_all_one_stage(self):
        ds = _FakeDataset([_FakeEpisode(stages=np.zeros(10, dtype=int))], d_s=2)
        assert np.allclose(empirical_stage_prior(ds).probs, [1.0, 0.0])

    def test_direct_count(self):
        ds = _FakeDataset([_FakeEpisode(stages=np.array([0, 0, 1, 1, 1, 1]))], d_s=2)
        assert np.allclose(empirical_stage_prior(ds).probs, [1 / 3, 2 / 3])

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            empirical_stage_prior(_FakeDataset([_FakeEpisode(stages=None)], d_s=2))

    def test_output_is_valid_distribution(self):
        rng = np.random.default_rng(3)
        eps = [_FakeEpisode(stages=rng.integers(0, 4, rng.integers(1, 30))) for _ in range(5)]
        prior = empirical_stage_prior(_FakeDataset(eps, d_s=4))
        assert isinstance(prior, StageDistribution)


class TestDetectStateAmbiguity:
    def _dataset(self, obs, actions):
        return _FakeDataset([_FakeEpisode(obs=np.asarray(obs, float), actions=np.asarray(actions, float))], d_s=2)

    def test_unique_observations_empty_report(self):
        obs = np.arange(12.0).reshape(4, 3)
        acts = np.zeros((4, 2))
        report = detect_state_ambiguity(self._dataset(obs, acts), obs_tol=0.5, act_threshold=0.1)
        assert len(report) == 0

    def test_identical_obs_different_actions_flagged(self):
        obs = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 4.0]])
        acts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
        report = detect_state_ambiguity(self._dataset(obs, acts), obs_tol=1e-9, act_threshold=0.5)
        assert report.pairs == [(0, 0, 1, 0.0, 1.0)]

    def test_identical_obs_identical_actions_not_flagged(self):
        obs = np.array([[1.0, 2.0], [1.0, 2.0]])
        acts = np.array([[0.3, 0.0], [0.3, 0.0]])
        report = detect_state_ambiguity(self._dataset(obs, acts), obs_tol=1e-9, act_threshold=0.01)
        assert len(report) == 0

    def test_each_unordered_pair_reported_once_with_t1_lt_t2(self):
        rng = np.random.default_rng(11)
        obs = np.repeat(rng.random((1, 3)), 4, axis=0)
        acts = rng.random((4, 2)) * 10
        report = detect_state_ambiguity(self._dataset(obs, acts), obs_tol=1e-9, act_threshold=0.1)
        seen = set()
        for ep, t1, t2, d_o, d_a in report.pairs:
            assert t1 < t2
            assert (t1, t2) not in seen
            seen.add((t1, t2))
            assert d_o <= 1e-9 and d_a > 0.1
        assert len(report) == 6  # C(4, 2)

    def test_reported_distances_respect_thresholds(self):
        rng = np.random.default_rng(5)
        obs = rng.random((20, 4))
        acts = rng.random((20, 3))
        report = detect_state_ambiguity(self._dataset(obs, acts), obs_tol=0.4, act_threshold=0.3)
        for _, _, _, d_o, d_a in report.pairs:
            assert d_o <= 0.4 and d_a > 0.3

    def test_report_type(self):
        ds = self._dataset(np.zeros((2, 2)), np.zeros((2, 2)))
        assert isinstance(detect_state_ambiguity(ds, 0.1, 0.1), AmbiguityReport)
