"""Stage estimator: encoding, fusion arithmetic, training, and causality."""

import numpy as np
import pytest

from stagewise import nn
from stagewise.data import Dataset, Episode
from stagewise.envs import TaskSpec, generate_dataset, make_task
from stagewise.hmdp import StageDistribution
from stagewise.nn import softmax_rows
from stagewise.transition import (
    create_transition_net,
    encode_observation,
    encode_state,
    film_fuse,
    film_modulate,
    infer_sequence,
    infer_sequence_probs,
    load_transition_net,
    predict_stage,
    save_transition_net,
    train_transition,
    transition_backward,
    transition_forward,
    transition_params,
)


def small_net(rng, d_o=6, d_s=3, embed=8, state_embed=4, hidden=8, depth=1, lambda1=0.5):
    return create_transition_net(
        d_o, d_s, rng, embed_dim=embed, state_embed_dim=state_embed, hidden=hidden, depth=depth, lambda1=lambda1
    )


def oracle_labeled(dataset):
    """Attach the simulator's ground-truth stages as training labels."""
    episodes = []
    for ep in dataset.episodes:
        episodes.append(
            Episode(ep.observations, ep.actions, stages=ep.true_stages(), label_source="manual", meta=ep.meta)
        )
    return dataset.with_episodes(episodes)


@pytest.fixture(scope="module")
def push_buttons_fixture():
    """A transition net trained on oracle-labeled demonstrations."""
    env = make_task(TaskSpec("push_buttons"))
    labeled = oracle_labeled(generate_dataset(env, 40, seed=21))
    held_out = oracle_labeled(generate_dataset(env, 8, seed=901))
    net = create_transition_net(labeled.d_o, labeled.d_s, np.random.default_rng(0))
    train_transition(net, labeled, loss_mode="hard_ce", epochs=25, seed=1)
    return net, labeled, held_out


class TestEncoders:
    def test_encode_observation_deterministic(self):
        net = small_net(np.random.default_rng(0))
        o = np.random.default_rng(1).random(6)
        assert np.array_equal(encode_observation(net, o), encode_observation(net, o))

    def test_embedding_dimension(self):
        net = create_transition_net(12, 3, np.random.default_rng(0), embed_dim=64)
        assert encode_observation(net, np.zeros(12)).shape == (64,)

    def test_matches_independent_forward(self):
        net = small_net(np.random.default_rng(2))
        o = np.random.default_rng(3).standard_normal(6)
        h = o.copy()
        for W, b, act in zip(net.enc_vision.weights, net.enc_vision.biases, net.enc_vision.activations):
            h = W @ h + b
            if act == "relu":
                h = np.maximum(h, 0.0)
        assert np.allclose(encode_observation(net, o), h, atol=1e-12)

    def test_encode_state_accepts_soft_and_hard(self):
        net = small_net(np.random.default_rng(4))
        hard = encode_state(net, StageDistribution.one_hot(1, 3))
        soft = encode_state(net, StageDistribution(np.array([0.2, 0.5, 0.3])))
        assert hard.shape == soft.shape == (4,)


class TestFilmFusion:
    def test_lambda_zero_is_identity(self):
        net = small_net(np.random.default_rng(5), lambda1=0.0)
        rng = np.random.default_rng(6)
        e, h = rng.standard_normal(8), rng.standard_normal(4)
        assert np.array_equal(film_fuse(net, e, h), e)

    def test_identity_modulation(self):
        e = np.array([3.0, -2.0, 0.5])
        for lam in (0.0, 1.0):
            assert np.array_equal(film_modulate(e, np.ones(3), np.zeros(3), lam), e)
        # intermediate blends are identical up to one rounding step
        assert np.allclose(film_modulate(e, np.ones(3), np.zeros(3), 0.3), e, rtol=1e-15)

    def test_fusion_arithmetic(self):
        m = film_modulate(np.array([2.0, -1.0]), np.array([3.0, 0.5]), np.array([1.0, 1.0]), 0.5)
        assert np.allclose(m, [4.5, -0.25])


class TestPredictStage:
    def test_output_is_distribution(self):
        net = small_net(np.random.default_rng(7))
        pred = predict_stage(net, np.random.default_rng(8).standard_normal(8))
        assert isinstance(pred, StageDistribution)

    def test_zero_projector_uniform(self):
        net = small_net(np.random.default_rng(9))
        for W, b in zip(net.proj.weights, net.proj.biases):
            W[:] = 0.0
            b[:] = 0.0
        pred = predict_stage(net, np.random.default_rng(10).standard_normal(8))
        assert np.allclose(pred.probs, 1.0 / 3)

    def test_separable_toy_data(self):
        # three well-separated observation clusters, stage = cluster id;
        # previous-stage input is uninformative here
        rng = np.random.default_rng(11)
        centers = np.array([[4.0, 0, 0, 0, 0, 0], [0, 4.0, 0, 0, 0, 0], [0, 0, 4.0, 0, 0, 0]])
        obs = np.vstack([centers[i] + 0.05 * rng.standard_normal((40, 6)) for i in range(3)])
        stages = np.repeat([0, 1, 2], 40)
        ep = Episode(obs, np.zeros((120, 2)), stages=stages)
        ds = Dataset([ep], "toy", "standard", 3)
        net = small_net(np.random.default_rng(12), hidden=16, depth=2)
        train_transition(net, ds, loss_mode="hard_ce", epochs=60, seed=0)
        logits, _ = transition_forward(net, obs, np.full((120, 3), 1.0 / 3))
        acc = float(np.mean(np.argmax(logits, axis=1) == stages))
        assert acc >= 0.99


class TestInferSequence:
    def test_length_preserved(self):
        net = small_net(np.random.default_rng(13))
        obs = np.random.default_rng(14).random((17, 6))
        assert len(infer_sequence(net, obs)) == 17

    def test_deterministic(self):
        net = small_net(np.random.default_rng(15))
        obs = np.random.default_rng(16).random((9, 6))
        a = infer_sequence_probs(net, obs, np.array([1.0, 0.0, 0.0]))
        b = infer_sequence_probs(net, obs, np.array([1.0, 0.0, 0.0]))
        assert np.array_equal(a, b)

    def test_tracks_held_out_stages(self, push_buttons_fixture):
        net, _, held_out = push_buttons_fixture
        accs = []
        for ep in held_out.episodes:
            probs = infer_sequence_probs(net, ep.observations, np.eye(3)[0])
            accs.append(float(np.mean(np.argmax(probs, axis=1) == ep.stages)))
        assert np.mean(accs) >= 0.95


class TestTrainTransition:
    def _toy_dataset(self, rng, n_eps=1, T=30, d_o=6, d_s=3):
        eps = []
        for _ in range(n_eps):
            obs = rng.random((T, d_o))
            stages = np.sort(rng.integers(0, d_s, T))
            eps.append(Episode(obs, np.zeros((T, 2)), stages=stages))
        return Dataset(eps, "toy", "standard", d_s)

    def test_single_episode_memorization(self):
        ds = self._toy_dataset(np.random.default_rng(17))
        net = small_net(np.random.default_rng(18), hidden=32, depth=2)
        result = train_transition(net, ds, loss_mode="hard_ce", epochs=200, seed=0, lr=3e-3)
        assert result.reward_curve[-1] >= -0.01

    def test_soft_kl_with_one_hot_equals_hard_ce(self):
        rng = np.random.default_rng(19)
        ds = self._toy_dataset(rng)
        for ep in ds.episodes:
            one_hot = np.zeros((len(ep), 3))
            one_hot[np.arange(len(ep)), ep.stages] = 1.0
            ep.soft_stages = one_hot
        net_a = small_net(np.random.default_rng(20))
        net_b = small_net(np.random.default_rng(20))
        r_a = train_transition(net_a, ds, loss_mode="hard_ce", epochs=5, seed=3)
        r_b = train_transition(net_b, ds, loss_mode="soft_kl", epochs=5, seed=3)
        assert np.allclose(r_a.reward_curve, r_b.reward_curve, atol=1e-12)
        for pa, pb in zip(transition_params(net_a), transition_params(net_b)):
            assert np.allclose(pa, pb, atol=1e-12)

    def test_deterministic_curves(self):
        ds = self._toy_dataset(np.random.default_rng(21), n_eps=2)
        runs = []
        for _ in range(2):
            net = small_net(np.random.default_rng(22))
            runs.append(train_transition(net, ds, epochs=4, seed=5).reward_curve)
        assert runs[0] == runs[1]

    def test_reward_non_decreasing_early(self, push_buttons_fixture):
        _, labeled, _ = push_buttons_fixture
        net = create_transition_net(labeled.d_o, labeled.d_s, np.random.default_rng(30))
        result = train_transition(net, labeled, epochs=3, seed=2)
        curve = result.reward_curve
        assert curve[0] <= curve[1] <= curve[2]

    def test_unlabeled_frames_rejected(self):
        ds = self._toy_dataset(np.random.default_rng(23))
        ds.episodes[0].stages = None
        net = small_net(np.random.default_rng(24))
        with pytest.raises(ValueError):
            train_transition(net, ds)


class TestGradients:
    def test_fused_path_finite_differences(self):
        rng = np.random.default_rng(25)
        checked = 0
        while checked < 5:
            net = small_net(rng, d_o=4, d_s=3, embed=5, state_embed=3, hidden=6, depth=1,
                            lambda1=float(rng.uniform(0.2, 0.8)))
            O = rng.standard_normal((3, 4))
            S_prev = softmax_rows(rng.standard_normal((3, 3)))
            target = softmax_rows(rng.standard_normal((3, 3)))
            logits, cache = transition_forward(net, O, S_prev)
            margins = [float(np.min(np.abs(z))) for c in
                       (cache.cache_e, cache.cache_h, cache.cache_film, cache.cache_proj)
                       for z in c.pre_activations]
            if min(margins) < 1e-3:
                continue

            def loss():
                lg, _ = transition_forward(net, O, S_prev)
                p = softmax_rows(lg)
                return float(-np.mean(np.sum(target * np.log(p), axis=1)))

            probs = softmax_rows(logits)
            grads = transition_backward(net, cache, (probs - target) / 3)
            params = transition_params(net)
            numeric = nn.finite_difference_gradient(loss, params, h=1e-5)
            assert nn.max_relative_error(grads.flat(), numeric) < 1e-5
            checked += 1


class TestCausality:
    def test_state_input_changes_prediction_on_ambiguous_frame(self, push_buttons_fixture):
        net, labeled, _ = push_buttons_fixture
        ep = labeled.episodes[0]
        onset_frames = [t for t, kind, _ in ep.meta["events"] if kind == "reach_onset"]
        o_star = ep.observations[onset_frames[1]]  # raised-arm frame, identical across stages
        for stage in (0, 1, 2):
            e = encode_observation(net, o_star)
            h = encode_state(net, StageDistribution.one_hot(stage, 3))
            pred = predict_stage(net, film_fuse(net, e, h))
            assert pred.argmax() == stage

    def test_evaluation_never_reads_labels(self, push_buttons_fixture):
        # free-running inference consumes observations only: stripping the
        # labels from a copy changes nothing
        net, _, held_out = push_buttons_fixture
        ep = held_out.episodes[0]
        probs_labeled = infer_sequence_probs(net, ep.observations, np.eye(3)[0])
        stripped = Episode(ep.observations, ep.actions, meta=ep.meta)
        probs_stripped = infer_sequence_probs(net, stripped.observations, np.eye(3)[0])
        assert np.array_equal(probs_labeled, probs_stripped)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = small_net(np.random.default_rng(26), lambda1=0.25)
        save_transition_net(net, tmp_path / "tr", loss_mode="soft_kl")
        loaded = load_transition_net(tmp_path / "tr")
        assert loaded.lambda1 == 0.25
        obs = np.random.default_rng(27).random((4, 6))
        prev = softmax_rows(np.random.default_rng(28).standard_normal((4, 3)))
        a, _ = transition_forward(net, obs, prev)
        b, _ = transition_forward(loaded, obs, prev)
        assert np.array_equal(a, b)
