import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saveri.dataset import (DatasetError, build_feedback_set,
                            build_training_set, load_dataset, save_dataset,
                            segment_episode, unsafety_score)
from saveri.dynamics import Episode, make_system, rollout_episode


def synthetic_episode(T=30, t_term=None, safe=True, n_s=4, n_z=2, seed=0):
    """Hand-built episode with distinguishable per-step values."""
    rng = np.random.default_rng(seed)
    t_term = T if t_term is None else t_term
    desired = rng.normal(size=(T, n_z))
    states = rng.normal(size=(t_term + 1, n_s))
    outputs = states[:, :n_z] * 0.5
    return Episode(
        system="synthetic", variant="nominal", seed=(seed, 0),
        initial_state=states[0], goal=desired[-1], desired=desired,
        states=states, outputs=outputs, termination_index=t_term, safe=safe,
        disturbances=np.zeros((t_term, 1)))


class TestUnsafetyScore:
    def test_safe_episode_scores_zero(self):
        ep = synthetic_episode(T=30, safe=True)
        for k in (0, 10, 29):
            assert unsafety_score(ep, k, 0.99) == 0.0

    def test_termination_step_scores_one(self):
        ep = synthetic_episode(T=30, t_term=12, safe=False)
        assert unsafety_score(ep, 12, 0.99) == 1.0

    def test_direct_exponentiation(self):
        ep = synthetic_episode(T=30, t_term=20, safe=False)
        # gamma^R with R = 10
        assert unsafety_score(ep, 10, 0.99) == pytest.approx(
            0.9043820750088044, abs=1e-15)

    def test_start_beyond_termination_rejected(self):
        ep = synthetic_episode(T=30, t_term=12, safe=False)
        with pytest.raises(ValueError):
            unsafety_score(ep, 13, 0.99)
        with pytest.raises(ValueError):
            unsafety_score(ep, -1, 0.99)

    @settings(max_examples=200)
    @given(t_term=st.integers(0, 60), gamma=st.floats(0.0, 1.0),
           data=st.data())
    def test_score_equals_gamma_power_r(self, t_term, gamma, data):
        start = data.draw(st.integers(0, t_term))
        ep = synthetic_episode(T=61, t_term=t_term, safe=False)
        assert unsafety_score(ep, start, gamma) == gamma ** (t_term - start)

    @settings(max_examples=100)
    @given(t_term=st.integers(1, 50))
    def test_monotone_in_start_index(self, t_term):
        ep = synthetic_episode(T=51, t_term=t_term, safe=False)
        scores = [unsafety_score(ep, k, 0.99) for k in range(t_term + 1)]
        assert all(a <= b for a, b in zip(scores, scores[1:]))
        assert all(0.0 <= s <= 1.0 for s in scores)


class TestSegmentEpisode:
    def test_exact_tiling(self):
        ep = synthetic_episode(T=30, safe=True)
        segs = segment_episode(ep, H=10, stride=10)
        assert len(segs) == 3
        assert [s.start for s in segs] == [0, 10, 20]
        assert not any(s.terminal for s in segs)

    def test_unsafe_episode_sliding(self):
        ep = synthetic_episode(T=30, t_term=7, safe=False)
        segs = segment_episode(ep, H=10, stride=1)
        assert len(segs) == 8
        assert [s.start for s in segs] == list(range(8))
        assert all(s.terminal for s in segs)
        rs = [7 - s.start for s in segs]
        assert rs == [7, 6, 5, 4, 3, 2, 1, 0]

    def test_sliding_window_count_and_padding(self):
        ep = synthetic_episode(T=30, safe=True)
        segs = segment_episode(ep, H=10, stride=1)
        assert len(segs) == 30
        # starts beyond T-H hold the last desired point
        seg = segs[25]
        np.testing.assert_array_equal(seg.desired[-1], ep.desired[29])
        np.testing.assert_array_equal(seg.desired[4], ep.desired[29])
        np.testing.assert_array_equal(seg.desired[3], ep.desired[28])

    def test_realized_padding_at_termination(self):
        ep = synthetic_episode(T=30, t_term=5, safe=False)
        segs = segment_episode(ep, H=10, stride=1)
        last = segs[-1]  # starts at 5 == termination
        np.testing.assert_array_equal(
            last.realized, np.tile(ep.outputs[5], (10, 1)))

    def test_error_sequence_definition(self):
        ep = synthetic_episode(T=30, safe=True)
        seg = segment_episode(ep, H=10, stride=10)[1]
        np.testing.assert_allclose(
            seg.errors, ep.desired[10:20] - ep.outputs[10:20])

    def test_invalid_args(self):
        ep = synthetic_episode()
        with pytest.raises(ValueError):
            segment_episode(ep, H=0)
        with pytest.raises(ValueError):
            segment_episode(ep, H=5, stride=0)

    @settings(max_examples=100)
    @given(t_term=st.integers(0, 40), T=st.integers(1, 41), safe=st.booleans())
    def test_count_matches_enumeration(self, t_term, T, safe):
        t_term = min(t_term, T)
        if safe and t_term != T:
            safe = False
        ep = synthetic_episode(T=T, t_term=t_term, safe=safe)
        segs = segment_episode(ep, H=5, stride=1)
        expected = [k for k in range(T) if k <= t_term]
        if t_term == T:
            expected = list(range(T))
        assert [s.start for s in segs] == expected
        if not safe and t_term < T:
            assert len(segs) == t_term + 1


class TestBuildTrainingSet:
    def test_all_safe_scores_zero(self):
        eps = [synthetic_episode(T=30, safe=True, seed=i) for i in range(1)]
        data = build_training_set(eps, H=10, gamma=0.99, stride=10)
        assert len(data) == 3
        assert all(d.score == 0.0 for d in data)

    def test_unsafe_scores_by_start(self):
        ep = synthetic_episode(T=30, t_term=20, safe=False)
        data = build_training_set([ep], H=10, gamma=0.99, stride=10)
        assert [d.segment.start for d in data] == [0, 10, 20]
        np.testing.assert_allclose(
            [d.score for d in data], [0.99 ** 20, 0.99 ** 10, 1.0])

    def test_count_is_sum_over_episodes(self):
        eps = [synthetic_episode(T=30, safe=True, seed=i) for i in range(8)]
        eps += [synthetic_episode(T=30, t_term=k, safe=False, seed=k)
                for k in (5, 15)]
        data = build_training_set(eps, H=10, gamma=0.99, stride=1)
        assert len(data) == 8 * 30 + (5 + 1) + (15 + 1)
        # deterministic ordering: (episode, start)
        keys = [(d.segment.episode_id, d.segment.start) for d in data]
        assert keys == sorted(keys)

    def test_empty_input_rejected(self):
        with pytest.raises(DatasetError):
            build_training_set([], H=10, gamma=0.99)


class TestBuildFeedbackSet:
    def test_zero_gap_no_disturbance_scores_match(self):
        real0 = make_system("point-mass", "real", gap=0.0)
        nominal = make_system("point-mass", "nominal")
        box = nominal.default_safe_set()
        ep = rollout_episode(real0, box, 40, 7)
        fb = build_feedback_set(ep, nominal, box, H=10, gamma=0.99, stride=5)
        assert len(fb) > 0
        for d in fb:
            assert d.score_real == d.score_nominal

    def test_real_unsafe_nominal_safe(self):
        # an aggressive-goal episode on a strongly rigged real system can
        # fail while the nominal replay tracks it safely
        kw = dict(u_max=40.0, goal_range=4.5, safe_x=6.0, safe_angle=0.15)
        real = make_system("cart-pole", "real", **kw)
        nominal = make_system("cart-pole", "nominal", **kw)
        box = real.default_safe_set()
        ep = None
        for seed in range(60):
            cand = rollout_episode(real, box, 60, seed,
                                   goal_sampler=lambda rng: np.array([3.2]))
            if not cand.safe:
                ep = cand
                break
        assert ep is not None, "no real-unsafe episode found at the boundary goal"
        fb = build_feedback_set(ep, nominal, box, H=10, gamma=0.99)
        first = fb[0]
        assert first.score_real == pytest.approx(
            0.99 ** ep.termination_index)
        assert first.score_nominal == 0.0

    def test_replay_is_pure(self):
        real = make_system("point-mass", "real",
                           disturbance={"prob": 0.2, "mag": 2.0})
        nominal = make_system("point-mass", "nominal")
        box = nominal.default_safe_set()
        ep = rollout_episode(real, box, 40, 3)
        fb1 = build_feedback_set(ep, nominal, box, H=10, gamma=0.99)
        fb2 = build_feedback_set(ep, nominal, box, H=10, gamma=0.99)
        for a, b in zip(fb1, fb2):
            assert a.score_real == b.score_real
            assert a.score_nominal == b.score_nominal
            np.testing.assert_array_equal(a.segment.state, b.segment.state)

    def test_dimension_mismatch_rejected(self):
        real = make_system("point-mass")
        nominal = make_system("cart-pole")
        box = real.default_safe_set()
        ep = rollout_episode(real, box, 20, 0)
        with pytest.raises(ValueError):
            build_feedback_set(ep, nominal, nominal.default_safe_set(),
                               H=10, gamma=0.99)


class TestPersistence:
    def _training_data(self):
        eps = [synthetic_episode(T=20, safe=True, seed=1),
               synthetic_episode(T=20, t_term=9, safe=False, seed=2)]
        return build_training_set(eps, H=6, gamma=0.99, stride=3)

    def test_round_trip_training(self, tmp_path):
        data = self._training_data()
        path = tmp_path / "train.json"
        save_dataset(data, path, system="synthetic", H=6, gamma=0.99, stride=3)
        meta, loaded = load_dataset(path)
        assert meta["n_t"] == len(data)
        for a, b in zip(data, loaded):
            assert a.score == b.score  # bit-exact
            np.testing.assert_array_equal(a.segment.state, b.segment.state)
            np.testing.assert_array_equal(a.segment.desired, b.segment.desired)
            np.testing.assert_array_equal(a.segment.realized, b.segment.realized)
            assert a.segment.episode_id == b.segment.episode_id
            assert a.segment.start == b.segment.start

    def test_round_trip_feedback(self, tmp_path):
        real0 = make_system("point-mass", "real", gap=0.0)
        nominal = make_system("point-mass", "nominal")
        box = nominal.default_safe_set()
        ep = rollout_episode(real0, box, 30, 7)
        fb = build_feedback_set(ep, nominal, box, H=10, gamma=0.99, stride=10)
        path = tmp_path / "fb.json"
        save_dataset(fb, path, system="point-mass", H=10, gamma=0.99, stride=10)
        meta, loaded = load_dataset(path)
        for a, b in zip(fb, loaded):
            assert a.score_real == b.score_real
            assert a.score_nominal == b.score_nominal

    def test_missing_lambda_named(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"meta": {}, "data": [{"state": [0], "desired": [[0]],'
                        ' "realized": [[0]], "episode": 0, "start": 0}]}')
        with pytest.raises(DatasetError, match="lambda"):
            load_dataset(path)

    def test_empty_dataset_rejected(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text('{"meta": {}, "data": []}')
        with pytest.raises(DatasetError, match="empty dataset"):
            load_dataset(path)
        with pytest.raises(DatasetError, match="empty"):
            save_dataset([], tmp_path / "out.json")
