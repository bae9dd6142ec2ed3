"""Stage-by-stage network contracts, hand-case oracles, trace invariants,
checkpoint round trips, and a full-graph finite-difference check."""

import math

import numpy as np
import pytest

from quiztrace import autodiff as ad
from quiztrace import data as D
from quiztrace.errors import CheckpointMismatchError, ConfigError
from quiztrace.model import (
    ModelConfig, ModelParams, QuizNet, load_checkpoint, recency_shift, save_checkpoint,
)
from quiztrace.training import cross_entropy

KC_SINGLE = [[0], [1], [0], [1], [0], [1]]


def make_net(d=4, E=6, K=2, seed=0, **overrides):
    cfg = ModelConfig(n_exercises=E, n_kcs=K, d=d, l_cap=4, j_cap=4, seed=seed, **overrides)
    return QuizNet.init(cfg, KC_SINGLE[:E])


def set_param(net, name, value):
    net.params[name].data[...] = value


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestModelConfig:
    def test_defaults_match_protocol(self):
        cfg = ModelConfig(n_exercises=10, n_kcs=3)
        assert cfg.d == 128
        assert cfg.gamma == 1e-5
        assert cfg.lambda_reg == 1e-5

    def test_both_paths_off_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_exercises=10, n_kcs=3, use_substitution=False,
                        use_complementarity=False).validate()

    def test_bad_dims_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_exercises=10, n_kcs=3, d=0).validate()
        with pytest.raises(ConfigError):
            ModelConfig(n_exercises=10, n_kcs=3, gamma=-1.0).validate()


class TestEmbedExercises:
    def test_identity_weights_pass_through(self):
        net = make_net()
        set_param(net, "combine_w", np.eye(4))
        set_param(net, "combine_b", np.zeros(4))
        set_param(net, "exercise_emb", np.full((6, 4), 0.25))
        set_param(net, "kc_emb", np.full((2, 4), 0.5))
        out = net.embed_exercises([0, 1])
        np.testing.assert_allclose(out.data, np.full((2, 4), 0.75))

    def test_negative_preactivation_clamps_to_zero(self):
        net = make_net()
        set_param(net, "combine_w", np.eye(4))
        set_param(net, "combine_b", np.full(4, -10.0))
        set_param(net, "exercise_emb", np.zeros((6, 4)))
        set_param(net, "kc_emb", np.zeros((2, 4)))
        out = net.embed_exercises([3])
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_two_kc_exercise_averages_embeddings(self, rng):
        cfg = ModelConfig(n_exercises=2, n_kcs=3, d=4, l_cap=4, j_cap=4, seed=1)
        net = QuizNet(cfg, ModelParams.init(cfg), [[0, 2], [1]])
        out = net.embed_exercises([0])
        p = net.params
        kbar = (p["kc_emb"].data[0] + p["kc_emb"].data[2]) / 2
        expected = np.maximum((p["exercise_emb"].data[0] + kbar) @ p["combine_w"].data
                              + p["combine_b"].data, 0.0)
        np.testing.assert_allclose(out.data[0], expected)


class TestEncodeInteractions:
    def test_right_answer_ignores_wrong_layer(self, rng):
        net = make_net(seed=3)
        e = ad.constant(rng.normal(size=(1, 4)))
        before = net.encode_interactions(e, [1]).data.copy()
        net.params["wrong_w"].data += 123.0
        net.params["wrong_b"].data -= 7.0
        after = net.encode_interactions(e, [1]).data
        np.testing.assert_array_equal(before, after)

    def test_zero_weights_yield_bias(self):
        net = make_net()
        set_param(net, "right_w", np.zeros((4, 4)))
        set_param(net, "right_b", np.arange(4.0))
        set_param(net, "wrong_w", np.zeros((4, 4)))
        set_param(net, "wrong_b", -np.arange(4.0))
        e = ad.constant(np.ones((2, 4)))
        out = net.encode_interactions(e, [1, 0]).data
        np.testing.assert_array_equal(out[0], np.arange(4.0))
        np.testing.assert_array_equal(out[1], -np.arange(4.0))

    def test_hand_case_d2(self):
        net = make_net(d=2)
        set_param(net, "right_w", np.eye(2))
        set_param(net, "right_b", [0.1, 0.1])
        out = net.encode_interactions(ad.constant([[1.0, 2.0]]), [1])
        np.testing.assert_allclose(out.data, [[1.1, 2.1]])


class TestAdjacentGate:
    def test_zero_weights_average_both_sides(self, rng):
        net = make_net()
        set_param(net, "gate_w", np.zeros((8, 4)))
        set_param(net, "gate_b", np.zeros(4))
        prev = rng.normal(size=(3, 4))
        cur = rng.normal(size=(3, 4))
        out = net.adjacent_gate_combine(ad.constant(prev), ad.constant(cur))
        np.testing.assert_allclose(out.data, 0.5 * (prev + cur))

    def test_saturated_gate_passes_current(self, rng):
        net = make_net()
        set_param(net, "gate_w", np.zeros((8, 4)))
        set_param(net, "gate_b", np.full(4, 50.0))
        prev = rng.normal(size=(2, 4))
        cur = rng.normal(size=(2, 4))
        out = net.adjacent_gate_combine(ad.constant(prev), ad.constant(cur))
        np.testing.assert_allclose(out.data, cur, atol=1e-12)

    def test_hand_case_d1(self):
        net = make_net(d=1)
        set_param(net, "gate_w", [[1.0], [-1.0]])
        set_param(net, "gate_b", [0.0])
        out = net.adjacent_gate_combine(ad.constant([[1.0]]), ad.constant([[0.0]]))
        gate = sig(1.0)  # 0.7310585786300049
        np.testing.assert_allclose(out.data, [[1.0 - gate]], atol=1e-15)
        assert abs(out.data[0, 0] - 0.2689414213699951) < 1e-12

    def test_bias_outside_switch_matches_printed_form(self, rng):
        inside = make_net(seed=5)
        outside = make_net(seed=5, gate_bias_outside=True)
        prev = ad.constant(rng.normal(size=(2, 4)))
        cur = ad.constant(rng.normal(size=(2, 4)))
        p = inside.params
        pre = np.concatenate([prev.data, cur.data], axis=1) @ p["gate_w"].data
        lit = 1 / (1 + np.exp(-pre)) + p["gate_b"].data
        expected = lit * cur.data + (1 - lit) * prev.data
        np.testing.assert_allclose(outside.adjacent_gate_combine(prev, cur).data, expected)
        assert not np.allclose(inside.adjacent_gate_combine(prev, cur).data, expected)


class TestQuizPool:
    def test_single_row(self, rng):
        net = make_net()
        x = rng.normal(size=(1, 4))
        out = net.quiz_pool(ad.constant(x), [True])
        np.testing.assert_allclose(out.data, x[0])

    def test_identical_rows(self, rng):
        net = make_net()
        r = rng.normal(size=4)
        out = net.quiz_pool(ad.constant(np.tile(r, (3, 1))), [True] * 3)
        np.testing.assert_allclose(out.data, r)

    def test_padded_tail_inert(self, rng):
        net = make_net()
        x = rng.normal(size=(5, 4))
        mask = [True, True, True, False, False]
        base = net.quiz_pool(ad.constant(x), mask).data
        x2 = x.copy()
        x2[3:] = 1e6
        np.testing.assert_array_equal(net.quiz_pool(ad.constant(x2), mask).data, base)


def reference_recurrence(q_values, w, b):
    """Plain step-by-step evaluation of the printed update rule (d=1)."""
    state = 0.0
    for q in q_values:
        joint = state * w[0] + q * w[1]
        r = sig(joint + b[0])
        u = sig(joint + b[1])
        cand = math.tanh(r * (state * w[2] + q * w[3]) + b[2])
        state = (1 - u) * state + u * cand
    return state


class TestSubstitutionPath:
    def test_update_gate_forced_closed_keeps_zero_state(self, rng):
        net = make_net()
        set_param(net, "update_b", np.full(4, -50.0))
        q = ad.constant(rng.normal(size=(3, 4)))
        final, _ = net.substitution_path(q, np.ones(3, dtype=bool))
        np.testing.assert_allclose(final.data, np.zeros((1, 4)), atol=1e-18)

    def test_update_gate_forced_open_tracks_candidate(self, rng):
        net = make_net()
        set_param(net, "update_b", np.full(4, 50.0))
        q = ad.constant(rng.normal(size=(2, 4)))
        final, states = net.substitution_path(q, np.ones(2, dtype=bool))
        p = net.params
        state = np.zeros((1, 4))
        for j in range(2):
            joint = np.concatenate([state, q.data[j:j + 1]], axis=1)
            r = 1 / (1 + np.exp(-(joint @ p["reset_w"].data + p["reset_b"].data)))
            state = np.tanh(r * (joint @ p["cand_w"].data) + p["cand_b"].data)
        np.testing.assert_allclose(final.data, state, atol=1e-12)

    def test_hand_case_d1_matches_reference_recurrence(self):
        net = make_net(d=1)
        for name in ("reset_w", "update_w", "cand_w"):
            set_param(net, name, [[0.5], [0.5]])
        for name in ("reset_b", "update_b", "cand_b"):
            set_param(net, name, [0.0])
        q = ad.constant([[1.0], [-1.0]])
        final, _ = net.substitution_path(q, np.ones(2, dtype=bool))
        expected = reference_recurrence([1.0, -1.0], [0.5, 0.5, 0.5, 0.5], [0.0, 0.0, 0.0])
        np.testing.assert_allclose(final.data[0, 0], expected, atol=1e-14)

    def test_masked_quizzes_skipped(self, rng):
        net = make_net(seed=2)
        q_real = rng.normal(size=(2, 4))
        dense, _ = net.substitution_path(ad.constant(q_real), np.ones(2, dtype=bool))
        padded = np.vstack([q_real[0], np.full(4, 9.0), q_real[1]])
        sparse, _ = net.substitution_path(ad.constant(padded), np.array([True, False, True]))
        np.testing.assert_array_equal(dense.data, sparse.data)

    def test_textbook_switch_changes_candidate(self, rng):
        as_printed = make_net(seed=4)
        textbook = make_net(seed=4, textbook_gru=True)
        q = ad.constant(rng.normal(size=(3, 4)))
        a, _ = as_printed.substitution_path(q, np.ones(3, dtype=bool))
        b, _ = textbook.substitution_path(q, np.ones(3, dtype=bool))
        assert not np.allclose(a.data, b.data)


class TestRecencyShift:
    def test_frozen_two_quiz_values(self):
        shift = recency_shift(2, 1e-5)
        np.testing.assert_allclose(shift, [-5e-6, 5e-6], atol=1e-11)

    def test_sums_to_zero(self):
        for n in range(1, 12):
            assert abs(recency_shift(n, 1e-5).sum()) < 1e-15

    def test_strictly_increasing(self):
        for n in range(2, 12):
            assert np.all(np.diff(recency_shift(n, 1e-5)) > 0)


class TestRecencyAttention:
    def test_single_quiz(self, rng):
        net = make_net(seed=6)
        q = ad.constant(rng.normal(size=(1, 4)))
        weights, z = net.recency_attention(q, np.ones(1, dtype=bool))
        np.testing.assert_allclose(weights.data, [[1.0]])
        np.testing.assert_allclose(z.data, q.data @ net.params["value_w"].data)

    def test_rows_sum_to_one_both_settings(self, rng):
        for use_recency in (True, False):
            net = make_net(seed=7, use_recency=use_recency)
            for n in range(1, 8):
                q = ad.constant(rng.normal(size=(n, 4)) * 3)
                weights, _ = net.recency_attention(q, np.ones(n, dtype=bool))
                np.testing.assert_allclose(weights.data.sum(axis=1), np.ones(n), atol=1e-9)

    def test_identical_vectors_weights_increase_toward_recent(self):
        net = make_net(seed=8)
        q = ad.constant(np.tile([0.3, -0.2, 0.1, 0.5], (5, 1)))
        weights, _ = net.recency_attention(q, np.ones(5, dtype=bool))
        for row in weights.data:
            assert np.all(np.diff(row) > 0)

    def test_identical_vectors_uniform_when_recency_off(self):
        for kwargs in ({"use_recency": False}, {"gamma": 0.0}):
            net = make_net(seed=8, **kwargs)
            q = ad.constant(np.tile([0.3, -0.2, 0.1, 0.5], (5, 1)))
            weights, _ = net.recency_attention(q, np.ones(5, dtype=bool))
            np.testing.assert_allclose(weights.data, np.full((5, 5), 0.2), atol=1e-12)

    def test_masked_positions_zeroed_and_rows_still_sum(self, rng):
        net = make_net(seed=9)
        q = ad.constant(rng.normal(size=(4, 4)))
        mask = np.array([True, False, True, True])
        weights, z = net.recency_attention(q, mask)
        assert weights.data.shape == (4, 4)
        np.testing.assert_array_equal(weights.data[1], np.zeros(4))
        np.testing.assert_array_equal(weights.data[:, 1], np.zeros(4))
        np.testing.assert_array_equal(z.data[1], np.zeros(4))
        np.testing.assert_allclose(weights.data[mask].sum(axis=1), np.ones(3), atol=1e-9)


class TestIntegrateAndPredict:
    def test_identity_merge_adds_branches(self, rng):
        net = make_net()
        set_param(net, "merge_w", np.eye(4))
        set_param(net, "merge_b", np.zeros(4))
        sub = ad.constant(rng.normal(size=(1, 4)))
        com = ad.constant(rng.normal(size=(1, 4)))
        out = net.integrate_state(sub, com)
        np.testing.assert_allclose(out.data, sub.data + com.data)

    def test_ablated_branch_replaced_by_zero(self, rng):
        net = make_net(seed=2)
        sub = ad.constant(rng.normal(size=(1, 4)))
        out = net.integrate_state(sub, None)
        p = net.params
        np.testing.assert_allclose(out.data, sub.data @ p["merge_w"].data + p["merge_b"].data)

    def test_both_branches_missing_rejected(self):
        with pytest.raises(ConfigError):
            make_net().integrate_state(None, None)

    def test_hand_case_d2(self):
        net = make_net(d=2)
        set_param(net, "merge_w", [[1.0, 2.0], [3.0, 4.0]])
        set_param(net, "merge_b", [0.5, -0.5])
        out = net.integrate_state(ad.constant([[1.0, 0.0]]), ad.constant([[0.0, 1.0]]))
        np.testing.assert_allclose(out.data, [[1 + 3 + 0.5, 2 + 4 - 0.5]])

    def test_zero_head_gives_half(self, rng):
        net = make_net()
        for name in ("head_hidden_w", "head_hidden_b", "head_out_w", "head_out_b"):
            set_param(net, name, np.zeros(net.params[name].data.shape))
        y = net.predict(ad.constant(rng.normal(size=(3, 4))), ad.constant(rng.normal(size=(1, 4))))
        np.testing.assert_array_equal(y.data, np.full((3, 1), 0.5))

    def test_predictions_strictly_inside_unit_interval(self, rng):
        net = make_net(seed=11)
        y = net.predict(ad.constant(rng.normal(size=(8, 4))), ad.constant(rng.normal(size=(1, 4))))
        assert np.all((y.data > 0) & (y.data < 1))

    def test_head_hand_case_d2(self, rng):
        net = make_net(d=2, seed=12)
        e = rng.normal(size=(1, 2))
        h = rng.normal(size=(1, 2))
        y = net.predict(ad.constant(e), ad.constant(h))
        p = net.params
        feat = np.concatenate([e * h, e, h], axis=1)
        hidden = feat @ p["head_hidden_w"].data + p["head_hidden_b"].data
        logit = hidden @ p["head_out_w"].data + p["head_out_b"].data
        np.testing.assert_allclose(y.data, 1 / (1 + np.exp(-logit)))


def prepared_student(quizzes, l_cap=4, j_cap=4):
    return D._prepare_student("s0", quizzes, l_cap, j_cap)


class TestForward:
    def test_minimal_history(self):
        net = make_net(seed=1)
        history = prepared_student([([2], [1])])
        y, trace = net.forward(history, [0, 5])
        assert y.data.shape == (2, 1)
        assert np.all((y.data > 0) & (y.data < 1))
        assert trace.quiz_vectors.shape == (1, 4)

    def test_trace_invariants(self, rng):
        net = make_net(seed=13)
        history = prepared_student([([0, 1, 2], [1, 0, 1]), ([3, 4], [0, 0]), ([5], [1])])
        y, trace = net.forward(history, [1, 2])
        assert np.all((trace.gate_values > 0) & (trace.gate_values < 1))
        assert np.all((trace.predictions > 0) & (trace.predictions < 1))
        np.testing.assert_allclose(trace.attention.sum(axis=1), np.ones(3), atol=1e-6)
        assert trace.attention.shape == (3, 3)
        assert trace.substitution_states.shape == (3, 4)

    def test_padding_perturbation_bit_identical(self, rng):
        net = make_net(seed=14)
        history = prepared_student([([0, 1], [1, 0]), ([2], [1])])
        base, _ = net.forward(history, [3])
        history.exercise_ids[~history.interaction_mask] = 5
        history.answers[~history.interaction_mask] = 1
        history.exercise_ids[~history.quiz_mask] = 4
        perturbed, _ = net.forward(history, [3])
        assert base.data.tobytes() == perturbed.data.tobytes()

    def test_influence_off_means_no_gate(self):
        net = make_net(seed=15, use_influence=False)
        history = prepared_student([([0, 1, 2], [1, 0, 1]), ([3], [1])])
        _, trace = net.forward(history, [2])
        assert trace.gate_values is None
        np.testing.assert_array_equal(trace.combined_vectors, trace.interaction_vectors)

    def test_ablation_flags_drop_branch_tensors(self):
        assert "reset_w" not in make_net(use_substitution=False).params.names()
        assert "query_w" not in make_net(use_complementarity=False).params.names()
        assert "gate_w" not in make_net(use_influence=False).params.names()
        full = make_net().params.names()
        for name in ("reset_w", "query_w", "gate_w"):
            assert name in full

    def test_path_isolation_unused_branch_gets_zero_gradient(self):
        # share a full parameter set with a substitution-off config: the
        # recurrence tensors never join the graph, so their grads stay empty
        full = make_net(seed=16)
        cfg_off = ModelConfig(n_exercises=6, n_kcs=2, d=4, l_cap=4, j_cap=4,
                              seed=16, use_substitution=False)
        net_off = QuizNet(cfg_off, full.params, KC_SINGLE)
        history = prepared_student([([0, 1], [1, 0]), ([2], [1])])
        y, _ = net_off.forward(history, [3, 4])
        full.params.zero_grad()
        ad.backward(cross_entropy(y, [1, 0]))
        for name in ("reset_w", "update_w", "cand_w", "reset_b", "update_b", "cand_b"):
            assert full.params[name].grad is None
        assert full.params["query_w"].grad is not None

        cfg_no_com = ModelConfig(n_exercises=6, n_kcs=2, d=4, l_cap=4, j_cap=4,
                                 seed=16, use_complementarity=False)
        net_no_com = QuizNet(cfg_no_com, full.params, KC_SINGLE)
        y2, _ = net_no_com.forward(history, [3])
        full.params.zero_grad()
        ad.backward(cross_entropy(y2, [1]))
        for name in ("query_w", "key_w", "value_w"):
            assert full.params[name].grad is None
        assert full.params["reset_w"].grad is not None

    def test_all_parameters_reach_loss(self):
        net = make_net(seed=17)
        history = prepared_student([([0, 1], [1, 0]), ([2, 3], [0, 1])])
        y, _ = net.forward(history, [4, 5])
        net.params.zero_grad()
        ad.backward(cross_entropy(y, [1, 0]))
        for name, t in net.params.items():
            assert t.grad is not None, name
            assert np.any(t.grad != 0) or t.data.size > 4, name

    def test_empty_history_rejected(self):
        net = make_net()
        empty = D._prepare_student("s0", [], l_cap=4, j_cap=4)
        with pytest.raises(Exception):
            net.forward(empty, [0])


class TestFullGradient:
    def test_whole_graph_matches_finite_differences(self):
        net = make_net(d=3, E=6, K=2, seed=18)
        history = prepared_student([([0, 1], [1, 0]), ([2, 3], [0, 1]), ([4], [1])])
        targets = [5, 0]
        labels = [1, 0]

        def f():
            y, _ = net.forward(history, targets)
            ce = cross_entropy(y, labels)
            from quiztrace.training import l2_penalty
            return ad.add(ce, ad.scale(l2_penalty(net.params.tensors()), 1e-4))

        report = ad.grad_check(f, dict(net.params.items()), step=1e-5, tolerance=1e-4)
        assert report.passed, report


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = make_net(seed=19)
        path = tmp_path / "model.bin"
        save_checkpoint(path, net.params, net.config)
        config, params = load_checkpoint(path)
        assert config == net.config
        for name, t in net.params.items():
            assert params[name].data.tobytes() == t.data.tobytes()

    def test_two_saves_byte_identical(self, tmp_path):
        net = make_net(seed=20)
        save_checkpoint(tmp_path / "a.bin", net.params, net.config)
        save_checkpoint(tmp_path / "b.bin", net.params, net.config)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_substitution_off_checkpoint_has_no_recurrence_tensors(self, tmp_path):
        net = make_net(seed=21, use_substitution=False)
        path = tmp_path / "m.bin"
        save_checkpoint(path, net.params, net.config)
        _, params = load_checkpoint(path)
        for name in ("reset_w", "update_w", "cand_w"):
            assert name not in params.names()

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        net = make_net(seed=22)
        path = tmp_path / "m.bin"
        save_checkpoint(path, net.params, net.config)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 64])
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path)
