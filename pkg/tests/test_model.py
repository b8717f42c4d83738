import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sstlab.model import (
    ModelParams,
    backward,
    compose_masked_input,
    extract_subset,
    forward,
    forward_cached,
    init_params,
    load_checkpoint,
    predict_class,
    save_checkpoint,
    subset_indices,
)
from sstlab.numerics import DimensionError, grad_check, softmax_ce_loss


@pytest.fixture
def small_params():
    return init_params(n=6, c=3, hidden=(8, 5), seed=42)


class TestForward:
    def test_output_shapes_and_ranges(self, small_params):
        x = np.random.default_rng(0).uniform(size=(4, 6))
        logits, scores = forward(small_params, x)
        assert logits.shape == (4, 3)
        assert scores.shape == (4, 6)
        assert ((scores >= 0) & (scores <= 1)).all()

    def test_zero_weight_model(self):
        params = init_params(n=4, c=2, hidden=(3,), seed=0)
        for W, b in params.trunk:
            W[:] = 0
        params.pred_head[0][:] = 0
        params.expl_head[0][:] = 0
        logits, scores = forward(params, np.ones((2, 4)))
        np.testing.assert_array_equal(logits, 0.0)
        np.testing.assert_array_equal(scores, 0.5)

    def test_deterministic_given_seed(self):
        x = np.random.default_rng(1).uniform(size=(3, 6))
        a = forward(init_params(6, 3, (8, 5), seed=9), x)
        b = forward(init_params(6, 3, (8, 5), seed=9), x)
        assert (a[0] == b[0]).all() and (a[1] == b[1]).all()

    def test_width_mismatch(self, small_params):
        with pytest.raises(DimensionError):
            forward(small_params, np.ones((2, 5)))

    def test_explanation_bias_starts_scores_at_half(self, small_params):
        # zero head bias keeps the initial score distribution centred on 0.5
        x = np.random.default_rng(2).uniform(size=(200, 6))
        _, scores = forward(small_params, x)
        assert abs(scores.mean() - 0.5) < 0.1


class TestPredictClass:
    def test_tie_goes_to_lowest_index(self):
        params = init_params(n=2, c=3, hidden=(), seed=0)
        params.pred_head[0][:] = 0.0
        params.pred_head[1][:] = np.array([3.0, 3.0, 1.0])
        assert predict_class(params, np.zeros((1, 2)))[0] == 0

    def test_plain_argmax(self):
        params = init_params(n=2, c=3, hidden=(), seed=0)
        params.pred_head[0][:] = 0.0
        params.pred_head[1][:] = np.array([0.0, 5.0, 1.0])
        assert predict_class(params, np.zeros((1, 2)))[0] == 1

    def test_invariant_under_constant_logit_shift(self, small_params):
        x = np.random.default_rng(3).uniform(size=(5, 6))
        before = predict_class(small_params, x)
        small_params.pred_head[1][:] += 7.5
        np.testing.assert_array_equal(predict_class(small_params, x), before)


class TestExtractSubset:
    def test_direct_threshold(self):
        mask = extract_subset(np.array([0.7, 0.4, 0.5]), tau=0.5)
        assert subset_indices(mask) == [0, 2]

    def test_boundary_is_inclusive(self):
        mask = extract_subset(np.full(4, 0.5), tau=0.5)
        assert mask.all()

    def test_grouped_two_by_two(self):
        scores = np.full((4, 4), 0.1)
        scores[0:2, 0:2] = 0.6
        mask = extract_subset(scores.ravel(), tau=0.5, group=2, image_shape=(4, 4))
        expected = np.zeros((4, 4), dtype=bool)
        expected[0:2, 0:2] = True
        np.testing.assert_array_equal(mask.reshape(4, 4), expected)

    def test_group_cardinality_divisible(self):
        rng = np.random.default_rng(4)
        scores = rng.uniform(size=16)
        mask = extract_subset(scores, tau=0.5, group=2, image_shape=(4, 4))
        assert int(mask.sum()) % 4 == 0

    def test_ragged_boundary_groups(self):
        # 5x5 with g=2 leaves 1-wide remainder bands
        scores = np.zeros((5, 5))
        scores[4, 4] = 0.9  # the single-pixel corner group
        mask = extract_subset(scores.ravel(), tau=0.5, group=2, image_shape=(5, 5))
        assert subset_indices(mask) == [24]

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.integers(1, 9))
    @settings(max_examples=60, deadline=None)
    def test_cardinality_monotone_in_tau(self, values, tenths):
        scores = np.array(values)
        tau_lo = tenths / 10.0 if 0 < tenths / 10.0 < 1 else 0.5
        for tau_hi in (min(tau_lo + 0.1, 0.99),):
            lo = extract_subset(scores, tau_lo).sum()
            hi = extract_subset(scores, tau_hi).sum()
            assert hi <= lo

    def test_tau_out_of_range(self):
        with pytest.raises(ValueError):
            extract_subset(np.array([0.5]), tau=1.0)


class TestCompose:
    def test_basic(self):
        out = compose_masked_input(
            np.array([1.0, 2.0, 3.0]), np.array([True, False, True]), np.array([9.0, 9.0, 9.0])
        )
        assert out.tolist() == [1.0, 9.0, 3.0]

    def test_full_set_identity(self):
        x = np.array([0.3, 0.7])
        out = compose_masked_input(x, np.ones(2, dtype=bool), np.zeros(2))
        np.testing.assert_array_equal(out, x)

    def test_empty_set_is_z(self):
        z = np.array([0.9, 0.1])
        out = compose_masked_input(np.zeros(2), np.zeros(2, dtype=bool), z)
        np.testing.assert_array_equal(out, z)

    @given(st.integers(0, 2**16), st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_compose_with_self_is_identity(self, seed, n):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=n)
        mask = rng.uniform(size=n) < 0.5
        np.testing.assert_array_equal(compose_masked_input(x, mask, x), x)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            compose_masked_input(np.ones(3), np.ones(3, dtype=bool), np.ones(4))


class TestBackward:
    def test_full_network_gradcheck_on_inputs(self, small_params):
        rng = np.random.default_rng(5)
        x = rng.uniform(0.05, 0.95, size=(3, 6))
        targets = np.array([0, 1, 2])

        def f(xv):
            logits, _, cache = forward_cached(small_params, xv)
            loss = softmax_ce_loss(logits, targets)
            _, dx = backward(small_params, cache, dlogits=loss.gradient, need_dx=True)
            return loss.value, dx

        assert grad_check(f, x, h=1e-5) < 1e-4

    def test_parameter_gradcheck(self, small_params):
        rng = np.random.default_rng(6)
        x = rng.uniform(size=(4, 6))
        targets = rng.integers(0, 3, size=4)
        W0 = small_params.trunk[0][0]

        def f(wv):
            W0[:] = wv
            logits, _, cache = forward_cached(small_params, x)
            loss = softmax_ce_loss(logits, targets)
            grads, _ = backward(small_params, cache, dlogits=loss.gradient)
            return loss.value, grads.trunk[0][0]

        assert grad_check(f, W0.copy(), h=1e-5) < 1e-4


class TestCheckpoint:
    def test_roundtrip_bytes_and_fields(self, small_params, tmp_path):
        small_params.tau = 0.35
        small_params.group = 2
        small_params.image_shape = (2, 3)
        path = tmp_path / "m.sstm"
        save_checkpoint(small_params, str(path))
        loaded = load_checkpoint(str(path))
        assert loaded.n == 6 and loaded.c == 3
        assert loaded.hidden_dims == (8, 5)
        assert loaded.tau == 0.35 and loaded.group == 2 and loaded.image_shape == (2, 3)
        for a, b in zip(small_params.flat(), loaded.flat()):
            np.testing.assert_array_equal(a, b)
        # saving the loaded params reproduces the same bytes
        path2 = tmp_path / "m2.sstm"
        save_checkpoint(loaded, str(path2))
        assert path.read_bytes() == path2.read_bytes()

    def test_magic_header(self, small_params, tmp_path):
        path = tmp_path / "m.sstm"
        save_checkpoint(small_params, str(path))
        assert path.read_bytes()[:4] == b"SSTM"

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(str(path))


def test_overfit_single_point():
    # a model driven to overfit one example predicts its label
    from sstlab.training import Adam, TrainConfig, standard_step

    params = init_params(n=4, c=2, hidden=(8,), seed=0)
    config = TrainConfig(mode="standard", lr=0.05, epochs=1, seed=0)
    opt = Adam(params, config.lr)
    x = np.array([[0.9, 0.1, 0.4, 0.6]])
    y = np.array([1])
    for _ in range(60):
        standard_step(params, opt, x, y, config)
    assert predict_class(params, x)[0] == 1
