import numpy as np
import pytest

from sstlab.masking import BaselineMasking, ProbabilisticMasking, RobustMasking
from sstlab.model import ModelParams, init_params, predict_class
from sstlab.oracle import (
    CapacityError,
    FrozenChecker,
    OracleConfig,
    brute_force_msr,
    greedy_sufficient_reason,
    input_saliency,
    verify_minimal,
)


def constant_model(n=4, c=2):
    params = init_params(n=n, c=c, hidden=(), seed=0)
    params.pred_head[0][:] = 0.0
    params.pred_head[1][:] = np.arange(c, 0, -1, dtype=float)  # constant argmax 0
    return params


def and_model():
    """Class 1 iff x0 + x1 >= 1.5: AND behavior on the unit-hypercube corners."""
    params = init_params(n=2, c=2, hidden=(), seed=0)
    params.pred_head[0][:] = np.array([[0.0, 1.0], [0.0, 1.0]])
    params.pred_head[1][:] = np.array([1.5, 0.0])
    return params


def or_model(n=3):
    """Class 1 iff any feature >= 0.5."""
    params = init_params(n=n, c=2, hidden=(n,), seed=0)
    W, b = params.trunk[0]
    W[:] = np.eye(n) * 100.0
    b[:] = -49.0
    Wp, bp = params.pred_head
    Wp[:] = 0.0
    Wp[:, 1] = 1.0
    bp[:] = np.array([2.0, 0.0])
    return params


def rng_of(seed):
    return np.random.default_rng(seed)


class TestBruteForce:
    def test_constant_model_gives_empty_set(self):
        params = constant_model()
        x = np.full(4, 0.7)
        mask = brute_force_msr(params, x, BaselineMasking(), OracleConfig(), rng_of(0))
        assert mask.sum() == 0

    def test_and_net_needs_both_features(self):
        params = and_model()
        x = np.array([1.0, 1.0])
        assert predict_class(params, x[None, :])[0] == 1
        mask = brute_force_msr(params, x, BaselineMasking(z=0.0), OracleConfig(), rng_of(0))
        assert mask.tolist() == [True, True]

    def test_or_net_lexicographic_tie_break(self):
        params = or_model(3)
        x = np.array([1.0, 1.0, 1.0])
        assert predict_class(params, x[None, :])[0] == 1
        mask = brute_force_msr(params, x, BaselineMasking(z=0.0), OracleConfig(), rng_of(0))
        assert mask.tolist() == [True, False, False]

    def test_budget_below_minimum_returns_none(self):
        params = and_model()
        x = np.array([1.0, 1.0])
        config = OracleConfig(k=1)
        assert brute_force_msr(params, x, BaselineMasking(z=0.0), config, rng_of(0)) is None

    def test_capacity_error(self):
        params = init_params(n=30, c=2, hidden=(4,), seed=0)
        with pytest.raises(CapacityError):
            brute_force_msr(params, np.zeros(30), BaselineMasking(), OracleConfig(), rng_of(0))

    def test_result_passes_and_is_minimal(self):
        rng = rng_of(42)
        for trial in range(10):
            params = init_params(n=6, c=2, hidden=(8,), seed=trial)
            x = rng.uniform(size=6)
            checker = FrozenChecker(params, x, BaselineMasking(), rng_of(trial))
            mask = brute_force_msr(
                params, x, BaselineMasking(), OracleConfig(), rng_of(trial), checker=checker
            )
            assert checker.passes(mask)
            assert verify_minimal(checker, mask)

    def test_frozen_probabilistic_bank_is_stable(self):
        params = init_params(n=5, c=2, hidden=(6,), seed=1)
        x = rng_of(2).uniform(size=5)
        check = ProbabilisticMasking(samples=25, delta=0.1)
        checker = FrozenChecker(params, x, check, rng_of(3))
        mask = np.array([True, False, True, False, False])
        assert checker.passes(mask) == checker.passes(mask)  # no rng consumption drift
        again = FrozenChecker(params, x, check, rng_of(3))
        assert checker.passes(mask) == again.passes(mask)


class TestGreedy:
    def test_constant_model_drops_everything(self):
        params = constant_model()
        x = np.full(4, 0.3)
        mask = greedy_sufficient_reason(params, x, BaselineMasking(), rng_of(0))
        assert mask.sum() == 0

    def test_single_relevant_feature(self):
        # prediction reads feature 0 only; baseline z=0 flips it when dropped
        params = init_params(n=3, c=2, hidden=(1,), seed=0)
        W, b = params.trunk[0]
        W[:] = np.array([[100.0], [0.0], [0.0]])
        b[:] = -49.0
        Wp, bp = params.pred_head
        Wp[:] = np.array([[0.0, 1.0]])
        bp[:] = np.array([0.5, 0.0])
        x = np.array([1.0, 0.2, 0.9])
        assert predict_class(params, x[None, :])[0] == 1
        mask = greedy_sufficient_reason(params, x, BaselineMasking(z=0.0), rng_of(0))
        assert mask.tolist() == [True, False, False]

    def test_greedy_result_always_passes(self):
        rng = rng_of(7)
        for trial in range(10):
            params = init_params(n=7, c=3, hidden=(9,), seed=100 + trial)
            x = rng.uniform(size=7)
            for check in (BaselineMasking(), RobustMasking(steps=3, epsilon=0.2)):
                checker = FrozenChecker(params, x, check, rng_of(trial))
                mask = greedy_sufficient_reason(params, x, check, rng_of(trial), checker=checker)
                assert checker.passes(mask)

    def test_greedy_never_beats_brute_force(self):
        rng = rng_of(8)
        for trial in range(15):
            params = init_params(n=6, c=2, hidden=(8,), seed=200 + trial)
            x = rng.uniform(size=6)
            checker = FrozenChecker(params, x, BaselineMasking(), rng_of(trial))
            greedy = greedy_sufficient_reason(
                params, x, BaselineMasking(), rng_of(trial), checker=checker
            )
            brute = brute_force_msr(
                params, x, BaselineMasking(), OracleConfig(), rng_of(trial), checker=checker
            )
            assert greedy.sum() >= brute.sum()


class TestSaliency:
    def test_saliency_shape_and_nonnegative(self):
        params = init_params(n=5, c=2, hidden=(4,), seed=0)
        sal = input_saliency(params, np.full(5, 0.5))
        assert sal.shape == (5,)
        assert (sal >= 0).all()


def test_oracle_config_caps_max_n():
    with pytest.raises(ValueError):
        OracleConfig(max_n=25)
