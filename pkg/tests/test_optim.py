import numpy as np
import pytest

from pgca.core import tensor as T
from pgca.core.errors import ConfigError, FrozenParameterError, NonFiniteError
from pgca.lab.optim import (
    STAGE1_PUBLISHED,
    STAGE2_PUBLISHED,
    OptState,
    TrainHyper,
    adamw_step,
    clip_gradients,
    lr_schedule,
)


def _named(*arrays):
    return [(f"p{i}", T.parameter(np.array(a, dtype=float), name=f"p{i}")) for i, a in enumerate(arrays)]


class TestLrSchedule:
    def test_stage1_preset(self):
        assert lr_schedule(0, STAGE1_PUBLISHED) == 0.0
        assert lr_schedule(4000, STAGE1_PUBLISHED) == pytest.approx(6.25e-6)
        assert lr_schedule(8000, STAGE1_PUBLISHED) == pytest.approx(1.25e-5)
        assert lr_schedule(44000, STAGE1_PUBLISHED) == pytest.approx(6.25e-6)
        assert lr_schedule(80000, STAGE1_PUBLISHED) == 0.0

    def test_stage2_peak(self):
        assert lr_schedule(30000, STAGE2_PUBLISHED) == pytest.approx(5e-5)
        assert lr_schedule(180000, STAGE2_PUBLISHED) == 0.0

    def test_never_negative_after_the_end(self):
        assert lr_schedule(STAGE1_PUBLISHED.total_steps + 10, STAGE1_PUBLISHED) == 0.0

    def test_no_warmup(self):
        hp = TrainHyper(lr_max=1.0, warmup_steps=0, total_steps=4)
        assert [lr_schedule(s, hp) for s in range(5)] == [1.0, 0.75, 0.5, 0.25, 0.0]

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, STAGE1_PUBLISHED)

    def test_validation_lists_problems(self):
        problems = TrainHyper(lr_max=0.0, warmup_steps=5, total_steps=2, batch_size=0).validate(strict=False)
        assert len(problems) == 3
        with pytest.raises(ConfigError, match="lr_max"):
            TrainHyper(lr_max=-1.0, warmup_steps=0, total_steps=1).validate()


class TestAdamW:
    hp = TrainHyper(lr_max=0.1, warmup_steps=0, total_steps=10, weight_decay=0.01)

    def test_zero_gradient_only_decays(self):
        named = _named([1.0, -2.0, 3.0])
        named[0][1].grad = np.zeros(3)
        adamw_step(named, OptState.zeros(named), self.hp, lr=0.1)
        np.testing.assert_array_equal(named[0][1].data, np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.01))

    def test_two_steps_against_hand_computation(self):
        theta = np.array([0.5, -1.5])
        grads = [np.array([0.2, -0.4]), np.array([-0.1, 0.3])]
        named = _named(theta)
        state = OptState.zeros(named)

        m, v, expected = np.zeros(2), np.zeros(2), theta.copy()
        for t, g in enumerate(grads, start=1):
            named[0][1].grad = g.copy()
            adamw_step(named, state, self.hp, lr=0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expected = expected * (1 - 0.05 * 0.01) - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)

        np.testing.assert_allclose(named[0][1].data, expected, rtol=0, atol=1e-12)
        assert state.step == 2

    def test_first_step_moves_by_lr(self):
        named = _named([0.0])
        named[0][1].grad = np.array([3.0])
        adamw_step(named, OptState.zeros(named), TrainHyper(lr_max=1.0, warmup_steps=0, total_steps=1, weight_decay=0.0), lr=0.01)
        assert named[0][1].data[0] == pytest.approx(-0.01, rel=1e-6)

    def test_frozen_parameter(self):
        named = _named([1.0])
        named[0][1].grad = np.ones(1)
        with pytest.raises(FrozenParameterError):
            adamw_step(named, OptState.zeros(named), self.hp, lr=0.1, frozen=("p0",))

    def test_non_finite_gradient_skips_the_update(self):
        named = _named([1.0, 2.0])
        named[0][1].grad = np.array([np.nan, 0.0])
        state = OptState.zeros(named)
        with pytest.raises(NonFiniteError):
            adamw_step(named, state, self.hp, lr=0.1)
        np.testing.assert_array_equal(named[0][1].data, [1.0, 2.0])
        assert state.step == 0


class TestClipping:
    def test_rescales_to_max_norm(self):
        named = _named([0.0], [0.0])
        named[0][1].grad, named[1][1].grad = np.array([3.0]), np.array([4.0])
        assert clip_gradients(named, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose([named[0][1].grad[0], named[1][1].grad[0]], [0.6, 0.8], atol=1e-15)

    def test_small_gradients_untouched(self):
        named = _named([0.0, 0.0])
        named[0][1].grad = np.array([0.3, 0.4])
        assert clip_gradients(named, 1.0) == pytest.approx(0.5)
        np.testing.assert_array_equal(named[0][1].grad, [0.3, 0.4])
