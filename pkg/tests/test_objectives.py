import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossmodal.autodiff import Tensor, grad_check
from crossmodal.errors import ConfigError, ContractError, ShapeError
from crossmodal.objectives import LossConfig, combined_loss, cross_modality_loss, triplet_loss

LN2 = np.log(2.0)


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestTriplet:
    def test_margin_satisfied(self):
        a = t([[0.0, 0.0]])
        n = t([[np.sqrt(5.0), 0.0]])
        assert triplet_loss(a, a, n, 1.0).item() == 0.0

    def test_direct_substitution(self):
        # |a-p|^2 = 2, |a-n|^2 = 1
        loss = triplet_loss(t([[0.0, 0.0]]), t([[1.0, 1.0]]), t([[1.0, 0.0]]), 0.5)
        assert loss.item() == pytest.approx(1.5, abs=1e-12)

    def test_batch_mean(self):
        a = t([[0.0, 0.0], [0.0, 0.0]])
        p = t([[0.0, 0.0], [1.0, 1.0]])
        n = t([[np.sqrt(5.0), 0.0], [1.0, 0.0]])
        assert triplet_loss(a, p, n, 0.5).item() == pytest.approx(0.75, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            triplet_loss(t(np.zeros((2, 3))), t(np.zeros((2, 3))), t(np.zeros((3, 3))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 3))
    def test_nonnegative_and_zero_iff_satisfied(self, seed, margin):
        rng = np.random.default_rng(seed)
        a, p, n = (rng.standard_normal((5, 4)) for _ in range(3))
        loss = triplet_loss(t(a), t(p), t(n), margin).item()
        hinge = np.sum((a - p) ** 2, 1) - np.sum((a - n) ** 2, 1) + margin
        assert loss >= 0
        assert (loss == 0) == bool(np.all(hinge <= 0))
        assert loss == pytest.approx(np.maximum(hinge, 0).mean(), abs=1e-12)


class TestCrossModality:
    Y = np.array([[1, 1, 0]])

    def test_perfect(self):
        eps = 1e-7
        assert cross_modality_loss(t([[1 - eps, 1 - eps, eps]]), self.Y).item() < 1e-6

    def test_uniform(self):
        assert abs(cross_modality_loss(t([[0.5, 0.5, 0.5]]), self.Y).item() - 3 * LN2) <= 1e-9

    def test_direct_arithmetic(self):
        loss = cross_modality_loss(t([[0.9, 0.8, 0.3]]), self.Y).item()
        assert loss == pytest.approx(-(np.log(0.9) + np.log(0.8) + np.log(0.7)), abs=1e-12)
        assert loss == pytest.approx(0.6851, abs=1e-4)

    def test_clamp_keeps_log_finite(self):
        loss = cross_modality_loss(t([[0.0, 1.0, 1.0]]), self.Y).item()
        assert np.isfinite(loss) and loss == pytest.approx(-2 * np.log(1e-7), rel=1e-6)

    def test_bad_label(self):
        with pytest.raises(ContractError):
            cross_modality_loss(t([[0.5, 0.5, 0.5]]), [[1, 2, 0]])

    def test_monotone(self):
        lo = cross_modality_loss(t([[0.6, 0.5, 0.5]]), self.Y).item()
        hi = cross_modality_loss(t([[0.7, 0.5, 0.5]]), self.Y).item()
        assert hi < lo
        lo = cross_modality_loss(t([[0.5, 0.5, 0.6]]), self.Y).item()
        hi = cross_modality_loss(t([[0.5, 0.5, 0.7]]), self.Y).item()
        assert hi > lo


class TestCombined:
    def test_beta_zero_is_triplet(self):
        lt, lc = t(1.5), t(2.0794)
        assert combined_loss(lt, lc, 0.0).item() == 1.5

    def test_value(self):
        assert combined_loss(t(1.5), t(3 * LN2), 1.0).item() == pytest.approx(1.5 + 3 * LN2, abs=1e-12)
        assert combined_loss(t(1.5), t(2.0794), 1.0).item() == pytest.approx(3.5794, abs=1e-12)

    def test_linearity(self):
        lt, lc = t(0.25), t(0.75)
        one = combined_loss(lt, lc, 1.0).item() - 0.25
        two = combined_loss(lt, lc, 2.0).item() - 0.25
        assert two == 2 * one

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            LossConfig(margin=-1)
        with pytest.raises(ConfigError):
            LossConfig(cross_weight=-0.5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    while True:
        a, p, n = (rng.standard_normal((6, 5)) for _ in range(3))
        hinge = np.sum((a - p) ** 2, 1) - np.sum((a - n) ** 2, 1) + 1.0
        if np.all(np.abs(hinge) > 1e-3) and np.any(hinge > 0):
            break
    ta, tp, tn = (Tensor(x, requires_grad=True) for x in (a, p, n))
    assert grad_check(lambda: triplet_loss(ta, tp, tn, 1.0), [ta, tp, tn]) < 1e-4
    probs = Tensor(rng.uniform(0.05, 0.95, (6, 3)), requires_grad=True)
    y = np.tile([1, 1, 0], (6, 1))
    assert grad_check(lambda: cross_modality_loss(probs, y), [probs]) < 1e-4
    assert grad_check(lambda: combined_loss(triplet_loss(ta, tp, tn), cross_modality_loss(probs, y), 0.7),
                      [ta, probs]) < 1e-4
