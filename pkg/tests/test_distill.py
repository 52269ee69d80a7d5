import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsd import tensor as tn
from hsd.distill import (EPS, LossConfig, StepDistributions, averaged_ce, combined_loss, kd_loss, kd_loss_t, kl,
                         skd_loss, skd_loss_t)
from hsd.tensor import Tensor

from conftest import numeric_grad, rel_err


def kl_oracle(p, q):
    """Scalar loop KL with the same floor convention."""
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * (math.log(pi) - math.log(max(qi, EPS)))
    return total


@st.composite
def simplex(draw, k):
    w = draw(st.lists(st.floats(0, 1), min_size=k, max_size=k))
    w = np.array(w) + 1e-9
    return w / w.sum()


@st.composite
def step_sets(draw):
    k = draw(st.integers(2, 6))
    t = draw(st.integers(1, 6))
    steps = np.stack([draw(simplex(k)) for _ in range(t)])
    return steps, draw(simplex(k))


def softmax_rows(z, tau=1.0):
    z = z / tau
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


class TestKl:
    def test_identity(self):
        p = np.array([0.2, 0.5, 0.3])
        assert kl(p, p) == 0.0

    def test_closed_form(self):
        assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)

    def test_zero_q_is_floored(self):
        assert kl([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-math.log(EPS), rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 8).flatmap(lambda k: st.tuples(simplex(k), simplex(k))))
    def test_nonnegative_and_matches_oracle(self, pq):
        p, q = pq
        v = kl(p, q)
        assert v >= -1e-15
        assert v == pytest.approx(kl_oracle(p, q), rel=1e-9, abs=1e-12)


class TestKdSkd:
    def test_teacher_everywhere(self):
        t = np.array([0.1, 0.6, 0.3])
        steps = np.stack([t, t, t])
        assert kd_loss(steps, t) == 0.0 and skd_loss(steps, t) == 0.0

    def test_single_step_collapses(self, rng):
        s = softmax_rows(rng.normal(size=(1, 4, 5)))
        t = softmax_rows(rng.normal(size=(4, 5)))
        assert kd_loss(s, t) == skd_loss(s, t)
        assert kd_loss(s, t) == pytest.approx(np.mean([kl(t[b], s[0, b]) for b in range(4)]), rel=1e-12)

    def test_adversarial_two_steps(self):
        steps = np.array([[1.0, 0.0], [0.0, 1.0]])
        t = np.array([0.5, 0.5])
        assert kd_loss(steps, t) == 0.0
        # each step: 0.5 log(0.5/1) + 0.5 log(0.5/eps)
        assert skd_loss(steps, t) == pytest.approx(-math.log(2) - 0.5 * math.log(EPS), rel=1e-12)
        assert skd_loss(steps, t) > 1.0

    @settings(max_examples=300, deadline=None)
    @given(step_sets())
    def test_convexity_gap(self, st_):
        steps, t = st_
        assert kd_loss(steps, t) <= skd_loss(steps, t) + 1e-12
        assert skd_loss(steps, t) >= -1e-15

    @settings(max_examples=100, deadline=None)
    @given(step_sets(), st.randoms())
    def test_step_permutation_invariance(self, st_, rnd):
        steps, t = st_
        order = list(range(len(steps)))
        rnd.shuffle(order)
        assert skd_loss(steps[order], t) == pytest.approx(skd_loss(steps, t), rel=1e-12, abs=1e-15)

    def test_zero_iff_all_equal_teacher(self):
        t = np.array([0.25, 0.75])
        assert skd_loss(np.array([t, [0.3, 0.7]]), t) > 0

    def test_invalid_distribution_rejected(self):
        with pytest.raises(ValueError):
            StepDistributions(np.array([[0.5, 0.6]]), np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            StepDistributions(np.array([[0.5, 0.5]]), np.array([1.2, -0.2]))

    def test_differentiable_versions_agree(self, rng):
        logits = rng.normal(size=(3, 4, 5))
        t = softmax_rows(rng.normal(size=(4, 5)))
        steps = [Tensor(o) for o in logits]
        probs = softmax_rows(logits, 2.0)
        assert kd_loss_t(steps, t, 2.0).item() == pytest.approx(kd_loss(probs, t), rel=1e-12)
        assert skd_loss_t(steps, t, 2.0).item() == pytest.approx(skd_loss(probs, t), rel=1e-12)


class TestCombined:
    def _setup(self, rng, T=3, B=4, C=5):
        logits = rng.normal(size=(T, B, C))
        labels = rng.integers(0, C, B)
        teacher = softmax_rows(rng.normal(size=(B, C)), 4.0)
        return logits, labels, teacher

    def test_lambda_zero_is_plain_ce(self, rng):
        logits, y, t = self._setup(rng)
        got = combined_loss([Tensor(o) for o in logits], y, t, LossConfig("skd", 0.0)).item()
        mean_p = softmax_rows(logits).mean(axis=0)
        ref = -np.mean(np.log(mean_p[np.arange(len(y)), y]))
        assert got == pytest.approx(ref, rel=1e-12)

    def test_mode_none_equals_lambda_zero(self, rng):
        logits, y, t = self._setup(rng)
        a = combined_loss([Tensor(o) for o in logits], y, t, LossConfig("none", 1.0)).item()
        b = combined_loss([Tensor(o) for o in logits], y, t, LossConfig("skd", 0.0)).item()
        assert a == b

    @pytest.mark.parametrize("mode", ["kd", "skd"])
    def test_value(self, mode, rng):
        logits, y, t = self._setup(rng)
        cfg = LossConfig(mode, 0.6, 4.0)
        got = combined_loss([Tensor(o) for o in logits], y, t, cfg).item()
        ce = averaged_ce([Tensor(o) for o in logits], y).item()
        term = (kd_loss if mode == "kd" else skd_loss)(softmax_rows(logits, 4.0), t)
        assert got == pytest.approx(ce + 0.6 * term, rel=1e-12)

    @pytest.mark.parametrize("mode", ["none", "kd", "skd"])
    def test_gradient_matches_fd(self, mode, rng):
        logits, y, t = self._setup(rng)
        cfg = LossConfig(mode, 0.8, 3.0)
        leaves = [Tensor(o, requires_grad=True) for o in logits]
        combined_loss(leaves, y, t, cfg).backward()
        analytic = np.stack([l.grad for l in leaves])
        numeric = numeric_grad(lambda z: combined_loss([Tensor(o) for o in z], y, t, cfg).item(), logits)
        assert rel_err(analytic, numeric) < 1e-4

    def test_teacher_gets_no_gradient(self, rng):
        logits, y, t = self._setup(rng)
        t_copy = t.copy()
        leaves = [Tensor(o, requires_grad=True) for o in logits]
        combined_loss(leaves, y, t, LossConfig()).backward()
        np.testing.assert_array_equal(t, t_copy)

    def test_missing_teacher(self, rng):
        logits, y, _ = self._setup(rng)
        with pytest.raises(ValueError, match="teacher"):
            combined_loss([Tensor(o) for o in logits], y, None, LossConfig("kd"))

    @pytest.mark.parametrize("kwargs", [dict(mode="tet"), dict(lambda_skd=-1.0), dict(temperature=0.0)])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            LossConfig(**kwargs)
