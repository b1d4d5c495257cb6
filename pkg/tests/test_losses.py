import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhcnet import losses, nn
from dhcnet.tensor import Tensor, backward


def logc(values):
    return [Tensor(np.log(np.atleast_1d(np.asarray(v, dtype=float)))) for v in values]


def ordering_oracle(confs, mode):
    """Direct pairwise sum over plain floats."""
    total = 0.0
    for i, j in itertools.combinations(range(len(confs)), 2):
        d = math.log(confs[i]) - math.log(confs[j])
        total += max(d, 0.0) if mode == "hinge" else d
    return total


def test_raw_ordering_example():
    confs = (0.2, 0.3, 0.5)
    got = losses.ordering_term(logc(confs), "raw").item()
    assert got == pytest.approx(ordering_oracle(confs, "raw"), abs=1e-12)
    assert got == pytest.approx(-1.8326, abs=1e-3)


def test_hinge_zero_on_sorted():
    assert losses.ordering_term(logc((0.2, 0.3, 0.5)), "hinge").item() == 0.0
    assert losses.ordering_term(logc((0.4, 0.4, 0.4)), "hinge").item() == 0.0


def test_hinge_reversed():
    got = losses.ordering_term(logc((0.5, 0.3, 0.2)), "hinge").item()
    assert got == pytest.approx(ordering_oracle((0.5, 0.3, 0.2), "hinge"), abs=1e-12)
    assert got == pytest.approx(1.8326, abs=1e-3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-4, 1.0), min_size=2, max_size=5))
def test_hinge_nonnegative(confs):
    got = losses.ordering_term(logc(confs), "hinge").item()
    assert got >= 0
    assert got == pytest.approx(ordering_oracle(confs, "hinge"), abs=1e-9)
    assert losses.ordering_term(logc(sorted(confs)), "hinge").item() == 0.0


def test_ordering_mode_error():
    with pytest.raises(ValueError, match="ordering mode"):
        losses.ordering_term(logc((0.2, 0.3)), "squared")


def test_uniform_confidence_ce():
    logits = Tensor(np.zeros((2, 80)))
    loss = losses.cls_loss(nn.log_softmax(logits), [0, 79])
    assert loss.item() == pytest.approx(math.log(80), abs=1e-12)
    assert loss.item() == pytest.approx(4.3820, abs=1e-4)
    c, lc = losses.confidence(np.zeros(80), 5)
    assert c == pytest.approx(0.0125)


def test_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        losses.cls_loss(nn.log_softmax(Tensor(np.zeros((1, 3)))), [3])


def test_hor_loss_components(rng):
    labels = [0, 1]
    logits = [Tensor(rng.normal(size=(2, 4))) for _ in range(3)]
    loss, confs = losses.hor_loss([(z, labels) for z in logits], mode="raw")
    ce = sum(-np.mean(np.log(np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True))[[0, 1], labels])
             for z in logits)
    per_sample = [np.exp(z.data)[[0, 1], labels] / np.exp(z.data).sum(1) for z in logits]
    order = np.mean([ordering_oracle([p[i] for p in per_sample], "raw") for i in range(2)])
    assert loss.item() == pytest.approx(ce + order, rel=1e-10)
    assert confs == pytest.approx([p.mean() for p in per_sample], rel=1e-10)
    plain, _ = losses.hor_loss([(z, labels) for z in logits], with_ordering=False)
    assert plain.item() == pytest.approx(ce, rel=1e-10)


def test_exp_loss_self_is_zero(rng):
    a = rng.normal(size=(4, 3, 2, 2))
    assert losses.exp_loss(Tensor(a), Tensor(a)).item() == 0.0


def test_exp_loss_345():
    fg = np.zeros((4, 5, 2, 2))
    fl = np.zeros((4, 5, 2, 2))
    fg[:, 0] = 3.0
    fg[:, 1] = 4.0
    assert losses.exp_loss(Tensor(fg), Tensor(fl)).item() == pytest.approx(20.0, abs=1e-12)


def test_exp_loss_symmetric_and_batched(rng):
    a, b = rng.normal(size=(2, 4, 3, 2, 2)), rng.normal(size=(2, 4, 3, 2, 2))
    ab = losses.exp_loss(Tensor(a), Tensor(b)).item()
    assert ab == pytest.approx(losses.exp_loss(Tensor(b), Tensor(a)).item(), rel=1e-14)
    each = [losses.exp_loss(Tensor(a[i]), Tensor(b[i])).item() for i in range(2)]
    assert ab == pytest.approx(np.mean(each), rel=1e-12)


def test_exp_loss_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        losses.exp_loss(Tensor(np.zeros((4, 3, 2, 2))), Tensor(np.zeros((4, 3, 1, 1))))


def test_total_loss_example():
    r = losses.total_loss(Tensor(1.0), Tensor(0.5), Tensor(0.25), losses.LossWeights())
    assert r.total == pytest.approx(2.65, abs=1e-12)
    assert (r.cls, r.hor, r.exp) == (1.0, 0.5, 0.25)


def test_total_loss_linearity():
    w = losses.LossWeights(1.3, 0.7, 0.2)
    parts = [Tensor(0.9), Tensor(0.4), Tensor(1.1)]
    base = losses.total_loss(*parts, w).total
    for factor in (2.0, 0.5, 4.0):
        assert losses.total_loss(*parts, w.scaled(factor)).total == base * factor


def test_total_loss_disabled_components():
    r = losses.total_loss(Tensor(1.0), None, None, losses.LossWeights())
    assert r.total == 2.0 and r.hor == 0.0 and r.exp == 0.0


def test_total_loss_nonfinite():
    with pytest.raises(FloatingPointError, match="hor"):
        losses.total_loss(Tensor(1.0), Tensor(float("nan")), None, losses.LossWeights())


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        losses.LossWeights(gamma=-0.1)


def test_soft_cls_matches_hard(rng):
    z = Tensor(rng.normal(size=(3, 5)))
    labels = [4, 0, 2]
    hard = losses.cls_loss(nn.log_softmax(z), labels).item()
    soft = losses.soft_cls_loss(nn.log_softmax(z), np.eye(5)[labels]).item()
    assert soft == pytest.approx(hard, rel=1e-14)


def test_total_loss_gradient_weights():
    parts = [Tensor(v, requires_grad=True) for v in (1.0, 0.5, 0.25)]
    backward(losses.total_loss(*parts, losses.LossWeights()).total_tensor)
    assert [float(p.grad) for p in parts] == [2.0, 1.0, 0.6]
