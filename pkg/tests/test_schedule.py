import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvae import tensor as T
from hvae.schedule import (
    InfoSchedule,
    geometric_schedule,
    kl_targets,
    kl_weight,
    kl_weights,
    resolution_schedule,
    schedule_table,
    uniform_schedule,
    weighted_kl_loss,
)


def test_geometric_small_case():
    s = geometric_schedule(3, A=100, B=0)
    assert np.allclose(s.l_target, np.array([1, 10, 100]) / 111, rtol=1e-14)


def test_geometric_ratio():
    for n in (2, 8, 12, 40):
        s = geometric_schedule(n, 1000, 10)
        assert s.l_target[-1] / s.l_target[0] == pytest.approx(1010 / 11, rel=1e-12)
    assert 1010 / 11 == pytest.approx(91.8, abs=0.05)


def test_geometric_large_constant_tends_to_uniform():
    s = geometric_schedule(6, 1000, 1e12)
    assert np.allclose(s.l_target, 1 / 6, atol=1e-9)


def test_geometric_rejects_bad_parameters():
    with pytest.raises(ValueError):
        geometric_schedule(1)
    with pytest.raises(ValueError):
        geometric_schedule(5, A=1.0)


def test_resolution_schedule():
    assert np.allclose(resolution_schedule([32, 64]).l_target, [1 / 3, 2 / 3], rtol=1e-15)
    assert np.allclose(resolution_schedule([8, 16, 32]).l_target, [1 / 7, 2 / 7, 4 / 7], rtol=1e-15)
    assert np.allclose(resolution_schedule([16] * 5).l_target, 0.2)


def test_schedule_validation():
    with pytest.raises(ValueError):
        InfoSchedule(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        InfoSchedule(np.array([1.5, -0.5]))


def test_kl_targets_example():
    sched = InfoSchedule(np.array([0.1, 0.9]))
    t = kl_targets(sched, 300.0)
    assert t.a[0] == pytest.approx(20.0) and t.b[0] == pytest.approx(40.0)
    assert np.array_equal(t.b, 2 * t.a)


def test_kl_targets_uniform():
    t = kl_targets(uniform_schedule(4), 12.0)
    assert np.allclose(t.a, 2.0)


@pytest.mark.parametrize("L,want", [(5, 0.5), (15, 1.0), (25, 1.5), (0.5, 0.1), (35, 2.0), (10, 1.0), (20, 1.0)])
def test_kl_weight_cases(L, want):
    assert kl_weight(L, 10, 20) == pytest.approx(want, abs=1e-15)


def test_kl_weight_monotone_continuous_bounded():
    grid = np.linspace(0, 50, 10_000)
    lam = np.array([kl_weight(L, 10, 20) for L in grid])
    assert np.all(np.diff(lam) >= 0)
    assert lam.min() >= 0.1 and lam.max() <= 2.0
    for edge in (10.0, 20.0):
        assert kl_weight(edge - 1e-9, 10, 20) == pytest.approx(1.0, abs=1e-9)
        assert kl_weight(edge + 1e-9, 10, 20) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1e6), st.floats(1e-6, 1e4))
def test_kl_weight_range(L, a):
    assert 0.1 <= kl_weight(L, a, 2 * a) <= 2.0


def test_zero_total_gives_unit_weights():
    assert np.array_equal(kl_weights([0.0, 0.0, 0.0], uniform_schedule(3)), [1.0, 1.0, 1.0])


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        kl_weights([1.0, 2.0], uniform_schedule(3))


def test_in_band_loss_equals_plain_sum():
    sched = InfoSchedule(np.array([0.2, 0.3, 0.5]))
    kls = [T.Tensor(v) for v in (2.0, 3.0, 5.0)]  # exactly l_i * total
    loss, lam = weighted_kl_loss(kls, sched)
    assert np.array_equal(lam, [1.0, 1.0, 1.0])
    assert loss.item() == 10.0


def test_single_layer_contribution():
    # L = 35 above the band [10, 20]: lambda = 2, contribution 70
    loss, lam = weighted_kl_loss([T.Tensor(35.0)], None, lambdas=[kl_weight(35, 10, 20)])
    assert loss.item() == 70.0


def test_weights_receive_no_gradient():
    sched = InfoSchedule(np.array([0.5, 0.5]))
    x = T.Tensor(np.array([1.0, 4.0]), requires_grad=True)
    with T.Graph() as g:
        kls = [T.square(T.slice_channels(T.reshape(x, (1, 2)), 0, 1)), T.square(T.slice_channels(T.reshape(x, (1, 2)), 1, 2))]
        kls = [T.sum(k) for k in kls]
        loss, lam = weighted_kl_loss(kls, sched)
        T.backward(loss, g)
    # L = (1, 16), total 17, bands [2/3, 4/3] * 8.5 = [5.67, 11.33]: lambda = (0.176, 1.41...)
    assert np.allclose(x.grad, lam * 2 * x.data)


def test_schedule_table():
    text = schedule_table(resolution_schedule([4, 8]), [4, 8])
    lines = text.strip().splitlines()
    assert lines[0].split("\t") == ["layer", "resolution", "l_target", "cumulative"]
    assert lines[-1].split("\t")[-1] == "1"
