"""AdamW hand-derived step values and one-cycle schedule shape."""

import numpy as np
import pytest

from uniseg.network import ParameterSet
from uniseg.optim import AdamW, OneCycleSchedule, adamw_step, one_cycle_lr
from uniseg.tensor import Tensor


def single_param(value) -> ParameterSet:
    params = ParameterSet()
    params.add("w", Tensor(np.array([value]), requires_grad=True))
    return params


def test_zero_grad_zero_decay_is_identity():
    params = single_param(1.234)
    opt = AdamW(params, lr=0.1, weight_decay=0.0)
    for _ in range(5):
        params["w"].grad = np.zeros(1)
        opt.step()
    assert params["w"].data[0] == 1.234


def test_pure_decay_hand_value():
    params = single_param(1.0)
    opt = AdamW(params, lr=0.1, weight_decay=0.01)
    params["w"].grad = np.zeros(1)
    opt.step()
    assert abs(params["w"].data[0] - 0.999) < 1e-12


def test_full_step_hand_value():
    params = single_param(1.0)
    opt = AdamW(params, lr=0.1, weight_decay=0.01)
    params["w"].grad = np.ones(1)
    opt.step()
    expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)) - 0.001
    assert abs(params["w"].data[0] - expect) < 1e-12


def test_non_finite_gradient_names_parameter():
    params = single_param(1.0)
    opt = AdamW(params, lr=0.1)
    params["w"].grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="'w'"):
        opt.step()


def test_gradient_shape_mismatch():
    params = single_param(1.0)
    opt = AdamW(params, lr=0.1)
    params["w"].grad = np.zeros(2)
    with pytest.raises(ValueError, match="shape"):
        opt.step()


def test_identical_trajectories_are_bitwise_equal():
    def run():
        rng = np.random.default_rng(7)
        params = ParameterSet()
        params.add("w", Tensor(rng.random(16), requires_grad=True))
        opt = AdamW(params, lr=1e-3, weight_decay=1e-5)
        for _ in range(25):
            params["w"].grad = rng.standard_normal(16)
            opt.step()
        return params["w"].data.copy()

    assert np.array_equal(run(), run())


def test_functional_step_alias():
    params = single_param(1.0)
    opt = AdamW(params, lr=1.0, weight_decay=0.0)
    params["w"].grad = np.ones(1)
    adamw_step(opt, lr_now=0.1)
    expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))
    assert abs(params["w"].data[0] - expect) < 1e-12


def test_schedule_endpoints_and_peak():
    sched = OneCycleSchedule(max_lr=0.01, total_steps=1000)
    assert one_cycle_lr(sched, 0) == 0.01 / 25.0
    assert one_cycle_lr(sched, sched.peak_step) == 0.01
    assert sched.peak_step == round(0.3 * 1000)
    last = one_cycle_lr(sched, 999)
    assert abs(last - 0.01 / 1e4) < 1e-18  # exact by the linear formula


def test_schedule_unimodal_with_exact_peak():
    sched = OneCycleSchedule(max_lr=3e-3, total_steps=10_000)
    values = [one_cycle_lr(sched, s) for s in range(10_000)]
    assert max(values) == 3e-3
    peak = values.index(max(values))
    for a, b in zip(values, values[1:peak + 1]):
        assert b >= a
    for a, b in zip(values[peak:], values[peak + 1:]):
        assert b <= a


def test_schedule_validation_and_range():
    with pytest.raises(ValueError):
        OneCycleSchedule(max_lr=0.1, total_steps=1)
    with pytest.raises(ValueError):
        OneCycleSchedule(max_lr=0.1, total_steps=10, pct_start=1.5)
    sched = OneCycleSchedule(max_lr=0.1, total_steps=10)
    with pytest.raises(ValueError, match="outside"):
        one_cycle_lr(sched, 10)
    with pytest.raises(ValueError, match="outside"):
        one_cycle_lr(sched, -1)
