import numpy as np
import pytest

from mrirk.control import (
    StepControlConfig,
    constant_mode_dt,
    error_ratio_dt,
    propose_next_dt,
    safety_factor,
)


def test_safety_factor_examples():
    cfg = StepControlConfig(nu=0.9, k_newt_max=30)
    assert safety_factor(1, 2, cfg) == pytest.approx(0.9)
    assert safety_factor(30, 0, cfg) == pytest.approx(0.9 * 61 / 90)
    assert safety_factor(30, 0, cfg) == pytest.approx(0.61, abs=5e-3)
    assert safety_factor(0, 60, cfg) == pytest.approx(safety_factor(30, 0, cfg))


def test_error_law():
    cfg = StepControlConfig(eta_rk=1e-4, p_hat=3)
    assert error_ratio_dt(1e-4, 0.2, cfg) == pytest.approx(0.2)
    acc, dt = propose_next_dt(16e-4, 0.2, 1.0, cfg)
    assert not acc
    assert dt == pytest.approx(0.1)
    acc, dt = propose_next_dt(0.9e-4, 1.0, 0.9, StepControlConfig(eta_rk=1e-4, alpha=1.5))
    assert acc
    assert dt == pytest.approx(0.9 * (1 / 0.9) ** 0.25, rel=1e-12)
    assert dt == pytest.approx(0.9239, abs=5e-4)
    assert error_ratio_dt(0.0, 1.0, cfg) == np.inf


def test_acceptance_monotone_and_growth_cap():
    cfg = StepControlConfig(eta_rk=1e-3, alpha=1.5)
    rng = np.random.default_rng(1)
    for err in 10 ** rng.uniform(-8, 1, 200):
        acc, dt = propose_next_dt(err, 1.0, 0.9, cfg)
        assert acc == (err <= cfg.eta_rk)
        if acc:
            assert dt <= 1.5
        else:
            assert dt < 1.0
    acc, dt = propose_next_dt(0.0, 1.0, 1.0, cfg)
    assert acc and dt == 1.5


def test_constant_mode():
    cfg = StepControlConfig(alpha=1.5, mode="constant", dt=1.0)
    assert constant_mode_dt(1.0, 0.9, cfg) == 1.0
    assert constant_mode_dt(0.5, 0.9, cfg) == pytest.approx(0.675)
    # poor Newton convergence keeps the step below target
    small = safety_factor(30, 0, StepControlConfig(nu=0.5))
    assert constant_mode_dt(0.5, small, cfg) < 1.0


def test_tolerance_cascade_and_validation():
    cfg = StepControlConfig(eta_rk=1e-3, kappa=0.1)
    assert cfg.linear_tol < cfg.newton_tol < cfg.eta_rk
    assert cfg.newton_tol == pytest.approx(1e-4)
    assert StepControlConfig(mode="constant", dt0=1e-5).dt == 1e-5
    for bad in ({"kappa": 0}, {"kappa": 1.5}, {"alpha": 1.0}, {"dt0": 0}, {"mode": "pid"}):
        with pytest.raises(ValueError):
            StepControlConfig(**bad)
