import math

import numpy as np
import pytest

from lcgode import autodiff as ad
from lcgode.ode import (
    DecoderParams,
    IntegrationError,
    OdeFuncParams,
    decode,
    init_decoder_params,
    init_ode_params,
    integrate,
    ode_func,
    rk4_step,
    vector_field,
)


def identity(z):
    return z


def test_zero_field():
    p = init_ode_params(np.random.default_rng(0), 3)
    zero = OdeFuncParams(*(np.zeros_like(x) for x in (p.W1, p.b1, p.W2, p.b2)))
    np.testing.assert_array_equal(ode_func(np.ones(3), np.ones(3), zero), np.zeros(3))


def test_ode_func_matches_mlp_oracle():
    p = init_ode_params(np.random.default_rng(1), 4)
    r = np.random.default_rng(2)
    z, zg = r.normal(size=4), r.normal(size=4)
    expect = np.tanh(np.concatenate([z, zg]) @ p.W1 + p.b1) @ p.W2 + p.b2
    np.testing.assert_allclose(ode_func(z, zg, p), expect, rtol=0, atol=1e-15)


def test_field_is_autonomous():
    # the field has no time argument; integrating on shifted grids agrees
    p = init_ode_params(np.random.default_rng(3), 3)
    f = vector_field(np.ones(3), p)
    z0 = np.array([0.1, -0.2, 0.3])
    times = np.linspace(0.1, 1.0, 10)
    a = integrate(f, z0, times)
    b = integrate(f, z0, times + 3.7)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_rk4_examples():
    np.testing.assert_array_equal(rk4_step(lambda z: 0.0 * z, np.array([1.5]), 0.1), [1.5])
    up = float(rk4_step(identity, np.array(1.0), 0.1))
    assert abs(up - math.exp(0.1)) < 1e-7
    assert round(up, 8) == 1.10517083
    down = float(rk4_step(lambda z: -z, np.array(1.0), 0.1))
    assert abs(down - 0.90483742) < 1e-7


def test_rk4_rejects_bad_step():
    with pytest.raises(ValueError):
        rk4_step(identity, np.ones(1), 0.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_reports_step():
    with pytest.raises(IntegrationError) as err:
        integrate(lambda z: z * z * 1e200, np.array([1e100]), np.linspace(0, 1, 5))
    assert err.value.step == 1


def test_integrate_examples():
    states = integrate(lambda z: 0.0 * z, np.array([1.0, 2.0]), np.linspace(0, 3, 7))
    assert len(states) == 7
    assert all(np.array_equal(s, [1.0, 2.0]) for s in states)
    final = float(integrate(identity, np.array(1.0), np.linspace(0, 1, 11))[-1])
    # the global error of RK4 at h = 0.1 is about 2.1e-6 absolute, 7.7e-7 relative
    assert abs(final - math.e) / math.e < 1e-6


def test_rk4_error_ratio_on_halving():
    errs = [abs(float(integrate(identity, np.array(1.0), np.linspace(0, 1, k + 1))[-1]) - math.e) for k in (10, 20)]
    assert 8 <= errs[0] / errs[1] <= 32


def test_substeps_match_finer_grid():
    coarse = integrate(identity, np.array(1.0), np.linspace(0, 1, 6), substeps=4)
    fine = integrate(identity, np.array(1.0), np.linspace(0, 1, 21))
    np.testing.assert_allclose(coarse[-1], fine[-1], rtol=1e-14)


@pytest.mark.parametrize("times", [[0.0, 0.0, 1.0], [1.0, 0.5], []])
def test_bad_time_grids(times):
    with pytest.raises(ValueError):
        integrate(identity, np.ones(1), times)


def test_backprop_through_solver():
    p = init_ode_params(np.random.default_rng(4), 2)
    times = np.linspace(0, 1, 9)

    def fn(tape, v):
        f = vector_field(v["zg"], OdeFuncParams.from_arrays(v))
        states = integrate(f, v["z0"], times)
        return ad.sum(ad.square(ad.stack(states)))

    point = {**p.arrays(), "z0": np.array([0.3, -0.5]), "zg": np.array([0.2, 0.1])}
    assert ad.grad_check(fn, point) < 1e-4


def test_decode_examples():
    z = np.array([0.5, -1.0, 2.0])
    assert decode(z, DecoderParams(np.zeros(3), np.array(0.7))) == 0.7
    w = np.array([1.0, 2.0, 3.0])
    assert decode(z, DecoderParams(w, np.array(0.1))) == pytest.approx(w @ z + 0.1, abs=1e-15)
    traj = np.tile(z, (5, 1))
    out = decode(traj, init_decoder_params(np.random.default_rng(0), 3, hidden=4))
    assert np.all(out == out[0])


def test_hidden_decoder_matches_oracle():
    p = init_decoder_params(np.random.default_rng(5), 3, hidden=4)
    z = np.array([0.1, 0.2, -0.3])
    expect = np.tanh(z @ p.W_hidden + p.b_hidden) @ p.w + p.b
    assert float(decode(z, p)) == pytest.approx(float(expect), abs=1e-15)
    assert DecoderParams.from_arrays(p.arrays()).W_hidden is not None
