import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from progdit import schedule as S
from progdit.schedule import NoiseSchedule, ParameterError
from progdit.tensor import DimensionError


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.from_config()


def test_endpoints_and_vp_identity(sched):
    assert sched.alpha_sigma(0) == (1.0, 0.0)
    a, s = sched.alpha_sigma(np.arange(sched.N + 1))
    assert np.max(np.abs(a * a + s * s - 1.0)) < 1e-12
    assert np.all(np.diff(sched.alpha_bar) < 0) and sched.alpha_bar[-1] > 0


def test_cosine_midpoint_oracle(sched):
    n, s = 1000, 0.008
    f = lambda t: math.cos((t / n + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
    # clipping only bites near t=N, so the midpoint equals the unclipped ratio
    assert abs(sched.alpha_bar[500] - f(500) / f(0)) < 1e-12
    a, _ = sched.alpha_sigma(500)
    assert abs(a - math.sqrt(f(500) / f(0))) < 1e-12


def test_range_errors(sched):
    for bad in (-1, sched.N + 1):
        with pytest.raises(IndexError):
            sched.alpha_sigma(bad)


def test_q_sample_examples(sched, rng):
    z0, eps = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    assert np.array_equal(sched.q_sample(z0, 0, eps), z0)
    h = math.sqrt(0.5)
    assert np.allclose(S.q_sample(z0, h, h, z0), math.sqrt(2) * z0, atol=1e-15)
    a, s = sched.alpha_sigma(300)
    assert np.max(np.abs(sched.q_sample(z0, 300, eps) - (a * z0 + s * eps))) < 1e-12
    with pytest.raises(DimensionError):
        S.q_sample(z0, a, s, eps[:1])


def test_v_target_examples(sched, rng):
    z0, eps = rng.standard_normal(5), rng.standard_normal(5)
    assert np.array_equal(sched.v_target(z0, eps, 0), eps)
    a, _ = sched.alpha_sigma(640)
    assert np.allclose(sched.v_target(np.zeros(5), eps, 640), a * eps, atol=0)


def test_x0_from_v_examples(sched, rng):
    z, e = rng.standard_normal(4), rng.standard_normal(4)
    assert np.array_equal(sched.x0_from_v(z, e, 0), z)
    a, s = sched.alpha_sigma(123)
    x0, eh = sched.x0_from_v(z, e, 123), sched.eps_from_v(z, e, 123)
    assert np.max(np.abs(a * x0 + s * eh - z)) < 1e-10


@given(st.integers(0, 1000), st.integers(0, 2**31))
def test_property_linear_system_roundtrips(t, seed):
    sched = NoiseSchedule.from_config()
    r = np.random.default_rng(seed)
    z0, eps = r.standard_normal((3, 4)), r.standard_normal((3, 4))
    zt = sched.q_sample(z0, t, eps)
    v = sched.v_target(z0, eps, t)
    assert np.max(np.abs(sched.x0_from_v(zt, v, t) - z0)) < 1e-10
    assert np.max(np.abs(sched.eps_from_v(zt, v, t) - eps)) < 1e-10


def test_batched_coefficients(sched, rng):
    z0, eps = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
    t = np.array([1, 500, 999])
    zt = sched.q_sample(z0, t, eps)
    for i in range(3):
        assert np.allclose(zt[i], sched.q_sample(z0[i], int(t[i]), eps[i]), atol=1e-15)


def test_t_from_sigma_inverts_ratio(sched):
    t = np.array([1, 10, 400, 717, 968, 1000])
    back = sched.t_from_sigma(sched.sigma_ratio(t))
    assert np.max(np.abs(back - t)) < 1e-9
    assert sched.t_from_sigma(0.0) == 0.0
    alpha, sigma = S.vp_from_sigma(2.0)
    assert abs(sigma / alpha - 2.0) < 1e-12 and abs(alpha ** 2 + sigma ** 2 - 1) < 1e-12


def test_karras_endpoints_and_oracle():
    g = S.karras_sigmas(10, 0.02, 80.0, 7.0)
    assert g.sigmas[0] == 80.0 and g.sigmas[9] == 0.02 and g.sigmas[-1] == 0.0
    assert len(g) == 11
    for i in range(1, 9):
        ref = (80.0 ** (1 / 7) + i / 9 * (0.02 ** (1 / 7) - 80.0 ** (1 / 7))) ** 7
        assert abs(g.sigmas[i] - ref) < 1e-10


@pytest.mark.parametrize("args", [(1, 0.1, 1.0, 7.0), (5, 0.0, 1.0, 7.0), (5, 2.0, 1.0, 7.0), (5, 0.1, 1.0, 0.0)])
def test_karras_invalid(args):
    with pytest.raises(ParameterError):
        S.karras_sigmas(*args)


@given(st.integers(2, 200), st.floats(1e-3, 1.0), st.floats(1.5, 200.0), st.floats(0.5, 10.0))
def test_property_karras_strictly_decreasing(n, lo, ratio, rho):
    g = S.karras_sigmas(n, lo, lo * ratio, rho)
    assert np.all(np.diff(g.sigmas) < 0)
    assert g.sigmas[0] == lo * ratio and g.sigmas[n - 1] == lo
