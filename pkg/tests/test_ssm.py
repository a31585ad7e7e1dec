import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridmatch.errors import ContractError, DomainError
from hybridmatch.numerics import Tensor, check_gradients, no_grad, ops
from hybridmatch.ssm import (
    DiscreteSsm,
    SelectiveSsm,
    conv_kernel,
    scan_recurrent,
    scan_selective,
    selective_scan,
    ssm_kernel,
    zoh_discretize,
)


def _softplus(z):
    return math.log1p(math.exp(-abs(z))) + max(z, 0.0)


def brute_selective(x, W_d, b_d, W_b, W_c, a_log):
    """Scalar-loop float64 reference: exact A-bar, Euler B-bar, y = C . h."""
    L, D = x.shape
    N = a_log.shape[1]
    h = [[0.0] * N for _ in range(D)]
    y = np.zeros((L, D))
    for t in range(L):
        delta = [_softplus(sum(x[t, i] * W_d[i, d] for i in range(D)) + b_d[d]) for d in range(D)]
        B = [sum(x[t, i] * W_b[i, n] for i in range(D)) for n in range(N)]
        C = [sum(x[t, i] * W_c[i, n] for i in range(D)) for n in range(N)]
        for d in range(D):
            acc = 0.0
            for n in range(N):
                a_bar = math.exp(-delta[d] * math.exp(a_log[d, n]))
                h[d][n] = a_bar * h[d][n] + delta[d] * B[n] * x[t, d]
                acc += C[n] * h[d][n]
            y[t, d] = acc
    return y


# -- zoh ----------------------------------------------------------------------------

class TestZoh:
    def test_growth_case(self):
        a_bar, b_bar = zoh_discretize(math.log(2), 1.0, 1.0)
        assert a_bar == pytest.approx(2.0)
        assert b_bar == pytest.approx(1.0)

    def test_zero_a_limit(self):
        a_bar, b_bar = zoh_discretize(0.5, 0.0, 2.0)
        assert a_bar == pytest.approx(1.0)
        assert b_bar == pytest.approx(1.0)

    def test_decay_case(self):
        a_bar, b_bar = zoh_discretize(1.0, -1.0, 1.0)
        assert a_bar == pytest.approx(math.exp(-1))
        assert b_bar == pytest.approx(1 - math.exp(-1))

    def test_series_branch_continuous(self):
        _, near = zoh_discretize(1.0, 2e-6, 1.0)
        _, series = zoh_discretize(1.0, 5e-7, 1.0)
        assert abs(near - series) < 1e-5

    @pytest.mark.parametrize("delta", [0.0, -0.1])
    def test_nonpositive_step(self, delta):
        with pytest.raises(DomainError):
            zoh_discretize(delta, -1.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 5.0), st.floats(-10.0, -1e-3))
    def test_decay_in_unit_interval(self, delta, a):
        a_bar, _ = zoh_discretize(delta, a, 1.0)
        assert 0.0 < a_bar < 1.0


# -- LTI scans -----------------------------------------------------------------------

class TestRecurrentScan:
    def test_zero_input(self):
        ssm = DiscreteSsm([0.5, 0.9], [1.0, 2.0], [1.0, -1.0])
        np.testing.assert_array_equal(scan_recurrent(ssm, np.zeros(6)), 0.0)

    def test_memoryless(self, rng):
        x = rng.normal(size=7)
        np.testing.assert_allclose(scan_recurrent(DiscreteSsm(0.0, 1.0, 1.0), x), x)

    def test_running_sum(self):
        np.testing.assert_allclose(scan_recurrent(DiscreteSsm(1.0, 1.0, 1.0), [1, 1, 1]), [1, 2, 3])

    def test_causal(self, rng):
        ssm = DiscreteSsm(rng.uniform(0, 1, 4), rng.normal(size=4), rng.normal(size=4))
        x = rng.normal(size=10)
        x2 = x.copy()
        x2[6:] += rng.normal(size=4)
        np.testing.assert_array_equal(scan_recurrent(ssm, x)[:6], scan_recurrent(ssm, x2)[:6])

    def test_state_bound(self, rng):
        a_bar = rng.uniform(0.1, 0.9, 3)
        b_bar = rng.normal(size=3)
        x = rng.uniform(-1, 1, 200)
        bound = np.max(np.abs(b_bar)) * np.abs(x).max() / (1 - a_bar.max())
        for k in range(3):
            c = np.eye(3)[k]
            assert np.abs(scan_recurrent(DiscreteSsm(a_bar, b_bar, c), x)).max() <= bound + 1e-12


class TestKernel:
    def test_memoryless_kernel(self):
        np.testing.assert_allclose(ssm_kernel(DiscreteSsm(0.0, 2.0, 3.0), 4), [6, 0, 0, 0])

    def test_geometric(self):
        np.testing.assert_allclose(ssm_kernel(DiscreteSsm(0.5, 1.0, 1.0), 3), [1, 0.5, 0.25])

    def test_time_varying_rejected(self):
        with pytest.raises(ContractError):
            ssm_kernel(DiscreteSsm(np.full((4, 2), 0.5), [1.0, 1.0], [1.0, 1.0]), 4)

    def test_matches_recurrent_l16(self, rng):
        ssm = DiscreteSsm(rng.uniform(0, 0.99, 4), rng.normal(size=4), rng.normal(size=4))
        x = rng.normal(size=16)
        np.testing.assert_allclose(conv_kernel(x, ssm_kernel(ssm, 16)), scan_recurrent(ssm, x), atol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 64), st.integers(1, 16))
    def test_equivalence_property(self, seed, length, n):
        rng = np.random.default_rng(seed)
        a_bar, b_bar = zoh_discretize(rng.uniform(0.01, 1.0, n), -rng.uniform(0.01, 3.0, n), rng.normal(size=n))
        ssm = DiscreteSsm(a_bar, b_bar, rng.normal(size=n))
        x = rng.normal(size=length)
        np.testing.assert_allclose(conv_kernel(x, ssm_kernel(ssm, length)), scan_recurrent(ssm, x), atol=1e-5)


# -- selective scan --------------------------------------------------------------------

def _module(rng, d=8, n=4, dtype=np.float64):
    m = SelectiveSsm(d, rng, d_state=n).astype(dtype)
    m.a_log.data += rng.normal(0, 0.3, m.a_log.shape)
    return m


class TestSelectiveScan:
    def test_brute_force_oracle(self, rng):
        m = _module(rng)
        m.proj_delta.weight.data = rng.normal(0, 0.3, m.proj_delta.weight.shape)
        x = rng.normal(size=(64, 8))
        with no_grad():
            y = scan_selective(m, Tensor(x)).data
        ref = brute_selective(x, m.proj_delta.weight.data, m.proj_delta.bias.data, m.proj_b.weight.data,
                              m.proj_c.weight.data, m.a_log.data)
        assert np.abs(y - ref).max() / np.abs(ref).max() < 1e-4

    def test_float32_oracle(self, rng):
        m = _module(rng, dtype=np.float32)
        x = rng.normal(size=(64, 8))
        with no_grad():
            y = scan_selective(m, Tensor(x.astype(np.float32))).data
        ref = brute_selective(x, *(p.astype(np.float64) for p in (
            m.proj_delta.weight.data, m.proj_delta.bias.data, m.proj_b.weight.data,
            m.proj_c.weight.data, m.a_log.data)))
        assert np.abs(y - ref).max() / np.abs(ref).max() < 1e-4

    def test_frozen_state(self, rng):
        m = _module(rng)
        m.proj_delta.weight.data[:] = 0.0
        m.proj_delta.bias.data[:] = -30.0
        with no_grad():
            y = scan_selective(m, Tensor(rng.normal(size=(20, 8)))).data
        assert np.abs(y).max() < 1e-4

    def test_constant_input_matches_kernel(self, rng):
        m = _module(rng)
        x = np.tile(rng.normal(size=8), (12, 1))
        with no_grad():
            y = scan_selective(m, Tensor(x)).data
            delta = m.delta(Tensor(x[:1])).data[0]
            B = m.proj_b(Tensor(x[:1])).data[0]
            C = m.proj_c(Tensor(x[:1])).data[0]
            A = m.A().data
        for d in range(8):
            ssm = DiscreteSsm(np.exp(delta[d] * A[d]), delta[d] * B, C)
            np.testing.assert_allclose(y[:, d], conv_kernel(x[:, d], ssm_kernel(ssm, 12)), atol=1e-5)

    def test_causal(self, rng):
        m = _module(rng)
        x = rng.normal(size=(10, 8))
        x2 = x.copy()
        x2[7:] += 1.0
        with no_grad():
            a, b = scan_selective(m, Tensor(x)).data, scan_selective(m, Tensor(x2)).data
        np.testing.assert_array_equal(a[:7], b[:7])

    def test_initial_step_range(self, rng):
        m = SelectiveSsm(16, rng)
        with no_grad():
            d = m.delta(Tensor(np.zeros((1, 16)))).data
        assert np.all((d >= 1e-3 * 0.999) & (d <= 0.1 * 1.001))

    def test_a_strictly_negative(self, rng):
        assert np.all(SelectiveSsm(4, rng).A().data < 0)

    def test_batched_matches_unbatched(self, rng):
        m = _module(rng)
        x = rng.normal(size=(3, 9, 8))
        with no_grad():
            batched = m(Tensor(x)).data
            single = np.stack([m(Tensor(xi)).data for xi in x])
        np.testing.assert_allclose(batched, single, atol=1e-12)

    def test_parameter_gradients(self, rng):
        m = _module(rng)
        m.proj_delta.weight.data = rng.normal(0, 0.3, m.proj_delta.weight.shape)
        x = Tensor(rng.normal(size=(10, 8)))
        r = Tensor(rng.normal(size=(10, 8)))
        params = [m.a_log, m.proj_delta.weight, m.proj_delta.bias, m.proj_b.weight, m.proj_c.weight]
        errs = check_gradients(lambda: ops.sum(scan_selective(m, x) * r), params)
        assert max(errs) < 1e-2

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_primitive_gradients(self, seed):
        rng = np.random.default_rng(seed)
        B, L, D, N = 2, 5, 3, 4
        u = Tensor(rng.normal(size=(B, L, D)), requires_grad=True)
        delta = Tensor(rng.uniform(0.05, 0.8, (B, L, D)), requires_grad=True)
        A = Tensor(-rng.uniform(0.2, 2.0, (D, N)), requires_grad=True)
        Bm = Tensor(rng.normal(size=(B, L, N)), requires_grad=True)
        Cm = Tensor(rng.normal(size=(B, L, N)), requires_grad=True)
        r = Tensor(rng.normal(size=(B, L, D)))
        errs = check_gradients(lambda: ops.sum(selective_scan(u, delta, A, Bm, Cm) * r),
                               [u, delta, A, Bm, Cm], n_entries=None)
        assert max(errs) < 1e-3
