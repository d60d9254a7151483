import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gigp import tensor as T
from gigp.tensor import Tensor, backward, finite_difference_check
from gigp.ssm import (DIRECTIONS, GiimParams, SsmParams, discretize, giim_block,
                      init_giim_params, init_ssm_params, iim_forward,
                      layer_norm, make_sequences, selective_scan,
                      selective_scan_naive)


def _branch(rng, n=4, **kw):
    return init_ssm_params(n, rng, "b", {}, **kw)


def test_state_matrix_must_be_negative():
    z = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        SsmParams(a=Tensor(np.array([-1.0, 0.0, -2.0])), w_delta=z, b_delta=z,
                  w_b=z, c_b=z, w_c=z, c_c=z, d=z)


def test_discretize_positive_delta_required():
    with pytest.raises(ValueError):
        discretize(np.array([0.5, -0.1]), np.array([-1.0, -2.0]),
                   np.array([1.0, 1.0]))


def test_discretize_values():
    abar, bbar = discretize(Tensor(0.5), Tensor(np.array([-2.0])),
                            Tensor(np.array([3.0])))
    assert np.allclose(abar.data, np.exp(-1.0))
    assert np.allclose(bbar.data, 1.5)


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(1, 12),
       st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_scan_matches_naive_recurrence(seed, m, length, n):
    rng = np.random.default_rng(seed)
    params = _branch(rng, n)
    x = rng.standard_normal((m, length))
    fast = selective_scan(Tensor(x), params).data
    slow = selective_scan_naive(x, params)
    assert np.max(np.abs(fast - slow)) < 1e-12


def test_scan_rejects_bad_rank():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        selective_scan(Tensor(np.zeros((2, 3, 4))), _branch(rng))


def test_scan_stability_long_sequence():
    rng = np.random.default_rng(1)
    y = selective_scan(Tensor(rng.standard_normal((2, 4096))), _branch(rng)).data
    assert np.all(np.isfinite(y))


_FIELDS = ("a", "w_delta", "b_delta", "w_b", "c_b", "w_c", "c_c", "d")


def test_scan_token_gradient():
    rng = np.random.default_rng(2)
    params = _branch(rng, 3)
    x = Tensor(rng.standard_normal((2, 5)))
    w = Tensor(rng.standard_normal((2, 5)))
    err = finite_difference_check(
        lambda t: (selective_scan(t, params) * w).sum(), x, rng=rng)
    assert err < 1e-5


@pytest.mark.parametrize("field", _FIELDS)
def test_scan_parameter_gradient(field):
    rng = np.random.default_rng(2)
    params = _branch(rng, 3)
    x = Tensor(rng.standard_normal((2, 5)))
    w = Tensor(rng.standard_normal((2, 5)))

    def f(t):
        kw = {n: getattr(params, n) for n in _FIELDS}
        kw[field] = t
        return (selective_scan(x, SsmParams(**kw)) * w).sum()
    assert finite_difference_check(f, getattr(params, field), rng=rng) < 1e-5


@pytest.mark.parametrize("direction", DIRECTIONS)
def test_make_sequences_roundtrip_bitwise(direction):
    rng = np.random.default_rng(3)
    f = Tensor(rng.standard_normal((2, 3, 7)))
    seq, restore = make_sequences(f, direction)
    assert seq.data.ndim == 2
    assert np.array_equal(restore(seq).data, f.data)


def test_make_sequences_rejects_rank():
    with pytest.raises(ValueError):
        make_sequences(Tensor(np.zeros((2, 3, 4, 5))), "f")
    with pytest.raises(ValueError):
        make_sequences(Tensor(np.zeros((2, 3, 4))), "q")


def test_iim_forward_direction_weights():
    rng = np.random.default_rng(4)
    branches = {d: _branch(rng) for d in DIRECTIONS}
    f = Tensor(rng.standard_normal((2, 3, 5)))
    full = iim_forward(f, branches, 0.5, 0.5).data
    fr_only = iim_forward(f, branches, 0.0, 0.0).data
    c_seq, c_restore = make_sequences(f, "c")
    t_seq, t_restore = make_sequences(f, "t")
    extra = 0.5 * (c_restore(selective_scan(c_seq, branches["c"])).data
                   + t_restore(selective_scan(t_seq, branches["t"])).data)
    assert np.allclose(full, fr_only + extra, atol=1e-12)


def test_layer_norm_statistics():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 8, 6)) * 3 + 1)
    out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-12)
    assert np.allclose(out.std(axis=1), 1.0, atol=1e-3)


def test_giim_block_disabled_is_identity():
    rng = np.random.default_rng(6)
    params = init_giim_params(4, 4, rng, "g", {})
    f = Tensor(rng.standard_normal((1, 4, 3, 3, 3)))
    out = giim_block(f, params, 0.5, 0.5, enabled=False)
    assert out is f


def test_giim_block_near_identity_at_init():
    rng = np.random.default_rng(7)
    params = init_giim_params(4, 4, rng, "g", {})
    f = Tensor(rng.standard_normal((1, 4, 4, 4, 4)))
    out = giim_block(f, params, 0.5, 0.5).data
    assert out.shape == f.data.shape
    rel = np.linalg.norm(out - f.data) / np.linalg.norm(f.data)
    assert rel < 0.25


def test_giim_block_end_to_end_gradient():
    rng = np.random.default_rng(8)
    reg = {}
    params = init_giim_params(2, 3, rng, "g", reg)
    f = Tensor(rng.standard_normal((1, 2, 3, 3, 3)), requires_grad=True)
    loss = (giim_block(f, params, 0.5, 0.5) ** 2).sum()
    backward(loss)
    assert f.grad is not None and np.all(np.isfinite(f.grad))
    graded = [n for n, t in reg.items() if t.grad is not None
              and np.any(t.grad != 0.0)]
    assert len(graded) > len(reg) // 2
