import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gigp import tensor as T
from gigp.tensor import Tensor, finite_difference_check
from gigp.moments import (MOMENT_TRIPLES, DegenerateFieldError,
                          MomentAttentionParams, channel_collapse,
                          directional_moments, msgc_loss, mvma_attention,
                          normalized_moments)


def test_six_second_order_triples():
    assert set(MOMENT_TRIPLES) == {(2, 0, 0), (0, 2, 0), (0, 0, 2),
                                   (1, 1, 0), (1, 0, 1), (0, 1, 1)}


@pytest.mark.parametrize("n", [8, 16, 24])
@pytest.mark.parametrize("c", [0.5, 1.0, 3.5])
def test_constant_field_moments_exact(n, c):
    v = normalized_moments(Tensor(np.full((1, 1, n, n, n), c))).as_array()
    assert np.array_equal(v, np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]))


def test_degenerate_field_raises():
    with pytest.raises(DegenerateFieldError):
        normalized_moments(Tensor(np.zeros((1, 1, 4, 4, 4))))


def test_directional_moments_reduce_one_axis():
    f = Tensor(np.ones((2, 3, 4, 5, 6)))
    for axis, shape in [("h", (2, 3, 1, 5, 6)), ("w", (2, 3, 4, 1, 6)),
                        ("l", (2, 3, 4, 5, 1))]:
        mu = directional_moments(f, axis)
        assert all(m.data.shape == shape for m in mu.values())


def test_directional_moments_bad_axis():
    with pytest.raises(ValueError):
        directional_moments(Tensor(np.ones((1, 1, 2, 2, 2))), "x")


def test_flip_symmetry_exact_on_integer_grid():
    rng = np.random.default_rng(0)
    f = rng.integers(-8, 9, (1, 1, 5, 5, 5)).astype(np.float64)
    base = directional_moments(Tensor(f), "h")
    mirror = directional_moments(Tensor(np.flip(f, axis=2).copy()), "h")
    for pqr in MOMENT_TRIPLES:
        want = base[pqr].data if pqr[0] % 2 == 0 else -base[pqr].data
        assert np.array_equal(np.flip(mirror[pqr].data, axis=2), want), pqr


@given(st.integers(0, 2 ** 32 - 1),
       st.floats(-4, 4, allow_nan=False),
       st.floats(-4, 4, allow_nan=False))
@settings(max_examples=15, deadline=None)
def test_directional_moments_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((1, 1, 4, 4, 4))
    g = rng.standard_normal((1, 1, 4, 4, 4))
    lhs = directional_moments(Tensor(a * f + b * g), "w")
    mf = directional_moments(Tensor(f), "w")
    mg = directional_moments(Tensor(g), "w")
    for p in MOMENT_TRIPLES:
        assert np.allclose(lhs[p].data, a * mf[p].data + b * mg[p].data,
                           atol=1e-10)


def _attention_params(rng, C, lam):
    return MomentAttentionParams(
        kernels={a: Tensor(0.1 * rng.standard_normal((C, 6 * C, 1, 1, 1)))
                 for a in "hwl"},
        biases={a: Tensor(0.1 * rng.standard_normal(C)) for a in "hwl"},
        lambda_p=Tensor(lam))


def test_attention_identity_at_lambda_zero():
    rng = np.random.default_rng(1)
    f = Tensor(rng.standard_normal((2, 3, 4, 4, 4)))
    out = mvma_attention(f, _attention_params(rng, 3, 0.0))
    assert np.array_equal(out.data, f.data)


def test_attention_changes_output_at_lambda_nonzero():
    rng = np.random.default_rng(2)
    f = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
    out = mvma_attention(f, _attention_params(rng, 2, 0.5))
    assert out.data.shape == f.data.shape
    assert not np.array_equal(out.data, f.data)


def test_attention_kernel_shape_validation():
    rng = np.random.default_rng(3)
    params = _attention_params(rng, 2, 0.5)
    with pytest.raises(ValueError):
        mvma_attention(Tensor(np.ones((1, 3, 4, 4, 4))), params)


def test_channel_collapse_shape_and_value():
    f = Tensor(np.ones((1, 4, 3, 3, 3)))
    out = channel_collapse(f, Tensor(np.full(4, 0.25)), Tensor(np.array(1.0)))
    assert out.data.shape == (1, 1, 3, 3, 3)
    assert np.allclose(out.data, 2.0, atol=1e-15)


def _vec(rng):
    return normalized_moments(Tensor(rng.standard_normal((1, 1, 5, 5, 5)) + 2.0))


def test_msgc_zero_when_matched():
    rng = np.random.default_rng(4)
    v = _vec(rng)
    z = msgc_loss([(v, v), (v, v)], (v, v), (v, v), [0.25, 0.25], [0.25, 0.25])
    assert float(z.data) == 0.0


def test_msgc_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(10):
        val = msgc_loss([(_vec(rng), _vec(rng))], (_vec(rng), _vec(rng)),
                        (_vec(rng), _vec(rng)), [0.5], [0.5])
        assert float(val.data) >= 0.0


def test_msgc_level_weight_validation():
    rng = np.random.default_rng(6)
    v = _vec(rng)
    with pytest.raises(ValueError):
        msgc_loss([(v, v)], (v, v), (v, v), [0.5, 0.5], [0.5])


def test_normalized_moments_gradient():
    rng = np.random.default_rng(7)
    f = Tensor(rng.standard_normal((1, 1, 4, 4, 4)) + 2.0)
    w = {p: rng.standard_normal() for p in MOMENT_TRIPLES}

    def f_sum(t):
        v = normalized_moments(t)
        return sum((v.values[p] * Tensor(w[p]) for p in MOMENT_TRIPLES),
                   Tensor(0.0))
    assert finite_difference_check(f_sum, f, num_probes=25, rng=rng) < 1e-4


def test_msgc_gradient():
    rng = np.random.default_rng(8)
    ref_ns, ref_gp = _vec(rng), _vec(rng)
    f = Tensor(rng.standard_normal((1, 1, 4, 4, 4)) + 2.0)

    def loss(t):
        v = normalized_moments(t)
        return msgc_loss([(v, v)], (ref_ns, ref_ns), (ref_gp, ref_gp),
                         [0.5], [0.5])
    assert finite_difference_check(loss, f, num_probes=25, rng=rng) < 1e-4


def test_scale_invariance_smooth_field():
    from gigp.data import _smooth_bump_field
    rng = np.random.default_rng(9)
    fld = 1.5 + 0.8 * _smooth_bump_field((24, 24, 24), rng)
    hi = Tensor(fld[None, None])
    lo = T.resample_trilinear(hi, (12, 12, 12))
    dev = np.abs(normalized_moments(hi).as_array()
                 - normalized_moments(lo).as_array())
    assert np.max(dev) < 2e-2
