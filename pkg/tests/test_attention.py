import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstransformer import autograd as ag
from mstransformer.attention import (
    HeadParams,
    ScaleSpec,
    extract_context,
    init_head,
    msa_standard,
    msmsa,
    multi_scale_attention,
    parse_scale,
    parse_scales,
    resolve_scale,
    sasa_head,
    windowed_attention,
)
from mstransformer.autograd import Tensor
from mstransformer.gradcheck import grad_check

METHODS = ("fused", "band", "dense")


def rand_head(rng, d, dh):
    return HeadParams(*(Tensor(rng.standard_normal((d, dh)), requires_grad=True) for _ in range(3)))


def dense_reference(h, hp, width=None):
    """Scaled dot-product attention written out position by position."""
    q, k, v = h @ hp.wq.data, h @ hp.wk.data, h @ hp.wv.data
    n, dh = q.shape
    r = n if width is None else (width - 1) // 2
    out = np.zeros((n, dh))
    for j in range(n):
        lo, hi = max(0, j - r), min(n - 1, j + r)
        logits = np.array([q[j] @ k[t] for t in range(lo, hi + 1)]) / math.sqrt(dh)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[j] = sum(w[i] * v[lo + i] for i in range(len(w)))
    return out


# -- scales --------------------------------------------------------------------

def test_resolve_fixed():
    assert resolve_scale(ScaleSpec.fixed(3), 100) == 3


def test_resolve_ratio_floors_to_one():
    assert resolve_scale(ScaleSpec.ratio(16), 16) == 1


def test_resolve_ratio_round_half_up_then_odd():
    assert resolve_scale(ScaleSpec.ratio(8), 100) == 13


def test_resolve_ratio_even_is_bumped():
    # 40 / 4 = 10 -> 11
    assert resolve_scale(ScaleSpec.ratio(4), 40) == 11


def test_resolve_caps_at_full_span():
    assert resolve_scale(ScaleSpec.fixed(99), 5) == 9
    assert resolve_scale(ScaleSpec.ratio(1), 1) == 1


@given(st.integers(1, 2000), st.sampled_from([1, 2, 4, 8, 16, 32]))
def test_resolved_ratio_is_odd_and_in_range(n, den):
    w = resolve_scale(ScaleSpec.ratio(den), n)
    assert w % 2 == 1 and 1 <= w <= 2 * n - 1


@pytest.mark.parametrize("bad", [0, 2, -3])
def test_fixed_width_must_be_odd_positive(bad):
    with pytest.raises(ValueError):
        ScaleSpec.fixed(bad)


def test_parse_scales_round_trip():
    specs = parse_scales("1, 3,N/16,N/2")
    assert [str(s) for s in specs] == ["1", "3", "N/16", "N/2"]
    assert parse_scale("N/8") == ScaleSpec.ratio(8)


@pytest.mark.parametrize("bad", ["", "4", "N/0", "M/2", "N/x", "3,,5"])
def test_parse_scales_rejects_bad_syntax(bad):
    with pytest.raises(ValueError):
        parse_scales(bad)


# -- context extraction ----------------------------------------------------------

def test_extract_context_radius_zero():
    x = Tensor(np.arange(10.0).reshape(5, 2))
    for j in range(5):
        assert np.array_equal(extract_context(x, j, 1).data, x.data[j : j + 1])


def test_extract_context_left_clip():
    x = Tensor(np.arange(10.0).reshape(5, 2))
    assert np.array_equal(extract_context(x, 0, 3).data, x.data[:2])


def test_extract_context_full_coverage():
    x = Tensor(np.arange(10.0).reshape(5, 2))
    assert np.array_equal(extract_context(x, 2, 5).data, x.data)


@given(st.integers(1, 12), st.data())
def test_extract_context_size(n, data):
    j = data.draw(st.integers(0, n - 1))
    w = data.draw(st.sampled_from([1, 3, 5, 7, 9, 31]))
    r = (w - 1) // 2
    rows = extract_context(Tensor(np.arange(n * 1.0)[:, None]), j, w).data[:, 0]
    assert list(rows) == list(range(max(0, j - r), min(n - 1, j + r) + 1))


# -- scale-aware head ----------------------------------------------------------------

@pytest.mark.parametrize("method", METHODS)
def test_sasa_singleton_window_returns_values(method):
    rng = np.random.default_rng(0)
    h = Tensor(rng.standard_normal((6, 5)))
    hp = rand_head(rng, 5, 3)
    out = sasa_head(h, hp, 1, method=method).data
    np.testing.assert_allclose(out, h.data @ hp.wv.data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_sasa_full_window_equals_standard_head(method):
    rng = np.random.default_rng(1)
    for n in (1, 2, 7, 12):
        h = Tensor(rng.standard_normal((n, 6)))
        hp = rand_head(rng, 6, 3)
        eye = Tensor(np.eye(3))
        std = msa_standard(h, [hp], eye).data
        assert np.abs(sasa_head(h, hp, 2 * n - 1, method=method).data - std).max() <= 1e-10
        assert np.abs(sasa_head(h, hp, 2 * n + 7, method=method).data - std).max() <= 1e-10


@pytest.mark.parametrize("method", METHODS)
def test_sasa_zero_input(method):
    one = Tensor(np.ones((1, 1)))
    hp = HeadParams(one, one, one)
    out = sasa_head(Tensor(np.zeros((2, 1))), hp, 3, method=method).data
    assert np.array_equal(out, np.zeros((2, 1)))


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("width", [1, 3, 5, 9])
def test_sasa_matches_loop_reference(method, width):
    rng = np.random.default_rng(2)
    h = rng.standard_normal((9, 4))
    hp = rand_head(rng, 4, 2)
    out = sasa_head(Tensor(h), hp, width, method=method).data
    np.testing.assert_allclose(out, dense_reference(h, hp, width), rtol=0, atol=1e-12)


def test_sasa_rejects_even_width():
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        sasa_head(Tensor(rng.standard_normal((4, 2))), rand_head(rng, 2, 2), 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 14), st.sampled_from([1, 3, 5, 7]), st.integers(0, 10_000),
       st.sampled_from(METHODS))
def test_locality_outside_window_is_bitwise_irrelevant(n, width, seed, method):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((n, 4))
    hp = rand_head(rng, 4, 2)
    j = int(rng.integers(n))
    r = (width - 1) // 2
    outside = [t for t in range(n) if abs(t - j) > r]
    if not outside:
        return
    h2 = h.copy()
    h2[rng.choice(outside)] += rng.standard_normal(4) * 10
    a = sasa_head(Tensor(h), hp, width, method=method).data[j]
    b = sasa_head(Tensor(h2), hp, width, method=method).data[j]
    assert np.array_equal(a, b)


@pytest.mark.parametrize("method", METHODS)
def test_sasa_shift_equivariance_on_interior(method):
    rng = np.random.default_rng(4)
    width, n, shift = 5, 12, 3
    r = (width - 1) // 2
    h = rng.standard_normal((n + shift, 4))
    hp = rand_head(rng, 4, 2)
    a = sasa_head(Tensor(h[:n]), hp, width, method=method).data
    b = sasa_head(Tensor(h[shift:]), hp, width, method=method).data
    # query j of the first sequence sees the same rows as query j - shift of the second
    for j in range(shift + r, n - r):
        np.testing.assert_allclose(a[j], b[j - shift], rtol=0, atol=1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_window_rows_sum_to_one_and_stay_in_window(method):
    rng = np.random.default_rng(5)
    q, k, v = (Tensor(rng.standard_normal((3, 11, 4))) for _ in range(3))
    for width in (1, 3, 7, 21):
        _, maps = windowed_attention(q, k, v, width, retain=True, method=method)
        assert maps.shape == (3, 11, 11)
        np.testing.assert_allclose(maps.sum(-1), 1.0, rtol=0, atol=1e-12)
        r = (width - 1) // 2
        idx = np.arange(11)
        outside = np.abs(idx[:, None] - idx[None, :]) > r
        assert (maps[:, outside] == 0).all()


def test_methods_agree_on_mixed_widths():
    rng = np.random.default_rng(6)
    h = Tensor(rng.standard_normal((2, 13, 6)))
    wq, wk, wv = (Tensor(rng.standard_normal((5, 6, 3))) for _ in range(3))
    widths = [1, 3, 3, 7, 25]
    outs = {m: multi_scale_attention(h, wq, wk, wv, widths, retain=True, method=m) for m in METHODS}
    for m in ("band", "dense"):
        assert np.abs(outs[m][0].data - outs["fused"][0].data).max() <= 1e-12
        assert np.abs(outs[m][1] - outs["fused"][1]).max() <= 1e-12


@pytest.mark.parametrize("method", METHODS)
def test_multi_scale_gradients(method):
    rng = np.random.default_rng(7)
    h = Tensor(rng.standard_normal((2, 8, 5)), requires_grad=True)
    wq, wk, wv = (Tensor(rng.standard_normal((3, 5, 2)) * 0.5, requires_grad=True) for _ in range(3))
    w = Tensor(rng.standard_normal((2, 8, 6)))
    f = lambda: ag.sum_all(ag.mul(multi_scale_attention(h, wq, wk, wv, [1, 3, 15], method=method)[0], w))
    assert grad_check(f, [h, wq, wk, wv]) <= 1e-6


def test_float32_inputs_stay_float32():
    rng = np.random.default_rng(8)
    q, k, v = (Tensor(rng.standard_normal((2, 6, 3)).astype(np.float32)) for _ in range(3))
    for m in METHODS:
        assert windowed_attention(q, k, v, 3, method=m)[0].dtype == np.float32


# -- multi-scale multi-head ------------------------------------------------------------

def test_msmsa_one_head_identity_output_is_sasa():
    rng = np.random.default_rng(9)
    h = Tensor(rng.standard_normal((7, 4)))
    hp = rand_head(rng, 4, 4)
    out = msmsa(h, [(hp, ScaleSpec.fixed(3))], Tensor(np.eye(4))).data
    np.testing.assert_allclose(out, sasa_head(h, hp, 3).data, rtol=0, atol=1e-14)


def test_msmsa_full_windows_equal_standard():
    rng = np.random.default_rng(10)
    for _ in range(5):
        n = int(rng.integers(1, 12))
        h = Tensor(rng.standard_normal((n, 8)))
        heads = [rand_head(rng, 8, 4) for _ in range(3)]
        wo = Tensor(rng.standard_normal((12, 8)))
        full = [(hp, ScaleSpec.fixed(2 * n - 1)) for hp in heads]
        diff = msmsa(h, full, wo).data - msa_standard(h, heads, wo).data
        assert np.abs(diff).max() <= 1e-10


def test_msmsa_gradcheck_two_heads():
    rng = np.random.default_rng(11)
    h = Tensor(rng.standard_normal((6, 8)), requires_grad=True)
    heads = [rand_head(rng, 8, 4), rand_head(rng, 8, 4)]
    wo = Tensor(rng.standard_normal((8, 8)) * 0.5, requires_grad=True)
    w = Tensor(rng.standard_normal((6, 8)))
    pairs = list(zip(heads, [ScaleSpec.fixed(3), ScaleSpec.ratio(2)]))
    leaves = [h, wo] + [t for hp in heads for t in (hp.wq, hp.wk, hp.wv)]
    assert grad_check(lambda: ag.sum_all(ag.mul(msmsa(h, pairs, wo), w)), leaves) <= 1e-4


def test_msmsa_head_count_mismatch():
    rng = np.random.default_rng(12)
    h = Tensor(rng.standard_normal((4, 4)))
    with pytest.raises(ag.ShapeError):
        msmsa(h, [(rand_head(rng, 4, 2), ScaleSpec.fixed(3))], Tensor(np.eye(4)))


def test_msmsa_retains_maps():
    rng = np.random.default_rng(13)
    h = Tensor(rng.standard_normal((5, 4)))
    heads = [(rand_head(rng, 4, 2), ScaleSpec.fixed(1)), (rand_head(rng, 4, 2), ScaleSpec.fixed(3))]
    _, maps = msmsa(h, heads, Tensor(np.eye(4)), retain=True)
    assert maps.shape == (2, 5, 5)
    assert np.array_equal(maps[0], np.eye(5))


# -- standard attention ------------------------------------------------------------

def test_msa_single_position():
    rng = np.random.default_rng(14)
    h = Tensor(rng.standard_normal((1, 4)))
    heads = [rand_head(rng, 4, 2), rand_head(rng, 4, 2)]
    wo = Tensor(rng.standard_normal((4, 4)))
    expected = np.concatenate([h.data @ hp.wv.data for hp in heads], axis=-1) @ wo.data
    np.testing.assert_allclose(msa_standard(h, heads, wo).data, expected, rtol=0, atol=1e-12)


def test_msa_permutation_equivariance():
    rng = np.random.default_rng(15)
    h = rng.standard_normal((7, 6))
    heads = [rand_head(rng, 6, 3) for _ in range(2)]
    wo = Tensor(rng.standard_normal((6, 6)))
    perm = rng.permutation(7)
    a = msa_standard(Tensor(h), heads, wo).data
    b = msa_standard(Tensor(h[perm]), heads, wo).data
    np.testing.assert_allclose(a[perm], b, rtol=0, atol=1e-12)


def test_msa_matches_independent_formula():
    rng = np.random.default_rng(16)
    h = rng.standard_normal((6, 5))
    heads = [rand_head(rng, 5, 3) for _ in range(2)]
    wo = rng.standard_normal((6, 5))
    expected = np.concatenate([dense_reference(h, hp) for hp in heads], axis=-1) @ wo
    got = msa_standard(Tensor(h), heads, Tensor(wo)).data
    assert np.abs(got - expected).max() <= 1e-12


def test_msa_shape_mismatch():
    rng = np.random.default_rng(17)
    with pytest.raises(ag.ShapeError):
        msa_standard(Tensor(rng.standard_normal((3, 5))), [rand_head(rng, 4, 2)], Tensor(np.eye(2)))


def test_init_head_shapes():
    hp = init_head(np.random.default_rng(0), 12, 4)
    assert hp.wq.shape == (12, 4) and hp.head_dim == 4
