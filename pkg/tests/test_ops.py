import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sacnet import ops
from sacnet.gradchecks import primitive_checks
from sacnet.gradcheck import gradcheck
from sacnet.nn import Conv2d, DropPath, LayerNorm
from sacnet.ops import DropPathConfig
from sacnet.tensor import ShapeError, Tensor

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


# conv2d ------------------------------------------------------------------------------

def test_conv_all_ones_center_is_nine():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_delta_kernel_is_identity(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(w), padding=1).data, x)


def test_conv_stride_two_shape():
    out = ops.conv2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((5, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 5, 4, 4)


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((1, 2, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 2))
    for o in range(3):
        for i in range(3):
            for j in range(2):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError, match="channel"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="output size"):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        Conv2d(1, 1, 0, rng=np.random.default_rng(0))


# layernorm ----------------------------------------------------------------------------

def test_layernorm_constant_input_gives_zeros():
    out = LayerNorm(4)(Tensor(np.full((1, 4, 2, 2), 3.7)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layernorm_two_channels():
    x = Tensor(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    out = ops.layernorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-9)


def test_layernorm_affine_collapse(rng):
    out = ops.layernorm(Tensor(rng.standard_normal((2, 3, 4, 4))), Tensor(np.zeros(3)), Tensor(np.full(3, 5.0)))
    np.testing.assert_array_equal(out.data, 5.0)


def test_layernorm_last_axis(rng):
    x = rng.standard_normal((2, 5, 6))
    out = LayerNorm(6, axis=-1)(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_layernorm_rejects_bad_eps_and_channels():
    with pytest.raises(ValueError):
        LayerNorm(3, eps=0.0)
    with pytest.raises(ShapeError):
        ops.layernorm(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


# softmax --------------------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(9))).data, 1 / 9)


def test_softmax_peaked():
    out = ops.softmax(Tensor(np.array([10.0, 0.0, 0.0]))).data
    e = np.exp(-10.0)
    np.testing.assert_allclose(out, [1 / (1 + 2 * e), e / (1 + 2 * e), e / (1 + 2 * e)], rtol=1e-12)
    assert abs(out[0] - 0.99991) < 1e-5 and abs(out[1] - 0.000045) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-500, 500))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    a = ops.softmax(Tensor(x), axis=1).data
    b = ops.softmax(Tensor(x + c), axis=1).data
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(a > 0)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_large_logits_stay_finite():
    out = ops.softmax(Tensor(np.array([1000.0, 999.0])))
    assert np.all(np.isfinite(out.data))


# bilinear sampling -----------------------------------------------------------------------

def test_sample_integer_point_is_exact(rng):
    x = rng.standard_normal((3, 5, 6))
    np.testing.assert_array_equal(ops.bilinear_sample(Tensor(x), (2, 3)).data, x[:, 2, 3])


def test_sample_midpoint():
    x = np.zeros((1, 1, 2))
    x[0, 0, 1] = 1.0
    assert ops.bilinear_sample(Tensor(x), (0.0, 0.5)).data[0] == 0.5


def test_sample_far_out_of_bounds_is_zero(rng):
    x = rng.standard_normal((2, 4, 4))
    np.testing.assert_array_equal(ops.bilinear_sample(Tensor(x), (-10.0, -10.0)).data, 0.0)


def test_sample_partially_outside_reads_zero_padding():
    x = np.ones((1, 3, 3))
    # half a pixel above the top row: two in-bounds corners of weight 0.5
    assert ops.bilinear_sample(Tensor(x), (-0.5, 1.0)).data[0] == 0.5


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 4.0))
def test_sample_is_continuous(r, c):
    x = np.random.default_rng(5).standard_normal((2, 4, 5))
    a = ops.bilinear_sample(Tensor(x), (r, c)).data
    b = ops.bilinear_sample(Tensor(x), (r + 1e-7, c - 1e-7)).data
    assert np.max(np.abs(a - b)) < 1e-5


def test_gather_matches_sample(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    rows = rng.uniform(-1, 5, (1, 6))
    cols = rng.uniform(-1, 5, (1, 6))
    g = ops.bilinear_gather(Tensor(x), Tensor(rows), Tensor(cols)).data
    for i in range(6):
        s = ops.bilinear_sample(Tensor(x[0]), (rows[0, i], cols[0, i])).data
        np.testing.assert_allclose(g[0, :, i], s, atol=1e-14)


# resize -----------------------------------------------------------------------------------

def test_resize_same_size_is_identity(rng):
    x = rng.standard_normal((2, 3, 5, 7))
    np.testing.assert_allclose(ops.bilinear_resize(Tensor(x), 5, 7).data, x, atol=1e-15)


def test_resize_constant():
    out = ops.bilinear_resize(Tensor(np.full((1, 2, 3, 3), 4.25)), 7, 5).data
    np.testing.assert_allclose(out, 4.25, atol=1e-14)


def test_resize_2x2_to_4x4_corners_and_interior():
    x = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2))
    out = ops.bilinear_resize(x, 4, 4).data[0, 0]
    assert (out[0, 0], out[0, 3], out[3, 0], out[3, 3]) == (0.0, 1.0, 2.0, 3.0)
    # source coord of output index 1 is (1 + 0.5) / 2 - 0.5 = 0.25
    np.testing.assert_allclose(out[1, 1], 0.75 * 0.75 * 0 + 0.75 * 0.25 * 1 + 0.25 * 0.75 * 2 + 0.25 * 0.25 * 3)


def test_resize_downsample_averages_pairs():
    x = np.arange(4.0).reshape(1, 1, 1, 4)
    out = ops.bilinear_resize(Tensor(x), 1, 2).data
    np.testing.assert_allclose(out.ravel(), [0.5, 2.5])


# droppath ----------------------------------------------------------------------------------

def test_droppath_eval_is_identity(rng):
    x = Tensor(rng.standard_normal((4, 2, 3, 3)))
    out = ops.droppath(x, DropPathConfig(0.7, "eval"), rng)
    np.testing.assert_array_equal(out.data, x.data)


def test_droppath_train_p0_is_identity(rng):
    x = Tensor(rng.standard_normal((4, 2, 3, 3)))
    np.testing.assert_array_equal(ops.droppath(x, DropPathConfig(0.0, "train"), rng).data, x.data)


def test_droppath_expectation_and_whole_samples():
    x = Tensor(np.ones((10000, 1, 2, 2)))
    out = ops.droppath(x, DropPathConfig(0.5, "train"), np.random.default_rng(0)).data
    assert abs(out.mean() - 1.0) < 0.05
    per_sample = out.reshape(10000, -1)
    assert np.all((per_sample == 0).all(axis=1) | (per_sample == 2.0).all(axis=1))


def test_droppath_config_validation():
    with pytest.raises(ValueError):
        DropPathConfig(1.0)
    with pytest.raises(ValueError):
        DropPathConfig(0.2, "sometimes")
    with pytest.raises(ValueError):
        DropPath(1.5)


def test_droppath_train_needs_rng():
    with pytest.raises(ValueError):
        ops.droppath(Tensor(np.ones((2, 1))), DropPathConfig(0.3, "train"), None)


# gelu ----------------------------------------------------------------------------------------

def test_gelu_tanh_constants():
    x = np.array([-2.0, -0.5, 0.0, 0.7, 3.0])
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, ref, rtol=1e-14)


# every primitive against central differences --------------------------------------------------

PRIMITIVES = primitive_checks(np.random.default_rng(0))
# Randomized points may land where a derivative is tiny next to the summed
# output; the 4-point stencil keeps round-off below the relative tolerance.
PROBE = dict(eps=1e-4, stencil=4)


@pytest.mark.parametrize("name,fn,point", PRIMITIVES, ids=[c[0] for c in PRIMITIVES])
def test_primitive_gradcheck(name, fn, point):
    rep = gradcheck(fn, point, tol=1e-4)
    assert rep.passed, rep


@settings(max_examples=15, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-3, 3)))
def test_layernorm_gradcheck_random(x):
    g = np.random.default_rng(1).standard_normal(3)
    w = Tensor(np.random.default_rng(2).standard_normal(x.shape))
    x = x + 1e-3 * np.arange(x.size).reshape(x.shape)  # keep channel variance away from zero
    rep = gradcheck(lambda t: (ops.layernorm(t, Tensor(g), Tensor(np.zeros(3))) * w).sum(), x, **PROBE)
    assert rep.passed, rep


@settings(max_examples=15, deadline=None)
@given(arrays(np.float64, (2, 4), elements=st.floats(-5, 5)))
def test_gelu_softmax_gradcheck_random(x):
    w = Tensor(np.random.default_rng(3).standard_normal((2, 4)))
    assert gradcheck(lambda t: (ops.gelu(t) * w).sum(), x, **PROBE).passed
    assert gradcheck(lambda t: (ops.softmax(t, axis=1) * w).sum(), x, **PROBE).passed
