import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from gliopipe import autodiff as ad
from gliopipe.autodiff import Tensor

from conftest import grad_check

TOL = 1e-4


def P(rng, *shape, lo=-1.0, hi=1.0):
    return ad.parameter(rng.uniform(lo, hi, shape))


# --- elementwise and reductions -----------------------------------------------

def test_add_mul_broadcast_grad(rng):
    a, b = P(rng, 3, 4), P(rng, 4)
    assert grad_check(lambda: ad.tsum((a + b) * (a * b)), [a, b]) < TOL


def test_div_pow_exp_log_grad(rng):
    a = P(rng, 5, lo=0.5, hi=2.0)
    b = P(rng, 5, lo=0.5, hi=2.0)
    assert grad_check(lambda: ad.tsum(ad.log(a / b) + ad.exp(b) * ad.power(a, 2.5)), [a, b]) < TOL


def test_sub_neg_mean_grad(rng):
    a, b = P(rng, 2, 3), P(rng, 2, 1)
    assert grad_check(lambda: ad.mean((a - b) ** 2) - ad.mean(-a), [a, b]) < TOL


def test_clip_grad_inside(rng):
    a = ad.parameter(np.array([0.2, 0.5, 0.7]))
    assert grad_check(lambda: ad.tsum(ad.clip(a, 0.1, 0.9) ** 2), [a]) < TOL
    b = ad.parameter(np.array([-1.0, 2.0]))
    ad.backward(ad.tsum(ad.clip(b, 0.0, 1.0)))
    assert not b.grad.any()


def test_shape_ops_grad(rng):
    a = P(rng, 2, 3, 4)
    idx = np.array([2, 0, 2])
    assert grad_check(lambda: ad.tsum(ad.transpose(a, (2, 0, 1)).reshape(4, 6) ** 2), [a]) < TOL
    assert grad_check(lambda: ad.tsum(ad.take(a, idx, axis=2) ** 2), [a]) < TOL
    assert grad_check(lambda: ad.tsum(a[:, 1:, ::2] ** 3), [a]) < TOL
    assert grad_check(lambda: ad.tsum(ad.concat([a, a * 2], axis=1) ** 2), [a]) < TOL
    assert grad_check(lambda: ad.tsum(ad.tsum(a, axis=(0, 2)) ** 2), [a]) < TOL


def test_matmul_dense_grad(rng):
    x, w, b = P(rng, 4, 3), P(rng, 3, 5), P(rng, 5)
    assert grad_check(lambda: ad.tsum(ad.sigmoid(ad.dense(x, w, b))), [x, w, b]) < TOL
    a, c = P(rng, 2, 4, 3), P(rng, 3, 2)
    assert grad_check(lambda: ad.tsum(ad.matmul(a, c) ** 2), [a, c]) < TOL


@pytest.mark.parametrize("kind", ["relu", "leaky_relu", "sigmoid"])
def test_activation_grad(rng, kind):
    # keep inputs away from the kink so central differences are valid
    v = rng.uniform(0.1, 1.0, (4, 5)) * rng.choice([-1, 1], (4, 5))
    a = ad.parameter(v)
    assert grad_check(lambda: ad.tsum(ad.activation(kind, a) ** 2), [a]) < TOL


def test_softmax_logsoftmax_grad(rng):
    a = P(rng, 3, 4, 2)
    w = rng.standard_normal((3, 4, 2))
    assert grad_check(lambda: ad.tsum(ad.softmax(a, axis=1) * w), [a]) < TOL
    assert grad_check(lambda: ad.tsum(ad.log_softmax(a, axis=-1) * w), [a]) < TOL


def test_global_avg_pool_grad(rng):
    x = P(rng, 2, 3, 2, 3, 2)
    assert grad_check(lambda: ad.tsum(ad.global_avg_pool(x) ** 2), [x]) < TOL


# --- volumetric kernels --------------------------------------------------------

@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv3d_grad(rng, stride, padding):
    x, w, b = P(rng, 2, 2, 5, 4, 5), P(rng, 3, 2, 3, 3, 3), P(rng, 3)
    r = rng.standard_normal(ad.conv3d(x, w, b, stride, padding).shape)
    assert grad_check(lambda: ad.tsum(ad.conv3d(x, w, b, stride, padding) * r), [x, w, b]) < TOL


def test_conv3d_matches_direct(rng):
    x = rng.standard_normal((1, 2, 4, 5, 3))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    got = ad.conv3d(x, w, padding=1).values
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    want = np.zeros_like(got)
    for f in range(2):
        for z in range(4):
            for y in range(5):
                for xx in range(3):
                    want[0, f, z, y, xx] = (xp[0, :, z:z + 3, y:y + 3, xx:xx + 3] * w[f]).sum()
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_conv_transpose_grad_and_shape(rng):
    x, w, b = P(rng, 2, 3, 2, 3, 2), P(rng, 3, 2, 2, 2, 2), P(rng, 2)
    out = ad.conv_transpose3d(x, w, stride=2, b=b)
    assert out.shape == (2, 2, 4, 6, 4)
    r = rng.standard_normal(out.shape)
    assert grad_check(lambda: ad.tsum(ad.conv_transpose3d(x, w, 2, b) * r), [x, w, b]) < TOL


def test_conv_transpose_is_adjoint(rng):
    # <conv(u), v> == <u, convT(v)> for the same weights
    w = rng.standard_normal((3, 2, 3, 3, 3))   # conv: 2 -> 3 channels
    u = rng.standard_normal((1, 2, 7, 7, 7))
    v = rng.standard_normal((1, 3, 3, 3, 3))
    lhs = (ad.conv3d(u, w, stride=2).values * v).sum()
    rhs = (u * ad.conv_transpose3d(v, w, stride=2).values).sum()
    assert abs(lhs - rhs) < 1e-9


def test_maxpool_grad_and_ties(rng):
    x = ad.parameter(rng.permutation(64).reshape(1, 1, 4, 4, 4).astype(float))
    assert grad_check(lambda: ad.tsum(ad.maxpool3d(x, 2) ** 2), [x]) < TOL
    t = ad.parameter(np.ones((1, 1, 2, 2, 2)))
    ad.backward(ad.tsum(ad.maxpool3d(t, 2)))
    assert t.grad[0, 0, 0, 0, 0] == 1 and t.grad.sum() == 1


def test_upsample_grad(rng):
    x = P(rng, 1, 2, 2, 3, 2)
    out = ad.upsample_nearest(x, 2)
    assert out.shape == (1, 2, 4, 6, 4)
    assert out.values[0, 1, 3, 5, 2] == x.values[0, 1, 1, 2, 1]
    r = rng.standard_normal(out.shape)
    assert grad_check(lambda: ad.tsum(ad.upsample_nearest(x, 2) * r), [x]) < TOL


def test_conv_shape_errors(rng):
    with pytest.raises(ValueError):
        ad.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(ValueError):
        ad.conv3d(np.zeros((1, 1, 2, 2, 2)), np.zeros((1, 1, 3, 3, 3)))
    with pytest.raises(ValueError):
        ad.conv3d(np.zeros((2, 4, 4, 4)), np.zeros((1, 1, 3, 3, 3)))


# --- softmax normalisation ------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(-50, 50)), st.data())
def test_softmax_sums_to_one(arr, data):
    axis = data.draw(st.integers(-arr.ndim, arr.ndim - 1))
    s = ad.softmax(Tensor(arr), axis=axis).values
    assert np.abs(s.sum(axis=axis) - 1).max() <= 1e-12


def test_softmax_bad_axis():
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.zeros((2, 3))), axis=2)


# --- graph semantics ------------------------------------------------------------

def test_backward_accumulates_through_reuse(rng):
    a = P(rng, 3)
    ad.backward(ad.tsum(a * a + a))
    np.testing.assert_allclose(a.grad, 2 * a.values + 1)


def test_stale_graph_rejected(rng):
    a = P(rng, 3)
    loss = ad.tsum(a * 2)
    ad.backward(loss)
    with pytest.raises(ad.GraphError):
        ad.backward(loss)


def test_non_scalar_and_constant_loss():
    with pytest.raises(ad.GraphError):
        ad.backward(ad.parameter(np.ones(3)) * 2)
    with pytest.raises(ad.GraphError):
        ad.backward(Tensor(1.0) * 2)


def test_no_grad_builds_no_graph(rng):
    a = P(rng, 3)
    with ad.no_grad():
        out = a * 2
    assert not out.requires_grad


def test_nonfinite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(ad.NonFiniteError):
        Tensor([np.inf])


def test_numpy_left_operand(rng):
    a = P(rng, 3)
    out = np.ones(3) + a
    assert isinstance(out, Tensor) and out.requires_grad


def test_dropout(rng):
    x = Tensor(np.ones((1000,)))
    assert ad.dropout(x, 0.5, rng, training=False) is x
    y = ad.dropout(x, 0.5, np.random.default_rng(0)).values
    assert set(np.unique(y)) <= {0.0, 2.0}
    np.testing.assert_array_equal(y, ad.dropout(x, 0.5, np.random.default_rng(0)).values)


# --- optimiser and checkpoints ---------------------------------------------------

def test_sgd_step(rng):
    a = ad.parameter(np.array([1.0, 2.0]))
    ad.backward(ad.tsum(a * a))
    ad.sgd_step([a], 0.25)
    np.testing.assert_allclose(a.values, [0.5, 1.0])
    assert a.grad is None
    with pytest.raises(ad.GraphError):
        ad.sgd_step([a], 0.1)


def test_zero_lr_leaves_params(rng):
    a = P(rng, 4)
    before = a.values.copy()
    ad.backward(ad.tsum(a ** 2))
    ad.sgd_step([a], 0.0)
    np.testing.assert_array_equal(a.values, before)


def test_kaiming_bounds(rng):
    w = ad.kaiming_uniform((1000,), 6, rng)
    assert np.abs(w).max() <= 1.0


def test_checkpoint_roundtrip(tmp_path, rng):
    named = [("a.w", rng.standard_normal((2, 3))), ("s", np.array(3.5)), ("b", rng.standard_normal(4))]
    ad.save_checkpoint(tmp_path / "c.ckpt", named)
    back = ad.load_checkpoint(tmp_path / "c.ckpt")
    assert list(back) == ["a.w", "s", "b"]
    for (n, v) in named:
        assert back[n].tobytes() == np.asarray(v, dtype="<f8").tobytes()
    ad.save_checkpoint(tmp_path / "d.ckpt", named)
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path, rng):
    ad.save_checkpoint(tmp_path / "c.ckpt", [("a", rng.standard_normal(4))])
    blob = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-8])
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"nope")
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(ad.CheckpointError):
        ad.save_checkpoint(tmp_path / "y.ckpt", [("bad name", np.zeros(1))])


def test_module_state_strict(tmp_path, rng):
    m = ad.Module()
    m.add_conv("c", 2, 1, 3, rng)
    m.save(tmp_path / "m.ckpt")
    m2 = ad.Module()
    m2.add_conv("c", 2, 1, 3, np.random.default_rng(9))
    m2.load(tmp_path / "m.ckpt")
    for (_, p), (_, q) in zip(m.named_parameters(), m2.named_parameters()):
        np.testing.assert_array_equal(p.values, q.values)
    m3 = ad.Module()
    m3.add_conv("d", 2, 1, 3, rng)
    with pytest.raises(ValueError):
        m3.load(tmp_path / "m.ckpt")
