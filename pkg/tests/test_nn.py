import numpy as np
import pytest

from parbeam.errors import ContractViolation, InvalidArgument, TrainingDiverged
from parbeam.nn import (Add, BatchNorm, Concat, Conv1x1, Conv3x3, MaxPool2, ReLU, TConv2x2s2, adam_init,
                        adam_step, backward, build_mini_unet, build_sequential, check_tensor, jvp, load_checkpoint,
                        piecewise_lr, save_checkpoint, second_order_param_grad, unet_param_count)

H = 1e-5


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def layer_case(kind, rng):
    """Layer, parameters and input(s) for an isolated gradient check."""
    if kind == "conv3x3":
        layer = Conv3x3(2, 3)
        x = rng.normal(size=(2, 2, 5, 4))
    elif kind == "conv1x1":
        layer = Conv1x1(3, 2)
        x = rng.normal(size=(2, 3, 4, 4))
    elif kind == "relu":
        layer = ReLU()
        x = rng.normal(size=(2, 2, 4, 4))
        x = np.where(np.abs(x) < 0.05, 0.5, x)
    elif kind == "maxpool":
        layer = MaxPool2()
        x = rng.permutation(64).reshape(1, 2, 4, 8) * 0.1  # distinct values, no ties
    elif kind == "tconv":
        layer = TConv2x2s2(3, 2)
        x = rng.normal(size=(2, 3, 3, 2))
    elif kind in ("bn_train", "bn_eval"):
        layer = BatchNorm(2)
        layer.running_mean = rng.normal(size=2)
        layer.running_var = rng.uniform(0.5, 2, 2)
        x = rng.normal(size=(3, 2, 3, 3))
    elif kind == "concat":
        layer = Concat()
        x = (rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 1, 3, 3)))
    elif kind == "add":
        layer = Add()
        x = (rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 2, 3, 3)))
    params = layer.init_params(rng)
    for k in params:
        params[k] = params[k] + 0.3 * rng.normal(size=params[k].shape)
    return layer, params, x, kind == "bn_train"


KINDS = ["conv3x3", "conv1x1", "relu", "maxpool", "tconv", "bn_train", "bn_eval", "concat", "add"]


def _run(layer, params, x, train, xd=None):
    if isinstance(layer, BatchNorm):
        saved = layer.running_mean.copy(), layer.running_var.copy()
        out = layer.forward(params, x, xd, train)
        layer.running_mean, layer.running_var = saved
        return out
    return layer.forward(params, x, xd, train)


@pytest.mark.parametrize("kind", KINDS)
def test_layer_reverse_gradients(kind, rng):
    layer, params, x, train = layer_case(kind, rng)
    y, _, cache = _run(layer, params, x, train)
    u = rng.normal(size=y.shape)
    gx, _, pg = layer.backward(params, cache, u)

    def loss(xx, pp):
        return float(np.sum(u * _run(layer, pp, xx, train)[0]))

    xs = x if isinstance(x, tuple) else (x,)
    gxs = gx if isinstance(x, tuple) else (gx,)
    for i, (xi, gi) in enumerate(zip(xs, gxs)):
        fd = np.zeros_like(xi)
        for idx in np.ndindex(xi.shape):
            xp = [a.copy() for a in xs]
            xm = [a.copy() for a in xs]
            xp[i][idx] += H
            xm[i][idx] -= H
            pack = (lambda v: tuple(v)) if isinstance(x, tuple) else (lambda v: v[0])
            fd[idx] = (loss(pack(xp), params) - loss(pack(xm), params)) / (2 * H)
        assert rel_err(gi, fd) <= 1e-5
    for name, val in params.items():
        fd = np.zeros_like(val)
        for idx in np.ndindex(val.shape):
            pp = {k: v.copy() for k, v in params.items()}
            pm = {k: v.copy() for k, v in params.items()}
            pp[name][idx] += H
            pm[name][idx] -= H
            fd[idx] = (loss(x, pp) - loss(x, pm)) / (2 * H)
        assert rel_err(pg[name], fd) <= 1e-5


@pytest.mark.parametrize("kind", KINDS)
def test_layer_jvp(kind, rng):
    layer, params, x, train = layer_case(kind, rng)
    if isinstance(x, tuple):
        e = tuple(rng.normal(size=a.shape) for a in x)
        xp = tuple(a + H * b for a, b in zip(x, e))
        xm = tuple(a - H * b for a, b in zip(x, e))
    else:
        e = rng.normal(size=x.shape)
        xp, xm = x + H * e, x - H * e
    _, yd, _ = _run(layer, params, x, train, e)
    fd = (_run(layer, params, xp, train)[0] - _run(layer, params, xm, train)[0]) / (2 * H)
    assert rel_err(yd, fd) <= 1e-5


def test_conv_examples(rng):
    c = Conv3x3(1, 1)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    p = {"w": w, "b": np.zeros(1)}
    x = rng.normal(size=(1, 1, 5, 5))
    assert np.array_equal(c.forward(p, x)[0], x)
    ones = {"w": np.ones((1, 1, 3, 3)), "b": np.zeros(1)}
    y = c.forward(ones, np.ones((1, 1, 5, 5)))[0]
    assert y[0, 0, 2, 2] == 9.0 and y[0, 0, 0, 0] == 4.0
    p = {"w": rng.normal(size=(1, 1, 3, 3)), "b": np.zeros(1)}
    a = 2.7
    assert np.max(np.abs(c.forward(p, a * x)[0] - a * c.forward(p, x)[0])) <= 1e-12 * np.abs(x).max() * 10


def test_conv_shape_mismatch(rng):
    c = Conv3x3(2, 1)
    with pytest.raises(InvalidArgument):
        c.forward(c.init_params(rng), rng.normal(size=(1, 3, 4, 4)))


def test_check_tensor():
    with pytest.raises(InvalidArgument):
        check_tensor(np.zeros((2, 2)))


def test_maxpool_ties_first_index():
    x = np.ones((1, 1, 2, 2))
    e = np.arange(4.0).reshape(1, 1, 2, 2)
    y, yd, cache = MaxPool2().forward({}, x, e)
    assert yd[0, 0, 0, 0] == 0.0
    gx, _, _ = MaxPool2().backward({}, cache, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(gx[0, 0], [[1, 0], [0, 0]])


def test_relu_negative_blocks_gradient():
    x = np.array([-1.0, 2.0]).reshape(1, 1, 1, 2)
    _, _, m = ReLU().forward({}, x)
    gx, _, _ = ReLU().backward({}, m, np.ones_like(x))
    np.testing.assert_array_equal(gx.ravel(), [0.0, 1.0])


def small_net(seed=0):
    return build_sequential([("conv3x3", 1, 2), ("relu",), ("conv3x3", 2, 1)], residual=False, seed=seed)


def perturb_biases(net, rng, scale=0.1):
    for p in net.params:
        for k in p:
            p[k] = p[k] + scale * rng.normal(size=p[k].shape)


def test_network_param_gradient(rng):
    net = small_net()
    perturb_biases(net, rng)
    x = rng.normal(size=(2, 1, 5, 5))
    u = rng.normal(size=(2, 1, 5, 5))
    _, gp = backward(net, x, u)
    w0 = net.flatten()
    fd = np.zeros_like(w0)
    for i in range(w0.size):
        for sgn in (1, -1):
            w = w0.copy()
            w[i] += sgn * H
            net.unflatten(w)
            fd[i] += sgn * np.sum(u * net(x)) / (2 * H)
    net.unflatten(w0)
    assert rel_err(gp, fd) <= 1e-5


def test_network_jvp_and_duality(rng):
    net = build_mini_unet(1, 4, seed=3, zero_final=False)
    perturb_biases(net, rng, 0.05)
    x = rng.normal(size=(1, 1, 8, 8))
    e = rng.normal(size=x.shape)
    d = jvp(net, x, e)
    eps = 1e-6
    fd = (net(x + eps * e) - net(x)) / eps
    assert np.linalg.norm(fd - d) <= 1e-4 * np.linalg.norm(d)
    assert np.max(np.abs(jvp(net, x, 3.0 * e) - 3.0 * d)) <= 1e-12 * np.abs(d).max() * 10
    u = rng.normal(size=x.shape)
    gx, _ = backward(net, x, u)
    a, b = float(np.sum(gx * e)), float(np.sum(u * d))
    assert abs(a - b) <= 1e-8 * max(abs(a), 1.0)


def test_linear_subnet_transpose(rng):
    net = build_sequential([("conv3x3", 1, 3), ("conv1x1", 3, 2), ("conv3x3", 2, 1)], seed=1)
    for p in net.params:
        p["b"][:] = 0.0
    x = rng.normal(size=(1, 1, 6, 6))
    e = rng.normal(size=x.shape)
    u = rng.normal(size=x.shape)
    gx, _ = backward(net, x, u)
    assert abs(np.sum(u * jvp(net, x, e)) - np.sum(gx * e)) <= 1e-10 * np.linalg.norm(u) * np.linalg.norm(e) * 10


def test_residual_identity(rng):
    net = build_mini_unet(2, 4, seed=0)
    x = rng.normal(size=(2, 1, 8, 8))
    assert np.array_equal(net(x), x)
    e = rng.normal(size=x.shape)
    assert np.array_equal(jvp(net, x, e), e)


def test_backward_without_forward():
    net = small_net()
    with pytest.raises(ContractViolation):
        net.backward(np.zeros((1, 1, 4, 4)))


def test_backward_tangent_without_direction(rng):
    net = small_net()
    x = rng.normal(size=(1, 1, 4, 4))
    net.forward(x)
    with pytest.raises(ContractViolation):
        net.backward(np.zeros_like(x), np.zeros_like(x))


def test_jvp_shape_mismatch(rng):
    with pytest.raises(InvalidArgument):
        jvp(small_net(), rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 4, 5)))


def test_second_order_zero_direction(rng):
    net = small_net()
    x = rng.normal(size=(1, 1, 4, 4))
    g = second_order_param_grad(net, x, np.zeros_like(x), rng.normal(size=x.shape))
    assert not g.any()


def test_second_order_finite_difference(rng):
    net = build_sequential([("conv3x3", 1, 4), ("relu",), ("conv1x1", 4, 2), ("relu",), ("conv1x1", 2, 1)], seed=4)
    perturb_biases(net, rng)
    assert 40 <= net.n_params <= 60
    x = rng.normal(size=(1, 1, 5, 5))
    e = rng.normal(size=x.shape)
    u = rng.normal(size=x.shape)
    g = second_order_param_grad(net, x, e, u)
    w0 = net.flatten()
    fd = np.zeros_like(w0)
    for i in range(w0.size):
        for sgn in (1, -1):
            w = w0.copy()
            w[i] += sgn * H
            net.unflatten(w)
            fd[i] += sgn * np.sum(u * jvp(net, x, e)) / (2 * H)
    net.unflatten(w0)
    assert rel_err(g, fd) <= 1e-4


def test_second_order_linear_closed_form(rng):
    # y = w * x (single 1x1 conv): d/dw <u, w e> = <u, e>
    net = build_sequential([("conv1x1", 1, 1)], seed=0)
    x = rng.normal(size=(1, 1, 3, 3))
    e = rng.normal(size=x.shape)
    u = rng.normal(size=x.shape)
    g = second_order_param_grad(net, x, e, u)
    # flattened order is b then w
    assert g[0] == 0.0
    assert abs(g[1] - np.sum(u * e)) <= 1e-10


def test_second_order_rejects_batchnorm():
    with pytest.raises(ContractViolation):
        build_mini_unet(1, 4, use_batchnorm=True, second_order=True)
    net = build_mini_unet(1, 4, use_batchnorm=True)
    x = np.ones((1, 1, 4, 4))
    with pytest.raises(ContractViolation):
        second_order_param_grad(net, x, x, x)


def test_batchnorm_train_forbids_tangent_adjoint(rng):
    bn = BatchNorm(2)
    x = rng.normal(size=(2, 2, 3, 3))
    _, _, cache = bn.forward(bn.init_params(rng), x, x, train=True)
    with pytest.raises(ContractViolation):
        bn.backward(bn.init_params(rng), cache, x, x)


def test_unet_param_count_and_shapes(rng):
    net = build_mini_unet(1, 4)
    assert net.n_params == unet_param_count(1, 4) == 1645
    assert build_mini_unet(2, 4).n_params == unet_param_count(2, 4) == 7397
    assert build_mini_unet(2, 4, use_batchnorm=True).n_params == unet_param_count(2, 4, True)
    x = rng.normal(size=(1, 1, 32, 32))
    y, _, tape = net.forward(x)
    assert y.shape == x.shape
    assert [tuple(s) for s in tape.shapes] == net.shapes_for(x.shape)


def test_unet_indivisible_input(rng):
    net = build_mini_unet(2, 4)
    with pytest.raises(InvalidArgument):
        net(rng.normal(size=(1, 1, 10, 10)))
    with pytest.raises(InvalidArgument):
        build_mini_unet(4, 4)


def test_flatten_round_trip(rng):
    net = build_mini_unet(2, 4, use_batchnorm=True, zero_final=False)
    v = rng.normal(size=net.n_params)
    net.unflatten(v)
    assert np.array_equal(net.flatten(), v)
    with pytest.raises(InvalidArgument):
        net.unflatten(v[:-1])


def test_forward_deterministic_and_bn_eval(rng):
    net = build_mini_unet(1, 4, use_batchnorm=True, zero_final=False)
    x = rng.normal(size=(2, 1, 8, 8))
    net.forward(x, train=True)
    a = net(x)
    b = net(x)
    assert np.array_equal(a, b)


def test_checkpoint_round_trip(tmp_path, rng):
    net = build_mini_unet(1, 4, use_batchnorm=True, zero_final=False, seed=2)
    x = rng.normal(size=(2, 1, 8, 8))
    net.forward(x, train=True)
    path = save_checkpoint(tmp_path / "n.pbtk", net)
    other = load_checkpoint(path)
    assert np.array_equal(other.flatten(), net.flatten())
    assert np.array_equal(other(x), net(x))


def test_adam_zero_gradient():
    st = adam_init(3, 0.1)
    p = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(adam_step(st, p, np.zeros(3)), p)


def test_adam_first_step():
    st = adam_init(1, 0.1)
    p = adam_step(st, np.zeros(1), np.ones(1))
    expected = -0.1 * 1.0 / (1.0 + 1e-8)
    assert abs(p[0] - expected) <= 1e-12


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        st = adam_init(4, 1e-2)
        p = rng.normal(size=4)
        for _ in range(100):
            p = adam_step(st, p, rng.normal(size=4))
        return p

    assert np.array_equal(run(), run())


def test_adam_nan_gradient():
    with pytest.raises(TrainingDiverged):
        adam_step(adam_init(2), np.zeros(2), np.array([np.nan, 0.0]))


def test_piecewise_lr():
    assert piecewise_lr(0, 90) == 1e-3
    assert piecewise_lr(89, 90) == pytest.approx(1e-5)
    assert piecewise_lr(45, 90) == pytest.approx(1e-4)
