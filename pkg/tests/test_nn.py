import numpy as np
import pytest

from retarget.mesh import Mesh
from retarget.nn.checkpoint import load_checkpoint, save_checkpoint
from retarget.nn.gradcheck import finite_difference_check
from retarget.nn.layers import ChebConv, Dense, ScaledLaplacian
from retarget.nn.optim import Adam
from retarget.nn.tensor import (
    Tensor,
    absolute,
    add,
    exp,
    l2norm,
    laplacian_apply,
    matmul,
    mul,
    narrow,
    relu,
    reshape,
    square,
    sub,
    tensor_mean,
    tensor_sum,
    transpose01,
)


@pytest.fixture(scope="module")
def lap(tetra):
    return ScaledLaplacian(tetra)


def test_dense_zero_weight_constant_bias():
    rng = np.random.default_rng(0)
    layer = Dense(rng, 4, 3, activation="linear")
    layer.weight.data = np.zeros((4, 3), dtype=np.float32)
    layer.bias.data = np.full(3, 2.5, dtype=np.float32)
    y = layer(Tensor(rng.normal(size=(6, 4)).astype(np.float32)))
    assert np.allclose(y.data, 2.5)


def test_dense_identity_weight_passthrough():
    rng = np.random.default_rng(0)
    layer = Dense(rng, 4, 4, activation="linear")
    layer.weight.data = np.eye(4, dtype=np.float32)
    layer.bias.data = np.zeros(4, dtype=np.float32)
    x = rng.normal(size=(5, 4)).astype(np.float32)
    assert np.array_equal(layer(Tensor(x)).data, x)


def test_dense_matches_float64_matmul_oracle():
    rng = np.random.default_rng(1)
    layer = Dense(rng, 8, 5, activation="tanh")
    x = rng.normal(size=(7, 8)).astype(np.float32)
    y = layer(Tensor(x))
    oracle = np.tanh(x.astype(np.float64) @ layer.weight.data.astype(np.float64) + layer.bias.data.astype(np.float64))
    assert np.abs(y.data - oracle).max() < 1e-5


def test_dense_shape_mismatch():
    rng = np.random.default_rng(0)
    layer = Dense(rng, 4, 3)
    with pytest.raises(ValueError, match="shape mismatch"):
        layer(Tensor(np.zeros((2, 5), dtype=np.float32)))


def test_cheb_order1_identity_theta(lap):
    rng = np.random.default_rng(2)
    conv = ChebConv(rng, 3, 3, order=1, activation="linear", dtype=np.float64)
    conv.theta[0].data = np.eye(3)
    conv.bias.data = np.zeros(3)
    x = rng.normal(size=(4, 3))
    assert np.array_equal(conv(Tensor(x), lap).data, x)


def test_cheb_zero_input_zero_output(lap):
    rng = np.random.default_rng(3)
    conv = ChebConv(rng, 2, 5, order=3, activation="linear", dtype=np.float64)
    y = conv(Tensor(np.zeros((4, 2))), lap)
    assert np.allclose(y.data, 0.0)


def test_cheb_order2_path_graph_matches_dense_oracle():
    # 2-vertex path: one edge; compare against an explicit dense
    # eigendecomposition of the scaled operator
    m = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    lap3 = ScaledLaplacian(m)
    rng = np.random.default_rng(4)
    conv = ChebConv(rng, 1, 1, order=2, activation="linear", dtype=np.float64)
    x = rng.normal(size=(3, 1))
    y = conv(Tensor(x), lap3).data

    Ls = lap3.matrix(np.float64).toarray()
    evals, evecs = np.linalg.eigh(Ls)
    # Chebyshev in the spectral domain: T0 + T1 with per-order weights
    t0, t1 = conv.theta[0].data[0, 0], conv.theta[1].data[0, 0]
    filt = t0 + t1 * evals
    oracle = evecs @ np.diag(filt) @ evecs.T @ x + conv.bias.data[0]
    assert np.abs(y - oracle).max() < 1e-10


def test_cheb_permutation_equivariance(tetra, lap):
    rng = np.random.default_rng(5)
    conv = ChebConv(rng, 2, 3, order=3, dtype=np.float64)
    x = rng.normal(size=(4, 2))
    y = conv(Tensor(x), lap).data
    perm = rng.permutation(4)
    permuted_mesh = Mesh(tetra.vertices[perm], np.argsort(perm)[tetra.faces])
    lap_p = ScaledLaplacian(permuted_mesh)
    y_p = conv(Tensor(x[perm]), lap_p).data
    assert np.abs(y_p - y[perm]).max() < 1e-10


def test_scaled_laplacian_spectrum(parallel_rigs):
    source, _, _ = parallel_rigs
    lap = ScaledLaplacian(source.neutral)
    evals = np.linalg.eigvalsh(lap.matrix(np.float64).toarray())
    assert evals.min() >= -1.0 - 1e-3
    assert evals.max() <= 1.0 + 1e-3


def test_backward_grad_of_half_norm_squared_is_x():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    loss = mul(tensor_sum(square(x)), 0.5)
    loss.backward()
    assert np.allclose(x.grad, x.data)


def test_backward_constant_loss_zero_grads():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = tensor_sum(mul(p, 0.0))
    loss.backward()
    assert np.allclose(p.grad, 0.0)


def test_backward_requires_scalar():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        square(x).backward()


_FD_SEEDS = {"dense": 101, "cheb": 202, "reparam": 303, "l1": 404, "l2norm": 505, "hinge": 606}


@pytest.mark.parametrize("case", ["dense", "cheb", "reparam", "l1", "l2norm", "hinge"])
def test_finite_difference_layers_and_losses(case, lap):
    rng = np.random.default_rng(_FD_SEEDS[case])
    if case == "dense":
        layer = Dense(rng, 6, 4, activation="tanh", dtype=np.float64)
        x = Tensor(rng.normal(size=(5, 6)))
        build = lambda: tensor_mean(square(layer(x)))
        params = layer.params()
    elif case == "cheb":
        conv = ChebConv(rng, 2, 3, order=3, activation="tanh", dtype=np.float64)
        x = Tensor(rng.normal(size=(4, 2)))
        build = lambda: tensor_mean(square(conv(x, lap)))
        params = conv.params()
    elif case == "reparam":
        mu = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        logvar = Tensor(rng.normal(size=(3, 4)) * 0.3, requires_grad=True)
        eps = Tensor(rng.normal(size=(3, 4)))
        target = Tensor(rng.normal(size=(3, 4)))

        def build():
            z = add(mu, mul(exp(mul(logvar, 0.5)), eps))
            kld = mul(tensor_sum(sub(add(square(mu), exp(logvar)), add(Tensor(np.float64(1.0)), logvar))), 0.5)
            return add(tensor_mean(square(sub(z, target))), mul(kld, 1e-2))

        params = [mu, logvar]
    elif case == "l1":
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)))
        t = Tensor(rng.normal(size=(5, 3)))
        build = lambda: tensor_mean(absolute(sub(matmul(x, w), t)))
        params = [w]
    elif case == "l2norm":
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(6, 4)))
        t = Tensor(rng.normal(size=(6, 4)))
        build = lambda: tensor_mean(l2norm(sub(matmul(x, w), t), axis=1))
        params = [w]
    else:
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        xa = Tensor(rng.normal(size=(6, 4)))
        tp = Tensor(rng.normal(size=(6, 4)))
        tn = Tensor(rng.normal(size=(6, 4)))

        def build():
            mapped = matmul(xa, w)
            dp = l2norm(sub(mapped, tp), axis=1)
            dn = l2norm(sub(mapped, tn), axis=1)
            return tensor_mean(relu(add(sub(dp, dn), np.float64(0.2))))

        params = [w]
    err = finite_difference_check(build, params, np.random.default_rng(7), n_coords=30)
    assert err < 1e-4


def test_transpose_narrow_reshape_backward():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
    y = tensor_sum(square(narrow(reshape(transpose01(x), (4, 6)), 1, 1, 3)))
    y.backward()
    err = finite_difference_check(
        lambda: tensor_sum(square(narrow(reshape(transpose01(x), (4, 6)), 1, 1, 3))),
        [x],
        np.random.default_rng(0),
        n_coords=20,
    )
    assert err < 1e-4


def test_laplacian_apply_batch_matches_single(lap):
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 4, 2))
    batched = laplacian_apply(lap, Tensor(np.ascontiguousarray(x.transpose(1, 0, 2)))).data
    for b in range(3):
        single = laplacian_apply(lap, Tensor(x[b])).data
        assert np.abs(batched[:, b, :] - single).max() < 1e-12


# -- optimizer -------------------------------------------------------------


def test_adam_zero_grad_keeps_params():
    p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    assert np.allclose(p.data, [1.0, 2.0])
    assert opt.t == 1


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.01)
    p.grad = np.array([4.2], dtype=np.float32)
    opt.step()
    # bias-corrected first step: -lr * g / (|g| + eps)
    assert abs(float(p.data) - (1.0 - 0.01)) < 1e-6


def test_adam_quadratic_converges():
    p = Tensor(np.array([5.0], dtype=np.float64), requires_grad=True)
    opt = Adam([p], lr=1e-2)
    loss = None
    for _ in range(2000):
        opt.zero_grad()
        loss = tensor_mean(square(p))
        loss.backward()
        opt.step()
    assert float(loss.data) < 1e-6


def test_adam_rejects_nan_gradient():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.01)
    p.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(ValueError, match="non-finite gradient"):
        opt.step()


def test_forward_deterministic(lap):
    rng1 = np.random.default_rng(55)
    rng2 = np.random.default_rng(55)
    c1 = ChebConv(rng1, 2, 3, order=3)
    c2 = ChebConv(rng2, 2, 3, order=3)
    x = np.random.default_rng(1).normal(size=(4, 2)).astype(np.float32)
    assert np.array_equal(c1(Tensor(x), lap).data, c2(Tensor(x), lap).data)


# -- checkpoint container ---------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {"a.weight": rng.normal(size=(4, 3)).astype(np.float32), "b": rng.normal(size=7).astype(np.float32)}
    meta = {"kind": "test", "epoch": 12, "nested": {"x": [1, 2]}}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, meta, arrays)
    meta2, arrays2 = load_checkpoint(path)
    assert meta2 == meta
    assert set(arrays2) == set(arrays)
    for k in arrays:
        assert np.array_equal(arrays2[k], arrays[k])
    # header is one JSON line followed by raw float32 payload
    raw = path.read_bytes()
    header, payload = raw.split(b"\n", 1)
    import json

    h = json.loads(header)
    assert h["dtype"] == "f32le"
    assert len(payload) == sum(a.size for a in arrays.values()) * 4
