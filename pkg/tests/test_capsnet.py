import numpy as np
import pytest

from mscaps import tensor as T
from mscaps.capsnet import (
    Arch,
    LossConfig,
    MsCapsParams,
    class_caps_forward,
    conv_caps_forward,
    dynamic_routing,
    fuse_and_classify,
    grid_sizes,
    margin_loss,
    margin_loss_from_norms,
    min_patch_size,
    network_forward,
    param_shapes,
    primary_caps_forward,
    squash,
)
from mscaps.tensor import DimensionError, Tensor, grad_check
from mscaps.training import TrainConfig, init_params

from oracles import routing_loops, squash_direct


@pytest.fixture
def rng():
    return np.random.default_rng(8)


# ---------------------------------------------------------------- squash

def test_squash_examples():
    np.testing.assert_array_equal(squash(np.zeros(8)).data, 0.0)
    e1 = np.eye(4)[0]
    np.testing.assert_allclose(squash(e1).data, 0.5 * e1, atol=1e-16)
    u = np.array([0.6, 0.8])
    np.testing.assert_allclose(squash(3 * u).data, 0.9 * u, atol=1e-15)


def test_squash_contract_across_scales(rng):
    dirs = rng.normal(size=(1000, 8))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    norms = 10 ** rng.uniform(-8, 3, size=1000)
    s = dirs * norms[:, None]
    v = squash(s).data
    vn = np.linalg.norm(v, axis=1)
    sn = np.linalg.norm(s, axis=1)
    assert np.max(np.abs(vn - sn ** 2 / (1 + sn ** 2))) <= 1e-12
    cos = (v * s).sum(axis=1) / (vn * sn)
    assert np.max(np.abs(cos - 1.0)) <= 1e-12
    assert (vn < 1.0).all()
    order = np.argsort(sn)
    assert (np.diff(vn[order]) >= 0).all()
    np.testing.assert_allclose(v[:5], np.stack([squash_direct(x) for x in s[:5]]), atol=1e-15, rtol=0)


def test_squash_gradient(rng):
    w = rng.normal(size=(3, 8))
    assert grad_check(lambda s: T.sum(T.mul(squash(s), w)), rng.normal(size=(3, 8)), 1e-5) < 1e-4


# ---------------------------------------------------------------- primary caps

def test_primary_shapes_and_bounds(rng):
    f = rng.normal(size=(9, 9, 64))
    p1 = primary_caps_forward(f, rng.normal(size=(3, 3, 64, 64)) * 0.05, 8)
    p2 = primary_caps_forward(f, rng.normal(size=(5, 5, 64, 64)) * 0.05, 8)
    assert p1.shape == (7, 7, 8, 8) and p2.shape == (5, 5, 8, 8)
    assert (np.linalg.norm(p1.data, axis=-1) < 1).all()
    np.testing.assert_array_equal(primary_caps_forward(np.zeros((9, 9, 64)), np.ones((3, 3, 64, 64))).data, 0.0)
    with pytest.raises(ValueError):
        primary_caps_forward(f, np.zeros((3, 3, 64, 60)), 8)


# ---------------------------------------------------------------- routing

def _hand_unrolled_2x2(u):
    """Two inputs, two outputs, two iterations, written out step by step."""
    # iteration 1: b = 0 -> c = 1/2
    s0 = 0.5 * u[0, 0] + 0.5 * u[1, 0]
    s1 = 0.5 * u[0, 1] + 0.5 * u[1, 1]
    v0, v1 = squash_direct(s0), squash_direct(s1)
    b00, b01 = u[0, 0] @ v0, u[0, 1] @ v1
    b10, b11 = u[1, 0] @ v0, u[1, 1] @ v1
    # iteration 2
    c00 = np.exp(b00) / (np.exp(b00) + np.exp(b01))
    c01 = 1 - c00
    c10 = np.exp(b10) / (np.exp(b10) + np.exp(b11))
    c11 = 1 - c10
    s0 = c00 * u[0, 0] + c10 * u[1, 0]
    s1 = c01 * u[0, 1] + c11 * u[1, 1]
    return np.stack([squash_direct(s0), squash_direct(s1)]), np.array([[c00, c01], [c10, c11]])


def test_routing_2x2_hand_unrolled():
    u = np.array([[[0.3, -0.8], [1.2, 0.4]], [[-0.5, 0.9], [0.7, 0.2]]])
    v, c = dynamic_routing(u, 2)
    v_ref, c_ref = _hand_unrolled_2x2(u)
    assert np.max(np.abs(v.data - v_ref)) <= 1e-12
    assert np.max(np.abs(c.data - c_ref)) <= 1e-12


def test_routing_coefficient_invariants(rng):
    u = rng.normal(size=(4, 50, 8, 8))  # batch of 4
    trace = []
    dynamic_routing(u, 3, trace)
    assert len(trace) == 3
    np.testing.assert_array_equal(trace[0], 1.0 / 8)
    for c in trace:
        assert np.max(np.abs(c.sum(axis=-1) - 1.0)) <= 1e-12
        assert ((c > 0) & (c < 1)).all()


def test_routing_matches_loop_oracle(rng):
    u = rng.normal(size=(3, 12, 4, 6))
    v, _ = dynamic_routing(u, 3)
    for n in range(3):
        np.testing.assert_allclose(v.data[n], routing_loops(u[n], 3)[0], atol=1e-12, rtol=0)


def test_routing_single_output_and_one_iteration(rng):
    u = rng.normal(size=(7, 1, 5))
    trace = []
    v, _ = dynamic_routing(u, 3, trace)
    for c in trace:
        np.testing.assert_array_equal(c, 1.0)
    np.testing.assert_allclose(v.data[0], squash_direct(u[:, 0].sum(axis=0)), atol=1e-14)
    u = rng.normal(size=(7, 3, 5))
    v1, _ = dynamic_routing(u, 1)
    ref = np.stack([squash_direct(u[:, j].sum(axis=0) / 3) for j in range(3)])
    np.testing.assert_allclose(v1.data, ref, atol=1e-14, rtol=0)


def test_routing_gradient(rng):
    w = rng.normal(size=(3, 4))
    assert grad_check(lambda u: T.sum(T.mul(dynamic_routing(u, 3)[0], w)), rng.normal(size=(5, 3, 4)), 1e-5) < 1e-4
    with pytest.raises(ValueError):
        dynamic_routing(rng.normal(size=(2, 2, 2)), 0)


# ---------------------------------------------------------------- conv caps

def _conv_caps_oracle(grid, W, ext, iters, out_dim):
    g, _, n, d = grid.shape
    n_out = W.shape[2] // out_dim
    go = g - ext + 1
    out = np.zeros((go, go, n_out, out_dim))
    for y in range(go):
        for x in range(go):
            us = []
            for dy in range(ext):
                for dx in range(ext):
                    for t in range(n):
                        slot = (dy * ext + dx) * n + t
                        us.append((grid[y + dy, x + dx, t] @ W[slot]).reshape(n_out, out_dim))
            out[y, x] = routing_loops(np.stack(us), iters)[0]
    return out


def test_conv_caps_toy_grid_matches_oracle(rng):
    grid = rng.normal(size=(3, 3, 1, 2)) * 0.5
    W = rng.normal(size=(9, 2, 2))
    out = conv_caps_forward(grid, W, 3, iters=2, out_dim=2)
    assert out.shape == (1, 1, 1, 2)
    assert np.max(np.abs(out.data - _conv_caps_oracle(grid, W, 3, 2, 2))) <= 1e-12


def test_conv_caps_general_oracle(rng):
    grid = rng.normal(size=(5, 5, 2, 3)) * 0.5
    W = rng.normal(size=(18, 3, 2 * 4))
    out = conv_caps_forward(grid, W, 3, iters=3, out_dim=4)
    np.testing.assert_allclose(out.data, _conv_caps_oracle(grid, W, 3, 3, 4), atol=1e-12, rtol=0)


def test_conv_caps_shapes_and_zero_w(rng):
    W = rng.normal(size=(72, 8, 64)) * 0.1
    assert conv_caps_forward(rng.normal(size=(7, 7, 8, 8)), W).shape == (5, 5, 8, 8)
    assert conv_caps_forward(rng.normal(size=(2, 5, 5, 8, 8)), W).shape == (2, 3, 3, 8, 8)
    np.testing.assert_array_equal(conv_caps_forward(rng.normal(size=(5, 5, 8, 8)), np.zeros((72, 8, 64))).data, 0.0)
    with pytest.raises(ValueError):
        conv_caps_forward(rng.normal(size=(2, 2, 8, 8)), W)
    with pytest.raises(DimensionError):
        conv_caps_forward(rng.normal(size=(5, 5, 8, 8)), np.zeros((70, 8, 64)))


def test_conv_caps_gradients(rng):
    grid0 = rng.normal(size=(4, 4, 2, 3)) * 0.5
    W0 = rng.normal(size=(18, 3, 8)) * 0.5
    w = rng.normal(size=(2, 2, 2, 4))
    assert grad_check(lambda g: T.sum(T.mul(conv_caps_forward(g, W0, 3, 3, 4), w)), grid0, 1e-5) < 1e-4
    assert grad_check(lambda W: T.sum(T.mul(conv_caps_forward(Tensor(grid0), W, 3, 3, 4), w)), W0, 1e-5) < 1e-4


# ---------------------------------------------------------------- class caps

def test_class_caps_shape_and_zero(rng):
    W = rng.normal(size=(200, 8, 32)) * 0.1
    assert class_caps_forward(rng.normal(size=(5, 5, 8, 8)), W).shape == (2, 16)
    np.testing.assert_array_equal(class_caps_forward(np.zeros((5, 5, 8, 8)), W).data, 0.0)
    with pytest.raises(DimensionError):
        class_caps_forward(rng.normal(size=(3, 3, 8, 8)), W)


def test_class_caps_tiny_oracle(rng):
    grid = rng.normal(size=(1, 1, 2, 2))
    W = rng.normal(size=(2, 2, 2 * 3))
    u = np.stack([(grid[0, 0, i] @ W[i]).reshape(2, 3) for i in range(2)])
    out = class_caps_forward(grid, W, iters=3, class_dim=3)
    assert np.max(np.abs(out.data - routing_loops(u, 3)[0])) <= 1e-12


def test_class_caps_gradients(rng):
    grid0 = rng.normal(size=(2, 2, 2, 3)) * 0.5
    W0 = rng.normal(size=(8, 3, 2 * 4)) * 0.5
    w = rng.normal(size=(2, 4))
    assert grad_check(lambda g: T.sum(T.mul(class_caps_forward(g, W0, 3, 4), w)), grid0, 1e-5) < 1e-4
    assert grad_check(lambda W: T.sum(T.mul(class_caps_forward(Tensor(grid0), W, 3, 4), w)), W0, 1e-5) < 1e-4


# ---------------------------------------------------------------- fusion and loss

def test_fuse_examples(rng):
    v = np.zeros((2, 16))
    v[0, 0], v[1, 3] = 0.2, 0.8
    _, cls, norms = fuse_and_classify(v, v)
    assert cls == 1
    np.testing.assert_allclose(norms.data, [0.4, 1.6], atol=1e-15)
    _, cls, norms = fuse_and_classify(v, -v)
    assert cls == 0
    np.testing.assert_array_equal(norms.data, [0.0, 0.0])
    a, b = rng.normal(size=(2, 16)), rng.normal(size=(2, 16))
    _, _, norms = fuse_and_classify(a, b)
    ref = [np.sqrt(sum((a[k, i] + b[k, i]) ** 2 for i in range(16))) for k in range(2)]
    assert np.max(np.abs(norms.data - ref)) <= 1e-12


def _caps_with_norms(n0, n1):
    v = np.zeros((2, 16))
    v[0, 2], v[1, 5] = n0, n1
    return v


@pytest.mark.parametrize("norms,expected", [((0.1, 0.9), 0.0), ((0.1, 0.4), 0.25), ((0.5, 0.5), 0.24)])
def test_margin_loss_points(norms, expected):
    assert abs(margin_loss(_caps_with_norms(*norms), 1).item() - expected) <= 1e-12
    assert abs(margin_loss_from_norms(norms, 1) - expected) <= 1e-12


def test_margin_loss_zero_iff_margins(rng):
    for _ in range(200):
        n = rng.uniform(0, 1.2, size=2)
        label = int(rng.integers(0, 2))
        loss = margin_loss(_caps_with_norms(*n), label).item()
        assert loss >= 0
        ok = n[label] >= 0.9 and n[1 - label] <= 0.1
        assert (loss == 0.0) == ok


def test_margin_loss_batched_and_config(rng):
    v = rng.normal(size=(5, 2, 16)) * 0.1
    labels = np.array([0, 1, 1, 0, 1])
    per = margin_loss(v, labels).data
    for i in range(5):
        assert abs(per[i] - margin_loss_from_norms(np.linalg.norm(v[i], axis=-1), labels[i])) < 1e-14
    with pytest.raises(ValueError):
        LossConfig(m_plus=0.1, m_minus=0.9)


def test_margin_loss_gradient(rng):
    labels = np.array([0, 1, 1])
    assert grad_check(lambda v: T.sum(margin_loss(v, labels)), rng.normal(size=(3, 2, 16)) * 0.2, 1e-5) < 1e-4


# ---------------------------------------------------------------- full network

@pytest.mark.parametrize("r,g1,g2", [(9, (7, 5), (5, 3)), (11, (9, 7), (7, 5))])
def test_shape_chain(rng, r, g1, g2):
    params = init_params(0, TrainConfig(r=r))
    shapes = {}
    cls, norms, v_o = network_forward(rng.uniform(size=(r, r, 1)), params, 3, shapes)
    assert shapes["afc"] == (r, r, 64)
    assert shapes["primary1"] == (g1[0], g1[0], 8, 8) and shapes["convcaps1"] == (g1[1], g1[1], 8, 8)
    assert shapes["primary2"] == (g2[0], g2[0], 8, 8) and shapes["convcaps2"] == (g2[1], g2[1], 8, 8)
    assert shapes["classcaps1"] == shapes["classcaps2"] == (2, 16)
    assert v_o.shape == (2, 16) and norms.shape == (2,)
    assert grid_sizes(r) == [g1, g2]


def test_network_batched_matches_single(rng):
    params = init_params(1, TrainConfig())
    x = rng.uniform(size=(3, 9, 9, 1))
    cls, norms, _ = network_forward(x, params)
    for b in range(3):
        c1, n1, _ = network_forward(x[b], params)
        np.testing.assert_allclose(norms.data[b], n1.data, atol=1e-13)
        assert cls[b] == c1


def test_network_errors_and_zero_params(rng):
    assert min_patch_size() == 7
    with pytest.raises(ValueError, match="r >= 7"):
        network_forward(rng.uniform(size=(5, 5, 1)), MsCapsParams.zeros(9))
    with pytest.raises(DimensionError):
        network_forward(rng.uniform(size=(11, 11, 1)), MsCapsParams.zeros(9))
    cls, norms, _ = network_forward(rng.uniform(size=(9, 9, 1)), MsCapsParams.zeros(9))
    assert cls == 0
    np.testing.assert_array_equal(norms.data, [0.0, 0.0])


def test_network_bit_reproducible(rng):
    x = rng.uniform(size=(2, 9, 9, 1))
    a = network_forward(x, init_params(4, TrainConfig()))[2].data
    b = network_forward(x, init_params(4, TrainConfig()))[2].data
    assert a.tobytes() == b.tobytes()


def test_param_count_r9():
    shapes = param_shapes(9, Arch())
    assert sum(int(np.prod(s)) for s in shapes.values()) == 289641
    assert shapes["classcaps1"] == (200, 8, 32) and shapes["classcaps2"] == (72, 8, 32)


def test_end_to_end_gradient_every_tensor(rng):
    params = init_params(3, TrainConfig())
    x = rng.uniform(size=(2, 9, 9, 1))
    labels = np.array([0, 1])
    for name, t in params.items():
        def loss_of(p, name=name):
            q = MsCapsParams(dict(params.tensors), 9)
            q.tensors[name] = p
            return T.mean(margin_loss(network_forward(x, q)[2], labels))

        coords = rng.choice(t.size, size=min(t.size, 6), replace=False)
        assert grad_check(loss_of, t.data, 1e-5, coords) < 1e-4, name
